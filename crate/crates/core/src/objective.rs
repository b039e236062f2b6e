//! Losses, the softplus nonlinearity, and the per-stage boosting objective.
//!
//! A boosting stage fits one perceptron `a + b * g(w . x)` on top of the
//! predictions accumulated so far. Its objective is the mean pointwise loss
//! plus a ridge penalty `lambda * |w|^2 / p`. Gradients are analytic.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::TaskKind;
use crate::error::{GbmapError, Result};
use crate::matrix::{dot, Matrix};

/// Rows per partition for the parallel row sums, independent of thread count.
const ROW_CHUNK: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Quadratic,
    Logistic,
}

impl LossKind {
    pub fn for_task(task: TaskKind) -> Self {
        match task {
            TaskKind::Regression => LossKind::Quadratic,
            TaskKind::Classification => LossKind::Logistic,
        }
    }
}

/// The perceptron nonlinearity `g`.
///
/// `Identity` turns every stage into a linear model. It exists to check the
/// linear reduction (ordinary least squares / logistic regression at stage
/// one) and to fit linear baselines with the same numeric core.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Softplus,
    Identity,
}

impl Activation {
    #[inline]
    pub fn eval(self, z: f64, beta: f64) -> f64 {
        match self {
            Activation::Softplus => softplus_raw(z, beta),
            Activation::Identity => z,
        }
    }

    #[inline]
    pub fn derivative(self, z: f64, beta: f64) -> f64 {
        match self {
            Activation::Softplus => sigmoid(beta * z),
            Activation::Identity => 1.0,
        }
    }
}

/// Sign of a weak learner's output, `b` in `a + b * g(w . x)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "i8", try_from = "i8")]
pub enum Sign {
    Negative,
    Positive,
}

impl Sign {
    #[inline]
    pub fn value(self) -> f64 {
        match self {
            Sign::Negative => -1.0,
            Sign::Positive => 1.0,
        }
    }
}

impl From<Sign> for i8 {
    fn from(s: Sign) -> i8 {
        match s {
            Sign::Negative => -1,
            Sign::Positive => 1,
        }
    }
}

impl TryFrom<i8> for Sign {
    type Error = String;

    fn try_from(v: i8) -> std::result::Result<Self, String> {
        match v {
            -1 => Ok(Sign::Negative),
            1 => Ok(Sign::Positive),
            other => Err(format!("sign must be -1 or +1, got {other}")),
        }
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^t)` without overflow.
#[inline]
fn log1p_exp(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

#[inline]
pub(crate) fn softplus_raw(z: f64, beta: f64) -> f64 {
    log1p_exp(beta * z) / beta
}

fn check_softplus_args(z: f64, beta: f64) -> Result<()> {
    if !z.is_finite() {
        return Err(GbmapError::invalid(format!("softplus input must be finite, got {z}")));
    }
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(GbmapError::invalid(format!("softplus beta must be positive, got {beta}")));
    }
    Ok(())
}

/// `log(1 + e^(beta z)) / beta`, the smooth ReLU with sharpness `beta`.
pub fn softplus(z: f64, beta: f64) -> Result<f64> {
    check_softplus_args(z, beta)?;
    Ok(softplus_raw(z, beta))
}

/// Derivative of [`softplus`] in `z`, which is `sigmoid(beta z)`.
pub fn softplus_derivative(z: f64, beta: f64) -> Result<f64> {
    check_softplus_args(z, beta)?;
    Ok(sigmoid(beta * z))
}

#[inline]
pub(crate) fn loss_raw(kind: LossKind, y: f64, yhat: f64) -> f64 {
    match kind {
        LossKind::Quadratic => (y - yhat) * (y - yhat),
        LossKind::Logistic => log1p_exp(-y * yhat),
    }
}

/// d loss / d yhat.
#[inline]
pub(crate) fn loss_derivative(kind: LossKind, y: f64, yhat: f64) -> f64 {
    match kind {
        LossKind::Quadratic => 2.0 * (yhat - y),
        LossKind::Logistic => -y * sigmoid(-y * yhat),
    }
}

pub fn pointwise_loss(kind: LossKind, y: f64, yhat: f64) -> Result<f64> {
    if kind == LossKind::Logistic && y != 1.0 && y != -1.0 {
        return Err(GbmapError::invalid(format!("logistic loss needs a target of -1 or +1, got {y}")));
    }
    Ok(loss_raw(kind, y, yhat))
}

/// Mean pointwise loss of a prediction vector.
pub(crate) fn mean_loss(kind: LossKind, y: &[f64], yhat: &[f64]) -> f64 {
    y.iter().zip(yhat).map(|(&t, &p)| loss_raw(kind, t, p)).sum::<f64>() / y.len() as f64
}

/// Everything a stage objective needs besides the stage parameters.
#[derive(Debug, Clone, Copy)]
pub struct StageContext<'a> {
    pub rows: &'a Matrix,
    pub targets: &'a [f64],
    /// Predictions of the ensemble built so far, `f_0 + ... + f_{j-1}`.
    pub accumulated: &'a [f64],
    pub beta: f64,
    pub lambda: f64,
    pub sign: Sign,
    pub activation: Activation,
}

impl<'a> StageContext<'a> {
    pub fn new(
        rows: &'a Matrix,
        targets: &'a [f64],
        accumulated: &'a [f64],
        beta: f64,
        lambda: f64,
        sign: Sign,
    ) -> Result<Self> {
        let ctx = StageContext { rows, targets, accumulated, beta, lambda, sign, activation: Activation::Softplus };
        ctx.validate()?;
        Ok(ctx)
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    fn validate(&self) -> Result<()> {
        let n = self.rows.rows();
        if n == 0 {
            return Err(GbmapError::invalid("stage needs at least one row"));
        }
        if self.targets.len() != n {
            return Err(GbmapError::dim_mismatch("targets", n, self.targets.len()));
        }
        if self.accumulated.len() != n {
            return Err(GbmapError::dim_mismatch("accumulated predictions", n, self.accumulated.len()));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(GbmapError::invalid(format!("beta must be positive, got {}", self.beta)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(GbmapError::invalid(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.rows.cols()
    }

    fn check_params(&self, w: &[f64]) -> Result<()> {
        self.validate()?;
        if w.len() != self.dim() {
            return Err(GbmapError::dim_mismatch("projection vector", self.dim(), w.len()));
        }
        Ok(())
    }

    fn ridge(&self, w: &[f64]) -> f64 {
        self.lambda * dot(w, w) / w.len() as f64
    }

    /// Value and, optionally, gradient `(d/da, d/dw)` of the stage objective.
    /// Callers must have validated dimensions.
    pub(crate) fn evaluate(&self, kind: LossKind, a: f64, w: &[f64], grad: Option<(&mut f64, &mut [f64])>) -> f64 {
        let n = self.rows.rows();
        let p = self.dim();
        let b = self.sign.value();
        let want_grad = grad.is_some();

        let partials: Vec<(f64, f64, Vec<f64>)> = (0..n.div_ceil(ROW_CHUNK))
            .into_par_iter()
            .map(|c| {
                let start = c * ROW_CHUNK;
                let end = (start + ROW_CHUNK).min(n);
                let mut loss = 0.0;
                let mut da = 0.0;
                let mut dw = if want_grad { vec![0.0; p] } else { Vec::new() };
                for i in start..end {
                    let x = self.rows.row(i);
                    let z = dot(w, x);
                    let yhat = self.accumulated[i] + a + b * self.activation.eval(z, self.beta);
                    let y = self.targets[i];
                    loss += loss_raw(kind, y, yhat);
                    if want_grad {
                        let r = loss_derivative(kind, y, yhat);
                        da += r;
                        let scale = r * b * self.activation.derivative(z, self.beta);
                        for (g, xi) in dw.iter_mut().zip(x) {
                            *g += scale * xi;
                        }
                    }
                }
                (loss, da, dw)
            })
            .collect();

        let inv_n = 1.0 / n as f64;
        let mut loss = 0.0;
        match grad {
            Some((ga, gw)) => {
                *ga = 0.0;
                gw.fill(0.0);
                for (l, da, dw) in &partials {
                    loss += l;
                    *ga += da;
                    for (g, d) in gw.iter_mut().zip(dw) {
                        *g += d;
                    }
                }
                *ga *= inv_n;
                let ridge_scale = 2.0 * self.lambda / p as f64;
                for (g, wk) in gw.iter_mut().zip(w) {
                    *g = *g * inv_n + ridge_scale * wk;
                }
            }
            None => {
                for (l, _, _) in &partials {
                    loss += l;
                }
            }
        }
        loss * inv_n + self.ridge(w)
    }
}

/// Regularized empirical loss of one stage with parameters `(a, w)`.
pub fn stage_objective(ctx: &StageContext<'_>, kind: LossKind, a: f64, w: &[f64]) -> Result<f64> {
    ctx.check_params(w)?;
    Ok(ctx.evaluate(kind, a, w, None))
}

/// Analytic gradient of [`stage_objective`] with respect to `(a, w)`.
pub fn stage_gradient(ctx: &StageContext<'_>, kind: LossKind, a: f64, w: &[f64]) -> Result<(f64, Vec<f64>)> {
    ctx.check_params(w)?;
    let mut da = 0.0;
    let mut dw = vec![0.0; w.len()];
    ctx.evaluate(kind, a, w, Some((&mut da, &mut dw)));
    Ok((da, dw))
}
