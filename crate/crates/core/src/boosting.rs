//! Stage-wise fitting of the perceptron ensemble.
//!
//! Stage `j` solves `min_{a, w} L_j + lambda |w|^2 / p` twice, once per sign
//! `b`, and keeps the sign with the smaller regularized loss. Every stage
//! starts at a learner contributing nothing (`a = -b g(0)`, `w` small), and a
//! stage is only installed if it does not raise the training loss, so the
//! loss trajectory is non-increasing.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{seeded_rng, Dataset, SeededRng, TaskKind};
use crate::error::{GbmapError, Result};
use crate::matrix::{dot, Matrix};
use crate::model::GbmapModel;
use crate::objective::{mean_loss, Activation, LossKind, Sign, StageContext};
use crate::optimizer::{minimize, OptimizerConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    /// Number of boosting stages (embedding dimension).
    pub m: usize,
    /// Softplus sharpness.
    pub beta: f64,
    /// Ridge weight on the projection vectors.
    pub lambda: f64,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    pub task: TaskKind,
    /// Half-width of the uniform distribution for initial projection weights.
    pub init_scale: f64,
    pub retries_per_stage: usize,
    #[serde(default)]
    pub activation: Activation,
}

impl FitConfig {
    /// Defaults: m = 20, beta = 5, lambda = 1e-3, 200 optimizer iterations.
    pub fn new(task: TaskKind) -> Self {
        FitConfig {
            m: 20,
            beta: 5.0,
            lambda: 1e-3,
            optimizer: OptimizerConfig::default(),
            seed: 0,
            task,
            init_scale: 1e-2,
            retries_per_stage: 3,
            activation: Activation::Softplus,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(GbmapError::invalid("m must be at least 1"));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(GbmapError::invalid(format!("beta must be positive, got {}", self.beta)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(GbmapError::invalid(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return Err(GbmapError::invalid("init_scale must be non-negative"));
        }
        self.optimizer.validate()
    }

    pub fn loss(&self) -> LossKind {
        LossKind::for_task(self.task)
    }
}

/// One stage `f(x) = a + b * g(w . x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeakLearner {
    pub a: f64,
    pub b: Sign,
    pub w: Vec<f64>,
}

impl WeakLearner {
    /// The learner that outputs exactly zero everywhere.
    pub fn zero(p: usize, b: Sign, beta: f64, activation: Activation) -> Self {
        WeakLearner { a: -b.value() * activation.eval(0.0, beta), b, w: vec![0.0; p] }
    }

    #[inline]
    pub fn eval(&self, x: &[f64], beta: f64, activation: Activation) -> f64 {
        self.a + self.b.value() * activation.eval(dot(&self.w, x), beta)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.a.is_finite() || !self.w.iter().all(|v| v.is_finite()) {
            return Err(GbmapError::invalid("weak learner has non-finite parameters"));
        }
        Ok(())
    }
}

/// A model whose output seeds the ensemble.
pub trait BaseModel: Send + Sync + fmt::Debug {
    fn predict(&self, x: &[f64]) -> f64;

    /// Gradient in `x`, when known.
    fn gradient(&self, _x: &[f64]) -> Option<Vec<f64>> {
        None
    }
}

/// The initial model `f_0`.
#[derive(Debug, Clone, Default)]
pub enum InitialModel {
    #[default]
    Zero,
    /// `intercept + coefficients . x`.
    Linear { intercept: f64, coefficients: Vec<f64> },
    /// Response-scale predictor used as is.
    External(Arc<dyn BaseModel>),
    /// Predictor of `P(y = +1 | x)`, mapped through the logit.
    ExternalProbability(Arc<dyn BaseModel>),
}

/// Clamp keeping the logit finite.
const PROBABILITY_EPS: f64 = 1e-15;

impl InitialModel {
    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            InitialModel::Zero => 0.0,
            InitialModel::Linear { intercept, coefficients } => intercept + dot(coefficients, x),
            InitialModel::External(m) => m.predict(x),
            InitialModel::ExternalProbability(m) => {
                let p = m.predict(x).clamp(PROBABILITY_EPS, 1.0 - PROBABILITY_EPS);
                (p / (1.0 - p)).ln()
            }
        }
    }

    /// Gradient of `eval`, or `None` when the model does not expose one.
    pub fn gradient(&self, x: &[f64]) -> Option<Vec<f64>> {
        match self {
            InitialModel::Zero => Some(vec![0.0; x.len()]),
            InitialModel::Linear { coefficients, .. } => Some(coefficients.clone()),
            InitialModel::External(m) => m.gradient(x),
            InitialModel::ExternalProbability(m) => {
                let p = m.predict(x).clamp(PROBABILITY_EPS, 1.0 - PROBABILITY_EPS);
                let g = m.gradient(x)?;
                let scale = 1.0 / (p * (1.0 - p));
                Some(g.into_iter().map(|v| v * scale).collect())
            }
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, InitialModel::Zero)
    }

    fn check_dim(&self, p: usize) -> Result<()> {
        if let InitialModel::Linear { coefficients, intercept } = self {
            if coefficients.len() != p {
                return Err(GbmapError::dim_mismatch("initial model coefficients", p, coefficients.len()));
            }
            if !intercept.is_finite() || !coefficients.iter().all(|c| c.is_finite()) {
                return Err(GbmapError::invalid("initial model has non-finite coefficients"));
            }
        }
        Ok(())
    }
}

/// Starting point for one sign branch: `w ~ U(-init_scale, init_scale)` and
/// `a = -b g(0)`, so the stage initially adds (almost) nothing.
pub fn stage_initial_point(p: usize, sign: Sign, rng: &mut SeededRng, config: &FitConfig) -> (f64, Vec<f64>) {
    let s = config.init_scale;
    let w = (0..p).map(|_| if s > 0.0 { rng.random_range(-s..=s) } else { 0.0 }).collect();
    let a = -sign.value() * config.activation.eval(0.0, config.beta);
    (a, w)
}

struct Candidate {
    learner: WeakLearner,
    outputs: Vec<f64>,
    regularized: f64,
    loss: f64,
}

fn solve_branch(
    x: &Matrix,
    y: &[f64],
    acc: &[f64],
    config: &FitConfig,
    sign: Sign,
    start: (f64, Vec<f64>),
) -> Result<Candidate> {
    let kind = config.loss();
    let ctx = StageContext::new(x, y, acc, config.beta, config.lambda, sign)?.with_activation(config.activation);
    let p = x.cols();
    let mut x0 = Vec::with_capacity(p + 1);
    x0.push(start.0);
    x0.extend_from_slice(&start.1);

    let result = minimize(
        |theta, grad| {
            let (ga, gw) = grad.split_first_mut().expect("non-empty parameter vector");
            ctx.evaluate(kind, theta[0], &theta[1..], Some((ga, gw)))
        },
        &x0,
        &config.optimizer,
    )?;
    let learner = WeakLearner { a: result.solution[0], b: sign, w: result.solution[1..].to_vec() };
    let outputs: Vec<f64> = x.iter_rows().map(|r| learner.eval(r, config.beta, config.activation)).collect();
    let updated: Vec<f64> = acc.iter().zip(&outputs).map(|(a, o)| a + o).collect();
    let loss = mean_loss(kind, y, &updated);
    Ok(Candidate { learner, outputs, regularized: result.objective_value, loss })
}

/// Fits `config.m` stages on top of `f0`.
///
/// The data must already carry whatever intercept column the caller wants;
/// the returned model has no preprocessing attached.
pub fn fit(data: &Dataset, config: &FitConfig, f0: InitialModel) -> Result<GbmapModel> {
    config.validate()?;
    data.validate()?;
    if data.n() < 2 {
        return Err(GbmapError::invalid("fitting needs at least 2 rows"));
    }
    if data.task != config.task {
        return Err(GbmapError::invalid(format!(
            "dataset task is {} but config task is {}",
            data.task.as_str(),
            config.task.as_str()
        )));
    }
    let p = data.p();
    f0.check_dim(p)?;
    let x = &data.x;
    let y = &data.y;
    let kind = config.loss();

    let mut acc: Vec<f64> = x.iter_rows().map(|r| f0.eval(r)).collect();
    if !acc.iter().all(|v| v.is_finite()) {
        return Err(GbmapError::Numeric("initial model produced non-finite predictions".into()));
    }
    let mut training_loss = vec![mean_loss(kind, y, &acc)];
    let mut learners = Vec::with_capacity(config.m);
    let mut rng = seeded_rng(config.seed);

    for _stage in 0..config.m {
        let previous = *training_loss.last().expect("initial loss recorded");
        let mut chosen: Option<Candidate> = None;
        for _attempt in 0..=config.retries_per_stage {
            let neg_start = stage_initial_point(p, Sign::Negative, &mut rng, config);
            let pos_start = stage_initial_point(p, Sign::Positive, &mut rng, config);
            let (neg, pos) = rayon::join(
                || solve_branch(x, y, &acc, config, Sign::Negative, neg_start),
                || solve_branch(x, y, &acc, config, Sign::Positive, pos_start),
            );
            let (neg, pos) = (neg?, pos?);
            let ok = |c: &Candidate| c.loss.is_finite() && c.loss <= previous;
            chosen = match (ok(&neg), ok(&pos)) {
                // Equal regularized loss goes to b = +1.
                (true, true) => Some(if neg.regularized < pos.regularized { neg } else { pos }),
                (true, false) => Some(neg),
                (false, true) => Some(pos),
                (false, false) => None,
            };
            if chosen.is_some() {
                break;
            }
        }

        let (learner, loss) = match chosen {
            Some(c) => {
                for (a, o) in acc.iter_mut().zip(&c.outputs) {
                    *a += o;
                }
                (c.learner, c.loss)
            }
            None => (WeakLearner::zero(p, Sign::Positive, config.beta, config.activation), previous),
        };
        learners.push(learner);
        training_loss.push(loss);
    }

    Ok(GbmapModel {
        learners,
        beta: config.beta,
        activation: config.activation,
        task: config.task,
        f0,
        preprocessing: None,
        p,
        training_loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_synth_cos;

    fn config(task: TaskKind, m: usize) -> FitConfig {
        FitConfig { m, ..FitConfig::new(task) }
    }

    #[test]
    fn initial_point_examples() {
        let mut cfg = config(TaskKind::Regression, 1);
        cfg.init_scale = 0.0;
        let (a, w) = stage_initial_point(4, Sign::Positive, &mut seeded_rng(1), &cfg);
        assert!(w.iter().all(|&v| v == 0.0));
        let learner = WeakLearner { a, b: Sign::Positive, w };
        for x in [[1.0, 2.0, -3.0, 0.5], [0.0; 4]] {
            assert_eq!(learner.eval(&x, cfg.beta, cfg.activation), 0.0);
        }

        let cfg = config(TaskKind::Regression, 1);
        let first = stage_initial_point(5, Sign::Negative, &mut seeded_rng(9), &cfg);
        let second = stage_initial_point(5, Sign::Negative, &mut seeded_rng(9), &cfg);
        assert_eq!(first, second);
        assert!(first.1.iter().all(|v| v.abs() <= cfg.init_scale));

        let (a, _) = stage_initial_point(3, Sign::Positive, &mut seeded_rng(0), &cfg);
        assert!((a - (-std::f64::consts::LN_2 / 5.0)).abs() < 1e-15);
        assert!((a + 0.138629).abs() < 1e-6);
    }

    #[test]
    fn constant_target_fitted_in_first_stage() {
        let mut d = gen_synth_cos(60, 3, 5.0, 2, TaskKind::Regression).unwrap();
        d.y.iter_mut().for_each(|v| *v = 2.5);
        let cfg = FitConfig { lambda: 0.0, ..config(TaskKind::Regression, 3) };
        let model = fit(&d, &cfg, InitialModel::Zero).unwrap();
        assert_eq!(model.learners.len(), 3);
        assert!(model.training_loss[1] < 1e-10, "{:?}", model.training_loss);
    }

    #[test]
    fn loss_is_non_increasing() {
        for (task, seed) in [(TaskKind::Regression, 1), (TaskKind::Classification, 2)] {
            let d = gen_synth_cos(300, 4, 5.0, seed, task).unwrap();
            let model = fit(&d, &config(task, 8), InitialModel::Zero).unwrap();
            assert_eq!(model.training_loss.len(), 9);
            for w in model.training_loss.windows(2) {
                assert!(w[1] <= w[0] + 1e-12, "{:?}", model.training_loss);
            }
            assert!(model.training_loss[8] < model.training_loss[0]);
        }
    }

    #[test]
    fn fit_is_deterministic() {
        let d = gen_synth_cos(200, 3, 5.0, 4, TaskKind::Regression).unwrap();
        let cfg = config(TaskKind::Regression, 4);
        let a = fit(&d, &cfg, InitialModel::Zero).unwrap();
        let b = fit(&d, &cfg, InitialModel::Zero).unwrap();
        assert_eq!(a.learners, b.learners);
        assert_eq!(a.training_loss, b.training_loss);
    }

    #[test]
    fn rejects_bad_input() {
        let d = gen_synth_cos(50, 2, 5.0, 0, TaskKind::Regression).unwrap();
        assert!(fit(&d, &config(TaskKind::Regression, 0), InitialModel::Zero).is_err());
        assert!(fit(&d, &config(TaskKind::Classification, 2), InitialModel::Zero).is_err());
        let one = d.subset(&[0]);
        assert!(fit(&one, &config(TaskKind::Regression, 1), InitialModel::Zero).is_err());
        let mut bad = d.clone();
        bad.y[3] = f64::NAN;
        assert!(fit(&bad, &config(TaskKind::Regression, 1), InitialModel::Zero).is_err());
        let mut bad = d.clone();
        bad.task = TaskKind::Classification;
        let cfg = config(TaskKind::Classification, 1);
        assert!(fit(&bad, &cfg, InitialModel::Zero).is_err());
        let wrong_f0 = InitialModel::Linear { intercept: 0.0, coefficients: vec![1.0] };
        assert!(fit(&d, &config(TaskKind::Regression, 1), wrong_f0).is_err());
    }

    #[test]
    fn initial_model_seeds_the_ensemble() {
        let d = gen_synth_cos(200, 3, 5.0, 6, TaskKind::Regression).unwrap();
        let coef = vec![0.5, -0.25, 0.0, 0.1];
        let f0 = InitialModel::Linear { intercept: 0.3, coefficients: coef.clone() };
        let model = fit(&d, &config(TaskKind::Regression, 2), f0).unwrap();
        let x = d.x.row(0);
        let f0_value = 0.3 + dot(&coef, x);
        let coords: f64 = model.embed(x).unwrap().iter().sum();
        assert!((model.predict(x).unwrap() - (f0_value + coords)).abs() < 1e-12);
    }

    #[derive(Debug)]
    struct ConstantProbability(f64);

    impl BaseModel for ConstantProbability {
        fn predict(&self, _x: &[f64]) -> f64 {
            self.0
        }
    }

    #[test]
    fn probability_initial_model_uses_logit() {
        let f0 = InitialModel::ExternalProbability(Arc::new(ConstantProbability(0.8)));
        assert!((f0.eval(&[1.0]) - (0.8f64 / 0.2).ln()).abs() < 1e-12);
        let edge = InitialModel::ExternalProbability(Arc::new(ConstantProbability(1.0)));
        assert!(edge.eval(&[0.0]).is_finite());
    }

    #[test]
    fn identity_stages_reduce_to_least_squares() {
        let mut d = gen_synth_cos(300, 4, 5.0, 8, TaskKind::Regression).unwrap();
        let truth = [0.7, -1.2, 0.4, 2.0, -0.5];
        let mut rng = seeded_rng(3);
        for i in 0..d.n() {
            d.y[i] = dot(d.x.row(i), &truth) + rng.random_range(-0.5..0.5);
        }
        let mut cfg = config(TaskKind::Regression, 3);
        cfg.lambda = 0.0;
        cfg.activation = Activation::Identity;
        cfg.optimizer.gradient_tolerance = 1e-12;
        cfg.optimizer.max_iterations = 1000;
        let model = fit(&d, &cfg, InitialModel::Zero).unwrap();

        let x = nalgebra::DMatrix::from_row_slice(d.n(), d.p(), d.x.as_slice());
        let y = nalgebra::DVector::from_column_slice(&d.y);
        let xt = x.transpose();
        let ols = (&xt * &x).cholesky().unwrap().solve(&(&xt * &y));

        let first = &model.learners[0];
        let mut coef: Vec<f64> = first.w.iter().map(|w| first.b.value() * w).collect();
        coef[4] += first.a;
        let err = coef.iter().zip(ols.iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        assert!(err / ols.norm() < 1e-6, "relative error {}", err / ols.norm());
        for later in &model.learners[1..] {
            for r in d.x.iter_rows() {
                assert!(later.eval(r, cfg.beta, cfg.activation).abs() < 1e-6);
            }
        }
    }
}
