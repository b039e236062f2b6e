//! Limited-memory BFGS with a backtracking Armijo line search.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{GbmapError, Result};
use crate::matrix::dot;

const ARMIJO_C1: f64 = 1e-4;
const BACKTRACK: f64 = 0.5;
/// Curvature pairs with `s . y` at or below this are not stored.
const MIN_CURVATURE: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub max_iterations: usize,
    /// Number of stored curvature pairs.
    pub memory: usize,
    /// Converged once the largest gradient component is below this.
    pub gradient_tolerance: f64,
    pub line_search_max_steps: usize,
    pub initial_step: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            max_iterations: 200,
            memory: 10,
            gradient_tolerance: 1e-6,
            line_search_max_steps: 30,
            initial_step: 1.0,
        }
    }
}

impl OptimizerConfig {
    pub fn with_max_iterations(mut self, max_iterations: usize) -> Self {
        self.max_iterations = max_iterations;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(GbmapError::invalid("max_iterations must be at least 1"));
        }
        if self.memory == 0 {
            return Err(GbmapError::invalid("memory must be at least 1"));
        }
        if !(self.gradient_tolerance > 0.0) {
            return Err(GbmapError::invalid("gradient_tolerance must be positive"));
        }
        if self.line_search_max_steps == 0 {
            return Err(GbmapError::invalid("line_search_max_steps must be at least 1"));
        }
        if !(self.initial_step > 0.0 && self.initial_step.is_finite()) {
            return Err(GbmapError::invalid("initial_step must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Termination {
    GradientTolerance,
    MaxIterations,
    LineSearchFailure,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizeResult {
    /// Best point evaluated during the run.
    pub solution: Vec<f64>,
    pub objective_value: f64,
    pub iterations_used: usize,
    pub converged: bool,
    pub termination: Termination,
}

struct CurvaturePair {
    s: Vec<f64>,
    y: Vec<f64>,
    rho: f64,
}

/// Two-loop recursion: returns `-H g` for the implicit inverse Hessian `H`.
fn search_direction(grad: &[f64], pairs: &VecDeque<CurvaturePair>) -> Vec<f64> {
    let mut q = grad.to_vec();
    let mut alphas = Vec::with_capacity(pairs.len());
    for pair in pairs.iter().rev() {
        let alpha = pair.rho * dot(&pair.s, &q);
        for (qi, yi) in q.iter_mut().zip(&pair.y) {
            *qi -= alpha * yi;
        }
        alphas.push(alpha);
    }
    if let Some(last) = pairs.back() {
        let gamma = dot(&last.s, &last.y) / dot(&last.y, &last.y);
        q.iter_mut().for_each(|v| *v *= gamma);
    }
    for (pair, alpha) in pairs.iter().zip(alphas.iter().rev()) {
        let beta = pair.rho * dot(&pair.y, &q);
        for (qi, si) in q.iter_mut().zip(&pair.s) {
            *qi += (alpha - beta) * si;
        }
    }
    q.iter_mut().for_each(|v| *v = -*v);
    q
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Minimizes a smooth function.
///
/// `objective(x, grad)` returns the value at `x` and writes the gradient into
/// `grad`. The returned solution is the best point seen, so its value never
/// exceeds the value at `x0`.
pub fn minimize<F>(mut objective: F, x0: &[f64], config: &OptimizerConfig) -> Result<OptimizeResult>
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    config.validate()?;
    let dim = x0.len();
    let mut x = x0.to_vec();
    let mut grad = vec![0.0; dim];
    let mut f = objective(&x, &mut grad);
    if !f.is_finite() || !grad.iter().all(|g| g.is_finite()) {
        return Err(GbmapError::invalid(format!("objective or gradient not finite at the starting point (value {f})")));
    }

    let mut best_x = x.clone();
    let mut best_f = f;
    let mut pairs: VecDeque<CurvaturePair> = VecDeque::with_capacity(config.memory);
    let mut x_new = vec![0.0; dim];
    let mut grad_new = vec![0.0; dim];

    let finish = |solution, value, iterations, termination| OptimizeResult {
        solution,
        objective_value: value,
        iterations_used: iterations,
        converged: termination == Termination::GradientTolerance,
        termination,
    };

    if inf_norm(&grad) < config.gradient_tolerance {
        return Ok(finish(best_x, best_f, 0, Termination::GradientTolerance));
    }

    for iteration in 1..=config.max_iterations {
        let mut accepted = false;
        // Second attempt falls back to steepest descent with the memory cleared.
        for _attempt in 0..2 {
            let mut direction = search_direction(&grad, &pairs);
            let mut slope = dot(&grad, &direction);
            if !(slope < 0.0) || !slope.is_finite() {
                pairs.clear();
                direction = grad.iter().map(|g| -g).collect();
                slope = dot(&grad, &direction);
            }
            let mut step = if pairs.is_empty() {
                config.initial_step / dot(&grad, &grad).sqrt().max(1.0)
            } else {
                config.initial_step
            };

            for _ in 0..config.line_search_max_steps {
                for ((xn, xi), di) in x_new.iter_mut().zip(&x).zip(&direction) {
                    *xn = xi + step * di;
                }
                let f_new = objective(&x_new, &mut grad_new);
                let finite = f_new.is_finite() && grad_new.iter().all(|g| g.is_finite());
                if finite && f_new < best_f {
                    best_f = f_new;
                    best_x.copy_from_slice(&x_new);
                }
                if finite && f_new <= f + ARMIJO_C1 * step * slope && f_new < f {
                    accepted = true;
                    let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
                    let y: Vec<f64> = grad_new.iter().zip(&grad).map(|(a, b)| a - b).collect();
                    let sy = dot(&s, &y);
                    if sy > MIN_CURVATURE {
                        if pairs.len() == config.memory {
                            pairs.pop_front();
                        }
                        pairs.push_back(CurvaturePair { s, y, rho: 1.0 / sy });
                    }
                    x.copy_from_slice(&x_new);
                    grad.copy_from_slice(&grad_new);
                    f = f_new;
                    break;
                }
                step *= BACKTRACK;
            }
            if accepted || pairs.is_empty() {
                break;
            }
            pairs.clear();
        }

        if !accepted {
            return Ok(finish(best_x, best_f, iteration, Termination::LineSearchFailure));
        }
        if inf_norm(&grad) < config.gradient_tolerance {
            return Ok(finish(best_x, best_f, iteration, Termination::GradientTolerance));
        }
    }
    Ok(finish(best_x, best_f, config.max_iterations, Termination::MaxIterations))
}
