//! Inference with a fitted ensemble: predictions, embeddings, distances and
//! local explanations.

use std::ops::Deref;

use rayon::prelude::*;

use crate::boosting::{InitialModel, WeakLearner};
use crate::data::{PreprocessStats, TaskKind};
use crate::error::{GbmapError, Result};
use crate::matrix::{dot, manhattan, Matrix};
use crate::objective::{sigmoid, Activation};

/// A fitted ensemble. Immutable once built.
#[derive(Debug, Clone)]
pub struct GbmapModel {
    pub learners: Vec<WeakLearner>,
    pub beta: f64,
    pub activation: Activation,
    pub task: TaskKind,
    pub f0: InitialModel,
    /// Transformation from raw features to model inputs, if known.
    pub preprocessing: Option<PreprocessStats>,
    /// Input dimension, including the intercept column.
    pub p: usize,
    /// Mean training loss after each stage; entry 0 is the loss of `f0`.
    pub training_loss: Vec<f64>,
}

/// Outputs of the individual stages at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(pub Vec<f64>);

impl Deref for Embedding {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl Embedding {
    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl GbmapModel {
    /// Number of stages.
    pub fn m(&self) -> usize {
        self.learners.len()
    }

    pub fn with_preprocessing(mut self, stats: PreprocessStats) -> Self {
        self.preprocessing = Some(stats);
        self
    }

    fn check(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.p {
            return Err(GbmapError::dim_mismatch("input point", self.p, x.len()));
        }
        Ok(())
    }

    #[inline]
    fn learner_output(&self, learner: &WeakLearner, x: &[f64]) -> f64 {
        learner.eval(x, self.beta, self.activation)
    }

    fn predict_unchecked(&self, x: &[f64]) -> f64 {
        self.f0.eval(x) + self.learners.iter().map(|l| self.learner_output(l, x)).sum::<f64>()
    }

    /// `f0(x) + sum_j f_j(x)`.
    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        self.check(x)?;
        Ok(self.predict_unchecked(x))
    }

    pub fn predict_batch(&self, x: &Matrix) -> Result<Vec<f64>> {
        if x.cols() != self.p {
            return Err(GbmapError::dim_mismatch("input matrix", self.p, x.cols()));
        }
        Ok((0..x.rows()).into_par_iter().map(|i| self.predict_unchecked(x.row(i))).collect())
    }

    fn require_classifier(&self) -> Result<()> {
        if self.task != TaskKind::Classification {
            return Err(GbmapError::InvalidState("class predictions need a classification model".into()));
        }
        Ok(())
    }

    /// Sign of the score, with a score of exactly zero mapped to +1.
    pub fn predict_class(&self, x: &[f64]) -> Result<f64> {
        self.require_classifier()?;
        Ok(if self.predict(x)? >= 0.0 { 1.0 } else { -1.0 })
    }

    /// `P(y = +1 | x) = sigmoid(f(x))`.
    pub fn predict_proba(&self, x: &[f64]) -> Result<f64> {
        self.require_classifier()?;
        Ok(sigmoid(self.predict(x)?))
    }

    /// `(f_1(x), ..., f_m(x))`; `f0` is not part of the embedding.
    pub fn embed(&self, x: &[f64]) -> Result<Embedding> {
        self.check(x)?;
        Ok(Embedding(self.learners.iter().map(|l| self.learner_output(l, x)).collect()))
    }

    /// One row of stage outputs per input row.
    pub fn embed_batch(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.p {
            return Err(GbmapError::dim_mismatch("input matrix", self.p, x.cols()));
        }
        let m = self.m();
        let rows: Vec<f64> = (0..x.rows())
            .into_par_iter()
            .flat_map_iter(|i| {
                let r = x.row(i);
                self.learners.iter().map(move |l| self.learner_output(l, r))
            })
            .collect();
        Matrix::from_vec(x.rows(), m, rows)
    }

    /// Manhattan distance between embeddings.
    pub fn embedding_distance(&self, x: &[f64], other: &[f64]) -> Result<f64> {
        Ok(manhattan(&self.embed(x)?, &self.embed(other)?))
    }

    /// Total variation of `f` along the segment from `x` to `other`,
    /// integrated with the midpoint rule over `grid` cells using the exact
    /// directional derivative.
    pub fn path_distance(&self, x: &[f64], other: &[f64], grid: usize) -> Result<f64> {
        self.check(x)?;
        self.check(other)?;
        if grid < 2 {
            return Err(GbmapError::invalid("path distance grid must be at least 2"));
        }
        let d: Vec<f64> = other.iter().zip(x).map(|(a, b)| a - b).collect();
        // z_j(t) = w_j . x + t w_j . d
        let proj: Vec<(f64, f64, f64)> =
            self.learners.iter().map(|l| (dot(&l.w, x), dot(&l.w, &d), l.b.value())).collect();
        let f0_linear = match &self.f0 {
            InitialModel::Zero => Some(0.0),
            InitialModel::Linear { coefficients, .. } => Some(dot(coefficients, &d)),
            _ => None,
        };
        let h = 1.0 / grid as f64;
        let mut point = vec![0.0; self.p];
        let mut total = 0.0;
        for k in 0..grid {
            let t = (k as f64 + 0.5) * h;
            let mut slope: f64 =
                proj.iter().map(|&(z0, dz, b)| b * self.activation.derivative(z0 + t * dz, self.beta) * dz).sum();
            slope += match f0_linear {
                Some(v) => v,
                None => {
                    for ((pt, xi), di) in point.iter_mut().zip(x).zip(&d) {
                        *pt = xi + t * di;
                    }
                    self.f0_directional(&point, &d, h)
                }
            };
            total += slope.abs();
        }
        Ok(total * h)
    }

    fn f0_directional(&self, point: &[f64], d: &[f64], h: f64) -> f64 {
        if let Some(g) = self.f0.gradient(point) {
            return dot(&g, d);
        }
        let step = 1e-3 * h;
        let fwd: Vec<f64> = point.iter().zip(d).map(|(p, di)| p + step * di).collect();
        let back: Vec<f64> = point.iter().zip(d).map(|(p, di)| p - step * di).collect();
        (self.f0.eval(&fwd) - self.f0.eval(&back)) / (2.0 * step)
    }

    /// Gradient of `f` at `x`: the coefficients of the local linear model.
    /// An initial model without a known gradient contributes nothing.
    pub fn local_coefficients(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check(x)?;
        let mut grad = self.f0.gradient(x).unwrap_or_else(|| vec![0.0; self.p]);
        for l in &self.learners {
            let scale = l.b.value() * self.activation.derivative(dot(&l.w, x), self.beta);
            for (g, wk) in grad.iter_mut().zip(&l.w) {
                *g += scale * wk;
            }
        }
        Ok(grad)
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::objective::{softplus, Sign};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_model(rng: &mut ChaCha8Rng, m: usize, p: usize, task: TaskKind) -> GbmapModel {
        let learners = (0..m)
            .map(|_| WeakLearner {
                a: rng.random_range(-1.0..1.0),
                b: if rng.random_bool(0.5) { Sign::Positive } else { Sign::Negative },
                w: (0..p).map(|_| rng.random_range(-1.5..1.5)).collect(),
            })
            .collect();
        GbmapModel {
            learners,
            beta: rng.random_range(1.0..10.0),
            activation: Activation::Softplus,
            task,
            f0: InitialModel::Zero,
            preprocessing: None,
            p,
            training_loss: Vec::new(),
        }
    }

    fn random_point(rng: &mut ChaCha8Rng, p: usize) -> Vec<f64> {
        (0..p).map(|_| rng.random_range(-2.0..2.0)).collect()
    }

    fn single(a: f64, b: Sign, w: Vec<f64>, beta: f64) -> GbmapModel {
        let p = w.len();
        GbmapModel {
            learners: vec![WeakLearner { a, b, w }],
            beta,
            activation: Activation::Softplus,
            task: TaskKind::Regression,
            f0: InitialModel::Zero,
            preprocessing: None,
            p,
            training_loss: Vec::new(),
        }
    }

    #[test]
    fn predict_examples() {
        let empty = GbmapModel { learners: vec![], ..single(0.0, Sign::Positive, vec![0.0; 3], 1.0) };
        assert_eq!(empty.predict(&[1.0, 2.0, 3.0]).unwrap(), 0.0);

        let constant = single(1.0, Sign::Positive, vec![0.0; 2], 1.0);
        for x in [[0.0, 0.0], [5.0, -3.0]] {
            assert!((constant.predict(&x).unwrap() - (1.0 + std::f64::consts::LN_2)).abs() < 1e-15);
        }
        assert!(constant.predict(&[1.0]).is_err());
    }

    #[test]
    fn predict_and_embed_match_scalar_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let model = random_model(&mut rng, 6, 4, TaskKind::Regression);
            let x = random_point(&mut rng, 4);
            let mut total = 0.0;
            let coords = model.embed(&x).unwrap();
            for (j, l) in model.learners.iter().enumerate() {
                let mut z = 0.0;
                for k in 0..4 {
                    z += l.w[k] * x[k];
                }
                let fj = l.a + l.b.value() * (1.0 + (model.beta * z).exp()).ln() / model.beta;
                assert!((coords[j] - fj).abs() < 1e-12);
                total += fj;
            }
            assert!((model.predict(&x).unwrap() - total).abs() < 1e-12);
        }
    }

    #[test]
    fn one_learner_embedding_is_prediction() {
        let model = single(0.3, Sign::Negative, vec![1.0, -2.0], 3.0);
        let x = [0.4, 0.1];
        let e = model.embed(&x).unwrap();
        assert_eq!(e.len(), 1);
        assert_eq!(e[0], model.predict(&x).unwrap());
    }

    #[test]
    fn batch_embedding_row_sums_are_predictions() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut model = random_model(&mut rng, 5, 3, TaskKind::Regression);
        model.f0 = InitialModel::Linear { intercept: 0.2, coefficients: vec![0.1, 0.0, -0.3] };
        let pts: Vec<Vec<f64>> = (0..7).map(|_| random_point(&mut rng, 3)).collect();
        let x = Matrix::from_rows(&pts).unwrap();
        let emb = model.embed_batch(&x).unwrap();
        let preds = model.predict_batch(&x).unwrap();
        assert_eq!((emb.rows(), emb.cols()), (7, 5));
        for i in 0..7 {
            let sum: f64 = emb.row(i).iter().sum();
            assert!((sum + model.f0.eval(x.row(i)) - preds[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn classification_outputs() {
        let mut model = single(0.0, Sign::Positive, vec![0.0], 1.0);
        model.task = TaskKind::Classification;
        model.learners[0].a = -softplus(0.0, 1.0).unwrap();
        assert_eq!(model.predict(&[1.0]).unwrap(), 0.0);
        assert_eq!(model.predict_class(&[1.0]).unwrap(), 1.0);
        assert_eq!(model.predict_proba(&[1.0]).unwrap(), 0.5);

        model.learners[0].a = 20.0 - softplus(0.0, 1.0).unwrap();
        assert!(model.predict_proba(&[1.0]).unwrap() > 0.9999);

        let regression = single(0.0, Sign::Positive, vec![0.0], 1.0);
        assert!(matches!(regression.predict_class(&[0.0]), Err(GbmapError::InvalidState(_))));
        assert!(matches!(regression.predict_proba(&[0.0]), Err(GbmapError::InvalidState(_))));
    }

    #[test]
    fn probabilities_are_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let model = random_model(&mut rng, 4, 3, TaskKind::Classification);
            let x = random_point(&mut rng, 3);
            let f = model.predict(&x).unwrap();
            let sum = sigmoid(f) + sigmoid(-f);
            assert!((model.predict_proba(&x).unwrap() - sigmoid(f)).abs() < 1e-15);
            assert!((sum - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn embedding_distance_is_a_pseudometric() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = random_model(&mut rng, 6, 3, TaskKind::Regression);
        for _ in 0..50 {
            let (x, y, z) = (random_point(&mut rng, 3), random_point(&mut rng, 3), random_point(&mut rng, 3));
            let dxy = model.embedding_distance(&x, &y).unwrap();
            assert_eq!(model.embedding_distance(&x, &x).unwrap(), 0.0);
            assert_eq!(dxy, model.embedding_distance(&y, &x).unwrap());
            assert!(dxy >= 0.0);
            let dxz = model.embedding_distance(&x, &z).unwrap();
            let dzy = model.embedding_distance(&z, &y).unwrap();
            assert!(dxy <= dxz + dzy + 1e-12);
            let ex = model.embed(&x).unwrap();
            let ey = model.embed(&y).unwrap();
            let manual: f64 = ex.iter().zip(ey.iter()).map(|(a, b)| (a - b).abs()).sum();
            assert!((manual - dxy).abs() < 1e-12);
        }
    }

    #[test]
    fn path_distance_of_zero_length_and_monotone_path() {
        let model = single(0.1, Sign::Positive, vec![0.7, -0.4], 4.0);
        let x = [0.3, 0.2];
        assert_eq!(model.path_distance(&x, &x, 10).unwrap(), 0.0);
        let other = [-1.0, 2.5];
        let dp = model.path_distance(&x, &other, 10_000).unwrap();
        let df = (model.predict(&other).unwrap() - model.predict(&x).unwrap()).abs();
        assert!((dp - df).abs() < 1e-6, "{dp} vs {df}");
        assert!(model.path_distance(&x, &other, 1).is_err());
    }

    #[test]
    fn path_distance_with_one_turning_point() {
        // Two learners with opposite signs: f rises then falls along the segment.
        let model = GbmapModel {
            learners: vec![
                WeakLearner { a: 0.0, b: Sign::Positive, w: vec![1.0, 0.0] },
                WeakLearner { a: 0.0, b: Sign::Negative, w: vec![2.0, -1.0] },
            ],
            ..single(0.0, Sign::Positive, vec![0.0, 0.0], 3.0)
        };
        let x = [-2.0, 1.0];
        let other = [2.0, 1.0];
        let d = [4.0, 0.0];
        let slope = |t: f64| {
            let pt = [x[0] + t * d[0], x[1] + t * d[1]];
            let g = model.local_coefficients(&pt).unwrap();
            g[0] * d[0] + g[1] * d[1]
        };
        assert!(slope(0.0) * slope(1.0) < 0.0);
        let (mut lo, mut hi) = (0.0, 1.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if slope(lo) * slope(mid) <= 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        let t = 0.5 * (lo + hi);
        let xt = [x[0] + t * d[0], x[1] + t * d[1]];
        let f = |p: &[f64]| model.predict(p).unwrap();
        let oracle = (f(&x) - f(&xt)).abs() + (f(&xt) - f(&other)).abs();
        let dp = model.path_distance(&x, &other, 10_000).unwrap();
        assert!((dp - oracle).abs() < 1e-5, "{dp} vs {oracle}");
    }

    #[test]
    fn local_coefficients_examples() {
        let empty = GbmapModel { learners: vec![], ..single(0.0, Sign::Positive, vec![0.0; 3], 1.0) };
        assert_eq!(empty.local_coefficients(&[1.0, 2.0, 3.0]).unwrap(), vec![0.0; 3]);

        let axis = single(0.0, Sign::Positive, vec![0.0, 1.3, 0.0], 2.0);
        let g = axis.local_coefficients(&[0.5, -0.2, 3.0]).unwrap();
        assert_eq!(g[0], 0.0);
        assert_eq!(g[2], 0.0);
        assert!(g[1] > 0.0);
    }

    #[test]
    fn local_coefficients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let h = 1e-6;
        for _ in 0..30 {
            let mut model = random_model(&mut rng, 5, 4, TaskKind::Regression);
            model.f0 = InitialModel::Linear { intercept: 0.5, coefficients: vec![0.2, -0.1, 0.0, 0.3] };
            let x = random_point(&mut rng, 4);
            let g = model.local_coefficients(&x).unwrap();
            let mut err = 0.0;
            let mut norm = 0.0;
            for k in 0..4 {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[k] += h;
                xm[k] -= h;
                let fd = (model.predict(&xp).unwrap() - model.predict(&xm).unwrap()) / (2.0 * h);
                err += (fd - g[k]).powi(2);
                norm += g[k] * g[k];
            }
            assert!(err.sqrt() / norm.sqrt().max(1e-8) < 1e-5);
        }
    }

    #[test]
    fn sandwich_bound_on_random_models() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10 {
            let model = random_model(&mut rng, 8, 3, TaskKind::Regression);
            for _ in 0..20 {
                let x = random_point(&mut rng, 3);
                let y = random_point(&mut rng, 3);
                let df = (model.predict(&y).unwrap() - model.predict(&x).unwrap()).abs();
                let dp = model.path_distance(&x, &y, 10_000).unwrap();
                let de = model.embedding_distance(&x, &y).unwrap();
                let eps = 1e-4 * (1.0 + de);
                assert!(df <= dp + eps && dp <= de + eps, "{df} {dp} {de}");
            }
        }
    }
}
