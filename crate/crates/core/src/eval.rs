//! Metrics, cross-validation, random hyperparameter search and a small PCA.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::boosting::{fit, FitConfig, InitialModel};
use crate::data::{apply_preprocess, fit_preprocess, seeded_rng, shuffled_indices, Dataset, TaskKind, INTERCEPT_NAME};
use crate::error::{GbmapError, Result};
use crate::matrix::{dot, Matrix};
use crate::model::GbmapModel;
use crate::objective::Activation;

/// Coefficient of determination against the mean of `y`.
pub fn r_squared(y: &[f64], yhat: &[f64]) -> Result<f64> {
    if y.len() != yhat.len() {
        return Err(GbmapError::dim_mismatch("predictions", y.len(), yhat.len()));
    }
    if y.len() < 2 {
        return Err(GbmapError::invalid("R^2 needs at least 2 points"));
    }
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let ss_tot: f64 = y.iter().map(|v| (v - mean) * (v - mean)).sum();
    if ss_tot == 0.0 {
        return Err(GbmapError::Undefined("R^2 is undefined for constant targets".into()));
    }
    let ss_res: f64 = y.iter().zip(yhat).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// Fraction of exact matches.
pub fn accuracy(y: &[f64], yhat: &[f64]) -> Result<f64> {
    if y.len() != yhat.len() {
        return Err(GbmapError::dim_mismatch("predictions", y.len(), yhat.len()));
    }
    if y.is_empty() {
        return Err(GbmapError::invalid("accuracy needs at least 1 point"));
    }
    Ok(y.iter().zip(yhat).filter(|(a, b)| a == b).count() as f64 / y.len() as f64)
}

/// R^2 for regression models, accuracy for classifiers.
pub fn score_model(model: &GbmapModel, test: &Dataset) -> Result<f64> {
    let scores = model.predict_batch(&test.x)?;
    match model.task {
        TaskKind::Regression => r_squared(&test.y, &scores),
        TaskKind::Classification => {
            let classes: Vec<f64> = scores.iter().map(|&s| if s >= 0.0 { 1.0 } else { -1.0 }).collect();
            accuracy(&test.y, &classes)
        }
    }
}

/// Ridge-regularized linear (or logistic) regression, fitted as a single
/// stage with identity nonlinearity. With `lambda = 0` and quadratic loss
/// this is ordinary least squares.
pub fn fit_linear_baseline(data: &Dataset, lambda: f64, base: &FitConfig) -> Result<GbmapModel> {
    let config =
        FitConfig { m: 1, lambda, activation: Activation::Identity, init_scale: 0.0, task: data.task, ..base.clone() };
    fit(data, &config, InitialModel::Zero)
}

/// Effective `(intercept-free)` coefficients of a single-stage identity
/// model: `b w` with `a` added to the intercept column when present.
pub fn linear_coefficients(model: &GbmapModel, intercept_column: Option<usize>) -> Result<Vec<f64>> {
    if model.activation != Activation::Identity || model.m() != 1 {
        return Err(GbmapError::InvalidState("linear coefficients need a one-stage identity model".into()));
    }
    let l = &model.learners[0];
    let mut c: Vec<f64> = l.w.iter().map(|w| l.b.value() * w).collect();
    if let Some(j) = intercept_column {
        c[j] += l.a;
    }
    Ok(c)
}

/// Shuffled indices cut into `folds` contiguous parts whose sizes differ by at most one.
pub fn kfold_partition(n: usize, folds: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if folds < 2 {
        return Err(GbmapError::invalid("need at least 2 folds"));
    }
    if n < folds {
        return Err(GbmapError::invalid(format!("{n} rows cannot fill {folds} folds")));
    }
    let idx = shuffled_indices(n, &mut seeded_rng(seed));
    Ok((0..folds).map(|f| idx[f * n / folds..(f + 1) * n / folds].to_vec()).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub fold_scores: Vec<f64>,
    pub mean: f64,
}

/// Fits and scores one train/test pair; preprocessing is learned on `train` only.
pub fn holdout_score(train: &Dataset, test: &Dataset, config: &FitConfig) -> Result<f64> {
    let stats = fit_preprocess(train)?;
    let tr = apply_preprocess(&stats, train)?;
    let te = apply_preprocess(&stats, test)?;
    let model = fit(&tr, config, InitialModel::Zero)?;
    score_model(&model, &te)
}

/// K-fold cross-validation on raw (not yet preprocessed) data.
pub fn kfold_cv(data: &Dataset, folds: usize, config: &FitConfig, seed: u64) -> Result<CvResult> {
    let parts = kfold_partition(data.n(), folds, seed)?;
    let fold_scores = (0..folds)
        .into_par_iter()
        .map(|f| {
            let train_idx: Vec<usize> =
                parts.iter().enumerate().filter(|&(g, _)| g != f).flat_map(|(_, p)| p.iter().copied()).collect();
            holdout_score(&data.subset(&train_idx), &data.subset(&parts[f]), config)
        })
        .collect::<Result<Vec<f64>>>()?;
    let mean = fold_scores.iter().sum::<f64>() / folds as f64;
    Ok(CvResult { fold_scores, mean })
}

/// Hyperparameter ranges for [`random_search`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    /// Inclusive integer range.
    pub m: (usize, usize),
    pub beta: (f64, f64),
    pub lambda: (f64, f64),
    pub maxiter: Vec<usize>,
}

impl Default for SearchSpace {
    fn default() -> Self {
        SearchSpace { m: (2, 150), beta: (1.0, 20.0), lambda: (0.0, 1e-2), maxiter: vec![200, 400] }
    }
}

impl SearchSpace {
    fn validate(&self) -> Result<()> {
        if self.m.0 == 0 || self.m.0 > self.m.1 {
            return Err(GbmapError::invalid("m range must be non-empty and start at 1 or more"));
        }
        if !(self.beta.0 > 0.0 && self.beta.0 <= self.beta.1) {
            return Err(GbmapError::invalid("beta range must be positive and ordered"));
        }
        if !(self.lambda.0 >= 0.0 && self.lambda.0 <= self.lambda.1) {
            return Err(GbmapError::invalid("lambda range must be non-negative and ordered"));
        }
        if self.maxiter.is_empty() || self.maxiter.contains(&0) {
            return Err(GbmapError::invalid("maxiter choices must be non-empty and positive"));
        }
        Ok(())
    }

    fn sample<R: Rng>(&self, rng: &mut R, base: &FitConfig) -> FitConfig {
        let uniform = |rng: &mut R, (lo, hi): (f64, f64)| if lo < hi { rng.random_range(lo..hi) } else { lo };
        let m = rng.random_range(self.m.0..=self.m.1);
        let beta = uniform(rng, self.beta);
        let lambda = uniform(rng, self.lambda);
        let maxiter = self.maxiter[rng.random_range(0..self.maxiter.len())];
        FitConfig { m, beta, lambda, optimizer: base.optimizer.clone().with_max_iterations(maxiter), ..base.clone() }
    }
}

#[derive(Debug, Clone)]
pub struct SearchResult {
    pub best: FitConfig,
    pub best_score: f64,
    /// Every sampled configuration with its mean CV score, in sampling order.
    pub trials: Vec<(FitConfig, f64)>,
}

/// Samples `budget` configurations and keeps the one with the best mean CV
/// score; ties go to the earliest sample.
pub fn random_search(
    data: &Dataset,
    space: &SearchSpace,
    budget: usize,
    folds: usize,
    base: &FitConfig,
    seed: u64,
) -> Result<SearchResult> {
    if budget == 0 {
        return Err(GbmapError::invalid("budget must be at least 1"));
    }
    space.validate()?;
    let mut rng = seeded_rng(seed);
    let candidates: Vec<FitConfig> = (0..budget).map(|_| space.sample(&mut rng, base)).collect();
    let scores =
        candidates.par_iter().map(|c| kfold_cv(data, folds, c, seed).map(|r| r.mean)).collect::<Result<Vec<f64>>>()?;
    let mut best = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s > scores[best] {
            best = i;
        }
    }
    Ok(SearchResult {
        best: candidates[best].clone(),
        best_score: scores[best],
        trials: candidates.into_iter().zip(scores).collect(),
    })
}

/// Scores a linear model trained on embedding coordinates (plus an intercept).
pub fn embedding_feature_score(model: &GbmapModel, train: &Dataset, test: &Dataset, base: &FitConfig) -> Result<f64> {
    let to_features = |d: &Dataset| -> Result<Dataset> {
        let emb = model.embed_batch(&d.x)?;
        let m = emb.cols();
        let mut x = Matrix::zeros(d.n(), m + 1);
        for i in 0..d.n() {
            let row = x.row_mut(i);
            row[..m].copy_from_slice(emb.row(i));
            row[m] = 1.0;
        }
        let mut names: Vec<String> = (1..=m).map(|j| format!("phi{j}")).collect();
        names.push(INTERCEPT_NAME.into());
        Ok(Dataset::new(x, d.y.clone(), names, d.task)?.with_intercept_flag(true))
    };
    let tr = to_features(train)?;
    let te = to_features(test)?;
    let linear = fit_linear_baseline(&tr, 0.0, base)?;
    score_model(&linear, &te)
}

/// Two-component principal component analysis.
#[derive(Debug, Clone)]
pub struct Pca2 {
    /// `n x 2` coordinates of the centered points.
    pub projection: Matrix,
    pub components: [Vec<f64>; 2],
    /// Covariance eigenvalues (divisor `n - 1`) of the two components.
    pub explained_variance: [f64; 2],
}

const POWER_MAX_ITER: usize = 100_000;

/// Dominant eigenpair of a symmetric positive semi-definite matrix by power iteration.
fn power_iteration(c: &[f64], d: usize, start: &[f64]) -> (f64, Vec<f64>) {
    let mut v = start.to_vec();
    let norm = dot(&v, &v).sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    let mut lambda = 0.0;
    let mut next = vec![0.0; d];
    for _ in 0..POWER_MAX_ITER {
        for i in 0..d {
            next[i] = dot(&c[i * d..(i + 1) * d], &v);
        }
        let norm = dot(&next, &next).sqrt();
        if norm == 0.0 {
            return (0.0, v);
        }
        next.iter_mut().for_each(|x| *x /= norm);
        let change: f64 = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        std::mem::swap(&mut v, &mut next);
        let new_lambda = norm;
        let settled = (new_lambda - lambda).abs() <= 1e-15 * new_lambda && change < 1e-12;
        lambda = new_lambda;
        if settled {
            break;
        }
    }
    // Rayleigh quotient of the final vector.
    let cv: Vec<f64> = (0..d).map(|i| dot(&c[i * d..(i + 1) * d], &v)).collect();
    (dot(&v, &cv), v)
}

/// Projects mean-centered points onto the top two covariance eigenvectors,
/// found by power iteration with deflation. Each component's largest
/// magnitude loading is made positive.
pub fn pca_2d(points: &Matrix) -> Result<Pca2> {
    let n = points.rows();
    let d = points.cols();
    if n < 3 || d < 2 {
        return Err(GbmapError::invalid("PCA needs at least 3 points in at least 2 dimensions"));
    }
    let mean: Vec<f64> = (0..d).map(|j| points.column(j).iter().sum::<f64>() / n as f64).collect();
    let mut cov = vec![0.0; d * d];
    for r in points.iter_rows() {
        for i in 0..d {
            let ci = r[i] - mean[i];
            for j in i..d {
                cov[i * d + j] += ci * (r[j] - mean[j]);
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = cov[i * d + j] / (n - 1) as f64;
            cov[i * d + j] = v;
            cov[j * d + i] = v;
        }
    }

    let mut rng = seeded_rng(0x5eed);
    let mut components: Vec<Vec<f64>> = Vec::with_capacity(2);
    let mut values = [0.0; 2];
    for slot in values.iter_mut() {
        let start: Vec<f64> = (0..d).map(|_| rng.random_range(0.5..1.5)).collect();
        let (lambda, mut v) = power_iteration(&cov, d, &start);
        let lead = v.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        if lead < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] -= lambda * v[i] * v[j];
            }
        }
        *slot = lambda;
        components.push(v);
    }
    if !(values[0] > 0.0) || values[1] <= 1e-12 * values[0] {
        return Err(GbmapError::Numeric("points have rank below 2".into()));
    }

    let mut projection = Matrix::zeros(n, 2);
    for (i, r) in points.iter_rows().enumerate() {
        let centered: Vec<f64> = r.iter().zip(&mean).map(|(a, b)| a - b).collect();
        projection.set(i, 0, dot(&centered, &components[0]));
        projection.set(i, 1, dot(&centered, &components[1]));
    }
    let second = components.pop().expect("two components");
    let first = components.pop().expect("two components");
    Ok(Pca2 { projection, components: [first, second], explained_variance: values })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_synth_cos;
    use rand_distr::StandardNormal;

    #[test]
    fn metric_examples() {
        let y = [1.0, 2.0, 4.0, -1.0];
        assert_eq!(r_squared(&y, &y).unwrap(), 1.0);
        let mean = [1.5; 4];
        assert!(r_squared(&y, &mean).unwrap().abs() < 1e-15);
        assert!(matches!(r_squared(&[2.0, 2.0], &[2.0, 2.0]), Err(GbmapError::Undefined(_))));
        assert!(r_squared(&[1.0], &[1.0]).is_err());
        let c = [1.0, -1.0, 1.0, 1.0];
        assert_eq!(accuracy(&c, &c).unwrap(), 1.0);
        assert_eq!(accuracy(&c, &[1.0, 1.0, 1.0, -1.0]).unwrap(), 0.5);
    }

    #[test]
    fn r_squared_matches_scalar_recomputation() {
        let mut rng = seeded_rng(1);
        let y: Vec<f64> = (0..25).map(|_| rng.random_range(-3.0..3.0)).collect();
        let yhat: Vec<f64> = y.iter().map(|v| v + rng.random_range(-1.0..1.0)).collect();
        let mut mean = 0.0;
        for v in &y {
            mean += v;
        }
        mean /= 25.0;
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..25 {
            num += (y[i] - yhat[i]).powi(2);
            den += (y[i] - mean).powi(2);
        }
        assert!((r_squared(&y, &yhat).unwrap() - (1.0 - num / den)).abs() < 1e-14);
    }

    #[test]
    fn partition_arithmetic() {
        let parts = kfold_partition(7, 7, 1).unwrap();
        assert!(parts.iter().all(|p| p.len() == 1));
        let parts = kfold_partition(23, 5, 2).unwrap();
        let sizes: Vec<usize> = parts.iter().map(Vec::len).collect();
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        let mut all: Vec<usize> = parts.concat();
        all.sort();
        assert_eq!(all, (0..23).collect::<Vec<_>>());
        assert_eq!(parts, kfold_partition(23, 5, 2).unwrap());
        assert!(kfold_partition(3, 5, 0).is_err());
        assert!(kfold_partition(10, 1, 0).is_err());
    }

    fn small_config() -> FitConfig {
        let mut c = FitConfig { m: 3, ..FitConfig::new(TaskKind::Regression) };
        c.optimizer.max_iterations = 50;
        c
    }

    #[test]
    fn cv_is_deterministic() {
        let d = gen_synth_cos(200, 3, 5.0, 1, TaskKind::Regression).unwrap();
        let a = kfold_cv(&d, 5, &small_config(), 3).unwrap();
        let b = kfold_cv(&d, 5, &small_config(), 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.fold_scores.len(), 5);
        assert!(kfold_cv(&d.subset(&[0, 1, 2]), 5, &small_config(), 3).is_err());
    }

    #[test]
    fn search_edge_cases() {
        let d = gen_synth_cos(150, 3, 5.0, 2, TaskKind::Regression).unwrap();
        let base = small_config();
        let one = random_search(&d, &SearchSpace { m: (2, 4), ..Default::default() }, 1, 3, &base, 5).unwrap();
        assert_eq!(one.trials.len(), 1);
        assert_eq!(one.best, one.trials[0].0);

        let point = SearchSpace { m: (3, 3), beta: (2.0, 2.0), lambda: (1e-3, 1e-3), maxiter: vec![40] };
        let r = random_search(&d, &point, 2, 3, &base, 5).unwrap();
        assert_eq!(r.best.m, 3);
        assert_eq!(r.best.beta, 2.0);
        assert_eq!(r.best.lambda, 1e-3);
        assert_eq!(r.best.optimizer.max_iterations, 40);
        assert!(random_search(&d, &point, 0, 3, &base, 5).is_err());
    }

    #[test]
    fn linear_baseline_recovers_linear_target() {
        let mut d = gen_synth_cos(100, 3, 5.0, 3, TaskKind::Regression).unwrap();
        let truth = [1.5, -2.0, 0.5, 0.25];
        for i in 0..d.n() {
            d.y[i] = dot(d.x.row(i), &truth);
        }
        let model = fit_linear_baseline(&d, 0.0, &FitConfig::new(TaskKind::Regression)).unwrap();
        let c = linear_coefficients(&model, Some(3)).unwrap();
        for (a, b) in c.iter().zip(&truth) {
            assert!((a - b).abs() < 1e-5, "{c:?}");
        }
    }

    fn anisotropic(n: usize, seed: u64) -> Matrix {
        let mut rng = seeded_rng(seed);
        let mut m = Matrix::zeros(n, 2);
        for i in 0..n {
            let a: f64 = rng.sample(StandardNormal);
            let b: f64 = rng.sample(StandardNormal);
            m.set(i, 0, 3.0 * a);
            m.set(i, 1, 0.5 * b);
        }
        m
    }

    #[test]
    fn pca_aligns_with_axes() {
        let pca = pca_2d(&anisotropic(2000, 1)).unwrap();
        assert!(pca.components[0][0].abs() > 0.99);
        assert!(pca.components[1][1].abs() > 0.99);
        for c in &pca.components {
            let lead = c.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
            assert!(lead > 0.0);
        }
        for k in 0..2 {
            let mean: f64 = pca.projection.column(k).iter().sum::<f64>() / 2000.0;
            assert!(mean.abs() < 1e-10);
        }
    }

    #[test]
    fn pca_eigenvalues_match_dense_solver() {
        let mut rng = seeded_rng(7);
        let n = 300;
        let d = 5;
        let mix: Vec<f64> = (0..d * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut pts = Matrix::zeros(n, d);
        for i in 0..n {
            let z: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            for j in 0..d {
                pts.set(i, j, (0..d).map(|k| mix[j * d + k] * z[k] * (k + 1) as f64).sum());
            }
        }
        let pca = pca_2d(&pts).unwrap();

        let centered =
            nalgebra::DMatrix::from_fn(n, d, |i, j| pts.get(i, j) - pts.column(j).iter().sum::<f64>() / n as f64);
        let cov = centered.transpose() * &centered / (n - 1) as f64;
        let mut eig: Vec<f64> = cov.symmetric_eigen().eigenvalues.iter().copied().collect();
        eig.sort_by(|a, b| b.total_cmp(a));
        assert!((pca.explained_variance[0] - eig[0]).abs() < 1e-8 * (1.0 + eig[0]));
        assert!((pca.explained_variance[1] - eig[1]).abs() < 1e-8 * (1.0 + eig[1]));
    }

    #[test]
    fn pca_rejects_rank_one() {
        let rows: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, 2.0 * i as f64]).collect();
        assert!(pca_2d(&Matrix::from_rows(&rows).unwrap()).is_err());
        assert!(pca_2d(&Matrix::zeros(2, 3)).is_err());
    }
}
