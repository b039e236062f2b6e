//! Drift-inducing splits, extrapolation indicators and ROC evaluation.

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::boosting::{fit, FitConfig, InitialModel};
use crate::data::{apply_preprocess, fit_preprocess, seeded_rng, shuffled_indices, Dataset, PreprocessStats, TaskKind};
use crate::error::{GbmapError, Result};
use crate::matrix::{dot, Matrix};
use crate::model::GbmapModel;
use crate::neighbors::{MetricKind, NeighborIndex};
use crate::objective::{loss_raw, sigmoid, LossKind};
use crate::optimizer::{minimize, OptimizerConfig};

pub const DEFAULT_K: usize = 5;
pub const DEFAULT_QUANTILE: f64 = 0.95;

/// Train / in-distribution / out-of-distribution parts of a dataset.
///
/// The three parts are standardized with statistics learned on `a1` and no
/// longer contain `dropped_feature`.
#[derive(Debug, Clone)]
pub struct DriftSplit {
    pub a1: Dataset,
    pub a2: Dataset,
    pub b: Dataset,
    pub dropped_feature: String,
    /// Mean loss on `b` minus mean loss on `a2` for a model fitted on `a1`.
    pub drift_magnitude: f64,
    pub preprocessing: PreprocessStats,
    /// The model fitted on `a1` while scoring this split.
    pub model: GbmapModel,
}

struct SplitIndices {
    a1: Vec<usize>,
    a2: Vec<usize>,
    b: Vec<usize>,
}

/// Rows sorted by feature `j` (ties by row index), lower half further
/// shuffled into `a1` and `a2`.
fn split_along(data: &Dataset, j: usize, seed: u64) -> SplitIndices {
    let n = data.n();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&r, &s| data.x.get(r, j).total_cmp(&data.x.get(s, j)).then(r.cmp(&s)));
    let half = n / 2;
    let a = &order[..half];
    let perm = shuffled_indices(a.len(), &mut seeded_rng(seed));
    let cut = a.len().div_ceil(2);
    SplitIndices {
        a1: perm[..cut].iter().map(|&i| a[i]).collect(),
        a2: perm[cut..].iter().map(|&i| a[i]).collect(),
        b: order[half..].to_vec(),
    }
}

fn mean_loss_on(model: &GbmapModel, data: &Dataset, kind: LossKind) -> Result<f64> {
    let f = model.predict_batch(&data.x)?;
    Ok(data.y.iter().zip(&f).map(|(&y, &v)| loss_raw(kind, y, v)).sum::<f64>() / data.n() as f64)
}

fn evaluate_candidate(data: &Dataset, j: usize, config: &FitConfig, seed: u64) -> Result<DriftSplit> {
    let idx = split_along(data, j, seed);
    let reduced = data.drop_feature(j);
    let a1 = reduced.subset(&idx.a1);
    let stats = fit_preprocess(&a1)?;
    let a1 = apply_preprocess(&stats, &a1)?;
    let a2 = apply_preprocess(&stats, &reduced.subset(&idx.a2))?;
    let b = apply_preprocess(&stats, &reduced.subset(&idx.b))?;
    let model = fit(&a1, config, InitialModel::Zero)?;
    let kind = config.loss();
    let drift_magnitude = mean_loss_on(&model, &b, kind)? - mean_loss_on(&model, &a2, kind)?;
    Ok(DriftSplit {
        a1,
        a2,
        b,
        dropped_feature: data.feature_names[j].clone(),
        drift_magnitude,
        preprocessing: stats,
        model,
    })
}

/// Tries every numeric covariate as the split direction and keeps the one
/// whose removal and split produce the largest loss increase from `a2` to `b`.
///
/// `data` holds raw covariates; a trailing intercept column is ignored.
pub fn make_drift_split(data: &Dataset, config: &FitConfig, seed: u64) -> Result<DriftSplit> {
    config.validate()?;
    let data = data.without_intercept();
    data.validate()?;
    if data.n() < 8 {
        return Err(GbmapError::invalid(format!("drift split needs at least 8 rows, got {}", data.n())));
    }
    if data.p() < 2 {
        return Err(GbmapError::invalid("drift split needs at least 2 numeric features"));
    }
    if data.task != config.task {
        return Err(GbmapError::invalid("dataset task does not match the fit configuration"));
    }
    let candidates = (0..data.p())
        .into_par_iter()
        .map(|j| evaluate_candidate(&data, j, config, seed))
        .collect::<Result<Vec<_>>>()?;
    let mut best: Option<DriftSplit> = None;
    for c in candidates {
        if !c.drift_magnitude.is_finite() {
            continue;
        }
        if best.as_ref().is_none_or(|b| c.drift_magnitude > b.drift_magnitude) {
            best = Some(c);
        }
    }
    best.ok_or_else(|| GbmapError::Numeric("no split produced a finite drift magnitude".into()))
}

/// `|f(x) - f_kNN(x)|` with neighbors taken in the model's embedding space.
/// For regression `f_kNN` averages training targets, for classification the
/// model's own training predictions.
pub struct GbmapDrifter<'a> {
    model: &'a GbmapModel,
    index: NeighborIndex<'a>,
    k: usize,
}

impl<'a> GbmapDrifter<'a> {
    pub fn new(model: &'a GbmapModel, train: &'a Dataset, k: usize) -> Result<Self> {
        if k == 0 || k > train.n() {
            return Err(GbmapError::invalid(format!("k must be in 1..={}, got {k}", train.n())));
        }
        let index = NeighborIndex::new(train, MetricKind::EmbeddingManhattan(model))?;
        Ok(GbmapDrifter { model, index, k })
    }

    pub fn indicator(&self, x: &[f64]) -> Result<f64> {
        let f = self.model.predict(x)?;
        let reference = match self.model.task {
            TaskKind::Regression => self.index.regress(x, self.k)?,
            TaskKind::Classification => self.index.score(x, self.k)?,
        };
        Ok((f - reference).abs())
    }

    pub fn indicators(&self, x: &Matrix) -> Result<Vec<f64>> {
        (0..x.rows()).into_par_iter().map(|i| self.indicator(x.row(i))).collect()
    }
}

/// Distance from a point to its k-th nearest training row in the original space.
pub struct EuclidDrifter<'a> {
    index: NeighborIndex<'a>,
    k: usize,
}

impl<'a> EuclidDrifter<'a> {
    pub fn new(train: &'a Dataset, k: usize) -> Result<Self> {
        if k == 0 || k > train.n() {
            return Err(GbmapError::invalid(format!("k must be in 1..={}, got {k}", train.n())));
        }
        Ok(EuclidDrifter { index: NeighborIndex::new(train, MetricKind::EuclideanOriginal)?, k })
    }

    pub fn indicator(&self, x: &[f64]) -> Result<f64> {
        self.index.kth_distance(x, self.k)
    }

    pub fn indicators(&self, x: &Matrix) -> Result<Vec<f64>> {
        (0..x.rows()).into_par_iter().map(|i| self.indicator(x.row(i))).collect()
    }
}

pub fn gbmap_indicator(model: &GbmapModel, train: &Dataset, x: &[f64], k: usize) -> Result<f64> {
    GbmapDrifter::new(model, train, k)?.indicator(x)
}

pub fn euclid_indicator(train: &Dataset, x: &[f64], k: usize) -> Result<f64> {
    EuclidDrifter::new(train, k)?.indicator(x)
}

/// Linear score `w^T x` of a logistic regression, used as the regression
/// target that classification drift is measured against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreModel {
    pub coefficients: Vec<f64>,
    /// Mean logistic loss at `coefficients`.
    pub objective: f64,
}

impl ScoreModel {
    pub fn score(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.coefficients.len() {
            return Err(GbmapError::dim_mismatch("input point", self.coefficients.len(), x.len()));
        }
        Ok(dot(&self.coefficients, x))
    }
}

pub(crate) fn logistic_objective(data: &Dataset, w: &[f64], grad: &mut [f64]) -> f64 {
    let n = data.n() as f64;
    grad.iter_mut().for_each(|g| *g = 0.0);
    let mut total = 0.0;
    for (row, &y) in data.x.iter_rows().zip(&data.y) {
        let s = dot(row, w);
        total += loss_raw(LossKind::Logistic, y, s);
        let coef = -y * sigmoid(-y * s) / n;
        for (g, v) in grad.iter_mut().zip(row) {
            *g += coef * v;
        }
    }
    total / n
}

/// Unregularized logistic regression on all columns of `data` (include an
/// intercept column to get an intercept).
pub fn fit_score_model(data: &Dataset, optimizer: &OptimizerConfig) -> Result<ScoreModel> {
    if data.task != TaskKind::Classification {
        return Err(GbmapError::invalid("score model needs classification data"));
    }
    data.validate()?;
    let result = minimize(|w, g| logistic_objective(data, w, g), &vec![0.0; data.p()], optimizer)?;
    Ok(ScoreModel { coefficients: result.solution, objective: result.objective_value })
}

/// Squared error of the model against the target (regression) or against
/// the logistic score (classification).
pub fn ground_truth_loss(model: &GbmapModel, x: &[f64], y: f64, score_model: Option<&ScoreModel>) -> Result<f64> {
    let f = model.predict(x)?;
    let reference = match model.task {
        TaskKind::Regression => y,
        TaskKind::Classification => score_model
            .ok_or_else(|| GbmapError::InvalidState("classification drift losses need a score model".into()))?
            .score(x)?,
    };
    Ok((reference - f) * (reference - f))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    pub indicators: Vec<f64>,
    pub losses: Vec<f64>,
    pub labels: Vec<bool>,
    pub threshold: f64,
    pub roc: Vec<RocPoint>,
    /// `None` when every label is the same.
    pub auc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split_feature: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drift_magnitude: Option<f64>,
}

/// Linear-interpolation quantile of unsorted values.
pub fn quantile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(GbmapError::invalid("quantile of an empty sample"));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(GbmapError::invalid(format!("quantile level must be in [0, 1], got {q}")));
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(GbmapError::Numeric("quantile of NaN values".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let h = (v.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(v.len() - 1);
    Ok(v[lo] + (h - lo as f64) * (v[hi] - v[lo]))
}

/// ROC curve sweeping every distinct indicator value as a threshold
/// (points with indicator >= threshold are flagged), from (0,0) to (1,1).
/// Empty when one class is missing.
pub fn roc_curve(indicators: &[f64], labels: &[bool]) -> Vec<RocPoint> {
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Vec::new();
    }
    let mut order: Vec<usize> = (0..indicators.len()).collect();
    order.sort_by(|&i, &j| indicators[j].total_cmp(&indicators[i]));
    let mut roc = vec![RocPoint { fpr: 0.0, tpr: 0.0 }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let t = indicators[order[i]];
        while i < order.len() && indicators[order[i]] == t {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        roc.push(RocPoint { fpr: fp as f64 / neg as f64, tpr: tp as f64 / pos as f64 });
    }
    roc
}

/// Trapezoidal area under a ROC list.
pub fn trapezoid_auc(roc: &[RocPoint]) -> f64 {
    roc.windows(2).map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0).sum()
}

/// Labels points whose loss exceeds the `quantile` of the in-distribution
/// losses `reference_losses`, then scores `indicators` against those labels.
pub fn label_and_score(
    indicators: &[f64],
    losses: &[f64],
    reference_losses: &[f64],
    quantile_level: f64,
) -> Result<DriftReport> {
    if indicators.len() != losses.len() {
        return Err(GbmapError::dim_mismatch("indicators", losses.len(), indicators.len()));
    }
    if indicators.iter().any(|v| v.is_nan()) {
        return Err(GbmapError::Numeric("indicator values contain NaN".into()));
    }
    let threshold = quantile(reference_losses, quantile_level)?;
    let labels: Vec<bool> = losses.iter().map(|&l| l > threshold).collect();
    let roc = roc_curve(indicators, &labels);
    let auc = if roc.is_empty() { None } else { Some(trapezoid_auc(&roc)) };
    Ok(DriftReport {
        indicators: indicators.to_vec(),
        losses: losses.to_vec(),
        labels,
        threshold,
        roc,
        auc,
        split_feature: None,
        drift_magnitude: None,
    })
}

fn concat(parts: &[&Dataset]) -> Result<Dataset> {
    let p = parts[0].p();
    let mut data = Vec::new();
    let mut y = Vec::new();
    for d in parts {
        data.extend_from_slice(d.x.as_slice());
        y.extend_from_slice(&d.y);
    }
    let x = Matrix::from_vec(y.len(), p, data)?;
    Ok(Dataset::new(x, y, parts[0].feature_names.clone(), parts[0].task)?.with_intercept_flag(parts[0].has_intercept))
}

/// Both drifters evaluated on `a2` followed by `b`.
#[derive(Debug, Clone)]
pub struct DriftOutcome {
    pub split: DriftSplit,
    pub gbmap: DriftReport,
    pub euclid: DriftReport,
}

/// Full experiment: split, fit on `a1`, compute losses and both indicators
/// on `a2 ∪ b`, label by the `a2` loss quantile.
pub fn run_drift_experiment(
    data: &Dataset,
    config: &FitConfig,
    seed: u64,
    k: usize,
    quantile_level: f64,
) -> Result<DriftOutcome> {
    let split = make_drift_split(data, config, seed)?;
    let eval = concat(&[&split.a2, &split.b])?;
    let score_model = match data.task {
        TaskKind::Regression => None,
        TaskKind::Classification => {
            Some(fit_score_model(&concat(&[&split.a1, &split.a2, &split.b])?, &config.optimizer)?)
        }
    };
    let model = &split.model;
    let losses = (0..eval.n())
        .into_par_iter()
        .map(|i| ground_truth_loss(model, eval.x.row(i), eval.y[i], score_model.as_ref()))
        .collect::<Result<Vec<f64>>>()?;
    let reference = &losses[..split.a2.n()];
    let g = GbmapDrifter::new(model, &split.a1, k)?.indicators(&eval.x)?;
    let e = EuclidDrifter::new(&split.a1, k)?.indicators(&eval.x)?;
    let mut gbmap = label_and_score(&g, &losses, reference, quantile_level)?;
    let mut euclid = label_and_score(&e, &losses, reference, quantile_level)?;
    for r in [&mut gbmap, &mut euclid] {
        r.split_feature = Some(split.dropped_feature.clone());
        r.drift_magnitude = Some(split.drift_magnitude);
    }
    Ok(DriftOutcome { split, gbmap, euclid })
}

/// Synthetic regression data with a known drift direction: a latent `z`
/// drives two noisy copies `x1`, `x2` and a nonlinear target, next to
/// `noise_columns` irrelevant standard normal features.
pub fn drift_fixture(n: usize, noise_columns: usize, seed: u64) -> Result<Dataset> {
    let mut rng = seeded_rng(seed);
    let p = 2 + noise_columns;
    let mut x = Matrix::zeros(n, p);
    let mut y = Vec::with_capacity(n);
    let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };
    for i in 0..n {
        let z = normal();
        let row = x.row_mut(i);
        row[0] = z + 0.3 * normal();
        row[1] = z + 0.3 * normal();
        for v in &mut row[2..] {
            *v = normal();
        }
        y.push(row[1] * row[1] + 0.1 * normal());
    }
    let mut names = vec!["x1".to_string(), "x2".to_string()];
    names.extend((1..=noise_columns).map(|j| format!("noise{j}")));
    Dataset::new(x, y, names, TaskKind::Regression)
}
