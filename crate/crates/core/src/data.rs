//! Datasets, CSV ingestion, standardization, and synthetic generators.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{GbmapError, Result};
use crate::matrix::Matrix;
use crate::objective::sigmoid;

/// Name given to the appended column of ones.
pub const INTERCEPT_NAME: &str = "intercept";

/// Random number generator used by every seeded routine in this crate.
pub type SeededRng = ChaCha8Rng;

/// Description of the random stream behind generated data, for metadata.
pub const GENERATOR_ALGORITHM: &str = "ChaCha8Rng (rand_chacha 0.9) + StandardNormal ziggurat (rand_distr 0.5)";

pub fn seeded_rng(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Regression,
    Classification,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Regression => "regression",
            TaskKind::Classification => "classification",
        }
    }
}

impl std::str::FromStr for TaskKind {
    type Err = GbmapError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "regression" | "reg" => Ok(TaskKind::Regression),
            "classification" | "class" | "clf" => Ok(TaskKind::Classification),
            other => Err(GbmapError::invalid(format!("unknown task '{other}'"))),
        }
    }
}

/// A categorical covariate that has not been one-hot encoded yet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoricalColumn {
    pub name: String,
    pub values: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// Numeric covariates, one row per observation.
    pub x: Matrix,
    /// Real targets for regression, exactly -1 or +1 for classification.
    pub y: Vec<f64>,
    pub feature_names: Vec<String>,
    pub task: TaskKind,
    /// Whether the last column of `x` is a column of ones.
    pub has_intercept: bool,
    pub categorical: Vec<CategoricalColumn>,
}

impl Dataset {
    pub fn new(x: Matrix, y: Vec<f64>, feature_names: Vec<String>, task: TaskKind) -> Result<Self> {
        let data = Dataset { x, y, feature_names, task, has_intercept: false, categorical: Vec::new() };
        data.validate()?;
        Ok(data)
    }

    pub fn with_intercept_flag(mut self, has_intercept: bool) -> Self {
        self.has_intercept = has_intercept;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.x.rows();
        if n == 0 {
            return Err(GbmapError::invalid("dataset has no rows"));
        }
        if self.x.cols() == 0 && self.categorical.is_empty() {
            return Err(GbmapError::invalid("dataset has no features"));
        }
        if self.y.len() != n {
            return Err(GbmapError::dim_mismatch("target vector", n, self.y.len()));
        }
        if self.feature_names.len() != self.x.cols() {
            return Err(GbmapError::dim_mismatch("feature names", self.x.cols(), self.feature_names.len()));
        }
        for c in &self.categorical {
            if c.values.len() != n {
                return Err(GbmapError::dim_mismatch(&format!("categorical column '{}'", c.name), n, c.values.len()));
            }
        }
        for i in 0..n {
            if let Some(j) = self.x.row(i).iter().position(|v| !v.is_finite()) {
                return Err(GbmapError::Ingest {
                    row: i + 1,
                    column: self.feature_names[j].clone(),
                    message: "non-finite value".into(),
                });
            }
            let y = self.y[i];
            if !y.is_finite() {
                return Err(GbmapError::Ingest {
                    row: i + 1,
                    column: "target".into(),
                    message: "non-finite target".into(),
                });
            }
            if self.task == TaskKind::Classification && y != 1.0 && y != -1.0 {
                return Err(GbmapError::Ingest {
                    row: i + 1,
                    column: "target".into(),
                    message: format!("classification target must be -1 or +1, got {y}"),
                });
            }
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.x.rows()
    }

    pub fn p(&self) -> usize {
        self.x.cols()
    }

    /// Rows `idx`, in order.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select_rows(idx),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            feature_names: self.feature_names.clone(),
            task: self.task,
            has_intercept: self.has_intercept,
            categorical: self
                .categorical
                .iter()
                .map(|c| CategoricalColumn {
                    name: c.name.clone(),
                    values: idx.iter().map(|&i| c.values[i].clone()).collect(),
                })
                .collect(),
        }
    }

    pub fn feature_index(&self, name: &str) -> Option<usize> {
        self.feature_names.iter().position(|f| f == name)
    }

    /// Copy without numeric feature `j`.
    pub fn drop_feature(&self, j: usize) -> Dataset {
        let keep: Vec<usize> = (0..self.p()).filter(|&k| k != j).collect();
        let intercept_kept = self.has_intercept && j + 1 != self.p();
        Dataset {
            x: self.x.select_cols(&keep),
            y: self.y.clone(),
            feature_names: keep.iter().map(|&k| self.feature_names[k].clone()).collect(),
            task: self.task,
            has_intercept: intercept_kept,
            categorical: self.categorical.clone(),
        }
    }

    /// Copy without the trailing column of ones, if there is one.
    pub fn without_intercept(&self) -> Dataset {
        if self.has_intercept {
            self.drop_feature(self.p() - 1)
        } else {
            self.clone()
        }
    }

    /// Names of the numeric features, excluding a trailing intercept.
    pub fn covariate_names(&self) -> &[String] {
        if self.has_intercept {
            &self.feature_names[..self.p() - 1]
        } else {
            &self.feature_names
        }
    }
}

/// Classification when every target is exactly -1 or +1, regression otherwise.
pub fn infer_task(y: &[f64]) -> TaskKind {
    if !y.is_empty() && y.iter().all(|&v| v == 1.0 || v == -1.0) {
        TaskKind::Classification
    } else {
        TaskKind::Regression
    }
}

#[derive(Debug, Clone, Default)]
pub struct CsvOptions<'a> {
    pub target_column: &'a str,
    pub categorical_columns: &'a [String],
    /// `None` infers the task from the targets.
    pub task: Option<TaskKind>,
    /// Accept files without the target column. Targets are then a placeholder:
    /// 0 for regression, +1 for classification.
    pub target_optional: bool,
}

pub fn load_csv(path: impl AsRef<Path>, options: &CsvOptions<'_>) -> Result<Dataset> {
    let file = std::fs::File::open(path.as_ref())
        .map_err(|e| GbmapError::Data(format!("cannot open {}: {e}", path.as_ref().display())))?;
    read_csv(file, options)
}

/// Reads a headed CSV. Numeric columns must parse as finite numbers; cells of
/// categorical columns are kept verbatim.
pub fn read_csv<R: Read>(reader: R, options: &CsvOptions<'_>) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let target_idx = headers.iter().position(|h| h == options.target_column);
    if target_idx.is_none() && !options.target_optional {
        return Err(GbmapError::Data(format!("target column '{}' not found", options.target_column)));
    }
    for c in options.categorical_columns {
        if !headers.contains(c) {
            return Err(GbmapError::Data(format!("categorical column '{c}' not found")));
        }
    }
    let is_categorical = |j: usize| options.categorical_columns.contains(&headers[j]);
    let is_target = |j: usize| target_idx == Some(j);
    let numeric_cols: Vec<usize> = (0..headers.len()).filter(|&j| !is_target(j) && !is_categorical(j)).collect();
    let cat_cols: Vec<usize> = (0..headers.len()).filter(|&j| !is_target(j) && is_categorical(j)).collect();

    let mut values = Vec::new();
    let mut y = Vec::new();
    let mut cats: Vec<Vec<String>> = vec![Vec::new(); cat_cols.len()];
    for (r, record) in rdr.records().enumerate() {
        let record = record?;
        let row = r + 1;
        if record.len() != headers.len() {
            return Err(GbmapError::Ingest {
                row,
                column: String::new(),
                message: format!("expected {} fields, found {}", headers.len(), record.len()),
            });
        }
        let parse = |j: usize| -> Result<f64> {
            let cell = record[j].trim();
            let err = |message: &str| GbmapError::Ingest { row, column: headers[j].clone(), message: message.into() };
            if cell.is_empty() {
                return Err(err("missing value"));
            }
            let v: f64 = cell.parse().map_err(|_| err(&format!("cannot parse '{cell}' as a number")))?;
            if !v.is_finite() {
                return Err(err("non-finite value"));
            }
            Ok(v)
        };
        for &j in &numeric_cols {
            values.push(parse(j)?);
        }
        y.push(match target_idx {
            Some(t) => parse(t)?,
            None => match options.task {
                Some(TaskKind::Classification) => 1.0,
                _ => 0.0,
            },
        });
        for (k, &j) in cat_cols.iter().enumerate() {
            let cell = record[j].trim();
            if cell.is_empty() {
                return Err(GbmapError::Ingest { row, column: headers[j].clone(), message: "missing value".into() });
            }
            cats[k].push(cell.to_string());
        }
    }
    if y.is_empty() {
        return Err(GbmapError::Data("CSV has no data rows".into()));
    }

    let task = match (options.task, target_idx) {
        (Some(t), _) => t,
        (None, Some(_)) => infer_task(&y),
        (None, None) => TaskKind::Regression,
    };
    if let (TaskKind::Classification, Some(target_idx)) = (task, target_idx) {
        let zero_one = y.iter().all(|&v| v == 0.0 || v == 1.0);
        for (i, v) in y.iter_mut().enumerate() {
            if zero_one {
                *v = if *v == 1.0 { 1.0 } else { -1.0 };
            } else if *v != 1.0 && *v != -1.0 {
                return Err(GbmapError::Ingest {
                    row: i + 1,
                    column: headers[target_idx].clone(),
                    message: format!("classification target must be in {{0,1}} or {{-1,+1}}, got {v}"),
                });
            }
        }
    }

    let n = y.len();
    let data = Dataset {
        x: Matrix::from_vec(n, numeric_cols.len(), values)?,
        y,
        feature_names: numeric_cols.iter().map(|&j| headers[j].clone()).collect(),
        task,
        has_intercept: false,
        categorical: cat_cols
            .iter()
            .zip(cats)
            .map(|(&j, values)| CategoricalColumn { name: headers[j].clone(), values })
            .collect(),
    };
    data.validate()?;
    Ok(data)
}

/// Writes features (without an intercept column) and the target as CSV.
pub fn to_csv_bytes(data: &Dataset, target_name: &str) -> Result<Vec<u8>> {
    let plain = data.without_intercept();
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<&str> = plain.feature_names.iter().map(String::as_str).collect();
    header.extend(plain.categorical.iter().map(|c| c.name.as_str()));
    header.push(target_name);
    w.write_record(&header)?;
    for i in 0..plain.n() {
        let mut rec: Vec<String> = plain.x.row(i).iter().map(|v| v.to_string()).collect();
        rec.extend(plain.categorical.iter().map(|c| c.values[i].clone()));
        rec.push(plain.y[i].to_string());
        w.write_record(&rec)?;
    }
    w.into_inner().map_err(|e| GbmapError::Io(e.into_error()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NumericStats {
    pub name: String,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryMap {
    pub name: String,
    /// One output column per level, in this order.
    pub levels: Vec<String>,
}

/// Standardization and encoding learned from a training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessStats {
    /// Kept numeric features, in output order.
    pub numeric: Vec<NumericStats>,
    /// Numeric features dropped for having zero variance on the training set.
    pub dropped: Vec<String>,
    pub categories: Vec<CategoryMap>,
    /// Always "population": standard deviations divide by n.
    pub std_convention: String,
}

impl PreprocessStats {
    /// Column names produced by [`apply_preprocess`].
    pub fn output_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.numeric.iter().map(|s| s.name.clone()).collect();
        for c in &self.categories {
            names.extend(c.levels.iter().map(|l| format!("{}={}", c.name, l)));
        }
        names.push(INTERCEPT_NAME.to_string());
        names
    }

    pub fn output_dim(&self) -> usize {
        self.numeric.len() + self.categories.iter().map(|c| c.levels.len()).sum::<usize>() + 1
    }
}

/// Learns column means, population standard deviations and category levels.
pub fn fit_preprocess(train: &Dataset) -> Result<PreprocessStats> {
    train.validate()?;
    let n = train.n() as f64;
    let mut numeric = Vec::new();
    let mut dropped = Vec::new();
    let source = train.without_intercept();
    for (j, name) in source.feature_names.iter().enumerate() {
        let col = source.x.column(j);
        let mean = col.iter().sum::<f64>() / n;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let std = var.sqrt();
        if std > 1e-12 * (1.0 + mean.abs()) {
            numeric.push(NumericStats { name: name.clone(), mean, std });
        } else {
            dropped.push(name.clone());
        }
    }
    let categories = train
        .categorical
        .iter()
        .map(|c| {
            let mut levels: Vec<String> = c.values.clone();
            levels.sort();
            levels.dedup();
            CategoryMap { name: c.name.clone(), levels }
        })
        .collect();
    Ok(PreprocessStats { numeric, dropped, categories, std_convention: "population".into() })
}

/// Standardizes numeric columns with the stored statistics, appends one-hot
/// columns, then a trailing intercept column of ones.
pub fn apply_preprocess(stats: &PreprocessStats, data: &Dataset) -> Result<Dataset> {
    let n = data.n();
    let mut sources = Vec::with_capacity(stats.numeric.len());
    for s in &stats.numeric {
        let j = data
            .feature_index(&s.name)
            .ok_or_else(|| GbmapError::Data(format!("input is missing column '{}'", s.name)))?;
        sources.push(j);
    }
    let mut cat_sources = Vec::with_capacity(stats.categories.len());
    for c in &stats.categories {
        let col = data
            .categorical
            .iter()
            .find(|k| k.name == c.name)
            .ok_or_else(|| GbmapError::Data(format!("input is missing categorical column '{}'", c.name)))?;
        let mut level_idx = Vec::with_capacity(n);
        for (i, v) in col.values.iter().enumerate() {
            let l = c.levels.iter().position(|l| l == v).ok_or_else(|| GbmapError::Ingest {
                row: i + 1,
                column: c.name.clone(),
                message: format!("unknown category '{v}'"),
            })?;
            level_idx.push(l);
        }
        cat_sources.push(level_idx);
    }

    let dim = stats.output_dim();
    let mut x = Matrix::zeros(n, dim);
    for i in 0..n {
        let src = data.x.row(i);
        let out = x.row_mut(i);
        for (k, (s, &j)) in stats.numeric.iter().zip(&sources).enumerate() {
            out[k] = (src[j] - s.mean) / s.std;
        }
        let mut offset = stats.numeric.len();
        for (c, idx) in stats.categories.iter().zip(&cat_sources) {
            out[offset + idx[i]] = 1.0;
            offset += c.levels.len();
        }
        out[dim - 1] = 1.0;
    }
    Ok(Dataset {
        x,
        y: data.y.clone(),
        feature_names: stats.output_names(),
        task: data.task,
        has_intercept: true,
        categorical: Vec::new(),
    })
}

/// Result of the cosine generator, with the generating direction and the
/// centered real-valued score kept alongside the dataset.
#[derive(Debug, Clone)]
pub struct SynthCos {
    pub data: Dataset,
    /// Unit vector `u` in `y = alpha * cos(X) u`.
    pub direction: Vec<f64>,
    /// Centered `alpha * cos(X) u`; equals `data.y` for regression.
    pub score: Vec<f64>,
}

/// Gaussian covariates with target `alpha * cos(X) u` for a random unit `u`,
/// centered. For classification, labels are drawn with `P(+1) = sigmoid(score)`.
/// A trailing intercept column is included.
pub fn synth_cos(n: usize, p: usize, alpha: f64, seed: u64, task: TaskKind) -> Result<SynthCos> {
    if n == 0 || p == 0 {
        return Err(GbmapError::invalid("synth-cos needs n >= 1 and p >= 1"));
    }
    if !alpha.is_finite() {
        return Err(GbmapError::invalid("alpha must be finite"));
    }
    let mut rng = seeded_rng(seed);
    let mut x = Matrix::zeros(n, p + 1);
    for i in 0..n {
        let row = x.row_mut(i);
        for v in row[..p].iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        row[p] = 1.0;
    }
    let direction = random_unit_vector(&mut rng, p);
    let mut score: Vec<f64> =
        (0..n).map(|i| alpha * x.row(i)[..p].iter().zip(&direction).map(|(v, u)| v.cos() * u).sum::<f64>()).collect();
    let mean = score.iter().sum::<f64>() / n as f64;
    score.iter_mut().for_each(|s| *s -= mean);

    let y = match task {
        TaskKind::Regression => score.clone(),
        TaskKind::Classification => {
            score.iter().map(|&s| if rng.random::<f64>() < sigmoid(s) { 1.0 } else { -1.0 }).collect()
        }
    };
    let mut names: Vec<String> = (1..=p).map(|j| format!("x{j}")).collect();
    names.push(INTERCEPT_NAME.to_string());
    let data = Dataset::new(x, y, names, task)?.with_intercept_flag(true);
    Ok(SynthCos { data, direction, score })
}

pub fn gen_synth_cos(n: usize, p: usize, alpha: f64, seed: u64, task: TaskKind) -> Result<Dataset> {
    synth_cos(n, p, alpha, seed, task).map(|s| s.data)
}

fn random_unit_vector(rng: &mut SeededRng, p: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..p).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|a| a / norm).collect();
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Cluster {
    A,
    B1,
    B2,
}

impl Cluster {
    pub fn as_str(self) -> &'static str {
        match self {
            Cluster::A => "a",
            Cluster::B1 => "b1",
            Cluster::B2 => "b2",
        }
    }
}

#[derive(Debug, Clone)]
pub struct ClusterVis {
    pub data: Dataset,
    pub clusters: Vec<Cluster>,
    pub direction: Vec<f64>,
}

/// Three clusters of 1000 points in 8 dimensions plus a constant ninth
/// column. Cluster `a` is shifted by +4 along dimensions 1-4, `b1` along
/// dimensions 5-8, `b2` is unshifted. The target `cos(X) u` depends only on
/// dimensions 1-4, so `b1` and `b2` differ only in irrelevant directions.
pub fn gen_cluster_vis(seed: u64) -> Result<ClusterVis> {
    const PER_CLUSTER: usize = 1000;
    let n = 3 * PER_CLUSTER;
    let mut rng = seeded_rng(seed);
    let mut x = Matrix::zeros(n, 9);
    let mut clusters = Vec::with_capacity(n);
    for i in 0..n {
        let cluster = match i / PER_CLUSTER {
            0 => Cluster::A,
            1 => Cluster::B1,
            _ => Cluster::B2,
        };
        let row = x.row_mut(i);
        for (j, v) in row[..8].iter_mut().enumerate() {
            let noise: f64 = rng.sample(StandardNormal);
            let shifted = matches!((cluster, j), (Cluster::A, 0..=3) | (Cluster::B1, 4..=7));
            *v = if shifted { noise + 4.0 } else { noise };
        }
        row[8] = 1.0;
        clusters.push(cluster);
    }
    let mut direction = random_unit_vector(&mut rng, 4);
    direction.resize(9, 0.0);
    let y: Vec<f64> = x.iter_rows().map(|r| r.iter().zip(&direction).map(|(v, u)| v.cos() * u).sum()).collect();
    let names = (1..=9).map(|j| format!("x{j}")).collect();
    let data = Dataset::new(x, y, names, TaskKind::Regression)?.with_intercept_flag(true);
    Ok(ClusterVis { data, clusters, direction })
}

/// Sidecar describing how a generated CSV was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationMetadata {
    pub kind: String,
    pub seed: u64,
    pub n: usize,
    pub p: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    pub task: TaskKind,
    pub generator: String,
    /// Generated rows carry an intercept column that the CSV omits.
    pub intercept_in_csv: bool,
    #[serde(skip_serializing_if = "BTreeMap::is_empty", default)]
    pub extra: BTreeMap<String, String>,
}

/// Seeded Fisher-Yates permutation of `0..n`.
pub fn shuffled_indices(n: usize, rng: &mut SeededRng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

/// Random split into a training part of `floor(n * train_fraction)` rows and the rest.
pub fn train_test_split(data: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(GbmapError::invalid("train_fraction must be in (0, 1)"));
    }
    let idx = shuffled_indices(data.n(), &mut seeded_rng(seed));
    let cut = ((data.n() as f64) * train_fraction).floor() as usize;
    if cut == 0 || cut == data.n() {
        return Err(GbmapError::invalid("split leaves an empty part"));
    }
    Ok((data.subset(&idx[..cut]), data.subset(&idx[cut..])))
}
