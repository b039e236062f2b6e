use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use gbmap::data::{
    apply_preprocess, fit_preprocess, gen_cluster_vis, load_csv, synth_cos, to_csv_bytes, train_test_split, Cluster,
    CsvOptions, GenerationMetadata, GENERATOR_ALGORITHM,
};
use gbmap::drift::{drift_fixture, run_drift_experiment, DriftReport};
use gbmap::eval::{
    accuracy, embedding_feature_score, fit_linear_baseline, pca_2d, r_squared, random_search, score_model, SearchSpace,
};
use gbmap::neighbors::{MetricKind, NeighborIndex};
use gbmap::persist::{load_model, save_model, write_atomic, Provenance};
use gbmap::{fit as fit_model, Dataset, GbmapError, GbmapModel, InitialModel, Matrix, TaskKind};
use serde::Serialize;

use crate::output::CsvTable;
use crate::{ApplyArgs, DataArgs, HyperArgs, SynthKind};

fn load_training_data(args: &DataArgs) -> anyhow::Result<Dataset> {
    let options = CsvOptions {
        target_column: &args.target,
        categorical_columns: &args.categorical,
        task: args.task,
        target_optional: false,
    };
    let data = load_csv(&args.data, &options)?;
    if args.task.is_none() {
        println!("task: {} (inferred from target values)", data.task.as_str());
    }
    Ok(data)
}

fn metric_name(task: TaskKind) -> &'static str {
    match task {
        TaskKind::Regression => "R^2",
        TaskKind::Classification => "accuracy",
    }
}

fn format_metric(value: gbmap::Result<f64>) -> anyhow::Result<String> {
    match value {
        Ok(v) => Ok(format!("{v:.4}")),
        Err(GbmapError::Undefined(_)) => Ok("undefined".into()),
        Err(e) => Err(e.into()),
    }
}

pub fn fit(args: &DataArgs, hyper: &HyperArgs, out: &Path) -> anyhow::Result<()> {
    let raw = load_training_data(args)?;
    let stats = fit_preprocess(&raw)?;
    for name in &stats.dropped {
        eprintln!("warning: dropped zero-variance column '{name}'");
    }
    let train = apply_preprocess(&stats, &raw)?;
    let config = hyper.config(raw.task);
    let model = fit_model(&train, &config, InitialModel::Zero)?.with_preprocessing(stats);
    for (j, loss) in model.training_loss.iter().enumerate() {
        println!("stage {j:>4}  loss {loss:.6e}");
    }
    println!("train {}: {}", metric_name(model.task), format_metric(score_model(&model, &train))?);
    save_model(out, &model, Provenance::now(Some(&config)))?;
    println!("model written to {}", out.display());
    Ok(())
}

/// Loads a model and an input CSV, and maps the rows into model inputs.
fn load_inputs(args: &ApplyArgs) -> anyhow::Result<(GbmapModel, Dataset)> {
    let model = load_model(&args.model).with_context(|| format!("loading model {}", args.model.display()))?;
    let categorical: Vec<String> =
        model.preprocessing.as_ref().map(|s| s.categories.iter().map(|c| c.name.clone()).collect()).unwrap_or_default();
    let options = CsvOptions {
        target_column: &args.target,
        categorical_columns: &categorical,
        task: Some(model.task),
        target_optional: true,
    };
    let raw = load_csv(&args.data, &options)?;
    let data = match &model.preprocessing {
        Some(stats) => apply_preprocess(stats, &raw)?,
        None => raw,
    };
    if data.p() != model.p {
        return Err(GbmapError::Data(format!("input has {} columns, model expects {}", data.p(), model.p)).into());
    }
    Ok((model, data))
}

pub fn predict(args: &ApplyArgs) -> anyhow::Result<()> {
    let (model, data) = load_inputs(args)?;
    let scores = model.predict_batch(&data.x)?;
    let mut table = match model.task {
        TaskKind::Regression => CsvTable::new(&["prediction"])?,
        TaskKind::Classification => CsvTable::new(&["prediction", "class", "probability"])?,
    };
    for &s in &scores {
        match model.task {
            TaskKind::Regression => table.row(&[s])?,
            TaskKind::Classification => {
                let class = if s >= 0.0 { 1.0 } else { -1.0 };
                table.row(&[s, class, gbmap::objective::sigmoid(s)])?
            }
        }
    }
    table.save(&args.out)
}

pub fn embed(args: &ApplyArgs) -> anyhow::Result<()> {
    let (model, data) = load_inputs(args)?;
    let emb = model.embed_batch(&data.x)?;
    let header: Vec<String> = (1..=model.m()).map(|j| format!("phi{j}")).collect();
    let mut table = CsvTable::new(&header)?;
    for r in emb.iter_rows() {
        table.row(r)?;
    }
    table.save(&args.out)
}

fn parse_pair(text: &str, n: usize) -> anyhow::Result<(usize, usize)> {
    let invalid = || GbmapError::InvalidArgument(format!("pair '{text}' must look like i:j"));
    let (a, b) = text.trim().split_once(':').ok_or_else(invalid)?;
    let i: usize = a.trim().parse().map_err(|_| invalid())?;
    let j: usize = b.trim().parse().map_err(|_| invalid())?;
    if i >= n || j >= n {
        return Err(GbmapError::InvalidArgument(format!("pair {i}:{j} is out of range for {n} rows")).into());
    }
    Ok((i, j))
}

pub fn distance(args: &ApplyArgs, pairs: &[String], grid: usize) -> anyhow::Result<()> {
    let (model, data) = load_inputs(args)?;
    let pairs = pairs.iter().map(|p| parse_pair(p, data.n())).collect::<anyhow::Result<Vec<_>>>()?;
    let mut table = CsvTable::new(&["i", "j", "abs_diff", "path", "embedding"])?;
    for (i, j) in pairs {
        let (a, b) = (data.x.row(i), data.x.row(j));
        let diff = (model.predict(a)? - model.predict(b)?).abs();
        let path = model.path_distance(a, b, grid)?;
        let emb = model.embedding_distance(a, b)?;
        table.row(&[i as f64, j as f64, diff, path, emb])?;
    }
    table.save(&args.out)
}

pub fn explain(args: &ApplyArgs) -> anyhow::Result<()> {
    let (model, data) = load_inputs(args)?;
    let mut table = CsvTable::new(&data.feature_names)?;
    for r in data.x.iter_rows() {
        table.row(&model.local_coefficients(r)?)?;
    }
    table.save(&args.out)
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "drift".into());
    path.with_file_name(format!("{stem}{suffix}"))
}

fn save_roc(report: &DriftReport, path: &Path) -> anyhow::Result<()> {
    let mut table = CsvTable::new(&["fpr", "tpr"])?;
    for p in &report.roc {
        table.row(&[p.fpr, p.tpr])?;
    }
    table.save(path)
}

fn auc_text(auc: Option<f64>) -> String {
    auc.map_or_else(|| "undefined (all points share one label)".into(), |a| format!("{a:.4}"))
}

#[derive(Serialize)]
struct SplitSizes {
    a1: usize,
    a2: usize,
    b: usize,
}

#[derive(Serialize)]
struct DriftFile<'a> {
    split_feature: &'a str,
    drift_magnitude: f64,
    k: usize,
    quantile: f64,
    sizes: SplitSizes,
    gbmap: &'a DriftReport,
    euclid: &'a DriftReport,
}

pub fn drift(args: &DataArgs, hyper: &HyperArgs, k: usize, quantile: f64, out: &Path) -> anyhow::Result<()> {
    let data = load_training_data(args)?;
    let config = hyper.config(data.task);
    let outcome = run_drift_experiment(&data, &config, hyper.seed, k, quantile)?;
    let split = &outcome.split;
    println!("split feature: {}", split.dropped_feature);
    println!("drift magnitude: {:.6}", split.drift_magnitude);
    let file = DriftFile {
        split_feature: &split.dropped_feature,
        drift_magnitude: split.drift_magnitude,
        k,
        quantile,
        sizes: SplitSizes { a1: split.a1.n(), a2: split.a2.n(), b: split.b.n() },
        gbmap: &outcome.gbmap,
        euclid: &outcome.euclid,
    };
    write_atomic(out, serde_json::to_string_pretty(&file)?.as_bytes())?;
    save_roc(&outcome.gbmap, &sibling(out, "_gbmap_roc.csv"))?;
    save_roc(&outcome.euclid, &sibling(out, "_euclid_roc.csv"))?;
    println!("gbmap AUC: {}", auc_text(outcome.gbmap.auc));
    println!("euclid AUC: {}", auc_text(outcome.euclid.auc));
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn synth(
    kind: SynthKind,
    n: usize,
    p: usize,
    alpha: f64,
    task: TaskKind,
    noise_columns: usize,
    seed: u64,
    out: &Path,
) -> anyhow::Result<()> {
    let mut extra = std::collections::BTreeMap::new();
    let (data, meta_kind, alpha) = match kind {
        SynthKind::Cos => {
            let s = synth_cos(n, p, alpha, seed, task)?;
            let u: Vec<String> = s.direction.iter().map(|v| v.to_string()).collect();
            extra.insert("direction".into(), u.join(" "));
            (s.data, "cos", Some(alpha))
        }
        SynthKind::Cluster => {
            if task != TaskKind::Regression {
                bail!(GbmapError::InvalidArgument("the cluster dataset is regression only".into()));
            }
            let c = gen_cluster_vis(seed)?;
            extra.insert("clusters".into(), "rows 1-1000 a, 1001-2000 b1, 2001-3000 b2".into());
            (c.data, "cluster", None)
        }
        SynthKind::Drift => {
            if task != TaskKind::Regression {
                bail!(GbmapError::InvalidArgument("the drift fixture is regression only".into()));
            }
            extra.insert("noise_columns".into(), noise_columns.to_string());
            (drift_fixture(n, noise_columns, seed)?, "drift", None)
        }
    };
    let meta = GenerationMetadata {
        kind: meta_kind.into(),
        seed,
        n: data.n(),
        p: data.without_intercept().p(),
        alpha,
        task,
        generator: GENERATOR_ALGORITHM.into(),
        intercept_in_csv: false,
        extra,
    };
    write_atomic(out, &to_csv_bytes(&data, "y")?)?;
    let sidecar = out.with_extension("json");
    write_atomic(&sidecar, serde_json::to_string_pretty(&meta)?.as_bytes())?;
    println!("wrote {} rows to {} and metadata to {}", data.n(), out.display(), sidecar.display());
    Ok(())
}

pub struct BenchmarkOptions {
    pub repeats: usize,
    pub train_fraction: f64,
    pub k: usize,
    pub search_budget: usize,
    pub folds: usize,
}

fn knn_metric(index: &NeighborIndex<'_>, test: &Dataset, k: usize) -> gbmap::Result<f64> {
    let pred = index.regress_batch(&test.x, k)?;
    match test.task {
        TaskKind::Regression => r_squared(&test.y, &pred),
        TaskKind::Classification => {
            let classes: Vec<f64> = pred.iter().map(|&v| if v >= 0.0 { 1.0 } else { -1.0 }).collect();
            accuracy(&test.y, &classes)
        }
    }
}

const BENCH_COLUMNS: [&str; 5] = ["gbmap", "linear", "knn", "knn-gbmap", "emb-linear"];

/// Protocol: each repeat draws a fresh random split; preprocessing is fitted on
/// the training part; with `search_budget > 0` hyperparameters are tuned by
/// k-fold CV on the training part only.
pub fn benchmark(
    args: &DataArgs,
    hyper: &HyperArgs,
    opts: &BenchmarkOptions,
    out: Option<&Path>,
) -> anyhow::Result<()> {
    if opts.repeats == 0 {
        bail!(GbmapError::InvalidArgument("repeats must be at least 1".into()));
    }
    let raw = load_training_data(args)?;
    let base = hyper.config(raw.task);
    let mut rows: Vec<[f64; 5]> = Vec::with_capacity(opts.repeats);
    for r in 0..opts.repeats {
        let seed = hyper.seed.wrapping_add(r as u64);
        let (train_raw, test_raw) = train_test_split(&raw, opts.train_fraction, seed)?;
        let config = if opts.search_budget > 0 {
            let found =
                random_search(&train_raw, &SearchSpace::default(), opts.search_budget, opts.folds, &base, seed)?;
            println!(
                "repeat {r}: search picked m={} beta={:.3} lambda={:.2e} maxiter={} (CV {:.4})",
                found.best.m, found.best.beta, found.best.lambda, found.best.optimizer.max_iterations, found.best_score
            );
            found.best
        } else {
            base.clone()
        };
        let stats = fit_preprocess(&train_raw)?;
        let train = apply_preprocess(&stats, &train_raw)?;
        let test = apply_preprocess(&stats, &test_raw)?;
        let model = fit_model(&train, &config, InitialModel::Zero)?;
        let linear = fit_linear_baseline(&train, 0.0, &config)?;
        let euclid = NeighborIndex::new(&train, MetricKind::EuclideanOriginal)?;
        let embedded = NeighborIndex::new(&train, MetricKind::EmbeddingManhattan(&model))?;
        rows.push([
            score_model(&model, &test)?,
            score_model(&linear, &test)?,
            knn_metric(&euclid, &test, opts.k)?,
            knn_metric(&embedded, &test, opts.k)?,
            embedding_feature_score(&model, &train, &test, &config)?,
        ]);
    }

    println!("test {} over {} repeats (mean ± std)", metric_name(raw.task), opts.repeats);
    for (c, name) in BENCH_COLUMNS.iter().enumerate() {
        let v: Vec<f64> = rows.iter().map(|r| r[c]).collect();
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64).sqrt();
        println!("{name:>12}  {mean:.4} ± {sd:.4}");
    }
    if let Some(path) = out {
        let mut header = vec!["repeat"];
        header.extend(BENCH_COLUMNS);
        let mut table = CsvTable::new(&header)?;
        for (r, row) in rows.iter().enumerate() {
            let mut v = vec![r as f64];
            v.extend(row);
            table.row(&v)?;
        }
        table.save(path)?;
    }
    Ok(())
}

fn centroids(points: &Matrix, clusters: &[Cluster]) -> Vec<(Cluster, [f64; 2])> {
    [Cluster::A, Cluster::B1, Cluster::B2]
        .into_iter()
        .map(|c| {
            let rows: Vec<&[f64]> =
                points.iter_rows().zip(clusters).filter(|(_, k)| **k == c).map(|(r, _)| r).collect();
            let n = rows.len() as f64;
            (c, [rows.iter().map(|r| r[0]).sum::<f64>() / n, rows.iter().map(|r| r[1]).sum::<f64>() / n])
        })
        .collect()
}

fn save_projection(points: &Matrix, clusters: &[Cluster], path: &Path) -> anyhow::Result<()> {
    let mut table = CsvTable::new(&["pc1", "pc2", "cluster"])?;
    for (r, c) in points.iter_rows().zip(clusters) {
        table.row_with_label(r, c.as_str())?;
    }
    table.save(path)
}

pub fn vis(hyper: &HyperArgs, out_dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let vis = gen_cluster_vis(hyper.seed)?;
    let config = hyper.config(TaskKind::Regression);
    let model = fit_model(&vis.data, &config, InitialModel::Zero)?;
    let embedding = pca_2d(&model.embed_batch(&vis.data.x)?)?.projection;
    let original = pca_2d(&vis.data.without_intercept().x)?.projection;
    for (name, proj) in [("embedding", &embedding), ("original", &original)] {
        let path = out_dir.join(format!("{name}_pca.csv"));
        save_projection(proj, &vis.clusters, &path)?;
        let c = centroids(proj, &vis.clusters);
        let d = |a: usize, b: usize| ((c[a].1[0] - c[b].1[0]).powi(2) + (c[a].1[1] - c[b].1[1]).powi(2)).sqrt();
        println!(
            "{name}: centroid distances a-b1 {:.3}, a-b2 {:.3}, b1-b2 {:.3} -> {}",
            d(0, 1),
            d(0, 2),
            d(1, 2),
            path.display()
        );
    }
    Ok(())
}
