//! Exact k-nearest-neighbor queries under the original Euclidean metric or
//! the Manhattan metric of a fitted embedding.

use rayon::prelude::*;

use crate::data::Dataset;
use crate::error::{GbmapError, Result};
use crate::matrix::{euclidean, manhattan, Matrix};
use crate::model::GbmapModel;

#[derive(Debug, Clone, Copy)]
pub enum MetricKind<'a> {
    EuclideanOriginal,
    EmbeddingManhattan(&'a GbmapModel),
}

/// Training points mapped into the metric space, ready for queries.
#[derive(Debug, Clone)]
pub struct NeighborIndex<'a> {
    metric: MetricKind<'a>,
    points: Matrix,
    targets: &'a [f64],
    /// Model predictions at the training points, for embedding metrics.
    scores: Option<Vec<f64>>,
}

impl<'a> NeighborIndex<'a> {
    pub fn new(train: &'a Dataset, metric: MetricKind<'a>) -> Result<Self> {
        if train.n() == 0 {
            return Err(GbmapError::invalid("neighbor index needs training rows"));
        }
        let (points, scores) = match metric {
            MetricKind::EuclideanOriginal => (train.x.clone(), None),
            MetricKind::EmbeddingManhattan(model) => {
                if model.p != train.p() {
                    return Err(GbmapError::dim_mismatch("training data for embedding metric", model.p, train.p()));
                }
                (model.embed_batch(&train.x)?, Some(model.predict_batch(&train.x)?))
            }
        };
        Ok(NeighborIndex { metric, points, targets: &train.y, scores })
    }

    pub fn len(&self) -> usize {
        self.points.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.rows() == 0
    }

    fn map_query(&self, x: &[f64]) -> Result<Vec<f64>> {
        match self.metric {
            MetricKind::EuclideanOriginal => {
                if x.len() != self.points.cols() {
                    return Err(GbmapError::dim_mismatch("query point", self.points.cols(), x.len()));
                }
                Ok(x.to_vec())
            }
            MetricKind::EmbeddingManhattan(model) => Ok(model.embed(x)?.into_inner()),
        }
    }

    fn distance(&self, a: &[f64], b: &[f64]) -> f64 {
        match self.metric {
            MetricKind::EuclideanOriginal => euclidean(a, b),
            MetricKind::EmbeddingManhattan(_) => manhattan(a, b),
        }
    }

    /// The `k` nearest neighbors as `(distance, index)`, sorted by distance
    /// and then by index.
    pub fn nearest(&self, x: &[f64], k: usize) -> Result<Vec<(f64, usize)>> {
        let n = self.len();
        if k == 0 || k > n {
            return Err(GbmapError::invalid(format!("k must be in 1..={n}, got {k}")));
        }
        let q = self.map_query(x)?;
        let mut d: Vec<(f64, usize)> = self.points.iter_rows().map(|r| self.distance(&q, r)).zip(0..).collect();
        let order = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if k < n {
            d.select_nth_unstable_by(k - 1, order);
            d.truncate(k);
        }
        d.sort_unstable_by(order);
        Ok(d)
    }

    pub fn indices(&self, x: &[f64], k: usize) -> Result<Vec<usize>> {
        Ok(self.nearest(x, k)?.into_iter().map(|(_, i)| i).collect())
    }

    /// Distance to the `k`-th nearest neighbor.
    pub fn kth_distance(&self, x: &[f64], k: usize) -> Result<f64> {
        Ok(self.nearest(x, k)?.last().expect("k >= 1").0)
    }

    /// Mean training target over the neighbors.
    pub fn regress(&self, x: &[f64], k: usize) -> Result<f64> {
        let idx = self.indices(x, k)?;
        Ok(idx.iter().map(|&i| self.targets[i]).sum::<f64>() / k as f64)
    }

    /// Mean model prediction over the neighbors (embedding metric only).
    pub fn score(&self, x: &[f64], k: usize) -> Result<f64> {
        let scores = self
            .scores
            .as_ref()
            .ok_or_else(|| GbmapError::InvalidState("neighbor scores need an embedding metric".into()))?;
        let idx = self.indices(x, k)?;
        Ok(idx.iter().map(|&i| scores[i]).sum::<f64>() / k as f64)
    }

    pub fn regress_batch(&self, x: &Matrix, k: usize) -> Result<Vec<f64>> {
        (0..x.rows()).into_par_iter().map(|i| self.regress(x.row(i), k)).collect()
    }
}

pub fn knn_indices(train: &Dataset, metric: MetricKind<'_>, x: &[f64], k: usize) -> Result<Vec<usize>> {
    NeighborIndex::new(train, metric)?.indices(x, k)
}

pub fn knn_regress(train: &Dataset, metric: MetricKind<'_>, x: &[f64], k: usize) -> Result<f64> {
    NeighborIndex::new(train, metric)?.regress(x, k)
}

/// Mean of `model`'s predictions at the `k` nearest training points in its
/// embedding space.
pub fn knn_score(model: &GbmapModel, train: &Dataset, x: &[f64], k: usize) -> Result<f64> {
    NeighborIndex::new(train, MetricKind::EmbeddingManhattan(model))?.score(x, k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::TaskKind;
    use crate::model::tests::random_model;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_dataset(rng: &mut ChaCha8Rng, n: usize, p: usize) -> Dataset {
        let x: Vec<f64> = (0..n * p).map(|_| rng.random_range(-2.0..2.0)).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let names = (0..p).map(|j| format!("f{j}")).collect();
        Dataset::new(Matrix::from_vec(n, p, x).unwrap(), y, names, TaskKind::Regression).unwrap()
    }

    fn brute_force(points: &[Vec<f64>], q: &[f64], k: usize, l1: bool) -> Vec<usize> {
        let mut all: Vec<(f64, usize)> = points
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let d = if l1 {
                    p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum()
                } else {
                    p.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
                };
                (d, i)
            })
            .collect();
        all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        all.into_iter().take(k).map(|(_, i)| i).collect()
    }

    #[test]
    fn k_equals_n_returns_everything() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = random_dataset(&mut rng, 12, 3);
        let mut idx = knn_indices(&d, MetricKind::EuclideanOriginal, &[0.0; 3], 12).unwrap();
        idx.sort();
        assert_eq!(idx, (0..12).collect::<Vec<_>>());
        assert!(knn_indices(&d, MetricKind::EuclideanOriginal, &[0.0; 3], 13).is_err());
        assert!(knn_indices(&d, MetricKind::EuclideanOriginal, &[0.0; 3], 0).is_err());
    }

    #[test]
    fn training_point_is_its_own_neighbor() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = random_dataset(&mut rng, 20, 3);
        let q = d.x.row(7).to_vec();
        assert_eq!(knn_indices(&d, MetricKind::EuclideanOriginal, &q, 1).unwrap(), vec![7]);
        assert_eq!(knn_regress(&d, MetricKind::EuclideanOriginal, &q, 1).unwrap(), d.y[7]);
        let model = random_model(&mut rng, 4, 3, TaskKind::Classification);
        let s = knn_score(&model, &d, &q, 1).unwrap();
        assert_eq!(s, model.predict(&q).unwrap());
    }

    #[test]
    fn ties_break_by_index() {
        let x = Matrix::from_rows(&[vec![1.0], vec![-1.0], vec![1.0], vec![3.0]]).unwrap();
        let d = Dataset::new(x, vec![0.0; 4], vec!["v".into()], TaskKind::Regression).unwrap();
        let idx = knn_indices(&d, MetricKind::EuclideanOriginal, &[0.0], 3).unwrap();
        assert_eq!(idx, vec![0, 1, 2]);
    }

    #[test]
    fn constant_targets_give_constant_prediction() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut d = random_dataset(&mut rng, 15, 2);
        d.y.iter_mut().for_each(|v| *v = 4.25);
        assert_eq!(knn_regress(&d, MetricKind::EuclideanOriginal, &[0.1, 0.2], 5).unwrap(), 4.25);
    }

    #[test]
    fn matches_brute_force_for_both_metrics() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10 {
            let d = random_dataset(&mut rng, 30, 3);
            let model = random_model(&mut rng, 5, 3, TaskKind::Regression);
            let q: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            let raw: Vec<Vec<f64>> = d.x.iter_rows().map(<[f64]>::to_vec).collect();
            let emb: Vec<Vec<f64>> = raw.iter().map(|r| model.embed(r).unwrap().into_inner()).collect();
            let eq = model.embed(&q).unwrap().into_inner();

            let want = brute_force(&raw, &q, 5, false);
            assert_eq!(knn_indices(&d, MetricKind::EuclideanOriginal, &q, 5).unwrap(), want);
            let mean: f64 = want.iter().map(|&i| d.y[i]).sum::<f64>() / 5.0;
            assert_eq!(knn_regress(&d, MetricKind::EuclideanOriginal, &q, 5).unwrap(), mean);

            let want = brute_force(&emb, &eq, 5, true);
            let metric = MetricKind::EmbeddingManhattan(&model);
            assert_eq!(knn_indices(&d, metric, &q, 5).unwrap(), want);
            let mean: f64 = want.iter().map(|&i| d.y[i]).sum::<f64>() / 5.0;
            assert_eq!(knn_regress(&d, metric, &q, 5).unwrap(), mean);
            let score: f64 = want.iter().map(|&i| model.predict(&raw[i]).unwrap()).sum::<f64>() / 5.0;
            assert!((knn_score(&model, &d, &q, 5).unwrap() - score).abs() < 1e-12);
        }
    }

    #[test]
    fn embedding_metric_checks_dimension() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = random_dataset(&mut rng, 10, 3);
        let model = random_model(&mut rng, 2, 4, TaskKind::Regression);
        assert!(NeighborIndex::new(&d, MetricKind::EmbeddingManhattan(&model)).is_err());
        let index = NeighborIndex::new(&d, MetricKind::EuclideanOriginal).unwrap();
        assert!(index.score(&[0.0; 3], 2).is_err());
        assert!(index.indices(&[0.0; 2], 2).is_err());
    }
}
