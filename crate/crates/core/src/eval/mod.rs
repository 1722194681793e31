//! Representation quality: weighted KNN classification and clustering
//! agreement with ground-truth labels.

mod hungarian;
mod knn;
mod metrics;

pub use hungarian::hungarian_match;
pub use knn::{knn_eval, KnnReport, DEFAULT_K_LIST, KNN_TEMPERATURE};
pub use metrics::{ami, cluster_report, contingency, nmi, ClusterReport};

use ndarray::ArrayView2;

use crate::error::{Error, Result};
use crate::hkmeans::{kmeans_with, l2_normalize_rows, KMeansParams, KMeansResult};
use crate::rng::derive_seed;

pub const CLUSTER_RESTARTS: usize = 10;

/// K-means on the normalized representations, best inertia over
/// [`CLUSTER_RESTARTS`] seeds, scored against `labels`.
pub fn cluster_eval(
    reps: ArrayView2<f64>,
    labels: &[u32],
    k: usize,
    seed: u64,
    params: &KMeansParams,
) -> Result<ClusterReport> {
    if k < 2 {
        return Err(Error::Config(format!(
            "cluster count must be >= 2, got {k}"
        )));
    }
    if k > reps.nrows() {
        return Err(Error::Config(format!("k={k} exceeds n={}", reps.nrows())));
    }
    if labels.len() != reps.nrows() {
        return Err(Error::Shape(format!(
            "{} labels for {} representations",
            labels.len(),
            reps.nrows()
        )));
    }
    let mut x = reps.to_owned();
    l2_normalize_rows(&mut x);
    let mut best: Option<KMeansResult> = None;
    for r in 0..CLUSTER_RESTARTS {
        let run = kmeans_with(x.view(), k, derive_seed(seed, &[r as u64]), params)?;
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    let truth: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    cluster_report(&best.unwrap().assignments, &truth)
}
