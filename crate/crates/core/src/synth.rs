//! Synthetic embeddings with a planted cluster hierarchy.
//!
//! Centers are drawn top-down: the root sits at the origin and every child
//! center is its parent center plus an isotropic Gaussian offset whose scale
//! is that level's separation. Leaves are numbered depth-first, so the label
//! of a sample at level `k` is its leaf index divided by the product of the
//! branching factors below `k`.

use ndarray::Array2;
use rand_distr::{Distribution, StandardNormal};

use crate::data_io::EmbeddingSet;
use crate::error::{Error, Result};
use crate::rng::rng_from;

/// Default ceiling on the number of generated samples.
pub const DEFAULT_MAX_SAMPLES: usize = 10_000_000;

#[derive(Debug, Clone, PartialEq)]
pub struct HierarchySpec {
    /// Children per node, coarse to fine. Its length is the depth.
    pub branching: Vec<usize>,
    pub samples_per_leaf: usize,
    pub d: usize,
    /// Center spread per level, coarse to fine; strictly decreasing.
    pub separation: Vec<f64>,
    pub noise_sigma: f64,
    pub seed: u64,
    pub max_samples: usize,
}

impl HierarchySpec {
    pub fn depth(&self) -> usize {
        self.branching.len()
    }

    pub fn leaf_count(&self) -> Option<usize> {
        self.branching
            .iter()
            .try_fold(1usize, |acc, &b| acc.checked_mul(b))
    }

    pub fn validate(&self) -> Result<()> {
        if self.branching.is_empty() {
            return Err(Error::Config("depth must be at least 1".into()));
        }
        if self.branching.iter().any(|&b| b < 2) {
            return Err(Error::Config(format!(
                "branching factors must be >= 2, got {:?}",
                self.branching
            )));
        }
        if self.separation.len() != self.branching.len() {
            return Err(Error::Config(format!(
                "{} separations for depth {}",
                self.separation.len(),
                self.branching.len()
            )));
        }
        if self.separation.iter().any(|s| !s.is_finite() || *s <= 0.0)
            || self.separation.windows(2).any(|w| w[1] >= w[0])
        {
            return Err(Error::Config(format!(
                "separation must be positive and strictly decreasing coarse to fine, got {:?}",
                self.separation
            )));
        }
        if self.samples_per_leaf == 0 || self.d == 0 {
            return Err(Error::Config("samples_per_leaf and d must be >= 1".into()));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma > 0.0) {
            return Err(Error::Config("noise_sigma must be > 0".into()));
        }
        let n = self
            .leaf_count()
            .and_then(|l| l.checked_mul(self.samples_per_leaf));
        match n {
            Some(n) if n <= self.max_samples => Ok(()),
            _ => Err(Error::Config(format!(
                "sample count exceeds cap of {}",
                self.max_samples
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    /// Samples with the leaf labels attached.
    pub set: EmbeddingSet,
    /// One label vector per level, coarse to fine; the last equals the leaf labels.
    pub level_labels: Vec<Vec<u32>>,
    /// Planted leaf centers, one row per leaf in depth-first order.
    pub leaf_centers: Array2<f64>,
}

pub fn generate(spec: &HierarchySpec) -> Result<SynthData> {
    spec.validate()?;
    let mut rng = rng_from(spec.seed);
    let d = spec.d;

    let mut centers = vec![vec![0.0f64; d]];
    for (&branching, &sep) in spec.branching.iter().zip(&spec.separation) {
        let mut next = Vec::with_capacity(centers.len() * branching);
        for parent in &centers {
            for _ in 0..branching {
                let child: Vec<f64> = parent
                    .iter()
                    .map(|&p| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        p + sep * z
                    })
                    .collect();
                next.push(child);
            }
        }
        centers = next;
    }

    let leaves = centers.len();
    let n = leaves * spec.samples_per_leaf;
    let mut data = Vec::with_capacity(n * d);
    let mut leaf_labels = Vec::with_capacity(n);
    for (leaf, center) in centers.iter().enumerate() {
        for _ in 0..spec.samples_per_leaf {
            for &c in center {
                let z: f64 = StandardNormal.sample(&mut rng);
                data.push((c + spec.noise_sigma * z) as f32);
            }
            leaf_labels.push(leaf as u32);
        }
    }

    let mut level_labels = Vec::with_capacity(spec.depth());
    for level in 0..spec.depth() {
        let below: usize = spec.branching[level + 1..].iter().product();
        level_labels.push(leaf_labels.iter().map(|&l| l / below as u32).collect());
    }

    let leaf_centers = Array2::from_shape_fn((leaves, d), |(i, j)| centers[i][j]);
    let set = EmbeddingSet::new(n, d, data, Some(leaf_labels))?;
    Ok(SynthData {
        set,
        level_labels,
        leaf_centers,
    })
}
