//! Path similarity and the semantic path discrimination loss.
//!
//! For hierarchical representations `z^1..z^L` and a path `c^1..c^L`:
//!
//! ```text
//! s = prod_l (1 + cos(z^l, c^l)) / 2
//! loss = mean_batch [ -ln s_pos - (1/N_neg) sum_k ln(1 - s_neg_k) ]
//! ```
//!
//! Scores are clamped to `[eps, 1 - eps]` before the logs; the clamp has zero
//! derivative outside that interval. Prototypes are constants: gradients are
//! taken with respect to the representations only.

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::prototree::SemanticPath;
use crate::rng::{rng_from, Rng};

pub const DEFAULT_EPS: f64 = 1e-7;

/// A sample's chain of representations across semantic spaces.
#[derive(Debug, Clone, PartialEq)]
pub struct HierRep {
    pub z0: Array1<f64>,
    /// Row `l` holds the level-`l + 1` representation.
    pub z: Array2<f64>,
}

impl HierRep {
    pub fn num_levels(&self) -> usize {
        self.z.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpdBatchLoss {
    pub loss: f64,
    /// d loss / d z for each sample, shaped like `HierRep::z`.
    pub grad_z: Vec<Array2<f64>>,
    pub pos_scores: Vec<f64>,
    pub neg_scores: Vec<Vec<f64>>,
}

fn norm(v: ArrayView1<f64>) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Cosine similarity clamped to [-1, 1] and its gradient with respect to `z`.
fn cosine_with_grad(z: ArrayView1<f64>, c: ArrayView1<f64>) -> Result<(f64, Array1<f64>)> {
    if z.len() != c.len() {
        return Err(Error::Shape(format!(
            "representation has {} dims, prototype has {}",
            z.len(),
            c.len()
        )));
    }
    let (zn, cn) = (norm(z), norm(c));
    if !(zn > 0.0 && cn > 0.0) {
        return Err(Error::Math("cosine of a zero-norm vector".into()));
    }
    let cos = z.dot(&c) / (zn * cn);
    // d cos / dz = c / (|z||c|) - cos * z / |z|^2
    let grad = Array1::from_shape_fn(z.len(), |j| c[j] / (zn * cn) - cos * z[j] / (zn * zn));
    Ok((cos.clamp(-1.0, 1.0), grad))
}

fn check_levels(rep: &HierRep, path: &SemanticPath) -> Result<()> {
    if rep.z.nrows() != path.vectors.nrows() {
        return Err(Error::Shape(format!(
            "representation has {} levels, path has {}",
            rep.z.nrows(),
            path.vectors.nrows()
        )));
    }
    Ok(())
}

pub fn path_similarity(rep: &HierRep, path: &SemanticPath) -> Result<f64> {
    check_levels(rep, path)?;
    let mut s = 1.0;
    for (z, c) in rep.z.rows().into_iter().zip(path.vectors.rows()) {
        let (cos, _) = cosine_with_grad(z, c)?;
        s *= (1.0 + cos) / 2.0;
    }
    Ok(s)
}

/// Similarity plus `ds/dz`, an L x d matrix.
fn similarity_with_grad(rep: &HierRep, path: &SemanticPath) -> Result<(f64, Array2<f64>)> {
    check_levels(rep, path)?;
    let (levels, d) = rep.z.dim();
    let mut factors = Vec::with_capacity(levels);
    let mut cos_grads = Vec::with_capacity(levels);
    for (z, c) in rep.z.rows().into_iter().zip(path.vectors.rows()) {
        let (cos, g) = cosine_with_grad(z, c)?;
        factors.push((1.0 + cos) / 2.0);
        cos_grads.push(g);
    }
    let s = factors.iter().product();
    let mut grad = Array2::zeros((levels, d));
    for (l, g) in cos_grads.iter().enumerate() {
        // product of the other factors; avoids dividing by a zero factor
        let others: f64 = factors
            .iter()
            .enumerate()
            .filter(|&(m, _)| m != l)
            .map(|(_, f)| f)
            .product();
        grad.row_mut(l).assign(&(g * (0.5 * others)));
    }
    Ok((s, grad))
}

struct SampleTerm {
    loss: f64,
    grad: Array2<f64>,
    pos: f64,
    negs: Vec<f64>,
}

fn sample_term(
    rep: &HierRep,
    pos: &SemanticPath,
    negs: &[SemanticPath],
    eps: f64,
) -> Result<SampleTerm> {
    if negs.is_empty() {
        return Err(Error::Config(
            "every sample needs at least one negative path".into(),
        ));
    }
    let inside = |s: f64| s >= eps && s <= 1.0 - eps;

    let (s_pos, ds_pos) = similarity_with_grad(rep, pos)?;
    let mut loss = -s_pos.clamp(eps, 1.0 - eps).ln();
    let mut grad = if inside(s_pos) {
        ds_pos * (-1.0 / s_pos)
    } else {
        Array2::zeros(rep.z.dim())
    };

    let inv_n = 1.0 / negs.len() as f64;
    let mut neg_scores = Vec::with_capacity(negs.len());
    for path in negs {
        let (s, ds) = similarity_with_grad(rep, path)?;
        loss -= inv_n * (1.0 - s.clamp(eps, 1.0 - eps)).ln();
        if inside(s) {
            grad.scaled_add(inv_n / (1.0 - s), &ds);
        }
        neg_scores.push(s.clamp(0.0, 1.0));
    }
    Ok(SampleTerm {
        loss,
        grad,
        pos: s_pos.clamp(0.0, 1.0),
        negs: neg_scores,
    })
}

/// Batch SPD loss with analytic gradients. Accumulation is 64-bit and in
/// sample order.
pub fn spd_loss(
    reps: &[HierRep],
    pos: &[SemanticPath],
    negs: &[Vec<SemanticPath>],
    eps: f64,
) -> Result<SpdBatchLoss> {
    if reps.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    if pos.len() != reps.len() || negs.len() != reps.len() {
        return Err(Error::Shape(format!(
            "batch of {} reps with {} positive and {} negative path sets",
            reps.len(),
            pos.len(),
            negs.len()
        )));
    }
    if !(eps > 0.0 && eps < 0.5) {
        return Err(Error::Config(format!(
            "eps must lie in (0, 0.5), got {eps}"
        )));
    }
    let scale = 1.0 / reps.len() as f64;
    let mut out = SpdBatchLoss {
        loss: 0.0,
        grad_z: Vec::with_capacity(reps.len()),
        pos_scores: Vec::with_capacity(reps.len()),
        neg_scores: Vec::with_capacity(reps.len()),
    };
    for ((rep, p), n) in reps.iter().zip(pos).zip(negs) {
        let term = sample_term(rep, p, n, eps)?;
        out.loss += term.loss;
        out.grad_z.push(term.grad * scale);
        out.pos_scores.push(term.pos);
        out.neg_scores.push(term.negs);
    }
    out.loss *= scale;
    Ok(out)
}

/// Shape of the random configurations drawn by [`spd_grad_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckDims {
    pub levels: Vec<usize>,
    pub dims: Vec<usize>,
    pub n_neg: Vec<usize>,
    pub batch: usize,
}

impl Default for GradCheckDims {
    fn default() -> Self {
        Self {
            levels: vec![1, 2, 3],
            dims: vec![4, 8, 16],
            n_neg: vec![1, 8],
            batch: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub trials: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Finite-difference step used by the gradient checks.
pub const FD_STEP: f64 = 1e-5;
/// Denominator floor for relative errors of near-zero gradient entries.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

fn random_path(levels: usize, d: usize, rng: &mut Rng) -> SemanticPath {
    SemanticPath {
        proto_idx: vec![0; levels],
        vectors: Array2::from_shape_fn((levels, d), |_| StandardNormal.sample(rng)),
    }
}

/// Compares analytic SPD gradients against central differences on random
/// configurations. Passes when the worst relative error is within
/// `tolerance` (which must be positive).
pub fn spd_grad_check(
    trials: usize,
    dims: &GradCheckDims,
    tolerance: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    if dims.levels.is_empty() || dims.dims.is_empty() || dims.n_neg.is_empty() || dims.batch == 0 {
        return Err(Error::Config(
            "grad check dimensions must be non-empty".into(),
        ));
    }
    let mut rng = rng_from(seed);
    let mut max_err: f64 = 0.0;
    for _ in 0..trials {
        let levels = dims.levels[rng.random_range(0..dims.levels.len())];
        let d = dims.dims[rng.random_range(0..dims.dims.len())];
        let n_neg = dims.n_neg[rng.random_range(0..dims.n_neg.len())];
        let mut reps = Vec::with_capacity(dims.batch);
        let mut pos = Vec::with_capacity(dims.batch);
        let mut negs = Vec::with_capacity(dims.batch);
        for _ in 0..dims.batch {
            let z = Array2::from_shape_fn((levels, d), |_| StandardNormal.sample(&mut rng));
            // positive prototypes lean toward z so s_pos is not tiny
            let noise = random_path(levels, d, &mut rng).vectors;
            pos.push(SemanticPath {
                proto_idx: vec![0; levels],
                vectors: &z + &(noise * 0.7),
            });
            negs.push(
                (0..n_neg)
                    .map(|_| random_path(levels, d, &mut rng))
                    .collect::<Vec<_>>(),
            );
            reps.push(HierRep {
                z0: Array1::zeros(d),
                z,
            });
        }
        let analytic = spd_loss(&reps, &pos, &negs, DEFAULT_EPS)?;
        for b in 0..reps.len() {
            for l in 0..levels {
                for j in 0..d {
                    let orig = reps[b].z[[l, j]];
                    reps[b].z[[l, j]] = orig + FD_STEP;
                    let plus = spd_loss(&reps, &pos, &negs, DEFAULT_EPS)?.loss;
                    reps[b].z[[l, j]] = orig - FD_STEP;
                    let minus = spd_loss(&reps, &pos, &negs, DEFAULT_EPS)?.loss;
                    reps[b].z[[l, j]] = orig;
                    let numeric = (plus - minus) / (2.0 * FD_STEP);
                    max_err = max_err.max(relative_error(analytic.grad_z[b][[l, j]], numeric));
                }
            }
        }
    }
    Ok(GradCheckReport {
        trials,
        max_rel_error: max_err,
        tolerance,
        passed: tolerance > 0.0 && max_err <= tolerance,
    })
}
