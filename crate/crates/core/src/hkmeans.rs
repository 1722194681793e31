//! Lloyd's K-means and hierarchical K-means.
//!
//! The hierarchical variant clusters the samples into `M_1` prototypes, then
//! repeatedly clusters the prototypes of the previous level into fewer ones.
//! The assignment of each prototype to a coarser prototype becomes its parent
//! edge, so the result is a forest whose roots are the top-level prototypes.
//!
//! Everything here is deterministic given the seed. The assignment step can
//! run on the rayon pool; each point is assigned independently and all
//! reductions happen sequentially in index order, so parallel runs match the
//! serial ones bit for bit.

use std::time::Instant;

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::Rng as _;
use rayon::prelude::*;

use crate::data_io::{atomic_write, ByteReader};
use crate::error::{Error, Result};
use crate::model::TrainState;
use crate::rng::{derive_seed, rng_from, Rng};

pub const DEFAULT_MAX_ITER: usize = 100;
pub const DEFAULT_TOL: f64 = 1e-6;
pub const TREE_MAGIC: &[u8; 8] = b"HIRLTREE";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Init {
    /// D^2-weighted seeding driven by the run RNG.
    #[default]
    KMeansPlusPlus,
    /// Start from the point farthest from the data mean, then repeatedly take
    /// the point farthest from every chosen center. Uses no randomness.
    FarthestPoint,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansParams {
    pub max_iter: usize,
    pub tol: f64,
    pub init: Init,
    pub parallel: bool,
}

impl Default for KMeansParams {
    fn default() -> Self {
        Self {
            max_iter: DEFAULT_MAX_ITER,
            tol: DEFAULT_TOL,
            init: Init::KMeansPlusPlus,
            parallel: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub centroids: Array2<f64>,
    pub assignments: Vec<usize>,
    pub inertia: f64,
    /// Number of centroid updates performed.
    pub iterations: usize,
    /// Inertia after each assignment pass, first to last.
    pub inertia_history: Vec<f64>,
}

#[inline]
pub(crate) fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        let diff = x - y;
        acc += diff * diff;
    }
    acc
}

/// K-means with default parameters (k-means++ init, serial).
pub fn kmeans(
    points: ArrayView2<f64>,
    k: usize,
    seed: u64,
    max_iter: usize,
    tol: f64,
) -> Result<KMeansResult> {
    let params = KMeansParams {
        max_iter,
        tol,
        ..KMeansParams::default()
    };
    kmeans_with(points, k, seed, &params)
}

pub fn kmeans_with(
    points: ArrayView2<f64>,
    k: usize,
    seed: u64,
    params: &KMeansParams,
) -> Result<KMeansResult> {
    let n = points.nrows();
    if k == 0 {
        return Err(Error::Config("k must be >= 1".into()));
    }
    if k > n {
        return Err(Error::Config(format!("k={k} exceeds point count {n}")));
    }
    if !(params.tol >= 0.0) {
        return Err(Error::Config(format!(
            "tol must be >= 0, got {}",
            params.tol
        )));
    }
    if points.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("non-finite point coordinate".into()));
    }
    let init = match params.init {
        Init::KMeansPlusPlus => kmeans_pp_init(points, k, &mut rng_from(seed)),
        Init::FarthestPoint => farthest_point_init(points, k),
    };
    Ok(lloyd(
        points,
        init,
        params.max_iter,
        params.tol,
        params.parallel,
    ))
}

/// k-means++ seeding. The first center is uniform; each later center is
/// drawn with probability proportional to its squared distance to the
/// nearest chosen center. If every remaining distance is zero the lowest
/// unchosen index is taken without consuming randomness.
pub fn kmeans_pp_init(points: ArrayView2<f64>, k: usize, rng: &mut Rng) -> Array2<f64> {
    let n = points.nrows();
    let mut chosen = Vec::with_capacity(k);
    let first = rng.random_range(0..n);
    chosen.push(first);
    let mut nearest: Vec<f64> = (0..n)
        .map(|i| sq_dist(points.row(i), points.row(first)))
        .collect();
    while chosen.len() < k {
        let total: f64 = nearest.iter().sum();
        let next = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &w) in nearest.iter().enumerate() {
                acc += w;
                if acc > target {
                    pick = Some(i);
                    break;
                }
            }
            // rounding can leave target >= acc at the end of the scan
            pick.unwrap_or_else(|| nearest.iter().rposition(|&w| w > 0.0).unwrap())
        } else {
            (0..n).find(|i| !chosen.contains(i)).unwrap()
        };
        chosen.push(next);
        for (i, w) in nearest.iter_mut().enumerate() {
            let d = sq_dist(points.row(i), points.row(next));
            if d < *w {
                *w = d;
            }
        }
    }
    gather_rows(points, &chosen)
}

pub fn farthest_point_init(points: ArrayView2<f64>, k: usize) -> Array2<f64> {
    let n = points.nrows();
    let mean = points.mean_axis(ndarray::Axis(0)).unwrap();
    let first = argmax((0..n).map(|i| sq_dist(points.row(i), mean.view())));
    let mut chosen = vec![first];
    let mut nearest: Vec<f64> = (0..n)
        .map(|i| sq_dist(points.row(i), points.row(first)))
        .collect();
    while chosen.len() < k {
        let next = argmax(nearest.iter().copied());
        chosen.push(next);
        for (i, w) in nearest.iter_mut().enumerate() {
            *w = w.min(sq_dist(points.row(i), points.row(next)));
        }
    }
    gather_rows(points, &chosen)
}

fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (f64::NEG_INFINITY, 0);
    for (i, v) in values.enumerate() {
        if v > best.0 {
            best = (v, i);
        }
    }
    best.1
}

fn gather_rows(points: ArrayView2<f64>, rows: &[usize]) -> Array2<f64> {
    Array2::from_shape_fn((rows.len(), points.ncols()), |(i, j)| points[[rows[i], j]])
}

/// Nearest centroid for one point, ties to the lowest index.
#[inline]
pub(crate) fn nearest_centroid(point: ArrayView1<f64>, centroids: &Array2<f64>) -> (usize, f64) {
    let mut best = (0, sq_dist(point, centroids.row(0)));
    for j in 1..centroids.nrows() {
        let d = sq_dist(point, centroids.row(j));
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

pub(crate) fn assign_all(
    points: ArrayView2<f64>,
    centroids: &Array2<f64>,
    parallel: bool,
) -> Vec<(usize, f64)> {
    if parallel {
        (0..points.nrows())
            .into_par_iter()
            .map(|i| nearest_centroid(points.row(i), centroids))
            .collect()
    } else {
        (0..points.nrows())
            .map(|i| nearest_centroid(points.row(i), centroids))
            .collect()
    }
}

/// Moves points into empty clusters. For each empty centroid, in index
/// order, the point farthest from its current centroid (among clusters that
/// can spare one) becomes the new centroid and joins it.
fn repair_empty(points: ArrayView2<f64>, centroids: &mut Array2<f64>, assign: &mut [(usize, f64)]) {
    let k = centroids.nrows();
    let mut counts = vec![0usize; k];
    for &(c, _) in assign.iter() {
        counts[c] += 1;
    }
    for j in 0..k {
        if counts[j] > 0 {
            continue;
        }
        let mut best: Option<(usize, f64)> = None;
        for (i, &(c, d)) in assign.iter().enumerate() {
            if counts[c] > 1 && best.is_none_or(|(_, bd)| d > bd) {
                best = Some((i, d));
            }
        }
        // k <= n guarantees some cluster holds two or more points
        let (p, _) = best.expect("no donor point for empty cluster");
        counts[assign[p].0] -= 1;
        counts[j] = 1;
        assign[p] = (j, 0.0);
        centroids.row_mut(j).assign(&points.row(p));
    }
}

/// Lloyd iterations from explicit initial centroids.
///
/// Each pass assigns points (ties to the lowest centroid index), repairs
/// empty clusters, records inertia, then recomputes means. Stops after the
/// pass that follows a centroid shift below `tol`, or after `max_iter`
/// updates.
pub fn lloyd(
    points: ArrayView2<f64>,
    mut centroids: Array2<f64>,
    max_iter: usize,
    tol: f64,
    parallel: bool,
) -> KMeansResult {
    let (k, d) = centroids.dim();
    let mut history = Vec::new();
    let mut iterations = 0;
    let mut converged = false;
    loop {
        let mut assign = assign_all(points, &centroids, parallel);
        repair_empty(points, &mut centroids, &mut assign);
        let inertia: f64 = assign.iter().map(|&(_, dist)| dist).sum();
        history.push(inertia);
        if converged || iterations >= max_iter {
            return KMeansResult {
                centroids,
                assignments: assign.into_iter().map(|(c, _)| c).collect(),
                inertia,
                iterations,
                inertia_history: history,
            };
        }

        let mut sums = Array2::<f64>::zeros((k, d));
        let mut counts = vec![0usize; k];
        for (i, &(c, _)) in assign.iter().enumerate() {
            counts[c] += 1;
            let mut row = sums.row_mut(c);
            for (s, x) in row.iter_mut().zip(points.row(i).iter()) {
                *s += x;
            }
        }
        let mut shift: f64 = 0.0;
        for j in 0..k {
            let cnt = counts[j] as f64;
            let mut row = sums.row_mut(j);
            row.mapv_inplace(|s| s / cnt);
            shift = shift.max(sq_dist(row.view(), centroids.row(j)).sqrt());
        }
        centroids = sums;
        iterations += 1;
        converged = shift < tol;
    }
}

/// Prototypes on `L` levels with parent edges.
///
/// Level index 0 here is the finest level (`M_1` prototypes). `parent[l][i]`
/// is the index into `levels[l + 1]` of prototype `i` on level `l`.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeTree {
    pub levels: Vec<Array2<f64>>,
    pub parent: Vec<Vec<usize>>,
    pub bottom_assign: Vec<usize>,
}

impl PrototypeTree {
    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn level_sizes(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.nrows()).collect()
    }

    pub fn dim(&self) -> usize {
        self.levels.first().map_or(0, |l| l.ncols())
    }

    pub fn edge_count(&self) -> usize {
        self.parent.iter().map(Vec::len).sum()
    }

    /// Binary layout: magic | L: u32 | per level (M: u32, d: u32, M*d f32)
    /// | per non-top level M u32 parent indices | n: u32 | n u32 bottom
    /// assignments. All little-endian. Prototype values are narrowed to f32.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = TREE_MAGIC.to_vec();
        let put = |out: &mut Vec<u8>, v: usize| out.extend_from_slice(&(v as u32).to_le_bytes());
        put(&mut out, self.levels.len());
        for level in &self.levels {
            put(&mut out, level.nrows());
            put(&mut out, level.ncols());
            for &v in level.iter() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        for parents in &self.parent {
            for &p in parents {
                put(&mut out, p);
            }
        }
        put(&mut out, self.bottom_assign.len());
        for &a in &self.bottom_assign {
            put(&mut out, a);
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.expect_magic(TREE_MAGIC)?;
        let l = r.u32()? as usize;
        let mut levels = Vec::with_capacity(l);
        for _ in 0..l {
            let m = r.u32()? as usize;
            let d = r.u32()? as usize;
            let vals: Vec<f64> = r
                .take(m * d * 4)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            levels.push(Array2::from_shape_vec((m, d), vals).unwrap());
        }
        let mut parent = Vec::new();
        for level in levels.iter().take(l.saturating_sub(1)) {
            let p = (0..level.nrows())
                .map(|_| r.u32().map(|v| v as usize))
                .collect::<Result<Vec<_>>>()?;
            parent.push(p);
        }
        let n = r.u32()? as usize;
        let bottom_assign = (0..n)
            .map(|_| r.u32().map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        if r.remaining() != 0 {
            return Err(Error::Format("trailing bytes after tree".into()));
        }
        Ok(Self {
            levels,
            parent,
            bottom_assign,
        })
    }

    pub fn write(&self, path: &std::path::Path) -> Result<()> {
        atomic_write(path, &self.encode())
    }

    pub fn read(path: &std::path::Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}

pub fn validate_level_sizes(level_sizes: &[usize], n: usize) -> Result<()> {
    let Some(&m1) = level_sizes.first() else {
        return Err(Error::Config("at least one level is required".into()));
    };
    if level_sizes.contains(&0) {
        return Err(Error::Config("level sizes must be >= 1".into()));
    }
    if level_sizes.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::Config(format!(
            "level sizes must be strictly decreasing, got {level_sizes:?}"
        )));
    }
    if m1 > n {
        return Err(Error::Config(format!("M_1={m1} exceeds sample count {n}")));
    }
    Ok(())
}

/// Clusters `points` into `level_sizes[0]` prototypes, then each level's
/// prototypes into the next size. Level `l` uses a seed derived from `seed`
/// and `l`.
pub fn hierarchical_kmeans(
    points: ArrayView2<f64>,
    level_sizes: &[usize],
    seed: u64,
) -> Result<PrototypeTree> {
    hierarchical_kmeans_with(points, level_sizes, seed, &KMeansParams::default())
}

pub fn hierarchical_kmeans_with(
    points: ArrayView2<f64>,
    level_sizes: &[usize],
    seed: u64,
    params: &KMeansParams,
) -> Result<PrototypeTree> {
    validate_level_sizes(level_sizes, points.nrows())?;
    let bottom = kmeans_with(points, level_sizes[0], derive_seed(seed, &[0]), params)?;
    let mut levels = vec![bottom.centroids];
    let mut parent = Vec::with_capacity(level_sizes.len() - 1);
    for (l, &m) in level_sizes.iter().enumerate().skip(1) {
        let coarse = kmeans_with(
            levels[l - 1].view(),
            m,
            derive_seed(seed, &[l as u64]),
            params,
        )?;
        parent.push(coarse.assignments);
        levels.push(coarse.centroids);
    }
    Ok(PrototypeTree {
        levels,
        parent,
        bottom_assign: bottom.assignments,
    })
}

/// Row-wise L2 normalization. Zero rows are left as zero.
pub fn l2_normalize_rows(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            row.mapv_inplace(|v| v / norm);
        }
    }
}

/// Timing and tree from one prototype refresh.
#[derive(Debug, Clone)]
pub struct Refresh {
    pub tree: PrototypeTree,
    pub wall_ms: f64,
}

/// Encodes all of `inputs` with the current encoder, L2-normalizes the
/// representations and builds the prototype tree over them.
///
/// With `subsample` set, K-means sees only the first `subsample` rows of a
/// seeded permutation; every sample is then assigned to its nearest bottom
/// prototype.
pub fn extract_and_cluster(
    model: &TrainState,
    inputs: ArrayView2<f64>,
    level_sizes: &[usize],
    seed: u64,
    params: &KMeansParams,
    subsample: Option<usize>,
) -> Result<Refresh> {
    if inputs.ncols() != model.encoder.input_dim() {
        return Err(Error::Shape(format!(
            "encoder expects {} input columns, got {}",
            model.encoder.input_dim(),
            inputs.ncols()
        )));
    }
    let start = Instant::now();
    let mut z0 = model.encoder.forward(inputs);
    l2_normalize_rows(&mut z0);
    let tree = match subsample {
        Some(m) if m < z0.nrows() => {
            use rand::seq::SliceRandom;
            let mut idx: Vec<usize> = (0..z0.nrows()).collect();
            idx.shuffle(&mut rng_from(derive_seed(seed, &[u64::MAX])));
            idx.truncate(m);
            idx.sort_unstable();
            let sub = gather_rows(z0.view(), &idx);
            let mut tree = hierarchical_kmeans_with(sub.view(), level_sizes, seed, params)?;
            tree.bottom_assign = assign_all(z0.view(), &tree.levels[0], params.parallel)
                .into_iter()
                .map(|(c, _)| c)
                .collect();
            tree
        }
        _ => hierarchical_kmeans_with(z0.view(), level_sizes, seed, params)?,
    };
    Ok(Refresh {
        tree,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    /// Exhaustive search over all 2-partitions for minimum SSE.
    fn best_two_partition(points: &Array2<f64>) -> (f64, Vec<usize>) {
        let n = points.nrows();
        let mut best = (f64::INFINITY, vec![]);
        for mask in 1u32..(1 << n) - 1 {
            let labels: Vec<usize> = (0..n).map(|i| ((mask >> i) & 1) as usize).collect();
            let mut sse = 0.0;
            for c in 0..2 {
                let members: Vec<usize> = (0..n).filter(|&i| labels[i] == c).collect();
                let mean = gather_rows(points.view(), &members)
                    .mean_axis(ndarray::Axis(0))
                    .unwrap();
                sse += members
                    .iter()
                    .map(|&i| sq_dist(points.row(i), mean.view()))
                    .sum::<f64>();
            }
            if sse < best.0 {
                best = (sse, labels);
            }
        }
        best
    }

    #[test]
    fn two_obvious_clusters() {
        let pts = array![[0.0, 0.0], [0.0, 1.0], [10.0, 0.0], [10.0, 1.0]];
        let (sse, labels) = best_two_partition(&pts);
        assert_eq!(sse, 1.0);
        let res = kmeans(pts.view(), 2, 5, 100, 1e-6).unwrap();
        assert_eq!(res.inertia, sse);
        let a = &res.assignments;
        assert_eq!(a[0], a[1]);
        assert_eq!(a[2], a[3]);
        assert_ne!(a[0], a[2]);
        assert_eq!(labels[0] == labels[1], a[0] == a[1]);
        let mut cents: Vec<(f64, f64)> = res
            .centroids
            .rows()
            .into_iter()
            .map(|r| (r[0], r[1]))
            .collect();
        cents.sort_by(|x, y| x.partial_cmp(y).unwrap());
        assert_eq!(cents, vec![(0.0, 0.5), (10.0, 0.5)]);
    }

    #[test]
    fn k_equals_n_gives_zero_inertia() {
        let pts = array![[0.3, 1.0], [2.0, -1.0], [5.0, 5.0]];
        let res = kmeans(pts.view(), 3, 1, 100, 1e-6).unwrap();
        assert_eq!(res.inertia, 0.0);
        let mut seen = res.assignments.clone();
        seen.sort_unstable();
        assert_eq!(seen, vec![0, 1, 2]);
    }

    #[test]
    fn duplicated_data_doubles_inertia() {
        let pts = array![[0.0, 0.0], [0.0, 1.0], [10.0, 0.0], [10.0, 1.0], [4.0, 3.0]];
        let doubled = ndarray::concatenate(ndarray::Axis(0), &[pts.view(), pts.view()]).unwrap();
        let a = kmeans_with(
            pts.view(),
            2,
            0,
            &KMeansParams {
                init: Init::FarthestPoint,
                ..Default::default()
            },
        )
        .unwrap();
        let b = kmeans_with(
            doubled.view(),
            2,
            0,
            &KMeansParams {
                init: Init::FarthestPoint,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(a.centroids, b.centroids);
        assert!((b.inertia - 2.0 * a.inertia).abs() < 1e-12);
    }

    #[test]
    fn duplicate_points_never_leave_empty_clusters() {
        let pts = array![[1.0, 1.0], [1.0, 1.0], [1.0, 1.0], [2.0, 2.0]];
        let res = kmeans(pts.view(), 3, 9, 50, 1e-6).unwrap();
        for c in 0..3 {
            assert!(res.assignments.contains(&c));
        }
    }

    #[test]
    fn config_errors() {
        let pts = array![[0.0], [1.0]];
        assert!(matches!(
            kmeans(pts.view(), 0, 0, 10, 0.0),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            kmeans(pts.view(), 3, 0, 10, 0.0),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            hierarchical_kmeans(pts.view(), &[2, 2], 0),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            hierarchical_kmeans(pts.view(), &[3, 1], 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn large_level_sizes_validate() {
        validate_level_sizes(&[30000, 10000, 1000], 1_281_167).unwrap();
        validate_level_sizes(&[30000, 10000, 5000], 1_281_167).unwrap();
        assert!(validate_level_sizes(&[30000, 10000, 1000], 20_000).is_err());
    }

    #[test]
    fn four_pairs_two_levels() {
        let pts = array![
            [0.0, 0.0],
            [0.0, 0.1],
            [5.0, 0.0],
            [5.0, 0.1],
            [50.0, 50.0],
            [50.0, 50.1],
            [55.0, 50.0],
            [55.0, 50.1]
        ];
        let tree = hierarchical_kmeans(pts.view(), &[4, 2], 11).unwrap();
        assert_eq!(tree.edge_count(), 4);
        for (i, &a) in tree.bottom_assign.iter().enumerate() {
            let c = tree.levels[0].row(a);
            let pair = i / 2;
            let expected = [
                pts[[2 * pair, 0]],
                0.5 * (pts[[2 * pair, 1]] + pts[[2 * pair + 1, 1]]),
            ];
            assert!((c[0] - expected[0]).abs() < 1e-12 && (c[1] - expected[1]).abs() < 1e-12);
        }
        // pairs 0,1 share a parent; pairs 2,3 share the other
        let parent_of = |i: usize| tree.parent[0][tree.bottom_assign[i]];
        assert_eq!(parent_of(0), parent_of(2));
        assert_eq!(parent_of(4), parent_of(6));
        assert_ne!(parent_of(0), parent_of(4));
        let top = tree.levels[1].row(parent_of(0));
        assert!((top[0] - 2.5).abs() < 1e-12 && (top[1] - 0.05).abs() < 1e-12);
    }

    #[test]
    fn single_level_degenerates_to_kmeans() {
        let pts = array![[0.0, 0.0], [0.0, 1.0], [10.0, 0.0], [10.0, 1.0]];
        let tree = hierarchical_kmeans(pts.view(), &[2], 4).unwrap();
        assert!(tree.parent.is_empty());
        let direct = kmeans(
            pts.view(),
            2,
            derive_seed(4, &[0]),
            DEFAULT_MAX_ITER,
            DEFAULT_TOL,
        )
        .unwrap();
        assert_eq!(tree.levels[0], direct.centroids);
        assert_eq!(tree.bottom_assign, direct.assignments);
    }

    #[test]
    fn parallel_matches_serial_bitwise() {
        let mut rng = rng_from(42);
        let pts = Array2::from_shape_fn((400, 5), |_| rng.random::<f64>());
        let serial = kmeans_with(pts.view(), 7, 3, &KMeansParams::default()).unwrap();
        let par = kmeans_with(
            pts.view(),
            7,
            3,
            &KMeansParams {
                parallel: true,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(serial, par);
    }

    #[test]
    fn tree_file_round_trip() {
        let mut rng = rng_from(1);
        let pts = Array2::from_shape_fn((40, 3), |_| rng.random::<f32>() as f64);
        let tree = hierarchical_kmeans(pts.view(), &[6, 3, 2], 2).unwrap();
        let back = PrototypeTree::decode(&tree.encode()).unwrap();
        assert_eq!(back.parent, tree.parent);
        assert_eq!(back.bottom_assign, tree.bottom_assign);
        for (a, b) in back.levels.iter().zip(&tree.levels) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert_eq!(*x, *y as f32 as f64);
            }
        }
        assert!(PrototypeTree::decode(&tree.encode()[..20]).is_err());
    }

    proptest! {
        #[test]
        fn lloyd_inertia_never_increases(seed in 0u64..500, n in 3usize..60, k in 1usize..6, d in 1usize..4) {
            prop_assume!(k <= n);
            let mut rng = rng_from(seed);
            let pts = Array2::from_shape_fn((n, d), |_| rng.random::<f64>() * 4.0 - 2.0);
            let res = kmeans(pts.view(), k, seed, 50, 0.0).unwrap();
            for w in res.inertia_history.windows(2) {
                prop_assert!(w[1] <= w[0] * (1.0 + 1e-12) + 1e-15, "{:?}", res.inertia_history);
            }
            prop_assert!(res.assignments.iter().all(|&a| a < k));
            for c in 0..k {
                prop_assert!(res.assignments.contains(&c));
            }
        }

        #[test]
        fn permutation_equivariance_with_farthest_point_init(seed in 0u64..200, n in 4usize..40, k in 1usize..5) {
            prop_assume!(k <= n);
            let mut rng = rng_from(seed);
            let pts = Array2::from_shape_fn((n, 3), |_| rng.random::<f64>());
            let mut perm: Vec<usize> = (0..n).collect();
            use rand::seq::SliceRandom;
            perm.shuffle(&mut rng);
            let permuted = gather_rows(pts.view(), &perm);
            let params = KMeansParams { init: Init::FarthestPoint, max_iter: 200, tol: 0.0, ..Default::default() };
            let a = kmeans_with(pts.view(), k, 0, &params).unwrap();
            let b = kmeans_with(permuted.view(), k, 0, &params).unwrap();
            // same centroid set
            let key = |m: &Array2<f64>| {
                let mut rows: Vec<Vec<u64>> = m.rows().into_iter()
                    .map(|r| r.iter().map(|v| (v * 1e9).round() as u64).collect()).collect();
                rows.sort();
                rows
            };
            prop_assert_eq!(key(&a.centroids), key(&b.centroids));
            // permuted rows land on the same centroid
            for (new_i, &old_i) in perm.iter().enumerate() {
                let ca = a.centroids.row(a.assignments[old_i]);
                let cb = b.centroids.row(b.assignments[new_i]);
                prop_assert!(ca.iter().zip(cb.iter()).all(|(x, y)| (x - y).abs() < 1e-9));
            }
        }
    }
}
