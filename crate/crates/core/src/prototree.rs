//! Semantic paths over a prototype tree.
//!
//! A path starts at a bottom prototype and follows parent links to the top
//! level. Each sample has one positive path (rooted at the prototype it was
//! assigned to) and `M_1 - 1` candidate negatives (every other root).

use ndarray::Array2;
use rand::seq::index;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::hkmeans::PrototypeTree;
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct SemanticPath {
    /// `proto_idx[l]` indexes the prototypes of level `l` (0 = finest).
    pub proto_idx: Vec<usize>,
    /// Resolved prototype vectors, one row per level.
    pub vectors: Array2<f64>,
}

impl SemanticPath {
    pub fn num_levels(&self) -> usize {
        self.proto_idx.len()
    }
}

/// Follows parent links from bottom prototype `root` to the top level.
pub fn path_from_root(tree: &PrototypeTree, root: usize) -> Result<SemanticPath> {
    let levels = tree.num_levels();
    if levels == 0 {
        return Err(Error::Config("tree has no levels".into()));
    }
    let d = tree.dim();
    let mut proto_idx = Vec::with_capacity(levels);
    let mut vectors = Array2::zeros((levels, d));
    let mut current = root;
    for l in 0..levels {
        if current >= tree.levels[l].nrows() {
            return Err(Error::Index(format!(
                "prototype {current} out of range on level {l}"
            )));
        }
        proto_idx.push(current);
        vectors.row_mut(l).assign(&tree.levels[l].row(current));
        if l + 1 < levels {
            current = tree.parent[l][current];
        }
    }
    Ok(SemanticPath { proto_idx, vectors })
}

pub fn positive_path(tree: &PrototypeTree, sample_index: usize) -> Result<SemanticPath> {
    let root = *tree.bottom_assign.get(sample_index).ok_or_else(|| {
        Error::Index(format!(
            "sample {sample_index} out of range for n={}",
            tree.bottom_assign.len()
        ))
    })?;
    path_from_root(tree, root)
}

/// Draws `n_neg` negative roots for a sample whose positive root is
/// `positive_bottom`. Without replacement when the pool of `M_1 - 1` roots
/// is large enough, with replacement otherwise.
pub fn sample_negative_roots(
    m1: usize,
    positive_bottom: usize,
    n_neg: usize,
    rng: &mut Rng,
) -> Result<Vec<usize>> {
    if m1 < 2 {
        return Err(Error::Config("negative paths need M_1 >= 2".into()));
    }
    if n_neg == 0 {
        return Err(Error::Config("n_neg must be >= 1".into()));
    }
    if positive_bottom >= m1 {
        return Err(Error::Index(format!(
            "positive root {positive_bottom} out of range for M_1={m1}"
        )));
    }
    let pool = m1 - 1;
    let skip = |i: usize| if i >= positive_bottom { i + 1 } else { i };
    let roots = if n_neg <= pool {
        index::sample(rng, pool, n_neg)
            .into_iter()
            .map(skip)
            .collect()
    } else {
        (0..n_neg)
            .map(|_| skip(rng.random_range(0..pool)))
            .collect()
    };
    Ok(roots)
}

pub fn sample_negative_paths(
    tree: &PrototypeTree,
    positive_bottom: usize,
    n_neg: usize,
    rng: &mut Rng,
) -> Result<Vec<SemanticPath>> {
    let m1 = tree.levels.first().map_or(0, |l| l.nrows());
    sample_negative_roots(m1, positive_bottom, n_neg, rng)?
        .into_iter()
        .map(|r| path_from_root(tree, r))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TreeDiagnostics {
    pub checks: Vec<(&'static str, bool)>,
    pub paths: usize,
    pub edges: usize,
}

impl TreeDiagnostics {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|&(_, ok)| ok)
    }

    pub fn failed(&self) -> Vec<&'static str> {
        self.checks
            .iter()
            .filter(|(_, ok)| !ok)
            .map(|(name, _)| *name)
            .collect()
    }
}

/// Checks every structural invariant of a prototype tree.
pub fn validate_tree(tree: &PrototypeTree) -> TreeDiagnostics {
    let sizes = tree.level_sizes();
    let levels = sizes.len();
    let d = tree.dim();
    let mut checks = Vec::new();

    checks.push(("has_levels", levels >= 1));
    checks.push((
        "strictly_coarsening",
        sizes.windows(2).all(|w| w[1] < w[0]) && sizes.last().is_some_and(|&m| m >= 1),
    ));
    checks.push((
        "shared_dimension",
        d >= 1 && tree.levels.iter().all(|l| l.ncols() == d),
    ));
    checks.push((
        "finite_prototypes",
        tree.levels.iter().all(|l| l.iter().all(|v| v.is_finite())),
    ));
    let parent_shape_ok = tree.parent.len() + 1 == levels
        && tree.parent.iter().zip(&sizes).all(|(p, &m)| p.len() == m);
    checks.push(("one_parent_per_prototype", parent_shape_ok));
    let parent_range_ok = parent_shape_ok
        && tree
            .parent
            .iter()
            .enumerate()
            .all(|(l, p)| p.iter().all(|&i| i < sizes[l + 1]));
    checks.push(("parent_in_range", parent_range_ok));
    let reaches_top = parent_range_ok
        && (0..sizes.first().copied().unwrap_or(0)).all(|root| {
            let mut cur = root;
            let mut steps = 0;
            for p in &tree.parent {
                cur = p[cur];
                steps += 1;
            }
            steps == levels - 1 && cur < sizes[levels - 1]
        });
    checks.push(("reaches_top_in_l_minus_1_steps", reaches_top));
    checks.push((
        "bottom_assign_in_range",
        !tree.bottom_assign.is_empty()
            && tree
                .bottom_assign
                .iter()
                .all(|&a| sizes.first().is_some_and(|&m| a < m)),
    ));

    TreeDiagnostics {
        checks,
        paths: sizes.first().copied().unwrap_or(0),
        edges: tree.parent.iter().map(Vec::len).sum(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;

    fn chain_tree(sizes: &[usize], d: usize) -> PrototypeTree {
        let levels: Vec<Array2<f64>> = sizes
            .iter()
            .enumerate()
            .map(|(l, &m)| Array2::from_shape_fn((m, d), |(i, j)| (100 * l + 10 * i + j) as f64))
            .collect();
        let parent = sizes
            .windows(2)
            .map(|w| (0..w[0]).map(|i| i * w[1] / w[0]).collect())
            .collect();
        PrototypeTree {
            levels,
            parent,
            bottom_assign: (0..10).map(|i| i % sizes[0]).collect(),
        }
    }

    #[test]
    fn positive_path_follows_parents() {
        let mut tree = chain_tree(&[4, 2, 1], 2);
        tree.parent[0][2] = 1;
        tree.parent[1][1] = 0;
        tree.bottom_assign[5] = 2;
        let p = positive_path(&tree, 5).unwrap();
        assert_eq!(p.proto_idx, vec![2, 1, 0]);
        for l in 0..3 {
            assert_eq!(p.vectors.row(l), tree.levels[l].row(p.proto_idx[l]));
        }
        assert!(matches!(positive_path(&tree, 10), Err(Error::Index(_))));
    }

    #[test]
    fn single_level_and_shared_assignment() {
        let tree = chain_tree(&[3], 2);
        let p = positive_path(&tree, 4).unwrap();
        assert_eq!(p.proto_idx, vec![tree.bottom_assign[4]]);
        assert_eq!(positive_path(&tree, 1).unwrap(), p);
    }

    #[test]
    fn exhaustive_negatives_without_replacement() {
        let tree = chain_tree(&[4, 2], 2);
        let paths = sample_negative_paths(&tree, 2, 3, &mut rng_from(0)).unwrap();
        let mut roots: Vec<usize> = paths.iter().map(|p| p.proto_idx[0]).collect();
        roots.sort_unstable();
        assert_eq!(roots, vec![0, 1, 3]);
    }

    #[test]
    fn negatives_with_replacement_when_pool_is_small() {
        let tree = chain_tree(&[4, 2], 2);
        let paths = sample_negative_paths(&tree, 2, 10, &mut rng_from(1)).unwrap();
        assert_eq!(paths.len(), 10);
        assert!(paths.iter().all(|p| p.proto_idx[0] != 2));
    }

    #[test]
    fn single_root_has_no_negatives() {
        let tree = chain_tree(&[1], 2);
        assert!(matches!(
            sample_negative_paths(&tree, 0, 1, &mut rng_from(0)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn large_sampling_size_is_supported() {
        let roots = sample_negative_roots(30000, 17, 1000, &mut rng_from(5)).unwrap();
        assert_eq!(roots.len(), 1000);
        let mut uniq = roots.clone();
        uniq.sort_unstable();
        uniq.dedup();
        assert_eq!(uniq.len(), 1000);
        assert!(!roots.contains(&17));
    }

    #[test]
    fn diagnostics() {
        let tree = chain_tree(&[4, 2], 2);
        let diag = validate_tree(&tree);
        assert!(diag.all_pass(), "{:?}", diag.failed());
        assert_eq!((diag.paths, diag.edges), (4, 4));

        let tree = chain_tree(&[8, 4, 2], 3);
        assert_eq!(validate_tree(&tree).edges, 12);

        let mut bad = chain_tree(&[4, 2], 2);
        bad.parent[0][3] = 7;
        let diag = validate_tree(&bad);
        assert!(diag.failed().contains(&"parent_in_range"));
    }

    #[test]
    fn negative_roots_are_uniform() {
        // 3 sigma bound per root under a multinomial with 10^5 draws
        let m1 = 9;
        let draws = 100_000;
        let mut counts = vec![0usize; m1];
        let mut rng = rng_from(77);
        for _ in 0..draws {
            counts[sample_negative_roots(m1, 4, 1, &mut rng).unwrap()[0]] += 1;
        }
        assert_eq!(counts[4], 0);
        let p = 1.0 / (m1 - 1) as f64;
        let mean = draws as f64 * p;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        for (r, &c) in counts.iter().enumerate().filter(|(r, _)| *r != 4) {
            assert!(
                (c as f64 - mean).abs() <= 3.0 * sigma,
                "root {r}: {c} vs {mean}"
            );
        }
    }
}
