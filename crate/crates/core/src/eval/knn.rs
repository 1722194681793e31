//! Weighted KNN classification on cosine similarity.
//!
//! Each test point takes its k most similar training points and every
//! neighbour votes for its label with weight `exp(cos / tau)`.

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::hkmeans::l2_normalize_rows;

pub const KNN_TEMPERATURE: f64 = 0.07;
pub const DEFAULT_K_LIST: [usize; 4] = [10, 20, 100, 200];

#[derive(Debug, Clone, PartialEq)]
pub struct KnnReport {
    /// (k, accuracy) in the order requested.
    pub per_k: Vec<(usize, f64)>,
    pub best_k: usize,
    pub best_accuracy: f64,
}

fn normalized(x: ArrayView2<f64>) -> Array2<f64> {
    let mut m = x.to_owned();
    l2_normalize_rows(&mut m);
    m
}

fn vote(neighbours: &[(f64, usize)], train_labels: &[u32], classes: usize) -> u32 {
    let mut scores = vec![0.0; classes];
    for &(sim, j) in neighbours {
        scores[train_labels[j] as usize] += (sim / KNN_TEMPERATURE).exp();
    }
    let mut best = 0;
    for (c, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = c;
        }
    }
    best as u32
}

pub fn knn_eval(
    train: ArrayView2<f64>,
    train_labels: &[u32],
    test: ArrayView2<f64>,
    test_labels: &[u32],
    k_list: &[usize],
) -> Result<KnnReport> {
    if test.nrows() == 0 {
        return Err(Error::Config("empty test set".into()));
    }
    if train.nrows() != train_labels.len() || test.nrows() != test_labels.len() {
        return Err(Error::Shape(
            "representation and label counts differ".into(),
        ));
    }
    if train.ncols() != test.ncols() {
        return Err(Error::Shape(format!(
            "train dim {} vs test dim {}",
            train.ncols(),
            test.ncols()
        )));
    }
    if k_list.is_empty() {
        return Err(Error::Config("k list is empty".into()));
    }
    if let Some(&k) = k_list.iter().find(|&&k| k == 0 || k > train.nrows()) {
        return Err(Error::Config(format!(
            "k={k} must be in 1..={}",
            train.nrows()
        )));
    }
    let kmax = *k_list.iter().max().unwrap();
    let classes = train_labels.iter().max().map_or(0, |&m| m as usize + 1);
    let tr = normalized(train);
    let te = normalized(test);

    // Neighbours sorted by similarity, ties to the lower training index.
    let correct: Vec<Vec<bool>> = (0..te.nrows())
        .into_par_iter()
        .map(|i| {
            let sims = tr.dot(&te.row(i));
            let mut order: Vec<(f64, usize)> = sims.iter().copied().zip(0..).collect();
            let by_rank =
                |a: &(f64, usize), b: &(f64, usize)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
            if kmax < order.len() {
                order.select_nth_unstable_by(kmax - 1, by_rank);
                order.truncate(kmax);
            }
            order.sort_by(by_rank);
            k_list
                .iter()
                .map(|&k| vote(&order[..k], train_labels, classes) == test_labels[i])
                .collect()
        })
        .collect();

    let m = te.nrows() as f64;
    let per_k: Vec<(usize, f64)> = k_list
        .iter()
        .enumerate()
        .map(|(c, &k)| (k, correct.iter().filter(|r| r[c]).count() as f64 / m))
        .collect();
    let (best_k, best_accuracy) =
        per_k
            .iter()
            .copied()
            .fold((0, f64::NEG_INFINITY), |b, x| if x.1 > b.1 { x } else { b });
    Ok(KnnReport {
        per_k,
        best_k,
        best_accuracy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;
    use ndarray::{array, Array1};
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn separated_clusters() {
        let train = array![[1.0, 0.1], [1.0, -0.1], [-1.0, 0.1], [-1.0, -0.1]];
        let test = array![[2.0, 0.0], [-3.0, 0.2]];
        let r = knn_eval(train.view(), &[0, 0, 1, 1], test.view(), &[0, 1], &[1]).unwrap();
        assert_eq!(r.best_accuracy, 1.0);
    }

    #[test]
    fn duplicated_test_points() {
        let mut rng = rng_from(3);
        let train = Array2::from_shape_fn((30, 5), |_| StandardNormal.sample(&mut rng));
        let labels: Vec<u32> = (0..30).map(|i| (i % 4) as u32).collect();
        let r = knn_eval(train.view(), &labels, train.view(), &labels, &[1]).unwrap();
        assert_eq!(r.best_accuracy, 1.0);
    }

    fn random_rotation(d: usize, seed: u64) -> Array2<f64> {
        // Gram-Schmidt on a Gaussian matrix.
        let mut rng = rng_from(seed);
        let mut q = Array2::<f64>::zeros((d, d));
        for i in 0..d {
            let mut v: Array1<f64> = Array1::from_shape_fn(d, |_| StandardNormal.sample(&mut rng));
            for j in 0..i {
                let proj = v.dot(&q.row(j));
                v -= &(&q.row(j) * proj);
            }
            let norm = v.dot(&v).sqrt();
            q.row_mut(i).assign(&(v / norm));
        }
        q
    }

    #[test]
    fn rotation_invariance() {
        let mut rng = rng_from(8);
        let d = 6;
        let centers = Array2::from_shape_fn((3, d), |_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            2.0 * z
        });
        let mk = |n: usize, rng: &mut crate::rng::Rng| {
            let labels: Vec<u32> = (0..n).map(|i| (i % 3) as u32).collect();
            let x = Array2::from_shape_fn((n, d), |(i, j)| {
                let z: f64 = StandardNormal.sample(rng);
                centers[[i % 3, j]] + z
            });
            (x, labels)
        };
        let (tr, trl) = mk(90, &mut rng);
        let (te, tel) = mk(45, &mut rng);
        let q = random_rotation(d, 99);
        let base = knn_eval(tr.view(), &trl, te.view(), &tel, &[1, 5, 20]).unwrap();
        let rot = knn_eval(
            tr.dot(&q).view(),
            &trl,
            te.dot(&q).view(),
            &tel,
            &[1, 5, 20],
        )
        .unwrap();
        assert_eq!(base.per_k, rot.per_k);
        for &(_, acc) in &base.per_k {
            assert!(base.best_accuracy >= acc);
        }
    }

    #[test]
    fn errors() {
        let x = array![[1.0, 0.0], [0.0, 1.0]];
        let empty = Array2::<f64>::zeros((0, 2));
        assert!(matches!(
            knn_eval(x.view(), &[0, 1], empty.view(), &[], &[1]),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            knn_eval(x.view(), &[0, 1], x.view(), &[0, 1], &[3]),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            knn_eval(x.view(), &[0, 1], x.view(), &[0, 1], &[0]),
            Err(Error::Config(_))
        ));
    }
}
