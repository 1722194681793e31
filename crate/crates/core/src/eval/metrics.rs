//! Partition agreement: matched accuracy, NMI and AMI.
//!
//! NMI and AMI normalize by the arithmetic mean of the two entropies. AMI
//! subtracts the mutual information expected under the permutation model
//! (hypergeometric cell counts given the marginals).

use std::collections::HashMap;

use super::hungarian::hungarian_match;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClusterReport {
    pub accuracy: f64,
    pub nmi: f64,
    pub ami: f64,
}

/// Dense contingency table with rows = predicted clusters, columns = classes.
/// Ids are compacted in order of first appearance.
pub fn contingency(pred: &[usize], truth: &[usize]) -> Result<Vec<Vec<u64>>> {
    if pred.len() != truth.len() {
        return Err(Error::Shape(format!(
            "{} predictions vs {} labels",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Config("cannot score an empty partition".into()));
    }
    let compact = |ids: &[usize]| {
        let mut map = HashMap::new();
        let out: Vec<usize> = ids
            .iter()
            .map(|&id| {
                let next = map.len();
                *map.entry(id).or_insert(next)
            })
            .collect();
        (out, map.len())
    };
    let (p, r) = compact(pred);
    let (t, c) = compact(truth);
    let mut table = vec![vec![0u64; c]; r];
    for (&i, &j) in p.iter().zip(&t) {
        table[i][j] += 1;
    }
    Ok(table)
}

fn entropy(counts: &[u64], n: f64) -> f64 {
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

fn marginals(table: &[Vec<u64>]) -> (Vec<u64>, Vec<u64>, u64) {
    let a: Vec<u64> = table.iter().map(|r| r.iter().sum()).collect();
    let cols = table.first().map_or(0, Vec::len);
    let b: Vec<u64> = (0..cols)
        .map(|j| table.iter().map(|r| r[j]).sum())
        .collect();
    let n = a.iter().sum();
    (a, b, n)
}

fn mutual_info(table: &[Vec<u64>], a: &[u64], b: &[u64], n: f64) -> f64 {
    let mut mi = 0.0;
    for (i, row) in table.iter().enumerate() {
        for (j, &nij) in row.iter().enumerate() {
            if nij > 0 {
                let nij = nij as f64;
                mi += nij / n * (n * nij / (a[i] as f64 * b[j] as f64)).ln();
            }
        }
    }
    mi.max(0.0)
}

fn expected_mutual_info(a: &[u64], b: &[u64], n: u64) -> f64 {
    let lf: Vec<f64> = std::iter::once(0.0)
        .chain((1..=n).scan(0.0, |acc, k| {
            *acc += (k as f64).ln();
            Some(*acc)
        }))
        .collect();
    let nf = n as f64;
    let mut emi = 0.0;
    for &ai in a {
        for &bj in b {
            let lo = (ai + bj).saturating_sub(n).max(1);
            let hi = ai.min(bj);
            for nij in lo..=hi {
                let term = nij as f64 / nf * (nf * nij as f64 / (ai as f64 * bj as f64)).ln();
                let log_p = lf[ai as usize]
                    + lf[bj as usize]
                    + lf[(n - ai) as usize]
                    + lf[(n - bj) as usize]
                    - lf[n as usize]
                    - lf[nij as usize]
                    - lf[(ai - nij) as usize]
                    - lf[(bj - nij) as usize]
                    - lf[(n + nij - ai - bj) as usize];
                emi += term * log_p.exp();
            }
        }
    }
    emi
}

/// True when every cluster maps to exactly one class and vice versa.
fn is_bijective(table: &[Vec<u64>]) -> bool {
    let cols = table.first().map_or(0, Vec::len);
    table.len() == cols
        && table
            .iter()
            .all(|r| r.iter().filter(|&&c| c > 0).count() == 1)
        && (0..cols).all(|j| table.iter().filter(|r| r[j] > 0).count() == 1)
}

pub fn nmi(pred: &[usize], truth: &[usize]) -> Result<f64> {
    Ok(cluster_report(pred, truth)?.nmi)
}

pub fn ami(pred: &[usize], truth: &[usize]) -> Result<f64> {
    Ok(cluster_report(pred, truth)?.ami)
}

pub fn cluster_report(pred: &[usize], truth: &[usize]) -> Result<ClusterReport> {
    let table = contingency(pred, truth)?;
    let (a, b, n) = marginals(&table);
    let (_, matched) = hungarian_match(&table);
    let accuracy = matched as f64 / n as f64;
    if is_bijective(&table) {
        return Ok(ClusterReport {
            accuracy,
            nmi: 1.0,
            ami: 1.0,
        });
    }
    let nf = n as f64;
    let (hu, hv) = (entropy(&a, nf), entropy(&b, nf));
    let mi = mutual_info(&table, &a, &b, nf);
    let mean_h = 0.5 * (hu + hv);
    let nmi = if mean_h > 0.0 {
        (mi / mean_h).min(1.0)
    } else {
        0.0
    };
    let emi = expected_mutual_info(&a, &b, n);
    let denom = mean_h - emi;
    let ami = if denom.abs() > f64::EPSILON {
        (mi - emi) / denom
    } else {
        0.0
    };
    Ok(ClusterReport { accuracy, nmi, ami })
}
