//! Maximum-weight assignment (Kuhn-Munkres with potentials).

/// Assigns each row of `weights` (k x c) to at most one column so the
/// matched total is maximal. Rectangular inputs are padded with zeros, so
/// surplus rows come back as `None` and contribute nothing.
pub fn hungarian_match(weights: &[Vec<u64>]) -> (Vec<Option<usize>>, u64) {
    let rows = weights.len();
    let cols = weights.iter().map(Vec::len).max().unwrap_or(0);
    let n = rows.max(cols);
    if n == 0 {
        return (Vec::new(), 0);
    }
    let max = weights.iter().flatten().copied().max().unwrap_or(0) as i64;
    let cost = |i: usize, j: usize| -> i64 {
        let w = weights.get(i).and_then(|r| r.get(j)).copied().unwrap_or(0) as i64;
        max - w
    };

    // 1-based arrays; column 0 is the virtual start.
    let mut u = vec![0i64; n + 1];
    let mut v = vec![0i64; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![i64::MAX; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = i64::MAX;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut assignment = vec![None; rows];
    let mut total = 0;
    for j in 1..=n {
        let i = owner[j] - 1;
        if i < rows && j - 1 < weights[i].len() {
            assignment[i] = Some(j - 1);
            total += weights[i][j - 1];
        }
    }
    (assignment, total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;
    use rand::Rng as _;

    fn brute_force(w: &[Vec<u64>]) -> u64 {
        fn go(w: &[Vec<u64>], row: usize, used: &mut Vec<bool>) -> u64 {
            if row == w.len() {
                return 0;
            }
            let mut best = go(w, row + 1, used); // row left unmatched
            for j in 0..used.len() {
                if !used[j] {
                    used[j] = true;
                    best = best.max(w[row][j] + go(w, row + 1, used));
                    used[j] = false;
                }
            }
            best
        }
        let cols = w.first().map_or(0, Vec::len);
        go(w, 0, &mut vec![false; cols])
    }

    #[test]
    fn diagonal_is_identity() {
        let w = vec![vec![5, 0, 0], vec![0, 3, 0], vec![0, 0, 7]];
        let (a, total) = hungarian_match(&w);
        assert_eq!(a, vec![Some(0), Some(1), Some(2)]);
        assert_eq!(total, 15);
    }

    #[test]
    fn surplus_rows_are_unmatched() {
        let w = vec![vec![4, 1], vec![2, 9], vec![3, 3]];
        let (a, total) = hungarian_match(&w);
        assert_eq!(total, 13);
        assert_eq!(a.iter().filter(|x| x.is_none()).count(), 1);
    }

    #[test]
    fn matches_brute_force() {
        let mut rng = rng_from(4);
        for _ in 0..300 {
            let k = rng.random_range(1..=5);
            let c = rng.random_range(1..=5);
            let w: Vec<Vec<u64>> = (0..k)
                .map(|_| (0..c).map(|_| rng.random_range(0..20)).collect())
                .collect();
            let (a, total) = hungarian_match(&w);
            assert_eq!(total, brute_force(&w), "{w:?}");
            let mut seen = std::collections::HashSet::new();
            let sum: u64 = a
                .iter()
                .enumerate()
                .filter_map(|(i, j)| {
                    j.map(|j| {
                        assert!(seen.insert(j));
                        w[i][j]
                    })
                })
                .sum();
            assert_eq!(sum, total);
        }
    }
}
