//! Minimum-cost bipartite assignment.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One-to-one assignment of ground truths (rows) to queries (columns).
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Matching {
    /// `(gt, query)` pairs sorted by ground-truth index.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched: Vec<usize>,
}

impl Matching {
    pub fn total_cost(&self, cost: &[Vec<f64>]) -> f64 {
        self.pairs.iter().map(|&(i, j)| cost[i][j]).sum()
    }

    /// Query assigned to each ground truth, indexable by query.
    pub fn query_to_gt(&self, num_queries: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; num_queries];
        for &(i, j) in &self.pairs {
            out[j] = Some(i);
        }
        out
    }
}

/// Hungarian algorithm with row/column potentials on an `N × M` cost, `N ≤ M`.
pub fn hungarian_match(cost: &[Vec<f64>], num_queries: usize) -> Result<Matching> {
    let n = cost.len();
    let m = num_queries;
    if n > m {
        return Err(Error::InvalidArgument(format!(
            "{n} ground truths cannot be matched to {m} queries"
        )));
    }
    for (i, row) in cost.iter().enumerate() {
        if row.len() != m {
            return Err(Error::InvalidArgument(format!(
                "cost row {i} has {} entries, expected {m}",
                row.len()
            )));
        }
        if let Some(j) = row.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("cost[{i}][{j}] is not finite")));
        }
    }
    if n == 0 {
        return Ok(Matching {
            pairs: Vec::new(),
            unmatched: (0..m).collect(),
        });
    }
    // 1-based indexing: column 0 is the virtual source
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
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
    let mut pairs: Vec<(usize, usize)> = (1..=m)
        .filter(|&j| owner[j] != 0)
        .map(|j| (owner[j] - 1, j - 1))
        .collect();
    pairs.sort_unstable();
    let unmatched = (1..=m).filter(|&j| owner[j] == 0).map(|j| j - 1).collect();
    Ok(Matching { pairs, unmatched })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two() {
        let cost = vec![vec![1.0, 2.0], vec![3.0, 0.0]];
        let m = hungarian_match(&cost, 2).unwrap();
        assert_eq!(m.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(m.total_cost(&cost), 1.0);
        assert!(m.unmatched.is_empty());
    }

    #[test]
    fn single_row_picks_argmin() {
        let cost = vec![vec![4.0, 0.5, 2.0, 0.7]];
        let m = hungarian_match(&cost, 4).unwrap();
        assert_eq!(m.pairs, vec![(0, 1)]);
        assert_eq!(m.unmatched, vec![0, 2, 3]);
    }

    #[test]
    fn more_rows_than_columns_rejected() {
        let cost = vec![vec![1.0], vec![2.0]];
        assert!(hungarian_match(&cost, 1).is_err());
    }

    #[test]
    fn empty_cost_leaves_all_unmatched() {
        let m = hungarian_match(&[], 3).unwrap();
        assert!(m.pairs.is_empty());
        assert_eq!(m.unmatched, vec![0, 1, 2]);
    }
}
