use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    /// `(prediction, ground truth)` pairs sorted by prediction index.
    pub pairs: Vec<(usize, usize)>,
    pub cost: f64,
}

impl MatchResult {
    pub fn empty() -> Self {
        MatchResult {
            pairs: Vec::new(),
            cost: 0.0,
        }
    }

    /// Ground-truth index matched to each prediction.
    pub fn target_of(&self, predictions: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; predictions];
        for &(p, g) in &self.pairs {
            out[p] = Some(g);
        }
        out
    }

    /// Prediction matched to each ground-truth entry.
    pub fn prediction_of(&self, truths: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; truths];
        for &(p, g) in &self.pairs {
            out[g] = Some(p);
        }
        out
    }
}

/// Sum of `cost[i][j]` over pairs, taken in row order.
pub fn assignment_cost(cost: &Tensor, pairs: &[(usize, usize)]) -> f64 {
    let mut sorted = pairs.to_vec();
    sorted.sort_unstable();
    sorted.iter().map(|&(i, j)| cost.at(i, j)).sum()
}

/// Minimum-cost one-to-one assignment of `min(n, m)` pairs for an `n × m`
/// cost matrix (shortest augmenting paths with potentials, `O(n²m)`).
pub fn hungarian(cost: &Tensor) -> Result<MatchResult> {
    if cost.shape().len() != 2 {
        return Err(Error::shape("hungarian", format!("cost of shape {:?}", cost.shape())));
    }
    if !cost.is_finite() {
        return Err(Error::Input("hungarian cost matrix contains non-finite values".into()));
    }
    let (n, m) = (cost.rows(), cost.cols());
    if n == 0 || m == 0 {
        return Ok(MatchResult::empty());
    }
    let transposed = n > m;
    let c = if transposed { cost.transpose() } else { cost.clone() };
    let (rows, cols) = (c.rows(), c.cols());

    // 1-based potentials; column 0 is the virtual source.
    let mut u = vec![0.0; rows + 1];
    let mut v = vec![0.0; cols + 1];
    let mut owner = vec![0usize; cols + 1];
    let mut way = vec![0usize; cols + 1];
    for i in 1..=rows {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; cols + 1];
        let mut used = vec![false; cols + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=cols {
                if used[j] {
                    continue;
                }
                let cur = c.at(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=cols {
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
    let mut pairs: Vec<(usize, usize)> = (1..=cols)
        .filter(|&j| owner[j] != 0)
        .map(|j| {
            let (r, c) = (owner[j] - 1, j - 1);
            if transposed {
                (c, r)
            } else {
                (r, c)
            }
        })
        .collect();
    pairs.sort_unstable();
    let cost = assignment_cost(cost, &pairs);
    Ok(MatchResult { pairs, cost })
}
