//! Exact one-dimensional k-means via dynamic programming, plus the
//! bid-change-frequency clustering used to segment agents.
//!
//! Optimal 1-D clusters are contiguous in sorted order, so the DP over
//! "last cluster starts at j" with prefix-sum costs finds the global optimum
//! deterministically.

use std::collections::BTreeMap;

use crate::error::{invalid, Result};
use crate::market::BidTrace;

#[derive(Debug, Clone)]
pub struct Kmeans1d {
    /// Cluster index (0 = lowest values) per input point, in input order.
    pub assignment: Vec<usize>,
    /// Cluster means, ascending.
    pub centers: Vec<f64>,
    /// Within-cluster sum of squares of the optimal partition.
    pub wcss: f64,
    /// Number of clusters actually produced.
    pub k: usize,
}

/// Optimal k-means on a 1-D slice. If the data has fewer than `k` distinct
/// values, every distinct value becomes its own cluster and `k` shrinks.
pub fn kmeans_1d(values: &[f64], k: usize) -> Result<Kmeans1d> {
    if k == 0 {
        return Err(invalid("k must be positive"));
    }
    if values.is_empty() {
        return Err(invalid("cannot cluster an empty set"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(invalid("values must be finite"));
    }
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("finite"));
    let sorted: Vec<f64> = order.iter().map(|&i| values[i]).collect();

    let mut distinct = 1;
    for w in sorted.windows(2) {
        if w[1] > w[0] {
            distinct += 1;
        }
    }
    let k_eff = k.min(distinct);

    // prefix sums for O(1) segment cost: cost(i..=j) = sum x^2 - (sum x)^2 / len
    let mut ps = vec![0.0; n + 1];
    let mut ps2 = vec![0.0; n + 1];
    for (i, &x) in sorted.iter().enumerate() {
        ps[i + 1] = ps[i] + x;
        ps2[i + 1] = ps2[i] + x * x;
    }
    let cost = |i: usize, j: usize| -> f64 {
        let len = (j - i + 1) as f64;
        let s = ps[j + 1] - ps[i];
        let s2 = ps2[j + 1] - ps2[i];
        (s2 - s * s / len).max(0.0)
    };

    // dp[m][j] = best cost of grouping sorted[0..=j] into m+1 clusters
    let big = f64::INFINITY;
    let mut dp = vec![vec![big; n]; k_eff];
    let mut back = vec![vec![0usize; n]; k_eff];
    for j in 0..n {
        dp[0][j] = cost(0, j);
    }
    for m in 1..k_eff {
        for j in m..n {
            for start in m..=j {
                let c = dp[m - 1][start - 1] + cost(start, j);
                if c < dp[m][j] {
                    dp[m][j] = c;
                    back[m][j] = start;
                }
            }
        }
    }

    // recover segment boundaries
    let mut bounds = Vec::with_capacity(k_eff + 1);
    bounds.push(n);
    let mut j = n - 1;
    for m in (1..k_eff).rev() {
        let start = back[m][j];
        bounds.push(start);
        j = start - 1;
    }
    bounds.push(0);
    bounds.reverse();

    let mut assignment_sorted = vec![0usize; n];
    let mut centers = Vec::with_capacity(k_eff);
    for c in 0..k_eff {
        let (lo, hi) = (bounds[c], bounds[c + 1]);
        for a in assignment_sorted.iter_mut().take(hi).skip(lo) {
            *a = c;
        }
        centers.push((ps[hi] - ps[lo]) / (hi - lo) as f64);
    }

    let mut assignment = vec![0usize; n];
    for (pos, &orig) in order.iter().enumerate() {
        assignment[orig] = assignment_sorted[pos];
    }

    Ok(Kmeans1d {
        assignment,
        centers,
        wcss: dp[k_eff - 1][n - 1],
        k: k_eff,
    })
}

#[derive(Debug, Clone)]
pub struct FrequencyClusters {
    /// agent id -> (bid-change frequency, 1-based cluster; 1 = lowest frequency)
    pub agents: BTreeMap<String, (f64, usize)>,
    pub k: usize,
    /// Set when fewer clusters than requested were possible.
    pub degenerate: bool,
    /// Agents dropped by the activity filter (active < 7 days or no changes).
    pub filtered_out: Vec<String>,
}

/// Cluster agents by bid-change frequency. Agents active for fewer than 7
/// days or with no bid changes at all are removed before clustering.
pub fn cluster_by_frequency(traces: &[BidTrace], k: usize) -> Result<FrequencyClusters> {
    let mut kept: Vec<(&BidTrace, f64)> = Vec::new();
    let mut filtered_out = Vec::new();
    for t in traces {
        let freq = t.change_frequency();
        if t.active_days() < 7 || freq == 0.0 {
            filtered_out.push(t.agent_id.clone());
        } else {
            kept.push((t, freq));
        }
    }
    if kept.is_empty() {
        return Err(invalid(
            "no agents left after the activity filter; nothing to cluster",
        ));
    }
    let values: Vec<f64> = kept.iter().map(|(_, f)| *f).collect();
    let km = kmeans_1d(&values, k)?;
    let agents = kept
        .iter()
        .zip(&km.assignment)
        .map(|((t, f), &c)| (t.agent_id.clone(), (*f, c + 1)))
        .collect();
    Ok(FrequencyClusters {
        agents,
        k: km.k,
        degenerate: km.k < k,
        filtered_out,
    })
}
