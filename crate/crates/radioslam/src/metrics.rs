//! Localization and mapping metrics: MAE, OSPA and MOSPA.

use crate::error::{Error, Result};
use crate::geometry::Point2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OspaParams {
    /// Cutoff distance, meters.
    pub cutoff: f64,
    /// Order, >= 1.
    pub order: f64,
}

impl Default for OspaParams {
    fn default() -> Self {
        Self { cutoff: 5.0, order: 1.0 }
    }
}

impl OspaParams {
    pub fn new(cutoff: f64, order: f64) -> Result<Self> {
        if cutoff <= 0.0 || order < 1.0 || !cutoff.is_finite() || !order.is_finite() {
            return Err(Error::Config(format!(
                "invalid OSPA params: c = {cutoff}, p = {order}"
            )));
        }
        Ok(Self { cutoff, order })
    }
}

/// Mean Euclidean error between paired estimates and truths.
pub fn mae(estimates: &[Point2], truths: &[Point2]) -> Result<f64> {
    if estimates.len() != truths.len() || estimates.is_empty() {
        return Err(Error::InsufficientData(format!(
            "mae needs equal non-empty lists, got {} and {}",
            estimates.len(),
            truths.len()
        )));
    }
    let sum: f64 = estimates
        .iter()
        .zip(truths)
        .map(|(e, t)| (e - t).norm())
        .sum();
    Ok(sum / estimates.len() as f64)
}

/// Exact min-cost assignment on a square matrix (Jonker-Volgenant with
/// potentials, O(n^3)). Returns column -> row assignment.
fn min_cost_assignment(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
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
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    // p[j] = row (1-based) assigned to column j
    (1..=n).map(|j| p[j] - 1).collect()
}

/// Optimal subpattern assignment distance between finite point sets.
pub fn ospa(x: &[Point2], y: &[Point2], params: &OspaParams) -> f64 {
    let (small, large) = if x.len() <= y.len() { (x, y) } else { (y, x) };
    let (m, n) = (small.len(), large.len());
    if n == 0 {
        return 0.0;
    }
    let c = params.cutoff;
    let p = params.order;
    if m == 0 {
        return c;
    }
    // Pad to n x n; dummy rows cost 0 against any column.
    let mut cost = vec![vec![0.0f64; n]; n];
    for (i, xi) in small.iter().enumerate() {
        for (j, yj) in large.iter().enumerate() {
            cost[i][j] = (xi - yj).norm().min(c).powf(p);
        }
    }
    let assign = min_cost_assignment(&cost);
    let mut total = c.powf(p) * (n - m) as f64;
    for (j, &i) in assign.iter().enumerate() {
        total += cost[i][j];
    }
    (total / n as f64).powf(1.0 / p)
}

/// Element-wise mean of per-epoch OSPA series across runs.
pub fn mospa(runs: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = runs
        .first()
        .ok_or_else(|| Error::InsufficientData("mospa needs at least one run".into()))?;
    if runs.iter().any(|r| r.len() != first.len()) {
        return Err(Error::InsufficientData("mospa runs must have equal length".into()));
    }
    let mut out = vec![0.0; first.len()];
    for run in runs {
        for (o, v) in out.iter_mut().zip(run) {
            *o += v;
        }
    }
    for o in &mut out {
        *o /= runs.len() as f64;
    }
    Ok(out)
}
