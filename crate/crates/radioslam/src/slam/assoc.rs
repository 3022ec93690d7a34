//! Probabilistic data association with a one-to-one constraint, solved by
//! iterated message passing on the bipartite measurement/feature graph.

/// Marginal association probabilities from the weight matrix
/// `psi[m][f]` = (detection prob * existence * likelihood) / (clutter + birth
/// intensity), with zeros for ungated pairs.
///
/// Returns per-measurement rows of length F + 1: the feature probabilities
/// followed by the miss (clutter-or-birth) probability. Rows sum to one.
pub fn bp_association(psi: &[Vec<f64>], max_iters: usize, tol: f64) -> Vec<Vec<f64>> {
    let n_meas = psi.len();
    if n_meas == 0 {
        return Vec::new();
    }
    let n_feat = psi[0].len();
    // mu[f][m]: message feature f -> measurement m
    let mut mu = vec![vec![1.0f64; n_meas]; n_feat];
    let mut omega = vec![vec![0.0f64; n_feat]; n_meas];
    for _ in 0..max_iters {
        // measurement -> feature
        for m in 0..n_meas {
            let total: f64 = (0..n_feat).map(|f| psi[m][f] * mu[f][m]).sum();
            for f in 0..n_feat {
                let denom = 1.0 + total - psi[m][f] * mu[f][m];
                omega[m][f] = if denom > 0.0 { psi[m][f] / denom } else { 0.0 };
            }
        }
        // feature -> measurement
        let mut delta: f64 = 0.0;
        for f in 0..n_feat {
            let total: f64 = (0..n_meas).map(|m| omega[m][f]).sum();
            for m in 0..n_meas {
                let new = 1.0 / (1.0 + total - omega[m][f]);
                delta = delta.max((new - mu[f][m]).abs());
                mu[f][m] = new;
            }
        }
        if delta < tol {
            break;
        }
    }
    let mut rows = Vec::with_capacity(n_meas);
    for m in 0..n_meas {
        let mut row = vec![0.0f64; n_feat + 1];
        let mut total = 1.0; // miss hypothesis
        for f in 0..n_feat {
            row[f] = psi[m][f] * mu[f][m];
            total += row[f];
        }
        row[n_feat] = 1.0;
        for v in &mut row {
            *v /= total;
        }
        rows.push(row);
    }
    rows
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row_sum(r: &[f64]) -> f64 {
        r.iter().sum()
    }

    #[test]
    fn empty_input() {
        assert!(bp_association(&[], 20, 1e-6).is_empty());
    }

    #[test]
    fn dominant_single_hypothesis() {
        // one measurement exactly at one feature's prediction
        let rows = bp_association(&[vec![1e6]], 20, 1e-6);
        assert!(rows[0][0] > 0.99);
        assert!((row_sum(&rows[0]) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn ungated_measurement_goes_to_miss() {
        let rows = bp_association(&[vec![0.0, 0.0]], 20, 1e-6);
        assert!(rows[0][2] > 0.99);
    }

    #[test]
    fn symmetric_two_by_two_row_stochastic() {
        // two features, two measurements, fully symmetric weights
        let psi = vec![vec![5.0, 5.0], vec![5.0, 5.0]];
        let rows = bp_association(&psi, 20, 1e-9);
        for r in &rows {
            assert!((row_sum(r) - 1.0).abs() < 1e-9);
        }
        // symmetry of the problem carries to the marginals
        assert!((rows[0][0] - rows[0][1]).abs() < 1e-9);
        assert!((rows[0][0] - rows[1][1]).abs() < 1e-9);
    }

    #[test]
    fn one_to_one_suppression() {
        // both measurements strongly prefer feature 0; the exclusion
        // constraint must stop them from both taking it
        let psi = vec![vec![100.0, 1.0], vec![100.0, 1.0]];
        let rows = bp_association(&psi, 50, 1e-9);
        let joint = rows[0][0] * rows[1][0];
        assert!(joint < 0.5, "joint claim on feature 0 = {joint}");
        for r in &rows {
            assert!((row_sum(r) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn column_feasibility() {
        // no feature collects more than one unit of expected assignments
        let psi = vec![
            vec![10.0, 0.5, 0.0],
            vec![8.0, 0.0, 2.0],
            vec![12.0, 1.0, 0.0],
        ];
        let rows = bp_association(&psi, 50, 1e-9);
        for f in 0..3 {
            let col: f64 = rows.iter().map(|r| r[f]).sum();
            assert!(col <= 1.0 + 1e-6, "column {f} sum = {col}");
        }
    }
}
