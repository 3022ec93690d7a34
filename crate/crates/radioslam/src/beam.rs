//! Beam management: successive-cancellation path extraction from RSRP
//! sweep matrices, SLAM-aided beam prediction, and the tracking /
//! full-sweep switching module.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use nalgebra::Vector2;

use crate::geometry::Point2;
use crate::measurement::{BeamCodebook, RsrpMatrix, UEState};
use crate::slam::FeatureKind;
use crate::wrap_angle;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathEstimate {
    /// Global departure azimuth, radians.
    pub aod: f64,
    /// Global arrival azimuth, radians.
    pub aoa: f64,
    pub strength: f64,
    pub tx_beam: usize,
    pub rx_beam: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrackMode {
    FullSweep,
    Tracking,
}

#[derive(Debug, Clone)]
pub struct TrackingState {
    pub mode: TrackMode,
    pub candidates: Vec<(usize, usize)>,
    pub misses: u32,
    /// Recent best-RSRP values for the running median.
    history: Vec<f64>,
}

/// Miss rule defaults.
const MISS_DROP_DB: f64 = 6.0;
const MISS_LIMIT: u32 = 2;
const HISTORY_LEN: usize = 10;

impl TrackingState {
    pub fn full_sweep(n_tx: usize, n_rx: usize) -> Self {
        Self {
            mode: TrackMode::FullSweep,
            candidates: all_pairs(n_tx, n_rx),
            misses: 0,
            history: Vec::new(),
        }
    }
}

fn all_pairs(n_tx: usize, n_rx: usize) -> Vec<(usize, usize)> {
    let mut v = Vec::with_capacity(n_tx * n_rx);
    for i in 0..n_tx {
        for j in 0..n_rx {
            v.push((i, j));
        }
    }
    v
}

/// Quadratic peak interpolation over three dB samples; returns the offset
/// from the center sample in units of the sample step, clamped to ±1/2.
fn quad_offset(y_minus: f64, y0: f64, y_plus: f64) -> f64 {
    // a masked (-inf) neighbor leaves nothing to interpolate against
    if !y_minus.is_finite() || !y0.is_finite() || !y_plus.is_finite() {
        return 0.0;
    }
    let denom = y_minus - 2.0 * y0 + y_plus;
    if denom.abs() < 1e-12 {
        return 0.0;
    }
    (0.5 * (y_minus - y_plus) / denom).clamp(-0.5, 0.5)
}

/// Extract paths from an exhaustive sweep matrix by iterated argmax,
/// quadratic angle refinement and ±1-beam cancellation masking.
pub fn successive_cancellation(
    m: &RsrpMatrix,
    tx_cb: &BeamCodebook,
    rx_cb: &BeamCodebook,
    noise_floor_db: f64,
    stop_threshold_db: f64,
) -> Vec<PathEstimate> {
    assert_eq!(m.values.len(), tx_cb.n_beams, "matrix rows must match tx codebook");
    assert!(
        m.values.iter().all(|r| r.len() == rx_cb.n_beams),
        "matrix cols must match rx codebook"
    );
    let mut vals = m.values.clone();
    let mut out = Vec::new();
    let tx_step = tx_cb.sector / tx_cb.n_beams as f64;
    let rx_step = rx_cb.sector / rx_cb.n_beams as f64;
    // a mainlobe peak varies by tens of dB along both dims; a flat line is
    // one-sided sidelobe leakage from a path outside the other sector
    let flat = |v: &[f64]| {
        let finite: Vec<f64> = v.iter().copied().filter(|x| x.is_finite()).collect();
        finite.len() >= 3
            && finite.iter().copied().fold(f64::NEG_INFINITY, f64::max)
                - finite.iter().copied().fold(f64::INFINITY, f64::min)
                < 3.0
    };
    let mut iterations = 0;
    while out.len() < 5 && iterations < 5 * tx_cb.n_beams.max(rx_cb.n_beams) {
        iterations += 1;
        let mut best = (0usize, 0usize);
        let mut best_v = f64::NEG_INFINITY;
        for (i, row) in vals.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if v > best_v {
                    best_v = v;
                    best = (i, j);
                }
            }
        }
        if best_v < noise_floor_db + stop_threshold_db {
            break;
        }
        let (bi, bj) = best;
        let col: Vec<f64> = vals.iter().map(|r| r[bj]).collect();
        if flat(&vals[bi]) {
            // rx side is pure sidelobe: reject the leaking row. Mask only
            // this row — a neighbor may hold a genuine weaker peak at the
            // same level as the leakage
            for v in &mut vals[bi] {
                *v = f64::NEG_INFINITY;
            }
            continue;
        }
        if flat(&col) {
            for row in &mut vals {
                row[bj] = f64::NEG_INFINITY;
            }
            continue;
        }
        // refine along tx (rows) and rx (cols); skip at sector edges
        let tx_off = if bi > 0 && bi + 1 < tx_cb.n_beams {
            quad_offset(vals[bi - 1][bj], vals[bi][bj], vals[bi + 1][bj])
        } else {
            0.0
        };
        let rx_off = if bj > 0 && bj + 1 < rx_cb.n_beams {
            quad_offset(vals[bi][bj - 1], vals[bi][bj], vals[bi][bj + 1])
        } else {
            0.0
        };
        out.push(PathEstimate {
            aod: wrap_angle(m.tx_orientation + tx_cb.centers[bi] + tx_off * tx_step),
            aoa: wrap_angle(m.rx_orientation + rx_cb.centers[bj] + rx_off * rx_step),
            strength: best_v,
            tx_beam: bi,
            rx_beam: bj,
        });
        // cancel: mask every entry within one beam of the peak in either
        // dimension (whole rows and columns, so single-sided sidelobe
        // leakage of the extracted path cannot resurface as a ghost)
        for i in bi.saturating_sub(1)..=(bi + 1).min(tx_cb.n_beams - 1) {
            for v in &mut vals[i] {
                *v = f64::NEG_INFINITY;
            }
        }
        for row in &mut vals {
            for j in bj.saturating_sub(1)..=(bj + 1).min(rx_cb.n_beams - 1) {
                row[j] = f64::NEG_INFINITY;
            }
        }
    }
    out
}

fn bearing(from: &Point2, to: &Point2) -> f64 {
    let d = to - from;
    d.y.atan2(d.x)
}

/// Departure azimuth at the PA for the path that appears to come from
/// `va`, via the reflection point on the perpendicular bisector of PA-VA.
fn va_departure(pa: &Point2, va: &Point2, ue: &Point2) -> f64 {
    let n = va - pa;
    let len = n.norm();
    if len < 1e-9 {
        return bearing(pa, ue);
    }
    let n = n / len;
    let mid = Point2::from((pa.coords + va.coords) / 2.0);
    let ray = va - ue;
    let denom = n.dot(&ray);
    if denom.abs() < 1e-12 {
        return bearing(pa, va);
    }
    let t = n.dot(&(mid - ue)) / denom;
    let rp = ue + t * ray;
    bearing(pa, &rp)
}

/// Candidate beam pairs from the SLAM map under the predicted UE state.
/// `pos_std` is the 1-sigma position uncertainty of the prediction; the
/// per-feature gate is at least ±1 beam and widens with 3-sigma angular
/// uncertainty. An empty qualifying map escalates to the full sweep set.
#[allow(clippy::too_many_arguments)]
pub fn predict_beams(
    map: &[(FeatureKind, Point2, f64)],
    ue_pred: &UEState,
    pos_std: f64,
    tx_cb: &BeamCodebook,
    rx_cb: &BeamCodebook,
    tx_orientation: f64,
    existence_threshold: f64,
) -> Vec<(usize, usize)> {
    let pa = map
        .iter()
        .find(|(k, _, e)| *k == FeatureKind::Pa && *e > existence_threshold)
        .map(|(_, p, _)| *p);
    let tx_step = tx_cb.sector / tx_cb.n_beams as f64;
    let rx_step = rx_cb.sector / rx_cb.n_beams as f64;
    let mut pairs = std::collections::BTreeSet::new();
    for (kind, pos, existence) in map {
        if *existence <= existence_threshold {
            continue;
        }
        let range = (pos - ue_pred.position).norm().max(0.1);
        let sigma_ang = 3.0 * pos_std / range;
        let aoa_rel = wrap_angle(bearing(&ue_pred.position, pos) - ue_pred.orientation);
        let aod = match kind {
            FeatureKind::Pa => bearing(pos, &ue_pred.position),
            FeatureKind::Va => match &pa {
                Some(pa) => va_departure(pa, pos, &ue_pred.position),
                None => bearing(pos, &ue_pred.position),
            },
            FeatureKind::Scatterer => match &pa {
                Some(pa) => bearing(pa, pos),
                None => bearing(pos, &ue_pred.position),
            },
        };
        let aod_rel = wrap_angle(aod - tx_orientation);
        // features outside either array's sector cannot be beamformed to
        if aoa_rel.abs() > rx_cb.sector / 2.0 + rx_step || aod_rel.abs() > tx_cb.sector / 2.0 + tx_step {
            continue;
        }
        let tx_halo = ((sigma_ang / tx_step).ceil() as usize).max(1);
        let rx_halo = ((sigma_ang / rx_step).ceil() as usize).max(1);
        let ti = tx_cb.nearest_beam(aod_rel);
        let rj = rx_cb.nearest_beam(aoa_rel);
        for i in ti.saturating_sub(tx_halo)..=(ti + tx_halo).min(tx_cb.n_beams - 1) {
            for j in rj.saturating_sub(rx_halo)..=(rj + rx_halo).min(rx_cb.n_beams - 1) {
                pairs.insert((i, j));
            }
        }
    }
    if pairs.is_empty() {
        return all_pairs(tx_cb.n_beams, rx_cb.n_beams);
    }
    pairs.into_iter().collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackingOutcome {
    pub chosen: (usize, usize),
    pub chosen_rsrp: f64,
    pub overhead: usize,
}

/// One epoch of the switching module: pick the best measured pair,
/// monitor for beam death (running-median drop rule) and escalate to a
/// one-epoch full sweep after repeated misses.
pub fn tracking_step(
    ts: &mut TrackingState,
    measured: &[((usize, usize), f64)],
    n_tx: usize,
    n_rx: usize,
    next_candidates: Vec<(usize, usize)>,
) -> TrackingOutcome {
    assert!(!measured.is_empty(), "tracking step needs measurements");
    let overhead = measured.len();
    let (&chosen, &chosen_rsrp) = measured
        .iter()
        .map(|(p, v)| (p, v))
        .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(a.0)))
        .unwrap();

    let median = running_median(&ts.history);
    let miss = match median {
        Some(med) => chosen_rsrp < med - MISS_DROP_DB,
        None => false,
    };
    if miss {
        ts.misses += 1;
    } else {
        ts.misses = 0;
        ts.history.push(chosen_rsrp);
        if ts.history.len() > HISTORY_LEN {
            ts.history.remove(0);
        }
    }
    if ts.misses >= MISS_LIMIT {
        // beam birth/death suspected: full sweep next epoch, then resume
        ts.mode = TrackMode::FullSweep;
        ts.candidates = all_pairs(n_tx, n_rx);
        ts.misses = 0;
        ts.history.clear();
    } else {
        ts.mode = TrackMode::Tracking;
        ts.candidates = if next_candidates.is_empty() {
            all_pairs(n_tx, n_rx)
        } else {
            next_candidates
        };
    }
    TrackingOutcome { chosen, chosen_rsrp, overhead }
}

fn running_median(history: &[f64]) -> Option<f64> {
    if history.is_empty() {
        return None;
    }
    let mut sorted = history.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    Some(if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    })
}

/// Per-epoch displacement estimates from an IMU: truth plus Gaussian
/// noise plus a random-walk drift bias.
pub fn imu_odometry(
    track: &[UEState],
    sigma_noise: f64,
    sigma_drift: f64,
    rng: &mut impl Rng,
) -> Vec<Vector2<f64>> {
    let draw = |rng: &mut dyn rand::RngCore, sigma: f64| -> f64 {
        if sigma > 0.0 {
            Normal::new(0.0, sigma).unwrap().sample(rng)
        } else {
            let _ = rng.random::<f64>();
            0.0
        }
    };
    let mut bias = Vector2::zeros();
    let mut out = Vec::with_capacity(track.len().saturating_sub(1));
    for w in track.windows(2) {
        bias += Vector2::new(draw(rng, sigma_drift), draw(rng, sigma_drift));
        let noise = Vector2::new(draw(rng, sigma_noise), draw(rng, sigma_noise));
        out.push(w[1].position - w[0].position + noise + bias);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measurement::{sweep_rsrp, NoiseProfile, PathTruth, TruthTag};
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cb() -> BeamCodebook {
        BeamCodebook::paper_default()
    }

    fn path(aod: f64, aoa: f64, rsrp: f64) -> PathTruth {
        PathTruth { tag: TruthTag::Clutter, aoa, aod, toa: 0.0, rsrp }
    }

    fn sweep(paths: &[PathTruth]) -> RsrpMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        sweep_rsrp(paths, &cb(), &cb(), 0.0, 0.0, &NoiseProfile::noiseless(), &mut rng)
    }

    #[test]
    fn single_boresight_path_recovered_exactly() {
        let tx = cb().centers[2];
        let rx = cb().centers[5];
        let m = sweep(&[path(tx, rx, -50.0)]);
        let est = successive_cancellation(&m, &cb(), &cb(), -90.0, 10.0);
        assert_eq!(est.len(), 1);
        assert_eq!((est[0].tx_beam, est[0].rx_beam), (2, 5));
        assert!((est[0].aod - tx).abs() < 1e-9);
        assert!((est[0].aoa - rx).abs() < 1e-9);
    }

    #[test]
    fn off_center_path_within_half_beamwidth() {
        let bw = cb().beamwidth;
        let tx = cb().centers[3] + 0.3 * bw;
        let rx = cb().centers[4] - 0.25 * bw;
        let m = sweep(&[path(tx, rx, -55.0)]);
        let est = successive_cancellation(&m, &cb(), &cb(), -90.0, 10.0);
        assert_eq!(est.len(), 1);
        assert!((est[0].aod - tx).abs() <= bw / 2.0, "aod err {}", (est[0].aod - tx).abs());
        assert!((est[0].aoa - rx).abs() <= bw / 2.0, "aoa err {}", (est[0].aoa - rx).abs());
    }

    #[test]
    fn two_separated_paths_by_strength() {
        let c = cb();
        let m = sweep(&[
            path(c.centers[1], c.centers[1], -60.0),
            path(c.centers[6], c.centers[6], -50.0),
        ]);
        let est = successive_cancellation(&m, &c, &c, -90.0, 10.0);
        assert_eq!(est.len(), 2);
        // stronger path extracted first
        assert_eq!((est[0].tx_beam, est[0].rx_beam), (6, 6));
        assert_eq!((est[1].tx_beam, est[1].rx_beam), (1, 1));
        assert!(est[0].strength > est[1].strength);
    }

    #[test]
    fn all_floor_matrix_yields_nothing() {
        let m = sweep(&[]);
        let est = successive_cancellation(&m, &cb(), &cb(), -90.0, 10.0);
        assert!(est.is_empty());
    }

    #[test]
    fn predict_single_pa_nine_pairs() {
        let c = cb();
        // place the PA so its direction hits rx beam 4 and tx beam 2
        // boresights exactly
        let ue = UEState::at(Point2::new(0.0, 0.0));
        let aoa = c.centers[4]; // ue orientation 0
        let pa_pos = Point2::new(5.0 * aoa.cos(), 5.0 * aoa.sin());
        let tx_orientation = bearing(&pa_pos, &ue.position) - c.centers[2];
        let map = vec![(FeatureKind::Pa, pa_pos, 1.0)];
        let got = predict_beams(&map, &ue, 0.0, &c, &c, tx_orientation, 0.5);
        assert_eq!(got.len(), 9);
        for (i, j) in &got {
            assert!((1..=3).contains(i));
            assert!((3..=5).contains(j));
        }
    }

    #[test]
    fn predict_empty_map_full_sweep() {
        let c = cb();
        let got = predict_beams(&[], &UEState::at(Point2::new(0.0, 0.0)), 0.1, &c, &c, 0.0, 0.5);
        assert_eq!(got.len(), 64);
    }

    #[test]
    fn predict_two_disjoint_features_union() {
        let c = cb();
        let ue = UEState::at(Point2::new(0.0, 0.0));
        let a1 = c.centers[1];
        let a2 = c.centers[6];
        let f1 = Point2::new(6.0 * a1.cos(), 6.0 * a1.sin());
        let f2 = Point2::new(6.0 * a2.cos(), 6.0 * a2.sin());
        // tx orientation aimed back at the UE from between the features:
        // use PA kind for both so aod = bearing(f -> ue)
        let map = vec![(FeatureKind::Pa, f1, 1.0), (FeatureKind::Pa, f2, 0.9)];
        let got = predict_beams(&map, &ue, 0.0, &c, &c, std::f64::consts::PI, 0.5);
        // two 3x3 neighborhoods; disjoint in rx, may overlap in tx
        assert!(got.len() <= 18);
        assert!(got.len() > 9);
        let rx_beams: std::collections::BTreeSet<usize> = got.iter().map(|p| p.1).collect();
        assert!(rx_beams.contains(&1) && rx_beams.contains(&6));
        assert!(!rx_beams.contains(&4));
    }

    #[test]
    fn low_existence_features_ignored() {
        let c = cb();
        let ue = UEState::at(Point2::new(0.0, 0.0));
        let f = Point2::new(5.0, 0.0);
        let map = vec![(FeatureKind::Va, f, 0.2)];
        let got = predict_beams(&map, &ue, 0.0, &c, &c, 0.0, 0.5);
        assert_eq!(got.len(), 64, "below-threshold map must escalate to full sweep");
    }

    #[test]
    fn containment_optimality() {
        let mut ts = TrackingState::full_sweep(8, 8);
        // measured subset contains the exhaustive argmax (3, 2)
        let measured = vec![
            ((3usize, 2usize), -48.0),
            ((3, 3), -55.0),
            ((2, 2), -60.0),
        ];
        let out = tracking_step(&mut ts, &measured, 8, 8, vec![(3, 2), (3, 3), (2, 2)]);
        assert_eq!(out.chosen, (3, 2));
        assert_eq!(out.overhead, 3);
        assert_eq!(ts.mode, TrackMode::Tracking);
    }

    #[test]
    fn stable_link_stays_tracking_with_low_overhead() {
        let mut ts = TrackingState::full_sweep(8, 8);
        for _ in 0..10 {
            let measured: Vec<((usize, usize), f64)> =
                vec![((4, 4), -50.0), ((4, 5), -58.0), ((5, 4), -57.0)];
            let out = tracking_step(&mut ts, &measured, 8, 8, vec![(4, 4), (4, 5), (5, 4)]);
            assert_eq!(ts.mode, TrackMode::Tracking);
            assert!(out.overhead < 64);
        }
    }

    #[test]
    fn persistent_drop_triggers_full_sweep_within_two_epochs() {
        let mut ts = TrackingState::full_sweep(8, 8);
        for _ in 0..5 {
            let measured = vec![((4usize, 4usize), -50.0)];
            tracking_step(&mut ts, &measured, 8, 8, vec![(4, 4)]);
        }
        assert_eq!(ts.mode, TrackMode::Tracking);
        // 30 dB blockage
        let mut epochs_to_sweep = 0;
        for e in 1..=3 {
            let measured = vec![((4usize, 4usize), -80.0)];
            tracking_step(&mut ts, &measured, 8, 8, vec![(4, 4)]);
            if ts.mode == TrackMode::FullSweep {
                epochs_to_sweep = e;
                break;
            }
        }
        assert!(epochs_to_sweep > 0 && epochs_to_sweep <= 2, "took {epochs_to_sweep} epochs");
        assert_eq!(ts.candidates.len(), 64);
    }

    #[test]
    fn imu_zero_noise_exact() {
        let track: Vec<UEState> = (0..5)
            .map(|e| UEState::at(Point2::new(e as f64 * 0.3, e as f64 * -0.1)))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = imu_odometry(&track, 0.0, 0.0, &mut rng);
        assert_eq!(d.len(), 4);
        for step in &d {
            assert_relative_eq!(step.x, 0.3, epsilon = 1e-12);
            assert_relative_eq!(step.y, -0.1, epsilon = 1e-12);
        }
    }

    #[test]
    fn imu_drift_variance_grows_linearly() {
        // cumulative displacement error variance after n epochs of pure
        // random-walk drift: sum_{k=1..n} k^2 is super-linear in the
        // endpoint; per-epoch bias variance itself is k * sigma^2
        let sigma_d = 0.05;
        let n_epochs = 30;
        let n_runs = 2000;
        let track: Vec<UEState> = (0..=n_epochs)
            .map(|e| UEState::at(Point2::new(e as f64, 0.0)))
            .collect();
        let mut late = 0.0;
        let mut early = 0.0;
        for run in 0..n_runs {
            let mut rng = ChaCha8Rng::seed_from_u64(run);
            let d = imu_odometry(&track, 0.0, sigma_d, &mut rng);
            early += (d[4].x - 1.0).powi(2);
            late += (d[n_epochs - 1].x - 1.0).powi(2);
        }
        early /= n_runs as f64;
        late /= n_runs as f64;
        // bias variance at epoch k is k * sigma_d^2
        assert_relative_eq!(early, 5.0 * sigma_d * sigma_d, max_relative = 0.15);
        assert_relative_eq!(late, 30.0 * sigma_d * sigma_d, max_relative = 0.15);
    }
}
