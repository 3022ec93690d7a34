//! Monostatic active sensing: echo simulation along beam boresights,
//! reflective-surface-point estimation with a first-order uncertainty
//! model, and conversion of RSP clusters into virtual-anchor priors.

use nalgebra::{Matrix2, Vector2};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::geometry::{rsp_from_echo, wall_from_rsps, Environment, LineFit, Point2};
use crate::measurement::{BeamCodebook, NoiseProfile, UEState};
use crate::SPEED_OF_LIGHT;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct ActiveConfig {
    /// Echo SNR at 1 m, dB; decays as 40 log10(d) (two-way spreading).
    pub ref_snr_db: f64,
    /// Minimum detectable echo range, m (self-interference guard).
    pub min_range: f64,
    /// Point-to-line distance threshold for RSP clustering, m.
    pub cluster_threshold: f64,
}

impl Default for ActiveConfig {
    fn default() -> Self {
        Self {
            ref_snr_db: 60.0,
            min_range: 0.5,
            cluster_threshold: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Echo {
    pub beam_index: usize,
    pub round_trip_time: f64,
    pub snr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RspEstimate {
    pub point: Point2,
    pub covariance: Matrix2<f64>,
    pub beam_index: usize,
    pub snr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VaPrior {
    pub mean: Point2,
    pub covariance: Matrix2<f64>,
    pub wall_id: String,
    /// Mirrored PA hypothesis id.
    pub pa_id: String,
}

/// Distance from `origin` along `dir` to the nearest wall, if any.
fn nearest_wall_hit(env: &Environment, origin: &Point2, dir: &Vector2<f64>) -> Option<f64> {
    let mut best: Option<f64> = None;
    for w in &env.walls {
        if let Some(t) = ray_segment(origin, dir, &w.a, &w.b) {
            if best.is_none_or(|b| t < b) {
                best = Some(t);
            }
        }
    }
    best
}

fn ray_segment(p: &Point2, dir: &Vector2<f64>, a: &Point2, b: &Point2) -> Option<f64> {
    let s = b - a;
    let denom = dir.x * s.y - dir.y * s.x;
    if denom.abs() < 1e-15 {
        return None;
    }
    let ap = a - p;
    let t = (ap.x * s.y - ap.y * s.x) / denom;
    let u = (ap.x * dir.y - ap.y * dir.x) / denom;
    if t > 1e-9 && (0.0..=1.0).contains(&u) {
        Some(t)
    } else {
        None
    }
}

/// Detection probability as a function of echo SNR: full above 10 dB,
/// linear ramp to zero at 0 dB.
fn detection_prob(snr_db: f64, base: f64) -> f64 {
    if snr_db >= 10.0 {
        base
    } else if snr_db <= 0.0 {
        0.0
    } else {
        base * snr_db / 10.0
    }
}

/// Simulate the monostatic echo per beam: two-way time of flight to the
/// nearest wall along the beam boresight, Gaussian timing noise and
/// SNR-dependent detection.
pub fn simulate_echo(
    env: &Environment,
    ue: &UEState,
    cb: &BeamCodebook,
    noise: &NoiseProfile,
    cfg: &ActiveConfig,
    rng: &mut impl Rng,
) -> Vec<Echo> {
    let mut echoes = Vec::new();
    for (i, center) in cb.centers.iter().enumerate() {
        let az = ue.orientation + center;
        let dir = Vector2::new(az.cos(), az.sin());
        let detect_draw = rng.random::<f64>();
        let noise_draw = if noise.sigma_toa > 0.0 {
            Normal::new(0.0, noise.sigma_toa).unwrap().sample(rng)
        } else {
            let _ = rng.random::<f64>();
            0.0
        };
        let Some(d) = nearest_wall_hit(env, &ue.position, &dir) else {
            continue;
        };
        if d < cfg.min_range {
            continue;
        }
        let snr = cfg.ref_snr_db - 40.0 * d.max(1.0).log10();
        if detect_draw >= detection_prob(snr, noise.detection_prob) {
            continue;
        }
        echoes.push(Echo {
            beam_index: i,
            round_trip_time: 2.0 * d / SPEED_OF_LIGHT + noise_draw,
            snr,
        });
    }
    echoes
}

/// Map echoes through `rsp_from_echo` along beam centers; the covariance
/// propagates the (range, angle) error model into Cartesian coordinates.
/// Returns the estimates and the count of dropped non-positive echoes.
pub fn estimate_rsps(
    echoes: &[Echo],
    ue: &UEState,
    cb: &BeamCodebook,
    noise: &NoiseProfile,
) -> (Vec<RspEstimate>, usize) {
    let mut out = Vec::new();
    let mut dropped = 0usize;
    for e in echoes {
        let az = ue.orientation + cb.centers[e.beam_index];
        let Ok(point) = rsp_from_echo(&ue.position, az, e.round_trip_time) else {
            dropped += 1;
            continue;
        };
        let d = (point - ue.position).norm();
        let var_radial = (SPEED_OF_LIGHT * noise.sigma_toa / 2.0).powi(2);
        let var_tangential = (d * cb.beamwidth / 12f64.sqrt()).powi(2);
        let rot = nalgebra::Rotation2::new(az);
        let covariance =
            rot.matrix() * Matrix2::from_diagonal(&Vector2::new(var_radial, var_tangential))
                * rot.matrix().transpose();
        out.push(RspEstimate {
            point,
            covariance,
            beam_index: e.beam_index,
            snr: e.snr,
        });
    }
    (out, dropped)
}

/// Greedy sequential clustering by distance to the running line fit.
/// RSPs from one wall arrive on contiguous beams, so walking beams in
/// order and splitting when the next point leaves the fitted line
/// separates the walls.
fn cluster_rsps(rsps: &[RspEstimate], threshold: f64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..rsps.len()).collect();
    order.sort_by_key(|&i| rsps[i].beam_index);
    let mut clusters: Vec<Vec<usize>> = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    for &i in &order {
        if current.len() < 2 {
            current.push(i);
            continue;
        }
        let pts: Vec<(Point2, Matrix2<f64>)> = current
            .iter()
            .map(|&k| (rsps[k].point, rsps[k].covariance))
            .collect();
        match wall_from_rsps(&pts) {
            Ok(fit) if fit.distance(&rsps[i].point) <= threshold => current.push(i),
            _ => {
                clusters.push(std::mem::take(&mut current));
                current.push(i);
            }
        }
    }
    if !current.is_empty() {
        clusters.push(current);
    }
    refine_clusters(rsps, clusters)
}

/// Reassign each RSP to the nearest fitted cluster line and refit. Cleans
/// up corner points that greedy splitting attached to the wrong wall.
fn refine_clusters(rsps: &[RspEstimate], mut clusters: Vec<Vec<usize>>) -> Vec<Vec<usize>> {
    for _ in 0..3 {
        let fits: Vec<Option<LineFit>> = clusters
            .iter()
            .map(|c| {
                if c.len() < 2 {
                    return None;
                }
                let pts: Vec<(Point2, Matrix2<f64>)> =
                    c.iter().map(|&k| (rsps[k].point, rsps[k].covariance)).collect();
                wall_from_rsps(&pts).ok()
            })
            .collect();
        if fits.iter().filter(|f| f.is_some()).count() < 2 {
            break;
        }
        let mut next: Vec<Vec<usize>> = vec![Vec::new(); clusters.len()];
        for (ci, cluster) in clusters.iter().enumerate() {
            for &k in cluster {
                let mut best = ci;
                let mut best_d = f64::INFINITY;
                for (cj, fit) in fits.iter().enumerate() {
                    if let Some(f) = fit {
                        let d = f.distance(&rsps[k].point);
                        if d < best_d {
                            best_d = d;
                            best = cj;
                        }
                    }
                }
                next[best].push(k);
            }
        }
        next.retain(|c| !c.is_empty());
        if next == clusters {
            break;
        }
        clusters = next;
    }
    clusters
}

/// Mirror a point across the fitted line n(phi) . p = offset.
fn mirror_across_line(p: &Point2, phi: f64, offset: f64) -> Point2 {
    let n = Vector2::new(phi.cos(), phi.sin());
    p - 2.0 * (n.dot(&p.coords) - offset) * n
}

/// Convert clustered RSPs into VA priors by mirroring each PA hypothesis
/// across the fitted wall line, with first-order covariance propagation
/// from both the line fit and the PA hypothesis.
pub fn rsps_to_va_priors(
    rsps: &[RspEstimate],
    pa_hypotheses: &[(String, Point2, Matrix2<f64>)],
    cfg: &ActiveConfig,
) -> Vec<VaPrior> {
    let mut priors = Vec::new();
    for (ci, cluster) in cluster_rsps(rsps, cfg.cluster_threshold).iter().enumerate() {
        if cluster.len() < 2 {
            continue;
        }
        let pts: Vec<(Point2, Matrix2<f64>)> = cluster
            .iter()
            .map(|&k| (rsps[k].point, rsps[k].covariance))
            .collect();
        let Ok(fit) = wall_from_rsps(&pts) else {
            continue;
        };
        for (pa_id, pa, pa_cov) in pa_hypotheses {
            let mean = mirror_across_line(pa, fit.normal_angle, fit.offset);
            // d mirror / d (phi, offset)
            let n = fit.normal();
            let nprime = Vector2::new(-n.y, n.x);
            let rho = n.dot(&pa.coords) - fit.offset;
            let dphi = -2.0 * (nprime.dot(&pa.coords) * n + rho * nprime);
            let doff = 2.0 * n;
            let jl = Matrix2::from_columns(&[dphi, doff]);
            // d mirror / d pa: Householder reflection (an isometry)
            let hh = Matrix2::identity() - 2.0 * n * n.transpose();
            let covariance = jl * fit.covariance * jl.transpose() + hh * pa_cov * hh.transpose();
            priors.push(VaPrior {
                mean,
                covariance,
                wall_id: format!("cluster{ci}"),
                pa_id: pa_id.clone(),
            });
        }
    }
    priors
}

/// Full active-sensing pass: echoes -> RSPs -> VA priors plus the wall
/// line fits, for harness use.
pub fn active_scan(
    env: &Environment,
    ue: &UEState,
    cb: &BeamCodebook,
    noise: &NoiseProfile,
    cfg: &ActiveConfig,
    pa_hypotheses: &[(String, Point2, Matrix2<f64>)],
    rng: &mut impl Rng,
) -> (Vec<VaPrior>, Vec<RspEstimate>) {
    let echoes = simulate_echo(env, ue, cb, noise, cfg, rng);
    let (rsps, _) = estimate_rsps(&echoes, ue, cb, noise);
    let priors = rsps_to_va_priors(&rsps, pa_hypotheses, cfg);
    (priors, rsps)
}

/// Wall line fits recovered from an RSP set, for diagnostics.
pub fn fitted_walls(rsps: &[RspEstimate], cfg: &ActiveConfig) -> Vec<LineFit> {
    cluster_rsps(rsps, cfg.cluster_threshold)
        .iter()
        .filter(|c| c.len() >= 2)
        .filter_map(|c| {
            let pts: Vec<(Point2, Matrix2<f64>)> =
                c.iter().map(|&k| (rsps[k].point, rsps[k].covariance)).collect();
            wall_from_rsps(&pts).ok()
        })
        .collect()
}
