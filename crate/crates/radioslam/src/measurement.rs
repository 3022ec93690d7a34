//! Per-epoch multipath measurement synthesis: ground-truth path
//! enumeration, noisy (AOA, AOD, TOA, RSRP) observation with clock and
//! orientation biases, detection misses and clutter, and beam-pair RSRP
//! matrix sweeps.

use nalgebra::Vector2;
use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};

use crate::error::{Error, Result};
use crate::geometry::{trace_specular_path, Environment, Point2};
use crate::{wrap_angle, SPEED_OF_LIGHT};

/// Free-space path loss in dB at 28 GHz for distance `d` meters.
pub fn fspl_db(d: f64) -> f64 {
    let d = d.max(0.1);
    20.0 * d.log10() + 20.0 * 28e9f64.log10()
        + 20.0 * (4.0 * std::f64::consts::PI / SPEED_OF_LIGHT).log10()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UEState {
    pub position: Point2,
    pub velocity: Vector2<f64>,
    /// Receiver clock offset, seconds (added to every observed TOA).
    pub clock_bias: f64,
    /// Body-frame heading, wrapped to (-pi, pi].
    pub orientation: f64,
}

impl UEState {
    pub fn at(position: Point2) -> Self {
        Self {
            position,
            velocity: Vector2::zeros(),
            clock_bias: 0.0,
            orientation: 0.0,
        }
    }
}

/// Simulation-only ground-truth label; never consumed by estimators.
#[derive(Debug, Clone, PartialEq)]
pub enum TruthTag {
    Los { pa_id: String },
    Nlos { pa_id: String, wall_id: String, va: Point2 },
    Scatter { id: String },
    Clutter,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Measurement {
    /// Arrival azimuth in the UE body frame, (-pi, pi].
    pub aoa: f64,
    /// Departure azimuth in the global frame at the anchor, (-pi, pi].
    pub aod: f64,
    /// Biased time of arrival, seconds.
    pub toa: f64,
    /// dB.
    pub rsrp: f64,
    pub truth_tag: TruthTag,
    pub epoch: u64,
}

/// One ground-truth propagation path, all angles global.
#[derive(Debug, Clone, PartialEq)]
pub struct PathTruth {
    pub tag: TruthTag,
    pub aoa: f64,
    pub aod: f64,
    pub toa: f64,
    pub rsrp: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct NoiseProfile {
    pub sigma_aoa: f64,
    pub sigma_aod: f64,
    pub sigma_toa: f64,
    pub sigma_rsrp: f64,
    pub detection_prob: f64,
    /// Mean clutter measurements per epoch (Poisson).
    pub clutter_rate: f64,
    pub tx_power_db: f64,
    pub noise_floor_db: f64,
    pub specular_loss_db: f64,
    pub scatter_loss_db: f64,
}

impl Default for NoiseProfile {
    fn default() -> Self {
        Self {
            sigma_aoa: 2f64.to_radians(),
            sigma_aod: 2f64.to_radians(),
            sigma_toa: 1e-9,
            sigma_rsrp: 1.0,
            detection_prob: 0.95,
            clutter_rate: 1.0,
            tx_power_db: 30.0,
            noise_floor_db: -90.0,
            specular_loss_db: 10.0,
            scatter_loss_db: 20.0,
        }
    }
}

impl NoiseProfile {
    pub fn noiseless() -> Self {
        Self {
            sigma_aoa: 0.0,
            sigma_aod: 0.0,
            sigma_toa: 0.0,
            sigma_rsrp: 0.0,
            detection_prob: 1.0,
            clutter_rate: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut v = Vec::new();
        for (name, s) in [
            ("sigma_aoa", self.sigma_aoa),
            ("sigma_aod", self.sigma_aod),
            ("sigma_toa", self.sigma_toa),
            ("sigma_rsrp", self.sigma_rsrp),
            ("clutter_rate", self.clutter_rate),
        ] {
            if s < 0.0 || !s.is_finite() {
                v.push(format!("noise.{name} must be >= 0, got {s}"));
            }
        }
        if !(0.0..=1.0).contains(&self.detection_prob) {
            v.push(format!(
                "noise.detection_prob must be in [0, 1], got {}",
                self.detection_prob
            ));
        }
        if v.is_empty() { Ok(()) } else { Err(Error::Validation(v)) }
    }
}

fn bearing(from: &Point2, to: &Point2) -> f64 {
    let d = to - from;
    d.y.atan2(d.x)
}

/// Enumerate ground-truth paths at the UE position: LOS per unoccluded PA,
/// one specular NLOS per visible (PA, wall) pair and one single-bounce path
/// per unoccluded scatterer.
pub fn enumerate_paths(env: &Environment, ue: &UEState, noise: &NoiseProfile) -> Vec<PathTruth> {
    let mut paths = Vec::new();
    let u = &ue.position;
    for (pa_id, pa) in &env.pas {
        // LOS
        if !env.blocked(u, pa, &[]) {
            let d = (pa - u).norm();
            paths.push(PathTruth {
                tag: TruthTag::Los { pa_id: pa_id.clone() },
                aoa: bearing(u, pa),
                aod: bearing(pa, u),
                toa: d / SPEED_OF_LIGHT,
                rsrp: noise.tx_power_db - fspl_db(d),
            });
        }
        // Specular NLOS via each wall
        for w in &env.walls {
            if let Some((bounce, len)) = trace_specular_path(u, pa, w, Some(env)) {
                paths.push(PathTruth {
                    tag: TruthTag::Nlos {
                        pa_id: pa_id.clone(),
                        wall_id: w.id.clone(),
                        va: crate::geometry::mirror_point(pa, w).expect("non-degenerate wall"),
                    },
                    aoa: bearing(u, &bounce),
                    aod: bearing(pa, &bounce),
                    toa: len / SPEED_OF_LIGHT,
                    rsrp: noise.tx_power_db - fspl_db(len) - noise.specular_loss_db,
                });
            }
        }
        // Single-bounce scatterer paths PA -> scatterer -> UE
        for (sid, s) in &env.scatterers {
            if !env.blocked(pa, s, &[]) && !env.blocked(s, u, &[]) {
                let d1 = (s - pa).norm();
                let d2 = (u - s).norm();
                paths.push(PathTruth {
                    tag: TruthTag::Scatter { id: sid.clone() },
                    aoa: bearing(u, s),
                    aod: bearing(pa, s),
                    toa: (d1 + d2) / SPEED_OF_LIGHT,
                    rsrp: noise.tx_power_db - fspl_db(d1 + d2) - noise.scatter_loss_db,
                });
            }
        }
    }
    paths
}

/// Clutter TOA window upper edge for an environment.
pub fn clutter_toa_window(env: &Environment) -> f64 {
    2.0 * env.bounds.diagonal() / SPEED_OF_LIGHT
}

/// Observe ground-truth paths: independent detection, bias + noise
/// application and Poisson clutter.
pub fn observe(
    paths: &[PathTruth],
    ue: &UEState,
    noise: &NoiseProfile,
    toa_window: f64,
    epoch: u64,
    rng: &mut impl Rng,
) -> Vec<Measurement> {
    let mut out = Vec::new();
    let gauss = |rng: &mut dyn rand::RngCore, sigma: f64| -> f64 {
        if sigma > 0.0 {
            Normal::new(0.0, sigma).unwrap().sample(rng)
        } else {
            // keep the draw count independent of sigma for determinism
            let _ = rng.random::<f64>();
            0.0
        }
    };
    for p in paths {
        let detected = rng.random::<f64>() < noise.detection_prob;
        let (na, nd, nt, nr) = (
            gauss(rng, noise.sigma_aoa),
            gauss(rng, noise.sigma_aod),
            gauss(rng, noise.sigma_toa),
            gauss(rng, noise.sigma_rsrp),
        );
        if !detected {
            continue;
        }
        out.push(Measurement {
            aoa: wrap_angle(p.aoa - ue.orientation + na),
            aod: wrap_angle(p.aod + nd),
            toa: p.toa + ue.clock_bias + nt,
            rsrp: p.rsrp + nr,
            truth_tag: p.tag.clone(),
            epoch,
        });
    }
    if noise.clutter_rate > 0.0 {
        let n_clutter = Poisson::new(noise.clutter_rate).unwrap().sample(rng) as usize;
        for _ in 0..n_clutter {
            out.push(Measurement {
                aoa: wrap_angle(rng.random_range(-std::f64::consts::PI..std::f64::consts::PI)),
                aod: wrap_angle(rng.random_range(-std::f64::consts::PI..std::f64::consts::PI)),
                toa: rng.random_range(0.0..toa_window),
                rsrp: noise.noise_floor_db + rng.random_range(0.0..20.0),
                truth_tag: TruthTag::Clutter,
                epoch,
            });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BeamCodebook {
    pub n_beams: usize,
    /// Beam centers relative to the array boresight, evenly spaced.
    pub centers: Vec<f64>,
    pub beamwidth: f64,
    pub sector: f64,
}

impl BeamCodebook {
    pub fn uniform(n_beams: usize, sector: f64, beamwidth: f64) -> Result<Self> {
        if n_beams < 2 {
            return Err(Error::Config(format!("codebook needs >= 2 beams, got {n_beams}")));
        }
        if sector <= 0.0 || beamwidth <= 0.0 {
            return Err(Error::Config("codebook sector and beamwidth must be positive".into()));
        }
        let step = sector / n_beams as f64;
        let centers = (0..n_beams)
            .map(|i| -sector / 2.0 + (i as f64 + 0.5) * step)
            .collect();
        Ok(Self { n_beams, centers, beamwidth, sector })
    }

    /// The paper's setup: eight narrow beams covering 100 degrees.
    pub fn paper_default() -> Self {
        Self::uniform(8, 100f64.to_radians(), 12.5f64.to_radians()).unwrap()
    }

    /// Raised-cosine mainlobe gain in dB with a flat -20 dB sidelobe.
    /// `angle` and the beam center are both relative to the boresight.
    pub fn gain_db(&self, beam: usize, angle: f64) -> f64 {
        let delta = wrap_angle(angle - self.centers[beam]).abs();
        if delta >= self.beamwidth {
            return -20.0;
        }
        let g = 0.5 * (1.0 + (std::f64::consts::PI * delta / self.beamwidth).cos());
        (10.0 * g.log10()).max(-20.0)
    }

    /// Beam whose center is nearest to `angle` (relative to boresight).
    pub fn nearest_beam(&self, angle: f64) -> usize {
        self.centers
            .iter()
            .enumerate()
            .min_by(|(_, a), (_, b)| {
                wrap_angle(angle - **a)
                    .abs()
                    .total_cmp(&wrap_angle(angle - **b).abs())
            })
            .map(|(i, _)| i)
            .unwrap()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RsrpMatrix {
    /// values[tx][rx], dB.
    pub values: Vec<Vec<f64>>,
    pub tx_orientation: f64,
    pub rx_orientation: f64,
}

impl RsrpMatrix {
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = (0, 0);
        let mut best_v = f64::NEG_INFINITY;
        for (i, row) in self.values.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if v > best_v {
                    best_v = v;
                    best = (i, j);
                }
            }
        }
        best
    }
}

/// Bidirectional exhaustive beam sweep: power-sum of all paths through the
/// tx/rx beam gains plus the noise floor, per beam pair.
pub fn sweep_rsrp(
    paths: &[PathTruth],
    tx_cb: &BeamCodebook,
    rx_cb: &BeamCodebook,
    tx_orientation: f64,
    rx_orientation: f64,
    noise: &NoiseProfile,
    rng: &mut impl Rng,
) -> RsrpMatrix {
    let floor_lin = 10f64.powf(noise.noise_floor_db / 10.0);
    let mut values = vec![vec![0.0; rx_cb.n_beams]; tx_cb.n_beams];
    for (i, row) in values.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let mut lin = floor_lin;
            for p in paths {
                let gtx = tx_cb.gain_db(i, wrap_angle(p.aod - tx_orientation));
                let grx = rx_cb.gain_db(j, wrap_angle(p.aoa - rx_orientation));
                lin += 10f64.powf((p.rsrp + gtx + grx) / 10.0);
            }
            let n = if noise.sigma_rsrp > 0.0 {
                Normal::new(0.0, noise.sigma_rsrp).unwrap().sample(rng)
            } else {
                let _ = rng.random::<f64>();
                0.0
            };
            *v = 10.0 * lin.log10() + n;
        }
    }
    RsrpMatrix { values, tx_orientation, rx_orientation }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{AaRect, WallSegment};
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn room() -> Environment {
        let w = |id: &str, a: (f64, f64), b: (f64, f64)| {
            WallSegment::new(id, Point2::new(a.0, a.1), Point2::new(b.0, b.1)).unwrap()
        };
        Environment {
            walls: vec![
                w("south", (0.0, 0.0), (10.0, 0.0)),
                w("east", (10.0, 0.0), (10.0, 8.0)),
                w("north", (10.0, 8.0), (0.0, 8.0)),
                w("west", (0.0, 8.0), (0.0, 0.0)),
            ],
            pas: vec![("pa1".into(), Point2::new(5.667, 6.290))],
            scatterers: vec![],
            bounds: AaRect::new(Point2::new(0.0, 0.0), Point2::new(10.0, 8.0)),
        }
    }

    #[test]
    fn single_pa_no_walls_one_los() {
        let env = Environment {
            walls: vec![],
            pas: vec![("pa".into(), Point2::new(1.0, 1.0))],
            scatterers: vec![],
            bounds: AaRect::new(Point2::new(-5.0, -5.0), Point2::new(5.0, 5.0)),
        };
        let paths = enumerate_paths(&env, &UEState::at(Point2::new(0.0, 0.0)), &NoiseProfile::default());
        assert_eq!(paths.len(), 1);
        assert!(matches!(paths[0].tag, TruthTag::Los { .. }));
    }

    #[test]
    fn room_has_los_plus_wall_reflections() {
        let env = room();
        let ue = UEState::at(Point2::new(3.0, 3.0));
        let paths = enumerate_paths(&env, &ue, &NoiseProfile::default());
        let n_los = paths.iter().filter(|p| matches!(p.tag, TruthTag::Los { .. })).count();
        let n_nlos = paths.iter().filter(|p| matches!(p.tag, TruthTag::Nlos { .. })).count();
        assert_eq!(n_los, 1);
        // cross-check each wall with the ray-trace oracle
        let mut expect = 0;
        for w in &env.walls {
            if trace_specular_path(&ue.position, &env.pas[0].1, w, Some(&env)).is_some() {
                expect += 1;
            }
        }
        assert_eq!(n_nlos, expect);
        assert!(n_nlos >= 1);
    }

    #[test]
    fn blocked_pa_no_los() {
        let mut env = room();
        env.walls.push(
            WallSegment::new("screen", Point2::new(2.0, 4.0), Point2::new(8.0, 4.0)).unwrap(),
        );
        let ue = UEState::at(Point2::new(5.0, 1.0));
        let paths = enumerate_paths(&env, &ue, &NoiseProfile::default());
        assert_eq!(
            paths.iter().filter(|p| matches!(p.tag, TruthTag::Los { .. })).count(),
            0
        );
    }

    #[test]
    fn noiseless_observation_is_identity() {
        let env = room();
        let ue = UEState::at(Point2::new(3.0, 3.0));
        let noise = NoiseProfile::noiseless();
        let paths = enumerate_paths(&env, &ue, &noise);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let meas = observe(&paths, &ue, &noise, clutter_toa_window(&env), 0, &mut rng);
        assert_eq!(meas.len(), paths.len());
        for (m, p) in meas.iter().zip(&paths) {
            assert_relative_eq!(m.aoa, wrap_angle(p.aoa), epsilon = 1e-12);
            assert_relative_eq!(m.aod, wrap_angle(p.aod), epsilon = 1e-12);
            assert_relative_eq!(m.toa, p.toa, epsilon = 1e-18);
            assert_relative_eq!(m.rsrp, p.rsrp, epsilon = 1e-12);
        }
    }

    #[test]
    fn orientation_rotates_aoa_frame() {
        let p = PathTruth {
            tag: TruthTag::Los { pa_id: "pa".into() },
            aoa: 90f64.to_radians(),
            aod: 0.0,
            toa: 1e-8,
            rsrp: -60.0,
        };
        let mut ue = UEState::at(Point2::new(0.0, 0.0));
        ue.orientation = 30f64.to_radians();
        let noise = NoiseProfile::noiseless();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let meas = observe(&[p], &ue, &noise, 1e-6, 0, &mut rng);
        assert_relative_eq!(meas[0].aoa, 60f64.to_radians(), epsilon = 1e-12);
    }

    #[test]
    fn clock_bias_additivity() {
        let env = room();
        let mut ue = UEState::at(Point2::new(3.0, 3.0));
        ue.clock_bias = 7.5e-9;
        let noise = NoiseProfile::noiseless();
        let paths = enumerate_paths(&env, &ue, &noise);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let meas = observe(&paths, &ue, &noise, clutter_toa_window(&env), 0, &mut rng);
        for (m, p) in meas.iter().zip(&paths) {
            assert_relative_eq!(m.toa - p.toa, 7.5e-9, epsilon = 1e-18);
        }
    }

    #[test]
    fn detection_rate_monte_carlo() {
        let p = PathTruth {
            tag: TruthTag::Los { pa_id: "pa".into() },
            aoa: 0.0,
            aod: 0.0,
            toa: 1e-8,
            rsrp: -60.0,
        };
        let mut noise = NoiseProfile::noiseless();
        noise.detection_prob = 0.5;
        let ue = UEState::at(Point2::new(0.0, 0.0));
        let mut hits = 0usize;
        for epoch in 0..10_000u64 {
            let mut rng = crate::rng::stream(3, 1, epoch, crate::rng::StreamTag::Observe);
            hits += observe(&[p.clone()], &ue, &noise, 1e-6, epoch, &mut rng).len();
        }
        let rate = hits as f64 / 10_000.0;
        assert!((rate - 0.5).abs() < 0.02, "rate = {rate}");
    }

    #[test]
    fn scatterer_toa_at_least_los() {
        let mut env = room();
        env.scatterers.push(("s1".into(), Point2::new(8.0, 2.0)));
        let ue = UEState::at(Point2::new(3.0, 3.0));
        let paths = enumerate_paths(&env, &ue, &NoiseProfile::default());
        let los = paths
            .iter()
            .find(|p| matches!(p.tag, TruthTag::Los { .. }))
            .unwrap()
            .toa;
        for p in &paths {
            if matches!(p.tag, TruthTag::Scatter { .. }) {
                assert!(p.toa >= los);
            }
        }
    }

    #[test]
    fn all_angles_wrapped() {
        let env = room();
        let mut ue = UEState::at(Point2::new(3.0, 3.0));
        ue.orientation = 3.0;
        let noise = NoiseProfile::default();
        let paths = enumerate_paths(&env, &ue, &noise);
        for epoch in 0..50 {
            let mut rng = crate::rng::stream(9, 1, epoch, crate::rng::StreamTag::Observe);
            for m in observe(&paths, &ue, &noise, clutter_toa_window(&env), epoch, &mut rng) {
                assert!(m.aoa > -std::f64::consts::PI && m.aoa <= std::f64::consts::PI);
                assert!(m.aod > -std::f64::consts::PI && m.aod <= std::f64::consts::PI);
            }
        }
    }

    #[test]
    fn seeded_determinism() {
        let env = room();
        let ue = UEState::at(Point2::new(3.0, 3.0));
        let noise = NoiseProfile::default();
        let paths = enumerate_paths(&env, &ue, &noise);
        let run = || {
            let mut rng = crate::rng::stream(11, 2, 5, crate::rng::StreamTag::Observe);
            observe(&paths, &ue, &noise, clutter_toa_window(&env), 5, &mut rng)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn sweep_argmax_at_boresight() {
        let tx = BeamCodebook::paper_default();
        let rx = BeamCodebook::paper_default();
        let p = PathTruth {
            tag: TruthTag::Los { pa_id: "pa".into() },
            aod: tx.centers[3],
            aoa: rx.centers[5],
            toa: 1e-8,
            rsrp: -60.0,
        };
        let noise = NoiseProfile::noiseless();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = sweep_rsrp(&[p], &tx, &rx, 0.0, 0.0, &noise, &mut rng);
        assert_eq!(m.argmax(), (3, 5));
    }

    #[test]
    fn sweep_no_paths_all_noise_floor() {
        let tx = BeamCodebook::paper_default();
        let rx = BeamCodebook::paper_default();
        let noise = NoiseProfile::noiseless();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = sweep_rsrp(&[], &tx, &rx, 0.0, 0.0, &noise, &mut rng);
        for row in &m.values {
            for &v in row {
                assert_relative_eq!(v, noise.noise_floor_db, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn sweep_argmax_nearest_codebook_angles() {
        let tx = BeamCodebook::paper_default();
        let rx = BeamCodebook::paper_default();
        let noise = NoiseProfile::noiseless();
        for k in 0..8 {
            let aod = -0.7 + 0.17 * k as f64;
            let aoa = 0.6 - 0.15 * k as f64;
            let p = PathTruth {
                tag: TruthTag::Los { pa_id: "pa".into() },
                aod,
                aoa,
                toa: 1e-8,
                rsrp: -60.0,
            };
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let m = sweep_rsrp(&[p], &tx, &rx, 0.0, 0.0, &noise, &mut rng);
            assert_eq!(m.argmax(), (tx.nearest_beam(aod), rx.nearest_beam(aoa)));
        }
    }
}
