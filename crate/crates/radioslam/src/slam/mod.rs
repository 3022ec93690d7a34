//! Particle-based belief-propagation SLAM over the UE state and a
//! Gaussian-per-feature map (PA / VA / scatterer) with soft data
//! association, feature birth, refinement and pruning.
//!
//! Rao-Blackwellized structure: particles carry the UE state (position,
//! velocity, clock bias, orientation); the map is one Gaussian per feature
//! conditioned on the estimated UE track, plus a Bernoulli existence
//! probability per feature.

pub mod assoc;

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::geometry::Point2;
use crate::measurement::{fspl_db, Measurement, NoiseProfile, UEState};
use crate::rng::{stream, StreamTag};
use crate::{wrap_angle, SPEED_OF_LIGHT};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Particle {
    pub state: UEState,
    pub weight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Pa,
    Va,
    Scatterer,
}

impl std::fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FeatureKind::Pa => write!(f, "pa"),
            FeatureKind::Va => write!(f, "va"),
            FeatureKind::Scatterer => write!(f, "scatterer"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Feature {
    pub id: u64,
    pub kind: FeatureKind,
    pub mean: Point2,
    pub covariance: Matrix2<f64>,
    pub existence: f64,
    pub birth_epoch: u64,
    pub last_seen: u64,
    /// False for features taken on trust from a downloaded map until the
    /// engine detects them itself; such features carry no local negative
    /// evidence, so missed epochs do not decay their existence.
    pub locally_confirmed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlamMode {
    PassiveKnownPa,
    Hybrid,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct SlamConfig {
    pub n_particles: usize,
    pub mode: SlamMode,
    /// Measurement components consumed by the estimator.
    pub use_aoa: bool,
    pub use_toa: bool,
    pub use_aod: bool,
    /// Acceleration noise std of the constant-velocity model, m/s^2.
    pub accel_noise: f64,
    /// Random-walk stds of the static bias states (default zero).
    pub clock_bias_walk: f64,
    pub orientation_walk: f64,
    /// Initial particle spread.
    pub init_pos_std: f64,
    pub init_vel_std: f64,
    pub init_clock_bias_std: f64,
    pub init_orientation_std: f64,
    /// Chi-square gating threshold.
    pub gate: f64,
    /// New-feature association mass needed to spawn a feature.
    pub birth_threshold: f64,
    /// Existence below which a feature is deleted.
    pub prune_threshold: f64,
    /// Existence decay per missed epoch inside the field of view.
    pub existence_decay: f64,
    /// Expected new features per epoch (birth intensity).
    pub birth_rate: f64,
    /// Existence assigned to a newly born feature.
    pub birth_existence: f64,
    /// Existence above which a feature counts as mapped.
    pub map_existence: f64,
}

impl Default for SlamConfig {
    fn default() -> Self {
        Self {
            n_particles: 2000,
            mode: SlamMode::PassiveKnownPa,
            use_aoa: true,
            use_toa: true,
            use_aod: false,
            accel_noise: 0.5,
            clock_bias_walk: 0.0,
            orientation_walk: 0.0,
            init_pos_std: 0.3,
            init_vel_std: 0.3,
            init_clock_bias_std: 0.0,
            init_orientation_std: 0.0,
            gate: 13.8,
            birth_threshold: 0.5,
            prune_threshold: 1e-3,
            existence_decay: 0.97,
            birth_rate: 5.0,
            birth_existence: 0.4,
            map_existence: 0.5,
        }
    }
}

impl SlamConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.n_particles < 1 {
            v.push("slam.n_particles must be >= 1".into());
        }
        if !(self.use_aoa || self.use_toa || self.use_aod) {
            v.push("slam measurement set must be non-empty".into());
        }
        for (name, t) in [
            ("gate", self.gate),
            ("birth_threshold", self.birth_threshold),
            ("prune_threshold", self.prune_threshold),
        ] {
            if t <= 0.0 {
                v.push(format!("slam.{name} must be positive"));
            }
        }
        if !(0.0..=1.0).contains(&self.existence_decay) {
            v.push("slam.existence_decay must be in [0, 1]".into());
        }
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Comp {
    Aoa,
    Toa,
    Aod,
}

/// Noise floors keep likelihoods proper in noiseless scenarios.
const MIN_SIGMA_ANGLE: f64 = 1e-4; // rad
const MIN_SIGMA_TOA: f64 = 1e-12; // s

#[derive(Debug, Clone, Copy, Default)]
pub struct Diagnostics {
    /// Times the particle weights underflowed and were reset to uniform.
    pub weight_resets: u32,
    pub resamples: u32,
}

#[derive(Debug, Clone)]
pub struct EpochSummary {
    pub epoch: u64,
    pub ue_estimate: UEState,
    pub ue_cov_trace: f64,
    pub feature_count: usize,
    pub log_likelihood: f64,
}

/// Association result: one row per measurement over the gated features
/// plus clutter and new-feature columns.
#[derive(Debug, Clone)]
pub struct Association {
    /// Indices into the engine's feature list, per measurement.
    pub gated: Vec<Vec<usize>>,
    /// rows[m] has gated[m].len() + 2 entries: features..., clutter, birth.
    pub rows: Vec<Vec<f64>>,
    /// Innovation covariance context per (measurement, gated feature).
    ctx: Vec<Vec<GaussCtx>>,
}

impl Association {
    /// Probability mass a measurement assigns to a given feature index.
    pub fn feature_prob(&self, m: usize, feature_idx: usize) -> f64 {
        self.gated[m]
            .iter()
            .position(|&f| f == feature_idx)
            .map_or(0.0, |k| self.rows[m][k])
    }

    pub fn birth_prob(&self, m: usize) -> f64 {
        *self.rows[m].last().unwrap()
    }

    pub fn clutter_prob(&self, m: usize) -> f64 {
        self.rows[m][self.rows[m].len() - 2]
    }
}

#[derive(Debug, Clone)]
struct GaussCtx {
    s_inv: DMatrix<f64>,
    norm: f64, // 1 / sqrt((2 pi)^k det S)
}

#[derive(Debug, Clone)]
struct PendingBirth {
    epoch: u64,
    origin: Point2,
    bearing: f64,
}

pub struct SlamEngine {
    pub cfg: SlamConfig,
    noise: NoiseProfile,
    comps: Vec<Comp>,
    pub particles: Vec<Particle>,
    pub features: Vec<Feature>,
    pub diagnostics: Diagnostics,
    next_feature_id: u64,
    pending_births: Vec<PendingBirth>,
    master_seed: u64,
    ue_id: u64,
    epoch: u64,
    last_estimate: UEState,
}

fn bearing(from: &Point2, to: &Point2) -> f64 {
    let d = to - from;
    d.y.atan2(d.x)
}

/// Departure azimuth at the PA for a path that appears to come from `va`:
/// the bounce point is the intersection of the UE->VA segment with the
/// perpendicular bisector of PA-VA.
fn va_aod(pa: &Point2, va: &Point2, ue: &Point2) -> f64 {
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

impl SlamEngine {
    /// Build an engine with particles drawn around the initial UE prior.
    /// `init_mean` is the prior mean (usually the entry point of the
    /// track); biases start at zero mean with the configured spreads.
    pub fn new(
        cfg: SlamConfig,
        noise: NoiseProfile,
        init_mean: UEState,
        master_seed: u64,
        ue_id: u64,
    ) -> Self {
        let mut comps = Vec::new();
        if cfg.use_aoa {
            comps.push(Comp::Aoa);
        }
        if cfg.use_toa {
            comps.push(Comp::Toa);
        }
        if cfg.use_aod {
            comps.push(Comp::Aod);
        }
        let mut rng = stream(master_seed, ue_id, 0, StreamTag::Init);
        let mut particles = Vec::with_capacity(cfg.n_particles);
        let draw = |rng: &mut rand_chacha::ChaCha8Rng, std: f64| -> f64 {
            if std > 0.0 {
                Normal::new(0.0, std).unwrap().sample(rng)
            } else {
                let _ = rng.random::<f64>();
                0.0
            }
        };
        for _ in 0..cfg.n_particles {
            let state = UEState {
                position: Point2::new(
                    init_mean.position.x + draw(&mut rng, cfg.init_pos_std),
                    init_mean.position.y + draw(&mut rng, cfg.init_pos_std),
                ),
                velocity: Vector2::new(
                    init_mean.velocity.x + draw(&mut rng, cfg.init_vel_std),
                    init_mean.velocity.y + draw(&mut rng, cfg.init_vel_std),
                ),
                clock_bias: init_mean.clock_bias + draw(&mut rng, cfg.init_clock_bias_std),
                orientation: wrap_angle(
                    init_mean.orientation + draw(&mut rng, cfg.init_orientation_std),
                ),
            };
            particles.push(Particle {
                state,
                weight: 1.0 / cfg.n_particles as f64,
            });
        }
        Self {
            cfg,
            noise,
            comps,
            particles,
            features: Vec::new(),
            diagnostics: Diagnostics::default(),
            next_feature_id: 0,
            pending_births: Vec::new(),
            master_seed,
            ue_id,
            epoch: 0,
            last_estimate: init_mean,
        }
    }

    /// Known-PA initialization: PA features at the given positions with
    /// near-zero covariance.
    pub fn init_known_pas(&mut self, pas: &[(String, Point2)]) {
        for (_, p) in pas {
            self.push_feature(FeatureKind::Pa, *p, Matrix2::identity() * 1e-6, 1.0);
        }
    }

    /// Hybrid initialization: VA priors from active sensing plus a
    /// wide-covariance PA belief. Empty priors start a cold map.
    pub fn init_hybrid(
        &mut self,
        va_priors: &[crate::active::VaPrior],
        pa_prior: Option<(Point2, Matrix2<f64>)>,
    ) {
        if let Some((mean, cov)) = pa_prior {
            self.push_feature(FeatureKind::Pa, mean, cov, 1.0);
        }
        for p in va_priors {
            // floor to keep the covariance safely positive definite
            let cov = p.covariance + Matrix2::identity() * 1e-6;
            self.push_feature(FeatureKind::Va, p.mean, cov, 0.5);
        }
    }

    /// Seed the map with a feature downloaded from a shared map; its
    /// confidence becomes the initial existence probability.
    pub fn push_downloaded(
        &mut self,
        kind: FeatureKind,
        mean: Point2,
        cov: Matrix2<f64>,
        confidence: f64,
    ) {
        let cov = cov + Matrix2::identity() * 1e-9;
        self.push_feature(kind, mean, cov, confidence.clamp(0.0, 1.0));
        self.features.last_mut().expect("just pushed").locally_confirmed = false;
    }

    fn push_feature(&mut self, kind: FeatureKind, mean: Point2, cov: Matrix2<f64>, existence: f64) {
        self.features.push(Feature {
            id: self.next_feature_id,
            kind,
            mean,
            covariance: cov,
            existence,
            birth_epoch: self.epoch,
            last_seen: self.epoch,
            locally_confirmed: true,
        });
        self.next_feature_id += 1;
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    fn pa_mean(&self) -> Option<Point2> {
        self.features
            .iter()
            .filter(|f| f.kind == FeatureKind::Pa)
            .max_by(|a, b| a.existence.total_cmp(&b.existence))
            .map(|f| f.mean)
    }

    fn sigma(&self, c: Comp) -> f64 {
        match c {
            Comp::Aoa => self.noise.sigma_aoa.max(MIN_SIGMA_ANGLE),
            Comp::Aod => self.noise.sigma_aod.max(MIN_SIGMA_ANGLE),
            Comp::Toa => self.noise.sigma_toa.max(MIN_SIGMA_TOA),
        }
    }

    fn z_of(&self, m: &Measurement) -> Vec<f64> {
        self.comps
            .iter()
            .map(|c| match c {
                Comp::Aoa => m.aoa,
                Comp::Toa => m.toa,
                Comp::Aod => m.aod,
            })
            .collect()
    }

    /// Predicted measurement components for a feature seen from `ue`.
    fn predict_comps(&self, kind: FeatureKind, fpos: &Point2, ue: &UEState, out: &mut [f64]) {
        let pa = self.pa_mean();
        for (k, c) in self.comps.iter().enumerate() {
            out[k] = match c {
                Comp::Aoa => wrap_angle(bearing(&ue.position, fpos) - ue.orientation),
                Comp::Toa => {
                    let range = match kind {
                        FeatureKind::Scatterer => {
                            let pa = pa.unwrap_or(*fpos);
                            (fpos - pa).norm() + (ue.position - fpos).norm()
                        }
                        _ => (ue.position - fpos).norm(),
                    };
                    range / SPEED_OF_LIGHT + ue.clock_bias
                }
                Comp::Aod => match kind {
                    FeatureKind::Pa => bearing(fpos, &ue.position),
                    FeatureKind::Va => {
                        let pa = pa.unwrap_or(*fpos);
                        va_aod(&pa, fpos, &ue.position)
                    }
                    FeatureKind::Scatterer => {
                        let pa = pa.unwrap_or(*fpos);
                        bearing(&pa, fpos)
                    }
                },
            };
        }
    }

    fn residual(&self, z: &[f64], pred: &[f64], out: &mut [f64]) {
        for (k, c) in self.comps.iter().enumerate() {
            out[k] = match c {
                Comp::Aoa | Comp::Aod => wrap_angle(z[k] - pred[k]),
                Comp::Toa => z[k] - pred[k],
            };
        }
    }

    /// Numeric Jacobian of the predicted components w.r.t. the feature
    /// position, at the given UE state.
    fn feature_jacobian(&self, kind: FeatureKind, fpos: &Point2, ue: &UEState) -> DMatrix<f64> {
        let k = self.comps.len();
        let mut jac = DMatrix::zeros(k, 2);
        let h = 1e-6;
        let mut plus = vec![0.0; k];
        let mut minus = vec![0.0; k];
        for axis in 0..2 {
            let mut fp = *fpos;
            fp[axis] += h;
            self.predict_comps(kind, &fp, ue, &mut plus);
            fp[axis] -= 2.0 * h;
            self.predict_comps(kind, &fp, ue, &mut minus);
            for row in 0..k {
                let mut d = plus[row] - minus[row];
                if matches!(self.comps[row], Comp::Aoa | Comp::Aod) {
                    d = wrap_angle(d);
                }
                jac[(row, axis)] = d / (2.0 * h);
            }
        }
        jac
    }

    /// Numeric Jacobian of the predicted components w.r.t. the UE
    /// parameters (x, y, clock_bias, orientation).
    fn ue_jacobian(&self, kind: FeatureKind, fpos: &Point2, ue: &UEState) -> DMatrix<f64> {
        let k = self.comps.len();
        let mut jac = DMatrix::zeros(k, 4);
        let h = 1e-7;
        let mut plus = vec![0.0; k];
        let mut minus = vec![0.0; k];
        let perturb = |base: &UEState, col: usize, delta: f64| -> UEState {
            let mut u = *base;
            match col {
                0 => u.position.x += delta,
                1 => u.position.y += delta,
                2 => u.clock_bias += delta,
                _ => u.orientation = wrap_angle(u.orientation + delta),
            }
            u
        };
        for col in 0..4 {
            self.predict_comps(kind, fpos, &perturb(ue, col, h), &mut plus);
            self.predict_comps(kind, fpos, &perturb(ue, col, -h), &mut minus);
            for row in 0..k {
                let mut d = plus[row] - minus[row];
                if matches!(self.comps[row], Comp::Aoa | Comp::Aod) {
                    d = wrap_angle(d);
                }
                jac[(row, col)] = d / (2.0 * h);
            }
        }
        jac
    }

    fn meas_cov(&self) -> DMatrix<f64> {
        let k = self.comps.len();
        let mut r = DMatrix::zeros(k, k);
        for (i, c) in self.comps.iter().enumerate() {
            r[(i, i)] = self.sigma(*c).powi(2);
        }
        r
    }

    /// Uniform density of a clutter or new-feature measurement over the
    /// observation window.
    fn uniform_density(&self, toa_window: f64) -> f64 {
        let mut d = 1.0;
        for c in &self.comps {
            d *= match c {
                Comp::Aoa | Comp::Aod => 1.0 / (2.0 * std::f64::consts::PI),
                Comp::Toa => 1.0 / toa_window.max(1e-12),
            };
        }
        d
    }

    /// Predicted received power for the field-of-view test.
    fn predicted_rsrp(&self, f: &Feature, ue: &Point2) -> f64 {
        let pa = self.pa_mean();
        match f.kind {
            FeatureKind::Pa => self.noise.tx_power_db - fspl_db((f.mean - ue).norm()),
            FeatureKind::Va => {
                self.noise.tx_power_db
                    - fspl_db((f.mean - ue).norm())
                    - self.noise.specular_loss_db
            }
            FeatureKind::Scatterer => {
                let pa = pa.unwrap_or(f.mean);
                let d = (f.mean - pa).norm() + (ue - f.mean).norm();
                self.noise.tx_power_db - fspl_db(d) - self.noise.scatter_loss_db
            }
        }
    }

    fn in_fov(&self, f: &Feature, ue: &Point2) -> bool {
        self.predicted_rsrp(f, ue) > self.noise.noise_floor_db + 3.0
    }

    /// Weighted-mean UE state (circular mean for orientation).
    pub fn mean_state(&self) -> UEState {
        let mut pos = Vector2::zeros();
        let mut vel = Vector2::zeros();
        let mut cb = 0.0;
        let (mut sin_o, mut cos_o) = (0.0, 0.0);
        for p in &self.particles {
            pos += p.weight * p.state.position.coords;
            vel += p.weight * p.state.velocity;
            cb += p.weight * p.state.clock_bias;
            sin_o += p.weight * p.state.orientation.sin();
            cos_o += p.weight * p.state.orientation.cos();
        }
        UEState {
            position: Point2::from(pos),
            velocity: vel,
            clock_bias: cb,
            orientation: sin_o.atan2(cos_o),
        }
    }

    /// Weighted sample covariance of (x, y, clock_bias, orientation).
    fn state_cov(&self, mean: &UEState) -> DMatrix<f64> {
        let mut cov = DMatrix::zeros(4, 4);
        for p in &self.particles {
            let d = DVector::from_vec(vec![
                p.state.position.x - mean.position.x,
                p.state.position.y - mean.position.y,
                p.state.clock_bias - mean.clock_bias,
                wrap_angle(p.state.orientation - mean.orientation),
            ]);
            cov += p.weight * &d * d.transpose();
        }
        // per-unit floors: meters, seconds, radians
        let floor = [1e-12, 1e-12, 1e-26, 1e-12];
        for i in 0..4 {
            cov[(i, i)] += floor[i];
        }
        cov
    }

    /// Weighted sample covariance of the UE position alone.
    pub fn position_covariance(&self) -> Matrix2<f64> {
        let mean = self.mean_state();
        let full = self.state_cov(&mean);
        Matrix2::new(full[(0, 0)], full[(0, 1)], full[(1, 0)], full[(1, 1)])
    }

    /// Constant-velocity prediction with Gaussian acceleration noise and
    /// random-walk bias states. An IMU displacement control, when given,
    /// replaces the velocity integration.
    pub fn predict(&mut self, dt: f64, control: Option<Vector2<f64>>) {
        assert!(dt > 0.0, "predict requires dt > 0");
        let mut rng = stream(self.master_seed, self.ue_id, self.epoch, StreamTag::Predict);
        let draw = |rng: &mut rand_chacha::ChaCha8Rng, std: f64| -> f64 {
            if std > 0.0 {
                Normal::new(0.0, std).unwrap().sample(rng)
            } else {
                let _ = rng.random::<f64>();
                0.0
            }
        };
        for p in &mut self.particles {
            let ax = draw(&mut rng, self.cfg.accel_noise);
            let ay = draw(&mut rng, self.cfg.accel_noise);
            let accel = Vector2::new(ax, ay);
            match control {
                Some(d) => {
                    let step = d + 0.5 * accel * dt * dt;
                    p.state.position += step;
                    p.state.velocity = step / dt;
                }
                None => {
                    p.state.position += p.state.velocity * dt + 0.5 * accel * dt * dt;
                    p.state.velocity += accel * dt;
                }
            }
            p.state.clock_bias += draw(&mut rng, self.cfg.clock_bias_walk) * dt.sqrt();
            p.state.orientation = wrap_angle(
                p.state.orientation + draw(&mut rng, self.cfg.orientation_walk) * dt.sqrt(),
            );
        }
    }

    /// Soft association of measurements to features: per-measurement
    /// probability rows over {gated features, clutter, new feature} with
    /// the one-to-one constraint enforced by message passing.
    pub fn associate(&self, measurements: &[Measurement], toa_window: f64) -> Association {
        let mean = self.mean_state();
        let p_ue = self.state_cov(&mean);
        let r = self.meas_cov();
        let k = self.comps.len();
        let kappa = (self.noise.clutter_rate + self.cfg.birth_rate).max(1e-12)
            * self.uniform_density(toa_window);

        let mut gated: Vec<Vec<usize>> = Vec::with_capacity(measurements.len());
        let mut ctx: Vec<Vec<GaussCtx>> = Vec::with_capacity(measurements.len());
        let mut psi: Vec<Vec<f64>> = Vec::with_capacity(measurements.len());
        let n_feat = self.features.len();
        let mut pred = vec![0.0; k];
        let mut resid = vec![0.0; k];
        for m in measurements {
            let z = self.z_of(m);
            let mut g = Vec::new();
            let mut cx = Vec::new();
            let mut row = vec![0.0; n_feat];
            for (fi, f) in self.features.iter().enumerate() {
                if !self.in_fov(f, &mean.position) {
                    continue;
                }
                let jac = self.feature_jacobian(f.kind, &f.mean, &mean);
                // tight innovation covariance, conditioned on the UE state
                let s = &jac * f.covariance * jac.transpose() + &r;
                if s.clone().cholesky().is_none() {
                    continue;
                }
                // gating covariance includes the particle-cloud spread
                let ju = self.ue_jacobian(f.kind, &f.mean, &mean);
                let s_gate = &s + &ju * &p_ue * ju.transpose();
                let Some(chol_g) = s_gate.clone().cholesky() else {
                    continue;
                };
                let sg_inv = chol_g.inverse();
                self.predict_comps(f.kind, &f.mean, &mean, &mut pred);
                self.residual(&z, &pred, &mut resid);
                let rv = DVector::from_row_slice(&resid);
                let maha2 = (rv.transpose() * &sg_inv * &rv)[(0, 0)];
                if maha2 > self.cfg.gate {
                    continue;
                }
                let norm_g =
                    1.0 / ((2.0 * std::f64::consts::PI).powi(k as i32) * chol_g.determinant())
                        .sqrt();
                let lik = norm_g * (-0.5 * maha2).exp();
                row[fi] = self.noise.detection_prob.max(1e-3) * f.existence * lik / kappa;
                // particle-weighting kernel: tempered with a fraction of
                // the cloud covariance so reweighting stays informative
                // while the cloud contracts across epochs
                let s_w = &s + 0.25 * (&ju * &p_ue * ju.transpose());
                let Some(chol_w) = s_w.cholesky() else {
                    continue;
                };
                let norm = 1.0
                    / ((2.0 * std::f64::consts::PI).powi(k as i32) * chol_w.determinant()).sqrt();
                let s_inv = chol_w.inverse();
                g.push(fi);
                cx.push(GaussCtx { s_inv, norm });
            }
            psi.push(row);
            gated.push(g);
            ctx.push(cx);
        }
        let bp = assoc::bp_association(&psi, 20, 1e-6);
        // split the miss mass into clutter and birth in intensity ratio,
        // compacting each row to its gated entries
        let lc = self.noise.clutter_rate;
        let lb = self.cfg.birth_rate;
        let birth_frac = if lc + lb > 0.0 { lb / (lc + lb) } else { 0.0 };
        let rows = bp
            .iter()
            .zip(&gated)
            .map(|(full, g)| {
                let miss = *full.last().unwrap();
                let mut row: Vec<f64> = g.iter().map(|&fi| full[fi]).collect();
                row.push(miss * (1.0 - birth_frac));
                row.push(miss * birth_frac);
                row
            })
            .collect();
        Association { gated, rows, ctx }
    }

    /// Measurement update: particle reweighting and resampling, feature
    /// refinement by soft EKF updates, existence update, and the reported
    /// UE estimate (weighted mean polished by a Gauss-Newton MAP step).
    pub fn update(
        &mut self,
        measurements: &[Measurement],
        assoc: &Association,
        toa_window: f64,
    ) -> (UEState, f64) {
        let k = self.comps.len();
        let kappa = (self.noise.clutter_rate + self.cfg.birth_rate).max(1e-12)
            * self.uniform_density(toa_window);
        let mut pred = vec![0.0; k];
        let mut resid = vec![0.0; k];

        // ---- particle reweighting -------------------------------------
        let mut log_lik_sum = 0.0;
        if !measurements.is_empty() {
            let zs: Vec<Vec<f64>> = measurements.iter().map(|m| self.z_of(m)).collect();
            let mut new_weights: Vec<f64> = Vec::with_capacity(self.particles.len());
            for p in &self.particles {
                let mut log_l = 0.0;
                for (mi, _z) in zs.iter().enumerate() {
                    let mut acc = kappa;
                    for (gi, &fi) in assoc.gated[mi].iter().enumerate() {
                        let f = &self.features[fi];
                        let cx = &assoc.ctx[mi][gi];
                        self.predict_comps(f.kind, &f.mean, &p.state, &mut pred);
                        self.residual(&zs[mi], &pred, &mut resid);
                        let rv = DVector::from_row_slice(&resid);
                        let m2 = (rv.transpose() * &cx.s_inv * &rv)[(0, 0)];
                        acc += self.noise.detection_prob.max(1e-3)
                            * f.existence
                            * cx.norm
                            * (-0.5 * m2).exp();
                    }
                    log_l += acc.ln();
                }
                new_weights.push(p.weight.ln() + log_l);
            }
            // normalize in log space
            let max_lw = new_weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if max_lw.is_finite() {
                let mut total = 0.0;
                for (p, lw) in self.particles.iter_mut().zip(&new_weights) {
                    p.weight = (lw - max_lw).exp();
                    total += p.weight;
                }
                if total > 0.0 && total.is_finite() {
                    for p in &mut self.particles {
                        p.weight /= total;
                    }
                    log_lik_sum = max_lw + total.ln();
                } else {
                    self.reset_weights();
                }
            } else {
                self.reset_weights();
            }
        }

        // ---- resample when degenerate ----------------------------------
        let ess: f64 = 1.0 / self.particles.iter().map(|p| p.weight * p.weight).sum::<f64>();
        if ess < self.particles.len() as f64 / 2.0 {
            self.systematic_resample();
            self.diagnostics.resamples += 1;
        }

        // ---- UE estimate: weighted mean + MAP polish -------------------
        let mean = self.mean_state();
        let polished = self.polish_estimate(&mean, measurements, assoc);

        // ---- feature refinement (soft EKF) ------------------------------
        let det_floor = 0.01;
        for (mi, m) in measurements.iter().enumerate() {
            let z = self.z_of(m);
            for (gi, &fi) in assoc.gated[mi].iter().enumerate() {
                let p_assoc = assoc.rows[mi][gi];
                if p_assoc < det_floor {
                    continue;
                }
                let (kind, fmean, fcov) = {
                    let f = &self.features[fi];
                    (f.kind, f.mean, f.covariance)
                };
                let jac = self.feature_jacobian(kind, &fmean, &polished);
                let mut r_eff = self.meas_cov();
                r_eff /= p_assoc;
                let s = &jac * fcov * jac.transpose() + r_eff;
                let Some(chol) = s.cholesky() else { continue };
                let s_inv = chol.inverse();
                self.predict_comps(kind, &fmean, &polished, &mut pred);
                self.residual(&z, &pred, &mut resid);
                let rv = DVector::from_row_slice(&resid);
                let gain = fcov * jac.transpose() * &s_inv;
                let delta = &gain * &rv;
                let ident = Matrix2::identity();
                let gh = &gain * &jac;
                let gh2 = Matrix2::new(gh[(0, 0)], gh[(0, 1)], gh[(1, 0)], gh[(1, 1)]);
                let new_cov = (ident - gh2) * fcov;
                let f = &mut self.features[fi];
                f.mean += Vector2::new(delta[(0, 0)], delta[(1, 0)]);
                // symmetrize
                f.covariance = (new_cov + new_cov.transpose()) / 2.0;
                f.last_seen = self.epoch;
            }
        }

        // ---- existence update -------------------------------------------
        let pd = self.noise.detection_prob.clamp(0.05, 0.999);
        let visible: Vec<bool> = self
            .features
            .iter()
            .map(|f| self.in_fov(f, &polished.position))
            .collect();
        for (fi, f) in self.features.iter_mut().enumerate() {
            if f.kind == FeatureKind::Pa {
                continue; // PA existence pinned
            }
            let detect_mass: f64 = (0..measurements.len())
                .map(|mi| {
                    assoc.gated[mi]
                        .iter()
                        .position(|&g| g == fi)
                        .map_or(0.0, |gi| assoc.rows[mi][gi])
                })
                .sum();
            if !visible[fi] {
                continue; // no information outside the field of view
            }
            if detect_mass > 0.5 {
                // Bernoulli posterior after a detection
                f.existence = (f.existence / (f.existence + (1.0 - f.existence) * (1.0 - pd)))
                    .clamp(0.0, 1.0);
                f.locally_confirmed = true;
            } else if f.locally_confirmed {
                // downloaded features the engine has never detected carry
                // no local negative evidence (they may be occluded here)
                f.existence *= self.cfg.existence_decay;
            }
        }

        (polished, log_lik_sum)
    }

    fn reset_weights(&mut self) {
        let w = 1.0 / self.particles.len() as f64;
        for p in &mut self.particles {
            p.weight = w;
        }
        self.diagnostics.weight_resets += 1;
    }

    fn systematic_resample(&mut self) {
        let n = self.particles.len();
        let mut rng = stream(self.master_seed, self.ue_id, self.epoch, StreamTag::Resample);
        let u0: f64 = rng.random::<f64>() / n as f64;
        let mut cum = 0.0;
        let mut idx = 0usize;
        let mut out = Vec::with_capacity(n);
        let weights: Vec<f64> = self.particles.iter().map(|p| p.weight).collect();
        for i in 0..n {
            let target = u0 + i as f64 / n as f64;
            while cum + weights[idx] < target && idx < n - 1 {
                cum += weights[idx];
                idx += 1;
            }
            let mut p = self.particles[idx];
            p.weight = 1.0 / n as f64;
            out.push(p);
        }
        self.particles = out;
    }

    /// Gauss-Newton MAP refinement of (x, y, clock_bias, orientation)
    /// around the particle mean, using confidently associated
    /// measurements. Falls back to the mean when the step does not reduce
    /// the cost.
    fn polish_estimate(
        &self,
        mean: &UEState,
        measurements: &[Measurement],
        assoc: &Association,
    ) -> UEState {
        // collect confident pairs
        let mut pairs: Vec<(usize, usize)> = Vec::new(); // (measurement, feature)
        for (mi, g) in assoc.gated.iter().enumerate() {
            for (gi, &fi) in g.iter().enumerate() {
                if assoc.rows[mi][gi] > 0.5 {
                    pairs.push((mi, fi));
                }
            }
        }
        if pairs.is_empty() {
            return *mean;
        }
        let k = self.comps.len();
        let r = self.meas_cov();
        let prior_cov = self.state_cov(mean);
        let Some(prior_info) = prior_cov.clone().cholesky().map(|c| c.inverse()) else {
            return *mean;
        };

        let estimate_bias = self.cfg.init_clock_bias_std > 0.0 || self.cfg.clock_bias_walk > 0.0;
        let estimate_orient =
            self.cfg.init_orientation_std > 0.0 || self.cfg.orientation_walk > 0.0;

        let state_of = |v: &DVector<f64>| UEState {
            position: Point2::new(v[0], v[1]),
            velocity: mean.velocity,
            clock_bias: v[2],
            orientation: wrap_angle(v[3]),
        };
        let mut x = DVector::from_vec(vec![
            mean.position.x,
            mean.position.y,
            mean.clock_bias,
            mean.orientation,
        ]);
        let x0 = x.clone();

        let cost = |v: &DVector<f64>| -> f64 {
            let ue = state_of(v);
            let mut c = 0.0;
            let mut pred = vec![0.0; k];
            let mut resid = vec![0.0; k];
            for &(mi, fi) in &pairs {
                let f = &self.features[fi];
                let z = self.z_of(&measurements[mi]);
                self.predict_comps(f.kind, &f.mean, &ue, &mut pred);
                self.residual(&z, &pred, &mut resid);
                let jac = self.feature_jacobian(f.kind, &f.mean, &ue);
                let s = &jac * f.covariance * jac.transpose() + &r;
                if let Some(chol) = s.cholesky() {
                    let rv = DVector::from_row_slice(&resid);
                    c += (rv.transpose() * chol.inverse() * rv)[(0, 0)];
                }
            }
            let mut d = v - &x0;
            d[3] = wrap_angle(d[3]);
            c + (d.transpose() * &prior_info * d)[(0, 0)]
        };

        let mut current_cost = cost(&x);
        for _ in 0..10 {
            // assemble normal equations
            let mut hmat = prior_info.clone();
            let mut grad = {
                let mut d = &x - &x0;
                d[3] = wrap_angle(d[3]);
                &prior_info * d
            };
            let ue = state_of(&x);
            let mut pred = vec![0.0; k];
            let mut resid = vec![0.0; k];
            for &(mi, fi) in &pairs {
                let f = &self.features[fi];
                let z = self.z_of(&measurements[mi]);
                self.predict_comps(f.kind, &f.mean, &ue, &mut pred);
                self.residual(&z, &pred, &mut resid);
                let jf = self.feature_jacobian(f.kind, &f.mean, &ue);
                let s = &jf * f.covariance * jf.transpose() + &r;
                let Some(chol) = s.cholesky() else { continue };
                let s_inv = chol.inverse();
                // numeric Jacobian of the prediction w.r.t. the UE params
                let mut ju = DMatrix::zeros(k, 4);
                let h = 1e-7;
                let mut plus = vec![0.0; k];
                let mut minus = vec![0.0; k];
                for col in 0..4 {
                    if (col == 2 && !estimate_bias) || (col == 3 && !estimate_orient) {
                        continue;
                    }
                    let mut xp = x.clone();
                    xp[col] += h;
                    self.predict_comps(f.kind, &f.mean, &state_of(&xp), &mut plus);
                    xp[col] -= 2.0 * h;
                    self.predict_comps(f.kind, &f.mean, &state_of(&xp), &mut minus);
                    for row in 0..k {
                        let mut d = plus[row] - minus[row];
                        if matches!(self.comps[row], Comp::Aoa | Comp::Aod) {
                            d = wrap_angle(d);
                        }
                        ju[(row, col)] = d / (2.0 * h);
                    }
                }
                let rv = DVector::from_row_slice(&resid);
                hmat += ju.transpose() * &s_inv * &ju;
                grad -= ju.transpose() * &s_inv * rv;
            }
            // Levenberg damping
            for i in 0..4 {
                hmat[(i, i)] += 1e-9;
            }
            let Some(step) = hmat.cholesky().map(|c| c.solve(&grad)) else {
                break;
            };
            let xn = &x - &step;
            let new_cost = cost(&xn);
            if !new_cost.is_finite() || new_cost > current_cost {
                break;
            }
            let done = step.norm() < 1e-12;
            x = xn;
            current_cost = new_cost;
            if done {
                break;
            }
        }
        state_of(&x)
    }

    /// Spawn features from measurements with high new-feature mass; prune
    /// features whose existence fell below the threshold.
    pub fn birth_and_prune(
        &mut self,
        measurements: &[Measurement],
        assoc: &Association,
        ue_ref: &UEState,
    ) {
        let has_range = self.comps.contains(&Comp::Toa);
        for (mi, m) in measurements.iter().enumerate() {
            if assoc.birth_prob(mi) <= self.cfg.birth_threshold {
                continue;
            }
            let global_bearing = wrap_angle(m.aoa + ue_ref.orientation);
            if has_range {
                let range = SPEED_OF_LIGHT * (m.toa - ue_ref.clock_bias);
                if !(0.1..1e5).contains(&range) {
                    continue;
                }
                let dir = Vector2::new(global_bearing.cos(), global_bearing.sin());
                let pos = ue_ref.position + range * dir;
                let var_r = (SPEED_OF_LIGHT * self.sigma(Comp::Toa)).powi(2).max(1e-8);
                let var_t = (range * self.sigma(Comp::Aoa)).powi(2).max(1e-8);
                let rot = nalgebra::Rotation2::new(global_bearing);
                let cov = rot.matrix()
                    * Matrix2::from_diagonal(&Vector2::new(var_r, var_t))
                    * rot.matrix().transpose();
                self.push_feature(FeatureKind::Va, pos, cov, self.cfg.birth_existence);
            } else {
                // bearing-only: triangulate against an earlier sighting
                let mut spawned = false;
                for pb in &self.pending_births {
                    if self.epoch <= pb.epoch || self.epoch - pb.epoch > 5 {
                        continue;
                    }
                    let baseline = (ue_ref.position - pb.origin).norm();
                    let cross_angle = wrap_angle(global_bearing - pb.bearing).abs();
                    if baseline < 0.2 || cross_angle < 5f64.to_radians() {
                        continue;
                    }
                    if let Some(pos) =
                        intersect_rays(&pb.origin, pb.bearing, &ue_ref.position, global_bearing)
                    {
                        let d = (pos - ue_ref.position).norm();
                        let var = (d * self.sigma(Comp::Aoa)).powi(2).max(1e-6)
                            / cross_angle.sin().powi(2).max(1e-2);
                        self.push_feature(
                            FeatureKind::Va,
                            pos,
                            Matrix2::identity() * var,
                            self.cfg.birth_existence,
                        );
                        spawned = true;
                        break;
                    }
                }
                if !spawned {
                    self.pending_births.push(PendingBirth {
                        epoch: self.epoch,
                        origin: ue_ref.position,
                        bearing: global_bearing,
                    });
                }
            }
        }
        let horizon = self.epoch;
        self.pending_births
            .retain(|pb| horizon.saturating_sub(pb.epoch) <= 5);
        let prune = self.cfg.prune_threshold;
        self.features
            .retain(|f| f.kind == FeatureKind::Pa || f.existence >= prune);
    }

    /// One full SLAM epoch: predict, associate, update, birth/prune.
    pub fn step(
        &mut self,
        dt: f64,
        measurements: &[Measurement],
        toa_window: f64,
        control: Option<Vector2<f64>>,
    ) -> EpochSummary {
        self.epoch += 1;
        self.predict(dt, control);
        let assoc = self.associate(measurements, toa_window);
        let (estimate, log_lik) = self.update(measurements, &assoc, toa_window);
        self.birth_and_prune(measurements, &assoc, &estimate);
        self.last_estimate = estimate;
        let cov = self.state_cov(&estimate);
        EpochSummary {
            epoch: self.epoch,
            ue_estimate: estimate,
            ue_cov_trace: cov[(0, 0)] + cov[(1, 1)],
            feature_count: self.features.len(),
            log_likelihood: log_lik,
        }
    }

    pub fn last_estimate(&self) -> UEState {
        self.last_estimate
    }

    /// Feature means with existence above the mapping threshold.
    pub fn map_points(&self) -> Vec<Point2> {
        self.features
            .iter()
            .filter(|f| f.existence > self.cfg.map_existence)
            .map(|f| f.mean)
            .collect()
    }
}

/// Intersection of two bearing rays, when it lies forward along both.
fn intersect_rays(o1: &Point2, b1: f64, o2: &Point2, b2: f64) -> Option<Point2> {
    let d1 = Vector2::new(b1.cos(), b1.sin());
    let d2 = Vector2::new(b2.cos(), b2.sin());
    let denom = d1.x * d2.y - d1.y * d2.x;
    if denom.abs() < 1e-9 {
        return None;
    }
    let o = o2 - o1;
    let t1 = (o.x * d2.y - o.y * d2.x) / denom;
    let t2 = (o.x * d1.y - o.y * d1.x) / denom;
    if t1 > 0.1 && t2 > 0.1 {
        Some(o1 + t1 * d1)
    } else {
        None
    }
}
