//! Scenario files: human-readable TOML describing the environment, UE
//! tracks, noise, SLAM configuration and schedule. Angles are degrees and
//! times nanoseconds in files; everything is radians/seconds internally.

use serde::{Deserialize, Serialize};

use crate::crowd::FrameSchedule;
use crate::error::{Error, Result};
use crate::geometry::{AaRect, Environment, Point2, WallSegment};
use crate::measurement::{BeamCodebook, NoiseProfile, UEState};
use crate::slam::{SlamConfig, SlamMode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioFile {
    pub name: String,
    pub horizon: u64,
    #[serde(default = "default_seeds")]
    pub seeds: u64,
    #[serde(default = "default_dt")]
    pub dt: f64,
    pub environment: EnvFile,
    #[serde(default)]
    pub noise: NoiseFile,
    #[serde(default)]
    pub slam: SlamFile,
    #[serde(default)]
    pub schedule: ScheduleFile,
    #[serde(default)]
    pub codebook: CodebookFile,
    pub ues: Vec<UeFile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub blockage: Option<BlockageFile>,
}

fn default_seeds() -> u64 {
    50
}
fn default_dt() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvFile {
    pub bounds_min: [f64; 2],
    pub bounds_max: [f64; 2],
    pub walls: Vec<WallFile>,
    pub pas: Vec<AnchorFile>,
    #[serde(default)]
    pub scatterers: Vec<AnchorFile>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WallFile {
    pub id: String,
    pub a: [f64; 2],
    pub b: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorFile {
    pub id: String,
    pub position: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseFile {
    pub sigma_aoa_deg: f64,
    pub sigma_aod_deg: f64,
    pub sigma_toa_ns: f64,
    pub sigma_rsrp_db: f64,
    pub detection_prob: f64,
    pub clutter_rate: f64,
    pub tx_power_db: f64,
    pub noise_floor_db: f64,
    pub specular_loss_db: f64,
    pub scatter_loss_db: f64,
}

impl Default for NoiseFile {
    fn default() -> Self {
        Self {
            sigma_aoa_deg: 2.0,
            sigma_aod_deg: 2.0,
            sigma_toa_ns: 1.0,
            sigma_rsrp_db: 1.0,
            detection_prob: 0.95,
            clutter_rate: 1.0,
            tx_power_db: 30.0,
            noise_floor_db: -90.0,
            specular_loss_db: 10.0,
            scatter_loss_db: 20.0,
        }
    }
}

impl NoiseFile {
    pub fn build(&self) -> NoiseProfile {
        NoiseProfile {
            sigma_aoa: self.sigma_aoa_deg.to_radians(),
            sigma_aod: self.sigma_aod_deg.to_radians(),
            sigma_toa: self.sigma_toa_ns * 1e-9,
            sigma_rsrp: self.sigma_rsrp_db,
            detection_prob: self.detection_prob,
            clutter_rate: self.clutter_rate,
            tx_power_db: self.tx_power_db,
            noise_floor_db: self.noise_floor_db,
            specular_loss_db: self.specular_loss_db,
            scatter_loss_db: self.scatter_loss_db,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SlamFile {
    pub n_particles: usize,
    pub mode: SlamMode,
    pub use_aoa: bool,
    pub use_toa: bool,
    pub use_aod: bool,
    pub accel_noise: f64,
    pub clock_bias_walk_ns: f64,
    pub orientation_walk_deg: f64,
    pub init_pos_std: f64,
    pub init_vel_std: f64,
    pub init_clock_bias_std_ns: f64,
    pub init_orientation_std_deg: f64,
    pub gate: f64,
    pub birth_threshold: f64,
    pub prune_threshold: f64,
    pub existence_decay: f64,
    pub birth_rate: f64,
}

impl Default for SlamFile {
    fn default() -> Self {
        let c = SlamConfig::default();
        Self {
            n_particles: c.n_particles,
            mode: c.mode,
            use_aoa: c.use_aoa,
            use_toa: c.use_toa,
            use_aod: c.use_aod,
            accel_noise: c.accel_noise,
            clock_bias_walk_ns: 0.0,
            orientation_walk_deg: 0.0,
            init_pos_std: c.init_pos_std,
            init_vel_std: c.init_vel_std,
            init_clock_bias_std_ns: 0.0,
            init_orientation_std_deg: 0.0,
            gate: c.gate,
            birth_threshold: c.birth_threshold,
            prune_threshold: c.prune_threshold,
            existence_decay: c.existence_decay,
            birth_rate: c.birth_rate,
        }
    }
}

impl SlamFile {
    pub fn build(&self) -> SlamConfig {
        SlamConfig {
            n_particles: self.n_particles,
            mode: self.mode,
            use_aoa: self.use_aoa,
            use_toa: self.use_toa,
            use_aod: self.use_aod,
            accel_noise: self.accel_noise,
            clock_bias_walk: self.clock_bias_walk_ns * 1e-9,
            orientation_walk: self.orientation_walk_deg.to_radians(),
            init_pos_std: self.init_pos_std,
            init_vel_std: self.init_vel_std,
            init_clock_bias_std: self.init_clock_bias_std_ns * 1e-9,
            init_orientation_std: self.init_orientation_std_deg.to_radians(),
            gate: self.gate,
            birth_threshold: self.birth_threshold,
            prune_threshold: self.prune_threshold,
            existence_decay: self.existence_decay,
            birth_rate: self.birth_rate,
            ..SlamConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleFile {
    pub upload_period: u64,
    pub download_on_entry: bool,
}

impl Default for ScheduleFile {
    fn default() -> Self {
        Self { upload_period: 5, download_on_entry: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CodebookFile {
    pub n_beams: usize,
    pub sector_deg: f64,
    pub beamwidth_deg: f64,
}

impl Default for CodebookFile {
    fn default() -> Self {
        Self { n_beams: 8, sector_deg: 100.0, beamwidth_deg: 12.5 }
    }
}

impl CodebookFile {
    pub fn build(&self) -> Result<BeamCodebook> {
        BeamCodebook::uniform(
            self.n_beams,
            self.sector_deg.to_radians(),
            self.beamwidth_deg.to_radians(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UeFile {
    pub id: u64,
    #[serde(default = "default_entering")]
    pub entering: u64,
    #[serde(default)]
    pub clock_bias_ns: f64,
    #[serde(default)]
    pub orientation_deg: f64,
    pub track: TrackFile,
}

fn default_entering() -> u64 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrackFile {
    /// Polyline resampled to one point per epoch (evenly by arc length)
    /// unless the point count already equals horizon + 1.
    Waypoints { points: Vec<[f64; 2]> },
    /// Circular loop: one lap every `epochs_per_lap` epochs.
    Loop {
        center: [f64; 2],
        radius: f64,
        epochs_per_lap: f64,
        #[serde(default)]
        phase_deg: f64,
    },
}

/// Scripted LOS blockage for the beam-tracking preset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockageFile {
    pub start_epoch: u64,
    pub duration: u64,
    pub loss_db: f64,
}

/// Everything the harness needs, in internal units.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub horizon: u64,
    pub seeds: u64,
    pub dt: f64,
    pub environment: Environment,
    pub noise: NoiseProfile,
    pub slam: SlamConfig,
    pub schedule: FrameSchedule,
    pub codebook: BeamCodebook,
    /// tracks[u][e] for e in 0..=horizon; ue_id = u + 1.
    pub tracks: Vec<Vec<UEState>>,
    pub blockage: Option<BlockageFile>,
    /// The exact text the scenario was parsed from (config echo).
    pub source: String,
}

impl ScenarioFile {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(Error::Parse)
    }

    pub fn emit(&self) -> String {
        toml::to_string_pretty(self).expect("scenario serializes")
    }

    /// Collect every violation; an empty list means the file is valid.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.horizon < 1 {
            v.push("horizon must be >= 1".into());
        }
        if self.seeds < 1 {
            v.push("seeds must be >= 1".into());
        }
        if self.dt <= 0.0 {
            v.push("dt must be positive".into());
        }
        let (bmin, bmax) = (self.environment.bounds_min, self.environment.bounds_max);
        if bmin[0] >= bmax[0] || bmin[1] >= bmax[1] {
            v.push("environment bounds_min must be strictly below bounds_max".into());
        }
        let mut wall_ids: Vec<&str> = self.environment.walls.iter().map(|w| w.id.as_str()).collect();
        wall_ids.sort_unstable();
        wall_ids.dedup();
        if wall_ids.len() != self.environment.walls.len() {
            v.push("duplicate wall ids".into());
        }
        for w in &self.environment.walls {
            let dx = w.a[0] - w.b[0];
            let dy = w.a[1] - w.b[1];
            if (dx * dx + dy * dy).sqrt() <= 1e-9 {
                v.push(format!("wall {} is degenerate", w.id));
            }
        }
        if self.environment.pas.is_empty() {
            v.push("environment needs at least one PA".into());
        }
        let inside = |p: &[f64; 2]| {
            p[0] >= bmin[0] && p[0] <= bmax[0] && p[1] >= bmin[1] && p[1] <= bmax[1]
        };
        for a in self.environment.pas.iter().chain(&self.environment.scatterers) {
            if !inside(&a.position) {
                v.push(format!("anchor {} outside bounds", a.id));
            }
        }
        if let Err(e) = self.noise.build().validate() {
            match e {
                Error::Validation(list) => v.extend(list),
                other => v.push(other.to_string()),
            }
        }
        v.extend(self.slam.build().validate());
        if self.codebook.n_beams < 2 || self.codebook.sector_deg <= 0.0 || self.codebook.beamwidth_deg <= 0.0 {
            v.push("codebook needs >= 2 beams and positive sector/beamwidth".into());
        }
        if self.schedule.upload_period == 0 {
            v.push("schedule.upload_period must be >= 1".into());
        }
        if self.ues.is_empty() {
            v.push("scenario needs at least one UE".into());
        }
        let mut ids: Vec<u64> = self.ues.iter().map(|u| u.id).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != self.ues.len() {
            v.push("duplicate UE ids".into());
        }
        for u in &self.ues {
            if u.entering < 1 || u.entering > self.horizon {
                v.push(format!("ue {} entering time {} outside 1..={}", u.id, u.entering, self.horizon));
            }
            match &u.track {
                TrackFile::Waypoints { points } => {
                    if points.len() < 2 {
                        v.push(format!("ue {} waypoint track needs >= 2 points", u.id));
                    }
                    for (e, p) in points.iter().enumerate() {
                        if !inside(p) {
                            v.push(format!("ue {} track point {} outside bounds", u.id, e));
                        }
                    }
                }
                TrackFile::Loop { center, radius, epochs_per_lap, .. } => {
                    if *radius <= 0.0 || *epochs_per_lap <= 0.0 {
                        v.push(format!("ue {} loop needs positive radius and epochs_per_lap", u.id));
                    }
                    let extremes = [
                        [center[0] - radius, center[1]],
                        [center[0] + radius, center[1]],
                        [center[0], center[1] - radius],
                        [center[0], center[1] + radius],
                    ];
                    if extremes.iter().any(|p| !inside(p)) {
                        v.push(format!("ue {} loop leaves bounds", u.id));
                    }
                }
            }
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() { Ok(()) } else { Err(Error::Validation(v)) }
    }

    /// Convert to internal units and sampled tracks. `source` is kept
    /// verbatim for the config echo.
    pub fn build(&self, source: &str) -> Result<Scenario> {
        self.validate()?;
        let walls = self
            .environment
            .walls
            .iter()
            .map(|w| {
                WallSegment::new(
                    w.id.clone(),
                    Point2::new(w.a[0], w.a[1]),
                    Point2::new(w.b[0], w.b[1]),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let environment = Environment {
            walls,
            pas: self
                .environment
                .pas
                .iter()
                .map(|a| (a.id.clone(), Point2::new(a.position[0], a.position[1])))
                .collect(),
            scatterers: self
                .environment
                .scatterers
                .iter()
                .map(|a| (a.id.clone(), Point2::new(a.position[0], a.position[1])))
                .collect(),
            bounds: AaRect::new(
                Point2::new(self.environment.bounds_min[0], self.environment.bounds_min[1]),
                Point2::new(self.environment.bounds_max[0], self.environment.bounds_max[1]),
            ),
        };
        environment.validate()?;
        let tracks = self
            .ues
            .iter()
            .map(|u| sample_track(u, self.horizon, self.dt))
            .collect::<Result<Vec<_>>>()?;
        Ok(Scenario {
            name: self.name.clone(),
            horizon: self.horizon,
            seeds: self.seeds,
            dt: self.dt,
            environment,
            noise: self.noise.build(),
            slam: self.slam.build(),
            schedule: FrameSchedule {
                entering_time: self.ues.iter().map(|u| u.entering).collect(),
                upload_period: self.schedule.upload_period,
                download_on_entry: self.schedule.download_on_entry,
            },
            codebook: self.codebook.build()?,
            tracks,
            blockage: self.blockage.clone(),
            source: source.to_string(),
        })
    }
}

pub fn load(path: &std::path::Path) -> Result<Scenario> {
    let text = std::fs::read_to_string(path)?;
    let file = ScenarioFile::parse(&text)?;
    file.build(&text)
}

/// One UE state per epoch, 0..=horizon.
fn sample_track(u: &UeFile, horizon: u64, dt: f64) -> Result<Vec<UEState>> {
    let n = (horizon + 1) as usize;
    let clock_bias = u.clock_bias_ns * 1e-9;
    let orientation = u.orientation_deg.to_radians();
    let positions: Vec<Point2> = match &u.track {
        TrackFile::Waypoints { points } => {
            let pts: Vec<Point2> = points.iter().map(|p| Point2::new(p[0], p[1])).collect();
            if pts.len() == n {
                pts
            } else {
                resample_polyline(&pts, n)
            }
        }
        TrackFile::Loop { center, radius, epochs_per_lap, phase_deg } => {
            let c = Point2::new(center[0], center[1]);
            let w = 2.0 * std::f64::consts::PI / epochs_per_lap;
            let phase = phase_deg.to_radians();
            (0..n)
                .map(|e| {
                    let th = phase + w * e as f64;
                    Point2::new(c.x + radius * th.cos(), c.y + radius * th.sin())
                })
                .collect()
        }
    };
    let mut out = Vec::with_capacity(n);
    for e in 0..n {
        // forward difference, repeating the last step
        let (a, b) = if e + 1 < n { (e, e + 1) } else { (e - 1, e) };
        let velocity = (positions[b] - positions[a]) / dt;
        out.push(UEState { position: positions[e], velocity, clock_bias, orientation });
    }
    Ok(out)
}

/// Even arc-length resampling of a polyline to exactly `n` points.
fn resample_polyline(pts: &[Point2], n: usize) -> Vec<Point2> {
    assert!(pts.len() >= 2 && n >= 2);
    let mut cum = vec![0.0];
    for w in pts.windows(2) {
        cum.push(cum.last().unwrap() + (w[1] - w[0]).norm());
    }
    let total = *cum.last().unwrap();
    (0..n)
        .map(|i| {
            let target = total * i as f64 / (n - 1) as f64;
            let seg = cum.partition_point(|&c| c < target).clamp(1, pts.len() - 1);
            let seg_len = cum[seg] - cum[seg - 1];
            let t = if seg_len > 0.0 { (target - cum[seg - 1]) / seg_len } else { 0.0 };
            pts[seg - 1] + t * (pts[seg] - pts[seg - 1])
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn sample_text() -> String {
        r#"
name = "test"
horizon = 10
seeds = 3

[environment]
bounds_min = [-20.0, -20.0]
bounds_max = [30.0, 30.0]

[[environment.walls]]
id = "south"
a = [0.0, 0.0]
b = [10.0, 0.0]

[[environment.pas]]
id = "pa1"
position = [2.0, 8.0]

[noise]
sigma_aoa_deg = 1.5
detection_prob = 0.9

[slam]
n_particles = 200
init_orientation_std_deg = 90.0

[[ues]]
id = 1
orientation_deg = 45.0
clock_bias_ns = 10.0

[ues.track]
kind = "waypoints"
points = [[3.0, 3.0], [5.0, 4.0]]
"#
        .to_string()
    }

    #[test]
    fn parse_and_build() {
        let text = sample_text();
        let f = ScenarioFile::parse(&text).unwrap();
        let s = f.build(&text).unwrap();
        assert_eq!(s.horizon, 10);
        assert_eq!(s.tracks.len(), 1);
        assert_eq!(s.tracks[0].len(), 11);
        // degree / nanosecond conversions
        assert_relative_eq!(s.noise.sigma_aoa, 1.5f64.to_radians(), epsilon = 1e-12);
        assert_relative_eq!(s.slam.init_orientation_std, std::f64::consts::FRAC_PI_2, epsilon = 1e-12);
        assert_relative_eq!(s.tracks[0][0].orientation, 45f64.to_radians(), epsilon = 1e-12);
        assert_relative_eq!(s.tracks[0][0].clock_bias, 1e-8, epsilon = 1e-20);
        assert_eq!(s.source, text);
    }

    #[test]
    fn round_trip() {
        let f = ScenarioFile::parse(&sample_text()).unwrap();
        let emitted = f.emit();
        let f2 = ScenarioFile::parse(&emitted).unwrap();
        assert_eq!(f, f2);
    }

    #[test]
    fn track_outside_bounds_names_ue_and_epoch() {
        let text = sample_text().replace("[[3.0, 3.0], [5.0, 4.0]]", "[[3.0, 3.0], [500.0, 4.0]]");
        let f = ScenarioFile::parse(&text).unwrap();
        let v = f.violations();
        assert!(v.iter().any(|m| m.contains("ue 1") && m.contains("point 1")), "{v:?}");
    }

    #[test]
    fn negative_noise_std_names_field() {
        let text = sample_text().replace("sigma_aoa_deg = 1.5", "sigma_aoa_deg = -1.5");
        let f = ScenarioFile::parse(&text).unwrap();
        let v = f.violations();
        assert!(v.iter().any(|m| m.contains("sigma_aoa")), "{v:?}");
    }

    #[test]
    fn all_violations_reported_not_just_first() {
        let text = sample_text()
            .replace("sigma_aoa_deg = 1.5", "sigma_aoa_deg = -1.5")
            .replace("horizon = 10", "horizon = 0");
        let f = ScenarioFile::parse(&text).unwrap();
        let v = f.violations();
        assert!(v.len() >= 2, "{v:?}");
    }

    #[test]
    fn loop_track_geometry() {
        let u = UeFile {
            id: 1,
            entering: 1,
            clock_bias_ns: 0.0,
            orientation_deg: 0.0,
            track: TrackFile::Loop {
                center: [5.0, 5.0],
                radius: 2.0,
                epochs_per_lap: 8.0,
                phase_deg: 0.0,
            },
        };
        let t = sample_track(&u, 8, 1.0).unwrap();
        assert_relative_eq!(t[0].position.x, 7.0, epsilon = 1e-12);
        assert_relative_eq!(t[0].position.y, 5.0, epsilon = 1e-12);
        // quarter lap
        assert_relative_eq!(t[2].position.x, 5.0, epsilon = 1e-12);
        assert_relative_eq!(t[2].position.y, 7.0, epsilon = 1e-12);
        // full lap closes
        assert_relative_eq!((t[8].position - t[0].position).norm(), 0.0, epsilon = 1e-9);
        for s in &t {
            assert_relative_eq!((s.position - Point2::new(5.0, 5.0)).norm(), 2.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn waypoint_resampling_even_spacing() {
        let pts = vec![Point2::new(0.0, 0.0), Point2::new(10.0, 0.0)];
        let r = resample_polyline(&pts, 6);
        assert_eq!(r.len(), 6);
        for (i, p) in r.iter().enumerate() {
            assert_relative_eq!(p.x, 2.0 * i as f64, epsilon = 1e-12);
        }
    }
}
