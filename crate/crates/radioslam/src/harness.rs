//! Experiment orchestration: seeded presets, tidy metric emission and the
//! aggregation helpers behind the `metrics` / `plotdata` subcommands.
//!
//! Every preset is a pure function of (scenario, seed); seeds run in
//! parallel when the `parallel` feature is on and results are collected in
//! seed order, so output bytes never depend on scheduling.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix2, Rotation2, Vector2};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::active::{active_scan, ActiveConfig};
use crate::beam::{predict_beams, successive_cancellation, tracking_step, imu_odometry, PathEstimate, TrackingState};
use crate::crowd::run_cohort;
use crate::error::{Error, Result};
use crate::geometry::{Environment, Point2};
use crate::measurement::{
    clutter_toa_window, enumerate_paths, observe, sweep_rsrp, BeamCodebook, Measurement,
    TruthTag, UEState,
};
use crate::metrics::{ospa, OspaParams};
use crate::rng::{stream, StreamTag};
use crate::scenario::Scenario;
use crate::slam::{FeatureKind, SlamEngine};
use crate::{wrap_angle, SPEED_OF_LIGHT};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    HybridFig5ab,
    CrowdFig5cd,
    SweepFig6,
    Beamtrack,
    Custom,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::HybridFig5ab => "hybrid_fig5ab",
            Preset::CrowdFig5cd => "crowd_fig5cd",
            Preset::SweepFig6 => "sweep_fig6",
            Preset::Beamtrack => "beamtrack",
            Preset::Custom => "custom",
        }
    }

    pub fn from_name(s: &str) -> Result<Self> {
        match s {
            "hybrid_fig5ab" => Ok(Preset::HybridFig5ab),
            "crowd_fig5cd" => Ok(Preset::CrowdFig5cd),
            "sweep_fig6" => Ok(Preset::SweepFig6),
            "beamtrack" => Ok(Preset::Beamtrack),
            "custom" => Ok(Preset::Custom),
            other => Err(Error::Config(format!("unknown preset {other}"))),
        }
    }

    /// The bundled scenario text for this preset.
    pub fn bundled_scenario(self) -> &'static str {
        match self {
            Preset::HybridFig5ab => include_str!("../scenarios/hybrid.toml"),
            Preset::CrowdFig5cd => include_str!("../scenarios/crowd.toml"),
            Preset::SweepFig6 => include_str!("../scenarios/sweep.toml"),
            Preset::Beamtrack => include_str!("../scenarios/beamtrack.toml"),
            Preset::Custom => include_str!("../scenarios/default.toml"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub mechanism: String,
    pub seed: u64,
    pub epoch: u64,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub experiment: String,
    pub rows: Vec<MetricRow>,
    /// Final map of the lowest seed, one feature per line.
    pub snapshot: String,
    /// Byte-identical copy of the scenario text the run was built from.
    pub config_echo: String,
    /// Wall-clock seconds; excluded from the determinism contract.
    pub runtime_secs: f64,
}

fn map_seeds<T: Send>(n_seeds: u64, f: impl Fn(u64) -> Result<T> + Sync) -> Result<Vec<T>> {
    let seeds: Vec<u64> = (0..n_seeds).collect();
    #[cfg(feature = "parallel")]
    {
        seeds.par_iter().map(|&s| f(s)).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        seeds.iter().map(|&s| f(s)).collect()
    }
}

/// Ground-truth feature set observable from the given tracks: PA positions,
/// VAs behind at least one valid specular path, and illuminated scatterers.
pub fn truth_map(env: &Environment, tracks: &[&[UEState]], noise: &crate::measurement::NoiseProfile) -> Vec<Point2> {
    let mut pts: Vec<Point2> = Vec::new();
    let mut push = |p: Point2| {
        if !pts.iter().any(|q| (q - p).norm() < 1e-6) {
            pts.push(p);
        }
    };
    let pa_pos = |id: &str| env.pas.iter().find(|(pid, _)| pid == id).map(|(_, p)| *p);
    let sc_pos = |id: &str| env.scatterers.iter().find(|(sid, _)| sid == id).map(|(_, p)| *p);
    for track in tracks {
        for state in *track {
            for path in enumerate_paths(env, state, noise) {
                match &path.tag {
                    TruthTag::Los { pa_id } => {
                        if let Some(p) = pa_pos(pa_id) {
                            push(p);
                        }
                    }
                    TruthTag::Nlos { va, .. } => push(*va),
                    TruthTag::Scatter { id } => {
                        if let Some(p) = sc_pos(id) {
                            push(p);
                        }
                    }
                    TruthTag::Clutter => {}
                }
            }
        }
    }
    pts.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
    pts
}

fn ospa_params() -> OspaParams {
    OspaParams::new(5.0, 1.0).expect("default OSPA params valid")
}

/// Weighted total position spread of the particle cloud, meters.
fn pos_std(eng: &SlamEngine) -> f64 {
    let mean = eng.mean_state().position;
    let var: f64 = eng
        .particles
        .iter()
        .map(|p| p.weight * (p.state.position - mean).norm_squared())
        .sum();
    var.max(0.0).sqrt()
}

fn snapshot_text(map: &[(FeatureKind, Point2, f64)]) -> String {
    let mut sorted = map.to_vec();
    sorted.sort_by(|a, b| a.1.x.total_cmp(&b.1.x).then(a.1.y.total_cmp(&b.1.y)));
    let mut s = String::from("kind\tx\ty\texistence\n");
    for (kind, p, e) in &sorted {
        let _ = writeln!(s, "{kind}\t{:.6}\t{:.6}\t{:.4}", p.x, p.y, e);
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum InitMode {
    KnownPa,
    Hybrid,
}

struct SingleRun {
    pos_err: Vec<f64>,
    mae: Vec<f64>,
    map_ospa: Vec<f64>,
    final_map: Vec<(FeatureKind, Point2, f64)>,
}

/// One UE, one seed, one mechanism: radio SLAM along the truth track.
fn run_single(sc: &Scenario, ue_index: usize, seed: u64, init: InitMode) -> Result<SingleRun> {
    let env = &sc.environment;
    let track = &sc.tracks[ue_index];
    let ue_id = ue_index as u64 + 1;
    let window = clutter_toa_window(env);
    let truth = truth_map(env, &[track.as_slice()], &sc.noise);

    let mut init_mean = track[0];
    init_mean.clock_bias = 0.0;
    init_mean.orientation = 0.0;
    let mut eng = SlamEngine::new(sc.slam, sc.noise, init_mean, seed, ue_id);
    if init == InitMode::KnownPa {
        eng.init_known_pas(&env.pas);
    }

    let params = ospa_params();
    let mut pos_err = Vec::new();
    let mut mae = Vec::new();
    let mut map_ospa = Vec::new();
    let mut err_sum = 0.0;
    for epoch in 1..=sc.horizon {
        let truth_state = &track[epoch as usize];
        let paths = enumerate_paths(env, truth_state, &sc.noise);
        let mut rng = stream(seed, ue_id, epoch, StreamTag::Observe);
        let meas = observe(&paths, truth_state, &sc.noise, window, epoch, &mut rng);
        if epoch == 1 && init == InitMode::Hybrid {
            hybrid_init(&mut eng, sc, ue_index, seed, &meas)?;
        }
        let s = eng.step(sc.dt, &meas, window, None);
        let err = (s.ue_estimate.position - truth_state.position).norm();
        err_sum += err;
        pos_err.push(err);
        mae.push(err_sum / epoch as f64);
        map_ospa.push(ospa(&eng.map_points(), &truth, &params));
    }
    Ok(SingleRun {
        pos_err,
        mae,
        map_ospa,
        final_map: eng
            .features
            .iter()
            .filter(|f| f.existence > sc.slam.map_existence)
            .map(|f| (f.kind, f.mean, f.existence))
            .collect(),
    })
}

/// Hybrid (PA-unknown) initialization: a coarse PA prior back-projected
/// from the strongest first-epoch path, then an active-sensing sweep whose
/// fitted wall lines mirror that prior into VA priors.
fn hybrid_init(
    eng: &mut SlamEngine,
    sc: &Scenario,
    ue_index: usize,
    seed: u64,
    first_meas: &[Measurement],
) -> Result<()> {
    let ue_id = ue_index as u64 + 1;
    let entry = sc.tracks[ue_index][0];
    let Some(best) = first_meas
        .iter()
        .max_by(|a, b| a.rsrp.total_cmp(&b.rsrp))
    else {
        eng.init_hybrid(&[], None);
        return Ok(());
    };
    // back-project from the known entry point; orientation prior is zero
    let az = wrap_angle(best.aoa);
    let d = (best.toa * SPEED_OF_LIGHT).max(0.1);
    let mean = entry.position + d * Vector2::new(az.cos(), az.sin());
    let var_radial = (SPEED_OF_LIGHT * (sc.noise.sigma_toa + 1e-10)).powi(2);
    let var_tangential = (d * (sc.noise.sigma_aoa + 1e-3)).powi(2);
    let rot = Rotation2::new(az);
    // inflate for the one-epoch entry-point offset and model mismatch
    let cov = rot.matrix()
        * Matrix2::from_diagonal(&Vector2::new(var_radial, var_tangential))
        * rot.matrix().transpose()
        * 9.0
        + Matrix2::identity() * 0.1;

    let cb = BeamCodebook::uniform(64, 2.0 * std::f64::consts::PI, 12.5f64.to_radians())?;
    let mut rng = stream(seed, ue_id, 0, StreamTag::Echo);
    let hyp = vec![("pa0".to_string(), mean, cov)];
    let (priors, _) = active_scan(
        &sc.environment,
        &entry,
        &cb,
        &sc.noise,
        &ActiveConfig::default(),
        &hyp,
        &mut rng,
    );
    eng.init_hybrid(&priors, Some((mean, cov)));
    Ok(())
}

fn push_series(rows: &mut Vec<MetricRow>, mechanism: &str, seed: u64, prefix: &str, run: &SingleRun, first_epoch: u64) {
    for (i, ((pe, ma), mo)) in run.pos_err.iter().zip(&run.mae).zip(&run.map_ospa).enumerate() {
        let epoch = first_epoch + i as u64;
        for (metric, value) in [("pos_err", *pe), ("mae", *ma), ("map_ospa", *mo)] {
            rows.push(MetricRow {
                mechanism: mechanism.to_string(),
                seed,
                epoch,
                metric: format!("{prefix}{metric}"),
                value,
            });
        }
    }
}

/// Fig. 5(a)/(b): hybrid active+passive sensing (PA unknown) against the
/// passive baseline with a known PA, as MAE / map-OSPA series per seed.
pub fn run_hybrid_fig5ab(sc: &Scenario, n_seeds: u64) -> Result<RunReport> {
    let started = std::time::Instant::now();
    let per_seed = map_seeds(n_seeds, |seed| {
        let baseline = run_single(sc, 0, seed, InitMode::KnownPa)?;
        let hybrid = run_single(sc, 0, seed, InitMode::Hybrid)?;
        Ok((baseline, hybrid))
    })?;
    let mut rows = Vec::new();
    let mut snapshot = String::new();
    for (seed, (baseline, hybrid)) in per_seed.iter().enumerate() {
        let seed = seed as u64;
        push_series(&mut rows, "known_pa_passive", seed, "", baseline, 1);
        push_series(&mut rows, "hybrid", seed, "", hybrid, 1);
        if seed == 0 {
            snapshot = snapshot_text(&hybrid.final_map);
        }
    }
    Ok(RunReport {
        experiment: "hybrid_fig5ab".into(),
        rows,
        snapshot,
        config_echo: sc.source.clone(),
        runtime_secs: started.elapsed().as_secs_f64(),
    })
}

/// Fig. 5(c)/(d): the 8-UE cohort with and without crowdsourced map
/// exchange. Map OSPA is against the cohort-wide truth set, so a late UE
/// is credited for features it could only have learned from the cloud.
pub fn run_crowd_fig5cd(sc: &Scenario, n_seeds: u64) -> Result<RunReport> {
    let started = std::time::Instant::now();
    let track_refs: Vec<&[UEState]> = sc.tracks.iter().map(|t| t.as_slice()).collect();
    let truth = truth_map(&sc.environment, &track_refs, &sc.noise);
    let params = ospa_params();

    let per_seed = map_seeds(n_seeds, |seed| {
        let with = run_cohort(
            &sc.environment,
            &sc.schedule,
            &sc.tracks,
            sc.slam,
            sc.noise,
            sc.horizon,
            seed,
            true,
        )?;
        let without = run_cohort(
            &sc.environment,
            &sc.schedule,
            &sc.tracks,
            sc.slam,
            sc.noise,
            sc.horizon,
            seed,
            false,
        )?;
        Ok((with, without))
    })?;

    let mut rows = Vec::new();
    let mut snapshot = String::new();
    for (seed, (with, without)) in per_seed.iter().enumerate() {
        let seed = seed as u64;
        for (mechanism, cohort) in [("crowdsourcing", with), ("no_crowdsourcing", without)] {
            for series in &cohort.per_ue {
                let prefix = format!("ue{}.", series.ue_id);
                let mut err_sum = 0.0;
                for (i, rec) in series.records.iter().enumerate() {
                    let truth_state = &sc.tracks[(series.ue_id - 1) as usize][rec.epoch as usize];
                    let err = (rec.estimate.position - truth_state.position).norm();
                    err_sum += err;
                    let map_pts: Vec<Point2> = rec.map.iter().map(|(_, p)| *p).collect();
                    for (metric, value) in [
                        ("pos_err", err),
                        ("mae", err_sum / (i + 1) as f64),
                        ("map_ospa", ospa(&map_pts, &truth, &params)),
                    ] {
                        rows.push(MetricRow {
                            mechanism: mechanism.to_string(),
                            seed,
                            epoch: rec.epoch,
                            metric: format!("{prefix}{metric}"),
                            value,
                        });
                    }
                }
            }
        }
        if seed == 0 {
            let last = with
                .per_ue
                .last()
                .and_then(|s| s.records.last())
                .map(|r| r.map.iter().map(|(k, p)| (*k, *p, 1.0)).collect::<Vec<_>>())
                .unwrap_or_default();
            snapshot = snapshot_text(&last);
        }
    }
    Ok(RunReport {
        experiment: "crowd_fig5cd".into(),
        rows,
        snapshot,
        config_echo: sc.source.clone(),
        runtime_secs: started.elapsed().as_secs_f64(),
    })
}

/// Drop duplicate extractions of the same physical path across the four
/// array orientations, keeping the strongest.
fn dedup_paths(mut ests: Vec<PathEstimate>, tol: f64) -> Vec<PathEstimate> {
    ests.sort_by(|a, b| b.strength.total_cmp(&a.strength).then(a.tx_beam.cmp(&b.tx_beam)));
    let mut out: Vec<PathEstimate> = Vec::new();
    for e in ests {
        if !out
            .iter()
            .any(|o| wrap_angle(o.aod - e.aod).abs() < tol && wrap_angle(o.aoa - e.aoa).abs() < tol)
        {
            out.push(e);
        }
    }
    out
}

/// The four array orientations of the sweep experiment, radians.
pub const SWEEP_ORIENTATIONS: [f64; 4] = [
    0.0,
    std::f64::consts::FRAC_PI_2,
    std::f64::consts::PI,
    -std::f64::consts::FRAC_PI_2,
];

/// Beam-pair RSRP matrices for one epoch of the sweep experiment: both
/// arrays take each of the four orientations and every tx/rx orientation
/// pair is swept. A 100-degree sector cannot hold a path's departure and
/// arrival angle at once in general (for LOS they differ by 180 degrees),
/// so only the full combination sweep makes every path extractable.
pub fn sweep_epoch_matrices(
    sc: &Scenario,
    truth_state: &UEState,
    seed: u64,
    epoch: u64,
) -> Vec<crate::measurement::RsrpMatrix> {
    let paths = enumerate_paths(&sc.environment, truth_state, &sc.noise);
    let mut rng = stream(seed, 1, epoch, StreamTag::Sweep);
    let mut out = Vec::with_capacity(SWEEP_ORIENTATIONS.len() * SWEEP_ORIENTATIONS.len());
    for &tx_o in &SWEEP_ORIENTATIONS {
        for &rx_o in &SWEEP_ORIENTATIONS {
            out.push(sweep_rsrp(
                &paths,
                &sc.codebook,
                &sc.codebook,
                tx_o,
                wrap_angle(truth_state.orientation + rx_o),
                &sc.noise,
                &mut rng,
            ));
        }
    }
    out
}

/// §V replication: beam sweeps at each grid point, successive cancellation
/// to AOA/AOD path estimates, angle-only SLAM, ME-LOC / ME-MAP summary.
pub fn run_sweep_fig6(sc: &Scenario, n_seeds: u64) -> Result<RunReport> {
    let started = std::time::Instant::now();
    let env = &sc.environment;
    let truth = truth_map(env, &[sc.tracks[0].as_slice()], &sc.noise);
    let window = clutter_toa_window(env);
    let beam_tol = sc.codebook.beamwidth;

    struct SweepRun {
        pos_err: Vec<f64>,
        extracted: Vec<usize>,
        final_map: Vec<(FeatureKind, Point2, f64)>,
        me_loc: f64,
        me_map: f64,
    }

    let per_seed = map_seeds(n_seeds, |seed| {
        let track = &sc.tracks[0];
        let mut init_mean = track[0];
        init_mean.clock_bias = 0.0;
        init_mean.orientation = 0.0;
        let mut eng = SlamEngine::new(sc.slam, sc.noise, init_mean, seed, 1);
        eng.init_known_pas(&env.pas);
        // the grid walk is odometry-known, as on a measurement cart
        let mut imu_rng = stream(seed, 1, 0, StreamTag::Imu);
        let controls = imu_odometry(track, 0.03, 0.005, &mut imu_rng);
        let mut pos_err = Vec::new();
        let mut extracted = Vec::new();
        for epoch in 1..=sc.horizon {
            let truth_state = &track[epoch as usize];
            let matrices = sweep_epoch_matrices(sc, truth_state, seed, epoch);
            let mut ests = Vec::new();
            for m in &matrices {
                ests.extend(successive_cancellation(
                    m,
                    &sc.codebook,
                    &sc.codebook,
                    sc.noise.noise_floor_db,
                    10.0,
                ));
            }
            let ests = dedup_paths(ests, beam_tol);
            extracted.push(ests.len());
            let meas: Vec<Measurement> = ests
                .iter()
                .map(|e| Measurement {
                    aoa: wrap_angle(e.aoa - truth_state.orientation),
                    aod: e.aod,
                    toa: 0.0,
                    rsrp: e.strength,
                    truth_tag: TruthTag::Clutter,
                    epoch,
                })
                .collect();
            let s = eng.step(sc.dt, &meas, window, Some(controls[(epoch - 1) as usize]));
            pos_err.push((s.ue_estimate.position - truth_state.position).norm());
        }
        let final_map: Vec<(FeatureKind, Point2, f64)> = eng
            .features
            .iter()
            .filter(|f| f.existence > sc.slam.map_existence)
            .map(|f| (f.kind, f.mean, f.existence))
            .collect();
        let me_loc = pos_err.iter().sum::<f64>() / pos_err.len().max(1) as f64;
        // coverage error: every true feature against its nearest estimate
        let me_map = if truth.is_empty() {
            0.0
        } else {
            truth
                .iter()
                .map(|t| {
                    final_map
                        .iter()
                        .map(|(_, p, _)| (p - t).norm())
                        .fold(f64::INFINITY, f64::min)
                        .min(ospa_params().cutoff)
                })
                .sum::<f64>()
                / truth.len() as f64
        };
        Ok(SweepRun { pos_err, extracted, final_map, me_loc, me_map })
    })?;

    let mut rows = Vec::new();
    let mut snapshot = String::new();
    for (seed, run) in per_seed.iter().enumerate() {
        let seed = seed as u64;
        for (i, (pe, ne)) in run.pos_err.iter().zip(&run.extracted).enumerate() {
            let epoch = i as u64 + 1;
            for (metric, value) in [
                ("pos_err", *pe),
                ("paths_extracted", *ne as f64),
                ("rsrp_matrices", (SWEEP_ORIENTATIONS.len() * SWEEP_ORIENTATIONS.len()) as f64),
                (
                    "rsrp_entries",
                    (SWEEP_ORIENTATIONS.len()
                        * SWEEP_ORIENTATIONS.len()
                        * sc.codebook.n_beams
                        * sc.codebook.n_beams) as f64,
                ),
            ] {
                rows.push(MetricRow {
                    mechanism: "beam_sweep_slam".into(),
                    seed,
                    epoch,
                    metric: metric.into(),
                    value,
                });
            }
        }
        for (metric, value) in [("me_loc", run.me_loc), ("me_map", run.me_map)] {
            rows.push(MetricRow {
                mechanism: "beam_sweep_slam".into(),
                seed,
                epoch: sc.horizon,
                metric: metric.into(),
                value,
            });
        }
        if seed == 0 {
            snapshot = snapshot_text(&run.final_map);
        }
    }
    Ok(RunReport {
        experiment: "sweep_fig6".into(),
        rows,
        snapshot,
        config_echo: sc.source.clone(),
        runtime_secs: started.elapsed().as_secs_f64(),
    })
}

/// SLAM-aided beam tracking against the exhaustive per-epoch sweep, with
/// the scripted LOS blockage from the scenario.
pub fn run_beamtrack(sc: &Scenario, n_seeds: u64) -> Result<RunReport> {
    let started = std::time::Instant::now();
    let env = &sc.environment;
    let window = clutter_toa_window(env);
    let n_beams = sc.codebook.n_beams;
    let room_center = Point2::from((env.bounds.min.coords + env.bounds.max.coords) / 2.0);
    let pa = env
        .pas
        .first()
        .ok_or_else(|| Error::Config("beamtrack needs a PA".into()))?
        .1;
    let d = room_center - pa;
    let tx_orientation = d.y.atan2(d.x);

    struct TrackRun {
        overhead: Vec<usize>,
        rsrp_loss: Vec<f64>,
        full_sweep: Vec<bool>,
        pos_err: Vec<f64>,
        final_map: Vec<(FeatureKind, Point2, f64)>,
    }

    let per_seed = map_seeds(n_seeds, |seed| {
        let track = &sc.tracks[0];
        let mut init_mean = track[0];
        // the array orientation is compass-known in the tracking preset
        init_mean.clock_bias = 0.0;
        let mut eng = SlamEngine::new(sc.slam, sc.noise, init_mean, seed, 1);
        eng.init_known_pas(&env.pas);
        let mut imu_rng = stream(seed, 1, 0, StreamTag::Imu);
        let controls = imu_odometry(track, 0.02, 0.005, &mut imu_rng);
        let mut ts = TrackingState::full_sweep(n_beams, n_beams);

        let mut overhead = Vec::new();
        let mut rsrp_loss = Vec::new();
        let mut full_sweep = Vec::new();
        let mut pos_err = Vec::new();
        for epoch in 1..=sc.horizon {
            let truth_state = &track[epoch as usize];
            let mut paths = enumerate_paths(env, truth_state, &sc.noise);
            if let Some(b) = &sc.blockage {
                if epoch >= b.start_epoch && epoch < b.start_epoch + b.duration {
                    for p in &mut paths {
                        if matches!(p.tag, TruthTag::Los { .. }) {
                            p.rsrp -= b.loss_db;
                        }
                    }
                }
            }
            let mut sweep_rng = stream(seed, 1, epoch, StreamTag::Sweep);
            let matrix = sweep_rsrp(
                &paths,
                &sc.codebook,
                &sc.codebook,
                tx_orientation,
                truth_state.orientation,
                &sc.noise,
                &mut sweep_rng,
            );
            let (bi, bj) = matrix.argmax();
            let full_best = matrix.values[bi][bj];

            let measured: Vec<((usize, usize), f64)> = ts
                .candidates
                .iter()
                .map(|&(i, j)| ((i, j), matrix.values[i][j]))
                .collect();

            // radio SLAM update under IMU odometry control
            let radio_paths: Vec<_> = paths
                .iter()
                .filter(|p| p.rsrp > sc.noise.noise_floor_db)
                .cloned()
                .collect();
            let mut obs_rng = stream(seed, 1, epoch, StreamTag::Observe);
            let meas = observe(&radio_paths, truth_state, &sc.noise, window, epoch, &mut obs_rng);
            let s = eng.step(sc.dt, &meas, window, Some(controls[(epoch - 1) as usize]));
            pos_err.push((s.ue_estimate.position - truth_state.position).norm());

            let mut pred = s.ue_estimate;
            pred.position += pred.velocity * sc.dt;
            let map_feats: Vec<(FeatureKind, Point2, f64)> = eng
                .features
                .iter()
                .map(|f| (f.kind, f.mean, f.existence))
                .collect();
            let candidates = predict_beams(
                &map_feats,
                &pred,
                pos_std(&eng).max(0.05),
                &sc.codebook,
                &sc.codebook,
                tx_orientation,
                sc.slam.map_existence,
            );
            let out = tracking_step(&mut ts, &measured, n_beams, n_beams, candidates);
            overhead.push(out.overhead);
            rsrp_loss.push(full_best - out.chosen_rsrp);
            full_sweep.push(out.overhead == n_beams * n_beams);
        }
        Ok(TrackRun {
            overhead,
            rsrp_loss,
            full_sweep,
            pos_err,
            final_map: eng
                .features
                .iter()
                .filter(|f| f.existence > sc.slam.map_existence)
                .map(|f| (f.kind, f.mean, f.existence))
                .collect(),
        })
    })?;

    let mut rows = Vec::new();
    let mut snapshot = String::new();
    for (seed, run) in per_seed.iter().enumerate() {
        let seed = seed as u64;
        for (i, ((ov, loss), fsw)) in run
            .overhead
            .iter()
            .zip(&run.rsrp_loss)
            .zip(&run.full_sweep)
            .enumerate()
        {
            let epoch = i as u64 + 1;
            for (metric, value) in [
                ("overhead", *ov as f64),
                ("rsrp_loss", *loss),
                ("full_sweep", if *fsw { 1.0 } else { 0.0 }),
                ("pos_err", run.pos_err[i]),
            ] {
                rows.push(MetricRow {
                    mechanism: "slam_aided_tracking".into(),
                    seed,
                    epoch,
                    metric: metric.into(),
                    value,
                });
            }
            for (metric, value) in [
                ("overhead", (sc.codebook.n_beams * sc.codebook.n_beams) as f64),
                ("rsrp_loss", 0.0),
            ] {
                rows.push(MetricRow {
                    mechanism: "exhaustive_sweep".into(),
                    seed,
                    epoch,
                    metric: metric.into(),
                    value,
                });
            }
        }
        if seed == 0 {
            snapshot = snapshot_text(&run.final_map);
        }
    }
    Ok(RunReport {
        experiment: "beamtrack".into(),
        rows,
        snapshot,
        config_echo: sc.source.clone(),
        runtime_secs: started.elapsed().as_secs_f64(),
    })
}

/// Dispatch a preset. `custom` behaves like the hybrid preset but keeps
/// whatever scenario was supplied.
pub fn run_preset(sc: &Scenario, preset: Preset, n_seeds: u64) -> Result<RunReport> {
    if n_seeds == 0 {
        return Err(Error::Config("need at least one seed".into()));
    }
    let mut report = match preset {
        Preset::HybridFig5ab | Preset::Custom => run_hybrid_fig5ab(sc, n_seeds)?,
        Preset::CrowdFig5cd => run_crowd_fig5cd(sc, n_seeds)?,
        Preset::SweepFig6 => run_sweep_fig6(sc, n_seeds)?,
        Preset::Beamtrack => run_beamtrack(sc, n_seeds)?,
    };
    if preset == Preset::Custom {
        report.experiment = "custom".into();
    }
    // fixed emission order regardless of how the preset generated rows
    report.rows.sort_by(|a, b| {
        a.mechanism
            .cmp(&b.mechanism)
            .then(a.seed.cmp(&b.seed))
            .then(a.epoch.cmp(&b.epoch))
            .then(a.metric.cmp(&b.metric))
    });
    Ok(report)
}

/// The tidy long-format series table for a report.
pub fn series_csv(report: &RunReport) -> String {
    let mut s = String::from("experiment,mechanism,seed,epoch,metric,value\n");
    for r in &report.rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            report.experiment, r.mechanism, r.seed, r.epoch, r.metric, r.value
        );
    }
    s
}

/// Write series.csv, snapshot.txt, config.toml and report.txt into `out`.
/// Only report.txt contains the runtime, keeping the rest byte-stable.
pub fn write_report(report: &RunReport, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("series.csv"), series_csv(report))?;
    std::fs::write(out.join("snapshot.txt"), &report.snapshot)?;
    std::fs::write(out.join("config.toml"), &report.config_echo)?;
    std::fs::write(
        out.join("report.txt"),
        format!(
            "experiment: {}\nrows: {}\nruntime_secs: {:.3}\n",
            report.experiment,
            report.rows.len(),
            report.runtime_secs
        ),
    )?;
    Ok(())
}

/// Parsed series row, as read back from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesRow {
    pub experiment: String,
    pub mechanism: String,
    pub seed: u64,
    pub epoch: u64,
    pub metric: String,
    pub value: f64,
}

/// Read every series.csv directly inside `dir`.
pub fn read_series(dir: &Path) -> Result<Vec<SeriesRow>> {
    let path = dir.join("series.csv");
    let text = std::fs::read_to_string(&path)?;
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if n == 0 || line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 6 {
            return Err(Error::Config(format!(
                "{}: line {} has {} fields, expected 6",
                path.display(),
                n + 1,
                parts.len()
            )));
        }
        let bad = |what: &str| Error::Config(format!("{}: line {}: bad {what}", path.display(), n + 1));
        rows.push(SeriesRow {
            experiment: parts[0].into(),
            mechanism: parts[1].into(),
            seed: parts[2].parse().map_err(|_| bad("seed"))?,
            epoch: parts[3].parse().map_err(|_| bad("epoch"))?,
            metric: parts[4].into(),
            value: parts[5].parse().map_err(|_| bad("value"))?,
        });
    }
    Ok(rows)
}

/// Final-epoch mean over seeds per (experiment, mechanism, metric).
pub fn metrics_summary(rows: &[SeriesRow]) -> String {
    let mut last_epoch: BTreeMap<(String, String, String), u64> = BTreeMap::new();
    for r in rows {
        let k = (r.experiment.clone(), r.mechanism.clone(), r.metric.clone());
        let e = last_epoch.entry(k).or_insert(0);
        *e = (*e).max(r.epoch);
    }
    let mut acc: BTreeMap<(String, String, String), (f64, u64)> = BTreeMap::new();
    for r in rows {
        let k = (r.experiment.clone(), r.mechanism.clone(), r.metric.clone());
        if last_epoch[&k] == r.epoch {
            let slot = acc.entry(k).or_insert((0.0, 0));
            slot.0 += r.value;
            slot.1 += 1;
        }
    }
    let mut s = String::from("experiment,mechanism,metric,final_epoch,mean,seeds\n");
    for ((exp, mech, metric), (sum, count)) in &acc {
        let _ = writeln!(
            s,
            "{exp},{mech},{metric},{},{},{count}",
            last_epoch[&(exp.clone(), mech.clone(), metric.clone())],
            sum / *count as f64
        );
    }
    s
}

/// The plot-data table: the tidy rows themselves, plus the per-epoch mean
/// over seeds as a `mean` pseudo-seed appended under seed column `mean`.
pub fn plotdata(rows: &[SeriesRow]) -> String {
    let mut s = String::from("experiment,mechanism,seed,epoch,metric,value\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.experiment, r.mechanism, r.seed, r.epoch, r.metric, r.value
        );
    }
    let mut acc: BTreeMap<(String, String, u64, String), (f64, u64)> = BTreeMap::new();
    for r in rows {
        let slot = acc
            .entry((r.experiment.clone(), r.mechanism.clone(), r.epoch, r.metric.clone()))
            .or_insert((0.0, 0));
        slot.0 += r.value;
        slot.1 += 1;
    }
    for ((exp, mech, epoch, metric), (sum, count)) in &acc {
        let _ = writeln!(s, "{exp},{mech},mean,{epoch},{metric},{}", sum / *count as f64);
    }
    s
}

/// Per-epoch mean over seeds of one (mechanism, metric) series.
pub fn mean_series(report: &RunReport, mechanism: &str, metric: &str) -> Vec<(u64, f64)> {
    let mut acc: BTreeMap<u64, (f64, u64)> = BTreeMap::new();
    for r in &report.rows {
        if r.mechanism == mechanism && r.metric == metric {
            let slot = acc.entry(r.epoch).or_insert((0.0, 0));
            slot.0 += r.value;
            slot.1 += 1;
        }
    }
    acc.into_iter().map(|(e, (sum, n))| (e, sum / n as f64)).collect()
}
