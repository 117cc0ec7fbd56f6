//! Experiment drivers: surface reconstruction with and without odometry
//! feedback, landing-position accuracy on perturbed torsos, and the
//! constant-force trials. Every trial row carries the seed that replays it.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::contact::{simulate_contact, trace_metrics, ContactSimConfig, ForceTrace, TraceMetrics};
use crate::error::{Error, Result};
use crate::geometry::RigidTransform;
use crate::landmarks::{
    detect_landmarks, frontal_frame_index, landing_from_landmarks, project_to_surface, LandingConfig, LandmarkSet,
    LandmarkTemplates, Pixel, Valve,
};
use crate::pointcloud::{deproject, transform_cloud, voxel_downsample, PointCloud, RgbdFrame};
use crate::registration::{merge_surfaces, multiway_register, MultiwayProblem, RegistrationConfig, RegistrationResult};
use crate::scenegen::{
    capture_sequence, derive_seed, marker_templates, planar_perturbation, CaptureProtocol, TorsoModel, TorsoParams,
};

// ---------------------------------------------------------------------------
// statistics

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleSummary {
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation (n − 1).
    pub sd: f64,
}

pub fn summarize(samples: &[f64]) -> Result<SampleSummary> {
    if samples.is_empty() {
        return Err(Error::invalid("no samples to summarize"));
    }
    let n = samples.len();
    let mean = samples.iter().sum::<f64>() / n as f64;
    let sd = if n > 1 {
        (samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    Ok(SampleSummary { n, mean, sd })
}

/// Two groups compared with the pooled-variance two-sample t-test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialStats {
    pub a: SampleSummary,
    pub b: SampleSummary,
    pub t: f64,
    pub df: f64,
    /// Two-sided.
    pub p: f64,
}

pub fn compute_stats(a: &[f64], b: &[f64]) -> Result<TrialStats> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::invalid("t-test needs at least 2 samples per group"));
    }
    if a.iter().chain(b).any(|x| !x.is_finite()) {
        return Err(Error::invalid("samples must be finite"));
    }
    let (sa, sb) = (summarize(a)?, summarize(b)?);
    let df = (sa.n + sb.n - 2) as f64;
    let pooled = (((sa.n - 1) as f64 * sa.sd * sa.sd + (sb.n - 1) as f64 * sb.sd * sb.sd) / df).sqrt();
    let diff = sa.mean - sb.mean;
    let se = pooled * (1.0 / sa.n as f64 + 1.0 / sb.n as f64).sqrt();
    let (t, p) = if se == 0.0 {
        if diff == 0.0 {
            (0.0, 1.0)
        } else {
            (diff.signum() * f64::INFINITY, 0.0)
        }
    } else {
        let t = diff / se;
        let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::invalid(format!("t distribution: {e}")))?;
        (t, (2.0 * dist.sf(t.abs())).clamp(0.0, 1.0))
    };
    Ok(TrialStats { a: sa, b: sb, t, df, p })
}

// ---------------------------------------------------------------------------
// reconstruction

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReconstructionConfig {
    /// Voxel size of the clouds the poses are solved on, mm.
    pub registration_voxel_mm: f64,
    /// Voxel size of the clouds merged into the output surface, mm.
    pub surface_voxel_mm: f64,
    pub registration: RegistrationConfig,
}

impl Default for ReconstructionConfig {
    fn default() -> Self {
        Self {
            registration_voxel_mm: 10.0,
            surface_voxel_mm: 2.0,
            registration: RegistrationConfig::default(),
        }
    }
}

impl ReconstructionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.registration_voxel_mm > 0.0 && self.surface_voxel_mm > 0.0) {
            return Err(Error::invalid("voxel sizes must be > 0"));
        }
        self.registration.validate()
    }
}

pub struct Reconstruction {
    /// Pose each capture was placed at before refinement.
    pub initial: Vec<RigidTransform<f64>>,
    pub result: RegistrationResult<f64>,
    /// Dense surface merged with the solved poses.
    pub merged: PointCloud<f64>,
}

impl Reconstruction {
    pub fn merged(&self) -> &PointCloud<f64> {
        &self.merged
    }

    /// Refinement per capture, applied after its initial placement.
    pub fn refinements(&self) -> &[RigidTransform<f64>] {
        &self.result.poses
    }
}

/// Deprojects, downsamples and registers the captures. With `feedback`
/// each capture starts at its own capture pose; without it every capture
/// starts at the first capture's pose (no odometry between captures).
pub fn reconstruct(frames: &[RgbdFrame<f64>], feedback: bool, config: &ReconstructionConfig) -> Result<Reconstruction> {
    if frames.is_empty() {
        return Err(Error::invalid("no frames to reconstruct"));
    }
    let initial: Vec<RigidTransform<f64>> = frames
        .iter()
        .map(|f| {
            if feedback {
                f.capture_pose
            } else {
                frames[0].capture_pose
            }
        })
        .collect();
    config.validate()?;
    let placed: Vec<PointCloud<f64>> = frames
        .iter()
        .zip(&initial)
        .map(|(f, pose)| transform_cloud(&deproject(f), pose, "base"))
        .collect();
    let downsample =
        |voxel: f64| -> Result<Vec<PointCloud<f64>>> { placed.iter().map(|c| voxel_downsample(c, voxel)).collect() };
    let problem = MultiwayProblem::new(downsample(config.registration_voxel_mm)?, config.registration.clone())?;
    let result = multiway_register(&problem)?;
    let merged = merge_surfaces(
        &downsample(config.surface_voxel_mm)?,
        &result.poses,
        config.registration.outlier_k,
        config.registration.outlier_std_ratio,
    )?;
    Ok(Reconstruction {
        initial,
        result,
        merged,
    })
}

/// Root-mean-square distance of the merged surface to the ground truth.
pub fn surface_rms(torso: &TorsoModel, cloud: &PointCloud<f64>) -> Result<f64> {
    if cloud.is_empty() {
        return Err(Error::EmptyCloud("merged surface"));
    }
    let ss: f64 = cloud.points().iter().map(|p| torso.surface_distance(p).powi(2)).sum();
    Ok((ss / cloud.len() as f64).sqrt())
}

/// Mean distance between the true valve points and where the true body
/// normals through them meet the reconstructed surface.
pub fn target_error(torso: &TorsoModel, cloud: &PointCloud<f64>, radius: f64) -> Result<f64> {
    let mut sum = 0.0;
    for v in Valve::ALL {
        let hit = project_to_surface(&torso.valves_planar.get(v), &torso.body.z_axis, cloud, radius)?;
        sum += (hit - torso.valves.get(v)).norm();
    }
    Ok(sum / Valve::ALL.len() as f64)
}

// ---------------------------------------------------------------------------
// configuration

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Registration,
    Landing,
    Force,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Registration => "registration",
            ExperimentKind::Landing => "landing",
            ExperimentKind::Force => "force",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegistrationExperiment {
    /// Camera heights above the chest, mm.
    pub heights: Vec<f64>,
}

impl Default for RegistrationExperiment {
    fn default() -> Self {
        Self {
            heights: vec![250.0, 300.0, 350.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LandingExperiment {
    pub max_translation_mm: f64,
    pub max_rotation_deg: f64,
    /// Uniform integer jitter added to each detected landmark pixel.
    pub landmark_jitter_px: u32,
    pub landing: LandingConfig,
}

impl Default for LandingExperiment {
    fn default() -> Self {
        Self {
            max_translation_mm: 20.0,
            max_rotation_deg: 5.0,
            landmark_jitter_px: 3,
            landing: LandingConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForceExperiment {
    pub targets: Vec<f64>,
    pub push_in_min_mm: f64,
    pub push_in_max_mm: f64,
    pub dynamic_target: f64,
    /// Template for every run; target, trajectory and seed are overridden.
    pub contact: ContactSimConfig<f64>,
}

impl Default for ForceExperiment {
    fn default() -> Self {
        Self {
            targets: vec![5.0, 10.0, 15.0],
            push_in_min_mm: 3.0,
            push_in_max_mm: 8.0,
            dynamic_target: 5.0,
            contact: ContactSimConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub trials: usize,
    pub seed: u64,
    pub torso: TorsoParams,
    pub protocol: CaptureProtocol,
    pub reconstruction: ReconstructionConfig,
    pub registration: RegistrationExperiment,
    pub landing: LandingExperiment,
    pub force: ForceExperiment,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            trials: 12,
            seed: 0,
            torso: TorsoParams::default(),
            protocol: CaptureProtocol::default(),
            reconstruction: ReconstructionConfig::default(),
            registration: RegistrationExperiment::default(),
            landing: LandingExperiment::default(),
            force: ForceExperiment::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trials < 1 {
            return Err(Error::invalid("trial count must be >= 1"));
        }
        self.torso.validate()?;
        self.protocol.validate()?;
        self.reconstruction.validate()?;
        if self.registration.heights.is_empty() || self.registration.heights.iter().any(|h| !(*h > 0.0)) {
            return Err(Error::invalid("registration heights must be positive"));
        }
        let f = &self.force;
        if !(f.push_in_min_mm <= f.push_in_max_mm) {
            return Err(Error::invalid("push-in range is empty"));
        }
        if f.targets.is_empty() {
            return Err(Error::invalid("force experiment needs at least one target"));
        }
        Ok(())
    }

    /// Seed of trial `trial`; shared by every condition of that trial.
    pub fn trial_seed(&self, trial: usize) -> u64 {
        derive_seed(self.seed, trial as u64)
    }
}

// ---------------------------------------------------------------------------
// CSV

/// Comma-separated table with a version comment line.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvTable {
    pub name: &'static str,
    pub columns: Vec<&'static str>,
    pub rows: Vec<Vec<String>>,
}

impl CsvTable {
    pub const VERSION: u32 = 1;

    pub fn to_csv_string(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# auscult {} v{}", self.name, Self::VERSION);
        s.push_str(&self.columns.join(","));
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.join(","));
            s.push('\n');
        }
        s
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| *c == name)
    }
}

fn num(v: f64) -> String {
    format!("{v:.6}")
}

/// An experiment's tables plus a JSON summary.
#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub kind: ExperimentKind,
    pub tables: Vec<CsvTable>,
    pub summary: serde_json::Value,
}

impl ExperimentReport {
    pub fn table(&self, name: &str) -> Option<&CsvTable> {
        self.tables.iter().find(|t| t.name == name)
    }

    /// Writes `<table>.csv` files and `<kind>_summary.json`; returns the
    /// written paths.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut out = Vec::new();
        for t in &self.tables {
            let path = dir.join(format!("{}.csv", t.name));
            fs::write(&path, t.to_csv_string()).map_err(|e| Error::io(&path, e))?;
            out.push(path);
        }
        let path = dir.join(format!("{}_summary.json", self.kind.name()));
        fs::write(&path, serde_json::to_string_pretty(&self.summary)?).map_err(|e| Error::io(&path, e))?;
        out.push(path);
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// registration experiment

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistrationTrial {
    pub height: f64,
    pub feedback: bool,
    pub trial: usize,
    pub seed: u64,
    pub rms_mm: f64,
    pub target_error_mm: f64,
    pub iterations: usize,
    pub merged_points: usize,
    pub warnings: usize,
}

/// One scene per (height, trial); both feedback modes register the same
/// captures.
pub fn registration_trials(config: &ExperimentConfig) -> Result<Vec<RegistrationTrial>> {
    config.validate()?;
    let torso = TorsoModel::new(
        config.torso.clone(),
        config.landing.landing.map.clone(),
        RigidTransform::identity(),
    )?;
    let jobs: Vec<(f64, usize)> = config
        .registration
        .heights
        .iter()
        .flat_map(|&h| (0..config.trials).map(move |t| (h, t)))
        .collect();
    let radius = config.landing.landing.projection_radius;
    let nested = jobs
        .par_iter()
        .map(|&(height, trial)| -> Result<Vec<RegistrationTrial>> {
            let seed = config.trial_seed(trial);
            let protocol = CaptureProtocol {
                height,
                ..config.protocol.clone()
            };
            let frames = capture_sequence(&torso, &protocol, seed)?;
            [true, false]
                .into_iter()
                .map(|feedback| {
                    let rec = reconstruct(&frames, feedback, &config.reconstruction)?;
                    Ok(RegistrationTrial {
                        height,
                        feedback,
                        trial,
                        seed,
                        rms_mm: surface_rms(&torso, rec.merged())?,
                        target_error_mm: target_error(&torso, rec.merged(), radius)?,
                        iterations: rec.result.iterations,
                        merged_points: rec.merged().len(),
                        warnings: rec.result.warnings.len(),
                    })
                })
                .collect()
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rows: Vec<RegistrationTrial> = nested.into_iter().flatten().collect();
    rows.sort_by(|a, b| {
        a.height
            .total_cmp(&b.height)
            .then(b.feedback.cmp(&a.feedback))
            .then(a.trial.cmp(&b.trial))
    });
    Ok(rows)
}

pub fn run_registration_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    let rows = registration_trials(config)?;
    let table = CsvTable {
        name: "registration_trials",
        columns: vec![
            "height_mm",
            "feedback",
            "trial",
            "seed",
            "rms_mm",
            "target_error_mm",
            "iterations",
            "merged_points",
            "warnings",
        ],
        rows: rows
            .iter()
            .map(|r| {
                vec![
                    format!("{}", r.height),
                    u8::from(r.feedback).to_string(),
                    r.trial.to_string(),
                    r.seed.to_string(),
                    num(r.rms_mm),
                    num(r.target_error_mm),
                    r.iterations.to_string(),
                    r.merged_points.to_string(),
                    r.warnings.to_string(),
                ]
            })
            .collect(),
    };

    let select = |h: f64, fb: bool, f: fn(&RegistrationTrial) -> f64| -> Vec<f64> {
        rows.iter()
            .filter(|r| r.height == h && r.feedback == fb)
            .map(f)
            .collect()
    };
    let mut conditions = Vec::new();
    let mut feedback_vs_none = Vec::new();
    for &h in &config.registration.heights {
        for fb in [true, false] {
            conditions.push(serde_json::json!({
                "height_mm": h,
                "feedback": fb,
                "rms_mm": summarize(&select(h, fb, |r| r.rms_mm))?,
                "target_error_mm": summarize(&select(h, fb, |r| r.target_error_mm))?,
            }));
        }
        if config.trials >= 2 {
            feedback_vs_none.push(serde_json::json!({
                "height_mm": h,
                "rms_mm": compute_stats(&select(h, true, |r| r.rms_mm), &select(h, false, |r| r.rms_mm))?,
            }));
        }
    }
    let heights = &config.registration.heights;
    let (lo, hi) = (heights[0], heights[heights.len() - 1]);
    let height_comparison = if config.trials >= 2 && heights.len() >= 2 {
        serde_json::json!({
            "low_mm": lo,
            "high_mm": hi,
            "rms_mm": compute_stats(&select(lo, true, |r| r.rms_mm), &select(hi, true, |r| r.rms_mm))?,
            "target_error_mm": compute_stats(
                &select(lo, true, |r| r.target_error_mm),
                &select(hi, true, |r| r.target_error_mm),
            )?,
        })
    } else {
        serde_json::Value::Null
    };
    Ok(ExperimentReport {
        kind: ExperimentKind::Registration,
        tables: vec![table],
        summary: serde_json::json!({
            "trials": config.trials,
            "seed": config.seed,
            "conditions": conditions,
            "feedback_vs_none": feedback_vs_none,
            "height_comparison": height_comparison,
        }),
    })
}

// ---------------------------------------------------------------------------
// landing experiment

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandingTrial {
    pub trial: usize,
    pub seed: u64,
    pub valve: Valve,
    pub error_mm: f64,
    pub estimate: [f64; 3],
    pub truth: [f64; 3],
}

fn jitter(p: Pixel, rng: &mut ChaCha8Rng, amount: u32, width: u32, height: u32) -> Pixel {
    if amount == 0 {
        return p;
    }
    let a = amount as i64;
    let du = rng.random_range(-a..=a);
    let dv = rng.random_range(-a..=a);
    Pixel::new(
        (p.u as i64 + du).clamp(0, width as i64 - 1) as u32,
        (p.v as i64 + dv).clamp(0, height as i64 - 1) as u32,
    )
}

/// Full pipeline on one perturbed torso; returns one row per valve.
pub fn landing_trial(
    config: &ExperimentConfig,
    reference: &TorsoModel,
    templates: &LandmarkTemplates,
    trial: usize,
) -> Result<Vec<LandingTrial>> {
    let exp = &config.landing;
    let seed = config.trial_seed(trial);
    let pose = planar_perturbation(derive_seed(seed, 1), exp.max_translation_mm, exp.max_rotation_deg);
    let torso = reference.with_pose(pose)?;
    let frames = capture_sequence(&torso, &config.protocol, seed)?;
    let rec = reconstruct(&frames, true, &config.reconstruction)?;
    let idx = frontal_frame_index(&frames).expect("protocol has frames");
    let frame = &frames[idx];
    let detected = detect_landmarks(&frame.color, templates, &exp.landing.search)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 2));
    let (w, h) = (frame.depth.width(), frame.depth.height());
    let landmarks = LandmarkSet {
        nipple_left: jitter(detected.nipple_left, &mut rng, exp.landmark_jitter_px, w, h),
        nipple_right: jitter(detected.nipple_right, &mut rng, exp.landmark_jitter_px, w, h),
        navel: jitter(detected.navel, &mut rng, exp.landmark_jitter_px, w, h),
        ..detected
    };
    let est = landing_from_landmarks(&landmarks, frame, &rec.refinements()[idx], rec.merged(), &exp.landing)?;
    let a = |v: Vector3<f64>| [v.x, v.y, v.z];
    Ok(Valve::ALL
        .iter()
        .map(|&v| LandingTrial {
            trial,
            seed,
            valve: v,
            error_mm: (est.positions.get(v) - torso.valves.get(v)).norm(),
            estimate: a(est.positions.get(v)),
            truth: a(torso.valves.get(v)),
        })
        .collect())
}

pub fn landing_trials(config: &ExperimentConfig) -> Result<Vec<LandingTrial>> {
    config.validate()?;
    let reference = TorsoModel::new(
        config.torso.clone(),
        config.landing.landing.map.clone(),
        RigidTransform::identity(),
    )?;
    let templates = marker_templates(&reference, &config.protocol)?;
    let nested = (0..config.trials)
        .into_par_iter()
        .map(|t| landing_trial(config, &reference, &templates, t))
        .collect::<Result<Vec<_>>>()?;
    let mut rows: Vec<LandingTrial> = nested.into_iter().flatten().collect();
    rows.sort_by(|a, b| a.valve.cmp(&b.valve).then(a.trial.cmp(&b.trial)));
    Ok(rows)
}

pub fn run_landing_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    let rows = landing_trials(config)?;
    let xyz = |p: [f64; 3]| p.iter().map(|v| num(*v)).collect::<Vec<_>>();
    let table = CsvTable {
        name: "landing_trials",
        columns: vec![
            "valve", "trial", "seed", "error_mm", "est_x", "est_y", "est_z", "true_x", "true_y", "true_z",
        ],
        rows: rows
            .iter()
            .map(|r| {
                let mut row = vec![
                    r.valve.name().to_string(),
                    r.trial.to_string(),
                    r.seed.to_string(),
                    num(r.error_mm),
                ];
                row.extend(xyz(r.estimate));
                row.extend(xyz(r.truth));
                row
            })
            .collect(),
    };
    let errors = |v: Valve| -> Vec<f64> { rows.iter().filter(|r| r.valve == v).map(|r| r.error_mm).collect() };
    let mut per_valve = BTreeMap::new();
    for v in Valve::ALL {
        per_valve.insert(v.name(), summarize(&errors(v))?);
    }
    let mut tricuspid_vs = BTreeMap::new();
    if config.trials >= 2 {
        for v in [Valve::Aortic, Valve::Pulmonary, Valve::Mitral] {
            tricuspid_vs.insert(v.name(), compute_stats(&errors(Valve::Tricuspid), &errors(v))?);
        }
    }
    Ok(ExperimentReport {
        kind: ExperimentKind::Landing,
        tables: vec![table],
        summary: serde_json::json!({
            "trials": config.trials,
            "seed": config.seed,
            "error_mm": per_valve,
            "tricuspid_vs": tricuspid_vs,
        }),
    })
}

// ---------------------------------------------------------------------------
// force experiment

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForceTrial {
    pub target: f64,
    pub trial: usize,
    pub seed: u64,
    pub push_in_mm: f64,
    pub metrics: TraceMetrics,
}

pub fn static_force_trials(config: &ExperimentConfig) -> Result<Vec<ForceTrial>> {
    config.validate()?;
    let f = &config.force;
    let mut rows = Vec::new();
    for &target in &f.targets {
        for trial in 0..config.trials {
            let seed = config.trial_seed(trial);
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 3));
            let push_in = if f.push_in_max_mm > f.push_in_min_mm {
                rng.random_range(f.push_in_min_mm..=f.push_in_max_mm)
            } else {
                f.push_in_min_mm
            };
            let defaults = ContactSimConfig::<f64>::static_scenario(target, push_in, seed);
            let sim = ContactSimConfig {
                target_force: target,
                base_trajectory: defaults.base_trajectory,
                seed,
                ..f.contact
            };
            let trace = simulate_contact(&sim)?;
            rows.push(ForceTrial {
                target,
                trial,
                seed,
                push_in_mm: push_in,
                metrics: trace_metrics(&trace, target)?,
            });
        }
    }
    rows.sort_by(|a, b| a.target.total_cmp(&b.target).then(a.trial.cmp(&b.trial)));
    Ok(rows)
}

/// The approach-and-hold run; seeded by the master seed.
pub fn dynamic_force_trace(config: &ExperimentConfig) -> Result<(ForceTrace<f64>, TraceMetrics)> {
    let f = &config.force;
    let defaults = ContactSimConfig::<f64>::dynamic_scenario(f.dynamic_target, config.seed);
    let sim = ContactSimConfig {
        target_force: f.dynamic_target,
        base_trajectory: defaults.base_trajectory,
        duration: defaults.duration,
        seed: config.seed,
        ..f.contact
    };
    let trace = simulate_contact(&sim)?;
    let metrics = trace_metrics(&trace, f.dynamic_target)?;
    Ok((trace, metrics))
}

pub fn run_force_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    let rows = static_force_trials(config)?;
    let (trace, dynamic) = dynamic_force_trace(config)?;
    let opt = |v: Option<f64>| v.map_or_else(String::new, num);
    let static_table = CsvTable {
        name: "force_static",
        columns: vec![
            "target_N",
            "trial",
            "seed",
            "push_in_mm",
            "steady_force_N",
            "steady_error_pct",
            "peak_force_N",
            "overshoot_pct",
            "settling_s",
        ],
        rows: rows
            .iter()
            .map(|r| {
                vec![
                    format!("{}", r.target),
                    r.trial.to_string(),
                    r.seed.to_string(),
                    num(r.push_in_mm),
                    num(r.metrics.steady_state_force),
                    num(r.metrics.steady_state_error_pct),
                    num(r.metrics.peak_force),
                    num(r.metrics.overshoot_pct),
                    opt(r.metrics.settling_time_s),
                ]
            })
            .collect(),
    };
    let trace_table = CsvTable {
        name: "force_dynamic_trace",
        columns: vec!["seed", "t_s", "force_N", "compression_mm", "actuator_mm", "in_contact"],
        rows: trace
            .samples
            .iter()
            .map(|s| {
                vec![
                    config.seed.to_string(),
                    format!("{:.4}", s.t),
                    num(s.force),
                    num(s.compression),
                    num(s.actuator),
                    u8::from(s.in_contact).to_string(),
                ]
            })
            .collect(),
    };
    let mut per_target = Vec::new();
    for &target in &config.force.targets {
        let steady: Vec<f64> = rows
            .iter()
            .filter(|r| r.target == target)
            .map(|r| r.metrics.steady_state_force)
            .collect();
        let worst = rows
            .iter()
            .filter(|r| r.target == target)
            .map(|r| r.metrics.steady_state_error_pct.abs())
            .fold(0.0, f64::max);
        per_target.push(serde_json::json!({
            "target_N": target,
            "steady_force_N": summarize(&steady)?,
            "worst_abs_error_pct": worst,
        }));
    }
    Ok(ExperimentReport {
        kind: ExperimentKind::Force,
        tables: vec![static_table, trace_table],
        summary: serde_json::json!({
            "trials": config.trials,
            "seed": config.seed,
            "static": per_target,
            "dynamic": { "seed": config.seed, "target_N": config.force.dynamic_target, "metrics": dynamic },
        }),
    })
}

pub fn run_experiment(kind: ExperimentKind, config: &ExperimentConfig) -> Result<ExperimentReport> {
    match kind {
        ExperimentKind::Registration => run_registration_experiment(config),
        ExperimentKind::Landing => run_landing_experiment(config),
        ExperimentKind::Force => run_force_experiment(config),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegen::LidarNoiseModel;

    #[test]
    fn identical_samples_have_no_difference() {
        let s = compute_stats(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(s.t, 0.0);
        assert_eq!(s.p, 1.0);
        let c = compute_stats(&[4.0, 4.0], &[4.0, 4.0]).unwrap();
        assert_eq!((c.t, c.p), (0.0, 1.0));
    }

    #[test]
    fn well_separated_samples() {
        let s = compute_stats(&[1.0, 2.0, 3.0], &[101.0, 102.0, 103.0]).unwrap();
        assert!(s.p < 1e-6, "{}", s.p);
        assert_eq!(s.df, 4.0);
        assert!((s.t + 100.0 / (2.0f64 / 3.0).sqrt()).abs() < 1e-9);
    }

    #[test]
    fn p_values_match_closed_forms() {
        // two degrees of freedom: p = 1 - |t| / sqrt(t² + 2)
        let s = compute_stats(&[1.0, 3.0], &[2.0, 4.0]).unwrap();
        assert!((s.t + 0.5f64.sqrt()).abs() < 1e-12);
        let expect = 1.0 - s.t.abs() / (s.t * s.t + 2.0).sqrt();
        assert!((s.p - expect).abs() < 1e-9, "{} vs {expect}", s.p);

        let s = compute_stats(&[0.0, 2.0, 1.0], &[7.0, 9.0, 8.0]).unwrap();
        assert_eq!(s.df, 4.0);
        // four degrees of freedom: p = 1 - |t|(6 + t²) / (t² + 4)^{3/2}
        let t2 = s.t * s.t;
        let expect = 1.0 - s.t.abs() * (6.0 + t2) / (t2 + 4.0).powf(1.5);
        assert!((s.p - expect).abs() < 1e-9, "{} vs {expect}", s.p);
    }

    #[test]
    fn swapping_groups_flips_t() {
        let a = [1.0, 2.5, 3.0, 4.2];
        let b = [2.0, 3.5, 5.0];
        let ab = compute_stats(&a, &b).unwrap();
        let ba = compute_stats(&b, &a).unwrap();
        assert_eq!(ab.t, -ba.t);
        assert_eq!(ab.p, ba.p);
        assert!((0.0..=1.0).contains(&ab.p));
    }

    #[test]
    fn too_few_samples_rejected() {
        assert_eq!(compute_stats(&[1.0], &[1.0, 2.0]).unwrap_err().kind(), "invalid_input");
    }

    #[test]
    fn csv_is_versioned() {
        let t = CsvTable {
            name: "demo",
            columns: vec!["a", "b"],
            rows: vec![vec!["1".into(), "2".into()]],
        };
        assert_eq!(t.to_csv_string(), "# auscult demo v1\na,b\n1,2\n");
    }

    fn small_config() -> ExperimentConfig {
        ExperimentConfig {
            trials: 2,
            seed: 17,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn zero_trials_rejected() {
        let cfg = ExperimentConfig {
            trials: 0,
            ..ExperimentConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn force_rows_carry_seeds_and_replay() {
        let cfg = small_config();
        let a = run_force_experiment(&cfg).unwrap();
        let b = run_force_experiment(&cfg).unwrap();
        let t = a.table("force_static").unwrap();
        assert_eq!(t.rows.len(), 6);
        assert_eq!(t.to_csv_string(), b.table("force_static").unwrap().to_csv_string());
        let seed_col = t.column("seed").unwrap();
        for (i, r) in t.rows.iter().enumerate() {
            assert_eq!(r[seed_col], cfg.trial_seed(i % 2).to_string());
        }
        // replay one row on its own
        let rows = static_force_trials(&cfg).unwrap();
        let r = &rows[3];
        let sim = ContactSimConfig::static_scenario(r.target, r.push_in_mm, r.seed);
        let m = trace_metrics(&simulate_contact(&sim).unwrap(), r.target).unwrap();
        assert_eq!(m, r.metrics);
    }

    #[test]
    fn noise_free_landing_is_accurate() {
        let mut cfg = small_config();
        cfg.trials = 1;
        cfg.protocol.noise = LidarNoiseModel::noise_free();
        cfg.landing.max_translation_mm = 0.0;
        cfg.landing.max_rotation_deg = 0.0;
        cfg.landing.landmark_jitter_px = 0;
        let rows = landing_trials(&cfg).unwrap();
        assert_eq!(rows.len(), 4);
        for r in &rows {
            assert!(r.error_mm <= 2.0, "{:?}", r);
        }
    }

    #[test]
    fn feedback_reconstruction_beats_identity_start() {
        let cfg = ExperimentConfig {
            trials: 1,
            registration: RegistrationExperiment { heights: vec![300.0] },
            ..small_config()
        };
        let rows = registration_trials(&cfg).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows[0].feedback && !rows[1].feedback);
        assert!(rows[0].rms_mm * 2.0 <= rows[1].rms_mm, "{rows:?}");
    }
}
