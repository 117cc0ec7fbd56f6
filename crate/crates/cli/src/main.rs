use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use auscult_core::contact::{simulate_contact, trace_metrics, ContactSimConfig};
use auscult_core::geometry::{compose, PoseRecord};
use auscult_core::harness::{
    compute_stats, reconstruct, run_experiment, ExperimentConfig, ExperimentKind, ReconstructionConfig,
};
use auscult_core::landmarks::{estimate_landing_positions, LandingConfig, LandmarkSet};
use auscult_core::pointcloud::ply::save_ply;
use auscult_core::scenegen::{generate_scene, load_scene, SceneConfig};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

#[derive(Parser)]
#[command(
    name = "auscult",
    version,
    about = "Robotic auscultation pipeline on synthetic torso scenes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON configuration; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory, created if missing.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Render a capture sequence of a synthetic torso.
    GenerateScene(Common),
    /// Multi-way registration of a scene's captures.
    Register {
        #[command(flatten)]
        common: Common,
        /// Scene manifest; overrides `scene` in the configuration.
        #[arg(long)]
        scene: Option<PathBuf>,
    },
    /// Landmark detection and valve landing positions for a scene.
    EstimateLandings {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        scene: Option<PathBuf>,
    },
    /// Force-controlled contact against the spring-loaded end effector.
    SimulateContact(Common),
    /// Run one of the trial experiments.
    Experiment {
        kind: KindArg,
        #[command(flatten)]
        common: Common,
    },
    /// Pairwise t-tests over named sample groups.
    Stats(Common),
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Registration,
    Landing,
    Force,
}

impl From<KindArg> for ExperimentKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Registration => ExperimentKind::Registration,
            KindArg::Landing => ExperimentKind::Landing,
            KindArg::Force => ExperimentKind::Force,
        }
    }
}

struct Failure {
    kind: &'static str,
    message: String,
}

impl From<auscult_core::Error> for Failure {
    fn from(e: auscult_core::Error) -> Self {
        Failure {
            kind: e.kind(),
            message: e.to_string(),
        }
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure {
            kind: "json",
            message: e.to_string(),
        }
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure {
        kind: "io",
        message: format!("{}: {e}", path.display()),
    }
}

type CliResult<T> = Result<T, Failure>;

fn read_config<C: DeserializeOwned + Default>(path: Option<&Path>) -> CliResult<C> {
    match path {
        None => Ok(C::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| io_failure(p, e))?;
            Ok(serde_json::from_str(&text)?)
        }
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| io_failure(path, e))
}

fn create_out(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| io_failure(dir, e))
}

/// Configuration shared by `register` and `estimate-landings`.
#[derive(Debug, Default, Deserialize)]
#[serde(default)]
struct PipelineConfig {
    scene: Option<PathBuf>,
    /// Start captures at their capture poses; defaults to true.
    feedback: Option<bool>,
    reconstruction: ReconstructionConfig,
    landing: LandingConfig,
}

impl PipelineConfig {
    fn scene_path(&self, flag: Option<PathBuf>) -> CliResult<PathBuf> {
        flag.or_else(|| self.scene.clone()).ok_or(Failure {
            kind: "invalid_input",
            message: "no scene manifest given (--scene or \"scene\" in the config)".into(),
        })
    }
}

fn cmd_generate_scene(c: &Common) -> CliResult<Value> {
    let cfg: SceneConfig = read_config(c.config.as_deref())?;
    let seed = c.seed.unwrap_or(0);
    let scene = generate_scene(&cfg, seed)?;
    create_out(&c.out)?;
    let manifest = scene.write(&c.out)?;
    log::info!("wrote {} frames to {}", scene.frames.len(), c.out.display());
    Ok(json!({ "manifest": manifest, "frames": scene.frames.len(), "seed": seed }))
}

fn cmd_register(c: &Common, scene: Option<PathBuf>) -> CliResult<Value> {
    let cfg: PipelineConfig = read_config(c.config.as_deref())?;
    let loaded = load_scene(cfg.scene_path(scene)?)?;
    let feedback = cfg.feedback.unwrap_or(true);
    let rec = reconstruct(&loaded.frames, feedback, &cfg.reconstruction)?;
    create_out(&c.out)?;
    let poses: Vec<PoseRecord> = rec
        .initial
        .iter()
        .zip(rec.refinements())
        .map(|(init, refine)| PoseRecord::from(&compose(refine, init)))
        .collect();
    let poses_path = c.out.join("poses.json");
    write_json(&poses_path, &poses)?;
    let report_path = c.out.join("registration.json");
    write_json(
        &report_path,
        &json!({ "feedback": feedback, "report": rec.result.report() }),
    )?;
    let ply_path = c.out.join("merged.ply");
    save_ply(rec.merged(), &ply_path)?;
    Ok(json!({
        "poses": poses_path,
        "report": report_path,
        "merged": ply_path,
        "iterations": rec.result.iterations,
        "merged_points": rec.merged.len(),
    }))
}

#[derive(Serialize)]
struct LandingOutput {
    frame: usize,
    landmarks: LandmarkSet,
    positions: auscult_core::landmarks::LandingRecord,
    /// Distance to the scene's ground-truth valves, mm.
    error_mm: BTreeMap<&'static str, f64>,
}

fn cmd_estimate_landings(c: &Common, scene: Option<PathBuf>) -> CliResult<Value> {
    let cfg: PipelineConfig = read_config(c.config.as_deref())?;
    let loaded = load_scene(cfg.scene_path(scene)?)?;
    let rec = reconstruct(&loaded.frames, cfg.feedback.unwrap_or(true), &cfg.reconstruction)?;
    let est = estimate_landing_positions(
        &loaded.frames,
        rec.refinements(),
        rec.merged(),
        &loaded.templates,
        &cfg.landing,
    )?;
    let truth = loaded.manifest.valves.positions::<f64>()?;
    let error_mm = auscult_core::landmarks::Valve::ALL
        .iter()
        .map(|&v| (v.name(), (est.positions.get(v) - truth.get(v)).norm()))
        .collect();
    let out = LandingOutput {
        frame: auscult_core::landmarks::frontal_frame_index(&loaded.frames).unwrap_or(0),
        landmarks: est.landmarks,
        positions: est.positions.record(),
        error_mm,
    };
    create_out(&c.out)?;
    let path = c.out.join("landings.json");
    write_json(&path, &out)?;
    Ok(json!({ "landings": path, "error_mm": out.error_mm }))
}

fn cmd_simulate_contact(c: &Common) -> CliResult<Value> {
    let mut cfg: ContactSimConfig<f64> = read_config(c.config.as_deref())?;
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    let trace = simulate_contact(&cfg)?;
    create_out(&c.out)?;
    let trace_path = c.out.join("force_trace.csv");
    fs::write(&trace_path, trace.to_csv()).map_err(|e| io_failure(&trace_path, e))?;
    let metrics = trace_metrics(&trace, cfg.target_force)?;
    let metrics_path = c.out.join("metrics.json");
    write_json(
        &metrics_path,
        &json!({ "seed": cfg.seed, "target_force": cfg.target_force, "metrics": metrics }),
    )?;
    Ok(json!({ "trace": trace_path, "metrics": metrics_path, "peak_force": metrics.peak_force }))
}

fn cmd_experiment(kind: KindArg, c: &Common) -> CliResult<Value> {
    let mut cfg: ExperimentConfig = read_config(c.config.as_deref())?;
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    let kind = ExperimentKind::from(kind);
    log::info!(
        "running {} experiment, {} trials, seed {}",
        kind.name(),
        cfg.trials,
        cfg.seed
    );
    let report = run_experiment(kind, &cfg)?;
    create_out(&c.out)?;
    let files = report.write(&c.out)?;
    Ok(json!({ "experiment": kind.name(), "files": files, "summary": report.summary }))
}

#[derive(Debug, Default, Deserialize)]
#[serde(default)]
struct StatsConfig {
    /// Named sample groups; every pair is compared.
    groups: BTreeMap<String, Vec<f64>>,
}

fn cmd_stats(c: &Common) -> CliResult<Value> {
    let cfg: StatsConfig = read_config(c.config.as_deref())?;
    if cfg.groups.len() < 2 {
        return Err(Failure {
            kind: "invalid_input",
            message: "at least two sample groups required".into(),
        });
    }
    let names: Vec<&String> = cfg.groups.keys().collect();
    let mut comparisons = Vec::new();
    for (i, a) in names.iter().enumerate() {
        for b in &names[i + 1..] {
            let stats = compute_stats(&cfg.groups[*a], &cfg.groups[*b])?;
            comparisons.push(json!({ "a": a, "b": b, "stats": stats }));
        }
    }
    create_out(&c.out)?;
    let path = c.out.join("stats.json");
    let value = json!({ "comparisons": comparisons });
    write_json(&path, &value)?;
    Ok(json!({ "stats": path, "comparisons": comparisons.len() }))
}

fn run(cli: Cli) -> CliResult<Value> {
    match cli.command {
        Command::GenerateScene(c) => cmd_generate_scene(&c),
        Command::Register { common, scene } => cmd_register(&common, scene),
        Command::EstimateLandings { common, scene } => cmd_estimate_landings(&common, scene),
        Command::SimulateContact(c) => cmd_simulate_contact(&c),
        Command::Experiment { kind, common } => cmd_experiment(kind, &common),
        Command::Stats(c) => cmd_stats(&c),
    }
}

fn fail(f: Failure) -> ExitCode {
    eprintln!("{}", json!({ "error": { "kind": f.kind, "message": f.message } }));
    ExitCode::from(1)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            return fail(Failure {
                kind: "usage",
                message: e.to_string().trim().to_string(),
            })
        }
    };
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(f) => fail(f),
    }
}
