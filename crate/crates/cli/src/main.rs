//! `deskmanip` command-line front end.
//!
//! Exit codes:
//!
//! | code | meaning |
//! |------|---------|
//! | 0 | success |
//! | 1 | other failure (I/O while writing outputs, internal error) |
//! | 2 | usage: bad flags or missing input files |
//! | 3 | configuration: invalid config file or backend settings |
//! | 4 | input: scene or task file that does not validate |
//! | 5 | grounding failed (mask pipeline, refinement or reasoner reply) |
//! | 6 | backtrack budget exhausted |
//! | 7 | tick limit reached |
//! | 8 | reasoner backend unavailable |

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;
use thiserror::Error;

use deskmanip_core::executor::{
    ground_subtask, ExecutionReport, Executor, ExecutorConfig, GroundingError, GroundingRecord,
    Outcome, TaskSpec,
};
use deskmanip_core::geometry::{Constraint3D, Vec3};
use deskmanip_core::kinematics::{ee_position, ArmModel};
use deskmanip_core::mask::{ground_parts, render_overlay};
use deskmanip_core::mppi::{solve_step, ControlSequence, CostSpec, MppiConfig};
use deskmanip_core::observation::write_gray_pgm;
use deskmanip_core::reasoner::{
    CostWeights, HttpBackend, HttpConfig, Reasoner, ReasonerError, ScriptedBackend, TaskPlan,
};
use deskmanip_core::refine::{build_grid, normalize_mask, render_grid_debug};
use deskmanip_core::sim::Scene;

const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("grounding failed: {0}")]
    Grounding(String),
    #[error("{0}")]
    Budget(String),
    #[error("{0}")]
    TickLimit(String),
    #[error("reasoner backend: {0}")]
    Backend(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Other(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Config(_) => 3,
            CliError::Input(_) => 4,
            CliError::Grounding(_) => 5,
            CliError::Budget(_) => 6,
            CliError::TickLimit(_) => 7,
            CliError::Backend(_) => 8,
        }
    }
}

fn reasoner_error(e: ReasonerError) -> CliError {
    match e {
        ReasonerError::BackendUnavailable(_) => CliError::Backend(e.to_string()),
        ReasonerError::Configuration(_) => CliError::Config(e.to_string()),
        other => CliError::Grounding(other.to_string()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BackendKind {
    Scripted,
    Http,
}

#[derive(Debug, Parser)]
#[command(name = "deskmanip", version, about = "Semantic-constraint grounding and MPPI execution")]
struct Cli {
    /// Worker threads for rendering and rollouts (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Args)]
struct Common {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    task: PathBuf,
    /// Executor config JSON; missing fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "scripted")]
    backend: BackendKind,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Ground every subtask of a task against the scene at time zero.
    Ground {
        #[command(flatten)]
        common: Common,
        /// Directory for overlay and grid renders.
        #[arg(long)]
        debug_render: Option<PathBuf>,
    },
    /// Run the full execution loop.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Time solver steps on an arm reaching a fixed target.
    Bench {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "ur5e")]
        arm: String,
        #[arg(long, default_value_t = 1000)]
        iterations: usize,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        horizon: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Report path; printed to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render a scene observation (manifest, depth, masks) at a time.
    Observe {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        time: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Other(e.to_string()))?;
    }
    match cli.command {
        Command::Ground {
            common,
            debug_render,
        } => cmd_ground(&common, debug_render.as_deref()),
        Command::Run { common, seed } => cmd_run(&common, seed),
        Command::Bench {
            config,
            arm,
            iterations,
            samples,
            horizon,
            seed,
            out,
        } => cmd_bench(config.as_deref(), &arm, iterations, samples, horizon, seed, out.as_deref()),
        Command::Observe { scene, time, out } => cmd_observe(&scene, time, &out),
    }
}

fn require_file(path: &Path, what: &str) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{what} file {} not found", path.display())))
    }
}

fn load_scene(path: &Path) -> Result<Scene, CliError> {
    require_file(path, "scene")?;
    Scene::load(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn load_config(path: Option<&Path>) -> Result<ExecutorConfig, CliError> {
    let Some(path) = path else {
        return Ok(ExecutorConfig::default());
    };
    require_file(path, "config")?;
    let text = fs::read_to_string(path).map_err(|e| CliError::Config(e.to_string()))?;
    let cfg: ExecutorConfig = serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
    Ok(cfg)
}

fn load_arm(name: &str) -> Result<ArmModel, CliError> {
    let path = Path::new(name);
    if path.is_file() {
        let text = fs::read_to_string(path).map_err(|e| CliError::Input(e.to_string()))?;
        ArmModel::from_json(&text).map_err(|e| CliError::Input(e.to_string()))
    } else {
        ArmModel::builtin(name).map_err(|e| CliError::Input(e.to_string()))
    }
}

struct Session {
    scene: Scene,
    task: TaskSpec,
    cfg: ExecutorConfig,
    reasoner: Reasoner,
    plan: TaskPlan,
}

fn open_session(c: &Common) -> Result<Session, CliError> {
    let scene = load_scene(&c.scene)?;
    require_file(&c.task, "task")?;
    let task = TaskSpec::load(&c.task).map_err(|e| CliError::Input(e.to_string()))?;
    let cfg = load_config(c.config.as_deref())?;
    fs::create_dir_all(&c.out).map_err(|e| CliError::Other(format!("{}: {e}", c.out.display())))?;
    let backend: Box<dyn deskmanip_core::reasoner::Backend> = match c.backend {
        BackendKind::Scripted => {
            let fixture = task.reasoner_fixture.as_ref().ok_or_else(|| {
                CliError::Config("scripted backend needs reasoner_fixture in the task file".into())
            })?;
            require_file(fixture, "reasoner fixture")?;
            Box::new(ScriptedBackend::from_file(fixture).map_err(|e| CliError::Config(e.to_string()))?)
        }
        BackendKind::Http => {
            let hc = HttpConfig::from_env().map_err(|e| CliError::Config(e.to_string()))?;
            Box::new(HttpBackend::new(hc).map_err(|e| CliError::Config(e.to_string()))?)
        }
    };
    let reasoner = Reasoner::new(backend)
        .with_audit_log(&c.out.join("reasoner_audit.jsonl"))
        .map_err(|e| CliError::Other(e.to_string()))?;
    let summary = json!({
        "scene": scene.spec.name,
        "objects": scene.spec.objects.len(),
    });
    let plan = reasoner
        .plan(&task.instruction, &summary)
        .map_err(reasoner_error)?;
    Ok(Session {
        scene,
        task,
        cfg,
        reasoner,
        plan,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let body = serde_json::to_string_pretty(value).map_err(|e| CliError::Other(e.to_string()))?;
    fs::write(path, body + "\n").map_err(|e| CliError::Other(format!("{}: {e}", path.display())))
}

#[derive(Serialize)]
struct GroundingOutput<'a> {
    schema_version: u32,
    scene: &'a str,
    instruction: &'a str,
    backend: &'a str,
    plan: &'a TaskPlan,
    subtasks: Vec<GroundingRecord>,
}

fn grounding_error(e: GroundingError) -> CliError {
    match e {
        GroundingError::Reasoner(r) => reasoner_error(r),
        other => CliError::Grounding(other.to_string()),
    }
}

fn cmd_ground(c: &Common, debug_render: Option<&Path>) -> Result<(), CliError> {
    let s = open_session(c)?;
    let mut records = Vec::new();
    for (i, subtask) in s.plan.subtasks.iter().enumerate() {
        let g = ground_subtask(&s.scene, &s.reasoner, subtask, &s.cfg, 0.0, i as u64)
            .map_err(|e| match grounding_error(e) {
                CliError::Grounding(m) => CliError::Grounding(format!("subtask {}: {m}", subtask.id)),
                other => other,
            })?;
        records.push(g.record);
    }
    if let Some(dir) = debug_render {
        write_debug_renders(&s, &records, dir)?;
    }
    write_json(
        &c.out.join("grounding.json"),
        &GroundingOutput {
            schema_version: REPORT_SCHEMA_VERSION,
            scene: &s.scene.spec.name,
            instruction: &s.task.instruction,
            backend: s.reasoner.backend_name(),
            plan: &s.plan,
            subtasks: records,
        },
    )
}

fn write_debug_renders(s: &Session, records: &[GroundingRecord], dir: &Path) -> Result<(), CliError> {
    let other = |e: &dyn std::fmt::Display| CliError::Other(e.to_string());
    fs::create_dir_all(dir).map_err(|e| other(&e))?;
    let rendering = s.scene.render(0.0).map_err(|e| other(&e))?;
    let obs = &rendering.observation;
    let parts = ground_parts(&obs.masks, &s.cfg.filter).map_err(|e| other(&e))?;
    let overlay = render_overlay(&parts.clustered, &parts.report.centroids);
    write_gray_pgm(&dir.join("overlay.pgm"), obs.masks.width(), obs.masks.height(), &overlay)
        .map_err(|e| other(&e))?;
    for r in records {
        if r.refinement.as_ref().and_then(|f| f.geometric.as_ref()).is_none() {
            continue;
        }
        let entry = parts.report.centroids.iter().find(|c| c.label == r.label);
        let Some(entry) = entry else { continue };
        let mask = &parts.clustered.masks()[entry.mask_index];
        let nm = normalize_mask(mask, &s.cfg.refine).map_err(|e| other(&e))?;
        let grid = build_grid(&nm, &s.cfg.refine).map_err(|e| other(&e))?;
        let img = render_grid_debug(&nm, &grid);
        let path = dir.join(format!("grid_subtask{}.pgm", r.subtask));
        write_gray_pgm(&path, nm.canvas.width(), nm.canvas.height(), &img).map_err(|e| other(&e))?;
    }
    Ok(())
}

fn cmd_run(c: &Common, seed: u64) -> Result<(), CliError> {
    let mut s = open_session(c)?;
    s.cfg.mppi.seed = seed;
    let arm = load_arm(&s.scene.spec.arm)?;
    let report = Executor {
        scene: &s.scene,
        arm: &arm,
        reasoner: &s.reasoner,
        cfg: s.cfg.clone(),
    }
    .run(&s.plan)
    .map_err(|e| CliError::Config(e.to_string()))?;
    write_run_outputs(&c.out, &report)?;
    let failure = report.failure.clone().unwrap_or_default();
    match report.outcome {
        Outcome::Completed => Ok(()),
        Outcome::BudgetExhausted => Err(CliError::Budget(failure)),
        Outcome::TickLimit => Err(CliError::TickLimit(failure)),
        Outcome::GroundingFailed => Err(CliError::Grounding(failure)),
    }
}

fn write_run_outputs(out: &Path, report: &ExecutionReport) -> Result<(), CliError> {
    write_json(&out.join("summary.json"), report)?;
    let path = out.join("trajectory.jsonl");
    let mut f = std::io::BufWriter::new(
        fs::File::create(&path).map_err(|e| CliError::Other(format!("{}: {e}", path.display())))?,
    );
    for t in &report.ticks {
        let line = serde_json::to_string(t).map_err(|e| CliError::Other(e.to_string()))?;
        writeln!(f, "{line}").map_err(|e| CliError::Other(e.to_string()))?;
    }
    f.flush().map_err(|e| CliError::Other(e.to_string()))
}

#[derive(Debug, Serialize)]
struct Latency {
    p50: f64,
    p95: f64,
    p99: f64,
    mean: f64,
    max: f64,
}

#[derive(Debug, Serialize)]
struct BenchReport {
    schema_version: u32,
    arm: String,
    dof: usize,
    iterations: usize,
    threads: usize,
    mppi: MppiConfig,
    target: [f64; 3],
    final_distance: f64,
    /// Per-step wall-clock latency, microseconds.
    wall_us: Latency,
}

/// Nearest-rank percentile of sorted values.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

fn cmd_bench(
    config: Option<&Path>,
    arm_name: &str,
    iterations: usize,
    samples: Option<usize>,
    horizon: Option<usize>,
    seed: u64,
    out: Option<&Path>,
) -> Result<(), CliError> {
    if iterations == 0 {
        return Err(CliError::Usage("iterations must be positive".into()));
    }
    let mut cfg = load_config(config)?.mppi;
    cfg.samples = samples.unwrap_or(cfg.samples);
    cfg.horizon = horizon.unwrap_or(cfg.horizon);
    cfg.seed = seed;
    let arm = load_arm(arm_name)?;
    cfg.sampling_factor(arm.dof())
        .map_err(|e| CliError::Config(e.to_string()))?;

    // A point a short reach in front of the home pose.
    let home = arm.home_state();
    let start = ee_position(&arm, home.theta.as_slice()).map_err(|e| CliError::Other(e.to_string()))?;
    let target = start + Vec3::new(0.1, 0.1, -0.1);
    let weights = CostWeights {
        position: 1.0,
        orientation: 0.0,
        collision: 0.0,
    };
    let spec = CostSpec::new(&Constraint3D::at(target, "bench"), weights, None)
        .map_err(|e| CliError::Other(e.to_string()))?;

    let mut x = home;
    let mut mean = ControlSequence::zeros(cfg.horizon, arm.dof());
    let mut lat = Vec::with_capacity(iterations);
    for it in 0..iterations {
        let t0 = Instant::now();
        let step = solve_step(&arm, &x, &spec, &cfg, &mean, it as u64)
            .map_err(|e| CliError::Other(e.to_string()))?;
        lat.push(t0.elapsed().as_secs_f64() * 1e6);
        x = arm
            .step(&x, step.command.as_slice(), cfg.dt)
            .map_err(|e| CliError::Other(e.to_string()))?
            .state;
        mean = step.next_mean;
    }
    let end = ee_position(&arm, x.theta.as_slice()).map_err(|e| CliError::Other(e.to_string()))?;
    let mut sorted = lat.clone();
    sorted.sort_by(f64::total_cmp);
    let report = BenchReport {
        schema_version: REPORT_SCHEMA_VERSION,
        arm: arm.name.clone(),
        dof: arm.dof(),
        iterations,
        threads: rayon::current_num_threads(),
        mppi: cfg,
        target: target.into(),
        final_distance: (end - target).norm(),
        wall_us: Latency {
            p50: percentile(&sorted, 50.0),
            p95: percentile(&sorted, 95.0),
            p99: percentile(&sorted, 99.0),
            mean: lat.iter().sum::<f64>() / lat.len() as f64,
            max: sorted[sorted.len() - 1],
        },
    };
    match out {
        Some(p) => write_json(p, &report),
        None => {
            println!(
                "{}",
                serde_json::to_string_pretty(&report).map_err(|e| CliError::Other(e.to_string()))?
            );
            Ok(())
        }
    }
}

fn cmd_observe(scene: &Path, time: f64, out: &Path) -> Result<(), CliError> {
    if !(time >= 0.0) {
        return Err(CliError::Usage("time must be >= 0".into()));
    }
    let scene = load_scene(scene)?;
    let r = scene.render(time).map_err(|e| CliError::Input(e.to_string()))?;
    let manifest = r
        .observation
        .save(out, "observation")
        .map_err(|e| CliError::Other(e.to_string()))?;
    let ids: Vec<&str> = r
        .mask_objects
        .iter()
        .map(|&i| scene.spec.objects[i].id.as_str())
        .collect();
    write_json(
        &out.join("objects.json"),
        &json!({ "schema_version": REPORT_SCHEMA_VERSION, "time": time, "mask_objects": ids }),
    )?;
    println!("{}", manifest.display());
    Ok(())
}
