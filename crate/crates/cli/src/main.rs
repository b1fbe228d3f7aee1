//! `occface`: occlusion-aware face reconstruction from the command line.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand};
use log::info;

use occface::fitting::ReconstructionState;
use occface::io::KeyValues;
use occface::pipeline::{
    self, load_settings, merge_settings, outputs, PipelineError, RunConfig, RunMetrics, Stage1Metrics, Stage2Metrics,
    SuiteRow,
};
use occface::synth::{self, Difficulty, SceneConfig, DEFAULT_MODEL_SEED};
use occface::verify;

#[derive(Parser)]
#[command(
    name = "occface",
    version,
    about = "Occlusion-aware single-image 3D face reconstruction"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compute the occlusion mask and the hollowed-out image.
    Mask(RunArgs),
    /// Stage one: mask, hollow-out and completion.
    Complete(RunArgs),
    /// Fit the morphable model to the completed image from stage one.
    Fit(RunArgs),
    /// Base depth, bump and detailed depth from a stored fit.
    Detail(RunArgs),
    /// Both stages end to end, for one input or a whole scene suite.
    Run {
        #[command(flatten)]
        args: RunArgs,
        /// Run every scene_* directory under this root.
        #[arg(long, conflicts_with = "scene")]
        suite: Option<PathBuf>,
    },
    /// Write the synthetic model and seeded scenes.
    Synth(SynthArgs),
    /// Run the built-in invariant and gradient checks.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Instances per gradient check.
        #[arg(long, default_value_t = 10)]
        instances: usize,
    },
}

/// Every setting can come from `--config`; flags override the file.
#[derive(Args, Default)]
struct RunArgs {
    /// Settings file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Scene directory supplying default input paths.
    #[arg(long)]
    scene: Option<String>,
    #[arg(long)]
    image: Option<String>,
    #[arg(long)]
    landmarks: Option<String>,
    #[arg(long)]
    parsing: Option<String>,
    /// Externally completed image used instead of the built-in fill.
    #[arg(long)]
    completion: Option<String>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    output: Option<String>,
    /// Occlusion-free reference for stage-one losses.
    #[arg(long)]
    clean: Option<String>,
    #[arg(long)]
    depth_gt: Option<String>,
    #[arg(long)]
    bump_gt: Option<String>,
    /// Bump half-range in mm; 0 disables the bump.
    #[arg(long)]
    delta_max: Option<String>,
    #[arg(long)]
    levels: Option<String>,
    /// Comma-separated parsing labels treated as occluders.
    #[arg(long)]
    occluder_labels: Option<String>,
    #[arg(long)]
    margin: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    max_iterations: Option<String>,
    #[arg(long)]
    landmark_weight: Option<String>,
    #[arg(long)]
    photo_weight: Option<String>,
    #[arg(long)]
    prior_weight: Option<String>,
    #[arg(long)]
    convergence_tol: Option<String>,
    #[arg(long)]
    damping_init: Option<String>,
    #[arg(long)]
    camera_distance: Option<String>,
    #[arg(long)]
    harmonic_tolerance: Option<String>,
    #[arg(long)]
    harmonic_max_sweeps: Option<String>,
}

impl RunArgs {
    fn flags(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        let pairs = [
            ("scene", &self.scene),
            ("image", &self.image),
            ("landmarks", &self.landmarks),
            ("parsing", &self.parsing),
            ("completion", &self.completion),
            ("model", &self.model),
            ("output", &self.output),
            ("clean", &self.clean),
            ("depth_gt", &self.depth_gt),
            ("bump_gt", &self.bump_gt),
            ("delta_max", &self.delta_max),
            ("levels", &self.levels),
            ("occluder_labels", &self.occluder_labels),
            ("margin", &self.margin),
            ("seed", &self.seed),
            ("max_iterations", &self.max_iterations),
            ("landmark_weight", &self.landmark_weight),
            ("photo_weight", &self.photo_weight),
            ("prior_weight", &self.prior_weight),
            ("convergence_tol", &self.convergence_tol),
            ("damping_init", &self.damping_init),
            ("camera_distance", &self.camera_distance),
            ("harmonic_tolerance", &self.harmonic_tolerance),
            ("harmonic_max_sweeps", &self.harmonic_max_sweeps),
        ];
        for (key, value) in pairs {
            if let Some(v) = value {
                kv.set(key, v.as_str());
            }
        }
        kv
    }

    fn settings(&self) -> Result<KeyValues, PipelineError> {
        let base = match &self.config {
            Some(path) => load_settings(path)?,
            None => KeyValues::new(),
        };
        Ok(merge_settings(&base, &self.flags()))
    }

    fn run_config(&self) -> Result<RunConfig, PipelineError> {
        RunConfig::from_settings(&self.settings()?)
    }
}

#[derive(Args)]
struct SynthArgs {
    /// Directory receiving model.ofmm and scene_<seed>/ folders.
    #[arg(long)]
    out: PathBuf,
    /// First scene seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    count: u64,
    /// none, small or large.
    #[arg(long, default_value = "none")]
    difficulty: String,
    #[arg(long, default_value_t = DEFAULT_MODEL_SEED)]
    model_seed: u64,
    #[arg(long, default_value_t = 128)]
    width: usize,
    #[arg(long, default_value_t = 128)]
    height: usize,
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.6}"))
}

fn print_stage1(m: &Stage1Metrics) {
    println!("stage one");
    println!("  {:<26}{}", "mask pixels", m.mask_pixels);
    println!("  {:<26}{}", "completion", m.completion);
    println!("  {:<26}{}", "loss reference", m.reference);
    println!("  {:<26}{}", "pixel loss", opt(m.pixel_loss));
    println!("  {:<26}{}", "style loss", opt(m.style_loss));
    println!("  {:<26}{}", "synthesis loss", opt(m.synthesis_loss));
}

fn print_stage2(m: &Stage2Metrics) {
    println!("stage two");
    println!("  {:<26}{:.6e}", "cost total", m.cost_total);
    println!("  {:<26}{:.6e}", "cost landmark", m.cost_landmark);
    println!("  {:<26}{:.6e}", "cost photometric", m.cost_photo);
    println!("  {:<26}{:.6e}", "cost prior", m.cost_prior);
    println!(
        "  {:<26}{} ({})",
        "fit iterations",
        m.fit_iterations,
        if m.fit_converged { "converged" } else { "not converged" }
    );
    println!("  {:<26}{:.6}", "landmark rmse (px)", m.landmark_rmse_px);
    println!("  {:<26}{}", "bump source", m.bump_source);
    println!("  {:<26}{}", "delta max (mm)", opt(m.delta_max_mm));
    println!("  {:<26}{}", "base rmse in (mm)", opt(m.base_depth_rmse_inside_mm));
    println!("  {:<26}{}", "base rmse out (mm)", opt(m.base_depth_rmse_outside_mm));
    println!(
        "  {:<26}{}",
        "detailed rmse in (mm)",
        opt(m.detailed_depth_rmse_inside_mm)
    );
    println!(
        "  {:<26}{}",
        "detailed rmse out (mm)",
        opt(m.detailed_depth_rmse_outside_mm)
    );
    println!("  {:<26}{}", "bump l1", opt(m.bump_l1));
}

fn print_timings(timings: &[(&str, Duration)]) {
    println!("runtime");
    for (name, t) in timings {
        println!("  {:<26}{:.3} s", name, t.as_secs_f64());
    }
}

fn print_suite(rows: &[SuiteRow]) {
    println!(
        "{:<14}{:>8}{:>12}{:>14}{:>14}{:>10}",
        "scene", "mask", "lmk rmse", "depth in", "depth out", "status"
    );
    for row in rows {
        match &row.metrics {
            Some(RunMetrics { stage2, .. }) => println!(
                "{:<14}{:>8}{:>12.4}{:>14}{:>14}{:>10}",
                row.scene,
                stage2.mask_pixels,
                stage2.landmark_rmse_px,
                opt(stage2.detailed_depth_rmse_inside_mm),
                opt(stage2.detailed_depth_rmse_outside_mm),
                "ok"
            ),
            None => println!(
                "{:<14}{:>8}{:>12}{:>14}{:>14}{:>10}  {}",
                row.scene,
                "-",
                "-",
                "-",
                "-",
                "failed",
                row.error.as_deref().unwrap_or_default()
            ),
        }
    }
}

fn load_fit(cfg: &RunConfig) -> Result<ReconstructionState, PipelineError> {
    let path = cfg.output_path(outputs::FIT);
    if !path.is_file() {
        return Err(PipelineError::Validation(format!(
            "{} is missing; run fit first",
            path.display()
        )));
    }
    ReconstructionState::load(&path).map_err(|e| PipelineError::Stage {
        stage: "load fit",
        message: e.to_string(),
    })
}

fn synth(args: &SynthArgs) -> Result<(), PipelineError> {
    let difficulty: Difficulty = args
        .difficulty
        .parse()
        .map_err(|e: synth::SynthError| PipelineError::Validation(e.to_string()))?;
    if args.count == 0 || args.width < 16 || args.height < 16 {
        return Err(PipelineError::Validation(
            "need count >= 1 and an image of at least 16x16".into(),
        ));
    }
    let cfg = SceneConfig {
        width: args.width,
        height: args.height,
        ..SceneConfig::default()
    };
    let seeds: Vec<u64> = (args.seed..args.seed + args.count).collect();
    let dirs =
        synth::write_suite(args.model_seed, &seeds, difficulty, &cfg, &args.out).map_err(|e| PipelineError::Stage {
            stage: "synth",
            message: e.to_string(),
        })?;
    println!(
        "wrote {} ({difficulty}) scenes and the model to {}",
        dirs.len(),
        args.out.display()
    );
    Ok(())
}

fn run_suite(args: &RunArgs, root: &Path) -> Result<bool, PipelineError> {
    let start = Instant::now();
    let rows = pipeline::run_suite(root, &args.settings()?)?;
    print_suite(&rows);
    print_timings(&[("suite", start.elapsed())]);
    Ok(rows.iter().all(|r| r.ok))
}

fn execute(command: Command) -> Result<ExitCode, PipelineError> {
    match command {
        Command::Mask(args) => {
            let cfg = args.run_config()?;
            let (mask, _) = pipeline::run_mask(&cfg)?;
            println!("mask pixels {}", mask.count());
        }
        Command::Complete(args) => {
            let cfg = args.run_config()?;
            let start = Instant::now();
            let out = pipeline::run_stage1(&cfg)?;
            print_stage1(&out.metrics);
            print_timings(&[("stage1", start.elapsed())]);
        }
        Command::Fit(args) => {
            let cfg = args.run_config()?;
            let (i1, _) = pipeline::load_stage1_outputs(&cfg)?;
            let start = Instant::now();
            let state = pipeline::run_fit(&cfg, &i1)?;
            println!(
                "cost {:.6e} after {} iterations",
                state.costs.total(),
                state.trace.len()
            );
            print_timings(&[("fit", start.elapsed())]);
        }
        Command::Detail(args) => {
            let cfg = args.run_config()?;
            let state = load_fit(&cfg)?;
            let (_, mask) = pipeline::load_stage1_outputs(&cfg)?;
            let start = Instant::now();
            let detail = pipeline::run_detail(&cfg, &state, &mask)?;
            println!("bump source {}", detail.bump_source);
            print_timings(&[("detail", start.elapsed())]);
        }
        Command::Run { args, suite } => match suite {
            Some(root) => {
                if !run_suite(&args, &root)? {
                    return Ok(ExitCode::from(3));
                }
            }
            None => {
                let cfg = args.run_config()?;
                let report = pipeline::run_all(&cfg)?;
                print_stage1(&report.metrics.stage1);
                print_stage2(&report.metrics.stage2);
                print_timings(&report.timings);
            }
        },
        Command::Synth(args) => synth(&args)?,
        Command::Verify { seed, instances } => {
            let mut checks = verify::run_all_checks(seed);
            checks.retain(|c| !c.name.ends_with("gradient"));
            checks.extend(verify::gradient_checks(seed, instances.max(1)));
            let mut all = true;
            for c in &checks {
                all &= c.passed;
                println!(
                    "{} {:<28} worst {:.3e} over {} instances",
                    if c.passed { "PASS" } else { "FAIL" },
                    c.name,
                    c.worst,
                    c.instances
                );
            }
            if !all {
                return Ok(ExitCode::from(1));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("OCCFACE_LOG", "warn")).init();
    let cli = Cli::parse();
    info!("starting");
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
