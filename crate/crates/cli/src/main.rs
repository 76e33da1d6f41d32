//! `drf`: sampling, benchmarking and gradient checks for DRF on the toy world.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use drf_core::bench::{
    generate_task, run_experiment, run_pipeline, ExperimentEnv, ExperimentPlan, OutputOptions,
};
use drf_core::config::{OutputFormat, RunConfig};
use drf_core::control::write_ppm;
use drf_core::drf::gradient_check;
use drf_core::metrics::evaluate;
use drf_core::score::{train_denoiser, Condition, ScoreModel};
use drf_core::{DrfError, Latent};

const EXIT_CODES: &str = "\
Exit codes:
  0  success
  1  check failed (gradcheck error at or above the tolerance)
  2  configuration or validation error, including an unreadable config file
  3  numeric or runtime failure; the message names the step

Set DRF_LOG (error, warn, info, debug, trace) to control log verbosity.";

#[derive(Parser)]
#[command(name = "drf", version, about = "Dual recursive feedback guidance on a toy diffusion world", after_help = EXIT_CODES)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML (or .json) run configuration; every field has a default.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Dotted-path override applied after the file is parsed, e.g. `drf.N=3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory (overrides io.out_dir).
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Run seed (overrides seed).
    #[arg(long)]
    seed: Option<u64>,
    /// Benchmark worker threads, 0 for one per core (overrides workers).
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// One controlled sampling run, refined by DRF when enabled.
    Sample(Common),
    /// Runs the configured ablation plan over seeds and tasks.
    Bench(Common),
    /// Finite-difference check of the DRF noise gradient.
    Gradcheck(Common),
    /// Trains the toy denoiser on draws from the toy world.
    Train {
        #[command(flatten)]
        common: Common,
        /// Training draws per mixture component.
        #[arg(long, default_value_t = 32)]
        samples: usize,
    },
}

enum Outcome {
    Ok,
    CheckFailed,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DRF_LOG", "warn")).init();
    let cli = Cli::parse();
    let common = match &cli.command {
        Command::Sample(c) | Command::Bench(c) | Command::Gradcheck(c) => c,
        Command::Train { common, .. } => common,
    };
    let cfg = match load_config(common) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    println!("config hash: {}", cfg.hash());
    let result = match cli.command {
        Command::Sample(_) => cmd_sample(&cfg),
        Command::Bench(_) => cmd_bench(&cfg),
        Command::Gradcheck(_) => cmd_gradcheck(&cfg),
        Command::Train { samples, .. } => cmd_train(&cfg, samples),
    };
    match result {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::CheckFailed) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            let config = e
                .chain()
                .find_map(|c| c.downcast_ref::<DrfError>())
                .is_some_and(DrfError::is_config);
            ExitCode::from(if config { 2 } else { 3 })
        }
    }
}

fn load_config(common: &Common) -> Result<RunConfig, DrfError> {
    let mut cfg = RunConfig::resolve(common.config.as_deref(), &common.set)?;
    if let Some(dir) = &common.out {
        cfg.io.out_dir = dir.clone();
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(w) = common.workers {
        cfg.workers = w;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn cmd_sample(cfg: &RunConfig) -> Result<Outcome> {
    let sched = Arc::new(cfg.build_schedule()?);
    let grid = cfg.build_grid(&sched)?;
    let world = cfg.build_world(sched.clone())?;
    let loaded = cfg.load_model(sched.clone())?;
    let model: &dyn ScoreModel = loaded.as_deref().unwrap_or(&world.model);
    let task = cfg.task_spec(&world, cfg.task.seed);
    let (z0_s, z0_a, ctx) = generate_task(&task, world.shape(), world.params.level, cfg.control)?;
    let (z, trace) = run_pipeline(
        model,
        &sched,
        &grid,
        cfg.sampler(),
        &cfg.drf,
        &ctx,
        cfg.seed,
    )?;
    let report = evaluate(&z, &z0_s, &z0_a, &cfg.metrics)?;

    let dir = &cfg.io.out_dir;
    create_dir(dir)?;
    write(&dir.join("config.toml"), cfg.to_toml()?)?;
    write(
        &dir.join("metrics.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    if cfg.io.wants(OutputFormat::Ppm) {
        write_ppm(&dir.join("out.ppm"), &z)?;
        write_ppm(&dir.join("structure.ppm"), &z0_s)?;
        write_ppm(&dir.join("appearance.ppm"), &z0_a)?;
    }
    if cfg.io.wants(OutputFormat::Jsonl) {
        write(&dir.join("trace.jsonl"), trace.to_jsonl()?)?;
    }
    if cfg.io.wants(OutputFormat::Csv) {
        write(&dir.join("trace.csv"), trace.to_csv())?;
    }
    println!(
        "struct_iou {:.4}  app_stat_dist {:.4}  self_sim_dist {:.4}  success {}  refine_calls {}",
        report.struct_iou,
        report.app_stat_dist,
        report.self_sim_dist,
        report.success,
        trace.refine_count()
    );
    println!("artifacts in {}", dir.display());
    Ok(Outcome::Ok)
}

fn cmd_bench(cfg: &RunConfig) -> Result<Outcome> {
    let sched = Arc::new(cfg.build_schedule()?);
    let grid = cfg.build_grid(&sched)?;
    let world = cfg.build_world(sched.clone())?;
    let loaded = cfg.load_model(sched.clone())?;
    let model: &dyn ScoreModel = loaded.as_deref().unwrap_or(&world.model);
    let tasks = cfg
        .bench
        .tasks
        .iter()
        .map(|&t| cfg.task_spec(&world, t))
        .collect();
    let plan = ExperimentPlan::from_axes(cfg.sampler(), &cfg.drf, grid.len(), &cfg.bench, tasks);
    let workers = match cfg.workers {
        0 => std::thread::available_parallelism().map_or(1, |n| n.get()),
        n => n,
    };
    let env = ExperimentEnv {
        model,
        sched: &sched,
        grid: &grid,
        shape: world.shape(),
        level: world.params.level,
        control: cfg.control,
        metrics: cfg.metrics,
        workers,
    };
    let out = OutputOptions {
        dir: Some(cfg.io.out_dir.clone()),
        ppm: cfg.io.wants(OutputFormat::Ppm),
        jsonl: cfg.io.wants(OutputFormat::Jsonl),
        svg: cfg.io.wants(OutputFormat::Svg),
    };
    log::info!("running {} cells on {workers} workers", plan.cells());
    let summary = run_experiment(&plan, &env, &out)?;
    write(&cfg.io.out_dir.join("config.toml"), cfg.to_toml()?)?;

    println!(
        "{:<40} {:>6} {:>10} {:>10} {:>8} {:>9} {:>11}",
        "variant", "runs", "iou", "app_dist", "success", "not_worse", "runtime_ms"
    );
    for name in &summary.rankings {
        let v = summary.variant(name).expect("ranked variants exist");
        let not_worse = v
            .paired
            .as_ref()
            .map_or("-".to_string(), |p| format!("{:.2}", p.not_worse_fraction));
        println!(
            "{:<40} {:>6} {:>10.4} {:>10.4} {:>8.2} {:>9} {:>11.1}",
            v.name,
            v.runs,
            v.struct_iou.median,
            v.app_stat_dist.median,
            v.success_rate,
            not_worse,
            v.runtime_ms.median
        );
    }
    if !summary.failures.is_empty() {
        println!(
            "{} runs failed; first: {}",
            summary.failures.len(),
            summary.failures[0]
        );
    }
    println!("results in {}", cfg.io.out_dir.display());
    Ok(Outcome::Ok)
}

fn cmd_gradcheck(cfg: &RunConfig) -> Result<Outcome> {
    let g = &cfg.gradcheck;
    let report = gradient_check(&cfg.drf, g.instances, g.seed, g.corrupt_vjp)?;
    println!(
        "gradient mode {}: max relative error {:.3e} over {} instances (tolerance {:.0e})",
        report.gradient_mode.name(),
        report.max_rel_err,
        report.instances,
        g.tolerance
    );
    if report.passed(g.tolerance) {
        println!("gradcheck passed");
        Ok(Outcome::Ok)
    } else {
        println!("gradcheck FAILED; worst instance:");
        println!("{}", serde_json::to_string_pretty(&report.worst)?);
        Ok(Outcome::CheckFailed)
    }
}

fn cmd_train(cfg: &RunConfig, samples: usize) -> Result<Outcome> {
    let sched = Arc::new(cfg.build_schedule()?);
    let world = cfg.build_world(sched.clone())?;
    let shape = world.shape();
    let noise = world.params.shared_variance.sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let mut dataset = Vec::new();
    for (&label, components) in world.model.labels() {
        for &k in components {
            let mean = world.model.mean(k);
            for _ in 0..samples {
                let draw = mean.lin_comb(1.0, &Latent::randn(shape, &mut rng), noise)?;
                dataset.push((draw, Condition::label(label)));
            }
        }
    }
    let (model, report) = train_denoiser(&dataset, sched, &cfg.train)?;
    let dir = &cfg.io.out_dir;
    create_dir(dir)?;
    let path = dir.join("denoiser.bin");
    model.save(&path)?;
    println!(
        "trained on {} draws; final loss {:.5}; weights at {}",
        dataset.len(),
        report.final_loss,
        path.display()
    );
    Ok(Outcome::Ok)
}
