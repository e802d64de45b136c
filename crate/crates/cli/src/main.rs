use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use gdfusion::config::{PipelineConfig, Toggles};
use gdfusion::experiment::{memory_curves, outcome_rows, profile_rows, run_experiment, kernel_profile, stage_profile, ExperimentData, BENCH_QUEUE_LENGTHS, KERNEL_BENCH_DIMS};
use gdfusion::gradcheck::{run_gradcheck, GradcheckOptions};
use gdfusion::metrics::{to_csv, TIMED_RUNS};
use gdfusion::Error;

#[derive(Parser)]
#[command(name = "gdfusion", version, about = "Streaming temporal fusion for voxel occupancy")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every requested fusion configuration and write metrics.csv.
    Run(RunArgs),
    /// Compare closed-form gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Write memory curves and runtime profiles to bench.csv.
    Bench(CommonArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Sectioned key=value configuration file; defaults apply without one.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    frames: Option<usize>,
    /// Comma-separated configurations, e.g. B,BV,Full.
    #[arg(long, value_delimiter = ',')]
    fusion: Option<Vec<String>>,
    /// Stacking baseline queue length.
    #[arg(long)]
    baseline_n: Option<usize>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Save every frame's hidden state bundle under this directory.
    #[arg(long)]
    dump_states: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Negate the beta gradient before comparing (detector self-test).
    #[arg(long, hide = true)]
    inject_beta_sign_flip: bool,
}

fn load_config(path: Option<&Path>) -> anyhow::Result<PipelineConfig> {
    Ok(match path {
        Some(p) => PipelineConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => PipelineConfig::default(),
    })
}

fn resolve(args: &CommonArgs) -> anyhow::Result<PipelineConfig> {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(f) = args.frames {
        cfg.frames = f;
    }
    if let Some(runs) = &args.fusion {
        for r in runs {
            Toggles::from_name(r)?;
        }
        cfg.runs = runs.clone();
    }
    if let Some(n) = args.baseline_n {
        cfg.baseline_n = n;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_csv(dir: &Path, name: &str, text: &str) -> anyhow::Result<PathBuf> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(name);
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

fn cmd_run(args: &RunArgs) -> anyhow::Result<bool> {
    let cfg = resolve(&args.common)?;
    let outcomes = run_experiment(&cfg, args.dump_states.as_deref())?;
    for o in &outcomes {
        let show = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
        println!(
            "{:<6} miou {}  miou_dynamic {}  iou {}",
            o.name,
            show(o.overall.miou),
            show(o.overall.miou_dynamic),
            show(o.overall.iou)
        );
    }
    let path = write_csv(&args.common.out, "metrics.csv", &to_csv(&outcome_rows(&outcomes)))?;
    println!("wrote {}", path.display());
    Ok(true)
}

fn cmd_gradcheck(args: &GradcheckArgs) -> anyhow::Result<bool> {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let results = run_gradcheck(GradcheckOptions {
        seed: cfg.seed,
        flip_beta_sign: args.inject_beta_sign_flip,
    })?;
    for r in &results {
        println!(
            "{:<22} {}  max_rel {:.3e}  max_abs {:.3e}  entries {}",
            r.name,
            if r.passed { "ok  " } else { "FAIL" },
            r.max_rel_err,
            r.max_abs_err,
            r.entries
        );
    }
    Ok(results.iter().all(|r| r.passed))
}

fn cmd_bench(args: &CommonArgs) -> anyhow::Result<bool> {
    let cfg = resolve(args)?;
    let data = ExperimentData::new(&cfg)?;
    let mut queues = BENCH_QUEUE_LENGTHS.to_vec();
    if !queues.contains(&cfg.baseline_n) {
        queues.push(cfg.baseline_n);
        queues.sort_unstable();
    }
    let mut rows = memory_curves(&data, &queues)?.rows();
    rows.extend(profile_rows("runtime_stages", &stage_profile(&data, TIMED_RUNS)?));
    let (c, n) = KERNEL_BENCH_DIMS;
    let kernels = kernel_profile(c, n, cfg.seed, TIMED_RUNS);
    for k in &kernels {
        println!("{:<22} {:>9.3} ms", k.name, k.median_ms);
    }
    rows.extend(profile_rows("runtime_kernels", &kernels));
    let path = write_csv(&args.out, "bench.csv", &to_csv(&rows))?;
    println!("wrote {}", path.display());
    Ok(true)
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config { .. } | Error::Setting(_)) => 2,
        Some(Error::Shape { .. } | Error::Sequence(_)) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Bench(a) => cmd_bench(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
