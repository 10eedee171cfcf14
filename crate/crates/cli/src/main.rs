//! `slak`: train, benchmark, and analyze sparse large-kernel depthwise
//! convolution models from the command line.
//!
//! Exit codes: 0 on success, 2 for configuration problems, 3 for numeric
//! failures mid-run.

mod config;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use slak_core::bench::{bench_variant, flops_sweep, speedup_report, BenchConfig, BenchVariant};
use slak_core::counting::{count_params, plan_width, scaled_config, sparse_aware_params};
use slak_core::erf::{contribution_map, ErfOptions};
use slak_core::model::{DwVariant, Model, ModelConfig};
use slak_core::trainer::{build_snip_masks, train, write_metrics_csv};
use slak_core::{checkpoint, Result, SlakError};

use crate::config::load_run_config;

#[derive(Parser)]
#[command(name = "slak", version, about = "Sparse large-kernel depthwise convolution workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on the synthetic long-range task
    Train(TrainArgs),
    /// Time depthwise kernel variants and report speedups over dense
    Bench(BenchArgs),
    /// Measure an effective receptive field map
    Erf(ErfArgs),
    /// Tabulate parameter and MAC budgets over a kernel-size sweep
    Flops(FlopsArgs),
    /// Plan the width expansion that repays a sparsity budget
    Plan(PlanArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// JSON run config; built-in defaults apply when omitted
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a resolved config field, e.g. --set train.total_steps=10
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Directory receiving checkpoint, metrics CSV, and resolved config
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    /// Square kernel edge M
    #[arg(long, default_value_t = 51)]
    kernel: usize,
    /// Short edge N of the decomposed pair
    #[arg(long, default_value_t = 5)]
    short_edge: usize,
    #[arg(long, default_value_t = 64)]
    channels: usize,
    /// Input height and width R
    #[arg(long, default_value_t = 64)]
    resolution: usize,
    /// Sparsity of the masked variants
    #[arg(long, default_value_t = 0.4)]
    sparsity: f64,
    /// Timed repetitions per variant (at least 3)
    #[arg(long, default_value_t = 5)]
    reps: usize,
    /// Untimed repetitions before the clock starts
    #[arg(long, default_value_t = 1)]
    warmup: usize,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    /// Workload seed; falls back to SLAK_SEED, then 0
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct ErfArgs {
    /// JSON run config supplying the architecture
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a resolved config field, e.g. --set model.layer_scale_init=1.0
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Measure a trained model from this checkpoint instead
    #[arg(long, conflicts_with_all = ["config", "set"])]
    checkpoint: Option<PathBuf>,
    /// Input edge G; the map is G x G
    #[arg(long, default_value_t = 224)]
    grid: usize,
    /// Random images accumulated into the map
    #[arg(long, default_value_t = 8)]
    images: usize,
    /// Input seed; falls back to SLAK_SEED, then 0
    #[arg(long)]
    seed: Option<u64>,
    /// Strip norms and activations so supports are exact
    #[arg(long)]
    linearized: bool,
    /// Normalize each image's field before accumulating
    #[arg(long)]
    per_image: bool,
    /// Also render an SVG heatmap
    #[arg(long)]
    svg: bool,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct FlopsArgs {
    /// Comma-separated kernel edges, each in [3, 151]
    #[arg(long, value_delimiter = ',', required = true)]
    kernels: Vec<usize>,
    /// Depthwise realization to tabulate
    #[arg(long, value_enum, default_value_t = VariantArg::Decomposed)]
    variant: VariantArg,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    /// Dense square kernels
    Full,
    /// Parallel rectangular pair plus small square branch
    Decomposed,
}

#[derive(Args)]
struct PlanArgs {
    /// Global sparsity target in [0, 1)
    #[arg(long)]
    sparsity: f64,
    /// Dense baseline stage widths
    #[arg(long, value_delimiter = ',', default_values_t = vec![96usize, 192, 384, 768])]
    dims: Vec<usize>,
    /// Also write plan.json here
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let seed_env = match std::env::var("SLAK_SEED") {
        Ok(s) => match s.parse::<u64>() {
            Ok(v) => Some(v),
            Err(_) => {
                eprintln!("error: SLAK_SEED `{s}` is not an unsigned integer");
                return ExitCode::from(2);
            }
        },
        Err(_) => None,
    };
    let outcome = match &cli.command {
        Command::Train(args) => cmd_train(args, seed_env),
        Command::Bench(args) => cmd_bench(args, seed_env),
        Command::Erf(args) => cmd_erf(args, seed_env),
        Command::Flops(args) => cmd_flops(args),
        Command::Plan(args) => cmd_plan(args),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                SlakError::Numeric { .. } => 3,
                _ => 2,
            })
        }
    }
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn cmd_train(args: &TrainArgs, seed_env: Option<u64>) -> Result<()> {
    let run = load_run_config(args.config.as_deref(), &args.set, seed_env)?;
    fs::create_dir_all(&args.out)?;
    write_json(&args.out.join("resolved.json"), &run)?;

    let mut model = Model::build(&run.model, run.train.seed)?;
    let mut masks = if run.train.sparsity > 0.0 {
        let (m, _) = build_snip_masks(&mut model, &run.task, &run.train)?;
        println!(
            "seeded {} sparse tensors at global sparsity {:.2}",
            m.len(),
            run.train.sparsity
        );
        Some(m)
    } else {
        None
    };
    let result = train(&mut model, &run.task, &run.train, masks.as_mut())?;

    checkpoint::save(&args.out.join("checkpoint.slak"), &model, &masks.unwrap_or_default())?;
    write_metrics_csv(&args.out.join("metrics.csv"), &result)?;
    match result.rows.last() {
        Some(last) => println!(
            "step {}: loss {:.4} acc {:.3} lr {:.2e}",
            last.step, last.loss, last.acc, last.lr
        ),
        None => println!("no steps run"),
    }
    if result.stopped_at < run.train.total_steps {
        println!("early stop at step {}", result.stopped_at);
    }
    println!("artifacts in {}", args.out.display());
    Ok(())
}

fn cmd_bench(args: &BenchArgs, seed_env: Option<u64>) -> Result<()> {
    fs::create_dir_all(&args.out)?;
    let seed = args.seed.or(seed_env).unwrap_or(0);
    let mut records = Vec::new();
    for variant in [
        BenchVariant::DenseSquare,
        BenchVariant::SparseMaskedSquare,
        BenchVariant::SparseDecomposedPair { zero_skip: true },
        BenchVariant::SparseDecomposedPair { zero_skip: false },
    ] {
        let cfg = BenchConfig {
            variant,
            channels: args.channels,
            resolution: args.resolution,
            kernel: args.kernel,
            short_edge: args.short_edge,
            sparsity: args.sparsity,
            reps: args.reps,
            warmup: args.warmup,
            batch: args.batch,
            seed,
        };
        let record = bench_variant(&cfg)?;
        eprintln!("{}: median {:.3} ms", record.variant, record.latency_median_s * 1e3);
        records.push(record);
    }
    let csv = speedup_report(&records)?;
    fs::write(args.out.join("speedup.csv"), &csv)?;
    write_json(&args.out.join("bench.json"), &records)?;
    print!("{csv}");
    Ok(())
}

fn cmd_erf(args: &ErfArgs, seed_env: Option<u64>) -> Result<()> {
    fs::create_dir_all(&args.out)?;
    let opts = ErfOptions {
        grid: args.grid,
        images: args.images,
        seed: args.seed.or(seed_env).unwrap_or(0),
        linearized: args.linearized,
        per_image_normalization: args.per_image,
    };
    let mut model = match &args.checkpoint {
        Some(path) => checkpoint::load(path)?.0,
        None => {
            let run = load_run_config(args.config.as_deref(), &args.set, seed_env)?;
            Model::build(&run.model, run.train.seed)?
        }
    };
    let map = contribution_map(&mut model, &opts)?;
    let report = map.area_report()?;

    fs::write(args.out.join("erf.csv"), map.to_csv())?;
    if args.svg {
        fs::write(args.out.join("erf.svg"), map.to_svg())?;
    }
    write_json(&args.out.join("erf_summary.json"), &report)?;
    #[derive(serde::Serialize)]
    struct Resolved<'a> {
        model: &'a ModelConfig,
        erf: &'a ErfOptions,
    }
    write_json(&args.out.join("resolved.json"), &Resolved { model: model.config(), erf: &opts })?;
    for (t, r) in &report {
        println!("t={t}: r={r:.4}");
    }
    Ok(())
}

fn cmd_flops(args: &FlopsArgs) -> Result<()> {
    let template = ModelConfig {
        dw_variant: match args.variant {
            VariantArg::Full => DwVariant::Full,
            VariantArg::Decomposed => DwVariant::DecomposedParallel,
        },
        ..ModelConfig::slak_t()
    };
    let records = flops_sweep(&template, &args.kernels)?;
    let mut csv = String::from("kernel,variant,params,total_macs,dw_macs\n");
    for r in &records {
        writeln!(csv, "{},{},{},{},{}", r.kernel, r.variant, r.params, r.total_macs, r.dw_macs)
            .expect("string write");
    }
    fs::create_dir_all(&args.out)?;
    fs::write(args.out.join("flops.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn cmd_plan(args: &PlanArgs) -> Result<()> {
    let base = scaled_config(&ModelConfig::slak_t(), &args.dims);
    base.validate()?;
    let (factor, widened) = plan_width(&base, args.sparsity)?;
    let dense = count_params(&base, None)?;
    let widened_cfg = scaled_config(&base, &widened);
    let sparse = sparse_aware_params(&widened_cfg, args.sparsity)?;
    let deviation = (sparse - dense as f64) / dense as f64;

    println!("sparsity {:.2}: width factor {:.1}", args.sparsity, factor);
    println!("dims {:?} -> {:?}", args.dims, widened);
    println!(
        "params: dense {dense}, sparse widened {:.0} ({:+.2}% vs dense)",
        sparse,
        100.0 * deviation
    );
    if let Some(out) = &args.out {
        fs::create_dir_all(out)?;
        #[derive(serde::Serialize)]
        struct Plan<'a> {
            sparsity: f64,
            factor: f64,
            base_dims: &'a [usize],
            widened_dims: &'a [usize],
            dense_params: usize,
            sparse_widened_params: f64,
            deviation: f64,
        }
        write_json(
            &out.join("plan.json"),
            &Plan {
                sparsity: args.sparsity,
                factor,
                base_dims: &args.dims,
                widened_dims: &widened,
                dense_params: dense,
                sparse_widened_params: sparse,
                deviation,
            },
        )?;
        println!("plan written to {}", out.join("plan.json").display());
    }
    Ok(())
}
