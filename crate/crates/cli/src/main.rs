//! `usad`: command-line driver for data preparation, the three training
//! stages, evaluation, ablation grids, latency benchmarks and checkpoint
//! inspection.
//!
//! Exit codes: 0 success, 1 bad config or data, 2 internal failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use usad_core::bench::{self, BenchConfig, InferenceModel, LatencyBudget, TypedModel};
use usad_core::config::RunConfig;
use usad_core::data::Dataset;
use usad_core::metrics::Evaluation;
use usad_core::net::Classifier;
use usad_core::pipeline::{self, Run};
use usad_core::train::evaluate;
use usad_core::{Error, Result};
use usad_autodiff::{Container, EntryData};

#[derive(Parser)]
#[command(name = "usad", version, about = "Diffusion-augmented activity recognition on sensor windows")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// Config file of key=value lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. --set diffusion.T=100 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory shared by all stages of a run.
    #[arg(long, default_value = "usad-out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Build, split and normalise the dataset.
    Prepare(RunArgs),
    /// Stage 1: train the conditional denoiser and fit class prototypes.
    TrainDiffusion(RunArgs),
    /// Draw class-balanced synthetic windows from the stage 1 denoiser.
    Synth(RunArgs),
    /// Stage 2: train the classifier on synthetic windows.
    Pretrain(RunArgs),
    /// Stage 3: fine-tune on real windows and evaluate on the test split.
    Finetune(RunArgs),
    /// Evaluate the fine-tuned classifier on the test split.
    Evaluate {
        #[command(flatten)]
        run: RunArgs,
        /// Checkpoint to evaluate instead of <out>/stage3.ckpt.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Run every stage once per on/off combination of the toggles.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated subset of spatial_attn, temporal_attn,
        /// adaptive_loss, augmentation.
        #[arg(long, value_delimiter = ',')]
        toggles: Vec<String>,
    },
    /// Time single-window inference against the latency budget.
    Bench {
        /// Classifier checkpoint.
        #[arg(long)]
        model: PathBuf,
        /// Windowed dataset CSV to stream.
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = 4.0)]
        segment_seconds: f64,
        #[arg(long, default_value_t = 100)]
        reps: usize,
        #[arg(long, default_value_t = 10)]
        warmup: usize,
        /// Directory for the report CSVs.
        #[arg(long, default_value = "usad-bench")]
        out: PathBuf,
    },
    /// Summarise a checkpoint.
    Inspect {
        checkpoint: PathBuf,
    },
}

fn resolve(args: &RunArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for kv in &args.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override '{kv}' is not KEY=VALUE")))?;
        cfg.set(k.trim(), v)?;
    }
    if cfg.seed.is_none() {
        if let Ok(s) = std::env::var("USAD_SEED") {
            cfg.set("seed", &s)?;
        }
    }
    Ok(cfg)
}

fn open_run(args: &RunArgs) -> Result<Run> {
    Run::new(resolve(args)?, &args.out)
}

fn print_eval(label: &str, e: &Evaluation) {
    let cols = Evaluation::CSV_COLUMNS;
    let vals = e.csv_values();
    let parts: Vec<String> = cols.iter().zip(vals).map(|(c, v)| format!("{c}={v:.4}")).collect();
    println!("{label}: {}", parts.join(" "));
}

fn write_eval(path: &Path, e: &Evaluation) -> Result<()> {
    let mut out = Evaluation::CSV_COLUMNS.join(",");
    out.push('\n');
    out.push_str(&e.csv_values().iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","));
    out.push('\n');
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn inspect(path: &Path) -> Result<()> {
    let c = Container::load(path)?;
    let mut params = 0usize;
    println!("{}", path.display());
    for e in &c.entries {
        match &e.data {
            EntryData::Bytes(b) => println!("  {:<40} text  {} bytes", e.name, b.len()),
            d => {
                if e.name.starts_with("classifier/") || e.name.starts_with("denoiser/") {
                    params += d.shape().iter().product::<usize>();
                }
                println!("  {:<40} {:<5} {:?}", e.name, d.dtype_name(), d.shape());
            }
        }
    }
    println!("parameters: {params}");
    if let Some(h) = c.text("meta/data_hash") {
        println!("data hash: {h}");
    }
    if let Some(s) = c.text("meta/stage") {
        println!("stage: {s}");
    }
    for key in ["meta/classifier", "meta/config"] {
        if let Some(t) = c.text(key) {
            println!("[{key}]");
            print!("{t}");
        }
    }
    Ok(())
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Prepare(a) => {
            let run = open_run(&a)?;
            let p = run.prepare()?;
            println!(
                "train={} val={} test={} classes={} hash={}",
                p.train.len(),
                p.val.len(),
                p.test.len(),
                p.train.n_classes(),
                p.hash
            );
        }
        Command::TrainDiffusion(a) => {
            let run = open_run(&a)?;
            let prep = run.load_prepared()?;
            let s1 = run.train_diffusion(&prep)?;
            let first = s1.trace.first().copied().unwrap_or(f64::NAN);
            let last = s1.trace.last().copied().unwrap_or(f64::NAN);
            println!("denoiser loss {first:.4} -> {last:.4}, {} prototypes", s1.proto.len());
        }
        Command::Synth(a) => {
            let run = open_run(&a)?;
            let prep = run.load_prepared()?;
            let s1 = run.load_stage1(&prep)?;
            match run.synthesize(&prep, &s1)? {
                Some(d) => println!("synthetic windows: {} per class {:?}", d.len(), d.class_counts()),
                None => println!("synthetic windows: 0 (augmentation off)"),
            }
        }
        Command::Pretrain(a) => {
            let run = open_run(&a)?;
            let prep = run.load_prepared()?;
            let syn = run.load_synthetic()?;
            let model = run.pretrain(&prep, syn.as_ref())?;
            println!("{} classifier, {} parameters", model.kind(), model.store().num_scalars());
        }
        Command::Finetune(a) => {
            let run = open_run(&a)?;
            let prep = run.load_prepared()?;
            let init = run.load_stage2(&prep)?;
            let syn = run.load_synthetic()?;
            let out = run.finetune(&prep, init, syn.as_ref())?;
            print_eval("test", &out.test);
        }
        Command::Evaluate { run: a, model } => {
            let run = open_run(&a)?;
            let prep = run.load_prepared()?;
            let clf = match model {
                Some(p) => Classifier::read_from(&Container::load(&p)?)?,
                None => run.load_stage3(&prep)?,
            };
            let e = evaluate(&clf, &prep.test, run.cfg.eval_ece_bins)?;
            write_eval(&run.path("eval.csv"), &e)?;
            pipeline::write_radar(&run.path("radar.csv"), &e)?;
            print_eval("test", &e);
        }
        Command::Ablate { run: a, toggles } => {
            let cfg = resolve(&a)?;
            cfg.validate()?;
            std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
            let rows = pipeline::run_ablation(&cfg, &toggles, &a.out)?;
            println!("{} runs written to {}", rows.len(), a.out.join("ablation.csv").display());
        }
        Command::Bench { model, dataset, segment_seconds, reps, warmup, out } => {
            let clf = Classifier::read_from(&Container::load(&model)?)?;
            let data = Dataset::read_csv(&dataset)?;
            let budget = LatencyBudget::new(segment_seconds)?;
            let cfg = BenchConfig { reps, warmup };
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            let m64 = TypedModel::<f64>::new(&clf)?;
            let m32 = TypedModel::<f32>::new(&clf)?;
            let models: [&dyn InferenceModel; 2] = [&m64, &m32];
            let (overhead, reports) = bench::bench_models(&models, &data.samples, budget, cfg)?;
            bench::emit_report(&overhead, &out.join("latency_empty.csv"))?;
            println!("harness overhead: mean {:.6} ms", overhead.mean_ms);
            for r in &reports {
                bench::emit_report(r, &out.join(format!("latency_{}.csv", r.model)))?;
                println!(
                    "{}: mean {:.3} ms, p95 {:.3} ms, budget {} ms -> {}; {} params, {} bytes",
                    r.model,
                    r.mean_ms,
                    r.p95_ms,
                    r.budget_ms,
                    r.verdict(),
                    r.params,
                    r.memory_bytes
                );
            }
        }
        Command::Inspect { checkpoint } => inspect(&checkpoint)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_user_error() { 1 } else { 2 })
        }
    }
}
