use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use fusekit::DType;
use fusekit_bench::converge::{self, ConvergeOptions, PathKind};
use fusekit_bench::{bench, record, report, suite, Config, KernelTable};

#[derive(Parser)]
#[command(name = "fusekit", version, about = "Correctness, benchmark and convergence harness for fusekit kernels")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Check every kernel against the oracle and finite differences.
    Correctness {
        #[command(flatten)]
        opts: Opts,
        /// Finite-difference instances per op on top of the shape set.
        #[arg(long, default_value_t = 100)]
        gradient_instances: usize,
    },
    /// Time fused kernels against unfused baselines.
    Bench {
        #[command(flatten)]
        opts: Opts,
    },
    /// Train the tiny block on two paths and compare.
    Converge {
        #[command(flatten)]
        opts: Opts,
        /// Paths to compare, e.g. `fused,reference`.
        #[arg(long, default_value = "fused,reference")]
        paths: String,
        /// Feed the first path's RoPE backward a strided gradient.
        #[arg(long)]
        strided: bool,
        /// Disable contiguity guards on the first path.
        #[arg(long)]
        no_guards: bool,
    },
    /// Aggregate benchmark CSVs into speedup and memory ratios.
    Report {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

/// Shared options. Anything given here overrides `--config`.
#[derive(Args)]
struct Opts {
    /// key = value file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    ops: Option<String>,
    #[arg(long)]
    shapes: Option<String>,
    #[arg(long)]
    vocab: Option<String>,
    #[arg(long)]
    rows: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    repeats: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    dtype: Option<String>,
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long)]
    parallel: bool,
    #[arg(long)]
    budget_bytes: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

impl Opts {
    fn resolve(&self) -> anyhow::Result<Config> {
        let mut cfg = Config::default();
        if let Some(path) = &self.config {
            cfg.apply_file(path).with_context(|| format!("reading {}", path.display()))?;
        }
        let flags: [(&str, Option<String>); 13] = [
            ("ops", self.ops.clone()),
            ("shapes", self.shapes.clone()),
            ("vocab", self.vocab.clone()),
            ("rows", self.rows.map(|v| v.to_string())),
            ("hidden", self.hidden.map(|v| v.to_string())),
            ("repeats", self.repeats.map(|v| v.to_string())),
            ("warmup", self.warmup.map(|v| v.to_string())),
            ("seed", self.seed.map(|v| v.to_string())),
            ("dtype", self.dtype.clone()),
            ("csv", self.csv.as_ref().map(|p| p.display().to_string())),
            ("budget_bytes", self.budget_bytes.map(|v| v.to_string())),
            ("steps", self.steps.map(|v| v.to_string())),
            ("lr", self.lr.map(|v| v.to_string())),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                cfg.set(key, &v)?;
            }
        }
        if self.parallel {
            cfg.parallel = true;
        }
        Ok(cfg)
    }
}

fn output(path: Option<&PathBuf>) -> anyhow::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(std::fs::File::create(p).with_context(|| format!("creating {}", p.display()))?),
        None => Box::new(std::io::stdout().lock()),
    })
}

fn parse_path(s: &str) -> anyhow::Result<PathKind> {
    match s.trim() {
        "fused" => Ok(PathKind::Fused),
        "reference" | "ref" => Ok(PathKind::Reference),
        other => bail!("unknown path `{other}`"),
    }
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    match cli.cmd {
        Cmd::Correctness { opts, gradient_instances } => {
            let cfg = opts.resolve()?;
            let summary = suite::cmd_correctness(&KernelTable::fused(), &KernelTable::fused(), cfg.seed, gradient_instances);
            suite::write_report(output(cfg.csv.as_ref())?, &summary.rows)?;
            eprintln!("{} checks, {} failed", summary.rows.len(), summary.failures);
            Ok(summary.passed())
        }
        Cmd::Bench { opts } => {
            let cfg = opts.resolve()?;
            let records = bench::cmd_bench(&cfg)?;
            if cfg.csv.is_none() {
                record::write_records(std::io::stdout().lock(), &records)?;
            }
            Ok(true)
        }
        Cmd::Converge { opts, paths, strided, no_guards } => {
            let cfg = opts.resolve()?;
            let (a, b) = paths.split_once(',').context("--paths takes two comma-separated names")?;
            let co = ConvergeOptions {
                steps: cfg.steps,
                seed: cfg.seed,
                lr: cfg.lr,
                paths: (parse_path(a)?, parse_path(b)?),
                strided_grad: strided,
                guards: !no_guards,
                ..ConvergeOptions::default()
            };
            let rep = match cfg.dtype {
                DType::F32 => converge::cmd_converge::<f32>(&co)?,
                DType::F64 => converge::cmd_converge::<f64>(&co)?,
            };
            converge::write_losses(output(cfg.csv.as_ref())?, &rep)?;
            eprintln!(
                "loss maxdiff {:.3e}, weight maxdiff {:.3e}, logits maxdiff {:.3e}: {}",
                rep.loss_maxdiff,
                rep.final_weight_maxdiff,
                rep.final_logits_maxdiff,
                if rep.passed { "passed" } else { "FAILED" }
            );
            Ok(rep.passed)
        }
        Cmd::Report { inputs, csv } => {
            let rows = report::cmd_report(&inputs)?;
            report::write_report(output(csv.as_ref())?, &rows)?;
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
