use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use manifold_kd::audit::{bench_losses, decoupled_cost, full_map_cost, BenchReport, CostReport};
use manifold_kd::harness::{self, ExperimentConfig, Suite, SweepKind};

/// Patch-level manifold distillation for toy vision transformers.
#[derive(Parser)]
#[command(name = "mfkd", version)]
struct Cli {
    /// TOML experiment config; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the run seed (the teacher seed for `train-teacher`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunTarget {
    /// Overrides `output_dir`.
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Overrides `run_id`.
    #[arg(long)]
    run_id: Option<String>,
}

#[derive(Args)]
struct Sizes {
    #[arg(long = "B", default_value_t = 128)]
    b: u64,
    #[arg(long = "N", default_value_t = 196)]
    n: u64,
    #[arg(long = "D", default_value_t = 192)]
    d: u64,
    #[arg(long = "K", default_value_t = 192)]
    k: u64,
}

#[derive(Subcommand)]
enum Command {
    /// Train the teacher on hard labels and save its checkpoint.
    TrainTeacher(RunTarget),
    /// Teacher, then no-distillation, KD and manifold students; writes summary.json.
    Distill(RunTarget),
    /// Eval-split accuracy of a checkpoint.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Analytical FLOP and memory cost of the full and decoupled relation maps.
    AuditFlops {
        #[command(flatten)]
        sizes: Sizes,
        /// Bytes per map element.
        #[arg(long, default_value_t = 4)]
        bytes: u64,
        /// Emit JSON instead of the table.
        #[arg(long)]
        json: bool,
    },
    /// Median wall-clock of each loss (forward + backward).
    Bench {
        #[arg(long = "B", default_value_t = 8)]
        b: usize,
        #[arg(long = "N", default_value_t = 64)]
        n: usize,
        #[arg(long = "D", default_value_t = 32)]
        d: usize,
        #[arg(long = "K", default_value_t = 64)]
        k: usize,
        #[arg(long, default_value_t = 5)]
        reps: usize,
        /// Single precision instead of double.
        #[arg(long)]
        f32: bool,
        #[arg(long)]
        json: bool,
    },
    /// Run property suites; exits nonzero on any failure.
    Verify {
        /// oracle | gradients | invariants | costs (repeatable; all by default).
        #[arg(long)]
        suite: Vec<Suite>,
        #[arg(long)]
        json: bool,
    },
    /// Loss-term ablation grid or layer-scheme sweep.
    Sweep {
        /// ablation | layers
        #[arg(long)]
        kind: SweepKind,
        #[command(flatten)]
        target: RunTarget,
    },
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    Ok(cfg)
}

fn targeted(mut cfg: ExperimentConfig, t: &RunTarget) -> ExperimentConfig {
    if let Some(d) = &t.output_dir {
        cfg.output_dir = d.clone();
    }
    if let Some(r) = &t.run_id {
        cfg.run_id = r.clone();
    }
    cfg
}

fn print_costs(full: &CostReport, dec: &CostReport) {
    println!("{:<10} {:>16} {:>12} {:>16} {:>12}", "map", "flops", "GFLOPs", "memory_bytes", "MB");
    for (name, r) in [("full", full), ("decoupled", dec)] {
        println!(
            "{:<10} {:>16} {:>12.3} {:>16} {:>12.3}",
            name,
            r.flops,
            r.gflops(),
            r.peak_map_memory_bytes,
            r.megabytes()
        );
    }
    println!(
        "{:<10} {:>16} {:>12.2} {:>16} {:>12.2}",
        "ratio",
        "",
        full.flops as f64 / dec.flops as f64,
        "",
        full.peak_map_memory_bytes as f64 / dec.peak_map_memory_bytes as f64
    );
}

fn print_bench(r: &BenchReport) {
    println!("B={} N={} D={} K={} scalar={}", r.batch, r.patches, r.dim, r.k, r.scalar);
    println!("{:<10} {:>14} {:>16} {:>6}", "loss", "median_ms", "flops", "reps");
    for row in &r.rows {
        println!(
            "{:<10} {:>14.4} {:>16} {:>6}",
            row.loss,
            row.median_seconds * 1e3,
            row.flops,
            row.repetitions
        );
    }
    if let Some(n) = &r.notice {
        println!("note: {n}");
    }
}

fn run(cli: Cli) -> Result<bool> {
    match &cli.command {
        Command::TrainTeacher(t) => {
            let mut cfg = targeted(load_config(&cli)?, t);
            if let Some(s) = cli.seed {
                cfg.teacher.seed = s;
                cfg.teacher_schedule.data_seed = s;
            }
            let s = harness::train_teacher(&cfg)?;
            println!("teacher checkpoint: {}", s.source);
            println!("train_acc {:.4}  eval_acc {:.4}", s.train_acc, s.eval_acc);
        }
        Command::Distill(t) => {
            let mut cfg = targeted(load_config(&cli)?, t);
            if let Some(s) = cli.seed {
                cfg = cfg.with_seed(s);
            }
            let s = harness::run_experiment(&cfg)?;
            println!("run {}  seed {}", cfg.run_dir().display(), s.seed);
            println!("{:<10} {:>10}", "model", "eval_acc");
            println!("{:<10} {:>10.4}", "teacher", s.teacher.eval_acc);
            for st in &s.students {
                println!("{:<10} {:>10.4}", st.name, st.final_eval_acc);
            }
        }
        Command::Evaluate { checkpoint } => {
            let cfg = load_config(&cli)?;
            let acc = harness::evaluate_checkpoint(&cfg, checkpoint)?;
            println!("eval_acc {acc:.4}");
        }
        Command::AuditFlops { sizes, bytes, json } => {
            let full = full_map_cost(sizes.b, sizes.n, sizes.d, *bytes)?;
            let dec = decoupled_cost(sizes.b, sizes.n, sizes.d, sizes.k, *bytes)?;
            if *json {
                let v = serde_json::json!({
                    "full": full,
                    "decoupled": dec,
                    "flop_ratio": full.flops as f64 / dec.flops as f64,
                    "memory_ratio": full.peak_map_memory_bytes as f64 / dec.peak_map_memory_bytes as f64,
                });
                println!("{}", serde_json::to_string_pretty(&v)?);
            } else {
                print_costs(&full, &dec);
            }
        }
        Command::Bench { b, n, d, k, reps, f32, json } => {
            let seed = cli.seed.unwrap_or(0);
            let r = if *f32 {
                bench_losses::<f32>(*b, *n, *d, *k, *reps, seed)?
            } else {
                bench_losses::<f64>(*b, *n, *d, *k, *reps, seed)?
            };
            if *json {
                println!("{}", serde_json::to_string_pretty(&r)?);
            } else {
                print_bench(&r);
            }
        }
        Command::Verify { suite, json } => {
            let suites = if suite.is_empty() { Suite::ALL.to_vec() } else { suite.clone() };
            let report = harness::verify(&suites, cli.seed.unwrap_or(0))?;
            if *json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                for r in &report.results {
                    println!("{r}");
                }
            }
            return Ok(report.passed());
        }
        Command::Sweep { kind, target } => {
            let mut cfg = targeted(load_config(&cli)?, target);
            if let Some(s) = cli.seed {
                cfg = cfg.with_seed(s);
            }
            let s = harness::sweep(&cfg, *kind)?;
            println!("{:<5} {:<22} {:>10}", "rank", "variant", "eval_acc");
            for e in &s.ranked {
                println!("{:<5} {:<22} {:>10.4}", e.rank, e.name, e.final_eval_acc);
            }
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("verification failed");
            ExitCode::from(1)
        }
        Err(e) => {
            // core errors already carry their cause in the message
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
