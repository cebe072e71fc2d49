use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use slds_ep::model::parse_instance;
use slds_harness::config::parse_seed_range;
use slds_harness::report::{diag_report, diagnose, oracle_report};
use slds_harness::{run_experiment, search_difficult, ExperimentConfig, InstanceSource, Method, Shape};

#[derive(Parser)]
#[command(name = "slds-ep", version, about = "Expectation propagation experiments on switching linear dynamical systems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run methods on an instance suite and write results.csv.
    Run {
        /// TOML experiment config; the other flags are then ignored.
        #[arg(long, conflicts_with_all = ["dims", "seeds"])]
        config: Option<PathBuf>,
        /// M,N,D,T
        #[arg(long)]
        dims: Option<Shape>,
        /// A..B (end exclusive)
        #[arg(long)]
        seeds: Option<String>,
        #[arg(long, value_delimiter = ',', default_value = "gpb2,ep,double_loop")]
        methods: Vec<Method>,
        #[arg(long, value_delimiter = ',', default_value = "1")]
        damping: Vec<f64>,
        #[arg(long, default_value_t = 1e-8)]
        tol: f64,
        #[arg(long, default_value_t = 200)]
        max_iters: usize,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long)]
        threads: Option<usize>,
        /// Leave wall_time_ms empty so reruns are byte-identical.
        #[arg(long)]
        no_timing: bool,
    },
    /// Look for instances where undamped EP cycles.
    Search {
        #[arg(long)]
        dims: Shape,
        #[arg(long)]
        seeds: String,
        /// EP sweeps per instance.
        #[arg(long, default_value_t = 200)]
        budget: usize,
        #[arg(long, default_value_t = 1e-8)]
        tol: f64,
        #[arg(long, default_value = "difficult")]
        out: PathBuf,
    },
    /// Exact beliefs and log-likelihood by path enumeration.
    Oracle {
        #[arg(long)]
        instance: PathBuf,
    },
    /// Saddle-point Hessian at the fixed point a method reaches.
    Diag {
        #[arg(long)]
        instance: PathBuf,
        #[arg(long, default_value = "ep")]
        method: Method,
        #[arg(long, default_value_t = 1.0)]
        damping: f64,
        /// Sweeps at damping 0.1 after EP converges.
        #[arg(long, default_value_t = 50)]
        extra_sweeps: usize,
    },
}

fn load_instance(path: &PathBuf) -> anyhow::Result<(slds_ep::model::SldsModel, slds_ep::model::ObservationSequence)> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_instance(&text).with_context(|| format!("in {}", path.display()))
}

fn execute(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Run {
            config,
            dims,
            seeds,
            methods,
            damping,
            tol,
            max_iters,
            out,
            threads,
            no_timing,
        } => {
            let cfg = match config {
                Some(path) => ExperimentConfig::load(&path)?,
                None => {
                    let (Some(shape), Some(seeds)) = (dims, seeds) else {
                        bail!("run needs either --config or both --dims and --seeds");
                    };
                    let range = parse_seed_range(&seeds)?;
                    let mut cfg = ExperimentConfig::new(
                        methods,
                        InstanceSource::Seeds {
                            shape,
                            first: range.start,
                            last: range.end,
                        },
                        out,
                    );
                    cfg.damping = damping;
                    cfg.tol = tol;
                    cfg.max_iters = max_iters;
                    cfg.threads = threads;
                    cfg.timing = !no_timing;
                    cfg
                }
            };
            let result = run_experiment(&cfg)?;
            for r in &result.runs {
                let eps = r.epsilon.map(|e| format!(" eps {e}")).unwrap_or_default();
                let kl = r.final_kl.map(|k| format!(" kl {k:.3e}")).unwrap_or_default();
                println!(
                    "{} {}{eps}: {} after {}{kl}",
                    r.instance_id, r.method, r.status, r.iterations
                );
            }
            println!("wrote {}", result.csv_path.display());
        }
        Command::Search {
            dims,
            seeds,
            budget,
            tol,
            out,
        } => {
            let range = parse_seed_range(&seeds)?;
            let summary = search_difficult(&dims, range, budget, tol, Some(&out))?;
            print!("{}", summary.to_text());
        }
        Command::Oracle { instance } => {
            let (model, obs) = load_instance(&instance)?;
            print!("{}", oracle_report(&model, &obs)?);
        }
        Command::Diag {
            instance,
            method,
            damping,
            extra_sweeps,
        } => {
            let (model, obs) = load_instance(&instance)?;
            let d = diagnose(&model, &obs, method, damping, extra_sweeps)?;
            print!("{}", diag_report(&d));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
