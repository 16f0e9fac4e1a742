use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use nalgebra::DMatrix;
use serde::Serialize;

use mlmc_nac::harness::config::ExperimentConfig;
use mlmc_nac::harness::ratefit::rate_fit;
use mlmc_nac::harness::run::run_experiment;
use mlmc_nac::harness::validate::{validate_linrec, validate_mlmc, LinrecSuite, MlmcSuite};
use mlmc_nac::mdp::{generate_random_ergodic, load_mdp, reduced_one_hot_features, save_mdp};
use mlmc_nac::{oracle, Error, PolicyClass, PolicyParams};

const EXIT_FAILED: u8 = 1;
const EXIT_USAGE: u8 = 2;

#[derive(Parser)]
#[command(name = "mlmc-nac", version, about = "Multi-level Monte Carlo natural actor-critic")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment described by a JSON config.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Exact evaluation of a tabular softmax policy.
    Oracle {
        #[arg(long)]
        mdp: PathBuf,
        /// JSON array with one logit per state and non-last action.
        #[arg(long)]
        theta: PathBuf,
    },
    /// Telescoping, sample-cost and constant-reward checks of the MLMC estimator.
    ValidateMlmc {
        #[arg(long = "tmax", value_name = "N")]
        tmax: Option<usize>,
        #[arg(long = "reps", value_name = "N")]
        reps: Option<usize>,
        #[arg(long, value_name = "N")]
        cost_draws: Option<usize>,
    },
    /// Synthetic linear recursion checks.
    ValidateLinrec {
        #[arg(long, value_name = "N")]
        reps: Option<usize>,
    },
    /// Least-squares power-law fit of one trace column against another.
    RateFit {
        #[arg(long)]
        x: String,
        #[arg(long)]
        y: String,
        /// Subtracted from every y value before taking logs.
        #[arg(long)]
        floor: Option<f64>,
        #[arg(required = true)]
        csv: Vec<PathBuf>,
    },
    /// Write a random ergodic MDP as JSON.
    GenMdp {
        #[arg(long)]
        states: usize,
        #[arg(long)]
        actions: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 0.05)]
        self_loop: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Serialize)]
struct OracleOutput {
    j_star: f64,
    gain: f64,
    stationary: Vec<f64>,
    v: Vec<f64>,
    q: Vec<Vec<f64>>,
    advantage: Vec<Vec<f64>>,
    occupancy: Vec<Vec<f64>>,
    gradient: Vec<f64>,
    npg_direction: Vec<f64>,
    report: oracle::AssumptionReport,
}

/// Errors caused by bad input rather than by the computation.
fn is_usage_error(err: &anyhow::Error) -> bool {
    err.chain().any(|e| {
        matches!(
            e.downcast_ref::<Error>(),
            Some(
                Error::Config(_)
                    | Error::Argument(_)
                    | Error::Parse { .. }
                    | Error::Validation { .. }
                    | Error::Io(_)
                    | Error::Index { .. }
            )
        ) || e.downcast_ref::<std::io::Error>().is_some()
    })
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn print_json(value: &impl Serialize) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn execute(command: Command) -> anyhow::Result<u8> {
    match command {
        Command::Run { config } => {
            let cfg = ExperimentConfig::load(&config)
                .with_context(|| format!("loading {}", config.display()))?;
            let summary = run_experiment(&cfg)?;
            for s in &summary.seeds {
                let gap = s.final_gap.map_or("-".into(), |g| format!("{g:.6e}"));
                match &s.error {
                    None => println!("seed {}: {} epochs, T = {}, final gap {gap}", s.seed, s.epochs, s.total_transitions),
                    Some(e) => println!("seed {}: aborted after {} epochs: {e}", s.seed, s.epochs),
                }
            }
            if let Some(m) = summary.median_final_gap {
                println!("median final gap {m:.6e}");
            }
            println!("wrote {}", cfg.output.join("summary.json").display());
            Ok(if summary.failed_seeds() > 0 { EXIT_FAILED } else { 0 })
        }
        Command::Oracle { mdp, theta } => {
            let mdp = load_mdp(&mdp).with_context(|| format!("loading {}", mdp.display()))?;
            let text = fs::read_to_string(&theta)
                .with_context(|| format!("reading {}", theta.display()))?;
            let theta = PolicyParams::from_json(&text)?;
            let class = PolicyClass::tabular(mdp.n_states(), mdp.n_actions());
            if theta.dim() != class.dim() {
                return Err(Error::Argument(format!(
                    "theta has dimension {}, a {}x{} tabular policy needs {}",
                    theta.dim(),
                    mdp.n_states(),
                    mdp.n_actions(),
                    class.dim()
                ))
                .into());
            }
            let features = reduced_one_hot_features(mdp.n_states())?;
            let eval = oracle::evaluate_params(&mdp, &class, &theta)?;
            let out = OracleOutput {
                j_star: oracle::optimal_gain(&mdp)?.0,
                gain: eval.gain,
                stationary: eval.stationary.as_slice().to_vec(),
                v: eval.v.as_slice().to_vec(),
                q: rows(&eval.q),
                advantage: rows(&eval.advantage),
                occupancy: rows(&eval.occupancy),
                gradient: oracle::exact_policy_gradient(&mdp, &class, &theta)?.as_slice().to_vec(),
                npg_direction: oracle::exact_npg(&mdp, &class, &theta)?.as_slice().to_vec(),
                report: oracle::assumption_report(&mdp, &theta, &features, &class, None)?,
            };
            print_json(&out)?;
            Ok(0)
        }
        Command::ValidateMlmc {
            tmax,
            reps,
            cost_draws,
        } => {
            let mut suite = MlmcSuite::default();
            if let Some(t) = tmax {
                if t < 2 || !t.is_power_of_two() {
                    return Err(Error::Argument(format!(
                        "--tmax must be a power of two >= 2, got {t}"
                    ))
                    .into());
                }
                suite.t_max = vec![t];
            }
            if let Some(r) = reps {
                suite.replicas = r.max(2);
            }
            if let Some(c) = cost_draws {
                suite.cost_draws = c.max(1);
            }
            let report = validate_mlmc(&suite)?;
            println!("{report}");
            Ok(if report.passed() { 0 } else { EXIT_FAILED })
        }
        Command::ValidateLinrec { reps } => {
            let mut suite = LinrecSuite::default();
            if let Some(r) = reps {
                suite.replicas = r.max(2);
            }
            let report = validate_linrec(&suite)?;
            println!("{report}");
            Ok(if report.passed() { 0 } else { EXIT_FAILED })
        }
        Command::RateFit { x, y, floor, csv } => {
            let fit = rate_fit(&csv, &x, &y, floor)?;
            println!(
                "slope {:.6} intercept {:.6} r2 {:.6} points {}",
                fit.slope,
                fit.intercept,
                fit.r_squared,
                fit.points.len()
            );
            Ok(0)
        }
        Command::GenMdp {
            states,
            actions,
            seed,
            self_loop,
            out,
        } => {
            let mdp = generate_random_ergodic(states, actions, self_loop, seed)?;
            save_mdp(&mdp, &out)?;
            println!("wrote {}", out.display());
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_usage_error(&e) { EXIT_USAGE } else { EXIT_FAILED })
        }
    }
}
