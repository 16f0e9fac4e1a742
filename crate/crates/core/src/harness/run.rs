//! Seeded experiment runs: per-seed CSV traces, theta snapshots and a JSON
//! summary.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use super::config::ExperimentConfig;
use super::{median, thread_pool};
use crate::actor_critic::{
    derive_hyperparameters, mlmc_nac, EpochRecord, HyperParams, OracleProbe, RunOptions, RunTrace,
};
use crate::error::{Error, Result};
use crate::mdp::{FeatureMap, TabularMdp};
use crate::oracle::{self, AssumptionReport};
use crate::policy::{PolicyClass, PolicyParams};
use crate::rng::RngStream;

pub const CSV_HEADER: [&str; 8] = [
    "k",
    "cum_T",
    "J_theta",
    "gap",
    "xi_err",
    "omega_err",
    "epoch_transitions",
    "wall_ms",
];

#[derive(Debug, Clone, Serialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub csv: PathBuf,
    pub thetas: PathBuf,
    pub epochs: usize,
    pub total_transitions: u64,
    pub final_gap: Option<f64>,
    pub mean_gap: Option<f64>,
    /// Set when the run aborted; the files hold the partial trace.
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub config: ExperimentConfig,
    pub hyperparams: HyperParams,
    pub report: AssumptionReport,
    /// Smoothness estimate used for `alpha`, when one was needed.
    pub smoothness: Option<f64>,
    pub j_star: f64,
    pub initial_gain: f64,
    pub median_final_gap: Option<f64>,
    pub median_mean_gap: Option<f64>,
    pub seeds: Vec<SeedOutcome>,
}

impl Summary {
    pub fn failed_seeds(&self) -> usize {
        self.seeds.iter().filter(|s| s.error.is_some()).count()
    }
}

/// Everything a seed needs, built once per experiment.
struct Setup {
    mdp: TabularMdp,
    class: PolicyClass,
    theta0: PolicyParams,
    features: FeatureMap,
    hp: HyperParams,
    probe: OracleProbe,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes the trace as CSV with the fixed header.
pub fn write_trace_csv(path: &Path, records: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(CSV_HEADER)?;
    for r in records {
        w.write_record([
            r.k.to_string(),
            r.cum_t.to_string(),
            fmt_opt(r.j_theta),
            fmt_opt(r.gap),
            fmt_opt(r.xi_err),
            fmt_opt(r.omega_err),
            r.epoch_transitions.to_string(),
            r.wall_ms.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct Snapshot<'a> {
    k: usize,
    theta: &'a [f64],
}

/// One JSON object per line: `{"k": k, "theta": [...]}` for every probed
/// epoch and for the final parameter `theta_K`.
fn write_thetas(path: &Path, trace: &RunTrace, every: usize) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let k_total = trace.thetas.len().saturating_sub(1);
    for (k, theta) in trace.thetas.iter().enumerate() {
        if k % every == 0 || k + 1 == k_total || k == k_total {
            let line = serde_json::to_string(&Snapshot {
                k,
                theta: theta.as_slice(),
            })?;
            writeln!(w, "{line}")?;
        }
    }
    w.flush()?;
    Ok(())
}

fn run_seed(cfg: &ExperimentConfig, setup: &Setup, seed: u64) -> Result<SeedOutcome> {
    let mut rng = RngStream::new(seed);
    let every = cfg.probe_every.max(1);
    let options = RunOptions {
        probe: Some(&setup.probe),
        probe_every: every,
        warm_start: cfg.warm_start,
        refresh_constants: cfg.refresh_constants.then(|| cfg.overrides.clone()),
    };
    let (mut trace, error) = match mlmc_nac(
        &setup.mdp,
        &setup.class,
        &setup.theta0,
        &setup.features,
        &setup.hp,
        &mut rng,
        &options,
    ) {
        Ok(t) => (t, None),
        Err(aborted) => {
            let msg = aborted.to_string();
            (aborted.partial, Some(msg))
        }
    };
    if !cfg.wall_clock {
        trace.records.iter_mut().for_each(|r| r.wall_ms = 0.0);
    }
    let csv = cfg.output.join(format!("trace_seed{seed}.csv"));
    let thetas = cfg.output.join(format!("theta_seed{seed}.jsonl"));
    write_trace_csv(&csv, &trace.records)?;
    write_thetas(&thetas, &trace, every)?;
    Ok(SeedOutcome {
        seed,
        csv,
        thetas,
        epochs: trace.records.len(),
        total_transitions: trace.total_transitions(),
        final_gap: trace.final_gap(),
        mean_gap: trace.mean_gap(),
        error,
    })
}

fn prepare(cfg: &ExperimentConfig) -> Result<(Setup, AssumptionReport, Option<f64>)> {
    let mdp = cfg.build_mdp()?;
    let class = cfg.build_class(&mdp)?;
    let theta0 = cfg.build_theta0(&class)?;
    let features = cfg.build_features(&mdp)?;
    let report = oracle::assumption_report(&mdp, &theta0, &features, &class, cfg.overrides.c_beta)?;
    let overrides = cfg.effective_overrides();
    let smoothness = if overrides.alpha.is_none() && overrides.smoothness.is_none() {
        let mut rng = RngStream::new(cfg.smoothness.seed);
        Some(oracle::smoothness_probe(
            &mdp,
            &class,
            &theta0,
            cfg.smoothness.radius,
            cfg.smoothness.pairs,
            &mut rng,
        )?)
    } else {
        None
    };
    let hp = derive_hyperparameters(cfg.t_budget, &report, &overrides, smoothness)?;
    let probe = OracleProbe::new(&mdp, &class, &features)?;
    Ok((
        Setup {
            mdp,
            class,
            theta0,
            features,
            hp,
            probe,
        },
        report,
        smoothness,
    ))
}

/// Runs every seed (in parallel, capped by `RL_THREADS`) and writes
/// `trace_seed<N>.csv`, `theta_seed<N>.jsonl` and `summary.json` under the
/// output directory.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Summary> {
    cfg.validate()?;
    let (setup, report, smoothness) = prepare(cfg)?;
    fs::create_dir_all(&cfg.output)?;
    let pool = thread_pool()?;
    let outcomes: Vec<Result<SeedOutcome>> =
        pool.install(|| cfg.seeds.par_iter().map(|&s| run_seed(cfg, &setup, s)).collect());
    let seeds = outcomes.into_iter().collect::<Result<Vec<_>>>()?;

    let finals: Vec<f64> = seeds.iter().filter_map(|s| s.final_gap).collect();
    let means: Vec<f64> = seeds.iter().filter_map(|s| s.mean_gap).collect();
    let summary = Summary {
        config: cfg.clone(),
        hyperparams: setup.hp,
        report,
        smoothness,
        j_star: setup.probe.j_star(),
        initial_gain: setup.probe.gain(&setup.theta0)?,
        median_final_gap: median(&finals),
        median_mean_gap: median(&means),
        seeds,
    };
    let text = serde_json::to_string_pretty(&summary)?;
    fs::write(cfg.output.join("summary.json"), text + "\n")?;
    Ok(summary)
}

/// Reads a trace CSV written by [`run_experiment`]: one map per row, empty
/// cells as `None`.
pub fn read_trace_column(path: &Path, column: &str) -> Result<Vec<Option<f64>>> {
    let mut reader = csv::Reader::from_path(path)?;
    let idx = reader
        .headers()?
        .iter()
        .position(|h| h == column)
        .ok_or_else(|| Error::Data(format!("{}: no column '{column}'", path.display())))?;
    let mut out = Vec::new();
    for row in reader.records() {
        let row = row?;
        let cell = row.get(idx).unwrap_or("");
        if cell.is_empty() {
            out.push(None);
        } else {
            let v = cell.parse::<f64>().map_err(|e| {
                Error::Data(format!("{}: bad value '{cell}' in {column}: {e}", path.display()))
            })?;
            out.push(Some(v));
        }
    }
    Ok(out)
}
