//! The MLMC natural actor-critic: critic and NPG inner loops, hyperparameter
//! derivation and the outer policy-update loop.
//!
//! A run threads a single environment trajectory through every MLMC rollout:
//! each assembly starts where the previous one stopped, across both inner
//! loops and across epochs.

use std::time::Instant;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linrec::{run_recursion, RecursionSpec};
use crate::mdp::{FeatureMap, TabularMdp};
use crate::mlmc::{mlmc_assemble, CriticStatistic, LevelDraw, NpgStatistic, TransitionStatistic};
use crate::oracle::{self, AssumptionReport};
use crate::policy::{actor_update, PolicyClass, PolicyParams};
use crate::rng::RngStream;

/// Average-reward estimate `eta` and critic weights `zeta`; stacked as `xi = [eta, zeta]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CriticState {
    pub eta: f64,
    pub zeta: DVector<f64>,
}

impl CriticState {
    pub fn zeros(m: usize) -> Self {
        Self {
            eta: 0.0,
            zeta: DVector::zeros(m),
        }
    }

    pub fn from_stacked(xi: &DVector<f64>) -> Self {
        Self {
            eta: xi[0],
            zeta: xi.rows(1, xi.len() - 1).into_owned(),
        }
    }

    pub fn stacked(&self) -> DVector<f64> {
        let mut xi = DVector::zeros(self.zeta.len() + 1);
        xi[0] = self.eta;
        xi.rows_mut(1, self.zeta.len()).copy_from(&self.zeta);
        xi
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    /// Actor step.
    pub alpha: f64,
    /// Critic step.
    pub beta: f64,
    /// NPG step.
    pub gamma: f64,
    pub c_beta: f64,
    pub t_max: usize,
    pub h_inner: usize,
    pub k_outer: usize,
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !(self.c_beta > 0.0) || !self.c_beta.is_finite() {
            return Err(Error::Config(format!("c_beta must be positive, got {}", self.c_beta)));
        }
        if self.t_max < 2 || !self.t_max.is_power_of_two() {
            return Err(Error::Config(format!(
                "t_max must be a power of two >= 2, got {}",
                self.t_max
            )));
        }
        if self.h_inner == 0 {
            return Err(Error::Config("h_inner must be positive".into()));
        }
        Ok(())
    }
}

/// Explicit values that take precedence over derived ones.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Overrides {
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub gamma: Option<f64>,
    pub c_beta: Option<f64>,
    pub t_max: Option<usize>,
    pub lambda: Option<f64>,
    pub mu: Option<f64>,
    pub g1: Option<f64>,
    /// Smoothness constant `L` of `J`.
    #[serde(alias = "l")]
    pub smoothness: Option<f64>,
    pub k_outer: Option<usize>,
    pub h_inner: Option<usize>,
}

fn positive(v: f64) -> Option<f64> {
    (v > 0.0 && v.is_finite()).then_some(v)
}

/// Step sizes and loop sizes from the convergence analysis:
///
/// - `K = round(sqrt T)`, `H` the next power of two `>= sqrt(T) / ln T`, `T_max = H^2`
/// - `beta = 4 ln H / (lambda H)`, `gamma = 2 ln H / (mu H)`
/// - `c_beta = max(override, lambda + sqrt(1/lambda^2 - 1))`
/// - `alpha = mu^2 / (4 G1^2 L)`
///
/// `smoothness` is the estimated `L`, used when no override is given.
/// Without a budget both `k_outer` and `h_inner` must be overridden.
pub fn derive_hyperparameters(
    t_budget: Option<u64>,
    report: &AssumptionReport,
    overrides: &Overrides,
    smoothness: Option<f64>,
) -> Result<HyperParams> {
    let (k_derived, h_derived) = match t_budget {
        Some(t) if t >= 3 => {
            let tf = t as f64;
            let k = tf.sqrt().round() as usize;
            let h = ((tf.sqrt() / tf.ln()).ceil() as usize).max(2).next_power_of_two();
            (Some(k), Some(h))
        }
        Some(t) => return Err(Error::Config(format!("T budget must be at least 3, got {t}"))),
        None => (None, None),
    };
    let k_outer = overrides
        .k_outer
        .or(k_derived)
        .ok_or_else(|| Error::Config("k_outer is required when no T budget is given".into()))?;
    let h_inner = overrides
        .h_inner
        .or(h_derived)
        .ok_or_else(|| Error::Config("h_inner is required when no T budget is given".into()))?;
    if h_inner < 2 {
        return Err(Error::Config(format!("h_inner must be at least 2, got {h_inner}")));
    }
    let t_max = match overrides.t_max {
        Some(t) => t,
        None => (h_inner * h_inner).next_power_of_two(),
    };

    let lambda = overrides.lambda.or_else(|| positive(report.lambda_min));
    let mu = overrides.mu.or_else(|| positive(report.mu_min));
    let missing = |name: &str| {
        Error::Config(format!(
            "constant {name} is not positive at theta_0 and has no override"
        ))
    };
    let hf = h_inner as f64;
    let ln_h = hf.ln();

    let beta = match overrides.beta {
        Some(b) => b,
        None => 4.0 * ln_h / (lambda.ok_or_else(|| missing("lambda"))? * hf),
    };
    let gamma = match overrides.gamma {
        Some(g) => g,
        None => 2.0 * ln_h / (mu.ok_or_else(|| missing("mu"))? * hf),
    };
    let c_beta = match (overrides.c_beta, lambda) {
        (Some(c), Some(l)) => c.max(oracle::c_beta_threshold(l)),
        (Some(c), None) => c,
        (None, Some(l)) => oracle::c_beta_threshold(l),
        (None, None) => return Err(missing("lambda")),
    };
    let alpha = match overrides.alpha {
        Some(a) => a,
        None => {
            let mu = mu.ok_or_else(|| missing("mu"))?;
            let g1 = overrides
                .g1
                .or_else(|| positive(report.g1_bound))
                .ok_or_else(|| missing("G1"))?;
            let l = overrides
                .smoothness
                .or(smoothness.and_then(positive))
                .ok_or_else(|| missing("L"))?;
            mu * mu / (4.0 * g1 * g1 * l)
        }
    };
    let hp = HyperParams {
        alpha,
        beta,
        gamma,
        c_beta,
        t_max,
        h_inner,
        k_outer,
    };
    hp.validate()?;
    Ok(hp)
}

/// Result of one inner loop.
#[derive(Debug, Clone)]
pub struct InnerOutcome<T> {
    pub value: T,
    /// State to continue the trajectory from.
    pub final_state: usize,
    pub transitions: usize,
    /// Level drawn by each MLMC assembly, in order.
    pub levels: Vec<LevelDraw>,
}

#[allow(clippy::too_many_arguments)]
fn mlmc_recursion<S: TransitionStatistic>(
    stat: &S,
    mdp: &TabularMdp,
    class: &PolicyClass,
    theta: &PolicyParams,
    x0: DVector<f64>,
    step: f64,
    hp: &HyperParams,
    s0: usize,
    rng: &mut RngStream,
) -> Result<InnerOutcome<DVector<f64>>> {
    let mut state = s0;
    let mut levels = Vec::with_capacity(hp.h_inner);
    let mut used = 0;
    let diag = run_recursion(
        RecursionSpec {
            x0,
            h_steps: hp.h_inner,
            step_size: step,
            source: |_| {
                let est = mlmc_assemble(stat, mdp, class, theta, state, hp.t_max, rng)?;
                state = est.final_state;
                used += est.transitions_used;
                levels.push(est.level);
                Ok((est.a_hat, est.b_hat))
            },
        },
        None,
    )?;
    Ok(InnerOutcome {
        value: diag.final_x,
        final_state: state,
        transitions: used,
        levels,
    })
}

/// `H` critic steps `xi <- xi - beta (A_v^MLMC xi - b_v^MLMC)` under `pi_theta`.
#[allow(clippy::too_many_arguments)]
pub fn critic_subroutine(
    mdp: &TabularMdp,
    class: &PolicyClass,
    theta: &PolicyParams,
    features: &FeatureMap,
    xi_init: &CriticState,
    hp: &HyperParams,
    s0: usize,
    rng: &mut RngStream,
) -> Result<InnerOutcome<CriticState>> {
    if xi_init.zeta.len() != features.dim() {
        return Err(Error::argument(format!(
            "critic has {} weights, feature map has dimension {}",
            xi_init.zeta.len(),
            features.dim()
        )));
    }
    let stat = CriticStatistic {
        c_beta: hp.c_beta,
        features,
    };
    let out = mlmc_recursion(&stat, mdp, class, theta, xi_init.stacked(), hp.beta, hp, s0, rng)?;
    Ok(InnerOutcome {
        value: CriticState::from_stacked(&out.value),
        final_state: out.final_state,
        transitions: out.transitions,
        levels: out.levels,
    })
}

/// `H` NPG steps `omega <- omega - gamma (A_u^MLMC omega - b_u^MLMC)` with the
/// critic `xi` held fixed.
#[allow(clippy::too_many_arguments)]
pub fn npg_subroutine(
    mdp: &TabularMdp,
    class: &PolicyClass,
    theta: &PolicyParams,
    features: &FeatureMap,
    xi: &CriticState,
    omega_init: &DVector<f64>,
    hp: &HyperParams,
    s0: usize,
    rng: &mut RngStream,
) -> Result<InnerOutcome<DVector<f64>>> {
    if omega_init.len() != class.dim() {
        return Err(Error::argument(format!(
            "omega has dimension {}, policy class has {}",
            omega_init.len(),
            class.dim()
        )));
    }
    if xi.zeta.len() != features.dim() {
        return Err(Error::argument("critic and feature map disagree on dimension"));
    }
    let stat = NpgStatistic {
        class,
        theta,
        eta: xi.eta,
        zeta: &xi.zeta,
        features,
    };
    mlmc_recursion(&stat, mdp, class, theta, omega_init.clone(), hp.gamma, hp, s0, rng)
}

/// Exact per-epoch diagnostics computed by the oracle.
#[derive(Debug, Clone)]
pub struct OracleProbe {
    mdp: TabularMdp,
    class: PolicyClass,
    features: FeatureMap,
    j_star: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct ProbeValues {
    pub gain: f64,
    pub gap: f64,
    pub xi_err: f64,
    pub omega_err: f64,
}

impl OracleProbe {
    pub fn new(mdp: &TabularMdp, class: &PolicyClass, features: &FeatureMap) -> Result<Self> {
        let (j_star, _) = oracle::optimal_gain(mdp)?;
        Ok(Self {
            mdp: mdp.clone(),
            class: class.clone(),
            features: features.clone(),
            j_star,
        })
    }

    pub fn j_star(&self) -> f64 {
        self.j_star
    }

    pub fn gain(&self, theta: &PolicyParams) -> Result<f64> {
        oracle::gain(&self.mdp, &self.class, theta)
    }

    pub fn probe(
        &self,
        theta: &PolicyParams,
        c_beta: f64,
        xi: &CriticState,
        omega: &DVector<f64>,
    ) -> Result<ProbeValues> {
        let eval = oracle::evaluate_params(&self.mdp, &self.class, theta)?;
        let fp = oracle::td_fixed_point_from(&self.mdp, &eval, &self.features, c_beta)?;
        let omega_star = oracle::exact_npg(&self.mdp, &self.class, theta)?;
        Ok(ProbeValues {
            gain: eval.gain,
            gap: self.j_star - eval.gain,
            xi_err: (xi.stacked() - fp.xi).norm(),
            omega_err: (omega - omega_star).norm(),
        })
    }
}

/// Per-epoch options for [`mlmc_nac`].
#[derive(Debug, Clone, Default)]
pub struct RunOptions<'a> {
    /// Oracle diagnostics; `None` leaves the oracle columns empty.
    pub probe: Option<&'a OracleProbe>,
    /// Probe every this many epochs (the last epoch is always probed). 0 means 1.
    pub probe_every: usize,
    /// Start each epoch's inner loops from the previous epoch's `xi`/`omega`
    /// instead of zero.
    pub warm_start: bool,
    /// Re-derive `beta`, `gamma` and `c_beta` at every `theta_k` from the
    /// oracle constants, keeping explicit overrides.
    pub refresh_constants: Option<Overrides>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochRecord {
    pub k: usize,
    /// Cumulative environment transitions after this epoch.
    pub cum_t: u64,
    pub j_theta: Option<f64>,
    pub gap: Option<f64>,
    pub xi_err: Option<f64>,
    pub omega_err: Option<f64>,
    pub epoch_transitions: u64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Default)]
pub struct RunTrace {
    pub records: Vec<EpochRecord>,
    /// `theta_0, ..., theta_K`.
    pub thetas: Vec<PolicyParams>,
    pub j_star: Option<f64>,
    /// `J(theta_K)` when probed.
    pub final_gain: Option<f64>,
}

impl RunTrace {
    pub fn total_transitions(&self) -> u64 {
        self.records.last().map_or(0, |r| r.cum_t)
    }

    pub fn final_theta(&self) -> Option<&PolicyParams> {
        self.thetas.last()
    }

    pub fn final_gap(&self) -> Option<f64> {
        Some(self.j_star? - self.final_gain?)
    }

    /// `(1/K) sum_k gap_k` over probed epochs.
    pub fn mean_gap(&self) -> Option<f64> {
        let gaps: Vec<f64> = self.records.iter().filter_map(|r| r.gap).collect();
        (!gaps.is_empty()).then(|| gaps.iter().sum::<f64>() / gaps.len() as f64)
    }
}

/// A run that stopped early, with everything recorded before the failure.
#[derive(Debug, thiserror::Error)]
#[error("run aborted at epoch {epoch}: {source}")]
pub struct RunAborted {
    pub epoch: usize,
    pub partial: RunTrace,
    #[source]
    pub source: Error,
}

fn refreshed(
    hp: &HyperParams,
    report: &AssumptionReport,
    overrides: &Overrides,
) -> Result<HyperParams> {
    let mut o = overrides.clone();
    o.alpha = Some(hp.alpha);
    o.t_max = Some(hp.t_max);
    o.k_outer = Some(hp.k_outer);
    o.h_inner = Some(hp.h_inner);
    derive_hyperparameters(None, report, &o, None)
}

/// Runs `K` epochs of critic estimation, NPG estimation and the actor step
/// `theta <- theta + alpha omega`.
pub fn mlmc_nac(
    mdp: &TabularMdp,
    class: &PolicyClass,
    theta0: &PolicyParams,
    features: &FeatureMap,
    hp: &HyperParams,
    rng: &mut RngStream,
    options: &RunOptions<'_>,
) -> std::result::Result<RunTrace, Box<RunAborted>> {
    let mut trace = RunTrace {
        records: Vec::with_capacity(hp.k_outer),
        thetas: vec![theta0.clone()],
        j_star: options.probe.map(OracleProbe::j_star),
        final_gain: None,
    };
    let abort = |epoch, trace: RunTrace, source| {
        Box::new(RunAborted {
            epoch,
            partial: trace,
            source,
        })
    };
    if let Err(e) = hp.validate() {
        return Err(abort(0, trace, e));
    }
    let cadence = options.probe_every.max(1);
    let mut theta = theta0.clone();
    let mut hp = *hp;
    let mut s = mdp.sample_initial_state(rng);
    let mut cum_t = 0u64;
    let mut xi = CriticState::zeros(features.dim());
    let mut omega = DVector::zeros(class.dim());

    for k in 0..hp.k_outer {
        let start = Instant::now();
        let epoch = (|| -> Result<(CriticState, DVector<f64>, usize)> {
            if let Some(over) = &options.refresh_constants {
                let report = oracle::assumption_report(mdp, &theta, features, class, None)?;
                hp = refreshed(&hp, &report, over)?;
            }
            let xi_init = if options.warm_start {
                xi.clone()
            } else {
                CriticState::zeros(features.dim())
            };
            let critic = critic_subroutine(mdp, class, &theta, features, &xi_init, &hp, s, rng)?;
            let omega_init = if options.warm_start {
                omega.clone()
            } else {
                DVector::zeros(class.dim())
            };
            let npg = npg_subroutine(
                mdp,
                class,
                &theta,
                features,
                &critic.value,
                &omega_init,
                &hp,
                critic.final_state,
                rng,
            )?;
            s = npg.final_state;
            Ok((critic.value, npg.value, critic.transitions + npg.transitions))
        })();
        let (xi_k, omega_k, used) = match epoch {
            Ok(v) => v,
            Err(e) => return Err(abort(k, trace, e)),
        };
        cum_t += used as u64;

        let probed = match options.probe {
            Some(p) if k % cadence == 0 || k + 1 == hp.k_outer => {
                match p.probe(&theta, hp.c_beta, &xi_k, &omega_k) {
                    Ok(v) => Some(v),
                    Err(e) => return Err(abort(k, trace, e)),
                }
            }
            _ => None,
        };
        let next = match actor_update(&theta, &omega_k, hp.alpha) {
            Ok(t) => t,
            Err(e) => return Err(abort(k, trace, e)),
        };
        trace.records.push(EpochRecord {
            k,
            cum_t,
            j_theta: probed.map(|p| p.gain),
            gap: probed.map(|p| p.gap),
            xi_err: probed.map(|p| p.xi_err),
            omega_err: probed.map(|p| p.omega_err),
            epoch_transitions: used as u64,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
        trace.thetas.push(next.clone());
        theta = next;
        xi = xi_k;
        omega = omega_k;
    }
    if let Some(p) = options.probe {
        match p.gain(&theta) {
            Ok(j) => trace.final_gain = Some(j),
            Err(e) => return Err(abort(hp.k_outer, trace, e)),
        }
    }
    Ok(trace)
}
