//! Monte Carlo validation suites for the MLMC estimator and the linear
//! recursion solver. Failures are report content, not errors.

use std::fmt;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::Serialize;

use super::ratefit::fit_power_law;
use super::thread_pool;
use crate::error::Result;
use crate::linrec::{bias_floor_probe, replica_curve, recursion_step_size, SyntheticSystem};
use crate::mdp::{generate_random_ergodic, reduced_one_hot_features, FeatureMap, TabularMdp};
use crate::mlmc::{
    collect_trajectory, expected_cost, mlmc_assemble, mlmc_assemble_traced,
    mlmc_combine, CriticStatistic, NpgStatistic, TransitionStatistic,
};
use crate::policy::{PolicyClass, PolicyParams};
use crate::rng::RngStream;

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub measured: f64,
    pub expected: f64,
    /// Allowed `|measured - expected|`.
    pub tolerance: f64,
    pub pass: bool,
}

impl Check {
    fn within(name: impl Into<String>, measured: f64, expected: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            measured,
            expected,
            tolerance,
            pass: (measured - expected).abs() <= tolerance,
        }
    }

    /// Passes when `measured <= bound`.
    fn at_most(name: impl Into<String>, measured: f64, bound: f64) -> Self {
        Self {
            name: name.into(),
            measured,
            expected: bound,
            tolerance: 0.0,
            pass: measured <= bound,
        }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.pass { "PASS" } else { "FAIL" };
        if self.tolerance > 0.0 {
            write!(
                f,
                "{verdict}  {}: measured {:.6e}, expected {:.6e} +/- {:.3e}",
                self.name, self.measured, self.expected, self.tolerance
            )
        } else {
            write!(
                f,
                "{verdict}  {}: measured {:.6e}, bound {:.6e}",
                self.name, self.measured, self.expected
            )
        }
    }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct ValidationReport {
    pub checks: Vec<Check>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn failures(&self) -> usize {
        self.checks.iter().filter(|c| !c.pass).count()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(f, "{c}")?;
        }
        write!(
            f,
            "{} of {} checks passed",
            self.checks.len() - self.failures(),
            self.checks.len()
        )
    }
}

/// Settings for [`validate_mlmc`].
#[derive(Debug, Clone, Serialize)]
pub struct MlmcSuite {
    pub t_max: Vec<usize>,
    /// Assemblies per `T_max` for the telescoping comparison.
    pub replicas: usize,
    /// Assemblies per `T_max` for the sample-cost check.
    pub cost_draws: usize,
    pub seed: u64,
}

impl Default for MlmcSuite {
    fn default() -> Self {
        Self {
            t_max: vec![8, 16, 32],
            replicas: 100_000,
            cost_draws: 1_000_000,
            seed: 2024,
        }
    }
}

/// The fixed 3-state, 2-action instance the MLMC suites run on, with the
/// policy parameter and critic iterate they hold fixed.
pub struct ReferenceInstance {
    pub mdp: TabularMdp,
    pub class: PolicyClass,
    pub theta: PolicyParams,
    pub features: FeatureMap,
    pub c_beta: f64,
    pub xi: DVector<f64>,
}

impl ReferenceInstance {
    pub fn new() -> Result<Self> {
        let mdp = generate_random_ergodic(3, 2, 0.1, 3)?;
        Ok(Self {
            class: PolicyClass::tabular(3, 2),
            theta: PolicyParams::from_slice(&[0.4, -0.3, 0.2])?,
            features: reduced_one_hot_features(3)?,
            c_beta: 2.0,
            xi: DVector::from_vec(vec![0.5, 0.2, -0.1]),
            mdp,
        })
    }

    fn critic(&self) -> CriticStatistic<'_> {
        CriticStatistic {
            c_beta: self.c_beta,
            features: &self.features,
        }
    }

    fn npg<'a>(&'a self, zeta: &'a DVector<f64>) -> NpgStatistic<'a> {
        NpgStatistic {
            class: &self.class,
            theta: &self.theta,
            eta: self.xi[0],
            zeta,
            features: &self.features,
        }
    }
}

/// Running mean and variance per component, merged in a fixed order.
#[derive(Debug, Clone)]
struct Moments {
    n: f64,
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
}

impl Moments {
    fn new(dim: usize) -> Self {
        Self {
            n: 0.0,
            sum: vec![0.0; dim],
            sum_sq: vec![0.0; dim],
        }
    }

    fn push(&mut self, x: &[f64]) {
        self.n += 1.0;
        for (i, v) in x.iter().enumerate() {
            self.sum[i] += v;
            self.sum_sq[i] += v * v;
        }
    }

    fn merge(mut self, other: &Self) -> Self {
        self.n += other.n;
        for i in 0..self.sum.len() {
            self.sum[i] += other.sum[i];
            self.sum_sq[i] += other.sum_sq[i];
        }
        self
    }

    fn mean(&self, i: usize) -> f64 {
        self.sum[i] / self.n
    }

    /// Squared standard error of the mean.
    fn se_sq(&self, i: usize) -> f64 {
        let m = self.mean(i);
        let var = ((self.sum_sq[i] - self.n * m * m) / (self.n - 1.0)).max(0.0);
        var / self.n
    }
}

const CHUNK: usize = 1024;

/// Sums per-replica vectors in fixed-size chunks so the result does not
/// depend on the thread count.
fn chunked_moments<F>(replicas: usize, dim: usize, per_replica: F) -> Result<Moments>
where
    F: Fn(usize) -> Result<Vec<f64>> + Sync,
{
    let chunks = replicas.div_ceil(CHUNK);
    let parts: Vec<Moments> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut m = Moments::new(dim);
            for r in c * CHUNK..((c + 1) * CHUNK).min(replicas) {
                m.push(&per_replica(r)?);
            }
            Ok(m)
        })
        .collect::<Result<_>>()?;
    Ok(parts.iter().fold(Moments::new(dim), |acc, p| acc.merge(p)))
}

/// Both `b`-estimates of one rollout, the critic's followed by the NPG's.
fn b_parts(
    inst: &ReferenceInstance,
    zeta: &DVector<f64>,
    transitions: &[crate::mdp::Transition],
    combine: impl Fn(&dyn TransitionStatistic, &[crate::mdp::Transition]) -> Result<DVector<f64>>,
) -> Result<Vec<f64>> {
    let critic = inst.critic();
    let npg = inst.npg(zeta);
    let mut out = combine(&critic, transitions)?.as_slice().to_vec();
    out.extend_from_slice(combine(&npg, transitions)?.as_slice());
    Ok(out)
}

fn telescoping_checks(
    inst: &ReferenceInstance,
    t_max: usize,
    replicas: usize,
    seed: u64,
    checks: &mut Vec<Check>,
) -> Result<()> {
    let zeta = inst.xi.rows(1, inst.features.dim()).into_owned();
    let dim_v = inst.features.dim() + 1;
    let dim = dim_v + inst.class.dim();
    let mlmc = chunked_moments(replicas, dim, |r| {
        let mut rng = RngStream::with_stream(seed, 2 * r as u64);
        let s0 = inst.mdp.sample_initial_state(&mut rng);
        let (est, transitions) =
            mlmc_assemble_traced(&inst.critic(), &inst.mdp, &inst.class, &inst.theta, s0, t_max, &mut rng)?;
        b_parts(inst, &zeta, &transitions, |stat, zs| {
            Ok(mlmc_combine(stat, zs, est.level)?.1)
        })
    })?;
    let batch = chunked_moments(replicas, dim, |r| {
        let mut rng = RngStream::with_stream(seed, 2 * r as u64 + 1);
        let s0 = inst.mdp.sample_initial_state(&mut rng);
        let (transitions, _) =
            collect_trajectory(&inst.mdp, &inst.class, &inst.theta, s0, t_max, &mut rng)?;
        b_parts(inst, &zeta, &transitions, |stat, zs| {
            let (r, c) = stat.shape();
            let mut a = nalgebra::DMatrix::zeros(r, c);
            let mut b = DVector::zeros(r);
            for z in zs {
                stat.accumulate(z, &mut a, &mut b);
            }
            Ok(b / zs.len() as f64)
        })
    })?;
    for i in 0..dim {
        let name = if i < dim_v {
            format!("telescoping T_max={t_max} b_v[{i}]")
        } else {
            format!("telescoping T_max={t_max} b_u[{}]", i - dim_v)
        };
        let se = (mlmc.se_sq(i) + batch.se_sq(i)).sqrt();
        checks.push(Check::within(name, mlmc.mean(i), batch.mean(i), (3.0 * se).max(1e-12)));
    }
    Ok(())
}

fn cost_check(
    inst: &ReferenceInstance,
    t_max: usize,
    draws: usize,
    seed: u64,
) -> Result<Check> {
    let used = chunked_moments(draws, 1, |r| {
        let mut rng = RngStream::with_stream(seed, r as u64);
        let est = mlmc_assemble(&inst.critic(), &inst.mdp, &inst.class, &inst.theta, 0, t_max, &mut rng)?;
        Ok(vec![est.transitions_used as f64])
    })?;
    let expected = expected_cost(t_max)?;
    Ok(Check::within(
        format!("sample cost T_max={t_max}"),
        used.mean(0),
        expected,
        0.02 * expected,
    ))
}

/// A constant reward makes the average-reward component of the critic
/// estimate constant, so its mean equals the reward exactly.
fn constant_reward_check(t_max: usize, replicas: usize, seed: u64) -> Result<Check> {
    let reward = 0.7;
    let base = generate_random_ergodic(3, 2, 0.1, 3)?;
    let transition: Vec<f64> = (0..3)
        .flat_map(|s| (0..2).map(move |a| (s, a)))
        .flat_map(|(s, a)| base.transition_row(s, a).to_vec())
        .collect();
    let mdp = TabularMdp::new(3, 2, vec![reward; 6], transition, vec![1.0 / 3.0; 3])?;
    let features = reduced_one_hot_features(3)?;
    let class = PolicyClass::tabular(3, 2);
    let theta = PolicyParams::zeros(class.dim());
    let c_beta = 2.0;
    let stat = CriticStatistic {
        c_beta,
        features: &features,
    };
    let m = chunked_moments(replicas, 1, |r| {
        let mut rng = RngStream::with_stream(seed, r as u64);
        let s0 = mdp.sample_initial_state(&mut rng);
        let est = mlmc_assemble(&stat, &mdp, &class, &theta, s0, t_max, &mut rng)?;
        Ok(vec![est.b_hat[0] / c_beta])
    })?;
    Ok(Check::within(
        format!("constant reward T_max={t_max}"),
        m.mean(0),
        reward,
        (3.0 * m.se_sq(0).sqrt()).max(1e-12),
    ))
}

/// Telescoping identity for the critic and NPG `b`-estimates, sample cost
/// and the constant-reward check, for each configured `T_max`.
pub fn validate_mlmc(suite: &MlmcSuite) -> Result<ValidationReport> {
    let inst = ReferenceInstance::new()?;
    let pool = thread_pool()?;
    pool.install(|| {
        let mut checks = Vec::new();
        for (i, &t) in suite.t_max.iter().enumerate() {
            let seed = suite.seed.wrapping_add(1000 * i as u64);
            telescoping_checks(&inst, t, suite.replicas, seed, &mut checks)?;
            checks.push(cost_check(&inst, t, suite.cost_draws, seed + 1)?);
            checks.push(constant_reward_check(t, suite.replicas.min(10_000), seed + 2)?);
        }
        Ok(ValidationReport { checks })
    })
}

/// Settings for [`validate_linrec`].
#[derive(Debug, Clone, Serialize)]
pub struct LinrecSuite {
    pub horizons: Vec<usize>,
    pub replicas: usize,
    pub bias_horizon: usize,
    pub seed: u64,
}

impl Default for LinrecSuite {
    fn default() -> Self {
        Self {
            horizons: (6..=12).map(|e| 1usize << e).collect(),
            replicas: 200,
            bias_horizon: 1 << 10,
            seed: 7,
        }
    }
}

/// Noiseless contraction, second-moment decay with unbiased noise and the
/// bias floor under a constant `q` offset, on the 4x4 reference system.
pub fn validate_linrec(suite: &LinrecSuite) -> Result<ValidationReport> {
    let pool = thread_pool()?;
    pool.install(|| {
        let mut checks = Vec::new();
        let x0 = DVector::zeros(4);

        let clean = SyntheticSystem::reference_4x4(0.0);
        let lambda = clean.lambda_p();
        let h = suite.horizons.first().copied().unwrap_or(64);
        let step = recursion_step_size(h, lambda)?;
        let mut rng = RngStream::new(suite.seed);
        let errs = clean
            .run(&x0, h, step, &mut rng, true)?
            .sq_errors
            .unwrap_or_default();
        let worst = errs
            .windows(2)
            .filter(|w| w[0] > 0.0)
            .map(|w| (w[1] / w[0]).sqrt())
            .fold(0.0, f64::max);
        checks.push(Check::at_most(
            format!("noiseless contraction ratio H={h}"),
            worst,
            1.0 - step * lambda + 1e-12,
        ));

        let noisy = SyntheticSystem::reference_4x4(1.0);
        let curve = replica_curve(&noisy, &x0, &suite.horizons, suite.replicas, suite.seed + 1)?;
        let xs: Vec<f64> = curve.iter().map(|p| p.h as f64).collect();
        let ys: Vec<f64> = curve.iter().map(|p| p.mean_sq_error).collect();
        let fit = fit_power_law(&xs, &ys, None)?;
        checks.push(Check::at_most("second moment slope", fit.slope, -0.8));

        // Pure q-side noise; smaller so the Monte Carlo error of the mean stays
        // well inside the tolerance at 200 replicas.
        let mut biased = SyntheticSystem::reference_4x4(0.5);
        biased.sigma_p = 0.0;
        biased.q_bias = DVector::from_vec(vec![0.1, -0.2, 0.05, 0.15]);
        let floor = bias_floor_probe(&biased, &x0, suite.bias_horizon, suite.replicas, suite.seed + 2)?;
        checks.push(Check::within(
            format!("bias floor H={}", suite.bias_horizon),
            floor.measured,
            floor.analytic,
            0.1 * floor.analytic,
        ));
        Ok(ValidationReport { checks })
    })
}
