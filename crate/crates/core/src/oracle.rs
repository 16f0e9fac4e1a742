//! Exact ground truth for small tabular MDPs by dense linear algebra.
//!
//! Everything here is `O(S^3)` and meant as a reference for the sampled
//! algorithm, not as a scalable evaluator.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::mdp::{FeatureMap, TabularMdp};
use crate::policy::{PolicyClass, PolicyParams};
use crate::rng::RngStream;

/// Singular values below this are treated as zero in pseudoinverses.
pub const PINV_CUTOFF: f64 = 1e-10;
const MIXING_CAP: u64 = 1_000_000;

/// Exact evaluation of a fixed stochastic policy.
#[derive(Debug, Clone)]
pub struct PolicyEvaluation {
    /// `d^pi`.
    pub stationary: DVector<f64>,
    /// `J`.
    pub gain: f64,
    /// Differential values, normalised so that `d^T V = 0`.
    pub v: DVector<f64>,
    pub q: DMatrix<f64>,
    pub advantage: DMatrix<f64>,
    /// `nu(s, a) = d(s) pi(a|s)`.
    pub occupancy: DMatrix<f64>,
}

/// Numerically checkable constants of the convergence analysis at one `theta`.
#[derive(Debug, Clone, Serialize)]
pub struct AssumptionReport {
    /// Smallest eigenvalue of the symmetric part of `E[phi(s)(phi(s) - phi(s'))^T]`.
    pub lambda_min: f64,
    /// Smallest eigenvalue of the Fisher matrix.
    pub mu_min: f64,
    pub eps_app: f64,
    pub t_mix: u64,
    /// Largest score norm over all state-action pairs.
    pub g1_bound: f64,
    /// Smallest `c_beta` for which the critic matrix is `lambda/2`-positive definite.
    pub c_beta_threshold: f64,
}

/// Result of [`td_fixed_point`].
#[derive(Debug, Clone)]
pub struct TdFixedPoint {
    /// `xi* = [eta*, zeta*]`.
    pub xi: DVector<f64>,
    pub a_v: DMatrix<f64>,
    pub b_v: DVector<f64>,
}

impl TdFixedPoint {
    pub fn eta(&self) -> f64 {
        self.xi[0]
    }

    pub fn zeta(&self) -> DVector<f64> {
        self.xi.rows(1, self.xi.len() - 1).into_owned()
    }
}

fn min_singular_value(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return f64::INFINITY;
    }
    m.clone().svd(false, false).singular_values.min()
}

/// Solves `d^T P = d^T, sum(d) = 1` by replacing one balance equation with the
/// normalisation. Fails when the solution is not unique or has a zero entry.
pub fn stationary_distribution(chain: &DMatrix<f64>) -> Result<DVector<f64>> {
    let n = chain.nrows();
    if n == 0 || chain.ncols() != n {
        return Err(Error::argument(format!(
            "chain must be square and non-empty, got {}x{}",
            chain.nrows(),
            chain.ncols()
        )));
    }
    let mut system = DMatrix::identity(n, n) - chain.transpose();
    system.row_mut(n - 1).fill(1.0);
    let mut rhs = DVector::zeros(n);
    rhs[n - 1] = 1.0;
    let smin = min_singular_value(&system);
    if smin < 1e-12 {
        return Err(Error::Ergodicity(format!(
            "stationary distribution is not unique (smallest singular value {smin:.3e})"
        )));
    }
    let d = system
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Ergodicity("singular balance equations".into()))?;
    if let Some(i) = d.iter().position(|&v| !(v > 1e-14)) {
        return Err(Error::Ergodicity(format!(
            "state {i} has stationary mass {:.3e}; chain is not irreducible",
            d[i]
        )));
    }
    Ok(d)
}

/// Checks that `policy` is an `S x A` stochastic table for `mdp`.
fn check_policy_table(mdp: &TabularMdp, policy: &DMatrix<f64>) -> Result<()> {
    if policy.nrows() != mdp.n_states() || policy.ncols() != mdp.n_actions() {
        return Err(Error::argument(format!(
            "policy table is {}x{}, MDP is {}x{}",
            policy.nrows(),
            policy.ncols(),
            mdp.n_states(),
            mdp.n_actions()
        )));
    }
    for (s, row) in policy.row_iter().enumerate() {
        if row.iter().any(|&p| !(p >= 0.0)) || (row.sum() - 1.0).abs() > 1e-10 {
            return Err(Error::argument(format!("policy row {s} is not a distribution")));
        }
    }
    Ok(())
}

/// Stationary distribution, gain, differential values, Q and advantage of a
/// stochastic policy table. `V` solves `(I - P + 1 d^T) V = r_pi - J 1`,
/// which is the Poisson equation with the `d^T V = 0` normalisation folded in.
pub fn evaluate_policy(mdp: &TabularMdp, policy: &DMatrix<f64>) -> Result<PolicyEvaluation> {
    check_policy_table(mdp, policy)?;
    let (n, k) = (mdp.n_states(), mdp.n_actions());
    let chain = mdp.induced_chain(policy);
    let d = stationary_distribution(&chain)?;
    let r_pi = mdp.induced_reward(policy);
    let gain = d.dot(&r_pi);

    let ones = DVector::from_element(n, 1.0);
    let fundamental = DMatrix::identity(n, n) - &chain + &ones * d.transpose();
    let rhs = &r_pi - &ones * gain;
    let v = fundamental
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Ergodicity("fundamental matrix is singular".into()))?;

    let mut q = DMatrix::zeros(n, k);
    let mut occupancy = DMatrix::zeros(n, k);
    for s in 0..n {
        for a in 0..k {
            let next: f64 = mdp
                .transition_row(s, a)
                .iter()
                .zip(v.iter())
                .map(|(p, vv)| p * vv)
                .sum();
            q[(s, a)] = mdp.reward(s, a) - gain + next;
            occupancy[(s, a)] = d[s] * policy[(s, a)];
        }
    }
    let advantage = DMatrix::from_fn(n, k, |s, a| q[(s, a)] - v[s]);
    Ok(PolicyEvaluation {
        stationary: d,
        gain,
        v,
        q,
        advantage,
        occupancy,
    })
}

/// [`evaluate_policy`] for `pi_theta`.
pub fn evaluate_params(
    mdp: &TabularMdp,
    class: &PolicyClass,
    theta: &PolicyParams,
) -> Result<PolicyEvaluation> {
    check_class(mdp, class)?;
    evaluate_policy(mdp, &class.policy_table(theta)?)
}

fn check_class(mdp: &TabularMdp, class: &PolicyClass) -> Result<()> {
    if class.n_states() != mdp.n_states() || class.n_actions() != mdp.n_actions() {
        return Err(Error::argument(format!(
            "policy class is for {}x{}, MDP is {}x{}",
            class.n_states(),
            class.n_actions(),
            mdp.n_states(),
            mdp.n_actions()
        )));
    }
    Ok(())
}

/// `J(theta)`.
pub fn gain(mdp: &TabularMdp, class: &PolicyClass, theta: &PolicyParams) -> Result<f64> {
    Ok(evaluate_params(mdp, class, theta)?.gain)
}

fn score_table(class: &PolicyClass, theta: &PolicyParams) -> Result<Vec<Vec<DVector<f64>>>> {
    (0..class.n_states())
        .map(|s| {
            (0..class.n_actions())
                .map(|a| class.score(theta, s, a))
                .collect()
        })
        .collect()
}

fn fisher_from(eval: &PolicyEvaluation, scores: &[Vec<DVector<f64>>], dim: usize) -> DMatrix<f64> {
    let mut f = DMatrix::zeros(dim, dim);
    for (s, row) in scores.iter().enumerate() {
        for (a, g) in row.iter().enumerate() {
            f.ger(eval.occupancy[(s, a)], g, g, 1.0);
        }
    }
    f
}

fn gradient_from(eval: &PolicyEvaluation, scores: &[Vec<DVector<f64>>], dim: usize) -> DVector<f64> {
    let mut grad = DVector::zeros(dim);
    for (s, row) in scores.iter().enumerate() {
        for (a, g) in row.iter().enumerate() {
            grad.axpy(eval.occupancy[(s, a)] * eval.advantage[(s, a)], g, 1.0);
        }
    }
    grad
}

/// `F(theta) = sum nu(s,a) score score^T`.
pub fn fisher_matrix(mdp: &TabularMdp, class: &PolicyClass, theta: &PolicyParams) -> Result<DMatrix<f64>> {
    let eval = evaluate_params(mdp, class, theta)?;
    Ok(fisher_from(&eval, &score_table(class, theta)?, class.dim()))
}

/// Policy gradient theorem: `sum nu(s,a) A(s,a) score(s,a)`.
pub fn exact_policy_gradient(
    mdp: &TabularMdp,
    class: &PolicyClass,
    theta: &PolicyParams,
) -> Result<DVector<f64>> {
    let eval = evaluate_params(mdp, class, theta)?;
    Ok(gradient_from(&eval, &score_table(class, theta)?, class.dim()))
}

/// Moore-Penrose pseudoinverse with singular values below [`PINV_CUTOFF`] dropped.
pub fn pseudo_inverse(m: &DMatrix<f64>) -> DMatrix<f64> {
    if m.is_empty() {
        return DMatrix::zeros(m.ncols(), m.nrows());
    }
    m.clone()
        .svd(true, true)
        .pseudo_inverse(PINV_CUTOFF)
        .expect("u and v were computed")
}

/// `F^+ g`.
pub fn npg_direction(fisher: &DMatrix<f64>, gradient: &DVector<f64>) -> DVector<f64> {
    pseudo_inverse(fisher) * gradient
}

/// Exact natural gradient `omega* = F(theta)^+ grad J(theta)`.
pub fn exact_npg(mdp: &TabularMdp, class: &PolicyClass, theta: &PolicyParams) -> Result<DVector<f64>> {
    let eval = evaluate_params(mdp, class, theta)?;
    let scores = score_table(class, theta)?;
    let f = fisher_from(&eval, &scores, class.dim());
    let g = gradient_from(&eval, &scores, class.dim());
    Ok(npg_direction(&f, &g))
}

/// Exact critic moments `A_v = E[A_v(z)]`, `b_v = E[b_v(z)]` with
/// `(s, a) ~ nu`, `s' ~ P(.|s, a)`.
pub fn td_moments(
    mdp: &TabularMdp,
    eval: &PolicyEvaluation,
    features: &FeatureMap,
    c_beta: f64,
) -> (DMatrix<f64>, DVector<f64>) {
    let m = features.dim();
    let mut a_v = DMatrix::zeros(m + 1, m + 1);
    let mut b_v = DVector::zeros(m + 1);
    a_v[(0, 0)] = c_beta;
    for s in 0..mdp.n_states() {
        for a in 0..mdp.n_actions() {
            let w = eval.occupancy[(s, a)];
            let r = mdp.reward(s, a);
            b_v[0] += w * c_beta * r;
            for i in 0..m {
                let phi_i = features.get(s, i);
                a_v[(1 + i, 0)] += w * phi_i;
                b_v[1 + i] += w * r * phi_i;
                for (sp, p) in mdp.transition_row(s, a).iter().enumerate() {
                    for j in 0..m {
                        a_v[(1 + i, 1 + j)] +=
                            w * p * phi_i * (features.get(s, j) - features.get(sp, j));
                    }
                }
            }
        }
    }
    (a_v, b_v)
}

/// Solves `A_v xi = b_v` exactly.
pub fn td_fixed_point(
    mdp: &TabularMdp,
    class: &PolicyClass,
    theta: &PolicyParams,
    features: &FeatureMap,
    c_beta: f64,
) -> Result<TdFixedPoint> {
    let eval = evaluate_params(mdp, class, theta)?;
    td_fixed_point_from(mdp, &eval, features, c_beta)
}

pub fn td_fixed_point_from(
    mdp: &TabularMdp,
    eval: &PolicyEvaluation,
    features: &FeatureMap,
    c_beta: f64,
) -> Result<TdFixedPoint> {
    if !(c_beta > 0.0) {
        return Err(Error::argument(format!("c_beta must be positive, got {c_beta}")));
    }
    if features.n_states() != mdp.n_states() {
        return Err(Error::argument("feature map and MDP disagree on the state count"));
    }
    let (a_v, b_v) = td_moments(mdp, eval, features, c_beta);
    let smin = min_singular_value(&a_v);
    if smin < 1e-12 {
        return Err(Error::Singular {
            min_singular_value: smin,
        });
    }
    let xi = a_v
        .clone()
        .lu()
        .solve(&b_v)
        .ok_or(Error::Singular {
            min_singular_value: smin,
        })?;
    Ok(TdFixedPoint { xi, a_v, b_v })
}

/// `E(theta, zeta) = 1/2 sum_s d(s) (V(s) - zeta^T phi(s))^2`.
pub fn critic_error(eval: &PolicyEvaluation, features: &FeatureMap, zeta: &DVector<f64>) -> f64 {
    0.5 * (0..eval.v.len())
        .map(|s| {
            let r = eval.v[s] - features.value(zeta, s);
            eval.stationary[s] * r * r
        })
        .sum::<f64>()
}

/// Critic approximation error at the TD fixed point.
pub fn critic_approx_error(
    mdp: &TabularMdp,
    class: &PolicyClass,
    theta: &PolicyParams,
    features: &FeatureMap,
    c_beta: f64,
) -> Result<f64> {
    let eval = evaluate_params(mdp, class, theta)?;
    let fp = td_fixed_point_from(mdp, &eval, features, c_beta)?;
    Ok(critic_error(&eval, features, &fp.zeta()))
}

/// Worst-start total variation `max_s 1/2 |P(s, .) - d|_1`.
fn worst_tv(power: &DMatrix<f64>, d: &DVector<f64>) -> f64 {
    power
        .row_iter()
        .map(|row| 0.5 * row.iter().zip(d.iter()).map(|(p, q)| (p - q).abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Smallest `t >= 1` with worst-start TV distance to stationarity at most 1/4.
///
/// Doubles by repeated squaring until the threshold is crossed, then binary
/// searches the last doubling interval (TV to stationarity is non-increasing in t).
pub fn mixing_time(chain: &DMatrix<f64>) -> Result<u64> {
    let d = stationary_distribution(chain)?;
    let mut squares = vec![chain.clone()];
    let mut t = 1u64;
    while worst_tv(squares.last().expect("non-empty"), &d) > 0.25 {
        if t >= MIXING_CAP {
            return Err(Error::NonMixing(t));
        }
        let last = squares.last().expect("non-empty");
        squares.push(last * last);
        t *= 2;
    }
    if t == 1 {
        return Ok(1);
    }
    // TV(lo) > 1/4 >= TV(hi)
    let power = |e: u64| {
        let n = chain.nrows();
        let mut acc = DMatrix::identity(n, n);
        for (bit, sq) in squares.iter().enumerate() {
            if e >> bit & 1 == 1 {
                acc *= sq;
            }
        }
        acc
    };
    let (mut lo, mut hi) = (t / 2, t);
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if worst_tv(&power(mid), &d) > 0.25 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(hi)
}

/// Largest per-policy mixing time over a user-supplied grid of parameters.
pub fn mixing_time_over_grid(
    mdp: &TabularMdp,
    class: &PolicyClass,
    thetas: &[PolicyParams],
) -> Result<u64> {
    let mut worst = 0;
    for th in thetas {
        let chain = mdp.induced_chain(&class.policy_table(th)?);
        worst = worst.max(mixing_time(&chain)?);
    }
    Ok(worst)
}

/// Smallest eigenvalue of the symmetric part of a square matrix.
pub fn min_sym_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return f64::INFINITY;
    }
    let sym = (m + m.transpose()) * 0.5;
    SymmetricEigen::new(sym).eigenvalues.min()
}

/// `E[phi(s)(phi(s) - phi(s'))^T]` under `s ~ d`, `s' ~ P_pi(s, .)`.
pub fn critic_curvature(
    mdp: &TabularMdp,
    eval: &PolicyEvaluation,
    features: &FeatureMap,
) -> DMatrix<f64> {
    let m = features.dim();
    let mut out = DMatrix::zeros(m, m);
    for s in 0..mdp.n_states() {
        for a in 0..mdp.n_actions() {
            let w = eval.occupancy[(s, a)];
            for (sp, p) in mdp.transition_row(s, a).iter().enumerate() {
                for i in 0..m {
                    for j in 0..m {
                        out[(i, j)] +=
                            w * p * features.get(s, i) * (features.get(s, j) - features.get(sp, j));
                    }
                }
            }
        }
    }
    out
}

/// `lambda + sqrt(1/lambda^2 - 1)` for `0 < lambda <= 1`, `lambda` above 1,
/// infinite when `lambda <= 0`.
pub fn c_beta_threshold(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        f64::INFINITY
    } else if lambda <= 1.0 {
        lambda + (1.0 / (lambda * lambda) - 1.0).sqrt()
    } else {
        lambda
    }
}

/// `lambda` for one parameter. With no critic features the condition is
/// vacuous and 1 is reported.
pub fn critic_lambda(
    mdp: &TabularMdp,
    class: &PolicyClass,
    theta: &PolicyParams,
    features: &FeatureMap,
) -> Result<f64> {
    let eval = evaluate_params(mdp, class, theta)?;
    Ok(lambda_from(mdp, &eval, features))
}

fn lambda_from(mdp: &TabularMdp, eval: &PolicyEvaluation, features: &FeatureMap) -> f64 {
    if features.dim() == 0 {
        1.0
    } else {
        min_sym_eigenvalue(&critic_curvature(mdp, eval, features)).max(0.0)
    }
}

/// Evaluates the analysis constants at `theta`. When `c_beta` is `None` the
/// critic is solved at the computed threshold.
pub fn assumption_report(
    mdp: &TabularMdp,
    theta: &PolicyParams,
    features: &FeatureMap,
    class: &PolicyClass,
    c_beta: Option<f64>,
) -> Result<AssumptionReport> {
    let eval = evaluate_params(mdp, class, theta)?;
    let scores = score_table(class, theta)?;
    let lambda_min = lambda_from(mdp, &eval, features);
    let threshold = c_beta_threshold(lambda_min);
    let fisher = fisher_from(&eval, &scores, class.dim());
    let mu_min = if class.dim() == 0 {
        0.0
    } else {
        SymmetricEigen::new(fisher).eigenvalues.min().max(0.0)
    };
    let c = c_beta.unwrap_or(if threshold.is_finite() { threshold } else { 1.0 });
    let fp = td_fixed_point_from(mdp, &eval, features, c)?;
    let eps_app = critic_error(&eval, features, &fp.zeta());
    let chain = mdp.induced_chain(&class.policy_table(theta)?);
    let t_mix = mixing_time(&chain)?;
    let g1_bound = scores
        .iter()
        .flatten()
        .map(|g| g.norm())
        .fold(0.0, f64::max);
    Ok(AssumptionReport {
        lambda_min,
        mu_min,
        eps_app,
        t_mix,
        g1_bound,
        c_beta_threshold: threshold,
    })
}

/// Optimal gain `J*` and a deterministic optimal policy (`S x A` table) by
/// Howard policy iteration. Valid because every policy induces an ergodic
/// chain on the instances this crate generates.
pub fn optimal_gain(mdp: &TabularMdp) -> Result<(f64, DMatrix<f64>)> {
    let (n, k) = (mdp.n_states(), mdp.n_actions());
    let mut actions = vec![0usize; n];
    let to_table = |acts: &[usize]| DMatrix::from_fn(n, k, |s, a| if acts[s] == a { 1.0 } else { 0.0 });
    for _ in 0..10_000 {
        let eval = evaluate_policy(mdp, &to_table(&actions))?;
        let mut changed = false;
        for (s, act) in actions.iter_mut().enumerate() {
            let current = eval.q[(s, *act)];
            let (best, best_q) = (0..k)
                .map(|a| (a, eval.q[(s, a)]))
                .fold((*act, current), |acc, x| if x.1 > acc.1 { x } else { acc });
            if best_q > current + 1e-12 {
                *act = best;
                changed = true;
            }
        }
        if !changed {
            return Ok((eval.gain, to_table(&actions)));
        }
    }
    Err(Error::Ergodicity("policy iteration did not terminate".into()))
}

/// Secant estimate of the smoothness constant of `J`: the largest
/// `|grad J(t1) - grad J(t2)| / |t1 - t2|` over `pairs` random pairs drawn
/// uniformly from the ball of `radius` around `center`.
pub fn smoothness_probe(
    mdp: &TabularMdp,
    class: &PolicyClass,
    center: &PolicyParams,
    radius: f64,
    pairs: usize,
    rng: &mut RngStream,
) -> Result<f64> {
    let d = class.dim();
    if d == 0 {
        return Ok(0.0);
    }
    let point = |rng: &mut RngStream| -> Result<PolicyParams> {
        // Gaussian direction, radius by inverse CDF of r^d.
        let mut dir = DVector::from_fn(d, |_, _| -> f64 { StandardNormal.sample(rng.rng()) });
        let norm = dir.norm().max(1e-300);
        dir /= norm;
        let r = radius * rng.uniform().powf(1.0 / d as f64);
        PolicyParams::new(center.as_vector() + dir * r)
    };
    let mut best: f64 = 0.0;
    for _ in 0..pairs {
        let t1 = point(rng)?;
        let t2 = point(rng)?;
        let dist = (t1.as_vector() - t2.as_vector()).norm();
        if dist < 1e-9 {
            continue;
        }
        let g1 = exact_policy_gradient(mdp, class, &t1)?;
        let g2 = exact_policy_gradient(mdp, class, &t2)?;
        best = best.max((g1 - g2).norm() / dist);
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{generate_random_ergodic, reduced_one_hot_features};

    fn mat(rows: &[&[f64]]) -> DMatrix<f64> {
        DMatrix::from_fn(rows.len(), rows[0].len(), |i, j| rows[i][j])
    }

    fn two_state_chain_mdp() -> TabularMdp {
        TabularMdp::new(2, 1, vec![1.0, 0.0], vec![0.9, 0.1, 0.2, 0.8], vec![0.5, 0.5]).unwrap()
    }

    #[test]
    fn stationary_examples() {
        let d = stationary_distribution(&mat(&[&[0.5, 0.5], &[0.5, 0.5]])).unwrap();
        assert!((d[0] - 0.5).abs() < 1e-14 && (d[1] - 0.5).abs() < 1e-14);
        let d = stationary_distribution(&mat(&[&[0.9, 0.1], &[0.2, 0.8]])).unwrap();
        assert!((d[0] - 2.0 / 3.0).abs() < 1e-14 && (d[1] - 1.0 / 3.0).abs() < 1e-14);
        assert!(matches!(
            stationary_distribution(&DMatrix::identity(3, 3)),
            Err(Error::Ergodicity(_))
        ));
        // absorbing state 0 with transient state 1
        assert!(stationary_distribution(&mat(&[&[1.0, 0.0], &[0.5, 0.5]])).is_err());
    }

    #[test]
    fn single_state_evaluation() {
        let mdp = TabularMdp::new(1, 2, vec![0.4, 0.4], vec![1.0, 1.0], vec![1.0]).unwrap();
        let eval = evaluate_policy(&mdp, &mat(&[&[0.5, 0.5]])).unwrap();
        assert!((eval.gain - 0.4).abs() < 1e-15);
        assert!(eval.v[0].abs() < 1e-15);
        assert!(eval.q.iter().all(|q| q.abs() < 1e-15));
        assert!(eval.advantage.iter().all(|a| a.abs() < 1e-15));
    }

    #[test]
    fn constant_reward_has_zero_advantage() {
        let base = generate_random_ergodic(4, 3, 0.2, 5).unwrap();
        let n = base.n_states() * base.n_actions();
        let mut transition = Vec::new();
        for st in 0..4 {
            for a in 0..3 {
                transition.extend_from_slice(base.transition_row(st, a));
            }
        }
        let mdp = TabularMdp::new(4, 3, vec![0.3; n], transition, vec![0.25; 4]).unwrap();
        let class = PolicyClass::tabular(4, 3);
        let th = PolicyParams::from_slice(&[0.2, -0.4, 1.0, 0.3, -0.7, 0.1, 0.0, 0.5]).unwrap();
        let eval = evaluate_params(&mdp, &class, &th).unwrap();
        assert!((eval.gain - 0.3).abs() < 1e-12);
        assert!(eval.advantage.iter().all(|a| a.abs() < 1e-12));
    }

    #[test]
    fn two_state_chain_gain_and_values() {
        // Oracle by hand: d = (2/3, 1/3), J = 2/3. (I - P)V = r - J 1 gives
        // 0.1 V0 - 0.1 V1 = 1/3, with 2/3 V0 + 1/3 V1 = 0:
        // V0 - V1 = 10/3, V0 = 10/9, V1 = -20/9.
        let eval = evaluate_policy(&two_state_chain_mdp(), &mat(&[&[1.0], &[1.0]])).unwrap();
        assert!((eval.gain - 2.0 / 3.0).abs() < 1e-14);
        assert!((eval.v[0] - 10.0 / 9.0).abs() < 1e-12);
        assert!((eval.v[1] + 20.0 / 9.0).abs() < 1e-12);
    }

    #[test]
    fn fisher_single_state_uniform() {
        let mdp = TabularMdp::new(1, 2, vec![1.0, 0.0], vec![1.0, 1.0], vec![1.0]).unwrap();
        let class = PolicyClass::tabular(1, 2);
        let f = fisher_matrix(&mdp, &class, &PolicyParams::zeros(1)).unwrap();
        assert!((f[(0, 0)] - 0.25).abs() < 1e-15);
        let report = assumption_report(
            &mdp,
            &PolicyParams::zeros(1),
            &FeatureMap::empty(1),
            &class,
            None,
        )
        .unwrap();
        assert!((report.mu_min - 0.25).abs() < 1e-15);
    }

    #[test]
    fn degenerate_scores_give_zero_fisher() {
        let mdp = generate_random_ergodic(3, 2, 0.2, 1).unwrap();
        let class = PolicyClass::feature_softmax(3, 2, 2, vec![0.0; 12]).unwrap();
        let f = fisher_matrix(&mdp, &class, &PolicyParams::zeros(2)).unwrap();
        assert!(f.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn npg_scalar_fisher_and_zero_gradient() {
        let f = DMatrix::identity(3, 3) * 2.0;
        let g = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let w = npg_direction(&f, &g);
        assert!((w - &g / 2.0).norm() < 1e-14);
        assert!(npg_direction(&f, &DVector::zeros(3)).norm() == 0.0);
    }

    #[test]
    fn npg_normal_equations() {
        let mdp = generate_random_ergodic(2, 2, 0.2, 13).unwrap();
        let class = PolicyClass::tabular(2, 2);
        let th = PolicyParams::from_slice(&[0.4, -1.1]).unwrap();
        let f = fisher_matrix(&mdp, &class, &th).unwrap();
        let g = exact_policy_gradient(&mdp, &class, &th).unwrap();
        let w = exact_npg(&mdp, &class, &th).unwrap();
        let residual = &f * &w - &g;
        // residual must be orthogonal to range(F)
        let svd = f.clone().svd(true, false);
        let u = svd.u.unwrap();
        for (i, sv) in svd.singular_values.iter().enumerate() {
            if *sv > PINV_CUTOFF {
                assert!(u.column(i).dot(&residual).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn gradient_scales_with_rewards() {
        let mdp = generate_random_ergodic(3, 2, 0.2, 2).unwrap();
        let half = mdp.with_scaled_rewards(0.5).unwrap();
        let class = PolicyClass::tabular(3, 2);
        let th = PolicyParams::from_slice(&[0.3, -0.2, 0.9]).unwrap();
        let g = exact_policy_gradient(&mdp, &class, &th).unwrap();
        let gh = exact_policy_gradient(&half, &class, &th).unwrap();
        assert!((g * 0.5 - gh).norm() < 1e-13);
    }

    #[test]
    fn gradient_vanishes_with_zero_advantage() {
        // constant rewards make every advantage zero
        let mdp = TabularMdp::new(1, 3, vec![0.6; 3], vec![1.0; 3], vec![1.0]).unwrap();
        let class = PolicyClass::tabular(1, 3);
        let g = exact_policy_gradient(&mdp, &class, &PolicyParams::from_slice(&[4.0, -3.0]).unwrap())
            .unwrap();
        assert!(g.norm() < 1e-14);
    }

    #[test]
    fn td_fixed_point_examples() {
        let mdp = generate_random_ergodic(4, 2, 0.2, 3).unwrap();
        let class = PolicyClass::tabular(4, 2);
        let th = PolicyParams::from_slice(&[0.1, 0.5, -0.3, 0.8]).unwrap();
        let eval = evaluate_params(&mdp, &class, &th).unwrap();

        // m = 0: scalar system
        let fp = td_fixed_point(&mdp, &class, &th, &FeatureMap::empty(4), 2.0).unwrap();
        assert_eq!(fp.xi.len(), 1);
        assert!((fp.eta() - eval.gain).abs() < 1e-12);

        // features spanning V exactly: phi = V / max|V|
        let scale = eval.v.amax();
        let table = DMatrix::from_fn(4, 1, |s, _| eval.v[s] / scale);
        let feats = FeatureMap::new(table).unwrap();
        let fp = td_fixed_point(&mdp, &class, &th, &feats, 5.0).unwrap();
        assert!((fp.eta() - eval.gain).abs() < 1e-10);
        for s in 0..4 {
            assert!((feats.value(&fp.zeta(), s) - eval.v[s]).abs() < 1e-10);
        }
        assert!(critic_approx_error(&mdp, &class, &th, &feats, 5.0).unwrap() < 1e-12);

        // zero features: residual is V itself
        let zero = FeatureMap::new(DMatrix::zeros(4, 2)).unwrap();
        assert!(matches!(
            td_fixed_point(&mdp, &class, &th, &zero, 1.0),
            Err(Error::Singular { .. })
        ));
        let expected: f64 = 0.5 * (0..4).map(|s| eval.stationary[s] * eval.v[s].powi(2)).sum::<f64>();
        assert!((critic_error(&eval, &zero, &DVector::zeros(2)) - expected).abs() < 1e-15);
    }

    #[test]
    fn reduced_one_hot_error_is_pinned_value() {
        // zeta* = V(s) - V(1) makes the residual V(1) at every state.
        let mdp = two_state_chain_mdp();
        let class = PolicyClass::tabular(2, 1);
        let th = PolicyParams::zeros(0);
        let feats = reduced_one_hot_features(2).unwrap();
        let eval = evaluate_params(&mdp, &class, &th).unwrap();
        let e = critic_approx_error(&mdp, &class, &th, &feats, 3.0).unwrap();
        let v1 = -20.0 / 9.0;
        assert!((e - 0.5 * v1 * v1).abs() < 1e-12, "{e}");
        assert!((eval.v[1] - v1).abs() < 1e-12);
    }

    #[test]
    fn mixing_time_examples() {
        assert_eq!(mixing_time(&mat(&[&[0.5, 0.5], &[0.5, 0.5]])).unwrap(), 1);
        assert_eq!(mixing_time(&mat(&[&[0.9, 0.1], &[0.2, 0.8]])).unwrap(), 3);
        assert!(mixing_time(&mat(&[&[0.0, 1.0], &[1.0, 0.0]])).is_err());
    }

    #[test]
    fn mixing_time_is_exact_threshold() {
        for seed in 0..10 {
            let mdp = generate_random_ergodic(6, 1, 0.9, seed).unwrap();
            let chain = mdp.induced_chain(&DMatrix::from_element(6, 1, 1.0));
            let d = stationary_distribution(&chain).unwrap();
            let t = mixing_time(&chain).unwrap();
            assert!(worst_tv(&chain.pow(t as u32), &d) <= 0.25);
            if t > 1 {
                assert!(worst_tv(&chain.pow(t as u32 - 1), &d) > 0.25);
            }
        }
    }

    #[test]
    fn mixing_time_monotone_under_interpolation() {
        let p = mat(&[&[0.95, 0.05, 0.0], &[0.0, 0.9, 0.1], &[0.1, 0.0, 0.9]]);
        let d = stationary_distribution(&p).unwrap();
        let target = DVector::from_element(3, 1.0) * d.transpose();
        let mut prev = u64::MAX;
        for i in 0..=10 {
            let w = i as f64 / 10.0;
            let chain = &p * (1.0 - w) + &target * w;
            let t = mixing_time(&chain).unwrap();
            assert!(t <= prev);
            prev = t;
        }
        assert_eq!(prev, 1);
    }

    #[test]
    fn threshold_formula() {
        assert!((c_beta_threshold(0.5) - (0.5 + 3f64.sqrt())).abs() < 1e-15);
        assert!((c_beta_threshold(0.5) - 2.232).abs() < 1e-3);
        assert_eq!(c_beta_threshold(1.5), 1.5);
        assert_eq!(c_beta_threshold(1.0), 1.0);
        assert!(c_beta_threshold(0.0).is_infinite());
    }

    #[test]
    fn report_basics() {
        let mdp = generate_random_ergodic(4, 3, 0.2, 11).unwrap();
        let class = PolicyClass::tabular(4, 3);
        let th = PolicyParams::from_slice(&[0.5, -0.5, 0.2, 0.0, 1.0, -1.0, 0.3, 0.3]).unwrap();
        let feats = reduced_one_hot_features(4).unwrap();
        let r = assumption_report(&mdp, &th, &feats, &class, None).unwrap();
        assert!(r.lambda_min > 0.0);
        assert!(r.mu_min > 0.0);
        assert!(r.g1_bound <= 2f64.sqrt());
        assert!(r.eps_app >= 0.0 && r.eps_app.is_finite());
        assert!(r.t_mix >= 1);
        assert!(r.c_beta_threshold >= r.lambda_min);
    }

    #[test]
    fn optimal_gain_dominates() {
        let mdp = generate_random_ergodic(4, 2, 0.2, 6).unwrap();
        let (j_star, table) = optimal_gain(&mdp).unwrap();
        let class = PolicyClass::tabular(4, 2);
        let mut rng = RngStream::new(1);
        for _ in 0..50 {
            let th = PolicyParams::new(DVector::from_fn(4, |_, _| 6.0 * rng.uniform() - 3.0)).unwrap();
            assert!(gain(&mdp, &class, &th).unwrap() <= j_star + 1e-12);
        }
        // brute force over all deterministic policies
        let mut best = f64::NEG_INFINITY;
        for code in 0..16usize {
            let t = DMatrix::from_fn(4, 2, |s, a| if (code >> s) & 1 == a { 1.0 } else { 0.0 });
            best = best.max(evaluate_policy(&mdp, &t).unwrap().gain);
        }
        assert!((best - j_star).abs() < 1e-12);
        assert!((evaluate_policy(&mdp, &table).unwrap().gain - j_star).abs() < 1e-15);
    }

    #[test]
    fn smoothness_probe_positive() {
        let mdp = generate_random_ergodic(3, 2, 0.2, 6).unwrap();
        let class = PolicyClass::tabular(3, 2);
        let mut rng = RngStream::new(3);
        let l = smoothness_probe(&mdp, &class, &PolicyParams::zeros(3), 1.0, 20, &mut rng).unwrap();
        assert!(l > 0.0 && l.is_finite());
    }
}
