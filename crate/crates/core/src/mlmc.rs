//! Multi-level Monte Carlo estimation along a single continuing trajectory.
//!
//! One assembly draws a level `Q ~ Geom(1/2)` on `{1, 2, ...}`, rolls out
//! `2^Q` transitions (or a single transition when `2^Q > T_max`) from the
//! carried state, and returns
//!
//! ```text
//! Y0 + 2^Q (Y^Q - Y^{Q-1})   if 2^Q <= T_max
//! Y0                         otherwise
//! ```
//!
//! where `Y^j` averages the statistic over the first `2^j` transitions of the
//! same rollout. In expectation this matches the `T_max`-sample average while
//! costing `O(log T_max)` transitions on average.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::mdp::{FeatureMap, TabularMdp, Transition};
use crate::policy::{PolicyClass, PolicyParams};
use crate::rng::RngStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LevelDraw {
    pub q: u32,
    /// `2^q > T_max`.
    pub truncated: bool,
    /// `2^q`, or 1 when truncated.
    pub planned_len: usize,
}

/// Matrix/vector pair produced by one MLMC assembly.
#[derive(Debug, Clone)]
pub struct MlmcEstimate {
    pub a_hat: DMatrix<f64>,
    pub b_hat: DVector<f64>,
    pub level: LevelDraw,
    pub transitions_used: usize,
    pub final_state: usize,
}

fn check_t_max(t_max: usize) -> Result<()> {
    if t_max < 2 || !t_max.is_power_of_two() {
        return Err(Error::argument(format!(
            "T_max must be a power of two >= 2, got {t_max}"
        )));
    }
    Ok(())
}

/// Draws `q` with `P(q = j) = 2^-j`, `j >= 1`, and applies the truncation rule.
pub fn draw_level(rng: &mut RngStream, t_max: usize) -> Result<LevelDraw> {
    check_t_max(t_max)?;
    // Each bit is a fair coin; the position of the first 1 is geometric.
    let q = loop {
        let bits = rng.next_u64();
        if bits != 0 {
            break bits.trailing_zeros() + 1;
        }
    };
    let max_level = t_max.trailing_zeros();
    let truncated = q > max_level;
    Ok(LevelDraw {
        q,
        truncated,
        planned_len: if truncated { 1 } else { 1usize << q },
    })
}

/// Expected transitions per assembly: `log2(T_max) + 2^-log2(T_max)`.
pub fn expected_cost(t_max: usize) -> Result<f64> {
    check_t_max(t_max)?;
    let levels = t_max.trailing_zeros() as i32;
    Ok(levels as f64 + 2f64.powi(-levels))
}

/// Rolls out exactly `len` transitions under `pi_theta` starting from `s0`.
/// The returned final state is the last `s'`, to be passed to the next call.
pub fn collect_trajectory(
    mdp: &TabularMdp,
    class: &PolicyClass,
    theta: &PolicyParams,
    s0: usize,
    len: usize,
    rng: &mut RngStream,
) -> Result<(Vec<Transition>, usize)> {
    if len == 0 {
        return Err(Error::argument("trajectory length must be at least 1"));
    }
    if s0 >= mdp.n_states() {
        return Err(Error::Index {
            what: "state",
            index: s0,
            bound: mdp.n_states(),
        });
    }
    // validates theta against the class once
    class.action_probs(theta, s0)?;
    let mut probs = vec![0.0; class.n_actions()];
    let mut out = Vec::with_capacity(len);
    let mut s = s0;
    for _ in 0..len {
        class.probs_into(theta, s, &mut probs);
        let a = rng.categorical(&probs);
        let z = mdp.step(s, a, rng);
        s = z.s_next;
        out.push(z);
    }
    Ok((out, s))
}

/// A per-transition statistic `z -> (A(z), b(z))` of fixed shape.
pub trait TransitionStatistic {
    /// `(rows, cols)` of the matrix part; the vector part has `rows` entries.
    fn shape(&self) -> (usize, usize);

    /// Adds `A(z)` and `b(z)` into the accumulators.
    fn accumulate(&self, z: &Transition, a: &mut DMatrix<f64>, b: &mut DVector<f64>);

    fn evaluate(&self, z: &Transition) -> (DMatrix<f64>, DVector<f64>) {
        let (r, c) = self.shape();
        let mut a = DMatrix::zeros(r, c);
        let mut b = DVector::zeros(r);
        self.accumulate(z, &mut a, &mut b);
        (a, b)
    }
}

/// Natural-gradient statistic: `A_u(z) = score score^T`,
/// `b_u(z) = Ahat(xi, z) score` with the TD advantage
/// `Ahat = r - eta + zeta^T (phi(s') - phi(s))`.
#[derive(Debug, Clone)]
pub struct NpgStatistic<'a> {
    pub class: &'a PolicyClass,
    pub theta: &'a PolicyParams,
    pub eta: f64,
    pub zeta: &'a DVector<f64>,
    pub features: &'a FeatureMap,
}

impl NpgStatistic<'_> {
    /// TD advantage estimate.
    pub fn advantage(&self, z: &Transition) -> f64 {
        z.reward - self.eta + self.features.value(self.zeta, z.s_next)
            - self.features.value(self.zeta, z.s)
    }

    /// Single-transition gradient estimate `A_u(z) omega - b_u(z)`.
    pub fn crude_gradient(&self, z: &Transition, omega: &DVector<f64>) -> DVector<f64> {
        let (a, b) = self.evaluate(z);
        a * omega - b
    }
}

impl TransitionStatistic for NpgStatistic<'_> {
    fn shape(&self) -> (usize, usize) {
        let d = self.class.dim();
        (d, d)
    }

    fn accumulate(&self, z: &Transition, a: &mut DMatrix<f64>, b: &mut DVector<f64>) {
        let d = self.class.dim();
        let mut probs = vec![0.0; self.class.n_actions()];
        self.class.probs_into(self.theta, z.s, &mut probs);
        let mut g = DVector::zeros(d);
        self.class.score_into(z.s, z.a, &probs, g.as_mut_slice());
        a.ger(1.0, &g, &g, 1.0);
        b.axpy(self.advantage(z), &g, 1.0);
    }
}

/// `u`-statistic terms `(A_u(z), b_u(z))` for one transition.
pub fn u_stat(
    class: &PolicyClass,
    theta: &PolicyParams,
    eta: f64,
    zeta: &DVector<f64>,
    z: &Transition,
    features: &FeatureMap,
) -> (DMatrix<f64>, DVector<f64>) {
    NpgStatistic {
        class,
        theta,
        eta,
        zeta,
        features,
    }
    .evaluate(z)
}

/// Critic statistic of dimension `m + 1`:
///
/// ```text
/// A_v(z) = [[c_beta, 0], [phi(s), phi(s)(phi(s) - phi(s'))^T]]
/// b_v(z) = [c_beta r, r phi(s)]
/// ```
#[derive(Debug, Clone)]
pub struct CriticStatistic<'a> {
    pub c_beta: f64,
    pub features: &'a FeatureMap,
}

impl CriticStatistic<'_> {
    /// Single-transition update direction `A_v(z) xi - b_v(z)`.
    pub fn crude_direction(&self, z: &Transition, xi: &DVector<f64>) -> DVector<f64> {
        let (a, b) = self.evaluate(z);
        a * xi - b
    }
}

impl TransitionStatistic for CriticStatistic<'_> {
    fn shape(&self) -> (usize, usize) {
        let n = self.features.dim() + 1;
        (n, n)
    }

    fn accumulate(&self, z: &Transition, a: &mut DMatrix<f64>, b: &mut DVector<f64>) {
        let f = self.features;
        let m = f.dim();
        a[(0, 0)] += self.c_beta;
        b[0] += self.c_beta * z.reward;
        for i in 0..m {
            let phi_i = f.get(z.s, i);
            if phi_i == 0.0 {
                continue;
            }
            a[(1 + i, 0)] += phi_i;
            b[1 + i] += z.reward * phi_i;
            for j in 0..m {
                a[(1 + i, 1 + j)] += phi_i * (f.get(z.s, j) - f.get(z.s_next, j));
            }
        }
    }
}

/// `v`-statistic terms `(A_v(z), b_v(z))` for one transition.
pub fn v_stat(z: &Transition, c_beta: f64, features: &FeatureMap) -> (DMatrix<f64>, DVector<f64>) {
    CriticStatistic { c_beta, features }.evaluate(z)
}

/// Level averages `Y0`, `Y^{q-1}` and `Y^q` of one rollout. `Y^{q-1}` uses
/// the first half of the transitions that make up `Y^q`.
#[derive(Debug, Clone)]
pub struct LevelAverages {
    pub first: (DMatrix<f64>, DVector<f64>),
    pub coarse: (DMatrix<f64>, DVector<f64>),
    pub fine: (DMatrix<f64>, DVector<f64>),
}

pub fn level_averages<S: TransitionStatistic + ?Sized>(
    stat: &S,
    transitions: &[Transition],
    q: u32,
) -> Result<LevelAverages> {
    let fine_len = 1usize << q;
    if q == 0 || transitions.len() < fine_len {
        return Err(Error::argument(format!(
            "level {q} needs {fine_len} transitions, got {}",
            transitions.len()
        )));
    }
    let coarse_len = fine_len / 2;
    let (r, c) = stat.shape();
    let mut a = DMatrix::zeros(r, c);
    let mut b = DVector::zeros(r);
    stat.accumulate(&transitions[0], &mut a, &mut b);
    let first = (a.clone(), b.clone());
    for z in &transitions[1..coarse_len] {
        stat.accumulate(z, &mut a, &mut b);
    }
    let coarse = (&a / coarse_len as f64, &b / coarse_len as f64);
    for z in &transitions[coarse_len..fine_len] {
        stat.accumulate(z, &mut a, &mut b);
    }
    let fine = (a / fine_len as f64, b / fine_len as f64);
    Ok(LevelAverages {
        first,
        coarse,
        fine,
    })
}

/// Combines a rollout into the MLMC estimate for an already drawn level.
pub fn mlmc_combine<S: TransitionStatistic + ?Sized>(
    stat: &S,
    transitions: &[Transition],
    level: LevelDraw,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    if transitions.is_empty() {
        return Err(Error::argument("empty rollout"));
    }
    if level.truncated {
        return Ok(stat.evaluate(&transitions[0]));
    }
    let avg = level_averages(stat, transitions, level.q)?;
    let scale = (1usize << level.q) as f64;
    let a = avg.first.0 + (avg.fine.0 - avg.coarse.0) * scale;
    let b = avg.first.1 + (avg.fine.1 - avg.coarse.1) * scale;
    Ok((a, b))
}

/// One MLMC assembly starting from the carried state `s0`.
pub fn mlmc_assemble<S: TransitionStatistic + ?Sized>(
    stat: &S,
    mdp: &TabularMdp,
    class: &PolicyClass,
    theta: &PolicyParams,
    s0: usize,
    t_max: usize,
    rng: &mut RngStream,
) -> Result<MlmcEstimate> {
    Ok(mlmc_assemble_traced(stat, mdp, class, theta, s0, t_max, rng)?.0)
}

/// [`mlmc_assemble`] that also returns the rollout it consumed.
pub fn mlmc_assemble_traced<S: TransitionStatistic + ?Sized>(
    stat: &S,
    mdp: &TabularMdp,
    class: &PolicyClass,
    theta: &PolicyParams,
    s0: usize,
    t_max: usize,
    rng: &mut RngStream,
) -> Result<(MlmcEstimate, Vec<Transition>)> {
    let level = draw_level(rng, t_max)?;
    let (transitions, final_state) =
        collect_trajectory(mdp, class, theta, s0, level.planned_len, rng)?;
    let (a_hat, b_hat) = mlmc_combine(stat, &transitions, level)?;
    Ok((
        MlmcEstimate {
            a_hat,
            b_hat,
            level,
            transitions_used: transitions.len(),
            final_state,
        },
        transitions,
    ))
}

/// Plain average of the statistic over `len` consecutive transitions.
pub fn batch_average<S: TransitionStatistic + ?Sized>(
    stat: &S,
    mdp: &TabularMdp,
    class: &PolicyClass,
    theta: &PolicyParams,
    s0: usize,
    len: usize,
    rng: &mut RngStream,
) -> Result<(DMatrix<f64>, DVector<f64>, usize)> {
    let (transitions, final_state) = collect_trajectory(mdp, class, theta, s0, len, rng)?;
    let (r, c) = stat.shape();
    let mut a = DMatrix::zeros(r, c);
    let mut b = DVector::zeros(r);
    for z in &transitions {
        stat.accumulate(z, &mut a, &mut b);
    }
    Ok((a / len as f64, b / len as f64, final_state))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{generate_random_ergodic, reduced_one_hot_features};
    use crate::oracle;

    struct Constant;

    impl TransitionStatistic for Constant {
        fn shape(&self) -> (usize, usize) {
            (2, 1)
        }
        fn accumulate(&self, _: &Transition, a: &mut DMatrix<f64>, b: &mut DVector<f64>) {
            a[(0, 0)] += 1.5;
            a[(1, 0)] -= 0.25;
            b[0] += 3.0;
            b[1] += 0.125;
        }
    }

    fn setup() -> (TabularMdp, PolicyClass, PolicyParams) {
        let mdp = generate_random_ergodic(3, 2, 0.2, 42).unwrap();
        let class = PolicyClass::tabular(3, 2);
        let theta = PolicyParams::from_slice(&[0.3, -0.6, 1.1]).unwrap();
        (mdp, class, theta)
    }

    #[test]
    fn level_pmf() {
        let mut rng = RngStream::new(1);
        let n = 1_000_000;
        let mut counts = [0usize; 3];
        for _ in 0..n {
            let lv = draw_level(&mut rng, 1 << 20).unwrap();
            if lv.q <= 2 {
                counts[lv.q as usize] += 1;
            }
            assert!(lv.q >= 1);
        }
        assert!((counts[1] as f64 / n as f64 - 0.5).abs() < 0.002);
        assert!((counts[2] as f64 / n as f64 - 0.25).abs() < 0.002);
    }

    #[test]
    fn truncation_rule() {
        let mut rng = RngStream::new(2);
        for _ in 0..10_000 {
            let lv = draw_level(&mut rng, 2).unwrap();
            assert!(lv.planned_len == 1 || lv.planned_len == 2);
            assert_eq!(lv.truncated, lv.q > 1);
        }
        assert!(draw_level(&mut rng, 1).is_err());
        assert!(draw_level(&mut rng, 12).is_err());
        assert!((expected_cost(4).unwrap() - 2.25).abs() < 1e-15);
        assert!((expected_cost(2).unwrap() - 1.5).abs() < 1e-15);
    }

    #[test]
    fn trajectory_contracts() {
        let (mdp, class, theta) = setup();
        let mut rng = RngStream::new(3);
        let (one, fin) = collect_trajectory(&mdp, &class, &theta, 1, 1, &mut rng).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(fin, one[0].s_next);
        let (second, _) = collect_trajectory(&mdp, &class, &theta, fin, 5, &mut rng).unwrap();
        assert_eq!(second[0].s, fin);
        for w in second.windows(2) {
            assert_eq!(w[0].s_next, w[1].s);
        }
        assert!(collect_trajectory(&mdp, &class, &theta, 0, 0, &mut rng).is_err());
    }

    #[test]
    fn deterministic_orbit() {
        // 0 -> 1 -> 2 -> 0 with a single action
        let mdp = TabularMdp::new(
            3,
            1,
            vec![0.1, 0.2, 0.3],
            vec![0., 1., 0., 0., 0., 1., 1., 0., 0.],
            vec![1.0, 0.0, 0.0],
        )
        .unwrap();
        let class = PolicyClass::tabular(3, 1);
        let mut rng = RngStream::new(0);
        let (traj, fin) =
            collect_trajectory(&mdp, &class, &PolicyParams::zeros(0), 0, 7, &mut rng).unwrap();
        let states: Vec<usize> = traj.iter().map(|z| z.s).collect();
        assert_eq!(states, vec![0, 1, 2, 0, 1, 2, 0]);
        assert_eq!(fin, 1);
    }

    #[test]
    fn u_stat_substitution() {
        // r = 1, eta = 0.5, zeta^T(phi(s') - phi(s)) = -0.25
        let class = PolicyClass::tabular(2, 2);
        let theta = PolicyParams::from_slice(&[0.2, -0.3]).unwrap();
        let feats = reduced_one_hot_features(2).unwrap();
        let zeta = DVector::from_vec(vec![0.25]);
        let z = Transition {
            s: 0,
            a: 1,
            s_next: 1,
            reward: 1.0,
        };
        let (a, b) = u_stat(&class, &theta, 0.5, &zeta, &z, &feats);
        let g = class.score(&theta, 0, 1).unwrap();
        assert!((b - &g * 0.25).norm() < 1e-15);
        assert!((a - &g * g.transpose()).norm() < 1e-15);
    }

    #[test]
    fn u_stat_zero_score() {
        let class = PolicyClass::feature_softmax(2, 2, 2, vec![0.0; 8]).unwrap();
        let theta = PolicyParams::zeros(2);
        let feats = reduced_one_hot_features(2).unwrap();
        let z = Transition {
            s: 1,
            a: 0,
            s_next: 0,
            reward: 0.7,
        };
        let (a, b) = u_stat(&class, &theta, 0.1, &DVector::from_vec(vec![1.0]), &z, &feats);
        assert!(a.iter().all(|v| *v == 0.0));
        assert!(b.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn v_stat_first_row() {
        let feats = reduced_one_hot_features(3).unwrap();
        let z = Transition {
            s: 0,
            a: 0,
            s_next: 2,
            reward: 1.0,
        };
        let xi = DVector::from_vec(vec![0.3, 0.4, -0.2]);
        let stat = CriticStatistic {
            c_beta: 2.0,
            features: &feats,
        };
        let dir = stat.crude_direction(&z, &xi);
        assert!((dir[0] + 1.4).abs() < 1e-15);

        let empty = FeatureMap::empty(3);
        let (a, b) = v_stat(&z, 2.0, &empty);
        assert_eq!(a.shape(), (1, 1));
        let scalar = a[(0, 0)] * 0.3 - b[0];
        assert!((scalar - 2.0 * (0.3 - 1.0)).abs() < 1e-15);
    }

    #[test]
    fn v_stat_matches_block_definition() {
        let feats = FeatureMap::new(DMatrix::from_row_slice(
            3,
            2,
            &[0.6, 0.0, 0.0, -0.8, 0.3, 0.4],
        ))
        .unwrap();
        let z = Transition {
            s: 2,
            a: 1,
            s_next: 1,
            reward: 0.9,
        };
        let (a, b) = v_stat(&z, 3.0, &feats);
        let phi = feats.phi(2);
        let diff = feats.phi(2) - feats.phi(1);
        let block = &phi * diff.transpose();
        assert_eq!(a[(0, 0)], 3.0);
        assert_eq!(a[(0, 1)], 0.0);
        for i in 0..2 {
            assert!((a[(1 + i, 0)] - phi[i]).abs() < 1e-15);
            for j in 0..2 {
                assert!((a[(1 + i, 1 + j)] - block[(i, j)]).abs() < 1e-15);
            }
            assert!((b[1 + i] - 0.9 * phi[i]).abs() < 1e-15);
        }
        assert!((b[0] - 2.7).abs() < 1e-15);
    }

    #[test]
    fn constant_statistic_is_level_free() {
        let (mdp, class, theta) = setup();
        let mut rng = RngStream::new(5);
        let mut s = 0;
        for _ in 0..500 {
            let est = mlmc_assemble(&Constant, &mdp, &class, &theta, s, 64, &mut rng).unwrap();
            assert!((est.a_hat[(0, 0)] - 1.5).abs() < 1e-12);
            assert!((est.a_hat[(1, 0)] + 0.25).abs() < 1e-12);
            assert!((est.b_hat[0] - 3.0).abs() < 1e-12);
            assert!((est.b_hat[1] - 0.125).abs() < 1e-12);
            s = est.final_state;
        }
    }

    #[test]
    fn estimate_recomputes_from_rollout() {
        let (mdp, class, theta) = setup();
        let feats = reduced_one_hot_features(3).unwrap();
        let stat = CriticStatistic {
            c_beta: 2.0,
            features: &feats,
        };
        let mut rng = RngStream::new(6);
        let mut s = 0;
        for _ in 0..300 {
            let (est, traj) =
                mlmc_assemble_traced(&stat, &mdp, &class, &theta, s, 32, &mut rng).unwrap();
            assert_eq!(est.transitions_used, est.level.planned_len);
            assert_eq!(traj.len(), est.transitions_used);
            assert_eq!(est.final_state, traj.last().unwrap().s_next);
            assert_eq!(traj[0].s, s);

            let y = |range: &[Transition]| {
                let mut b = DVector::zeros(3);
                for z in range {
                    b += v_stat(z, 2.0, &feats).1;
                }
                b / range.len() as f64
            };
            let expected = if est.level.truncated {
                y(&traj[..1])
            } else {
                let n = traj.len();
                y(&traj[..1]) + (y(&traj[..n]) - y(&traj[..n / 2])) * n as f64
            };
            assert!((&est.b_hat - expected).amax() < 1e-12);
            s = est.final_state;
        }
    }

    #[test]
    fn coarse_level_uses_first_half() {
        let (mdp, class, theta) = setup();
        let mut rng = RngStream::new(7);
        let (traj, _) = collect_trajectory(&mdp, &class, &theta, 0, 16, &mut rng).unwrap();
        let feats = reduced_one_hot_features(3).unwrap();
        let stat = CriticStatistic {
            c_beta: 1.0,
            features: &feats,
        };
        let avg = level_averages(&stat, &traj, 4).unwrap();
        let mut b_half = DVector::zeros(3);
        for z in &traj[..8] {
            b_half += stat.evaluate(z).1;
        }
        b_half /= 8.0;
        assert!((&avg.coarse.1 - &b_half).amax() < 1e-14);
        // perturbing the second half leaves the coarse average untouched
        let mut changed = traj.clone();
        for z in &mut changed[8..] {
            z.reward = 0.0;
        }
        let avg2 = level_averages(&stat, &changed, 4).unwrap();
        assert_eq!(avg.coarse.1, avg2.coarse.1);
        assert_ne!(avg.fine.1, avg2.fine.1);
    }

    #[test]
    fn u_moment_matches_fisher() {
        // Stationary-sampled transitions: draw s ~ d, a ~ pi, s' ~ P.
        let mdp = generate_random_ergodic(3, 2, 0.3, 8).unwrap();
        let class = PolicyClass::tabular(3, 2);
        let theta = PolicyParams::from_slice(&[0.5, -0.4, 0.2]).unwrap();
        let feats = reduced_one_hot_features(3).unwrap();
        let eval = oracle::evaluate_params(&mdp, &class, &theta).unwrap();
        let fisher = oracle::fisher_matrix(&mdp, &class, &theta).unwrap();
        let fp = oracle::td_fixed_point(&mdp, &class, &theta, &feats, 3.0).unwrap();
        let grad = oracle::exact_policy_gradient(&mdp, &class, &theta).unwrap();
        let zeta = fp.zeta();
        let stat = NpgStatistic {
            class: &class,
            theta: &theta,
            eta: fp.eta(),
            zeta: &zeta,
            features: &feats,
        };
        let mut rng = RngStream::new(9);
        let n = 1_000_000;
        let d = class.dim();
        let mut sum_a = DMatrix::zeros(d, d);
        let mut sq_a = DMatrix::zeros(d, d);
        let mut sum_b = DVector::zeros(d);
        let mut sq_b = DVector::zeros(d);
        let stationary: Vec<f64> = eval.stationary.iter().cloned().collect();
        for _ in 0..n {
            let s = rng.categorical(&stationary);
            let a = class.sample_action(&theta, s, &mut rng).unwrap();
            let z = mdp.sample_transition(s, a, &mut rng).unwrap();
            let (am, bv) = stat.evaluate(&z);
            sq_a += am.component_mul(&am);
            sq_b += bv.component_mul(&bv);
            sum_a += am;
            sum_b += bv;
        }
        let nf = n as f64;
        for i in 0..d {
            for j in 0..d {
                let mean = sum_a[(i, j)] / nf;
                let se = ((sq_a[(i, j)] / nf - mean * mean) / nf).sqrt();
                assert!((mean - fisher[(i, j)]).abs() <= 3.0 * se + 1e-12, "F[{i},{j}]");
            }
            // reduced one-hot features represent V up to a constant, so the
            // TD advantage is unbiased for the policy gradient
            let mean = sum_b[i] / nf;
            let se = ((sq_b[i] / nf - mean * mean) / nf).sqrt();
            assert!((mean - grad[i]).abs() <= 3.0 * se, "grad[{i}]");
        }
    }

    #[test]
    fn v_moment_matches_oracle() {
        let mdp = generate_random_ergodic(3, 2, 0.3, 10).unwrap();
        let class = PolicyClass::tabular(3, 2);
        let theta = PolicyParams::from_slice(&[-0.5, 0.4, 0.9]).unwrap();
        let feats = reduced_one_hot_features(3).unwrap();
        let fp = oracle::td_fixed_point(&mdp, &class, &theta, &feats, 2.5).unwrap();
        let eval = oracle::evaluate_params(&mdp, &class, &theta).unwrap();
        let stat = CriticStatistic {
            c_beta: 2.5,
            features: &feats,
        };
        let mut rng = RngStream::new(11);
        let n = 1_000_000;
        let k = 3;
        let mut sum_a = DMatrix::zeros(k, k);
        let mut sq_a = DMatrix::zeros(k, k);
        let mut sum_b = DVector::zeros(k);
        let mut sq_b = DVector::zeros(k);
        let stationary: Vec<f64> = eval.stationary.iter().cloned().collect();
        for _ in 0..n {
            let s = rng.categorical(&stationary);
            let a = class.sample_action(&theta, s, &mut rng).unwrap();
            let z = mdp.sample_transition(s, a, &mut rng).unwrap();
            let (am, bv) = stat.evaluate(&z);
            sq_a += am.component_mul(&am);
            sq_b += bv.component_mul(&bv);
            sum_a += am;
            sum_b += bv;
        }
        let nf = n as f64;
        for i in 0..k {
            for j in 0..k {
                let mean = sum_a[(i, j)] / nf;
                let se = ((sq_a[(i, j)] / nf - mean * mean) / nf).sqrt();
                assert!((mean - fp.a_v[(i, j)]).abs() <= 3.0 * se + 1e-12);
            }
            let mean = sum_b[i] / nf;
            let se = ((sq_b[i] / nf - mean * mean) / nf).sqrt();
            assert!((mean - fp.b_v[i]).abs() <= 3.0 * se + 1e-12);
        }
    }
}
