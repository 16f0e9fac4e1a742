//! Finite tabular MDPs, ergodic instance generators and critic feature maps.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;

const SUM_TOL: f64 = 1e-12;

/// The tuple `(S, A, r, P, rho)`. Tables are stored flat, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularMdp {
    n_states: usize,
    n_actions: usize,
    reward: Vec<f64>,
    transition: Vec<f64>,
    initial_dist: Vec<f64>,
}

/// One environment step `z = (s, a, s')` with its reward.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub s: usize,
    pub a: usize,
    pub s_next: usize,
    pub reward: f64,
}

/// On-disk layout of an MDP.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MdpFile {
    n_states: usize,
    n_actions: usize,
    reward: Vec<Vec<f64>>,
    transition: Vec<Vec<Vec<f64>>>,
    initial_dist: Vec<f64>,
}

impl TabularMdp {
    /// Builds and validates an MDP from flat row-major tables
    /// (`reward[s*A + a]`, `transition[(s*A + a)*S + s']`).
    pub fn new(
        n_states: usize,
        n_actions: usize,
        reward: Vec<f64>,
        transition: Vec<f64>,
        initial_dist: Vec<f64>,
    ) -> Result<Self> {
        if n_states == 0 || n_actions == 0 {
            return Err(Error::validation(
                "shape",
                format!("need at least one state and action, got S={n_states}, A={n_actions}"),
            ));
        }
        let (s_n, a_n) = (n_states, n_actions);
        if reward.len() != s_n * a_n {
            return Err(Error::validation(
                "shape",
                format!("reward has {} entries, expected {}", reward.len(), s_n * a_n),
            ));
        }
        if transition.len() != s_n * a_n * s_n {
            return Err(Error::validation(
                "shape",
                format!(
                    "transition has {} entries, expected {}",
                    transition.len(),
                    s_n * a_n * s_n
                ),
            ));
        }
        if initial_dist.len() != s_n {
            return Err(Error::validation(
                "shape",
                format!("initial_dist has {} entries, expected {s_n}", initial_dist.len()),
            ));
        }
        for (i, &r) in reward.iter().enumerate() {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::validation(
                    "reward range",
                    format!("reward[{}][{}] = {r} outside [0, 1]", i / a_n, i % a_n),
                ));
            }
        }
        for (row, chunk) in transition.chunks(s_n).enumerate() {
            let (s, a) = (row / a_n, row % a_n);
            if let Some(p) = chunk.iter().find(|p| !(**p >= 0.0) || !p.is_finite()) {
                return Err(Error::validation(
                    "transition entry",
                    format!("transition[{s}][{a}] contains invalid probability {p}"),
                ));
            }
            let sum: f64 = chunk.iter().sum();
            if (sum - 1.0).abs() > SUM_TOL {
                return Err(Error::validation(
                    "transition row sum",
                    format!("transition[{s}][{a}] sums to {sum}"),
                ));
            }
        }
        if let Some(p) = initial_dist.iter().find(|p| !(**p >= 0.0) || !p.is_finite()) {
            return Err(Error::validation(
                "initial_dist entry",
                format!("invalid probability {p}"),
            ));
        }
        let sum: f64 = initial_dist.iter().sum();
        if (sum - 1.0).abs() > SUM_TOL {
            return Err(Error::validation("initial_dist sum", format!("sums to {sum}")));
        }
        Ok(Self {
            n_states,
            n_actions,
            reward,
            transition,
            initial_dist,
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    #[inline]
    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.reward[s * self.n_actions + a]
    }

    /// `P(. | s, a)`.
    #[inline]
    pub fn transition_row(&self, s: usize, a: usize) -> &[f64] {
        let start = (s * self.n_actions + a) * self.n_states;
        &self.transition[start..start + self.n_states]
    }

    pub fn initial_dist(&self) -> &[f64] {
        &self.initial_dist
    }

    /// Returns a copy with every reward multiplied by `factor` (in `[0, 1]`).
    pub fn with_scaled_rewards(&self, factor: f64) -> Result<Self> {
        let reward = self.reward.iter().map(|r| r * factor).collect();
        Self::new(
            self.n_states,
            self.n_actions,
            reward,
            self.transition.clone(),
            self.initial_dist.clone(),
        )
    }

    fn check_state(&self, s: usize) -> Result<()> {
        if s >= self.n_states {
            return Err(Error::Index {
                what: "state",
                index: s,
                bound: self.n_states,
            });
        }
        Ok(())
    }

    fn check_action(&self, a: usize) -> Result<()> {
        if a >= self.n_actions {
            return Err(Error::Index {
                what: "action",
                index: a,
                bound: self.n_actions,
            });
        }
        Ok(())
    }

    /// Draws `s' ~ P(.|s, a)`.
    pub fn sample_transition(&self, s: usize, a: usize, rng: &mut RngStream) -> Result<Transition> {
        self.check_state(s)?;
        self.check_action(a)?;
        Ok(self.step(s, a, rng))
    }

    /// Unchecked variant of [`sample_transition`](Self::sample_transition) for hot loops.
    #[inline]
    pub(crate) fn step(&self, s: usize, a: usize, rng: &mut RngStream) -> Transition {
        let s_next = rng.categorical(self.transition_row(s, a));
        Transition {
            s,
            a,
            s_next,
            reward: self.reward(s, a),
        }
    }

    pub fn sample_initial_state(&self, rng: &mut RngStream) -> usize {
        rng.categorical(&self.initial_dist)
    }

    /// Chain induced by a stochastic policy table (`S x A`):
    /// `P_pi(s, s') = sum_a pi(a|s) P(s'|s, a)`.
    pub fn induced_chain(&self, policy: &DMatrix<f64>) -> DMatrix<f64> {
        let n = self.n_states;
        let mut chain = DMatrix::zeros(n, n);
        for s in 0..n {
            for a in 0..self.n_actions {
                let w = policy[(s, a)];
                if w == 0.0 {
                    continue;
                }
                for (sp, p) in self.transition_row(s, a).iter().enumerate() {
                    chain[(s, sp)] += w * p;
                }
            }
        }
        chain
    }

    /// Expected one-step reward per state under a policy table.
    pub fn induced_reward(&self, policy: &DMatrix<f64>) -> DVector<f64> {
        DVector::from_fn(self.n_states, |s, _| {
            (0..self.n_actions)
                .map(|a| policy[(s, a)] * self.reward(s, a))
                .sum()
        })
    }

    pub fn to_json(&self) -> Result<String> {
        let (s_n, a_n) = (self.n_states, self.n_actions);
        let file = MdpFile {
            n_states: s_n,
            n_actions: a_n,
            reward: self.reward.chunks(a_n).map(<[f64]>::to_vec).collect(),
            transition: (0..s_n)
                .map(|s| (0..a_n).map(|a| self.transition_row(s, a).to_vec()).collect())
                .collect(),
            initial_dist: self.initial_dist.clone(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: MdpFile = serde_json::from_str(text)?;
        let (s_n, a_n) = (file.n_states, file.n_actions);
        if file.reward.len() != s_n || file.reward.iter().any(|row| row.len() != a_n) {
            return Err(Error::validation(
                "shape",
                format!("reward must be {s_n} x {a_n}"),
            ));
        }
        if file.transition.len() != s_n
            || file
                .transition
                .iter()
                .any(|per_a| per_a.len() != a_n || per_a.iter().any(|row| row.len() != s_n))
        {
            return Err(Error::validation(
                "shape",
                format!("transition must be {s_n} x {a_n} x {s_n}"),
            ));
        }
        let reward = file.reward.into_iter().flatten().collect();
        let transition = file.transition.into_iter().flatten().flatten().collect();
        Self::new(s_n, a_n, reward, transition, file.initial_dist)
    }
}

pub fn save_mdp(mdp: &TabularMdp, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, mdp.to_json()?)?;
    Ok(())
}

pub fn load_mdp(path: impl AsRef<Path>) -> Result<TabularMdp> {
    TabularMdp::from_json(&fs::read_to_string(path)?)
}

/// Random MDP whose chain is irreducible and aperiodic under every policy:
/// each row keeps at least `self_loop_min` on the current state and strictly
/// positive mass everywhere else. Rewards are uniform on `[0, 1]`, the
/// initial distribution is uniform.
pub fn generate_random_ergodic(
    n_states: usize,
    n_actions: usize,
    self_loop_min: f64,
    seed: u64,
) -> Result<TabularMdp> {
    if n_states < 2 {
        return Err(Error::argument(format!("need S >= 2, got {n_states}")));
    }
    if n_actions < 1 {
        return Err(Error::argument("need A >= 1"));
    }
    if !(self_loop_min > 0.0 && self_loop_min < 1.0) {
        return Err(Error::argument(format!(
            "self_loop_min must lie in (0, 1), got {self_loop_min}"
        )));
    }
    let mut rng = RngStream::new(seed);
    let mut transition = Vec::with_capacity(n_states * n_actions * n_states);
    for s in 0..n_states {
        for _ in 0..n_actions {
            // Offset keeps every entry bounded away from zero.
            let raw: Vec<f64> = (0..n_states).map(|_| 0.05 + rng.uniform()).collect();
            let total: f64 = raw.iter().sum();
            let mut row: Vec<f64> = raw
                .iter()
                .map(|w| (1.0 - self_loop_min) * w / total)
                .collect();
            row[s] += self_loop_min;
            // Renormalise so the row sums to 1 to machine precision.
            let sum: f64 = row.iter().sum();
            row.iter_mut().for_each(|p| *p /= sum);
            transition.extend(row);
        }
    }
    let reward = (0..n_states * n_actions).map(|_| rng.uniform()).collect();
    let initial_dist = vec![1.0 / n_states as f64; n_states];
    TabularMdp::new(n_states, n_actions, reward, transition, initial_dist)
}

/// Critic features `phi(s)`, one row per state.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    table: DMatrix<f64>,
}

impl FeatureMap {
    /// Accepts any `S x m` table whose rows have Euclidean norm at most 1.
    pub fn new(table: DMatrix<f64>) -> Result<Self> {
        for (s, row) in table.row_iter().enumerate() {
            let norm = row.norm();
            if !norm.is_finite() || norm > 1.0 + 1e-12 {
                return Err(Error::validation(
                    "feature norm",
                    format!("||phi({s})|| = {norm} exceeds 1"),
                ));
            }
        }
        Ok(Self { table })
    }

    /// Like [`new`](Self::new) but additionally rejects tables whose column
    /// span contains the all-ones vector.
    pub fn compliant(table: DMatrix<f64>) -> Result<Self> {
        let map = Self::new(table)?;
        if !map.excludes_ones() {
            return Err(Error::validation(
                "ones exclusion",
                "the all-ones vector lies in the feature span",
            ));
        }
        Ok(map)
    }

    /// `m = 0` critic: average-reward tracking only.
    pub fn empty(n_states: usize) -> Self {
        Self {
            table: DMatrix::zeros(n_states, 0),
        }
    }

    pub fn dim(&self) -> usize {
        self.table.ncols()
    }

    pub fn n_states(&self) -> usize {
        self.table.nrows()
    }

    pub fn table(&self) -> &DMatrix<f64> {
        &self.table
    }

    #[inline]
    pub fn get(&self, s: usize, i: usize) -> f64 {
        self.table[(s, i)]
    }

    pub fn phi(&self, s: usize) -> DVector<f64> {
        self.table.row(s).transpose()
    }

    /// `zeta^T phi(s)`.
    #[inline]
    pub fn value(&self, zeta: &DVector<f64>, s: usize) -> f64 {
        (0..self.dim()).map(|i| zeta[i] * self.table[(s, i)]).sum()
    }

    /// Rank test: `rank([Phi | e]) > rank(Phi)`.
    pub fn excludes_ones(&self) -> bool {
        let augmented = self.table.clone().insert_column(self.dim(), 1.0);
        rank(&augmented) > rank(&self.table)
    }
}

pub(crate) fn rank(m: &DMatrix<f64>) -> usize {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0;
    }
    let svd = m.clone().svd(false, false);
    let smax = svd.singular_values.max();
    let tol = 1e-10 * smax.max(1.0);
    svd.singular_values.iter().filter(|&&v| v > tol).count()
}

/// `phi(s) = e_s` for `s < S-1` and `phi(S-1) = 0`: tabular up to the pinned
/// last state, so the all-ones vector stays outside the span.
pub fn reduced_one_hot_features(n_states: usize) -> Result<FeatureMap> {
    if n_states < 2 {
        return Err(Error::argument(format!(
            "reduced one-hot features need S >= 2, got {n_states}"
        )));
    }
    let m = n_states - 1;
    let table = DMatrix::from_fn(n_states, m, |s, i| if s == i { 1.0 } else { 0.0 });
    Ok(FeatureMap { table })
}

/// The first `m` non-constant cosine (DCT-II) basis vectors,
/// `phi_k(s) = cos(pi k (s + 1/2) / S)` for `k = 1..=m`, scaled so the largest
/// row has norm 1. The columns are orthogonal to the all-ones vector.
pub fn cosine_features(n_states: usize, m: usize) -> Result<FeatureMap> {
    if m == 0 || m >= n_states {
        return Err(Error::argument(format!(
            "cosine features need 1 <= m <= S-1, got m = {m} with S = {n_states}"
        )));
    }
    let mut table = DMatrix::from_fn(n_states, m, |s, k| {
        (std::f64::consts::PI * (k + 1) as f64 * (s as f64 + 0.5) / n_states as f64).cos()
    });
    let widest = table.row_iter().map(|r| r.norm()).fold(0.0, f64::max);
    table /= widest;
    Ok(FeatureMap { table })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_state(row: [f64; 2]) -> TabularMdp {
        TabularMdp::new(
            2,
            1,
            vec![0.7, 0.2],
            vec![row[0], row[1], 0.5, 0.5],
            vec![0.5, 0.5],
        )
        .unwrap()
    }

    #[test]
    fn deterministic_row_always_hits_target() {
        let mdp = two_state([0.0, 1.0]);
        let mut rng = RngStream::new(3);
        for _ in 0..1000 {
            let z = mdp.sample_transition(0, 0, &mut rng).unwrap();
            assert_eq!(z.s_next, 1);
            assert_eq!(z.reward, 0.7);
        }
    }

    #[test]
    fn empirical_frequency_matches_row() {
        let mdp = two_state([0.25, 0.75]);
        let mut rng = RngStream::new(4);
        let n = 100_000;
        let hits = (0..n)
            .filter(|_| mdp.sample_transition(0, 0, &mut rng).unwrap().s_next == 1)
            .count();
        let freq = hits as f64 / n as f64;
        assert!((freq - 0.75).abs() < 0.01, "freq {freq}");
    }

    #[test]
    fn out_of_range_indices() {
        let mdp = two_state([0.5, 0.5]);
        let mut rng = RngStream::new(0);
        assert!(matches!(
            mdp.sample_transition(2, 0, &mut rng),
            Err(Error::Index { what: "state", .. })
        ));
        assert!(matches!(
            mdp.sample_transition(0, 1, &mut rng),
            Err(Error::Index { what: "action", .. })
        ));
    }

    #[test]
    fn generator_guarantees() {
        let mdp = generate_random_ergodic(2, 1, 0.1, 9).unwrap();
        for s in 0..2 {
            let row = mdp.transition_row(s, 0);
            assert!(row[s] >= 0.1);
            assert!(row.iter().all(|&p| p > 0.0));
        }
        assert_eq!(
            generate_random_ergodic(5, 3, 0.2, 7).unwrap(),
            generate_random_ergodic(5, 3, 0.2, 7).unwrap()
        );
        assert_ne!(
            generate_random_ergodic(5, 3, 0.2, 7).unwrap(),
            generate_random_ergodic(5, 3, 0.2, 8).unwrap()
        );
    }

    #[test]
    fn generator_rejects_bad_arguments() {
        assert!(generate_random_ergodic(1, 2, 0.1, 0).is_err());
        assert!(generate_random_ergodic(3, 0, 0.1, 0).is_err());
        assert!(generate_random_ergodic(3, 2, 0.0, 0).is_err());
        assert!(generate_random_ergodic(3, 2, 1.0, 0).is_err());
    }

    #[test]
    fn induced_chain_row_stochastic() {
        let mdp = generate_random_ergodic(6, 3, 0.1, 1).unwrap();
        let mut rng = RngStream::new(2);
        let mut policy = DMatrix::from_fn(6, 3, |_, _| rng.uniform() + 1e-3);
        for mut row in policy.row_iter_mut() {
            let s = row.sum();
            row /= s;
        }
        let chain = mdp.induced_chain(&policy);
        for row in chain.row_iter() {
            assert!((row.sum() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn reduced_one_hot_s3() {
        let f = reduced_one_hot_features(3).unwrap();
        assert_eq!(f.dim(), 2);
        assert_eq!(f.phi(0).as_slice(), &[1.0, 0.0]);
        assert_eq!(f.phi(1).as_slice(), &[0.0, 1.0]);
        assert_eq!(f.phi(2).as_slice(), &[0.0, 0.0]);
        assert!(f.table().row_iter().all(|r| r.norm() <= 1.0));
        let aug = f.table().clone().insert_column(2, 1.0);
        assert_eq!(rank(&aug), 3);
        assert_eq!(rank(f.table()), 2);
        assert!(f.excludes_ones());
        assert!(reduced_one_hot_features(1).is_err());
    }

    #[test]
    fn full_one_hot_contains_ones() {
        let table = DMatrix::<f64>::identity(3, 3);
        assert!(!FeatureMap::new(table.clone()).unwrap().excludes_ones());
        assert!(FeatureMap::compliant(table).is_err());
        assert!(FeatureMap::new(DMatrix::from_element(2, 2, 1.0)).is_err());
    }

    #[test]
    fn json_round_trip() {
        let mdp = generate_random_ergodic(4, 3, 0.15, 21).unwrap();
        let back = TabularMdp::from_json(&mdp.to_json().unwrap()).unwrap();
        assert_eq!(mdp, back);
    }

    #[test]
    fn invalid_files_name_the_invariant() {
        let bad_sum = r#"{"n_states":2,"n_actions":1,"reward":[[0.1],[0.2]],
            "transition":[[[0.5,0.4]],[[0.5,0.5]]],"initial_dist":[0.5,0.5]}"#;
        let err = TabularMdp::from_json(bad_sum).unwrap_err();
        assert!(err.to_string().contains("transition row sum"), "{err}");

        let bad_reward = r#"{"n_states":2,"n_actions":1,"reward":[[1.5],[0.2]],
            "transition":[[[0.5,0.5]],[[0.5,0.5]]],"initial_dist":[0.5,0.5]}"#;
        let err = TabularMdp::from_json(bad_reward).unwrap_err();
        assert!(err.to_string().contains("reward range"), "{err}");

        let malformed = "{\"n_states\": 2,\n \"n_actions\": oops}";
        match TabularMdp::from_json(malformed).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn cosine_features_are_centered() {
        let f = cosine_features(4, 3).unwrap();
        assert!(f.excludes_ones());
        let widest = (0..4).map(|s| f.phi(s).norm()).fold(0.0, f64::max);
        assert!((widest - 1.0).abs() < 1e-12);
        for k in 0..3 {
            let col_sum: f64 = (0..4).map(|s| f.get(s, k)).sum();
            assert!(col_sum.abs() < 1e-12);
        }
        assert!(cosine_features(4, 4).is_err());
        assert!(cosine_features(4, 0).is_err());
    }
}
