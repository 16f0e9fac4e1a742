//! Differentiable softmax policy classes.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Policy parameter `theta`. Entries are always finite.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams(DVector<f64>);

impl PolicyParams {
    pub fn new(theta: DVector<f64>) -> Result<Self> {
        if let Some(i) = theta.iter().position(|v| !v.is_finite()) {
            return Err(Error::argument(format!("theta[{i}] = {} is not finite", theta[i])));
        }
        Ok(Self(theta))
    }

    pub fn from_slice(theta: &[f64]) -> Result<Self> {
        Self::new(DVector::from_column_slice(theta))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(DVector::zeros(dim))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }

    /// Flat JSON array of decimals.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self.as_slice()).expect("finite floats serialise")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let v: Vec<f64> = serde_json::from_str(text)?;
        Self::from_slice(&v)
    }
}

/// A parameterised family `pi_theta(a|s)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicyClass {
    /// One logit per (state, action) except the last action of every state,
    /// whose logit is pinned to 0. `d = S (A - 1)`.
    TabularReducedSoftmax { n_states: usize, n_actions: usize },
    /// Log-linear policy `pi(a|s) ∝ exp(psi(s,a)^T theta)`; `psi` is stored
    /// flat as `psi[(s*A + a)*d + i]`.
    FeatureSoftmax {
        n_states: usize,
        n_actions: usize,
        dim: usize,
        psi: Vec<f64>,
    },
}

impl PolicyClass {
    pub fn tabular(n_states: usize, n_actions: usize) -> Self {
        PolicyClass::TabularReducedSoftmax {
            n_states,
            n_actions,
        }
    }

    /// Log-linear class from `psi[s][a]` vectors of length `dim`, each with norm at most 1.
    pub fn feature_softmax(
        n_states: usize,
        n_actions: usize,
        dim: usize,
        psi: Vec<f64>,
    ) -> Result<Self> {
        if psi.len() != n_states * n_actions * dim {
            return Err(Error::argument(format!(
                "psi has {} entries, expected {}",
                psi.len(),
                n_states * n_actions * dim
            )));
        }
        for (i, chunk) in psi.chunks(dim.max(1)).enumerate() {
            let norm = chunk.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !norm.is_finite() || norm > 1.0 + 1e-12 {
                return Err(Error::argument(format!(
                    "||psi({}, {})|| = {norm} exceeds 1",
                    i / n_actions,
                    i % n_actions
                )));
            }
        }
        Ok(PolicyClass::FeatureSoftmax {
            n_states,
            n_actions,
            dim,
            psi,
        })
    }

    /// Random log-linear class with unit-ball action features.
    pub fn random_feature_softmax(
        n_states: usize,
        n_actions: usize,
        dim: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = RngStream::new(seed);
        let mut psi = Vec::with_capacity(n_states * n_actions * dim);
        for _ in 0..n_states * n_actions {
            let v: Vec<f64> = (0..dim).map(|_| 2.0 * rng.uniform() - 1.0).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1.0);
            psi.extend(v.into_iter().map(|x| x / norm));
        }
        Self::feature_softmax(n_states, n_actions, dim, psi)
    }

    pub fn n_states(&self) -> usize {
        match self {
            PolicyClass::TabularReducedSoftmax { n_states, .. }
            | PolicyClass::FeatureSoftmax { n_states, .. } => *n_states,
        }
    }

    pub fn n_actions(&self) -> usize {
        match self {
            PolicyClass::TabularReducedSoftmax { n_actions, .. }
            | PolicyClass::FeatureSoftmax { n_actions, .. } => *n_actions,
        }
    }

    /// Parameter dimension `d`.
    pub fn dim(&self) -> usize {
        match self {
            PolicyClass::TabularReducedSoftmax {
                n_states,
                n_actions,
            } => n_states * (n_actions - 1),
            PolicyClass::FeatureSoftmax { dim, .. } => *dim,
        }
    }

    fn check(&self, theta: &PolicyParams, s: usize) -> Result<()> {
        if theta.dim() != self.dim() {
            return Err(Error::argument(format!(
                "theta has dimension {}, policy class expects {}",
                theta.dim(),
                self.dim()
            )));
        }
        if s >= self.n_states() {
            return Err(Error::Index {
                what: "state",
                index: s,
                bound: self.n_states(),
            });
        }
        Ok(())
    }

    fn logits_into(&self, theta: &PolicyParams, s: usize, out: &mut [f64]) {
        let th = theta.as_slice();
        match self {
            PolicyClass::TabularReducedSoftmax { n_actions, .. } => {
                let free = n_actions - 1;
                out[..free].copy_from_slice(&th[s * free..(s + 1) * free]);
                out[free] = 0.0;
            }
            PolicyClass::FeatureSoftmax {
                n_actions,
                dim,
                psi,
                ..
            } => {
                for (a, o) in out.iter_mut().enumerate().take(*n_actions) {
                    let base = (s * n_actions + a) * dim;
                    *o = psi[base..base + dim]
                        .iter()
                        .zip(th)
                        .map(|(p, t)| p * t)
                        .sum();
                }
            }
        }
    }

    /// Writes `pi_theta(.|s)` into `out` (length `A`). Unchecked.
    pub(crate) fn probs_into(&self, theta: &PolicyParams, s: usize, out: &mut [f64]) {
        self.logits_into(theta, s, out);
        let max = out.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in out.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        out.iter_mut().for_each(|v| *v /= total);
    }

    pub fn action_probs(&self, theta: &PolicyParams, s: usize) -> Result<Vec<f64>> {
        self.check(theta, s)?;
        let mut out = vec![0.0; self.n_actions()];
        self.probs_into(theta, s, &mut out);
        Ok(out)
    }

    pub fn log_prob(&self, theta: &PolicyParams, s: usize, a: usize) -> Result<f64> {
        let probs = self.action_probs(theta, s)?;
        probs
            .get(a)
            .map(|p| p.ln())
            .ok_or(Error::Index {
                what: "action",
                index: a,
                bound: probs.len(),
            })
    }

    /// `grad_theta log pi_theta(a|s)` written into `out` (length `d`), given
    /// the already evaluated `probs = pi_theta(.|s)`.
    pub(crate) fn score_into(&self, s: usize, a: usize, probs: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        match self {
            PolicyClass::TabularReducedSoftmax { n_actions, .. } => {
                let free = n_actions - 1;
                let block = &mut out[s * free..(s + 1) * free];
                for (j, g) in block.iter_mut().enumerate() {
                    *g = if a == j { 1.0 } else { 0.0 } - probs[j];
                }
            }
            PolicyClass::FeatureSoftmax {
                n_actions,
                dim,
                psi,
                ..
            } => {
                let row = |b: usize| &psi[(s * n_actions + b) * dim..(s * n_actions + b + 1) * dim];
                out.copy_from_slice(row(a));
                for (b, p) in probs.iter().enumerate() {
                    for (o, v) in out.iter_mut().zip(row(b)) {
                        *o -= p * v;
                    }
                }
            }
        }
    }

    pub fn score(&self, theta: &PolicyParams, s: usize, a: usize) -> Result<DVector<f64>> {
        let probs = self.action_probs(theta, s)?;
        if a >= probs.len() {
            return Err(Error::Index {
                what: "action",
                index: a,
                bound: probs.len(),
            });
        }
        let mut out = DVector::zeros(self.dim());
        self.score_into(s, a, &probs, out.as_mut_slice());
        Ok(out)
    }

    pub fn sample_action(&self, theta: &PolicyParams, s: usize, rng: &mut RngStream) -> Result<usize> {
        let probs = self.action_probs(theta, s)?;
        Ok(rng.categorical(&probs))
    }

    /// `S x A` table of `pi_theta(a|s)`.
    pub fn policy_table(&self, theta: &PolicyParams) -> Result<DMatrix<f64>> {
        self.check(theta, 0)?;
        let (n, k) = (self.n_states(), self.n_actions());
        let mut table = DMatrix::zeros(n, k);
        let mut buf = vec![0.0; k];
        for s in 0..n {
            self.probs_into(theta, s, &mut buf);
            for a in 0..k {
                table[(s, a)] = buf[a];
            }
        }
        Ok(table)
    }
}

/// `theta + alpha * omega`.
pub fn actor_update(theta: &PolicyParams, omega: &DVector<f64>, alpha: f64) -> Result<PolicyParams> {
    if omega.len() != theta.dim() {
        return Err(Error::argument(format!(
            "omega has dimension {}, theta has {}",
            omega.len(),
            theta.dim()
        )));
    }
    if !(alpha >= 0.0) || !alpha.is_finite() {
        return Err(Error::argument(format!("actor step must be non-negative, got {alpha}")));
    }
    PolicyParams::new(theta.as_vector() + omega * alpha)
}
