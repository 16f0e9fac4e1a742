//! JSON experiment configuration.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::actor_critic::Overrides;
use crate::error::{Error, Result};
use crate::mdp::{self, cosine_features, reduced_one_hot_features, FeatureMap, TabularMdp};
use crate::policy::{PolicyClass, PolicyParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MdpSource {
    File {
        path: PathBuf,
    },
    Random {
        states: usize,
        actions: usize,
        seed: u64,
        #[serde(default = "default_self_loop")]
        self_loop_min: f64,
    },
}

fn default_self_loop() -> f64 {
    0.05
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PolicySpec {
    /// Reduced softmax with one free logit per state and non-last action.
    #[default]
    Tabular,
    /// Log-linear policy over random features with norm at most 1.
    FeatureSoftmax { dim: usize, seed: u64 },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ThetaSource {
    #[default]
    Zeros,
    Values {
        values: Vec<f64>,
    },
    /// A JSON array of numbers.
    File {
        path: PathBuf,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FeatureSpec {
    #[default]
    ReducedOneHot,
    Cosine {
        dim: usize,
    },
    /// No critic features (`m = 0`).
    Empty,
    Table {
        rows: Vec<Vec<f64>>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmoothnessProbe {
    pub pairs: usize,
    pub radius: f64,
    pub seed: u64,
}

impl Default for SmoothnessProbe {
    fn default() -> Self {
        Self {
            pairs: 100,
            radius: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mdp: MdpSource,
    #[serde(default)]
    pub policy: PolicySpec,
    #[serde(default)]
    pub theta0: ThetaSource,
    #[serde(default)]
    pub features: FeatureSpec,
    #[serde(default)]
    pub t_budget: Option<u64>,
    #[serde(default)]
    pub k_outer: Option<usize>,
    #[serde(default)]
    pub h_inner: Option<usize>,
    #[serde(default)]
    pub overrides: Overrides,
    pub seeds: Vec<u64>,
    #[serde(default = "default_probe_every")]
    pub probe_every: usize,
    pub output: PathBuf,
    /// Record real elapsed time in `wall_ms`. Off by default so that reruns
    /// produce byte-identical traces.
    #[serde(default)]
    pub wall_clock: bool,
    #[serde(default)]
    pub warm_start: bool,
    #[serde(default)]
    pub refresh_constants: bool,
    #[serde(default)]
    pub smoothness: SmoothnessProbe,
}

fn default_probe_every() -> usize {
    1
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file. Relative paths inside it are taken relative to
    /// the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut cfg = Self::from_json(&fs::read_to_string(path)?)?;
        if let Some(dir) = path.parent() {
            cfg.rebase(dir);
        }
        Ok(cfg)
    }

    fn rebase(&mut self, dir: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        if let MdpSource::File { path } = &mut self.mdp {
            fix(path);
        }
        if let ThetaSource::File { path } = &mut self.theta0 {
            fix(path);
        }
        fix(&mut self.output);
    }

    pub fn validate(&self) -> Result<()> {
        let explicit = (self.k_outer, self.h_inner);
        match (self.t_budget, explicit) {
            (Some(_), (None, None)) | (None, (Some(_), Some(_))) => {}
            (Some(_), _) => {
                return Err(Error::Config(
                    "t_budget: give either t_budget or both k_outer and h_inner, not both".into(),
                ))
            }
            (None, (None, None)) => {
                return Err(Error::Config(
                    "t_budget: one of t_budget or (k_outer, h_inner) is required".into(),
                ))
            }
            (None, _) => {
                return Err(Error::Config(
                    "k_outer/h_inner: both must be given together".into(),
                ))
            }
        }
        if self.overrides.k_outer.is_some() || self.overrides.h_inner.is_some() {
            return Err(Error::Config(
                "overrides: set k_outer/h_inner at the top level".into(),
            ));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds: at least one seed is required".into()));
        }
        if let Some(t) = self.overrides.t_max {
            if t < 2 || !t.is_power_of_two() {
                return Err(Error::Config(format!(
                    "overrides.t_max: must be a power of two >= 2, got {t}"
                )));
            }
        }
        Ok(())
    }

    /// Overrides with the explicit loop sizes folded in.
    pub fn effective_overrides(&self) -> Overrides {
        Overrides {
            k_outer: self.k_outer,
            h_inner: self.h_inner,
            ..self.overrides.clone()
        }
    }

    pub fn build_mdp(&self) -> Result<TabularMdp> {
        match &self.mdp {
            MdpSource::File { path } => mdp::load_mdp(path),
            MdpSource::Random {
                states,
                actions,
                seed,
                self_loop_min,
            } => mdp::generate_random_ergodic(*states, *actions, *self_loop_min, *seed),
        }
    }

    pub fn build_class(&self, mdp: &TabularMdp) -> Result<PolicyClass> {
        match self.policy {
            PolicySpec::Tabular => Ok(PolicyClass::tabular(mdp.n_states(), mdp.n_actions())),
            PolicySpec::FeatureSoftmax { dim, seed } => {
                PolicyClass::random_feature_softmax(mdp.n_states(), mdp.n_actions(), dim, seed)
            }
        }
    }

    pub fn build_theta0(&self, class: &PolicyClass) -> Result<PolicyParams> {
        let theta = match &self.theta0 {
            ThetaSource::Zeros => PolicyParams::zeros(class.dim()),
            ThetaSource::Values { values } => PolicyParams::from_slice(values)?,
            ThetaSource::File { path } => PolicyParams::from_json(&fs::read_to_string(path)?)?,
        };
        if theta.dim() != class.dim() {
            return Err(Error::Config(format!(
                "theta0: has dimension {}, policy class needs {}",
                theta.dim(),
                class.dim()
            )));
        }
        Ok(theta)
    }

    pub fn build_features(&self, mdp: &TabularMdp) -> Result<FeatureMap> {
        let s = mdp.n_states();
        match &self.features {
            FeatureSpec::ReducedOneHot => reduced_one_hot_features(s),
            FeatureSpec::Cosine { dim } => cosine_features(s, *dim),
            FeatureSpec::Empty => Ok(FeatureMap::empty(s)),
            FeatureSpec::Table { rows } => {
                if rows.len() != s {
                    return Err(Error::Config(format!(
                        "features.rows: expected {s} rows, got {}",
                        rows.len()
                    )));
                }
                let m = rows.first().map_or(0, Vec::len);
                if rows.iter().any(|r| r.len() != m) {
                    return Err(Error::Config("features.rows: ragged table".into()));
                }
                FeatureMap::compliant(DMatrix::from_fn(s, m, |i, j| rows[i][j]))
            }
        }
    }
}
