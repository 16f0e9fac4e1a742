//! Biased stochastic linear recursion `x_{h+1} = x_h - beta (P_h x_h - q_h)`.
//!
//! Both inner loops of the actor-critic are instances of this recursion: the
//! critic with `(P_h, q_h)` the MLMC estimates of `(A_v, b_v)`, and the NPG
//! search with the MLMC estimates of `(F, grad J)`. The solver only sees a
//! source of `(P_h, q_h)` pairs.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Iterates whose norm exceeds this are reported as divergent.
pub const DIVERGENCE_NORM: f64 = 1e12;

/// `2 ln(H) / (lambda_P H)`.
pub fn recursion_step_size(h: usize, lambda_p: f64) -> Result<f64> {
    if h < 2 {
        return Err(Error::argument(format!("H must be at least 2, got {h}")));
    }
    if !(lambda_p > 0.0) {
        return Err(Error::argument(format!("lambda_P must be positive, got {lambda_p}")));
    }
    let h = h as f64;
    Ok(2.0 * h.ln() / (lambda_p * h))
}

/// `H` steps from `x0` with a constant step and a per-step estimator source.
pub struct RecursionSpec<F> {
    pub x0: DVector<f64>,
    pub h_steps: usize,
    pub step_size: f64,
    pub source: F,
}

/// Ground truth `(P, q)` for diagnostics.
#[derive(Debug, Clone)]
pub struct Reference {
    pub p: DMatrix<f64>,
    pub q: DVector<f64>,
}

impl Reference {
    /// `x* = P^{-1} q`.
    pub fn solution(&self) -> Result<DVector<f64>> {
        self.p.clone().lu().solve(&self.q).ok_or(Error::Singular {
            min_singular_value: 0.0,
        })
    }
}

/// Empirical noise proxies over one run: `sigma^2 = mean |est - truth|^2`,
/// `delta^2 = |mean(est) - truth|^2` (Frobenius norm for matrices).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseStats {
    pub sigma_p_sq: f64,
    pub sigma_q_sq: f64,
    pub delta_p_sq: f64,
    pub delta_q_sq: f64,
}

#[derive(Debug, Clone)]
pub struct RecursionDiagnostics {
    pub final_x: DVector<f64>,
    /// `|x_h - x*|^2` for `h = 0..=H` when a reference was supplied.
    pub sq_errors: Option<Vec<f64>>,
    pub noise: Option<NoiseStats>,
}

pub fn run_recursion<F>(
    spec: RecursionSpec<F>,
    reference: Option<&Reference>,
) -> Result<RecursionDiagnostics>
where
    F: FnMut(usize) -> Result<(DMatrix<f64>, DVector<f64>)>,
{
    let RecursionSpec {
        mut x0,
        h_steps,
        step_size,
        mut source,
    } = spec;
    if !(step_size >= 0.0) || !step_size.is_finite() {
        return Err(Error::argument(format!("step size must be non-negative, got {step_size}")));
    }
    let n = x0.len();
    let target = reference.map(Reference::solution).transpose()?;
    let mut sq_errors = target.as_ref().map(|t| vec![(&x0 - t).norm_squared()]);
    let mut sum_p = DMatrix::zeros(n, n);
    let mut sum_q = DVector::zeros(n);
    let (mut dev_p, mut dev_q) = (0.0, 0.0);

    let x = &mut x0;
    for h in 0..h_steps {
        let (p_hat, q_hat) = source(h)?;
        if p_hat.shape() != (n, n) || q_hat.len() != n {
            return Err(Error::argument(format!(
                "estimator source returned shapes {:?}/{} for dimension {n}",
                p_hat.shape(),
                q_hat.len()
            )));
        }
        let direction = &p_hat * &*x - &q_hat;
        x.axpy(-step_size, &direction, 1.0);
        let norm = x.norm();
        if !norm.is_finite() || norm > DIVERGENCE_NORM {
            return Err(Error::Divergence { step: h + 1, norm });
        }
        if let Some(r) = reference {
            dev_p += (&p_hat - &r.p).norm_squared();
            dev_q += (&q_hat - &r.q).norm_squared();
            sum_p += p_hat;
            sum_q += q_hat;
        }
        if let (Some(errs), Some(t)) = (sq_errors.as_mut(), target.as_ref()) {
            errs.push((&*x - t).norm_squared());
        }
    }
    let noise = reference.filter(|_| h_steps > 0).map(|r| {
        let hf = h_steps as f64;
        NoiseStats {
            sigma_p_sq: dev_p / hf,
            sigma_q_sq: dev_q / hf,
            delta_p_sq: (sum_p / hf - &r.p).norm_squared(),
            delta_q_sq: (sum_q / hf - &r.q).norm_squared(),
        }
    });
    Ok(RecursionDiagnostics {
        final_x: x0,
        sq_errors,
        noise,
    })
}

/// A linear system observed through i.i.d. Gaussian entry noise plus an
/// optional constant bias on `q`.
#[derive(Debug, Clone)]
pub struct SyntheticSystem {
    pub p: DMatrix<f64>,
    pub q: DVector<f64>,
    pub sigma_p: f64,
    pub sigma_q: f64,
    pub q_bias: DVector<f64>,
}

impl SyntheticSystem {
    /// Symmetric positive definite tridiagonal 4x4 system with eigenvalues
    /// `2 + cos(k pi / 5)`, unit noise levels `sigma`.
    pub fn reference_4x4(sigma: f64) -> Self {
        let p = DMatrix::from_fn(4, 4, |i, j| match i.abs_diff(j) {
            0 => 2.0,
            1 => 0.5,
            _ => 0.0,
        });
        Self {
            p,
            q: DVector::from_vec(vec![1.0, -0.5, 0.25, 2.0]),
            sigma_p: sigma,
            sigma_q: sigma,
            q_bias: DVector::zeros(4),
        }
    }

    pub fn dim(&self) -> usize {
        self.q.len()
    }

    pub fn reference(&self) -> Reference {
        Reference {
            p: self.p.clone(),
            q: self.q.clone(),
        }
    }

    pub fn solution(&self) -> DVector<f64> {
        self.reference().solution().expect("synthetic systems are non-singular")
    }

    /// Smallest eigenvalue of the symmetric part of `P`.
    pub fn lambda_p(&self) -> f64 {
        crate::oracle::min_sym_eigenvalue(&self.p)
    }

    pub fn sample(&self, rng: &mut RngStream) -> (DMatrix<f64>, DVector<f64>) {
        let n = self.dim();
        let mut gauss = |sigma: f64| -> f64 {
            if sigma == 0.0 {
                0.0
            } else {
                let z: f64 = StandardNormal.sample(rng.rng());
                sigma * z
            }
        };
        let p = DMatrix::from_fn(n, n, |i, j| self.p[(i, j)] + gauss(self.sigma_p));
        let q = DVector::from_fn(n, |i, _| self.q[i] + self.q_bias[i] + gauss(self.sigma_q));
        (p, q)
    }

    /// Runs one recursion of `h_steps` from `x0`.
    pub fn run(
        &self,
        x0: &DVector<f64>,
        h_steps: usize,
        step_size: f64,
        rng: &mut RngStream,
        track: bool,
    ) -> Result<RecursionDiagnostics> {
        let reference = self.reference();
        run_recursion(
            RecursionSpec {
                x0: x0.clone(),
                h_steps,
                step_size,
                source: |_| Ok(self.sample(rng)),
            },
            track.then_some(&reference),
        )
    }
}

/// Replica statistics of `x_H` at one horizon.
#[derive(Debug, Clone, Copy)]
pub struct ReplicaPoint {
    pub h: usize,
    pub step_size: f64,
    /// `mean |x_H - x*|^2` over replicas.
    pub mean_sq_error: f64,
    /// `|mean(x_H) - x*|^2`.
    pub bias_sq: f64,
    /// Sum of per-coordinate variances of `x_H` divided by the replica count,
    /// i.e. the Monte Carlo variance of `mean(x_H)`.
    pub mean_variance: f64,
}

/// Runs `replicas` independent recursions per horizon with the standard
/// step `2 ln H / (lambda_P H)` and summarises `x_H`.
pub fn replica_curve(
    system: &SyntheticSystem,
    x0: &DVector<f64>,
    horizons: &[usize],
    replicas: usize,
    seed: u64,
) -> Result<Vec<ReplicaPoint>> {
    let lambda_p = system.lambda_p();
    let x_star = system.solution();
    horizons
        .iter()
        .enumerate()
        .map(|(hi, &h)| {
            let step = recursion_step_size(h, lambda_p)?;
            let finals: Vec<DVector<f64>> = (0..replicas)
                .into_par_iter()
                .map(|r| {
                    let mut rng = RngStream::with_stream(seed, ((hi as u64) << 32) | r as u64);
                    system.run(x0, h, step, &mut rng, false).map(|d| d.final_x)
                })
                .collect::<Result<_>>()?;
            let n = replicas as f64;
            let mean = finals.iter().fold(DVector::zeros(x0.len()), |acc, x| acc + x) / n;
            let mean_sq_error = finals.iter().map(|x| (x - &x_star).norm_squared()).sum::<f64>() / n;
            let spread = finals.iter().map(|x| (x - &mean).norm_squared()).sum::<f64>() / (n - 1.0);
            Ok(ReplicaPoint {
                h,
                step_size: step,
                mean_sq_error,
                bias_sq: (&mean - &x_star).norm_squared(),
                mean_variance: spread / n,
            })
        })
        .collect()
}

/// Outcome of [`bias_floor_probe`].
#[derive(Debug, Clone, Copy)]
pub struct BiasFloor {
    /// `|mean(x_H) - x*|^2`.
    pub measured: f64,
    /// `|P^{-1} delta|^2`.
    pub analytic: f64,
    pub mean_variance: f64,
}

/// Measures the squared bias of the mean iterate when `q_h` carries the
/// constant bias `system.q_bias`.
pub fn bias_floor_probe(
    system: &SyntheticSystem,
    x0: &DVector<f64>,
    h: usize,
    replicas: usize,
    seed: u64,
) -> Result<BiasFloor> {
    let point = replica_curve(system, x0, &[h], replicas, seed)?[0];
    let shift = system
        .p
        .clone()
        .lu()
        .solve(&system.q_bias)
        .ok_or(Error::Singular {
            min_singular_value: 0.0,
        })?;
    Ok(BiasFloor {
        measured: point.bias_sq,
        analytic: shift.norm_squared(),
        mean_variance: point.mean_variance,
    })
}
