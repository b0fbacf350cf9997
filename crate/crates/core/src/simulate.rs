//! Synthetic studies with known causal effects.
//!
//! Each subject gets a Poisson number of uniformly placed observation times,
//! a treatment `Z = 1{c_1 > 0}`, trivariate normal covariates redrawn at every
//! time point, and latent processes
//!
//! ```text
//! M(t; z) = 0.2 + (0.2 + 2t + sin 2 pi t)(z + 1) - X_1 + 0.5 X_2 + eps_m(t) + c_2
//! Y(t; z) = M(t; z) + cos 2 pi t + 0.1 t^2 + 2t + (cos 2 pi t + 0.2 t^2 + 3t) z
//!           - 0.5 X_2 + X_3 + eps_y(t) + c_3
//! ```
//!
//! where `eps_m`, `eps_y` are Gaussian processes with squared-exponential
//! covariance `sigma^2 exp(-8 (s - t)^2)` (the kernel is often loosely called
//! "exponential"). Observations add unit-variance noise to the latent values.

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix};
use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, SubjectSeries};
use crate::dist::normal;
use crate::error::{Error, Result};
use crate::linalg::{cholesky_jitter, standard_normal_vector};
use crate::rng;

/// Diagonal jitter added to every GP covariance matrix.
pub const GP_JITTER: f64 = 1e-8;

/// Integral of the mediated-effect curve over `[0, 1]`.
pub const ACME_INTEGRAL: f64 = 1.2;
/// Integral of the total-effect curve over `[0, 1]`: `1.2 + 0.2 / 3 + 1.5`.
pub const TE_INTEGRAL: f64 = 1.2 + 0.2 / 3.0 + 1.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub n_subjects: usize,
    /// Poisson mean of the number of observations per subject.
    pub mean_obs: f64,
    /// Standard deviation of each covariate.
    pub sigma_x: f64,
    /// GP and random-intercept standard deviation of the mediator. With the
    /// default 0.5 the between-arm sampling error of the integrated effects
    /// is about 0.12 at 200 subjects.
    pub sigma_m: f64,
    /// GP and random-intercept standard deviation of the outcome.
    pub sigma_y: f64,
    pub kernel_bandwidth: f64,
    pub obs_noise_sd: f64,
    /// Floor on the number of observations per subject.
    pub min_obs: usize,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            n_subjects: 200,
            mean_obs: 25.0,
            sigma_x: 1.0,
            sigma_m: 0.5,
            sigma_y: 0.5,
            kernel_bandwidth: 8.0,
            obs_noise_sd: 1.0,
            min_obs: 3,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self, prefix: &str) -> Result<()> {
        let field = |name: &str| {
            if prefix.is_empty() {
                name.to_string()
            } else {
                format!("{prefix}.{name}")
            }
        };
        if self.n_subjects < 2 {
            return Err(Error::config(field("n_subjects"), "must be at least 2"));
        }
        for (name, v) in [
            ("mean_obs", self.mean_obs),
            ("sigma_x", self.sigma_x),
            ("sigma_m", self.sigma_m),
            ("sigma_y", self.sigma_y),
            ("kernel_bandwidth", self.kernel_bandwidth),
            ("obs_noise_sd", self.obs_noise_sd),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(
                    field(name),
                    format!("must be positive, got {v}"),
                ));
            }
        }
        if self.min_obs == 0 {
            return Err(Error::config(field("min_obs"), "must be at least 1"));
        }
        Ok(())
    }
}

/// Squared-exponential kernel `variance * exp(-bandwidth (s - t)^2)`.
pub fn kernel(s: f64, t: f64, variance: f64, bandwidth: f64) -> f64 {
    variance * (-bandwidth * (s - t) * (s - t)).exp()
}

/// Zero-mean GP draw at `times`.
pub fn gp_draw<R: Rng + ?Sized>(
    times: &[f64],
    variance: f64,
    bandwidth: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if !(variance > 0.0) || times.iter().any(|t| !t.is_finite()) {
        return Err(Error::Domain(format!(
            "GP draw needs finite times and positive variance, got {variance}"
        )));
    }
    let n = times.len();
    let mut cov = DMatrix::from_fn(n, n, |a, b| kernel(times[a], times[b], variance, bandwidth));
    for i in 0..n {
        cov[(i, i)] += GP_JITTER * variance;
    }
    let chol = match Cholesky::new(cov.clone()) {
        Some(c) => c,
        None => cholesky_jitter(&cov)?,
    };
    let z = standard_normal_vector(n, rng);
    Ok((chol.l() * z).iter().copied().collect())
}

/// Deterministic part of the mediator process that depends on `t` and `z`.
pub fn mediator_time_mean(t: f64, z: f64) -> f64 {
    0.2 + (0.2 + 2.0 * t + (2.0 * PI * t).sin()) * (z + 1.0)
}

/// Deterministic part of the outcome process beyond the mediator.
pub fn outcome_time_mean(t: f64, z: f64) -> f64 {
    let c = (2.0 * PI * t).cos();
    c + 0.1 * t * t + 2.0 * t + (c + 0.2 * t * t + 3.0 * t) * z
}

/// Mediated effect at time `t`: `M(t; 1) - M(t; 0)` passed through the
/// unit concurrent slope.
pub fn true_acme(t: f64) -> f64 {
    0.2 + 2.0 * t + (2.0 * PI * t).sin()
}

/// Total effect at time `t`.
pub fn true_te(t: f64) -> f64 {
    true_acme(t) + (2.0 * PI * t).cos() + 0.2 * t * t + 3.0 * t
}

/// Latent draws shared by both potential processes of one subject.
#[derive(Debug, Clone)]
pub struct LatentNoise {
    pub covariates: DMatrix<f64>,
    pub gp_m: Vec<f64>,
    pub gp_y: Vec<f64>,
    pub intercept_m: f64,
    pub intercept_y: f64,
}

/// Potential mediator values `M(t_j; z)`.
pub fn potential_mediator(times: &[f64], z: f64, noise: &LatentNoise) -> Vec<f64> {
    times
        .iter()
        .enumerate()
        .map(|(j, &t)| {
            let x = noise.covariates.row(j);
            mediator_time_mean(t, z) - x[0] + 0.5 * x[1] + noise.gp_m[j] + noise.intercept_m
        })
        .collect()
}

/// Potential outcome values `Y(t_j; z, m)` given mediator values `m`.
pub fn potential_outcome(times: &[f64], z: f64, mediator: &[f64], noise: &LatentNoise) -> Vec<f64> {
    times
        .iter()
        .enumerate()
        .map(|(j, &t)| {
            let x = noise.covariates.row(j);
            mediator[j] + outcome_time_mean(t, z) - 0.5 * x[1]
                + x[2]
                + noise.gp_y[j]
                + noise.intercept_y
        })
        .collect()
}

/// Reference values of the simulated study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimTruth {
    pub acme_integral: f64,
    pub te_integral: f64,
    pub config: SimConfig,
}

impl SimTruth {
    pub fn new(config: SimConfig) -> Self {
        SimTruth {
            acme_integral: ACME_INTEGRAL,
            te_integral: TE_INTEGRAL,
            config,
        }
    }

    pub fn acme_curve(&self, t: f64) -> f64 {
        true_acme(t)
    }

    pub fn te_curve(&self, t: f64) -> f64 {
        true_te(t)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TruthCurves {
    pub grid: Vec<f64>,
    pub acme: Vec<f64>,
    pub te: Vec<f64>,
}

pub fn truth_curves(grid: &[f64]) -> TruthCurves {
    TruthCurves {
        grid: grid.to_vec(),
        acme: grid.iter().map(|&t| true_acme(t)).collect(),
        te: grid.iter().map(|&t| true_te(t)).collect(),
    }
}

fn sorted_uniform_times<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let mut t: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        t.sort_by(f64::total_cmp);
        if t.windows(2).all(|w| w[1] > w[0]) {
            return t;
        }
    }
}

/// One subject from its own generator stream.
pub fn generate_subject(cfg: &SimConfig, index: usize) -> Result<SubjectSeries> {
    let mut rng = rng::stream(cfg.seed, "sim-subject", index as u64);
    let poisson = Poisson::new(cfg.mean_obs).map_err(|e| Error::Domain(e.to_string()))?;
    let n_obs = (poisson.sample(&mut rng) as usize).max(cfg.min_obs);
    let times = sorted_uniform_times(n_obs, &mut rng);
    let c1 = normal(0.0, 1.0, &mut rng);
    let z = if c1 > 0.0 { 1u8 } else { 0u8 };
    let mut covariates = DMatrix::zeros(n_obs, 3);
    for j in 0..n_obs {
        for c in 0..3 {
            covariates[(j, c)] = normal(0.0, cfg.sigma_x, &mut rng);
        }
    }
    let intercept_m = normal(0.0, cfg.sigma_m, &mut rng);
    let intercept_y = normal(0.0, cfg.sigma_y, &mut rng);
    let gp_m = gp_draw(
        &times,
        cfg.sigma_m * cfg.sigma_m,
        cfg.kernel_bandwidth,
        &mut rng,
    )?;
    let gp_y = gp_draw(
        &times,
        cfg.sigma_y * cfg.sigma_y,
        cfg.kernel_bandwidth,
        &mut rng,
    )?;
    let noise = LatentNoise {
        covariates,
        gp_m,
        gp_y,
        intercept_m,
        intercept_y,
    };
    let zf = z as f64;
    let m_latent = potential_mediator(&times, zf, &noise);
    let y_latent = potential_outcome(&times, zf, &m_latent, &noise);
    let mediator = m_latent
        .iter()
        .map(|m| m + normal(0.0, cfg.obs_noise_sd, &mut rng))
        .collect();
    let outcome = y_latent
        .iter()
        .map(|y| y + normal(0.0, cfg.obs_noise_sd, &mut rng))
        .collect();
    Ok(SubjectSeries {
        id: format!("s{index:05}"),
        z,
        times,
        mediator,
        outcome,
        covariates: noise.covariates,
    })
}

/// Dataset on `[0, 1]` with covariates `x1, x2, x3`, plus the truth.
pub fn generate_dataset(cfg: &SimConfig) -> Result<(Dataset, SimTruth)> {
    cfg.validate("")?;
    let subjects = (0..cfg.n_subjects)
        .map(|i| generate_subject(cfg, i))
        .collect::<Result<Vec<_>>>()?;
    let mut ds = Dataset::new(subjects, vec!["x1".into(), "x2".into(), "x3".into()]);
    ds.time_range = (0.0, 1.0);
    Ok((ds, SimTruth::new(cfg.clone())))
}
