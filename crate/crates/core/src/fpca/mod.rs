//! Bayesian functional principal component model for one longitudinal
//! response, fitted by Gibbs sampling.
//!
//! For subject `i` observed at times `t_ij` the model is
//!
//! ```text
//! y_ij = x_ij' beta + sum_r psi_r(t_ij) zeta_ir + eps_ij,   eps_ij ~ N(0, sigma^2)
//! psi_r(t) = b(t)' p_r,   int psi_r psi_r' = 1{r = r'}
//! zeta_ir | xi_ir ~ N(chi_{z_i, r}, lambda_r^2 / xi_ir),   xi_ir ~ Ga(v/2, v/2)
//! ```
//!
//! with multiplicative gamma shrinkage on `lambda_r^-2` and on the prior
//! precision of the group means `chi_{z, r}`. The same machinery fits the
//! mediator model and the outcome model; the outcome run simply carries the
//! concurrent mediator as one more regressor column.

mod design;
mod diagnostics;
mod sampler;
mod state;

pub use design::ResponseDesign;
pub use diagnostics::{
    diagnostics, diagnostics_from_traces, effective_sample_size, split_psrf, ChainReport,
    ScalarDiagnostic, PSRF_FLAG,
};
pub(crate) use sampler::run_chain_with_basis;
pub use sampler::{ensure_enough_observations, run_chain, shape_log_target, ChainData, Sampler};
pub use state::{FpcaDraws, FpcaState, Shapes};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::splines::BasisSettings;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FpcaConfig {
    /// Number of components `R` (or `S` for the outcome model).
    pub n_components: usize,
    pub basis: BasisSettings,
    pub n_iter: usize,
    pub n_burn: usize,
    pub thin: usize,
    pub seed: u64,
    pub fev_threshold: f64,
    /// Degrees of freedom `v` of the score mixing weights.
    pub t_mixing_dof: f64,
    /// Log-scale random-walk step for the shrinkage shape parameters.
    pub mh_step: f64,
    /// Upper bound of the smoothing parameters `h_r`.
    pub h_upper: f64,
    pub beta_prior_sd: f64,
    /// `Ga(shape, rate)` prior on the noise precision; `(0, 0)` gives the
    /// scale-invariant prior.
    pub noise_prior_shape: f64,
    pub noise_prior_rate: f64,
    /// Floor on the rate of the noise-precision update.
    pub noise_rate_floor: f64,
}

impl Default for FpcaConfig {
    fn default() -> Self {
        FpcaConfig {
            n_components: 3,
            basis: BasisSettings::default(),
            n_iter: 4000,
            n_burn: 2000,
            thin: 2,
            seed: 0,
            fev_threshold: 0.90,
            t_mixing_dof: 30.0,
            mh_step: 1.0,
            h_upper: 1e4,
            beta_prior_sd: 100.0,
            noise_prior_shape: 0.0,
            noise_prior_rate: 0.0,
            noise_rate_floor: 1e-10,
        }
    }
}

impl FpcaConfig {
    /// Checks the invariants; `prefix` is prepended to field paths in errors.
    pub fn validate(&self, prefix: &str) -> Result<()> {
        let field = |name: &str| {
            if prefix.is_empty() {
                name.to_string()
            } else {
                format!("{prefix}.{name}")
            }
        };
        if self.n_components == 0 {
            return Err(Error::config(field("n_components"), "must be at least 1"));
        }
        if self.basis.n_knots == 0 {
            return Err(Error::config(field("basis.n_knots"), "must be at least 1"));
        }
        if self.basis.grid_size < 2 {
            return Err(Error::config(
                field("basis.grid_size"),
                "must be at least 2",
            ));
        }
        if self.n_iter < self.n_burn {
            return Err(Error::config(field("n_iter"), "must be at least n_burn"));
        }
        if self.thin == 0 {
            return Err(Error::config(field("thin"), "must be at least 1"));
        }
        if !(self.fev_threshold > 0.0 && self.fev_threshold <= 1.0) {
            return Err(Error::config(field("fev_threshold"), "must lie in (0, 1]"));
        }
        for (name, v) in [
            ("t_mixing_dof", self.t_mixing_dof),
            ("mh_step", self.mh_step),
            ("h_upper", self.h_upper),
            ("beta_prior_sd", self.beta_prior_sd),
            ("noise_rate_floor", self.noise_rate_floor),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(field(name), "must be positive and finite"));
            }
        }
        for (name, v) in [
            ("noise_prior_shape", self.noise_prior_shape),
            ("noise_prior_rate", self.noise_prior_rate),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(field(name), "must be non-negative"));
            }
        }
        Ok(())
    }

    pub fn n_retained(&self) -> usize {
        (self.n_iter - self.n_burn.min(self.n_iter)) / self.thin.max(1)
    }
}

/// Smallest number of components whose cumulative share of the total score
/// variance reaches `threshold`, with variances sorted descending.
pub fn truncation_from_variances(variances: &[f64], threshold: f64) -> usize {
    if variances.is_empty() {
        return 0;
    }
    let mut sorted: Vec<f64> = variances.iter().map(|v| v.max(0.0)).collect();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let total: f64 = sorted.iter().sum();
    if !(total > 0.0) {
        return 1;
    }
    let mut cum = 0.0;
    for (k, v) in sorted.iter().enumerate() {
        cum += v;
        if cum / total >= threshold - 1e-12 {
            return k + 1;
        }
    }
    sorted.len()
}

/// Fraction-of-explained-variance truncation from a pilot chain, using the
/// posterior-mean score variances.
pub fn select_truncation(pilot: &FpcaDraws, threshold: f64) -> usize {
    truncation_from_variances(&pilot.posterior_mean_score_vars(), threshold)
}
