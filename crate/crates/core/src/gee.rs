//! Generalized estimating equations with an AR(1) working correlation, and
//! the product-of-coefficients mediation estimates built from two fits:
//!
//! ```text
//! E(M_ij | X_ij, Z_i)      = X_ij' beta_m + tau_m Z_i
//! E(Y_ij | M_ij, X_ij, Z_i) = X_ij' beta_y + tau_y Z_i + gamma M_ij
//! ACME = gamma tau_m,   TE = gamma tau_m + tau_y
//! ```
//!
//! The correlation is indexed by observation rank within a subject, not by
//! elapsed time. No intercept is included unless requested.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};

/// Two-sided 97.5% standard normal quantile.
pub const Z_975: f64 = 1.959_963_984_540_054;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Equation {
    Mediator,
    Outcome,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WorkingCorrelation {
    Independence,
    #[default]
    Ar1,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeeOptions {
    pub corr: WorkingCorrelation,
    pub tol: f64,
    pub max_iter: usize,
    /// Adds a constant column to both equations.
    pub intercept: bool,
}

impl Default for GeeOptions {
    fn default() -> Self {
        GeeOptions {
            corr: WorkingCorrelation::Ar1,
            tol: 1e-8,
            max_iter: 50,
            intercept: false,
        }
    }
}

impl GeeOptions {
    pub fn validate(&self, prefix: &str) -> Result<()> {
        let field = |name: &str| {
            if prefix.is_empty() {
                name.to_string()
            } else {
                format!("{prefix}.{name}")
            }
        };
        if !(self.tol > 0.0) {
            return Err(Error::config(field("tol"), "must be positive"));
        }
        if self.max_iter == 0 {
            return Err(Error::config(field("max_iter"), "must be at least 1"));
        }
        Ok(())
    }
}

/// Design rows and responses of one subject, in observation order.
#[derive(Debug, Clone)]
pub struct Block {
    pub design: DMatrix<f64>,
    pub response: DVector<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct GeeFit {
    pub equation: Option<Equation>,
    pub names: Vec<String>,
    pub coefficients: Vec<f64>,
    #[serde(serialize_with = "serialize_matrix")]
    pub robust_cov: DMatrix<f64>,
    pub rho: f64,
    pub n_iter_used: usize,
    pub converged: bool,
}

fn serialize_matrix<S: serde::Serializer>(
    m: &DMatrix<f64>,
    s: S,
) -> std::result::Result<S::Ok, S::Error> {
    let rows: Vec<Vec<f64>> = m.row_iter().map(|r| r.iter().copied().collect()).collect();
    rows.serialize(s)
}

impl GeeFit {
    pub fn index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn coefficient(&self, name: &str) -> Option<f64> {
        self.index(name).map(|k| self.coefficients[k])
    }

    pub fn robust_se(&self, name: &str) -> Option<f64> {
        self.index(name)
            .map(|k| self.robust_cov[(k, k)].max(0.0).sqrt())
    }

    pub fn robust_ses(&self) -> Vec<f64> {
        (0..self.names.len())
            .map(|k| self.robust_cov[(k, k)].max(0.0).sqrt())
            .collect()
    }
}

/// `R(rho)^{-1}` applied to the columns of `m`, for an AR(1) matrix of
/// size `m.nrows()`. The inverse is tridiagonal.
fn ar1_inv_mul(rho: f64, m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    if rho == 0.0 || n == 1 {
        return m.clone();
    }
    let c = 1.0 / (1.0 - rho * rho);
    let mut out = DMatrix::zeros(n, m.ncols());
    for j in 0..n {
        let diag = if j == 0 || j == n - 1 {
            1.0
        } else {
            1.0 + rho * rho
        };
        for k in 0..m.ncols() {
            let mut v = diag * m[(j, k)];
            if j > 0 {
                v -= rho * m[(j - 1, k)];
            }
            if j + 1 < n {
                v -= rho * m[(j + 1, k)];
            }
            out[(j, k)] = c * v;
        }
    }
    out
}

fn gls_step(blocks: &[Block], rho: f64) -> (DMatrix<f64>, DVector<f64>) {
    let q = blocks[0].design.ncols();
    let mut a = DMatrix::zeros(q, q);
    let mut b = DVector::zeros(q);
    for blk in blocks {
        let wd = ar1_inv_mul(rho, &blk.design);
        a += wd.tr_mul(&blk.design);
        b += wd.tr_mul(&blk.response);
    }
    (a, b)
}

fn solve_checked(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let eig = SymmetricEigen::new(a.clone());
    let max = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let min = eig.eigenvalues.iter().fold(f64::INFINITY, |m, &v| m.min(v));
    if !(max > 0.0) || min <= 1e-12 * max {
        return Err(Error::RankDeficient(format!(
            "information matrix eigenvalues in [{min:e}, {max:e}]"
        )));
    }
    let inv_diag = eig.eigenvalues.map(|v| 1.0 / v);
    let v = &eig.eigenvectors;
    Ok(v * DMatrix::from_diagonal(&inv_diag) * v.tr_mul(b))
}

fn residuals(blocks: &[Block], beta: &DVector<f64>) -> Vec<DVector<f64>> {
    blocks
        .iter()
        .map(|b| &b.response - &b.design * beta)
        .collect()
}

/// Moment estimate of the lag-1 correlation of standardized residuals.
fn moment_rho(res: &[DVector<f64>], q: usize) -> f64 {
    let n_tot: usize = res.iter().map(|r| r.len()).sum();
    let n_pairs: usize = res.iter().map(|r| r.len().saturating_sub(1)).sum();
    let phi =
        res.iter().map(|r| r.norm_squared()).sum::<f64>() / (n_tot as f64 - q as f64).max(1.0);
    if n_pairs == 0 || !(phi > 0.0) {
        return 0.0;
    }
    let lag: f64 = res
        .iter()
        .map(|r| (1..r.len()).map(|j| r[j] * r[j - 1]).sum::<f64>())
        .sum();
    let denom = (n_pairs as f64 - q as f64).max(1.0);
    (lag / phi / denom).clamp(-0.99, 0.99)
}

/// Iterated GLS fit of stacked subject blocks.
pub fn fit_blocks(
    blocks: &[Block],
    names: Vec<String>,
    corr: WorkingCorrelation,
    tol: f64,
    max_iter: usize,
) -> Result<GeeFit> {
    let q = names.len();
    if blocks.is_empty() || blocks.iter().any(|b| b.design.ncols() != q) {
        return Err(Error::Dimension {
            expected: q,
            got: blocks.first().map(|b| b.design.ncols()).unwrap_or(0),
        });
    }
    let (a, b) = gls_step(blocks, 0.0);
    let mut beta = solve_checked(&a, &b)?;
    let mut rho = 0.0;
    let mut converged = false;
    let mut n_iter_used = 0;
    for it in 1..=max_iter {
        n_iter_used = it;
        if corr == WorkingCorrelation::Independence {
            converged = true;
            break;
        }
        rho = moment_rho(&residuals(blocks, &beta), q);
        let (a, b) = gls_step(blocks, rho);
        let next = solve_checked(&a, &b)?;
        let change = (&next - &beta).amax();
        beta = next;
        if change < tol {
            converged = true;
            break;
        }
    }

    // sandwich A^{-1} B A^{-1}
    let mut a = DMatrix::zeros(q, q);
    let mut meat = DMatrix::zeros(q, q);
    for (blk, e) in blocks.iter().zip(residuals(blocks, &beta)) {
        let wd = ar1_inv_mul(rho, &blk.design);
        a += wd.tr_mul(&blk.design);
        let u = wd.tr_mul(&e);
        meat += &u * u.transpose();
    }
    let eye = DMatrix::identity(q, q);
    let mut a_inv = DMatrix::zeros(q, q);
    for k in 0..q {
        let col = solve_checked(&a, &eye.column(k).into_owned())?;
        a_inv.set_column(k, &col);
    }
    let cov = &a_inv * meat * &a_inv;
    let robust_cov = (&cov + cov.transpose()) * 0.5;
    Ok(GeeFit {
        equation: None,
        names,
        coefficients: beta.iter().copied().collect(),
        robust_cov,
        rho,
        n_iter_used,
        converged,
    })
}

fn equation_blocks(ds: &Dataset, equation: Equation, intercept: bool) -> (Vec<Block>, Vec<String>) {
    let mut names = Vec::new();
    if intercept {
        names.push("intercept".to_string());
    }
    names.extend(ds.covariate_names.iter().cloned());
    names.push("treatment".into());
    if equation == Equation::Outcome {
        names.push("mediator".into());
    }
    let q = names.len();
    let blocks = ds
        .subjects
        .iter()
        .map(|s| {
            let n = s.n_obs();
            let mut d = DMatrix::zeros(n, q);
            for j in 0..n {
                let mut c = 0;
                if intercept {
                    d[(j, 0)] = 1.0;
                    c = 1;
                }
                for k in 0..s.covariates.ncols() {
                    d[(j, c + k)] = s.covariates[(j, k)];
                }
                c += s.covariates.ncols();
                d[(j, c)] = s.z as f64;
                if equation == Equation::Outcome {
                    d[(j, c + 1)] = s.mediator[j];
                }
            }
            let y = match equation {
                Equation::Mediator => &s.mediator,
                Equation::Outcome => &s.outcome,
            };
            Block {
                design: d,
                response: DVector::from_column_slice(y),
            }
        })
        .collect();
    (blocks, names)
}

pub fn fit_gee(ds: &Dataset, equation: Equation, opts: &GeeOptions) -> Result<GeeFit> {
    opts.validate("")?;
    let (blocks, names) = equation_blocks(ds, equation, opts.intercept);
    let mut fit = fit_blocks(&blocks, names, opts.corr, opts.tol, opts.max_iter)?;
    fit.equation = Some(equation);
    Ok(fit)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WaldEstimate {
    pub estimate: f64,
    pub se: f64,
    pub lower: f64,
    pub upper: f64,
}

impl WaldEstimate {
    pub fn new(estimate: f64, variance: f64) -> Self {
        let se = variance.max(0.0).sqrt();
        WaldEstimate {
            estimate,
            se,
            lower: estimate - Z_975 * se,
            upper: estimate + Z_975 * se,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GeeMediation {
    pub acme: WaldEstimate,
    pub te: WaldEstimate,
    pub mediator_fit: GeeFit,
    pub outcome_fit: GeeFit,
}

/// Inputs of the product estimators: `tau_m` from the mediator fit,
/// `(gamma, tau_y)` and their covariance from the outcome fit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProductInputs {
    pub tau_m: f64,
    pub var_tau_m: f64,
    pub gamma: f64,
    pub var_gamma: f64,
    pub tau_y: f64,
    pub var_tau_y: f64,
    pub cov_gamma_tau_y: f64,
}

/// Product-of-coefficients estimates with first-order delta-method
/// variances, the two fits treated as independent.
pub fn product_estimates(p: &ProductInputs) -> (WaldEstimate, WaldEstimate) {
    let acme = p.gamma * p.tau_m;
    let var_acme = p.tau_m * p.tau_m * p.var_gamma + p.gamma * p.gamma * p.var_tau_m;
    let te = acme + p.tau_y;
    let var_te = var_acme + p.var_tau_y + 2.0 * p.tau_m * p.cov_gamma_tau_y;
    (
        WaldEstimate::new(acme, var_acme),
        WaldEstimate::new(te, var_te),
    )
}

pub fn gee_mediation(ds: &Dataset, opts: &GeeOptions) -> Result<GeeMediation> {
    let mediator_fit = fit_gee(ds, Equation::Mediator, opts)?;
    let outcome_fit = fit_gee(ds, Equation::Outcome, opts)?;
    let km = mediator_fit.index("treatment").expect("treatment column");
    let ky = outcome_fit.index("treatment").expect("treatment column");
    let kg = outcome_fit.index("mediator").expect("mediator column");
    let inputs = ProductInputs {
        tau_m: mediator_fit.coefficients[km],
        var_tau_m: mediator_fit.robust_cov[(km, km)],
        gamma: outcome_fit.coefficients[kg],
        var_gamma: outcome_fit.robust_cov[(kg, kg)],
        tau_y: outcome_fit.coefficients[ky],
        var_tau_y: outcome_fit.robust_cov[(ky, ky)],
        cov_gamma_tau_y: outcome_fit.robust_cov[(kg, ky)],
    };
    let (acme, te) = product_estimates(&inputs);
    Ok(GeeMediation {
        acme,
        te,
        mediator_fit,
        outcome_fit,
    })
}
