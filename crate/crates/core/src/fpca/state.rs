use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::FpcaConfig;
use crate::error::{Error, Result};
use crate::splines::SplineBasis;

/// Shape parameters of the multiplicative gamma priors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Shapes {
    pub a1: f64,
    pub a2: f64,
    pub a_chi1: f64,
    pub a_chi2: f64,
}

impl Default for Shapes {
    fn default() -> Self {
        Shapes {
            a1: 2.0,
            a2: 3.0,
            a_chi1: 2.0,
            a_chi2: 3.0,
        }
    }
}

/// One Gibbs state.
#[derive(Debug, Clone, PartialEq)]
pub struct FpcaState {
    /// `(L + 2) x R`, column `r` holds the coefficients `p_r` of `psi_r`.
    pub basis_coeffs: DMatrix<f64>,
    /// `N x R`.
    pub scores: DMatrix<f64>,
    /// Group means `chi_0`, `chi_1`.
    pub group_means: [DVector<f64>; 2],
    /// `lambda_r^2 = 1 / prod_{l <= r} delta_l`.
    pub score_vars: DVector<f64>,
    /// `sigma_chi_r^2 = 1 / prod_{l <= r} delta_chi_l`.
    pub mean_prior_vars: DVector<f64>,
    pub noise_var: f64,
    pub reg_coeffs: DVector<f64>,
    /// Smoothing parameters `h_r`.
    pub smoothness: DVector<f64>,
    /// `N x R` score mixing weights `xi_ir`.
    pub mix_weights: DMatrix<f64>,
    pub deltas: DVector<f64>,
    pub mean_deltas: DVector<f64>,
    pub shapes: Shapes,
}

fn inverse_cumprod(d: &DVector<f64>) -> DVector<f64> {
    let mut acc = 1.0;
    DVector::from_iterator(
        d.len(),
        d.iter().map(|v| {
            acc *= v;
            1.0 / acc
        }),
    )
}

impl FpcaState {
    pub fn n_components(&self) -> usize {
        self.basis_coeffs.ncols()
    }

    pub fn n_subjects(&self) -> usize {
        self.scores.nrows()
    }

    /// Recomputes `score_vars` and `mean_prior_vars` from the deltas.
    pub fn refresh_products(&mut self) {
        self.score_vars = inverse_cumprod(&self.deltas);
        self.mean_prior_vars = inverse_cumprod(&self.mean_deltas);
    }

    pub fn mean_for_arm(&self, z: u8, r: usize) -> f64 {
        self.group_means[z as usize][r]
    }

    /// `max_{r != r'} |int psi_r psi_r'|` and `max_r |int psi_r^2 - 1|` on
    /// the quadrature grid.
    pub fn orthonormality_error(&self, basis: &SplineBasis) -> f64 {
        let gp = &basis.gram * &self.basis_coeffs;
        let inner = self.basis_coeffs.transpose() * gp;
        let mut worst = 0.0_f64;
        for a in 0..inner.nrows() {
            for b in 0..inner.ncols() {
                let want = if a == b { 1.0 } else { 0.0 };
                worst = worst.max((inner[(a, b)] - want).abs());
            }
        }
        worst
    }

    /// Every positivity and range invariant, returning the first violation.
    pub fn check_invariants(
        &self,
        basis: &SplineBasis,
        h_upper: f64,
    ) -> std::result::Result<(), String> {
        let err = self.orthonormality_error(basis);
        if err > 1e-6 {
            return Err(format!("orthonormality error {err:e}"));
        }
        let positive =
            |name: &str, v: &mut dyn Iterator<Item = f64>| -> std::result::Result<(), String> {
                for x in v {
                    if !(x > 0.0 && x.is_finite()) {
                        return Err(format!("{name} not strictly positive: {x}"));
                    }
                }
                Ok(())
            };
        positive("score_vars", &mut self.score_vars.iter().copied())?;
        positive("mean_prior_vars", &mut self.mean_prior_vars.iter().copied())?;
        positive("noise_var", &mut std::iter::once(self.noise_var))?;
        positive("smoothness", &mut self.smoothness.iter().copied())?;
        positive("mix_weights", &mut self.mix_weights.iter().copied())?;
        positive("deltas", &mut self.deltas.iter().copied())?;
        positive("mean_deltas", &mut self.mean_deltas.iter().copied())?;
        let s = self.shapes;
        positive("shapes", &mut [s.a1, s.a2, s.a_chi1, s.a_chi2].into_iter())?;
        for r in 0..self.n_components() {
            let h = self.smoothness[r];
            // relative slack for the rounding in 1 / prod(delta)
            if h < self.score_vars[r] * (1.0 - 1e-12) || h > h_upper {
                return Err(format!(
                    "h_{r} = {h} outside [{}, {h_upper}]",
                    self.score_vars[r]
                ));
            }
        }
        Ok(())
    }

    /// Flips the sign of component `r` (function, scores and group means).
    pub fn flip_component(&mut self, r: usize) {
        self.basis_coeffs.column_mut(r).neg_mut();
        self.scores.column_mut(r).neg_mut();
        for z in 0..2 {
            self.group_means[z][r] = -self.group_means[z][r];
        }
    }

    /// Reorders the component-indexed fields by `order` (new position `k`
    /// takes old component `order[k]`). The deltas are left in sampler
    /// order.
    pub fn permute_components(&mut self, order: &[usize]) {
        let perm_cols =
            |m: &DMatrix<f64>| DMatrix::from_fn(m.nrows(), order.len(), |i, k| m[(i, order[k])]);
        let perm_vec = |v: &DVector<f64>| DVector::from_fn(order.len(), |k, _| v[order[k]]);
        self.basis_coeffs = perm_cols(&self.basis_coeffs);
        self.scores = perm_cols(&self.scores);
        self.mix_weights = perm_cols(&self.mix_weights);
        self.group_means = [
            perm_vec(&self.group_means[0]),
            perm_vec(&self.group_means[1]),
        ];
        self.score_vars = perm_vec(&self.score_vars);
        self.mean_prior_vars = perm_vec(&self.mean_prior_vars);
        self.smoothness = perm_vec(&self.smoothness);
    }
}

/// Retained draws of one chain.
#[derive(Debug, Clone)]
pub struct FpcaDraws {
    pub label: String,
    pub config: FpcaConfig,
    pub basis: SplineBasis,
    pub states: Vec<FpcaState>,
    /// Sweep index of each retained state.
    pub iterations: Vec<usize>,
    pub subject_ids: Vec<String>,
    pub arms: Vec<u8>,
    pub regressor_names: Vec<String>,
    /// Per-subject mean regressor row, used for imputed trajectories.
    pub mean_regressors: Vec<DVector<f64>>,
    /// Posterior mean of `x_ij' beta + sum_r psi_r(t_ij) zeta_ir` at the
    /// observed times.
    pub fitted_mean: Vec<Vec<f64>>,
    /// Metropolis-Hastings acceptance rates for `a1, a2, a_chi1, a_chi2`.
    pub mh_acceptance: [f64; 4],
    pub warnings: Vec<String>,
}

impl FpcaDraws {
    pub fn n_draws(&self) -> usize {
        self.states.len()
    }

    pub fn n_components(&self) -> usize {
        self.states
            .first()
            .map(|s| s.n_components())
            .unwrap_or(self.config.n_components)
    }

    pub fn posterior_mean_score_vars(&self) -> Vec<f64> {
        let r = self.n_components();
        let n = self.n_draws().max(1) as f64;
        (0..r)
            .map(|k| self.states.iter().map(|s| s.score_vars[k]).sum::<f64>() / n)
            .collect()
    }

    /// Sorts components by posterior-mean score variance (descending) and
    /// fixes each draw's signs so that `int psi_r >= 0`. Effect curves are
    /// invariant under both operations.
    pub fn align_components(&mut self) {
        if self.states.is_empty() {
            return;
        }
        let means = self.posterior_mean_score_vars();
        let mut order: Vec<usize> = (0..means.len()).collect();
        order.sort_by(|&a, &b| means[b].total_cmp(&means[a]));
        let weights = DVector::from_vec(crate::splines::trapezoid_weights(self.basis.grid_size()));
        let integrals = self.basis.basis_on_grid.tr_mul(&weights);
        for state in &mut self.states {
            state.permute_components(&order);
            for r in 0..state.n_components() {
                if state.basis_coeffs.column(r).dot(&integrals) < 0.0 {
                    state.flip_component(r);
                }
            }
        }
    }

    pub fn subject_index(&self, id: &str) -> Result<usize> {
        self.subject_ids
            .iter()
            .position(|s| s == id)
            .ok_or_else(|| Error::UnknownSubject(id.to_string()))
    }

    /// `K x R` component values on the rows of `grid_design`.
    pub fn components_on(&self, draw: usize, grid_design: &DMatrix<f64>) -> DMatrix<f64> {
        grid_design * &self.states[draw].basis_coeffs
    }

    /// Latent trajectory `sum_r psi_r(t) zeta_ir + xbar_i' beta` of subject
    /// `i` in draw `draw`, on the rows of `grid_design`.
    pub fn trajectory(&self, draw: usize, i: usize, grid_design: &DMatrix<f64>) -> DVector<f64> {
        let s = &self.states[draw];
        let scores = s.scores.row(i).transpose();
        let offset = if s.reg_coeffs.is_empty() {
            0.0
        } else {
            self.mean_regressors[i].dot(&s.reg_coeffs)
        };
        (grid_design * (&s.basis_coeffs * scores)).add_scalar(offset)
    }

    /// Names of the scalar columns written by [`write_scalar_csv`](Self::write_scalar_csv).
    pub fn scalar_names(&self) -> Vec<String> {
        let r = self.n_components();
        let mut names = vec!["noise_var".to_string()];
        for k in 0..r {
            names.push(format!("score_var_{}", k + 1));
        }
        for k in 0..r {
            names.push(format!("chi0_{}", k + 1));
            names.push(format!("chi1_{}", k + 1));
        }
        for k in 0..r {
            names.push(format!("h_{}", k + 1));
        }
        for name in &self.regressor_names {
            names.push(format!("beta_{name}"));
        }
        names.extend(["a1", "a2", "a_chi1", "a_chi2"].map(String::from));
        names
    }

    pub fn scalar_row(&self, draw: usize) -> Vec<f64> {
        let s = &self.states[draw];
        let r = s.n_components();
        let mut row = vec![s.noise_var];
        row.extend(s.score_vars.iter());
        for k in 0..r {
            row.push(s.group_means[0][k]);
            row.push(s.group_means[1][k]);
        }
        row.extend(s.smoothness.iter());
        row.extend(s.reg_coeffs.iter());
        row.extend([s.shapes.a1, s.shapes.a2, s.shapes.a_chi1, s.shapes.a_chi2]);
        row
    }

    /// One column per named scalar across the retained draws.
    pub fn scalar_traces(&self) -> Vec<(String, Vec<f64>)> {
        let names = self.scalar_names();
        let rows: Vec<Vec<f64>> = (0..self.n_draws()).map(|d| self.scalar_row(d)).collect();
        names
            .into_iter()
            .enumerate()
            .map(|(c, name)| (name, rows.iter().map(|row| row[c]).collect()))
            .collect()
    }

    /// Columnar CSV, one row per retained draw.
    pub fn write_scalar_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        let mut header = vec!["draw".to_string(), "iteration".to_string()];
        header.extend(self.scalar_names());
        wtr.write_record(&header)?;
        for d in 0..self.n_draws() {
            let mut rec = vec![d.to_string(), self.iterations[d].to_string()];
            rec.extend(self.scalar_row(d).iter().map(|v| v.to_string()));
            wtr.write_record(&rec)?;
        }
        wtr.flush().map_err(|e| Error::io("<csv writer>", e))?;
        Ok(())
    }

    /// Wide trajectory CSV keyed by `(draw, subject)` with one column per
    /// grid index.
    pub fn write_trajectory_csv<W: Write>(&self, writer: W, grid: &[f64]) -> Result<()> {
        let design = self.basis.design(grid)?;
        let mut wtr = csv::Writer::from_writer(writer);
        let mut header = vec!["draw".to_string(), "subject".to_string()];
        header.extend((0..grid.len()).map(|g| format!("g{g}")));
        wtr.write_record(&header)?;
        for d in 0..self.n_draws() {
            for (i, id) in self.subject_ids.iter().enumerate() {
                let traj = self.trajectory(d, i, &design);
                let mut rec = vec![d.to_string(), id.clone()];
                rec.extend(traj.iter().map(|v| v.to_string()));
                wtr.write_record(&rec)?;
            }
        }
        wtr.flush().map_err(|e| Error::io("<csv writer>", e))?;
        Ok(())
    }
}
