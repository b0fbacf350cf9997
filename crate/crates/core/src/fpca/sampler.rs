use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use statrs::function::gamma::ln_gamma;

use super::state::{FpcaDraws, FpcaState, Shapes};
use super::{FpcaConfig, ResponseDesign};
use crate::data::Dataset;
use crate::dist::{gamma_rate, normal, truncated_gamma};
use crate::error::{Error, Result};
use crate::linalg::{cholesky_jitter, constrained_gaussian_draw, gaussian_draw};
use crate::splines::SplineBasis;

/// Per-subject quantities that stay fixed over a chain.
#[derive(Debug, Clone)]
pub struct ChainData {
    pub arms: Vec<u8>,
    /// `T_i x (L + 2)` basis rows at the observed times.
    pub basis_rows: Vec<DMatrix<f64>>,
    /// `B_i' B_i`.
    pub basis_gram: Vec<DMatrix<f64>>,
    pub response: Vec<DVector<f64>>,
    /// `T_i x p`.
    pub regressors: Vec<DMatrix<f64>>,
    /// `sum_i X_i' X_i`.
    pub regressor_gram: DMatrix<f64>,
}

impl ChainData {
    pub fn new(ds: &Dataset, design: &ResponseDesign, basis: &SplineBasis) -> Result<Self> {
        let n = ds.n_subjects();
        if design.response.len() != n || design.regressors.len() != n {
            return Err(Error::Dimension {
                expected: n,
                got: design.response.len(),
            });
        }
        let p = design.n_regressors();
        let mut basis_rows = Vec::with_capacity(n);
        let mut response = Vec::with_capacity(n);
        for (s, y) in ds.subjects.iter().zip(&design.response) {
            if y.len() != s.n_obs() {
                return Err(Error::Dimension {
                    expected: s.n_obs(),
                    got: y.len(),
                });
            }
            basis_rows.push(basis.design(&s.times)?);
            response.push(DVector::from_column_slice(y));
        }
        for x in &design.regressors {
            if x.ncols() != p {
                return Err(Error::Dimension {
                    expected: p,
                    got: x.ncols(),
                });
            }
        }
        Ok(Self::from_parts(
            ds.subjects.iter().map(|s| s.z).collect(),
            basis_rows,
            response,
            design.regressors.clone(),
        ))
    }

    pub fn from_parts(
        arms: Vec<u8>,
        basis_rows: Vec<DMatrix<f64>>,
        response: Vec<DVector<f64>>,
        regressors: Vec<DMatrix<f64>>,
    ) -> Self {
        let basis_gram = basis_rows.iter().map(|b| b.tr_mul(b)).collect();
        let p = regressors.first().map(|x| x.ncols()).unwrap_or(0);
        let mut regressor_gram = DMatrix::zeros(p, p);
        for x in &regressors {
            regressor_gram += x.tr_mul(x);
        }
        ChainData {
            arms,
            basis_rows,
            basis_gram,
            response,
            regressors,
            regressor_gram,
        }
    }

    pub fn n_subjects(&self) -> usize {
        self.arms.len()
    }

    pub fn n_regressors(&self) -> usize {
        self.regressor_gram.nrows()
    }

    pub fn total_obs(&self) -> usize {
        self.response.iter().map(|y| y.len()).sum()
    }
}

/// Gibbs sampler for one response. The `sweep_*` methods execute the five
/// steps of a sweep; the `*_conditional` methods expose the full-conditional
/// parameters they draw from.
#[derive(Debug, Clone)]
pub struct Sampler {
    pub data: ChainData,
    pub basis: SplineBasis,
    pub cfg: FpcaConfig,
}

struct Cache {
    /// `B_i P`, `T_i x R`.
    psi: Vec<DMatrix<f64>>,
    /// `X_i beta`.
    xb: Vec<DVector<f64>>,
}

impl Sampler {
    pub fn new(data: ChainData, basis: SplineBasis, cfg: FpcaConfig) -> Self {
        Sampler { data, basis, cfg }
    }

    fn cache(&self, state: &FpcaState) -> Cache {
        let psi = self
            .data
            .basis_rows
            .iter()
            .map(|b| b * &state.basis_coeffs)
            .collect();
        let xb = self
            .data
            .regressors
            .iter()
            .map(|x| {
                if x.ncols() == 0 {
                    DVector::zeros(x.nrows())
                } else {
                    x * &state.reg_coeffs
                }
            })
            .collect();
        Cache { psi, xb }
    }

    /// `y_i - X_i beta - sum_r psi_r(t_i) zeta_ir`.
    fn residual(&self, state: &FpcaState, cache: &Cache, i: usize) -> DVector<f64> {
        let scores = state.scores.row(i).transpose();
        &self.data.response[i] - &cache.xb[i] - &cache.psi[i] * scores
    }

    /// Fitted values `X_i beta + sum_r psi_r(t_i) zeta_ir` for every subject.
    pub fn fitted(&self, state: &FpcaState) -> Vec<DVector<f64>> {
        let cache = self.cache(state);
        (0..self.data.n_subjects())
            .map(|i| &cache.xb[i] + &cache.psi[i] * state.scores.row(i).transpose())
            .collect()
    }

    // ---- initialization ------------------------------------------------

    pub fn init_state(&self) -> Result<FpcaState> {
        let d = self.basis.dim();
        let p = self.data.n_regressors();
        let n = self.data.n_subjects();
        let r_count = self.cfg.n_components;
        let total = self.data.total_obs();
        if n == 0 {
            return Err(Error::InsufficientData("no subjects".into()));
        }
        ensure_enough_observations(total, d - 2, p)?;

        // pooled least squares for beta
        let reg_coeffs = if p == 0 {
            DVector::zeros(0)
        } else {
            let mut xty = DVector::zeros(p);
            for (x, y) in self.data.regressors.iter().zip(&self.data.response) {
                xty += x.tr_mul(y);
            }
            let mut q = self.data.regressor_gram.clone();
            for k in 0..p {
                q[(k, k)] += 1e-8;
            }
            cholesky_jitter(&q)?.solve(&xty)
        };

        // per-subject ridge projection of the residual curves
        let ridge = 0.05;
        let mut second_moment = DMatrix::<f64>::zeros(d, d);
        let mut residuals = Vec::with_capacity(n);
        for i in 0..n {
            let r = if p == 0 {
                self.data.response[i].clone()
            } else {
                &self.data.response[i] - &self.data.regressors[i] * &reg_coeffs
            };
            let q = &self.data.basis_gram[i] + &self.basis.gram * ridge;
            let c = cholesky_jitter(&q)?.solve(&self.data.basis_rows[i].tr_mul(&r));
            second_moment += &c * c.transpose();
            residuals.push(r);
        }
        second_moment /= n as f64;

        // eigenfunctions of the L2 second-moment operator: with G = L L',
        // eigenvectors v of L' S L give p = L'^-1 v, orthonormal under G
        let gchol = cholesky_jitter(&self.basis.gram)?;
        let lower = gchol.l();
        let m = lower.transpose() * &second_moment * &lower;
        let eig = SymmetricEigen::new((&m + m.transpose()) * 0.5);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let mut basis_coeffs = DMatrix::zeros(d, r_count);
        let upper = lower.transpose();
        for (k, &idx) in order.iter().take(r_count).enumerate() {
            let v = eig.eigenvectors.column(idx).into_owned();
            let pk = upper
                .solve_upper_triangular(&v)
                .ok_or_else(|| Error::numerical("singular Gram factor", vec![]))?;
            basis_coeffs.set_column(k, &pk);
        }
        gram_schmidt(&mut basis_coeffs, &self.basis.gram);

        // scores by per-subject (lightly ridged) least squares
        let mut scores = DMatrix::zeros(n, r_count);
        let mut sse = 0.0;
        for i in 0..n {
            let psi = &self.data.basis_rows[i] * &basis_coeffs;
            let mut q = psi.tr_mul(&psi);
            for k in 0..r_count {
                q[(k, k)] += 1e-2;
            }
            let zeta = cholesky_jitter(&q)?.solve(&psi.tr_mul(&residuals[i]));
            sse += (&residuals[i] - &psi * &zeta).norm_squared();
            scores.set_row(i, &zeta.transpose());
        }

        let mut group_means = [DVector::zeros(r_count), DVector::zeros(r_count)];
        let mut counts = [0usize; 2];
        for i in 0..n {
            let z = self.data.arms[i] as usize;
            counts[z] += 1;
            for k in 0..r_count {
                group_means[z][k] += scores[(i, k)];
            }
        }
        for z in 0..2 {
            if counts[z] > 0 {
                group_means[z] /= counts[z] as f64;
            }
        }
        let cap = self.cfg.h_upper / 10.0;
        let score_vars = DVector::from_fn(r_count, |k, _| {
            let ss: f64 = (0..n)
                .map(|i| (scores[(i, k)] - group_means[self.data.arms[i] as usize][k]).powi(2))
                .sum();
            (ss / n as f64).clamp(1e-4, cap)
        });
        let mut deltas = DVector::zeros(r_count);
        for k in 0..r_count {
            deltas[k] = if k == 0 {
                1.0 / score_vars[0]
            } else {
                score_vars[k - 1] / score_vars[k]
            };
        }
        let chi_vars = DVector::from_fn(r_count, |k, _| {
            (group_means[0][k].powi(2) + group_means[1][k].powi(2)).max(1.0)
        });
        let mut mean_deltas = DVector::zeros(r_count);
        for k in 0..r_count {
            mean_deltas[k] = if k == 0 {
                1.0 / chi_vars[0]
            } else {
                chi_vars[k - 1] / chi_vars[k]
            };
        }
        let smoothness = DVector::from_fn(r_count, |k, _| {
            (10.0 * score_vars[k].max(1.0)).min(self.cfg.h_upper)
        });
        let noise_var = (sse / total as f64).max(1e-8);

        let mut state = FpcaState {
            basis_coeffs,
            scores,
            group_means,
            score_vars: DVector::zeros(r_count),
            mean_prior_vars: DVector::zeros(r_count),
            noise_var,
            reg_coeffs,
            smoothness,
            mix_weights: DMatrix::from_element(n, r_count, 1.0),
            deltas,
            mean_deltas,
            shapes: Shapes::default(),
        };
        state.refresh_products();
        Ok(state)
    }

    // ---- step 1: eigenfunctions and smoothing parameters ----------------

    /// Precision `Q`, linear term `l` and constraint rows `C` of the
    /// full conditional of `p_r`.
    pub fn eigen_conditional(
        &self,
        state: &FpcaState,
        r: usize,
    ) -> (DMatrix<f64>, DVector<f64>, DMatrix<f64>) {
        let cache = self.cache(state);
        self.eigen_conditional_cached(state, &cache, r)
    }

    fn eigen_conditional_cached(
        &self,
        state: &FpcaState,
        cache: &Cache,
        r: usize,
    ) -> (DMatrix<f64>, DVector<f64>, DMatrix<f64>) {
        let d = self.basis.dim();
        let r_count = state.n_components();
        let inv_noise = 1.0 / state.noise_var;
        let mut q = &self.basis.prior_penalty * state.smoothness[r];
        let mut l = DVector::zeros(d);
        for i in 0..self.data.n_subjects() {
            let zeta = state.scores[(i, r)];
            if zeta == 0.0 {
                continue;
            }
            let w = zeta * zeta * inv_noise;
            q.zip_apply(&self.data.basis_gram[i], |a, b| *a += w * b);
            // partial residual excluding component r
            let mut e = &self.data.response[i] - &cache.xb[i];
            for k in 0..r_count {
                if k != r {
                    e.axpy(-state.scores[(i, k)], &cache.psi[i].column(k), 1.0);
                }
            }
            l.gemv_tr(zeta * inv_noise, &self.data.basis_rows[i], &e, 1.0);
        }
        let others: Vec<usize> = (0..r_count).filter(|&k| k != r).collect();
        let mut c = DMatrix::zeros(others.len(), d);
        for (row, &k) in others.iter().enumerate() {
            let gp = &self.basis.gram * state.basis_coeffs.column(k);
            c.set_row(row, &gp.transpose());
        }
        (q, l, c)
    }

    /// Rescales `p_r` to unit `L2` norm and multiplies the scores of
    /// component `r` by the removed norm, leaving every fitted value
    /// unchanged.
    pub fn normalize_component(&self, state: &mut FpcaState, r: usize) {
        let pr = state.basis_coeffs.column(r).into_owned();
        let norm = pr.dot(&(&self.basis.gram * &pr)).sqrt();
        if norm > 0.0 && norm.is_finite() {
            state.basis_coeffs.column_mut(r).scale_mut(1.0 / norm);
            state.scores.column_mut(r).scale_mut(norm);
        }
    }

    /// Shape and rate of the (truncated) gamma conditional of `h_r`.
    pub fn smoothness_conditional(&self, state: &FpcaState, r: usize) -> (f64, f64) {
        let pr = state.basis_coeffs.column(r);
        let rate = pr.dot(&(&self.basis.prior_penalty * pr)).max(0.0);
        ((self.basis.knots.len() as f64 + 1.0) / 2.0, rate)
    }

    pub fn sweep_eigenfunctions<R: Rng + ?Sized>(
        &self,
        state: &mut FpcaState,
        rng: &mut R,
    ) -> Result<()> {
        let mut cache = self.cache(state);
        for r in 0..state.n_components() {
            let (q, l, c) = self.eigen_conditional_cached(state, &cache, r);
            let pr = constrained_gaussian_draw(&q, &l, &c, rng)?;
            state.basis_coeffs.set_column(r, &pr);
            self.normalize_component(state, r);
            let pr = state.basis_coeffs.column(r).into_owned();
            for (psi, b) in cache.psi.iter_mut().zip(&self.data.basis_rows) {
                psi.set_column(r, &(b * &pr));
            }
            let (shape, rate) = self.smoothness_conditional(state, r);
            let lo = state.score_vars[r];
            let hi = self.cfg.h_upper;
            state.smoothness[r] = if lo < hi {
                truncated_gamma(shape, rate, lo, hi, rng)
            } else {
                hi
            };
        }
        Ok(())
    }

    // ---- step 2: scores -------------------------------------------------

    /// Mean and variance of the Gaussian conditional of `zeta_ir`.
    pub fn score_conditional(&self, state: &FpcaState, i: usize, r: usize) -> (f64, f64) {
        let cache = self.cache(state);
        let res = self.residual(state, &cache, i);
        let col = cache.psi[i].column(r);
        let partial = res.dot(&col) + state.scores[(i, r)] * col.norm_squared();
        self.score_params(state, i, r, col.norm_squared(), partial)
    }

    fn score_params(
        &self,
        state: &FpcaState,
        i: usize,
        r: usize,
        psi_sq: f64,
        cross: f64,
    ) -> (f64, f64) {
        let prior_prec = state.mix_weights[(i, r)] / state.score_vars[r];
        let prec = psi_sq / state.noise_var + prior_prec;
        let mean = (cross / state.noise_var
            + state.mean_for_arm(self.data.arms[i], r) * prior_prec)
            / prec;
        (mean, 1.0 / prec)
    }

    pub fn sweep_scores<R: Rng + ?Sized>(&self, state: &mut FpcaState, rng: &mut R) {
        let cache = self.cache(state);
        for i in 0..self.data.n_subjects() {
            let mut res = self.residual(state, &cache, i);
            for r in 0..state.n_components() {
                let col = cache.psi[i].column(r);
                let old = state.scores[(i, r)];
                let psi_sq = col.norm_squared();
                let cross = res.dot(&col) + old * psi_sq;
                let (mean, var) = self.score_params(state, i, r, psi_sq, cross);
                let new = normal(mean, var.sqrt(), rng);
                res.axpy(old - new, &col, 1.0);
                state.scores[(i, r)] = new;
            }
        }
    }

    // ---- step 3: group means --------------------------------------------

    /// Mean and variance of the Gaussian conditional of `chi_{z, r}`.
    pub fn group_mean_conditional(&self, state: &FpcaState, z: u8, r: usize) -> (f64, f64) {
        let lam = state.score_vars[r];
        let mut prec = 1.0 / state.mean_prior_vars[r];
        let mut lin = 0.0;
        for i in 0..self.data.n_subjects() {
            if self.data.arms[i] == z {
                let w = state.mix_weights[(i, r)] / lam;
                prec += w;
                lin += w * state.scores[(i, r)];
            }
        }
        (lin / prec, 1.0 / prec)
    }

    pub fn sweep_group_means<R: Rng + ?Sized>(&self, state: &mut FpcaState, rng: &mut R) {
        for r in 0..state.n_components() {
            for z in 0..2u8 {
                let (mean, var) = self.group_mean_conditional(state, z, r);
                state.group_means[z as usize][r] = normal(mean, var.sqrt(), rng);
            }
        }
    }

    // ---- step 4: regression coefficients ----------------------------------

    /// Precision and linear term of the Gaussian conditional of `beta`.
    pub fn regression_conditional(&self, state: &FpcaState) -> (DMatrix<f64>, DVector<f64>) {
        let p = self.data.n_regressors();
        let inv_noise = 1.0 / state.noise_var;
        let prior_prec = 1.0 / (self.cfg.beta_prior_sd * self.cfg.beta_prior_sd);
        let mut q = &self.data.regressor_gram * inv_noise;
        for k in 0..p {
            q[(k, k)] += prior_prec;
        }
        let mut l = DVector::zeros(p);
        if p > 0 {
            for i in 0..self.data.n_subjects() {
                let fpc = &self.data.basis_rows[i]
                    * (&state.basis_coeffs * state.scores.row(i).transpose());
                let e = &self.data.response[i] - fpc;
                l.gemv_tr(inv_noise, &self.data.regressors[i], &e, 1.0);
            }
        }
        (q, l)
    }

    pub fn sweep_regression<R: Rng + ?Sized>(
        &self,
        state: &mut FpcaState,
        rng: &mut R,
    ) -> Result<()> {
        if self.data.n_regressors() == 0 {
            return Ok(());
        }
        let (q, l) = self.regression_conditional(state);
        state.reg_coeffs = gaussian_draw(&q, &l, rng)?;
        Ok(())
    }

    // ---- step 5: variances and shrinkage --------------------------------

    /// Shape and (floored) rate of the gamma conditional of `sigma^-2`.
    pub fn noise_conditional(&self, state: &FpcaState) -> (f64, f64) {
        let cache = self.cache(state);
        let sse: f64 = (0..self.data.n_subjects())
            .map(|i| self.residual(state, &cache, i).norm_squared())
            .sum();
        let shape = self.cfg.noise_prior_shape + self.data.total_obs() as f64 / 2.0;
        let rate = (self.cfg.noise_prior_rate + sse / 2.0).max(self.cfg.noise_rate_floor);
        (shape, rate)
    }

    /// Shape and rate of the gamma conditional of `delta_chi_r` given the
    /// other deltas.
    pub fn mean_delta_conditional(&self, state: &FpcaState, r: usize) -> (f64, f64) {
        let r_count = state.n_components();
        let a = if r == 0 {
            state.shapes.a_chi1
        } else {
            state.shapes.a_chi2
        };
        let shape = a + (r_count - r) as f64;
        let mut rate = 1.0;
        let mut tau = 1.0;
        for k in 0..r_count {
            if k != r {
                tau *= state.mean_deltas[k];
            }
            if k >= r {
                let sq = state.group_means[0][k].powi(2) + state.group_means[1][k].powi(2);
                rate += 0.5 * tau * sq;
            }
        }
        (shape, rate)
    }

    fn weighted_score_ss(&self, state: &FpcaState) -> Vec<f64> {
        (0..state.n_components())
            .map(|k| {
                (0..self.data.n_subjects())
                    .map(|i| {
                        let dev = state.scores[(i, k)] - state.mean_for_arm(self.data.arms[i], k);
                        state.mix_weights[(i, k)] * dev * dev
                    })
                    .sum()
            })
            .collect()
    }

    /// Shape, rate and lower truncation bound of the conditional of
    /// `delta_r`. The bound keeps `lambda_k^2 <= h_k` for every `k >= r`.
    pub fn delta_conditional(&self, state: &FpcaState, r: usize) -> (f64, f64, f64) {
        let ss = self.weighted_score_ss(state);
        self.delta_params(state, r, &ss)
    }

    fn delta_params(&self, state: &FpcaState, r: usize, ss: &[f64]) -> (f64, f64, f64) {
        let r_count = state.n_components();
        let n = self.data.n_subjects() as f64;
        let a = if r == 0 {
            state.shapes.a1
        } else {
            state.shapes.a2
        };
        let shape = a + (r_count - r) as f64 * n / 2.0;
        let mut rate = 1.0;
        let mut tau = 1.0;
        let mut lower = 0.0_f64;
        for k in 0..r_count {
            if k != r {
                tau *= state.deltas[k];
            }
            if k >= r {
                rate += 0.5 * tau * ss[k];
                lower = lower.max(1.0 / (state.smoothness[k] * tau));
            }
        }
        (shape, rate, lower)
    }

    /// Shape and rate of the gamma conditional of `xi_ir`.
    pub fn mix_weight_conditional(&self, state: &FpcaState, i: usize, r: usize) -> (f64, f64) {
        let v = self.cfg.t_mixing_dof;
        let dev = state.scores[(i, r)] - state.mean_for_arm(self.data.arms[i], r);
        ((v + 1.0) / 2.0, 0.5 * (v + dev * dev / state.score_vars[r]))
    }

    /// Runs step 5 and returns which of the four shape proposals were
    /// accepted.
    pub fn sweep_variances<R: Rng + ?Sized>(
        &self,
        state: &mut FpcaState,
        rng: &mut R,
    ) -> [bool; 4] {
        // (a) noise precision
        let (shape, rate) = self.noise_conditional(state);
        state.noise_var = 1.0 / gamma_rate(shape, rate, rng);

        // (b) group-mean prior precisions
        for r in 0..state.n_components() {
            let (shape, rate) = self.mean_delta_conditional(state, r);
            state.mean_deltas[r] = gamma_rate(shape, rate, rng);
        }

        // (c) score variances
        let ss = self.weighted_score_ss(state);
        for r in 0..state.n_components() {
            let (shape, rate, lower) = self.delta_params(state, r, &ss);
            let draw = gamma_rate(shape, rate, rng);
            state.deltas[r] = if draw >= lower {
                draw
            } else {
                truncated_gamma(shape, rate, lower, f64::INFINITY, rng)
            };
        }
        state.refresh_products();

        // (d) mixing weights
        for r in 0..state.n_components() {
            for i in 0..self.data.n_subjects() {
                let (shape, rate) = self.mix_weight_conditional(state, i, r);
                state.mix_weights[(i, r)] = gamma_rate(shape, rate, rng);
            }
        }

        // (e) shapes
        self.sweep_shapes(state, rng)
    }

    pub fn sweep_shapes<R: Rng + ?Sized>(&self, state: &mut FpcaState, rng: &mut R) -> [bool; 4] {
        let step = self.cfg.mh_step;
        let first = |d: &DVector<f64>| vec![d[0]];
        let rest = |d: &DVector<f64>| d.iter().skip(1).copied().collect::<Vec<_>>();
        let d1 = first(&state.deltas);
        let d2 = rest(&state.deltas);
        let c1 = first(&state.mean_deltas);
        let c2 = rest(&state.mean_deltas);
        let mut accepted = [false; 4];
        let s = &mut state.shapes;
        accepted[0] = mh_shape(&mut s.a1, 2.0, &d1, step, rng);
        accepted[1] = mh_shape(&mut s.a2, 3.0, &d2, step, rng);
        accepted[2] = mh_shape(&mut s.a_chi1, 2.0, &c1, step, rng);
        accepted[3] = mh_shape(&mut s.a_chi2, 3.0, &c2, step, rng);
        accepted
    }

    /// One full sweep, steps 1 to 5 in order.
    pub fn sweep<R: Rng + ?Sized>(&self, state: &mut FpcaState, rng: &mut R) -> Result<[bool; 4]> {
        self.sweep_eigenfunctions(state, rng)?;
        self.sweep_scores(state, rng);
        self.sweep_group_means(state, rng);
        self.sweep_regression(state, rng)?;
        Ok(self.sweep_variances(state, rng))
    }
}

/// Log density of `a` under its `Ga(prior_shape, 1)` prior plus the
/// `Ga(a, 1)` likelihood of `deltas`, up to a constant.
pub fn shape_log_target(a: f64, prior_shape: f64, deltas: &[f64]) -> f64 {
    let mut lp = (prior_shape - 1.0) * a.ln() - a;
    for &d in deltas {
        lp += (a - 1.0) * d.ln() - ln_gamma(a);
    }
    lp
}

/// Log-scale random-walk Metropolis-Hastings update, with the Jacobian of
/// the log transform.
fn mh_shape<R: Rng + ?Sized>(
    a: &mut f64,
    prior_shape: f64,
    deltas: &[f64],
    step: f64,
    rng: &mut R,
) -> bool {
    let proposal = *a * normal(0.0, step, rng).exp();
    let log_ratio = shape_log_target(proposal, prior_shape, deltas)
        - shape_log_target(*a, prior_shape, deltas)
        + proposal.ln()
        - a.ln();
    if rng.random::<f64>().ln() < log_ratio {
        *a = proposal;
        true
    } else {
        false
    }
}

/// Gram-Schmidt under the inner product `<f, g> = f' G g`.
pub(crate) fn gram_schmidt(coeffs: &mut DMatrix<f64>, gram: &DMatrix<f64>) {
    for k in 0..coeffs.ncols() {
        let mut v = coeffs.column(k).into_owned();
        for j in 0..k {
            let u = coeffs.column(j).into_owned();
            let proj = v.dot(&(gram * &u));
            v.axpy(-proj, &u, 1.0);
        }
        let norm = v.dot(&(gram * &v)).sqrt();
        if norm > 1e-12 {
            v /= norm;
        }
        coeffs.set_column(k, &v);
    }
}

/// Fails when `total` observations cannot identify `L + 2` basis
/// coefficients and `p` regression coefficients.
pub fn ensure_enough_observations(total: usize, n_knots: usize, p: usize) -> Result<()> {
    let d = n_knots + 2;
    if total < d + p {
        return Err(Error::InsufficientData(format!(
            "{total} observations for {d} basis functions and {p} regressors"
        )));
    }
    Ok(())
}

/// Fits one chain: knots from the dataset's pooled times, initialization,
/// `n_iter` sweeps, then component alignment of the retained draws.
pub fn run_chain<R: Rng + ?Sized>(
    ds: &Dataset,
    cfg: &FpcaConfig,
    design: &ResponseDesign,
    rng: &mut R,
) -> Result<FpcaDraws> {
    cfg.validate("")?;
    ensure_enough_observations(ds.total_obs(), cfg.basis.n_knots, design.n_regressors())?;
    let basis = SplineBasis::from_times(&ds.pooled_times(), cfg.basis)?;
    run_chain_with_basis(ds, cfg, design, basis, rng)
}

pub(crate) fn run_chain_with_basis<R: Rng + ?Sized>(
    ds: &Dataset,
    cfg: &FpcaConfig,
    design: &ResponseDesign,
    basis: SplineBasis,
    rng: &mut R,
) -> Result<FpcaDraws> {
    let data = ChainData::new(ds, design, &basis)?;
    let sampler = Sampler::new(data, basis, cfg.clone());
    let mut state = sampler.init_state()?;

    let n = ds.n_subjects();
    let mut states = Vec::with_capacity(cfg.n_retained());
    let mut iterations = Vec::with_capacity(cfg.n_retained());
    let mut fitted_sum: Vec<DVector<f64>> = ds
        .subjects
        .iter()
        .map(|s| DVector::zeros(s.n_obs()))
        .collect();
    let mut accepted = [0usize; 4];
    for it in 0..cfg.n_iter {
        let acc = sampler.sweep(&mut state, rng).map_err(|e| Error::Chain {
            sweep: it,
            source: Box::new(e),
        })?;
        for (count, a) in accepted.iter_mut().zip(acc) {
            *count += a as usize;
        }
        if it >= cfg.n_burn && (it - cfg.n_burn + 1).is_multiple_of(cfg.thin) {
            for (sum, f) in fitted_sum.iter_mut().zip(sampler.fitted(&state)) {
                *sum += f;
            }
            states.push(state.clone());
            iterations.push(it);
        }
    }

    let mut warnings = Vec::new();
    if states.is_empty() {
        warnings.push(format!(
            "{}: no draws retained (n_iter = {}, n_burn = {})",
            design.label, cfg.n_iter, cfg.n_burn
        ));
    }
    let kept = states.len().max(1) as f64;
    let fitted_mean = fitted_sum
        .into_iter()
        .map(|v| (v / kept).iter().copied().collect())
        .collect();
    let iters = cfg.n_iter.max(1) as f64;
    let mut draws = FpcaDraws {
        label: design.label.clone(),
        config: cfg.clone(),
        basis: sampler.basis,
        states,
        iterations,
        subject_ids: ds.subjects.iter().map(|s| s.id.clone()).collect(),
        arms: ds.subjects.iter().map(|s| s.z).collect(),
        regressor_names: design.regressor_names.clone(),
        mean_regressors: design
            .regressors
            .iter()
            .map(|x| {
                let rows = x.nrows().max(1) as f64;
                DVector::from_fn(x.ncols(), |c, _| x.column(c).sum() / rows)
            })
            .collect(),
        fitted_mean,
        mh_acceptance: accepted.map(|a| a as f64 / iters),
        warnings,
    };
    debug_assert_eq!(draws.mean_regressors.len(), n);
    draws.align_components();
    Ok(draws)
}
