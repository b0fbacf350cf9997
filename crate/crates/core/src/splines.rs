//! Thin-plate spline basis `b(t) = (1, t, |t - k_1|^3, ..., |t - k_L|^3)`
//! on `[0, 1]`, its knot-distance roughness penalty, and the trapezoid Gram
//! matrix used for the `L2[0, 1]` inner products between basis expansions.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_N_KNOTS: usize = 10;
pub const DEFAULT_GRID_SIZE: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BasisSettings {
    /// Number of interior knots `L`.
    pub n_knots: usize,
    /// Quadrature grid size `G`.
    pub grid_size: usize,
}

impl Default for BasisSettings {
    fn default() -> Self {
        BasisSettings {
            n_knots: DEFAULT_N_KNOTS,
            grid_size: DEFAULT_GRID_SIZE,
        }
    }
}

/// Empirical quantile with linear interpolation between order statistics
/// (`h = (n - 1) p`). `sorted` must be sorted ascending and non-empty.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Knots at the `l / (L + 1)` quantiles of the pooled observation times.
pub fn place_knots(times: &[f64], n_knots: usize) -> Result<Vec<f64>> {
    if n_knots == 0 {
        return Err(Error::KnotDegeneracy(
            "at least one knot is required".into(),
        ));
    }
    let mut sorted: Vec<f64> = times.iter().copied().filter(|t| t.is_finite()).collect();
    sorted.sort_by(f64::total_cmp);
    let mut distinct = sorted.clone();
    distinct.dedup();
    if distinct.len() < n_knots {
        return Err(Error::KnotDegeneracy(format!(
            "{} distinct times for {n_knots} knots",
            distinct.len()
        )));
    }
    let knots: Vec<f64> = (1..=n_knots)
        .map(|l| quantile_sorted(&sorted, l as f64 / (n_knots + 1) as f64))
        .collect();
    check_knots(&knots)?;
    Ok(knots)
}

fn check_knots(knots: &[f64]) -> Result<()> {
    if knots.is_empty() {
        return Err(Error::KnotDegeneracy("empty knot vector".into()));
    }
    if let Some(w) = knots.windows(2).find(|w| !(w[1] > w[0])) {
        return Err(Error::KnotDegeneracy(format!(
            "knots collapse: {} followed by {}",
            w[0], w[1]
        )));
    }
    if knots.iter().any(|&k| !(k > 0.0 && k < 1.0)) {
        return Err(Error::KnotDegeneracy(
            "knots must lie inside the open unit interval".into(),
        ));
    }
    Ok(())
}

/// Roughness penalty with knot block `(k_l - k_l')^2` and zero rows and
/// columns for the constant and linear terms.
///
/// The matrix is symmetric but indefinite (a squared-distance matrix has a
/// single positive eigenvalue), so it cannot serve directly as a Gaussian
/// precision; see [`psd_part`].
pub fn penalty_matrix(knots: &[f64]) -> DMatrix<f64> {
    let dim = knots.len() + 2;
    DMatrix::from_fn(dim, dim, |a, b| {
        if a < 2 || b < 2 {
            0.0
        } else {
            let d = knots[a - 2] - knots[b - 2];
            d * d
        }
    })
}

/// Projection of a symmetric matrix onto the PSD cone: negative eigenvalues
/// are clamped to zero.
pub fn psd_part(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let clamped = eig.eigenvalues.map(|v| v.max(0.0));
    let mut out =
        &eig.eigenvectors * DMatrix::from_diagonal(&clamped) * eig.eigenvectors.transpose();
    // restore exact symmetry and exact zeros in the polynomial rows
    out = (&out + out.transpose()) * 0.5;
    for a in 0..out.nrows().min(2) {
        for b in 0..out.ncols() {
            out[(a, b)] = 0.0;
            out[(b, a)] = 0.0;
        }
    }
    out
}

/// Trapezoid weights for `g` equally spaced points on `[0, 1]`.
pub fn trapezoid_weights(g: usize) -> Vec<f64> {
    assert!(g >= 2, "trapezoid rule needs at least two points");
    let h = 1.0 / (g - 1) as f64;
    (0..g)
        .map(|i| if i == 0 || i == g - 1 { h / 2.0 } else { h })
        .collect()
}

pub fn uniform_grid(g: usize) -> Vec<f64> {
    assert!(g >= 2, "grid needs at least two points");
    (0..g).map(|i| i as f64 / (g - 1) as f64).collect()
}

#[derive(Debug, Clone)]
pub struct SplineBasis {
    pub knots: Vec<f64>,
    pub grid: Vec<f64>,
    /// `G x (L + 2)` basis evaluations on the grid.
    pub basis_on_grid: DMatrix<f64>,
    /// `B_G' W B_G` with trapezoid weights `W`.
    pub gram: DMatrix<f64>,
    /// Knot-distance penalty as defined by [`penalty_matrix`].
    pub penalty: DMatrix<f64>,
    /// PSD part of `penalty`, the prior precision used by the sampler.
    pub prior_penalty: DMatrix<f64>,
}

impl SplineBasis {
    pub fn new(knots: Vec<f64>, grid_size: usize) -> Result<Self> {
        check_knots(&knots)?;
        if grid_size < 2 {
            return Err(Error::Domain(format!("grid size {grid_size} < 2")));
        }
        let grid = uniform_grid(grid_size);
        let dim = knots.len() + 2;
        let basis_on_grid =
            DMatrix::from_fn(grid_size, dim, |g, c| basis_entry(&knots, grid[g], c));
        let weights = DVector::from_vec(trapezoid_weights(grid_size));
        let weighted = DMatrix::from_fn(grid_size, dim, |g, c| basis_on_grid[(g, c)] * weights[g]);
        let mut gram = basis_on_grid.transpose() * weighted;
        gram = (&gram + gram.transpose()) * 0.5;
        let penalty = penalty_matrix(&knots);
        let prior_penalty = psd_part(&penalty);
        Ok(SplineBasis {
            knots,
            grid,
            basis_on_grid,
            gram,
            penalty,
            prior_penalty,
        })
    }

    /// Knots from the pooled times, then the basis.
    pub fn from_times(times: &[f64], settings: BasisSettings) -> Result<Self> {
        let knots = place_knots(times, settings.n_knots)?;
        SplineBasis::new(knots, settings.grid_size)
    }

    /// `L + 2`.
    pub fn dim(&self) -> usize {
        self.knots.len() + 2
    }

    pub fn grid_size(&self) -> usize {
        self.grid.len()
    }

    pub fn eval(&self, t: f64) -> Result<DVector<f64>> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Domain(format!("t = {t} outside [0, 1]")));
        }
        Ok(self.eval_unchecked(t))
    }

    pub(crate) fn eval_unchecked(&self, t: f64) -> DVector<f64> {
        DVector::from_fn(self.dim(), |c, _| basis_entry(&self.knots, t, c))
    }

    /// Rows of basis evaluations at `times`.
    pub fn design(&self, times: &[f64]) -> Result<DMatrix<f64>> {
        if let Some(&t) = times.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(Error::Domain(format!("t = {t} outside [0, 1]")));
        }
        Ok(DMatrix::from_fn(times.len(), self.dim(), |j, c| {
            basis_entry(&self.knots, times[j], c)
        }))
    }

    /// Like [`design`](Self::design) without the domain check.
    pub fn design_unchecked(&self, times: &[f64]) -> DMatrix<f64> {
        DMatrix::from_fn(times.len(), self.dim(), |j, c| {
            basis_entry(&self.knots, times[j], c)
        })
    }

    /// Quadrature approximation of `int_0^1 (b'f)(b'g) dt = f' gram g`.
    pub fn grid_integral(&self, f: &DVector<f64>, g: &DVector<f64>) -> Result<f64> {
        for v in [f, g] {
            if v.len() != self.dim() {
                return Err(Error::Dimension {
                    expected: self.dim(),
                    got: v.len(),
                });
            }
        }
        Ok(f.dot(&(&self.gram * g)))
    }
}

#[inline]
fn basis_entry(knots: &[f64], t: f64, c: usize) -> f64 {
    match c {
        0 => 1.0,
        1 => t,
        _ => {
            let d = (t - knots[c - 2]).abs();
            d * d * d
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn knots_on_uniform_grid() {
        let times: Vec<f64> = (1..=100).map(|i| i as f64 / 100.0).collect();
        let knots = place_knots(&times, 3).unwrap();
        for (k, want) in knots.iter().zip([0.25, 0.5, 0.75]) {
            assert!((k - want).abs() < 0.01, "{k} vs {want}");
        }
    }

    #[test]
    fn single_knot_two_point_sample_is_midpoint() {
        // h = (2 - 1) * 0.5 = 0.5 -> 0.2 + 0.5 * (0.8 - 0.2)
        let knots = place_knots(&[0.2, 0.8], 1).unwrap();
        assert_abs_diff_eq!(knots[0], 0.5, epsilon = 1e-15);
    }

    #[test]
    fn identical_times_are_degenerate() {
        assert!(matches!(
            place_knots(&[0.3; 20], 3),
            Err(Error::KnotDegeneracy(_))
        ));
    }

    #[test]
    fn basis_at_zero() {
        let basis = SplineBasis::new(vec![0.25, 0.5, 0.75], 50).unwrap();
        let b = basis.eval(0.0).unwrap();
        assert_eq!(b.as_slice(), &[1.0, 0.0, 0.015625, 0.125, 0.421875]);
    }

    #[test]
    fn basis_vanishes_at_its_knot() {
        let basis = SplineBasis::new(vec![0.25, 0.5, 0.75], 50).unwrap();
        let b = basis.eval(0.5).unwrap();
        assert_eq!(b[3], 0.0);
        assert_eq!(b[1], 0.5);
    }

    #[test]
    fn symmetric_knots_reverse_under_reflection() {
        let basis = SplineBasis::new(vec![0.2, 0.5, 0.8], 50).unwrap();
        for &t in &[0.0, 0.13, 0.4, 0.77, 1.0] {
            let a = basis.eval(t).unwrap();
            let b = basis.eval(1.0 - t).unwrap();
            for l in 0..3 {
                assert_abs_diff_eq!(a[2 + l], b[2 + 2 - l], epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn eval_outside_unit_interval_is_domain_error() {
        let basis = SplineBasis::new(vec![0.5], 10).unwrap();
        assert!(matches!(basis.eval(1.5), Err(Error::Domain(_))));
        assert!(matches!(basis.eval(-0.1), Err(Error::Domain(_))));
    }

    #[test]
    fn penalty_two_knots() {
        let om = penalty_matrix(&[0.3, 0.7]);
        assert_eq!(om.shape(), (4, 4));
        for a in 0..4 {
            for b in 0..4 {
                let want = if (a, b) == (2, 3) || (a, b) == (3, 2) {
                    0.16
                } else {
                    0.0
                };
                assert_abs_diff_eq!(om[(a, b)], want, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn penalty_single_knot_is_zero() {
        assert!(penalty_matrix(&[0.4]).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn penalty_structure_for_distinct_knots() {
        let knots = vec![0.1, 0.35, 0.6, 0.9];
        let om = penalty_matrix(&knots);
        assert_eq!(om, om.transpose());
        for l in 0..om.nrows() {
            assert_eq!(om[(l, l)], 0.0);
        }
        let zero_rows = (0..om.nrows())
            .filter(|&r| om.row(r).iter().all(|&v| v == 0.0))
            .count();
        assert_eq!(zero_rows, 2);
    }

    #[test]
    fn prior_penalty_is_psd_with_zero_polynomial_block() {
        let basis = SplineBasis::new(vec![0.1, 0.3, 0.5, 0.7, 0.9], 50).unwrap();
        let eig = SymmetricEigen::new(basis.prior_penalty.clone());
        assert!(eig.eigenvalues.iter().all(|&v| v > -1e-12));
        // the raw penalty is indefinite
        let raw = SymmetricEigen::new(basis.penalty.clone());
        assert!(raw.eigenvalues.iter().any(|&v| v < -1e-6));
        for a in 0..2 {
            assert!(basis.prior_penalty.row(a).iter().all(|&v| v == 0.0));
        }
    }

    fn unit(dim: usize, i: usize) -> DVector<f64> {
        let mut v = DVector::zeros(dim);
        v[i] = 1.0;
        v
    }

    #[test]
    fn grid_integrals_of_polynomials() {
        let basis = SplineBasis::new(vec![0.25, 0.5, 0.75], 50).unwrap();
        let d = basis.dim();
        let one = unit(d, 0);
        let t = unit(d, 1);
        assert_abs_diff_eq!(
            basis.grid_integral(&one, &one).unwrap(),
            1.0,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(basis.grid_integral(&one, &t).unwrap(), 0.5, epsilon = 1e-12);
        // trapezoid error for t^2 is h^2 / 6 with h = 1/49
        let exact = 1.0 / 3.0;
        let got = basis.grid_integral(&t, &t).unwrap();
        assert!((got - exact).abs() < 1e-4, "{got}");
    }

    #[test]
    fn grid_integral_dimension_mismatch() {
        let basis = SplineBasis::new(vec![0.5], 10).unwrap();
        let f = DVector::zeros(3);
        let g = DVector::zeros(4);
        assert!(matches!(
            basis.grid_integral(&f, &g),
            Err(Error::Dimension {
                expected: 3,
                got: 4
            })
        ));
    }

    #[test]
    fn gram_converges_at_second_order() {
        let knots = vec![0.2, 0.45, 0.8];
        let coarse = SplineBasis::new(knots.clone(), 50).unwrap();
        let fine = SplineBasis::new(knots, 200).unwrap();
        // f(t) = 1 + t: int_0^1 f^2 = 7/3
        let mut f = DVector::zeros(5);
        f[0] = 1.0;
        f[1] = 1.0;
        let exact = 7.0 / 3.0;
        let e_coarse = (coarse.grid_integral(&f, &f).unwrap() - exact).abs();
        let e_fine = (fine.grid_integral(&f, &f).unwrap() - exact).abs();
        let h = 1.0 / 49.0;
        assert!(e_coarse / exact < h * h);
        assert!(e_fine < e_coarse / 10.0);
    }
}
