//! Gaussian draws in precision form, with optional linear equality
//! constraints.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Relative jitter levels tried, in order, when a Cholesky factorization
/// fails.
pub const JITTER_LEVELS: [f64; 5] = [1e-10, 1e-9, 1e-8, 1e-7, 1e-6];

/// Cholesky factor of a symmetric matrix, adding `jitter * mean|diag|` to the
/// diagonal on failure.
pub fn cholesky_jitter(q: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    if let Some(c) = Cholesky::new(q.clone()) {
        return Ok(c);
    }
    let n = q.nrows();
    let scale = (q.diagonal().iter().map(|v| v.abs()).sum::<f64>() / n.max(1) as f64).max(1e-300);
    let mut tried = Vec::with_capacity(JITTER_LEVELS.len());
    for &j in &JITTER_LEVELS {
        tried.push(j);
        let mut m = q.clone();
        for i in 0..n {
            m[(i, i)] += j * scale;
        }
        if let Some(c) = Cholesky::new(m) {
            return Ok(c);
        }
    }
    Err(Error::numerical(
        format!("{n}x{n} matrix not positive definite"),
        tried,
    ))
}

pub fn standard_normal_vector<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample(StandardNormal))
}

/// Draw from `N(Q^-1 l, Q^-1)`.
pub fn gaussian_draw<R: Rng + ?Sized>(
    q: &DMatrix<f64>,
    l: &DVector<f64>,
    rng: &mut R,
) -> Result<DVector<f64>> {
    let chol = cholesky_jitter(q)?;
    Ok(draw_with_factor(&chol, l, rng))
}

fn draw_with_factor<R: Rng + ?Sized>(
    chol: &Cholesky<f64, Dyn>,
    l: &DVector<f64>,
    rng: &mut R,
) -> DVector<f64> {
    let mean = chol.solve(l);
    let z = standard_normal_vector(l.len(), rng);
    let noise = chol
        .l()
        .transpose()
        .solve_upper_triangular(&z)
        .expect("triangular factor has a nonzero diagonal");
    mean + noise
}

/// Draw from `N(Q^-1 l, Q^-1)` conditioned on `C x = 0`, by drawing the
/// unconstrained vector and correcting it with
/// `x - Q^-1 C' (C Q^-1 C')^-1 C x`.
///
/// `constraints` has one row per constraint and may have zero rows.
pub fn constrained_gaussian_draw<R: Rng + ?Sized>(
    q: &DMatrix<f64>,
    l: &DVector<f64>,
    constraints: &DMatrix<f64>,
    rng: &mut R,
) -> Result<DVector<f64>> {
    let n = q.nrows();
    if q.ncols() != n {
        return Err(Error::Dimension {
            expected: n,
            got: q.ncols(),
        });
    }
    if l.len() != n {
        return Err(Error::Dimension {
            expected: n,
            got: l.len(),
        });
    }
    let chol = cholesky_jitter(q)?;
    let mut x = draw_with_factor(&chol, l, rng);
    if constraints.nrows() == 0 {
        return Ok(x);
    }
    if constraints.ncols() != n {
        return Err(Error::Dimension {
            expected: n,
            got: constraints.ncols(),
        });
    }
    let ct = constraints.transpose();
    let v = chol.solve(&ct);
    let w = constraints * &v;
    let w = (&w + w.transpose()) * 0.5;
    let wchol = cholesky_jitter(&w)?;
    // a second pass removes the rounding left by the first correction
    for _ in 0..2 {
        let cx = constraints * &x;
        x -= &v * wchol.solve(&cx);
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn unconstrained_identity_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let d = 3;
        let q = DMatrix::identity(d, d);
        let l = DVector::zeros(d);
        let empty = DMatrix::zeros(0, d);
        let n = 10_000;
        let mut cov = DMatrix::<f64>::zeros(d, d);
        let mut mean = DVector::<f64>::zeros(d);
        let draws: Vec<_> = (0..n)
            .map(|_| constrained_gaussian_draw(&q, &l, &empty, &mut rng).unwrap())
            .collect();
        for x in &draws {
            mean += x;
        }
        mean /= n as f64;
        for x in &draws {
            let c = x - &mean;
            cov += &c * c.transpose();
        }
        cov /= (n - 1) as f64;
        for a in 0..d {
            for b in 0..d {
                let want = if a == b { 1.0 } else { 0.0 };
                assert!(
                    (cov[(a, b)] - want).abs() < 0.05,
                    "cov[{a},{b}] = {}",
                    cov[(a, b)]
                );
            }
        }
    }

    #[test]
    fn first_coordinate_selector_pins_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = DMatrix::identity(4, 4);
        let l = DVector::from_vec(vec![1.0, -2.0, 0.5, 3.0]);
        let mut c = DMatrix::zeros(1, 4);
        c[(0, 0)] = 1.0;
        for _ in 0..100 {
            let x = constrained_gaussian_draw(&q, &l, &c, &mut rng).unwrap();
            assert_eq!(x[0], 0.0);
        }
    }

    #[test]
    fn full_constraint_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = DMatrix::identity(3, 3);
        let l = DVector::from_vec(vec![4.0, -1.0, 2.5]);
        let c = DMatrix::identity(3, 3);
        let x = constrained_gaussian_draw(&q, &l, &c, &mut rng).unwrap();
        assert!(x.amax() < 1e-12, "{x}");
    }

    #[test]
    fn general_constraints_are_satisfied() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = DMatrix::from_fn(6, 6, |i, j| ((i * 7 + j * 3) % 5) as f64 - 2.0);
        let q = &a * a.transpose() + DMatrix::identity(6, 6) * 0.5;
        let l = DVector::from_fn(6, |i, _| i as f64 - 2.5);
        let c = DMatrix::from_fn(2, 6, |i, j| {
            ((i + 1) * (j + 2)) as f64 * 0.1 + (i == j) as u8 as f64
        });
        for _ in 0..50 {
            let x = constrained_gaussian_draw(&q, &l, &c, &mut rng).unwrap();
            assert!((&c * &x).amax() <= 1e-8);
        }
    }

    #[test]
    fn not_positive_definite_reports_jitter() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        let l = DVector::zeros(2);
        match gaussian_draw(&q, &l, &mut rng) {
            Err(Error::Numerical { jitter, .. }) => assert_eq!(jitter, JITTER_LEVELS.to_vec()),
            other => panic!("expected numerical failure, got {other:?}"),
        }
    }
}
