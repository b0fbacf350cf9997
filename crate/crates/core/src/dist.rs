//! Scalar draws used by the sampler: gamma in shape/rate form and a gamma
//! truncated to a bounded interval.

use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use statrs::distribution::{ContinuousCDF, Gamma as GammaCdf};

/// `Ga(shape, rate)` draw.
pub fn gamma_rate<R: Rng + ?Sized>(shape: f64, rate: f64, rng: &mut R) -> f64 {
    debug_assert!(shape > 0.0 && rate > 0.0, "Ga({shape}, {rate})");
    Gamma::new(shape, 1.0 / rate)
        .expect("positive gamma parameters")
        .sample(rng)
}

pub fn normal<R: Rng + ?Sized>(mean: f64, sd: f64, rng: &mut R) -> f64 {
    let z: f64 = rng.sample(StandardNormal);
    mean + sd * z
}

/// `Ga(shape, rate)` restricted to `[lo, hi]`, `0 <= lo < hi`, `rate >= 0`.
///
/// Inverse-CDF on the interval when its mass is representable; rejection
/// samplers otherwise (power-law proposal when the exponential factor is
/// nearly flat on the interval, shifted-exponential proposal in the right
/// tail).
pub fn truncated_gamma<R: Rng + ?Sized>(
    shape: f64,
    rate: f64,
    lo: f64,
    hi: f64,
    rng: &mut R,
) -> f64 {
    assert!(shape > 0.0, "shape {shape}");
    assert!(lo >= 0.0 && hi > lo, "interval [{lo}, {hi}]");
    let rate = rate.max(0.0);

    if rate * (hi - lo) <= 1.0 {
        return power_law_rejection(shape, rate, lo, hi, rng);
    }

    let dist = GammaCdf::new(shape, rate).expect("positive gamma parameters");
    let f_lo = dist.cdf(lo);
    let f_hi = if hi.is_finite() { dist.cdf(hi) } else { 1.0 };
    let mass = f_hi - f_lo;
    if mass > 1e-8 && f_lo < 1.0 - 1e-8 {
        let u = f_lo + rng.random::<f64>() * mass;
        let x = dist.inverse_cdf(u);
        if x.is_finite() {
            return x.clamp(lo, hi);
        }
    }
    let mode = if shape > 1.0 {
        (shape - 1.0) / rate
    } else {
        0.0
    };
    if lo >= mode && lo > 0.0 {
        right_tail_rejection(shape, rate, lo, hi, rng)
    } else {
        left_tail_rejection(shape, rate, lo, hi, rng)
    }
}

/// Proposal density proportional to `x^(shape-1)` on `[lo, hi]`, accepted
/// with probability `exp(-rate (x - lo))`.
fn power_law_rejection<R: Rng + ?Sized>(
    shape: f64,
    rate: f64,
    lo: f64,
    hi: f64,
    rng: &mut R,
) -> f64 {
    // x = hi * (r + u (1 - r))^(1/shape), r = (lo/hi)^shape, stays finite
    let r = (lo / hi).powf(shape);
    loop {
        let u: f64 = rng.random();
        let x = (hi * (r + u * (1.0 - r)).powf(1.0 / shape)).clamp(lo, hi);
        if rng.random::<f64>().ln() <= -rate * (x - lo) {
            return x;
        }
    }
}

/// Shifted exponential proposal on `[lo, inf)` for the region right of the
/// mode, rejecting draws above `hi`.
fn right_tail_rejection<R: Rng + ?Sized>(
    shape: f64,
    rate: f64,
    lo: f64,
    hi: f64,
    rng: &mut R,
) -> f64 {
    let prop_rate = if shape > 1.0 {
        (rate - (shape - 1.0) / lo).max(rate * 1e-3)
    } else {
        rate
    };
    loop {
        let e = -rng.random::<f64>().ln() / prop_rate;
        let x = lo + e;
        if x > hi {
            continue;
        }
        // target / proposal, normalized to 1 at x = lo
        let log_ratio = (shape - 1.0) * (x / lo).ln() - (rate - prop_rate) * e;
        if rng.random::<f64>().ln() <= log_ratio {
            return x;
        }
    }
}

/// Interval left of the mode (`shape > 1`): the log density is concave and
/// increasing, so its tangent at `hi` bounds it and `hi - Exp(slope)` is a
/// valid envelope.
fn left_tail_rejection<R: Rng + ?Sized>(
    shape: f64,
    rate: f64,
    lo: f64,
    hi: f64,
    rng: &mut R,
) -> f64 {
    let slope = ((shape - 1.0) / hi - rate).max(1e-12);
    loop {
        let e = -rng.random::<f64>().ln() / slope;
        let x = hi - e;
        if x < lo {
            continue;
        }
        let log_ratio = (shape - 1.0) * (x / hi).ln() + rate * e - slope * (x - hi);
        if rng.random::<f64>().ln() <= log_ratio {
            return x;
        }
    }
}
