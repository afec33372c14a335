//! Scalar abstraction and the handful of normal-distribution primitives the
//! samplers are built on.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FloatConst, FromPrimitive, NumAssign, ToPrimitive};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Open01};
use libm::erfc;
use statrs::function::erf::erfc_inv;

/// Floating-point scalar the model code is written against.
///
/// Implemented for `f32` and `f64`. Special functions are evaluated in `f64`
/// and rounded back, so `f32` trades precision for memory only.
pub trait Real:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    fn of(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl<T> Real for T
where
    T: Float
        + FloatConst
        + FromPrimitive
        + ToPrimitive
        + NumAssign
        + Sum
        + Default
        + Debug
        + Display
        + Send
        + Sync
        + 'static,
{
    #[inline]
    fn of(x: f64) -> Self {
        T::from_f64(x).expect("f64 is representable in every Real")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("Real converts to f64")
    }
}

/// RNG used by every sampler; one independent stream per chain.
pub type ChainRng = ChaCha8Rng;

/// Deterministic stream `stream` of the generator family keyed by `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChainRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Standard normal CDF.
pub fn norm_cdf<T: Real>(x: T) -> T {
    T::of(norm_cdf_f64(x.as_f64()))
}

pub(crate) fn norm_cdf_f64(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Standard normal quantile. Returns ±∞ at the endpoints.
pub fn norm_quantile<T: Real>(p: T) -> T {
    T::of(norm_quantile_f64(p.as_f64()))
}

pub(crate) fn norm_quantile_f64(p: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    let x = -std::f64::consts::SQRT_2 * erfc_inv(2.0 * p);
    // One Newton step against the CDF sharpens erfc_inv to near machine precision.
    let density = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    if density > 0.0 {
        x - (norm_cdf_f64(x) - p) / density
    } else {
        x
    }
}

/// Draw from a standard normal truncated to `[lower, ∞)`.
///
/// Inverse-CDF on the upper tail while the bound is moderate; past 5 the
/// tail mass underflows that route, so Robert's exponential rejection
/// sampler takes over.
pub fn std_normal_above<R: Rng + ?Sized>(rng: &mut R, lower: f64) -> f64 {
    if lower <= 5.0 {
        let tail = norm_cdf_f64(-lower);
        let u: f64 = rng.sample(Open01);
        let x = -norm_quantile_f64(tail * u);
        // Rounding in the quantile can leave x a hair below the bound.
        x.max(lower)
    } else {
        let rate = 0.5 * (lower + (lower * lower + 4.0).sqrt());
        let exp = Exp::new(rate).expect("positive rate");
        loop {
            let x = lower + exp.sample(rng);
            let u: f64 = rng.sample(Open01);
            if u.ln() <= -0.5 * (x - rate) * (x - rate) {
                return x;
            }
        }
    }
}

/// Latent draw for probit augmentation: `Normal(mean, 1)` truncated to
/// `(0, ∞)` when `positive`, otherwise to `(-∞, 0]`.
pub fn truncated_latent<T: Real, R: Rng + ?Sized>(rng: &mut R, mean: T, positive: bool) -> T {
    let m = mean.as_f64();
    let z = if positive {
        let z = m + std_normal_above(rng, -m);
        if z > 0.0 {
            z
        } else {
            f64::MIN_POSITIVE
        }
    } else {
        (m - std_normal_above(rng, m)).min(0.0)
    };
    T::of(z)
}

/// Expected value of `Normal(mean, 1)` truncated to `(0, ∞)`.
pub fn truncated_mean_positive(mean: f64) -> f64 {
    let pdf = (-0.5 * mean * mean).exp() / (2.0 * std::f64::consts::PI).sqrt();
    mean + pdf / norm_cdf_f64(mean)
}

pub fn mean<T: Real>(xs: &[T]) -> T {
    if xs.is_empty() {
        return T::nan();
    }
    xs.iter().copied().sum::<T>() / T::of(xs.len() as f64)
}

/// Sample variance with `n - 1` denominator.
pub fn sample_variance<T: Real>(xs: &[T]) -> T {
    if xs.len() < 2 {
        return T::nan();
    }
    let m = mean(xs);
    xs.iter().map(|&x| (x - m) * (x - m)).sum::<T>() / T::of((xs.len() - 1) as f64)
}

/// Linear-interpolation quantile of already sorted data (R type 7).
pub fn quantile_sorted<T: Real>(sorted: &[T], prob: f64) -> T {
    assert!(!sorted.is_empty(), "quantile of empty sample");
    let h = (sorted.len() - 1) as f64 * prob.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    let frac = T::of(h - lo as f64);
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Squared Pearson correlation; zero when either side is constant.
pub fn pearson_r2<T: Real>(a: &[T], b: &[T]) -> T {
    assert_eq!(a.len(), b.len());
    let ma = mean(a);
    let mb = mean(b);
    let (mut sab, mut saa, mut sbb) = (T::zero(), T::zero(), T::zero());
    for (&x, &y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa <= T::zero() || sbb <= T::zero() {
        return T::zero();
    }
    (sab * sab) / (saa * sbb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn cdf_and_quantile_agree() {
        for &p in &[1e-12, 1e-6, 0.01, 0.3, 0.5, 0.9, 0.999_999] {
            assert_abs_diff_eq!(norm_cdf(norm_quantile(p)), p, epsilon = 1e-12 * p.max(1e-3) + 1e-15);
        }
        assert_abs_diff_eq!(norm_cdf(1.2816_f64), 0.90, epsilon = 1e-4);
        assert_abs_diff_eq!(norm_quantile(0.3_f64), -0.524_400_512_708_041, epsilon = 1e-12);
    }

    #[test]
    fn truncated_positive_mean_at_zero() {
        let mut rng = stream_rng(11, 0);
        let n = 200_000;
        let s: f64 = (0..n).map(|_| truncated_latent(&mut rng, 0.0_f64, true)).sum();
        let expected = (2.0 / std::f64::consts::PI).sqrt();
        assert_abs_diff_eq!(truncated_mean_positive(0.0), expected, epsilon = 1e-15);
        assert_abs_diff_eq!(s / n as f64, expected, epsilon = 0.01);
    }

    #[test]
    fn truncated_draws_respect_sign_and_moments() {
        let mut rng = stream_rng(12, 0);
        for &m in &[-8.0, -5.5, -2.0, 0.3, 4.0, 9.0] {
            let n = 100_000;
            let mut s = 0.0;
            for _ in 0..n {
                let z = truncated_latent(&mut rng, m, true);
                assert!(z > 0.0);
                s += z;
                let z0 = truncated_latent(&mut rng, m, false);
                assert!(z0 <= 0.0);
            }
            let analytic = truncated_mean_positive(m);
            assert!((s / n as f64 - analytic).abs() < 0.01, "mean {m}: {} vs {analytic}", s / n as f64);
        }
    }

    #[test]
    fn quantile_type7() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile_sorted(&xs, 0.0), 1.0);
        assert_eq!(quantile_sorted(&xs, 1.0), 4.0);
        assert_abs_diff_eq!(quantile_sorted(&xs, 0.5), 2.5);
    }

    #[test]
    fn f32_special_functions() {
        let p: f32 = norm_cdf(0.0_f32);
        assert_eq!(p, 0.5);
        assert!((norm_quantile(0.975_f32) - 1.959_964).abs() < 1e-5);
    }
}
