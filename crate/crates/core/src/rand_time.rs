//! Random streams and the gamma switching-time law.
//!
//! A [`RngStream`] is addressed by `(seed, path)`. Children are derived by
//! hashing the parent key with the child index, and the resulting 256-bit key
//! seeds a ChaCha8 generator, so every node of the recursion owns an
//! independent counter-based stream regardless of which thread evaluates it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Open01, StandardNormal};
use statrs::function::gamma::ln_gamma;

use crate::error::{invalid, Result};

/// Gamma law with shape `alpha` in (0, 1] and rate `lambda` (1/time).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeLaw {
    alpha: f64,
    lambda: f64,
    ln_norm: f64,
}

impl TimeLaw {
    pub fn new(alpha: f64, lambda: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(invalid(format!("gamma shape must lie in (0, 1], got {alpha}")));
        }
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(invalid(format!("gamma rate must be positive, got {lambda}")));
        }
        Ok(Self {
            alpha,
            lambda,
            ln_norm: alpha * lambda.ln() - ln_gamma(alpha),
        })
    }

    /// Exponential law, the `alpha = 1` limit used by all benchmarks.
    pub fn exponential(lambda: f64) -> Result<Self> {
        Self::new(1.0, lambda)
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn mean(&self) -> f64 {
        self.alpha / self.lambda
    }

    /// Probability density. Returns `f64::INFINITY` at `x = 0` when
    /// `alpha < 1`. Panics on negative `x`.
    pub fn density(&self, x: f64) -> f64 {
        assert!(x >= 0.0, "gamma density evaluated at negative time {x}");
        if self.alpha == 1.0 {
            return self.lambda * (-self.lambda * x).exp();
        }
        if x == 0.0 {
            return f64::INFINITY;
        }
        (self.ln_norm + (self.alpha - 1.0) * x.ln() - self.lambda * x).exp()
    }

    /// Survival function `1 - gamma(alpha, lambda x) / Gamma(alpha)`.
    pub fn survival(&self, x: f64) -> f64 {
        assert!(x >= 0.0, "gamma survival evaluated at negative time {x}");
        if self.alpha == 1.0 {
            return (-self.lambda * x).exp();
        }
        upper_regularized_gamma(self.alpha, self.lambda * x)
    }

    pub fn cdf(&self, x: f64) -> f64 {
        assert!(x >= 0.0, "gamma cdf evaluated at negative time {x}");
        if self.alpha == 1.0 {
            return -(-self.lambda * x).exp_m1();
        }
        lower_regularized_gamma(self.alpha, self.lambda * x)
    }

    /// Inverse CDF of the exponential law. Only defined for `alpha = 1`.
    pub fn exponential_quantile(&self, u: f64) -> f64 {
        assert!(self.alpha == 1.0, "closed-form quantile needs alpha = 1");
        assert!((0.0..1.0).contains(&u), "quantile argument must lie in [0, 1)");
        -(-u).ln_1p() / self.lambda
    }

    /// Draws a strictly positive switching increment.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.alpha == 1.0 {
            let u: f64 = rng.sample(Open01);
            return self.exponential_quantile(u);
        }
        let gamma = Gamma::new(self.alpha, 1.0 / self.lambda).expect("validated parameters");
        loop {
            let x: f64 = gamma.sample(rng);
            if x > 0.0 {
                return x;
            }
        }
    }
}

const GAMMA_EPS: f64 = 1e-16;
const GAMMA_MAX_ITER: usize = 10_000;

/// Regularized lower incomplete gamma `P(a, x)`.
pub fn lower_regularized_gamma(a: f64, x: f64) -> f64 {
    assert!(a > 0.0 && x >= 0.0);
    if x == 0.0 {
        return 0.0;
    }
    if x < a + 1.0 {
        gamma_series(a, x)
    } else {
        1.0 - gamma_continued_fraction(a, x)
    }
}

/// Regularized upper incomplete gamma `Q(a, x)`.
pub fn upper_regularized_gamma(a: f64, x: f64) -> f64 {
    assert!(a > 0.0 && x >= 0.0);
    if x == 0.0 {
        return 1.0;
    }
    if x < a + 1.0 {
        1.0 - gamma_series(a, x)
    } else {
        gamma_continued_fraction(a, x)
    }
}

fn gamma_prefactor(a: f64, x: f64) -> f64 {
    (a * x.ln() - x - ln_gamma(a)).exp()
}

// P(a, x) by its power series; converges fast for x < a + 1.
fn gamma_series(a: f64, x: f64) -> f64 {
    let mut ap = a;
    let mut term = 1.0 / a;
    let mut sum = term;
    for _ in 0..GAMMA_MAX_ITER {
        ap += 1.0;
        term *= x / ap;
        sum += term;
        if term.abs() < sum.abs() * GAMMA_EPS {
            break;
        }
    }
    sum * gamma_prefactor(a, x)
}

// Q(a, x) by the modified Lentz continued fraction; used for x >= a + 1.
fn gamma_continued_fraction(a: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let mut b = x + 1.0 - a;
    let mut c = 1.0 / TINY;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..GAMMA_MAX_ITER {
        let an = -(i as f64) * (i as f64 - a);
        b += 2.0;
        d = an * d + b;
        if d.abs() < TINY {
            d = TINY;
        }
        c = b + an / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < GAMMA_EPS {
            break;
        }
    }
    gamma_prefactor(a, x) * h
}

#[inline]
fn fmix64(mut k: u64) -> u64 {
    k ^= k >> 33;
    k = k.wrapping_mul(0xff51_afd7_ed55_8ccd);
    k ^= k >> 33;
    k = k.wrapping_mul(0xc4ce_b9fe_1a85_ec53);
    k ^= k >> 33;
    k
}

/// Splittable stream identified by a seed and a path of child indices.
///
/// The path is kept as a 128-bit digest plus its length; two different paths
/// from the same seed map to different ChaCha keys.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RngStream {
    seed: u64,
    digest: [u64; 2],
    depth: u32,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            digest: [0x6a09_e667_f3bc_c908, 0xbb67_ae85_84ca_a73b],
            depth: 0,
        }
    }

    pub fn from_path(seed: u64, path: &[u64]) -> Self {
        path.iter().fold(Self::new(seed), |s, &i| s.child(i))
    }

    pub fn child(&self, index: u64) -> Self {
        let h = fmix64(index.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ u64::from(self.depth + 1));
        let d0 = fmix64(self.digest[0] ^ h).wrapping_add(self.digest[1]);
        let d1 = fmix64(self.digest[1].rotate_left(23) ^ h.wrapping_mul(0xd6e8_feb8_6659_fd93)) ^ d0;
        Self {
            seed: self.seed,
            digest: [d0, d1],
            depth: self.depth + 1,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn depth(&self) -> u32 {
        self.depth
    }

    /// Fresh generator positioned at draw index 0 of this stream.
    pub fn rng(&self) -> ChaCha8Rng {
        let mut key = [0u8; 32];
        key[0..8].copy_from_slice(&self.seed.to_le_bytes());
        key[8..16].copy_from_slice(&self.digest[0].to_le_bytes());
        key[16..24].copy_from_slice(&self.digest[1].to_le_bytes());
        key[24..28].copy_from_slice(&self.depth.to_le_bytes());
        ChaCha8Rng::from_seed(key)
    }
}

/// Fills `out` with independent standard normal draws.
pub fn fill_gaussian<R: Rng + ?Sized>(rng: &mut R, out: &mut [f64]) {
    for v in out.iter_mut() {
        *v = rng.sample(StandardNormal);
    }
}

pub fn sample_gaussian_vector<R: Rng + ?Sized>(rng: &mut R, d: usize) -> Vec<f64> {
    assert!(d >= 1, "gaussian vector needs d >= 1");
    let mut g = vec![0.0; d];
    fill_gaussian(rng, &mut g);
    g
}
