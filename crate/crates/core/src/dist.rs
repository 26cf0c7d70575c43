//! Log densities, samplers and special functions for the conjugate families
//! used throughout the model.

use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use statrs::function::gamma::ln_gamma;

pub use statrs::function::beta::ln_beta;
pub use statrs::function::gamma::digamma;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

pub fn ln_normal(x: f64, mean: f64, var: f64) -> f64 {
    let d = x - mean;
    -0.5 * (LN_2PI + var.ln() + d * d / var)
}

/// Inverse-gamma log density with shape `a` and scale `b`.
pub fn ln_inv_gamma(x: f64, a: f64, b: f64) -> f64 {
    a * b.ln() - ln_gamma(a) - (a + 1.0) * x.ln() - b / x
}

pub fn ln_beta_pdf(x: f64, a: f64, b: f64) -> f64 {
    (a - 1.0) * x.ln() + (b - 1.0) * (1.0 - x).ln() - ln_beta(a, b)
}

pub fn ln_bernoulli(on: bool, p: f64) -> f64 {
    if on {
        p.ln()
    } else {
        (1.0 - p).ln()
    }
}

pub fn ln_gamma_fn(x: f64) -> f64 {
    ln_gamma(x)
}

/// Trigamma via upward recurrence and the asymptotic expansion.
pub fn trigamma(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < 10.0 {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let x2 = 1.0 / (x * x);
    let tail = x2
        * (1.0 / 6.0
            - x2 * (1.0 / 30.0 - x2 * (1.0 / 42.0 - x2 * (1.0 / 30.0 - x2 * (5.0 / 66.0 - x2 * 691.0 / 2730.0)))));
    acc + 1.0 / x + x2 / 2.0 + tail / x
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn log_mean_exp(xs: &[f64]) -> f64 {
    log_sum_exp(xs) - (xs.len() as f64).ln()
}

/// Unbiased sample mean and variance in one pass (Welford).
pub fn mean_var(xs: &[f64]) -> (f64, f64) {
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for (i, &x) in xs.iter().enumerate() {
        let d = x - mean;
        mean += d / (i + 1) as f64;
        m2 += d * (x - mean);
    }
    let n = xs.len();
    let var = if n > 1 { m2 / (n - 1) as f64 } else { 0.0 };
    (mean, var)
}

pub fn std_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// Inverse-gamma distribution, parameterised by shape and scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InvGamma {
    pub shape: f64,
    pub scale: f64,
}

impl InvGamma {
    pub fn new(shape: f64, scale: f64) -> Self {
        debug_assert!(shape > 0.0 && scale > 0.0, "IG({shape}, {scale})");
        Self { shape, scale }
    }

    pub fn ln_pdf(&self, x: f64) -> f64 {
        ln_inv_gamma(x, self.shape, self.scale)
    }

    pub fn mean(&self) -> f64 {
        self.scale / (self.shape - 1.0)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let g: f64 = Gamma::new(self.shape, 1.0)
            .expect("gamma shape must be positive")
            .sample(rng);
        self.scale / g
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BetaDist {
    pub a: f64,
    pub b: f64,
}

impl BetaDist {
    pub fn new(a: f64, b: f64) -> Self {
        Self { a, b }
    }

    pub fn ln_pdf(&self, x: f64) -> f64 {
        ln_beta_pdf(x, self.a, self.b)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        // Two gammas rather than rand_distr::Beta so very small shapes stay stable.
        let x: f64 = Gamma::new(self.a, 1.0).expect("beta shape").sample(rng);
        let y: f64 = Gamma::new(self.b, 1.0).expect("beta shape").sample(rng);
        let p = x / (x + y);
        if p.is_nan() {
            if self.a >= self.b {
                1.0 - f64::EPSILON
            } else {
                f64::EPSILON
            }
        } else {
            p.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normal1 {
    pub mean: f64,
    pub var: f64,
}

impl Normal1 {
    pub fn new(mean: f64, var: f64) -> Self {
        Self { mean, var }
    }

    pub fn ln_pdf(&self, x: f64) -> f64 {
        ln_normal(x, self.mean, self.var)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        self.mean + self.var.sqrt() * std_normal(rng)
    }
}
