//! Dense Cholesky helpers shared by the conditionals and the evidence code.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;

use crate::dist::std_normal;
use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Cholesky factorisation with a single jittered retry of
/// `1e-10 * mean(diag)` added to the diagonal.
pub fn cholesky(mut m: DMatrix<f64>, context: &'static str) -> Result<Cholesky<f64, Dyn>> {
    let n = m.nrows();
    if n == 0 {
        return Ok(Cholesky::new(m).expect("empty matrix factorises"));
    }
    let jitter = 1e-10 * m.diagonal().mean().abs();
    match Cholesky::new(m.clone()) {
        Some(c) => Ok(c),
        None => {
            for i in 0..n {
                m[(i, i)] += jitter;
            }
            Cholesky::new(m).ok_or(Error::NotPositiveDefinite(context))
        }
    }
}

pub fn ln_det(chol: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

/// Gaussian `N(mean, scale * precision^{-1})` held through the Cholesky factor
/// of its (unscaled) precision matrix.
#[derive(Debug, Clone)]
pub struct PrecisionGaussian {
    pub mean: DVector<f64>,
    pub scale: f64,
    chol: Cholesky<f64, Dyn>,
}

impl PrecisionGaussian {
    /// Builds the Gaussian whose precision is `precision / scale` and whose
    /// mean solves `precision * mean = linear`.
    pub fn from_canonical(
        precision: DMatrix<f64>,
        linear: DVector<f64>,
        scale: f64,
        context: &'static str,
    ) -> Result<Self> {
        let chol = cholesky(precision, context)?;
        let mean = chol.solve(&linear);
        Ok(Self { mean, scale, chol })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Covariance matrix `scale * precision^{-1}`.
    pub fn covariance(&self) -> DMatrix<f64> {
        self.chol.inverse() * self.scale
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let n = self.dim();
        let z = DVector::from_fn(n, |_, _| std_normal(rng));
        let l = self.chol.l_dirty();
        let mut x = z;
        // x = L^{-T} z
        let solved = l
            .tr_solve_lower_triangular(&x)
            .expect("triangular factor has a nonzero diagonal");
        x = solved * self.scale.sqrt();
        x + &self.mean
    }

    pub fn ln_pdf(&self, x: &DVector<f64>) -> f64 {
        let n = self.dim() as f64;
        let d = x - &self.mean;
        // d' P d = |L' d|^2
        let ltd = self.chol.l().tr_mul(&d);
        -0.5 * (n * (LN_2PI + self.scale.ln()) - ln_det(&self.chol) + ltd.norm_squared() / self.scale)
    }
}
