//! 1-D discrete Fourier transforms of arbitrary length.
//!
//! Plans come from `rustfft` (mixed-radix with Bluestein fallback for awkward
//! prime factors) and are cached per thread, so repeated transforms of the
//! same sketch width only pay for planning once.

use std::cell::RefCell;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

/// Complex vector with interleaved `(re, im)` storage.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexVector {
    values: Vec<Complex64>,
}

impl ComplexVector {
    pub fn from_real(re: &[f64]) -> Self {
        ComplexVector {
            values: re.iter().map(|&r| Complex64::new(r, 0.0)).collect(),
        }
    }

    pub fn from_parts(re: &[f64], im: &[f64]) -> Self {
        assert_eq!(re.len(), im.len());
        ComplexVector {
            values: re
                .iter()
                .zip(im)
                .map(|(&r, &i)| Complex64::new(r, i))
                .collect(),
        }
    }

    pub fn from_complex(values: Vec<Complex64>) -> Self {
        ComplexVector { values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[Complex64] {
        &self.values
    }

    pub fn re(&self) -> Vec<f64> {
        self.values.iter().map(|c| c.re).collect()
    }

    pub fn im(&self) -> Vec<f64> {
        self.values.iter().map(|c| c.im).collect()
    }

    pub fn max_abs_im(&self) -> f64 {
        self.values.iter().map(|c| c.im.abs()).fold(0.0, f64::max)
    }

    /// Pointwise product.
    pub fn mul(&self, other: &ComplexVector) -> ComplexVector {
        ComplexVector {
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a * b)
                .collect(),
        }
    }

    /// Pointwise `self · conj(other)`.
    pub fn mul_conj(&self, other: &ComplexVector) -> ComplexVector {
        ComplexVector {
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a * b.conj())
                .collect(),
        }
    }
}

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn transform(x: &ComplexVector, inverse: bool) -> Result<ComplexVector> {
    let n = x.len();
    if n == 0 {
        return Err(Error::Empty(if inverse { "ifft1" } else { "fft1" }));
    }
    let mut buf = x.values.clone();
    PLANNER.with(|p| {
        let mut planner = p.borrow_mut();
        let plan = if inverse {
            planner.plan_fft_inverse(n)
        } else {
            planner.plan_fft_forward(n)
        };
        plan.process(&mut buf);
    });
    if inverse {
        let scale = 1.0 / n as f64;
        for v in buf.iter_mut() {
            *v *= scale;
        }
    }
    Ok(ComplexVector { values: buf })
}

/// Forward DFT, `X[k] = Σ x[t]·exp(-2πi·tk/n)`, unnormalized.
pub fn fft1(x: &ComplexVector) -> Result<ComplexVector> {
    transform(x, false)
}

/// Inverse DFT, normalized by `1/n` so that `ifft1(fft1(x)) == x`.
pub fn ifft1(x: &ComplexVector) -> Result<ComplexVector> {
    transform(x, true)
}
