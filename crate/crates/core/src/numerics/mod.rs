//! Tensor arithmetic, deterministic randomness, FFT and reverse-mode
//! differentiation shared by every other module.

mod fft;
mod gradcheck;
mod rng;
mod tape;
mod tensor;

pub use fft::{fft1, ifft1, ComplexVector};
pub use gradcheck::grad_check;
pub use rng::{streams, Rng};
pub use tape::{Function, Grads, ParamId, ParamStore, Tape, Var, CE_FLOOR};
pub use tensor::{relu, sigmoid, softmax, tanh, ElementwiseOp, Tensor};

/// Scalar precision used for parameter storage during training.
///
/// Arithmetic is always carried out in `f64`; in `F32` mode parameters are
/// rounded to single precision after every optimizer step, which is how they
/// are stored in checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScalarMode {
    #[default]
    F64,
    F32,
}

impl ScalarMode {
    /// Largest imaginary residue tolerated after an inverse FFT of a product
    /// of transforms of real vectors.
    pub fn imag_tolerance(self) -> f64 {
        match self {
            ScalarMode::F64 => 1e-9,
            ScalarMode::F32 => 1e-4,
        }
    }
}
