//! Dense tensors, complex spectra, 2-D FFTs and the handful of stable
//! reductions and activations used by every other stage.

mod fft;
mod func;
mod scalar;
mod tensor;

pub use fft::{fft1d, fft2, fft2_complex_inplace, ifft2, ifft2_complex, ifft2_real, ComplexTensor};
pub use func::{cosine_similarity, sigmoid, silu, softmax_slice, softplus, stable_softmax};
pub use scalar::Scalar;
pub(crate) use tensor::matmul_into;
pub use tensor::Tensor;
