//! Order-independent reference fusion and scale-aware modulation for a
//! miniature multi-subject diffusion transformer.
//!
//! The crate is `no_std` (it needs `alloc`). Everything here is pure
//! computation: dense tensors and a 2D FFT, a small reverse-mode tape, the
//! Fourier fusion of reference feature maps, the prompt-driven modulation
//! adapter, a toy DiT denoiser, the scale/permutation losses, AdamW, and the
//! synthetic-scene harness used to train and evaluate it. File formats and
//! the command line live in the `mofu` crate.

#![no_std]
#![forbid(unsafe_code)]
// NaN-rejecting `!(x >= 0.0)` checks and index loops over math formulas are intended.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

extern crate alloc;
#[cfg(any(test, feature = "std"))]
extern crate std;

pub mod autodiff;
pub mod conditioning;
pub mod dit;
pub mod error;
pub mod fft;
pub mod fusion;
pub mod gradcheck;
pub mod harness;
pub mod losses;
pub mod ops;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{ComplexTensor, Tensor};
