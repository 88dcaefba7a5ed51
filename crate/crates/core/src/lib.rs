//! CrossFormer building blocks on a small dense-tensor engine.
//!
//! The crate is `no_std` (it only needs `alloc`) and carries everything that
//! is pure computation:
//!
//! * [`tensor`] and [`autograd`]: row-major nd-arrays, a tape-based
//!   reverse-mode differentiator and a finite-difference [`gradcheck`].
//! * [`cel`]: the cross-scale embedding layer.
//! * [`lsda`]: short/long distance grouping and grouped multi-head attention.
//! * [`dpb`]: dynamic position bias, its bias table, RPB and APE baselines.
//! * [`model`]: stage/model specifications, the named variants, weight
//!   initialization and the full forward pass.
//! * [`analysis`]: exact parameter and multiply-accumulate accounting.
//! * [`optim`], [`data`], [`train`]: the toy training loop and its synthetic
//!   dataset.
//!
//! File formats, the command line and wall-clock benchmarks live in the
//! `crossformer-cli` crate.
//!
//! ## Cargo features
//!
//! * `std` (default): use the standard library's float intrinsics and error
//!   trait. Without it the crate builds against `core` + `alloc` and uses
//!   `libm`.
#![cfg_attr(not(feature = "std"), no_std)]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod analysis;
pub mod autograd;
pub mod cel;
pub mod data;
pub mod dpb;
mod error;
pub mod gradcheck;
pub mod init;
pub mod lsda;
pub mod model;
pub mod optim;
mod real;
pub mod tensor;
pub mod train;

pub use autograd::{BackwardFault, Graph, Var};
pub use error::{Error, Result};
pub use real::{DType, Real};
pub use tensor::Tensor;
