//! Inference of a spatial log-diffusivity field under a Gaussian-process
//! prior whose covariance hyper-parameters are uncertain.
//!
//! Fields are represented in the Karhunen-Loève basis of a single reference
//! covariance; a hyper-parameter dependent linear map sends the native KL
//! coordinates of `C(q)` into that basis, where one Hermite polynomial chaos
//! surrogate of the forward model serves every `q`.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod approx_error;
pub mod config;
pub mod data;
pub mod digest;
pub mod error;
pub mod forward;
pub mod inference;
pub mod kernels;
pub mod kl;
pub mod pce;
pub mod pipeline;
pub mod quadrature;
pub mod random;
pub mod transform;

pub use error::{Error, Result};
