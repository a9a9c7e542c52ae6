//! Constrained generative modeling with bridged diffusion and flow-matching models.
//!
//! The crate is `no_std` (with `alloc`) and contains only the numerical core:
//! noise schedules, a closed-form Gaussian-mixture oracle, small MLP denoisers
//! with hand-written backpropagation, constraint losses, training objectives,
//! samplers, adjoint matching, the bouncing-balls simulator and evaluation
//! metrics. File formats, configuration and the command-line harness live in
//! the `bridgegen` crate.
#![cfg_attr(not(feature = "std"), no_std)]
#![deny(unsafe_code)]

extern crate alloc;

pub mod adjoint;
pub mod ballsim;
pub mod constraints;
pub mod denoiser;
pub mod error;
pub mod gmm;
pub mod linalg;
pub mod metrics;
pub mod nnet;
pub mod objectives;
pub mod rng;
pub mod samplers;
pub mod schedules;

pub use denoiser::Denoiser;
pub use error::{Error, Result};
