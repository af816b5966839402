//! CPU engine for Diffusion Restore: a continuous-time embedded, nonreversible
//! Langevin MCMC sampler with density-sensitive killing and uniform
//! regeneration on the torus, together with baseline samplers, a small
//! primary-sample-space path tracer and a laboratory for the discretization
//! bias of the local dynamics.

pub mod biaslab;
pub mod config;
pub mod drivers;
pub mod dynamics;
pub mod error;
pub mod experiment;
pub mod image;
pub mod metrics;
pub mod microrender;
pub mod restore;
pub mod rng;
pub mod target;
pub mod torus;

pub use error::{Error, Result};
pub use image::{Image, Rgb};
pub use rng::Philox;
pub use target::{TargetDensity, TargetEvaluation};
pub use torus::TorusPoint;
