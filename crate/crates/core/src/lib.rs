//! Variational model-inversion laboratory.
//!
//! A reverse-mode tape ([`autodiff`]), code-space variational families
//! ([`variational`]), the fixed target networks ([`models`]), attack
//! objectives and baselines ([`attacks`]), the evaluation suite
//! ([`metrics`]), synthetic tasks ([`tasks`]) and run orchestration ([`cli`]).

pub mod attacks;
pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod rng;
pub mod tasks;
pub mod variational;

pub use error::{Error, Result};
