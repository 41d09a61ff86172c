//! Conditional multinomial-diffusion sequence-to-sequence translation.
//!
//! The library covers the full pipeline: a categorical forward/reverse
//! diffusion process over token sequences, a conditional encoder-decoder
//! denoiser with built-in reverse-mode autodiff, training and sampling
//! loops, synthetic cipher-language corpora for desk-scale experiments,
//! and corpus-level translation metrics (BLEU, TER, chrF).
//!
//! Modules mirror the pipeline stages:
//!
//! - [`schedule`]: noise schedules (beta_t, alpha_t, alpha_bar_t)
//! - [`diffusion`]: categorical diffusion probability math and the
//!   variational-bound loss terms
//! - [`tokenizer`] / [`corpus`]: text <-> fixed-length token sequences,
//!   synthetic parallel data
//! - [`tape`] / [`model`]: autodiff and the conditional denoiser
//! - [`trainer`] / [`sampler`]: optimization and iterative denoising
//! - [`metrics`]: translation quality scores
//! - [`verify`]: independent brute-force oracles used by `cdmt verify`
//! - [`config`] / [`pipeline`]: run configuration and the end-to-end
//!   gen-data -> train -> translate -> evaluate flow

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod diffusion;
pub mod error;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod sampler;
pub mod schedule;
pub mod tape;
pub mod tokenizer;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};

pub(crate) mod rng;
