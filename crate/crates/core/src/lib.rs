//! Desk-scale federated learning with synthetic pre-training.
//!
//! The crate is organised by subsystem:
//!
//! - [`ifs`]: IFS code sampling, fractal rendering and fractal-pair archives.
//! - [`nn`]: a small f64 network core with manual backpropagation and SGD.
//! - [`ssl`]: SimSiam / InfoNCE losses and self-supervised pre-training.
//! - [`fedsim`]: Dirichlet partitioning, FedAvg / FedProx rounds and the
//!   local/global gain decomposition.
//! - [`aggkit`]: convex aggregation analysis on the probability simplex.
//! - [`data`], [`config`], [`experiment`]: datasets, configuration and the
//!   end-to-end pipeline used by the `fedpt` binary.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod aggkit;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod fedsim;
pub mod ifs;
pub mod nn;
pub mod seed;
pub mod ssl;

pub use error::{Error, Result};
