//! Ensembles of variational Bayesian last-layer surrogates with low-rank
//! adapter backbones, for Bayesian optimization over combinatorial and mixed
//! search spaces.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod acquisition;
pub mod backbone;
pub mod benchmarks;
pub mod ensemble;
pub mod error;
pub mod head;
pub mod linalg;
pub mod optim;
pub mod problem;
pub mod recursive;
pub mod runner;

pub use error::{Error, Result};
