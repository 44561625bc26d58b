//! Latent factor estimation and confounder-adjusted association tests for
//! high-dimensional data whose samples are correlated.

pub mod baselines;
pub mod benchmark;
pub mod cbcv;
pub mod corrconf;
pub mod error;
pub mod icase;
pub mod inference;
pub mod io;
pub mod linalg;
pub mod linmodel;
pub mod simgen;
pub mod variance_reml;

pub use error::{Error, Result};
