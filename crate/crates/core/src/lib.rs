//! Nonlinear source separation for multi-subject time-series matrices.
//!
//! A subject-conditioned variational autoencoder is trained with a
//! total-correlation penalty; its latent time courses and spatial maps are
//! then compared against a linear InfoMax ICA baseline through functional
//! connectivity and component matching.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod analysis;
pub mod dataset;
pub mod error;
pub mod infomax;
pub mod linalg;
pub mod model;
pub mod objective;
pub mod train;
pub mod rng;
pub mod tcsf;

pub use error::{Error, Result};
