//! Multi-agent trajectory forecasting on directed spatiotemporal scene graphs.
//!
//! The crate covers the whole pipeline: scene abstraction and dynamic-state
//! derivation ([`scene`]), dataset and map ingestion ([`data`]), a small
//! reverse-mode differentiation substrate ([`nn`]), the modular encoder
//! ([`encoder`]), the discrete latent variable ([`latent`]), the mixture
//! density decoder ([`decoder`]), the training objective and loops
//! ([`training`]) and forecast metrics ([`metrics`]).

pub mod config;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod evaluate;
pub mod latent;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod scene;
pub mod training;

pub use error::{Error, Result};
