//! Conditionally reversible video prediction.
//!
//! A bijective two-way autoencoder built from additive coupling blocks and
//! pixel shuffles encodes frames into two feature groups; a stack of
//! reversible predictive modules advances the features in time; the
//! inverse of the same autoencoder decodes the prediction. Given the
//! recurrent states, the whole step can be run backwards, which is what
//! the memory-light training path exploits.

pub mod audit;
pub mod autodiff;
pub mod autoencoder;
pub mod cli;
pub mod config;
pub mod convlstm;
pub mod coupling;
pub mod data;
pub mod error;
pub mod io;
pub mod ledger;
pub mod params;
pub mod pipeline;
pub mod rpm;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
