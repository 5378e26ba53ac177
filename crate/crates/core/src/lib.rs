//! Subject identification from multichannel EEG with i-vector, x-vector and
//! fused ix-vector embeddings.

pub mod backend;
pub mod cli;
pub mod codec;
pub mod config;
pub mod dataio;
pub mod error;
pub mod eval;
pub mod features;
pub mod gmm;
pub mod ivector;
pub mod systems;
pub mod xvector;

pub use error::{Error, Result};
