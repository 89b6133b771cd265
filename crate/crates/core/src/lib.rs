//! Exposed-infected epidemic chains observed through isolation counts:
//! simulation, master-equation oracles, moment estimators, and hidden
//! Markov model fitting on the truncated discrete-time skeleton.

pub mod baum_welch;
pub mod error;
pub mod hmm;
pub mod io;
pub mod lattice;
pub mod lbdi;
pub mod master_eq;
pub mod moments;
pub mod ode;
pub mod params;
pub mod rng;
pub mod select;
pub mod sim;
pub mod skeleton;

pub use error::{Error, Result};
pub use lattice::Lattice;
pub use params::{AugmentedState, EiState, ModelParams, TruncationConfig};
