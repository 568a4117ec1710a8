//! Decentralized chance-constrained EV charging over radial distribution feeders.

pub mod error;
pub mod fleet;
pub mod gaussian;
pub mod io;
pub mod montecarlo;
pub mod network;
pub mod protocol;
pub mod report;
pub mod scenario;
pub mod solver;

pub use error::{Error, Result};
