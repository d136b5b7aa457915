//! Growth mixture models with bilinear-spline trajectories and
//! class-specific knots.

pub mod classification;
pub mod data;
pub mod error;
pub mod fit;
pub mod forest;
pub mod growth;
pub mod inference;
pub mod io;
pub mod likelihood;
pub mod logistic;
pub mod mixture;
pub mod montecarlo;
pub mod optim;
pub mod simulate;
pub mod stepwise;

pub use error::{Error, Result};
