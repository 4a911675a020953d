pub mod baselines;
pub mod bodymodel;
pub mod checkpoint;
pub mod cli;
pub mod diff;
pub mod eval;
pub mod error;
pub mod flow;
pub mod liegroup;
pub mod nn;
pub mod posedist;
pub mod real;
pub mod so3density;
pub mod train;

pub use error::{Error, Result};
