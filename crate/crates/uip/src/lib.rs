//! Desk-scale study of what machine unlearning leaks about the removed data.
//!
//! The crate trains small classifiers, produces unlearned models by exact
//! retraining or single-gradient approximate unlearning, mounts the two
//! unlearning inversion attacks (white-box feature recovery from parameter
//! differences, black-box label inference from prediction-confidence
//! drops), and evaluates three defenses. See `examples/` for one runnable
//! walkthrough per capability and the `uip` binary for the experiment CLI.

pub mod cli;
pub mod data;
pub mod defense;
pub mod error;
pub mod harness;
pub mod inversion;
pub mod io;
pub mod nn;
pub mod probing;
pub mod seeds;
pub mod tensor;
pub mod train;
pub mod unlearn;

pub use error::{Error, Result};
pub use tensor::Tensor;
