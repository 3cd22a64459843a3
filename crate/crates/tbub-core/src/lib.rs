//! A decoder language model that learns, under plain LM loss, to fork and
//! delete parallel residual streams mid-network, plus parameter-matched and
//! computation-matched baselines, a trainer, inference tooling, and analyses.

pub mod analysis;
pub mod blocks;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod fdcheck;
pub mod forking;
pub mod infer;
pub mod matrix;
pub mod model;
pub mod rope;
pub mod tape;
pub mod trace;
pub mod train;

pub use error::{Error, Result};
pub use matrix::Matrix;
pub use tape::{Node, Tape};
