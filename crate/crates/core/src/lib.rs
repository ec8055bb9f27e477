//! Two-level neural cellular automata for binary segmentation, with
//! variance-weighted unsupervised adaptation to shifted domains.

pub mod adapter;
pub mod checkpoint;
pub mod config;
pub mod datasets;
pub mod error;
pub mod inference;
pub mod losses;
pub mod metrics;
pub mod nca;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
