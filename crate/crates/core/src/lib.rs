//! Federated training of a small CTC speech model with optional
//! parameter, embedding and loss regularization, plus a synthetic
//! heterogeneous-speaker data generator and an experiment harness.

pub mod error;
pub mod federation;
pub mod harness;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod oracle;
pub mod regularizers;
pub mod synthdata;

pub use error::{Error, Result};
