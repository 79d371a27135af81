//! Desk-scale, deterministic simulator of heterogeneous federated continual
//! learning.
//!
//! Clients learn private sequences of classification tasks drawn from a large
//! class pool. The simulator implements the STAMP protocol — temporal gradient
//! matching on clients (TAM), spatial gradient matching on the server (SAM),
//! and a prototypical coreset replay memory (PCS) — alongside a plain FedAvg
//! baseline, all on synthetic datasets small enough to run on a desk.
//!
//! Everything is seeded: the same configuration and seed reproduce the same
//! metrics byte for byte, including under parallel client execution.

pub mod error;
pub mod fedsim;
pub mod gm;
pub mod linalg;
pub mod metrics;
pub mod proto;
pub mod seeds;
pub mod taskpool;
pub mod tensor;

pub use error::{Error, Result};
