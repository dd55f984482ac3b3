//! Gradient inversion of ReLU-activated fully-connected layers.
//!
//! The crate has two halves. `fl_sim` simulates the client side of federated
//! learning (FedSGD, FedAvg, DP-SGD) and emits gradient captures with sealed
//! ground truth. The remaining modules implement the attack: `decomp` factors
//! the observed weight gradient, `sphere_opt` searches the unit sphere for
//! sparsity-inducing directions, `rounding` snaps approximate directions to
//! exact kernel vectors, and `disagg` assembles the disaggregation matrix and
//! reconstructs the batch.

pub mod decomp;
pub mod disagg;
pub mod error;
pub mod fl_sim;
pub mod metrics;
pub mod planted;
pub mod rounding;
pub mod sphere_opt;

pub use error::{Error, Result};
