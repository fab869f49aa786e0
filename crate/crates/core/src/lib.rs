//! Parabolic continual learning.
//!
//! Training losses are integrated along Brownian bridges between incoming
//! samples and replayed memory, so the expected loss over the input space
//! behaves like the solution of a parabolic equation. The crate contains the
//! learner itself (network, bridges, reservoir buffer, loss, trainer), a
//! finite-difference and Feynman-Kac oracle for the underlying equation, and
//! empirical checkers for the forgetting and generalization inequalities.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bounds;
pub mod bridge;
pub mod buffer;
mod error;
pub mod exec;
pub mod experiment;
pub mod fkpde;
pub mod net;
pub mod pcl;
pub mod seed;
pub mod stats;
pub mod streams;
pub mod trainer;

pub use error::{PclError, Result};
pub use exec::Exec;
