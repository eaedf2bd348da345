//! Max, softmax and mellowmax Bellman backups on finite MDPs.
//!
//! The crate covers exact dynamic programming with any of the three
//! aggregates ([`ops`], [`dp`]), closed-form bounds on how far the soft
//! backups fall below the max ([`bounds`]), Monte-Carlo overestimation
//! experiments under additive noise ([`overestimation`]) and online tabular
//! Q-learning with swappable bootstrap targets ([`rl`]).

pub mod bounds;
pub mod dp;
pub mod error;
pub mod mdp;
pub mod ops;
pub mod overestimation;
pub mod rl;
pub mod seed;
pub mod stats;

pub use error::{Error, Result};
pub use mdp::{QTable, TabularMDP};
pub use ops::OperatorSpec;
