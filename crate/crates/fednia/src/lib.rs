//! Deterministic federated-learning simulator with an activation-based
//! defense against poisoned client updates.
//!
//! The crate is organized around a small dense-network engine ([`nn`]), IDX
//! dataset handling and partitioning ([`data`]), client-side poisoning
//! transforms ([`attacks`]), the synchronous federation loop and robust
//! aggregation baselines ([`fl`]), the noise-probe defense that scores and
//! filters client updates before aggregation ([`defense`]), and evaluation
//! metrics plus rank-based cross-method comparison ([`eval`]).
//!
//! Every source of randomness is a ChaCha stream derived from one master
//! seed (see [`seed`]), so a run configuration reproduces its outputs
//! byte-for-byte regardless of thread count.

pub mod attacks;
pub mod config;
pub mod data;
pub mod defense;
pub mod error;
pub mod eval;
pub mod fl;
pub mod matrix;
pub mod nn;
pub mod seed;

pub use error::{Error, Result};
pub use matrix::Matrix;
