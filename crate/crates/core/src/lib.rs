//! Vertical federated learning where every party publishes a hashed, binary
//! embedding of its local features, together with the attack and defense
//! tooling used to study such systems.
//!
//! The crate is organised bottom-up: dense [`matrix`] math and small
//! [`nn`] layers, the hashing layer in [`hash`], class [`codebook`]s, the
//! party/server [`protocol`], dataset plumbing in [`data`], attacks in
//! [`adversary`] and defenses in [`defense`].

pub mod adversary;
pub mod codebook;
pub mod data;
pub mod defense;
pub mod error;
pub mod hash;
pub mod loss;
pub mod matrix;
pub mod nn;
pub mod optim;
pub mod protocol;
pub mod rng;
pub mod stats;

pub use error::{Error, Result};
pub use matrix::Matrix;
