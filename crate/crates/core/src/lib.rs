//! Pairwise network privacy accounting and simulation for decentralized
//! learning with a single token performing a random walk.
//!
//! The modules build on each other bottom-up: [`graphs`] produces topologies,
//! [`transition`] turns them into Markov chains, [`spectral`] diagonalizes the
//! chains, [`accountant`] computes pairwise Rényi losses, [`walk`] simulates the
//! token and [`optim`] runs private SGD along the walk on [`datasets`].

// Parameter checks are written as `!(x > 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod accountant;
pub mod datasets;
pub mod error;
pub mod graphs;
pub mod io;
pub mod optim;
pub mod rng;
pub mod spectral;
pub mod transition;
pub mod walk;

pub use error::{Error, Result};
