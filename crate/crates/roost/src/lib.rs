//! Deterministic, distributable non-reversible parallel tempering.
//!
//! roost samples from unnormalized target densities, estimates log
//! normalization constants with the stepping stone estimator, and guarantees
//! *strong parallelism invariance* (SPI): for a fixed seed, every recorded
//! output is bit-identical whether the run uses one thread, several threads,
//! or several communicating processes.
//!
//! The two ingredients that make SPI hold are:
//!
//! * splittable random streams ([`rng`]): every replica owns a stream derived
//!   deterministically from the master seed, independent of worker count;
//! * worker-count-invariant tree reduction ([`reduce`]): floating-point
//!   aggregation follows a tree whose shape depends only on the number of
//!   leaves, so non-associativity of float addition cannot leak scheduling
//!   details into the output.
//!
//! On top of those sit the annealing-path model ([`model`]), within-chain
//! exploration kernels ([`explore`]), the even/odd chain-index swap protocol
//! with its distributed directory ([`swap`]), pluggable message transports
//! ([`transport`]), and the round-based driver ([`engine`]).

pub mod cli;
pub mod engine;
pub mod explore;
pub mod model;
pub mod reduce;
pub mod rng;
pub mod swap;
pub mod transport;
