//! Spiking neural network training lab.
//!
//! Discrete-time IF/LIF networks trained with surrogate-gradient BPTT, a
//! surrogate-aware variance-preserving initializer, Hessian diagnostics and
//! the data plumbing needed to run comparative experiments.

pub mod data;
pub mod error;
pub mod hessian;
pub mod init;
pub mod network;
pub mod neuron;
pub mod numerics;
pub mod train;
pub mod varprop;

pub use error::{Error, Result};
pub use network::{Network, NetworkSpec};
