//! Forward and inverse solvers for the Boltzmann equation on a ball with a
//! product collision kernel.

pub mod boltzmann;
pub mod cli;
pub mod collision;
pub mod geometry;
pub mod linearize;
pub mod quad;
pub mod rayrecover;
pub mod transport;
