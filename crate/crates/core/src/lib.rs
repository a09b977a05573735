//! Hybrid crystallization modeling: a method-of-moments population balance
//! simulator for seeded batch cooling crystallization, a synthetic data
//! pipeline, and a physics-informed recurrent network that learns state
//! trajectories together with the kinetic constants.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod datagen;
pub mod dataset_io;
pub mod error;
pub mod evaluator;
pub mod integrator;
pub mod losses;
pub mod model;
pub mod pbm;
pub mod selfcheck;
pub mod trainer;

pub use error::{Error, Result};
