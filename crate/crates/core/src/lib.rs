//! Scalar-energy generative modeling as density transport.
//!
//! A single potential `U` defines both the training target (score matching
//! against a kernel-smoothed data measure) and the sampler (Langevin or
//! deterministic gradient flow). The [`lyapunov`] module estimates KL and
//! Fisher information along particle trajectories to decide when to stop,
//! [`compose`] combines trained energies additively, and [`ood`] turns the
//! energy and its gradient into out-of-distribution scores.

// `!(x > 0.0)` is used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod compose;
pub mod energy;
pub mod error;
pub mod grid;
pub mod lyapunov;
pub mod ood;
pub mod points;
pub mod presets;
pub mod rng;
pub mod sampler;
pub mod target;
pub mod training;

pub use energy::{
    ComposedEnergy, CompositionMode, EnergyField, GaussianMixtureEnergy, QuadraticEnergy, ScalarNetEnergy,
};
pub use error::{Error, Result};
pub use grid::{BoxBounds, DensityGrid, Grid};
pub use points::{ParticleEnsemble, PointSet};
pub use target::{EmpiricalDataset, KdeTarget};
