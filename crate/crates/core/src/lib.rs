//! Orientation estimation in SO(n) by consensus on auxiliary variables, and
//! the 3-D formation control and network localization laws driven by it.
//!
//! The crate is `no_std` (it needs `alloc`). File formats, the CLI and all
//! other IO live in the companion `formest` crate.
//!
//! - [`graph`]: interaction topologies, Laplacians, rooted-out-branch tests.
//! - [`rotation`]: SO(n) validation, Gram-Schmidt, pseudovector completion.
//! - [`estimator`]: the auxiliary-variable consensus and its spectral oracle.
//! - [`circle`]: unit-circle oscillators, the alignment approach that fails.
//! - [`formation`] and [`localization`]: 3-D laws using the estimate.
//! - [`integrate`]: fixed-step RK4 / Euler.
//! - [`metrics`]: decay-rate fits and rigid alignment helpers.
#![no_std]

extern crate alloc;

pub mod circle;
pub mod estimator;
pub mod formation;
pub mod graph;
pub mod integrate;
pub mod localization;
pub mod metrics;
pub mod rotation;
pub mod topology;

pub use estimator::{EstimatorState, RelativeOrientations};
pub use graph::{DiGraph, Laplacian};
pub use integrate::{IntegratorConfig, Method, Trajectory};
pub use rotation::Rotation;
