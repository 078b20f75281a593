//! Latent vector field recurrent networks and their discrete-geometry toolbox.
//!
//! The crate is organized around the pipeline that turns a latent vector
//! field into a trained recurrent model:
//!
//! - [`geometry`]: vector fields on the complete latent graph, gradient,
//!   divergence, and the directional-derivative operator `D_V`.
//! - [`transition`]: hidden-to-hidden matrices `C_V` via explicit Euler or
//!   midpoint (Cayley) integration, plus spectral diagnostics.
//! - [`init`]: seeded doubly-stochastic initialization of fields.
//! - [`cell`]: the recurrent cell, exact backpropagation through time, and
//!   a vanilla RNN baseline.
//! - [`task`]: the copy benchmark, cross entropy, and recall accuracy.
//! - [`optim`]: Adam with global-norm gradient clipping.
//! - [`train`]: the training loop, run configuration, metrics, checkpoints.
//! - [`verify`]: the registered invariant checks behind `lvf verify`.

pub mod cell;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod init;
pub mod io;
pub mod optim;
pub mod task;
pub mod train;
pub mod transition;
pub mod verify;

pub use error::{Error, Result};
pub use geometry::{
    commutator, default_tol, grad, is_in_vf, DirectionalDerivative, HiddenState, VectorField,
};
pub use transition::{
    check_normality, check_stability, euler_transition, midpoint_transition, spectrum, transition,
    Integrator, SpectrumReport, TransitionMatrix,
};
