//! Numerical verification toolkit for the TAP representation of the free
//! energy in Bayesian linear regression with a uniform spherical prior.
//!
//! * [`model`]: instances, sphere sampling, Hamiltonians (base and perturbed)
//! * [`oracle`]: exact `(1/p) ln Z_p` by saddle point / contour quadrature,
//!   Monte Carlo, annealed moments, restricted and band free energies
//! * [`tap`]: the TAP functional, its gradient and two maximizers
//! * [`sampler`]: geodesic Metropolis on the sphere and replica overlaps
//! * [`spectra`]: random-matrix diagnostics for `XᵀX`
//! * [`harness`]: named experiments, seeded sweeps and result digests

// `!(x > 0.0)` is used deliberately so that NaN is rejected
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod harness;
pub mod io;
pub mod linalg;
pub mod model;
pub mod oracle;
pub mod quad;
pub mod rng;
pub mod sampler;
pub mod spectra;
pub mod tap;

pub use error::{Error, Result};
pub use model::{generate_instance, Instance, ModelConfig, PerturbationConfig, PerturbedInstance};
