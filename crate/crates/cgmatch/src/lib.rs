//! Coarse-graining toolkit for desk-scale molecular systems.
//!
//! The crate builds the local mean force associated with a coarse-graining
//! map (linear or nonlinear), fits coarse force fields to it by least
//! squares, and cross-checks the recovered mean force / potential of mean
//! force against independent references: histogram and quadrature PMFs,
//! relative-entropy minimization, and direct inverse Boltzmann inversion
//! of pair structure.
//!
//! Modules follow the pipeline:
//!
//! - [`microsys`]: toy particle systems with potentials and analytic forces
//! - [`cgmap`]: coarse-graining maps, Jacobians, Gram matrices, rank checks
//! - [`meanforce`]: the weighted local mean force family and its existence solver
//! - [`sampler`]: Metropolis sampling of the Gibbs measure, binned conditional
//!   averages, and low-dimensional quadrature oracles
//! - [`fmatch`]: force-matching least squares over basis sets of coarse forces
//! - [`refmethods`]: histogram/quadrature PMFs, relative entropy, radial
//!   distribution functions, and cross-method comparison metrics
//! - [`cli`]: config-driven experiment pipelines with reproducible artifacts
//!
//! All quantities are in reduced units with the Boltzmann constant equal to
//! one; temperature enters only through the inverse temperature `beta`.

// `!(x > 0.0)` guards are deliberate: unlike `x <= 0.0`, they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cgmap;
pub mod cli;
pub mod error;
pub mod fmatch;
pub(crate) mod geom;
pub mod meanforce;
pub mod microsys;
pub mod refmethods;
pub mod sampler;

pub use error::{Error, Result};
pub use microsys::Beta;
