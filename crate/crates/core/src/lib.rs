//! Laplacian-pyramid diffeomorphic image registration.
//!
//! The crate bundles a small reverse-mode autodiff ([`autodiff`]), image
//! pyramids and warping ([`pyramid`]), scaling-and-squaring integration of
//! stationary velocity fields ([`diffeo`]), the multi-resolution NCC loss
//! ([`similarity`]), the per-level registration network ([`crn`]), training
//! and direct optimization ([`engine`]), evaluation ([`metrics`]) and file
//! formats plus synthetic data ([`io`], [`synth`]).

pub mod autodiff;
pub mod cli;
pub mod crn;
pub mod diffeo;
pub mod engine;
pub mod error;
pub mod field;
pub mod gradcheck;
pub mod io;
pub mod metrics;
pub mod pyramid;
pub mod similarity;
pub mod synth;

pub use error::{Error, Result};
pub use field::{Field, LabelMap};
