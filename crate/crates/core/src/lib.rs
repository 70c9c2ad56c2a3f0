//! Numerical laboratory for simultaneously homogenized and dimension-reduced
//! von Kármán plates.
//!
//! * [`microstructure`] – symmetric-matrix algebra and microstructured elastic densities.
//! * [`fem3d`] – scaled-gradient trilinear elements on extruded raster domains.
//! * [`corrector`] – corrector minima `K_h(M, A)` and their h-sweeps.
//! * [`effective`] – effective plate density by extrapolation and polarization,
//!   and the structural property checks.
//! * [`griso`] – thin-domain displacement decomposition and its diagnostics.
//! * [`plate`] – the limit von Kármán energy, its invariances and a minimizer.

pub mod corrector;
pub mod effective;
pub mod error;
pub mod fem3d;
pub mod griso;
pub mod linalg;
pub mod microstructure;
pub mod plate;

pub use error::{Error, Result};
pub use microstructure::{ElasticForm, Mat3, MicrostructureField, Sym2};
