//! Mean-field attention dynamics at desk scale: token flows through
//! depth-discretized attention ensembles, adjoint gradients, particle
//! gradient-flow training, tangent kernel spectra and cumulant injectivity
//! checks.

pub mod adjoint;
pub mod attention;
pub mod error;
pub mod experiments;
pub mod flow;
pub mod injectivity;
pub mod ntk;
pub mod train;

pub use error::{Error, Result};

/// Round-trippable fixed-format float used in every CSV output.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}
