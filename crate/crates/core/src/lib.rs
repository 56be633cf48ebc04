//! Low-loss connection paths between trained network weight vectors.
//!
//! Two trained networks `Θ^A`, `Θ^B` of the same architecture are joined by
//! a piecewise curve in weight space. Methods range from straight lines and
//! distribution-preserving arcs over neuron "particles" to optimal-transport
//! matching and pseudo-inverse weight adjustment; [`paths::evaluate`]
//! measures the worst accuracy and loss along the result.

pub mod connect_direct;
pub mod connect_learnable;
pub mod connect_ot;
pub mod connect_wa;
pub mod dataio;
pub mod ensemble;
pub mod error;
pub mod methods;
pub mod ndmath;
pub mod netcore;
pub mod paths;

pub use error::{Error, Result};
