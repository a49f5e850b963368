//! Reconstruction of an animatable clothed body as canonical 3D Gaussians,
//! deformed per frame by linear blend skinning and rendered by differentiable
//! splatting.

pub mod deform;
pub mod error;
pub mod eval;
pub mod gaussian;
pub mod io;
pub mod knn;
pub mod math;
pub mod metrics;
pub mod optim;
pub mod priors;
pub mod raster;
pub mod skinning;
pub mod synthetic;
pub mod trainer;

pub use error::{Error, Result};
