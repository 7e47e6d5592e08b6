//! flare: physically-based time-resolved rendering and inverse rendering of
//! flash-lidar measurements, built around a neural time-resolved radiance
//! cache.

pub mod autodiff;
pub mod brdf;
pub mod fields;
pub mod math;
pub mod nn;
pub mod rng;
pub mod oracle;
pub mod transient;
pub mod transport;
