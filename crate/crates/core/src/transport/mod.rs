//! Time-resolved light transport: pulsed sources, hierarchical sampling,
//! the radiance-cache renderer, and physically-based shading.

pub mod backend;
pub mod diff;
pub mod light;
pub mod render;
pub mod sampling;

pub use backend::{AnalyticBackend, ModelBackend, SceneBackend, SceneTransform};
pub use light::{direct_incident, DirectionalProfile, PulsedPointLight};
pub use render::{
    orient_normal,
    backend_samples, query_cache_incident, render_pixel, shade_physically_based, PixelRender,
    RenderMode, RenderSettings,
};
pub use sampling::{
    hierarchical_samples, quadrature_weights, weights_from_masses, CascadeResult, ProposalLevel,
    RaySampleSet,
};
