//! Scene representation: hash-encoded neural fields plus closed-form
//! analytic test scenes.

pub mod analytic;
pub mod hashgrid;
pub mod neural;

pub use analytic::{AnalyticScene, SceneKind, ShellParams, SurfaceHit};
pub use hashgrid::{HashGrid, HashGridConfig};
pub use neural::{GeomGradNodes, GeomNodes, MatNodes, ModelConfig, SceneModel, GRAD_EPS};
