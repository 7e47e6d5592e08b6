//! Ground truth: a brute-force recursive time-resolved path tracer over
//! analytic scenes and the synthetic dataset generator.

pub mod synth;
pub mod trace;

pub use trace::{closed_form_direct, path_trace_transient, BounceHistograms, PathTraceConfig};
