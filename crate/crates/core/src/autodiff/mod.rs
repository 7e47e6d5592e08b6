//! Reverse-mode automatic differentiation over named parameter blocks,
//! plus the Adam optimizer used for inverse rendering.

mod adam;
mod tape;

pub use adam::{adam_step, AdamHyper, AdamState};
pub use tape::{GradSink, NodeId, ParamStore, Tape, Tensor};

use crate::rng::rng_stream;
use rand::Rng;

/// Central-difference gradient check over a random subset of parameter
/// coordinates. `eval` must be a pure function of the store; `sink` holds the
/// analytic gradients of the same scalar. Returns the max relative error.
pub fn finite_diff_check(
    store: &mut ParamStore,
    eval: &mut dyn FnMut(&ParamStore) -> f64,
    sink: &GradSink,
    n_coords: usize,
    h: f64,
    seed: u64,
) -> f64 {
    let mut rng = rng_stream(seed, &[0xfd]);
    let mut coords = Vec::with_capacity(n_coords);
    let n_blocks = store.n_blocks();
    for _ in 0..n_coords {
        let b = rng.gen_range(0..n_blocks);
        let len = store.block(b).data.len();
        coords.push((b, rng.gen_range(0..len)));
    }
    let gscale = sink
        .grads
        .iter()
        .flat_map(|g| g.iter())
        .fold(0.0f64, |a, &g| a.max(g.abs()));
    let mut max_err = 0.0f64;
    for (b, i) in coords {
        let orig = store.block(b).data[i];
        store.block_mut(b).data[i] = orig + h;
        let fp = eval(store);
        store.block_mut(b).data[i] = orig - h;
        let fm = eval(store);
        store.block_mut(b).data[i] = orig;
        let fd = (fp - fm) / (2.0 * h);
        let ad = sink.grads[b][i];
        let denom = ad.abs().max(fd.abs()).max(1e-6 * gscale).max(1e-12);
        max_err = max_err.max((ad - fd).abs() / denom);
    }
    max_err
}
