//! Adam optimizer over parameter blocks.

use super::tape::{GradSink, ParamStore};

#[derive(Copy, Clone, Debug)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment accumulators per block plus the step counter.
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
    pub hyper: AdamHyper,
}

impl AdamState {
    pub fn new(store: &ParamStore, hyper: AdamHyper) -> AdamState {
        AdamState {
            m: store.iter().map(|b| vec![0.0; b.data.len()]).collect(),
            v: store.iter().map(|b| vec![0.0; b.data.len()]).collect(),
            step: 0,
            hyper,
        }
    }
}

#[derive(Debug, thiserror::Error)]
#[error("non-finite gradient in block '{block}' at offset {offset}; step aborted")]
pub struct NonFiniteGradient {
    pub block: String,
    pub offset: usize,
}

/// One bias-corrected Adam update. Frozen blocks are skipped entirely; the
/// effective rate per block is `lr * lr_scale`. Deterministic.
pub fn adam_step(
    store: &mut ParamStore,
    sink: &GradSink,
    state: &mut AdamState,
    lr_override: Option<f64>,
) -> Result<(), NonFiniteGradient> {
    if let Some((b, i)) = sink.first_non_finite() {
        return Err(NonFiniteGradient {
            block: store.block(b).name.clone(),
            offset: i,
        });
    }
    state.step += 1;
    let t = state.step as f64;
    let h = state.hyper;
    let lr = lr_override.unwrap_or(h.lr);
    let bc1 = 1.0 - h.beta1.powf(t);
    let bc2 = 1.0 - h.beta2.powf(t);
    for bi in 0..store.n_blocks() {
        if store.block(bi).frozen {
            continue;
        }
        let rate = lr * store.block(bi).lr_scale;
        let g = &sink.grads[bi];
        let m = &mut state.m[bi];
        let v = &mut state.v[bi];
        let data = &mut store.block_mut(bi).data;
        for i in 0..data.len() {
            let gi = g[i];
            m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * gi;
            v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * gi * gi;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            data[i] -= rate * mhat / (vhat.sqrt() + h.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> (ParamStore, AdamState) {
        let mut store = ParamStore::new();
        let x = store.add_block("x", 1, 4, 0.0, 0);
        for (i, v) in store.block_mut(x).data.iter_mut().enumerate() {
            *v = i as f64;
        }
        let state = AdamState::new(
            &store,
            AdamHyper {
                lr: 0.01,
                ..Default::default()
            },
        );
        (store, state)
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let (mut store, mut state) = setup();
        let sink = GradSink::new(&store);
        let before = store.block(0).data.clone();
        adam_step(&mut store, &sink, &mut state, None).unwrap();
        assert_eq!(store.block(0).data, before);
    }

    #[test]
    fn first_step_magnitude_is_lr() {
        // with constant gradient g, the bias-corrected first step is exactly lr
        let (mut store, mut state) = setup();
        let mut sink = GradSink::new(&store);
        sink.grads[0].iter_mut().for_each(|g| *g = 3.7);
        let before = store.block(0).data.clone();
        adam_step(&mut store, &sink, &mut state, None).unwrap();
        for (a, b) in store.block(0).data.iter().zip(&before) {
            let delta = b - a;
            assert!((delta - 0.01).abs() < 1e-9, "step {delta}");
        }
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let (mut store, mut state) = setup();
        let mut sink = GradSink::new(&store);
        sink.grads[0][2] = f64::NAN;
        let before = store.block(0).data.clone();
        let err = adam_step(&mut store, &sink, &mut state, None);
        assert!(err.is_err());
        assert_eq!(store.block(0).data, before);
        assert_eq!(state.step, 0);
    }

    #[test]
    fn deterministic_across_runs() {
        let run = || {
            let (mut store, mut state) = setup();
            let mut sink = GradSink::new(&store);
            for s in 0..10 {
                for (i, g) in sink.grads[0].iter_mut().enumerate() {
                    *g = ((s * 7 + i) as f64).sin();
                }
                adam_step(&mut store, &sink, &mut state, None).unwrap();
            }
            store.block(0).data.clone()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b); // bitwise
    }

    #[test]
    fn frozen_blocks_do_not_move() {
        let mut store = ParamStore::new();
        let x = store.add_block("x", 1, 2, 0.0, 0);
        let y = store.add_block("y", 1, 2, 0.0, 0);
        store.block_mut(x).data.copy_from_slice(&[1.0, 2.0]);
        store.block_mut(y).data.copy_from_slice(&[3.0, 4.0]);
        store.set_frozen(y, true);
        let mut state = AdamState::new(&store, AdamHyper::default());
        let mut sink = GradSink::new(&store);
        sink.grads[x].iter_mut().for_each(|g| *g = 1.0);
        sink.grads[y].iter_mut().for_each(|g| *g = 1.0);
        adam_step(&mut store, &sink, &mut state, None).unwrap();
        assert_eq!(store.block(y).data, vec![3.0, 4.0]);
        assert_ne!(store.block(x).data, vec![1.0, 2.0]);
    }
}
