//! Small MLPs on top of the autodiff tape, with a plain (non-recording)
//! evaluation path used by samplers and render-time code.

use crate::autodiff::{NodeId, ParamStore, Tape};
use crate::autodiff::Tensor;

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Two-layer MLP with softplus hidden activations and a linear output.
/// Smooth activations keep spatial-gradient expressions well behaved.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
    pub in_dim: usize,
    pub hidden: usize,
    pub out_dim: usize,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        seed: u64,
    ) -> Mlp {
        let w1 = store.add_block_he(&format!("{name}.w1"), in_dim, hidden, seed ^ 0x11);
        let b1 = store.add_block(&format!("{name}.b1"), 1, hidden, 0.0, 0);
        let w2 = store.add_block_he(&format!("{name}.w2"), hidden, out_dim, seed ^ 0x22);
        let b2 = store.add_block(&format!("{name}.b2"), 1, out_dim, 0.0, 0);
        Mlp {
            w1,
            b1,
            w2,
            b2,
            in_dim,
            hidden,
            out_dim,
        }
    }

    /// Tape forward: [n, in] -> [n, out].
    pub fn forward(&self, t: &mut Tape, x: NodeId) -> NodeId {
        let h = t.linear(x, self.w1, self.b1);
        let a = t.softplus(h);
        t.linear(a, self.w2, self.b2)
    }

    /// Tape forward that also returns the Jacobian-vector rows needed for
    /// spatial density gradients: for output column `out_col`, builds
    /// d out / d x as a [n, in] tape expression (differentiable w.r.t. the
    /// MLP weights themselves).
    pub fn forward_with_input_grad(
        &self,
        t: &mut Tape,
        x: NodeId,
        out_col: usize,
    ) -> (NodeId, NodeId) {
        let h = t.linear(x, self.w1, self.b1);
        let a = t.softplus(h);
        let y = t.linear(a, self.w2, self.b2);
        // d y[:, c] / d x = (sigmoid(h) . w2[:, c]^T) * W1^T
        let s = t.sigmoid(h); // [n, hidden]
        let w2v = t.param(self.w2); // [hidden, out]
        let w2col = t.slice_cols(w2v, out_col, 1); // [hidden, 1]
        // broadcast w2 column across rows: use matmul-free trick below
        let n = t.shape(x).0;
        let w2row = transpose_col_to_row(t, w2col); // [1, hidden]
        let w2b = broadcast_row(t, w2row, n); // [n, hidden]
        let sw = t.mul(s, w2b); // [n, hidden]
        let gin = t.matmul_t_param(sw, self.w1); // [n, in]
        (y, gin)
    }

    /// Plain forward without recording, for sampling and eval-time renders.
    pub fn eval(&self, store: &ParamStore, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.in_dim);
        debug_assert_eq!(out.len(), self.out_dim);
        let w1 = store.block(self.w1);
        let b1 = store.block(self.b1);
        let w2 = store.block(self.w2);
        let b2 = store.block(self.b2);
        let mut hid = vec![0.0; self.hidden];
        hid.copy_from_slice(&b1.data);
        for k in 0..self.in_dim {
            let xv = x[k];
            if xv == 0.0 {
                continue;
            }
            let row = &w1.data[k * self.hidden..(k + 1) * self.hidden];
            for (h, w) in hid.iter_mut().zip(row) {
                *h += xv * w;
            }
        }
        for h in hid.iter_mut() {
            *h = softplus(*h);
        }
        out.copy_from_slice(&b2.data);
        for k in 0..self.hidden {
            let a = hid[k];
            if a == 0.0 {
                continue;
            }
            let row = &w2.data[k * self.out_dim..(k + 1) * self.out_dim];
            for (o, w) in out.iter_mut().zip(row) {
                *o += a * w;
            }
        }
    }

    /// Plain forward plus the input-space gradient of one output column.
    pub fn eval_with_input_grad(
        &self,
        store: &ParamStore,
        x: &[f64],
        out_col: usize,
        out: &mut [f64],
        gin: &mut [f64],
    ) {
        let w1 = store.block(self.w1);
        let b1 = store.block(self.b1);
        let w2 = store.block(self.w2);
        let b2 = store.block(self.b2);
        let mut pre = vec![0.0; self.hidden];
        pre.copy_from_slice(&b1.data);
        for k in 0..self.in_dim {
            let xv = x[k];
            if xv == 0.0 {
                continue;
            }
            let row = &w1.data[k * self.hidden..(k + 1) * self.hidden];
            for (h, w) in pre.iter_mut().zip(row) {
                *h += xv * w;
            }
        }
        let act: Vec<f64> = pre.iter().map(|&v| softplus(v)).collect();
        out.copy_from_slice(&b2.data);
        for k in 0..self.hidden {
            let a = act[k];
            let row = &w2.data[k * self.out_dim..(k + 1) * self.out_dim];
            for (o, w) in out.iter_mut().zip(row) {
                *o += a * w;
            }
        }
        // gin[j] = sum_k sigmoid(pre_k) * w2[k, out_col] * w1[j, k]
        let mut sw = vec![0.0; self.hidden];
        for k in 0..self.hidden {
            sw[k] = sigmoid(pre[k]) * w2.data[k * self.out_dim + out_col];
        }
        for (j, gv) in gin.iter_mut().enumerate().take(self.in_dim) {
            let row = &w1.data[j * self.hidden..(j + 1) * self.hidden];
            *gv = row.iter().zip(&sw).map(|(a, b)| a * b).sum();
        }
    }
}

/// Single linear layer.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: usize,
    pub b: usize,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, seed: u64) -> Linear {
        let w = store.add_block_he(&format!("{name}.w"), in_dim, out_dim, seed ^ 0x31);
        let b = store.add_block(&format!("{name}.b"), 1, out_dim, 0.0, 0);
        Linear { w, b, in_dim, out_dim }
    }

    pub fn forward(&self, t: &mut Tape, x: NodeId) -> NodeId {
        t.linear(x, self.w, self.b)
    }

    pub fn eval(&self, store: &ParamStore, x: &[f64], out: &mut [f64]) {
        let w = store.block(self.w);
        let b = store.block(self.b);
        out.copy_from_slice(&b.data);
        for k in 0..self.in_dim {
            let xv = x[k];
            if xv == 0.0 {
                continue;
            }
            let row = &w.data[k * self.out_dim..(k + 1) * self.out_dim];
            for (o, ww) in out.iter_mut().zip(row) {
                *o += xv * ww;
            }
        }
    }
}

/// [k,1] -> [1,k] on the tape (pure data movement).
pub fn transpose_col_to_row(t: &mut Tape, col: NodeId) -> NodeId {
    let (k, one) = t.shape(col);
    assert_eq!(one, 1);
    let parts: Vec<NodeId> = (0..k).map(|i| t.gather_rows(col, vec![i])).collect();
    t.concat_cols(&parts)
}

/// Repeat a [1,d] row n times -> [n,d].
pub fn broadcast_row(t: &mut Tape, row: NodeId, n: usize) -> NodeId {
    let (one, _) = t.shape(row);
    assert_eq!(one, 1);
    t.gather_rows(row, vec![0; n])
}

/// Constant tensor helper.
pub fn const_rows(t: &mut Tape, rows: usize, cols: usize, data: Vec<f64>) -> NodeId {
    t.constant(Tensor::from_rows(rows, cols, data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff_check, GradSink};

    #[test]
    fn tape_and_plain_eval_agree() {
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "m", 5, 8, 3, 42);
        let x: Vec<f64> = (0..5).map(|i| 0.3 * i as f64 - 0.7).collect();
        let mut t = Tape::new(&store);
        let xv = const_rows(&mut t, 1, 5, x.clone());
        let y = mlp.forward(&mut t, xv);
        let mut plain = vec![0.0; 3];
        mlp.eval(&store, &x, &mut plain);
        for c in 0..3 {
            assert!((t.value(y).at(0, c) - plain[c]).abs() < 1e-14);
        }
    }

    #[test]
    fn input_grad_matches_fd_in_x() {
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "m", 4, 16, 2, 3);
        let x: Vec<f64> = vec![0.1, -0.4, 0.9, 0.3];
        let mut out = vec![0.0; 2];
        let mut gin = vec![0.0; 4];
        mlp.eval_with_input_grad(&store, &x, 1, &mut out, &mut gin);
        let h = 1e-5;
        for j in 0..4 {
            let mut xp = x.clone();
            xp[j] += h;
            let mut op = vec![0.0; 2];
            mlp.eval(&store, &xp, &mut op);
            let mut xm = x.clone();
            xm[j] -= h;
            let mut om = vec![0.0; 2];
            mlp.eval(&store, &xm, &mut om);
            let fd = (op[1] - om[1]) / (2.0 * h);
            assert!(
                (fd - gin[j]).abs() < 1e-7 * (1.0 + fd.abs()),
                "coord {j}: fd {fd} vs {}",
                gin[j]
            );
        }
    }

    #[test]
    fn input_grad_expression_is_differentiable_in_weights() {
        // the spatial-gradient graph must itself backprop into MLP weights
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "m", 3, 6, 2, 5);
        let x = vec![0.2, -0.1, 0.5];
        let forward = |store: &ParamStore, sink: Option<&mut GradSink>| -> f64 {
            let mut t = Tape::new(store);
            let xv = const_rows(&mut t, 1, 3, x.clone());
            let (y, gin) = mlp.forward_with_input_grad(&mut t, xv, 0);
            let gsq = t.sqr(gin);
            let gsum = t.sum_all(gsq);
            let ysum = t.sum_all(y);
            let out = t.add(gsum, ysum);
            if let Some(sink) = sink {
                t.backward(out, sink);
            }
            t.value(out).item()
        };
        let mut sink = GradSink::new(&store);
        forward(&store, Some(&mut sink));
        let err = finite_diff_check(
            &mut store,
            &mut |s: &ParamStore| forward(s, None),
            &sink,
            64,
            1e-5,
            17,
        );
        assert!(err < 1e-6, "fd error through input-grad graph: {err}");
    }
}
