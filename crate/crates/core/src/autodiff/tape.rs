//! Tensor tape: eager forward evaluation with a recorded op graph for
//! reverse-mode gradients. Tensors are small row-major 2-D blocks; parameter
//! blocks live in a `ParamStore` and are referenced by id, so tapes never
//! copy hash tables.

use std::collections::HashMap;

use crate::rng::rng_stream;
use rand::Rng;

/// Row-major 2-D tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub data: Vec<f64>,
    pub rows: usize,
    pub cols: usize,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Tensor {
        Tensor {
            data: vec![0.0; rows * cols],
            rows,
            cols,
        }
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor {
            data: vec![v],
            rows: 1,
            cols: 1,
        }
    }

    pub fn from_rows(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
        assert_eq!(data.len(), rows * cols);
        Tensor { data, rows, cols }
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }
}

/// One learnable parameter block (a weight matrix, bias, or hash table).
pub struct ParamBlock {
    pub name: String,
    pub data: Vec<f64>,
    pub rows: usize,
    pub cols: usize,
    /// Learning-rate multiplier relative to the optimizer's base rate.
    pub lr_scale: f64,
    /// Frozen blocks are skipped by the optimizer.
    pub frozen: bool,
}

/// Named parameter blocks with stable ordering.
#[derive(Default)]
pub struct ParamStore {
    blocks: Vec<ParamBlock>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    /// Add a block initialized uniformly in [-init_scale, init_scale]
    /// (or zeros when init_scale == 0).
    pub fn add_block(&mut self, name: &str, rows: usize, cols: usize, init_scale: f64, seed: u64) -> usize {
        let mut data = vec![0.0; rows * cols];
        if init_scale != 0.0 {
            let mut rng = rng_stream(seed, &[0x1417, self.blocks.len() as u64]);
            for v in data.iter_mut() {
                *v = rng.gen_range(-init_scale..init_scale);
            }
        }
        self.push(name, rows, cols, data)
    }

    /// Add a block with standard-normal init scaled to 1/sqrt(fan_in).
    pub fn add_block_he(&mut self, name: &str, rows: usize, cols: usize, seed: u64) -> usize {
        let std = (1.0 / rows as f64).sqrt();
        let mut rng = rng_stream(seed, &[0x4e8, self.blocks.len() as u64]);
        let data = (0..rows * cols)
            .map(|_| {
                // Box-Muller
                let u1: f64 = rng.gen_range(1e-12..1.0);
                let u2: f64 = rng.gen_range(0.0..1.0);
                (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos() * std
            })
            .collect();
        self.push(name, rows, cols, data)
    }

    #[cfg(test)]
    pub fn add_block_init(&mut self, name: &str, rows: usize, cols: usize, seed: u64) -> usize {
        self.add_block(name, rows, cols, 1.0, seed)
    }

    fn push(&mut self, name: &str, rows: usize, cols: usize, data: Vec<f64>) -> usize {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter block {name}"
        );
        let id = self.blocks.len();
        self.by_name.insert(name.to_string(), id);
        self.blocks.push(ParamBlock {
            name: name.to_string(),
            data,
            rows,
            cols,
            lr_scale: 1.0,
            frozen: false,
        });
        id
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn block(&self, id: usize) -> &ParamBlock {
        &self.blocks[id]
    }

    pub fn block_mut(&mut self, id: usize) -> &mut ParamBlock {
        &mut self.blocks[id]
    }

    pub fn id_of(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    pub fn set_lr_scale(&mut self, id: usize, s: f64) {
        self.blocks[id].lr_scale = s;
    }

    pub fn set_frozen(&mut self, id: usize, frozen: bool) {
        self.blocks[id].frozen = frozen;
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamBlock> {
        self.blocks.iter()
    }
}

/// Dense gradient accumulators, one per parameter block.
pub struct GradSink {
    pub grads: Vec<Vec<f64>>,
}

impl GradSink {
    pub fn new(store: &ParamStore) -> GradSink {
        GradSink {
            grads: store.blocks.iter().map(|b| vec![0.0; b.data.len()]).collect(),
        }
    }

    pub fn clear(&mut self) {
        for g in self.grads.iter_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.grads.iter_mut() {
            g.iter_mut().for_each(|v| *v *= s);
        }
    }

    /// Index of the first non-finite gradient, if any: (block, offset).
    pub fn first_non_finite(&self) -> Option<(usize, usize)> {
        for (b, g) in self.grads.iter().enumerate() {
            if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                return Some((b, i));
            }
        }
        None
    }
}

pub type NodeId = usize;

enum Op {
    Const,
    /// Copy of a parameter block as a tensor value.
    Param {
        block: usize,
    },
    /// out[i,:] = sum_j w[i*k+j] * table[idx[i*k+j], :]
    GatherWs {
        block: usize,
        idx: Vec<u32>,
        w: Vec<f64>,
        k: usize,
    },
    /// x [n,i] * W(block) [i,o] + b(block) [1,o]
    Linear {
        x: NodeId,
        w: usize,
        b: usize,
    },
    /// x [n,h] * W(block)[i,h]^T -> [n,i]
    MatmulTParam {
        x: NodeId,
        w: usize,
    },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// [n,d] + [1,d]
    AddRow(NodeId, NodeId),
    /// [n,d] * [1,1]
    MulScalar(NodeId, NodeId),
    Scale(NodeId, f64),
    AddConst(NodeId, f64),
    Neg(NodeId),
    Sqr(NodeId),
    Sqrt(NodeId),
    Abs(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Recip(NodeId),
    Softplus(NodeId),
    Sigmoid(NodeId),
    ClampMin(NodeId, f64),
    ClampMax(NodeId, f64),
    SumAll(NodeId),
    SumRows(NodeId),
    SumCols(NodeId),
    ConcatCols(Vec<NodeId>),
    SliceCols {
        x: NodeId,
        start: usize,
        len: usize,
    },
    GatherRows {
        x: NodeId,
        rows: Vec<usize>,
    },
    /// [n,d] scaled per-row by [n,1]
    RowScale(NodeId, NodeId),
    /// sum over columns of a[n,d]*b[n,d] -> [n,1]
    RowDot(NodeId, NodeId),
    /// exclusive prefix sum down a [n,1] column
    CumsumExcl(NodeId),
    /// per-row two-bin shift splat by delays (in bins); overflow dropped
    ShiftSplat {
        x: NodeId,
        delays: Vec<f64>,
    },
    /// 'same' correlation with a fixed kernel aligned at `center`
    Conv1d {
        x: NodeId,
        kernel: Vec<f64>,
        center: usize,
    },
    /// rows of [n,3] scaled to unit length
    NormalizeRows3(NodeId),
    Detach(NodeId),
}

struct Node {
    op: Op,
    val: Tensor,
    needs_grad: bool,
}

/// Recording tape. Values are computed eagerly as ops are issued.
pub struct Tape<'a> {
    store: &'a ParamStore,
    nodes: Vec<Node>,
}

impl<'a> Tape<'a> {
    pub fn new(store: &'a ParamStore) -> Tape<'a> {
        Tape {
            store,
            nodes: Vec::with_capacity(256),
        }
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].val
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        (self.nodes[id].val.rows, self.nodes[id].val.cols)
    }

    fn push(&mut self, op: Op, val: Tensor, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { op, val, needs_grad });
        self.nodes.len() - 1
    }

    fn ng(&self, id: NodeId) -> bool {
        self.nodes[id].needs_grad
    }

    // ---- leaves ----

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Const, t, false)
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.constant(Tensor::scalar(v))
    }

    pub fn param(&mut self, block: usize) -> NodeId {
        let b = self.store.block(block);
        let val = Tensor::from_rows(b.rows, b.cols, b.data.clone());
        self.push(Op::Param { block }, val, true)
    }

    pub fn gather_ws(&mut self, block: usize, idx: Vec<u32>, w: Vec<f64>, k: usize) -> NodeId {
        let b = self.store.block(block);
        let f = b.cols;
        debug_assert_eq!(idx.len(), w.len());
        debug_assert_eq!(idx.len() % k, 0);
        let n = idx.len() / k;
        let mut out = Tensor::zeros(n, f);
        for i in 0..n {
            let dst = &mut out.data[i * f..(i + 1) * f];
            for j in 0..k {
                let wi = w[i * k + j];
                if wi == 0.0 {
                    continue;
                }
                let row = idx[i * k + j] as usize * f;
                let src = &b.data[row..row + f];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += wi * s;
                }
            }
        }
        self.push(Op::GatherWs { block, idx, w, k }, out, true)
    }

    pub fn linear(&mut self, x: NodeId, w: usize, b: usize) -> NodeId {
        let (n, i) = self.shape(x);
        let wb = self.store.block(w);
        let bb = self.store.block(b);
        assert_eq!(wb.rows, i, "linear: in dim mismatch");
        let o = wb.cols;
        assert_eq!(bb.cols, o);
        let mut out = Tensor::zeros(n, o);
        let xv = &self.nodes[x].val;
        for r in 0..n {
            let dst = &mut out.data[r * o..(r + 1) * o];
            dst.copy_from_slice(&bb.data);
            for kk in 0..i {
                let a = xv.data[r * i + kk];
                if a == 0.0 {
                    continue;
                }
                let wrow = &wb.data[kk * o..(kk + 1) * o];
                for (d, ww) in dst.iter_mut().zip(wrow) {
                    *d += a * ww;
                }
            }
        }
        self.push(Op::Linear { x, w, b }, out, true)
    }

    pub fn matmul_t_param(&mut self, x: NodeId, w: usize) -> NodeId {
        let (n, h) = self.shape(x);
        let wb = self.store.block(w);
        assert_eq!(wb.cols, h, "matmul_t_param: dim mismatch");
        let i = wb.rows;
        let mut out = Tensor::zeros(n, i);
        let xv = &self.nodes[x].val;
        for r in 0..n {
            for c in 0..i {
                let wrow = &wb.data[c * h..(c + 1) * h];
                let xrow = &xv.data[r * h..(r + 1) * h];
                out.data[r * i + c] = xrow.iter().zip(wrow).map(|(a, b)| a * b).sum();
            }
        }
        self.push(Op::MatmulTParam { x, w }, out, true)
    }

    // ---- elementwise ----

    fn binary(&mut self, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64, op: Op) -> NodeId {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        assert_eq!((ra, ca), (rb, cb), "shape mismatch in binary op");
        let av = &self.nodes[a].val;
        let bv = &self.nodes[b].val;
        let data = av.data.iter().zip(&bv.data).map(|(&x, &y)| f(x, y)).collect();
        let ng = self.ng(a) || self.ng(b);
        self.push(op, Tensor::from_rows(ra, ca, data), ng)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn add_row(&mut self, x: NodeId, r: NodeId) -> NodeId {
        let (n, d) = self.shape(x);
        let (rr, rc) = self.shape(r);
        assert_eq!((rr, rc), (1, d));
        let xv = &self.nodes[x].val;
        let rv = &self.nodes[r].val;
        let mut out = Tensor::zeros(n, d);
        for i in 0..n {
            for j in 0..d {
                out.data[i * d + j] = xv.data[i * d + j] + rv.data[j];
            }
        }
        let ng = self.ng(x) || self.ng(r);
        self.push(Op::AddRow(x, r), out, ng)
    }

    pub fn mul_scalar(&mut self, x: NodeId, s: NodeId) -> NodeId {
        assert_eq!(self.shape(s), (1, 1));
        let sv = self.nodes[s].val.item();
        let xv = &self.nodes[x].val;
        let out = Tensor {
            data: xv.data.iter().map(|v| v * sv).collect(),
            rows: xv.rows,
            cols: xv.cols,
        };
        let ng = self.ng(x) || self.ng(s);
        self.push(Op::MulScalar(x, s), out, ng)
    }

    fn unary(&mut self, x: NodeId, f: impl Fn(f64) -> f64, op: Op) -> NodeId {
        let xv = &self.nodes[x].val;
        let out = Tensor {
            data: xv.data.iter().map(|&v| f(v)).collect(),
            rows: xv.rows,
            cols: xv.cols,
        };
        let ng = self.ng(x);
        self.push(op, out, ng)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_const(&mut self, x: NodeId, c: f64) -> NodeId {
        self.unary(x, |v| v + c, Op::AddConst(x, c))
    }

    pub fn neg(&mut self, x: NodeId) -> NodeId {
        self.unary(x, |v| -v, Op::Neg(x))
    }

    pub fn sqr(&mut self, x: NodeId) -> NodeId {
        self.unary(x, |v| v * v, Op::Sqr(x))
    }

    pub fn sqrt(&mut self, x: NodeId) -> NodeId {
        self.unary(x, f64::sqrt, Op::Sqrt(x))
    }

    pub fn abs(&mut self, x: NodeId) -> NodeId {
        self.unary(x, f64::abs, Op::Abs(x))
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: NodeId) -> NodeId {
        self.unary(x, f64::ln, Op::Log(x))
    }

    pub fn recip(&mut self, x: NodeId) -> NodeId {
        self.unary(x, |v| 1.0 / v, Op::Recip(x))
    }

    pub fn softplus(&mut self, x: NodeId) -> NodeId {
        self.unary(x, stable_softplus, Op::Softplus(x))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.unary(x, stable_sigmoid, Op::Sigmoid(x))
    }

    pub fn clamp_min(&mut self, x: NodeId, lo: f64) -> NodeId {
        self.unary(x, |v| v.max(lo), Op::ClampMin(x, lo))
    }

    pub fn clamp_max(&mut self, x: NodeId, hi: f64) -> NodeId {
        self.unary(x, |v| v.min(hi), Op::ClampMax(x, hi))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let r = self.recip(b);
        self.mul(a, r)
    }

    // ---- shape / reduction ----

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.nodes[x].val.data.iter().sum();
        let ng = self.ng(x);
        self.push(Op::SumAll(x), Tensor::scalar(s), ng)
    }

    pub fn sum_rows(&mut self, x: NodeId) -> NodeId {
        let (n, d) = self.shape(x);
        let xv = &self.nodes[x].val;
        let mut out = Tensor::zeros(n, 1);
        for i in 0..n {
            out.data[i] = xv.data[i * d..(i + 1) * d].iter().sum();
        }
        let ng = self.ng(x);
        self.push(Op::SumRows(x), out, ng)
    }

    pub fn sum_cols(&mut self, x: NodeId) -> NodeId {
        let (n, d) = self.shape(x);
        let xv = &self.nodes[x].val;
        let mut out = Tensor::zeros(1, d);
        for i in 0..n {
            for j in 0..d {
                out.data[j] += xv.data[i * d + j];
            }
        }
        let ng = self.ng(x);
        self.push(Op::SumCols(x), out, ng)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let n = self.shape(parts[0]).0;
        let total: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Tensor::zeros(n, total);
        let mut off = 0;
        for &p in parts {
            let (pn, pd) = self.shape(p);
            assert_eq!(pn, n, "concat_cols row mismatch");
            let pv = &self.nodes[p].val;
            for i in 0..n {
                out.data[i * total + off..i * total + off + pd]
                    .copy_from_slice(&pv.data[i * pd..(i + 1) * pd]);
            }
            off += pd;
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Op::ConcatCols(parts.to_vec()), out, ng)
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let (n, d) = self.shape(x);
        assert!(start + len <= d);
        let xv = &self.nodes[x].val;
        let mut out = Tensor::zeros(n, len);
        for i in 0..n {
            out.data[i * len..(i + 1) * len]
                .copy_from_slice(&xv.data[i * d + start..i * d + start + len]);
        }
        let ng = self.ng(x);
        self.push(Op::SliceCols { x, start, len }, out, ng)
    }

    pub fn gather_rows(&mut self, x: NodeId, rows: Vec<usize>) -> NodeId {
        let (_, d) = self.shape(x);
        let xv = &self.nodes[x].val;
        let mut out = Tensor::zeros(rows.len(), d);
        for (i, &r) in rows.iter().enumerate() {
            out.data[i * d..(i + 1) * d].copy_from_slice(&xv.data[r * d..(r + 1) * d]);
        }
        let ng = self.ng(x);
        self.push(Op::GatherRows { x, rows }, out, ng)
    }

    pub fn row_scale(&mut self, x: NodeId, s: NodeId) -> NodeId {
        let (n, d) = self.shape(x);
        assert_eq!(self.shape(s), (n, 1));
        let xv = &self.nodes[x].val;
        let sv = &self.nodes[s].val;
        let mut out = Tensor::zeros(n, d);
        for i in 0..n {
            let w = sv.data[i];
            for j in 0..d {
                out.data[i * d + j] = xv.data[i * d + j] * w;
            }
        }
        let ng = self.ng(x) || self.ng(s);
        self.push(Op::RowScale(x, s), out, ng)
    }

    pub fn row_dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (n, d) = self.shape(a);
        assert_eq!(self.shape(b), (n, d));
        let av = &self.nodes[a].val;
        let bv = &self.nodes[b].val;
        let mut out = Tensor::zeros(n, 1);
        for i in 0..n {
            out.data[i] = (0..d).map(|j| av.data[i * d + j] * bv.data[i * d + j]).sum();
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::RowDot(a, b), out, ng)
    }

    pub fn cumsum_excl(&mut self, x: NodeId) -> NodeId {
        let (n, d) = self.shape(x);
        assert_eq!(d, 1, "cumsum_excl expects a column");
        let xv = &self.nodes[x].val;
        let mut out = Tensor::zeros(n, 1);
        let mut acc = 0.0;
        for i in 0..n {
            out.data[i] = acc;
            acc += xv.data[i];
        }
        let ng = self.ng(x);
        self.push(Op::CumsumExcl(x), out, ng)
    }

    /// Shift row r of x toward later bins by delays[r] (in bins), linear
    /// two-bin splat, dropping mass past the last bin.
    pub fn shift_splat(&mut self, x: NodeId, delays: Vec<f64>) -> NodeId {
        let (n, bins) = self.shape(x);
        assert_eq!(delays.len(), n);
        let xv = &self.nodes[x].val;
        let mut out = Tensor::zeros(n, bins);
        for r in 0..n {
            shift_row(
                &xv.data[r * bins..(r + 1) * bins],
                &mut out.data[r * bins..(r + 1) * bins],
                delays[r],
            );
        }
        let ng = self.ng(x);
        self.push(Op::ShiftSplat { x, delays }, out, ng)
    }

    /// Correlate each row with `kernel`, output bin b gets
    /// sum_l kernel[l] * x[b - (l - center)].
    pub fn conv1d(&mut self, x: NodeId, kernel: Vec<f64>, center: usize) -> NodeId {
        let (n, bins) = self.shape(x);
        let xv = &self.nodes[x].val;
        let mut out = Tensor::zeros(n, bins);
        for r in 0..n {
            let src = &xv.data[r * bins..(r + 1) * bins];
            let dst = &mut out.data[r * bins..(r + 1) * bins];
            for (l, &kv) in kernel.iter().enumerate() {
                if kv == 0.0 {
                    continue;
                }
                let off = l as i64 - center as i64;
                for b in 0..bins as i64 {
                    let s = b - off;
                    if s >= 0 && s < bins as i64 {
                        dst[b as usize] += kv * src[s as usize];
                    }
                }
            }
        }
        let ng = self.ng(x);
        self.push(Op::Conv1d { x, kernel, center }, out, ng)
    }

    pub fn normalize_rows3(&mut self, x: NodeId) -> NodeId {
        let (n, d) = self.shape(x);
        assert_eq!(d, 3);
        let xv = &self.nodes[x].val;
        let mut out = Tensor::zeros(n, 3);
        for i in 0..n {
            let r = &xv.data[i * 3..(i + 1) * 3];
            let norm = (r[0] * r[0] + r[1] * r[1] + r[2] * r[2]).sqrt().max(1e-12);
            for j in 0..3 {
                out.data[i * 3 + j] = r[j] / norm;
            }
        }
        let ng = self.ng(x);
        self.push(Op::NormalizeRows3(x), out, ng)
    }

    pub fn detach(&mut self, x: NodeId) -> NodeId {
        let val = self.nodes[x].val.clone();
        self.push(Op::Detach(x), val, false)
    }

    /// Mean over all entries.
    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let n = self.nodes[x].val.data.len() as f64;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }

    // ---- backward ----

    /// Reverse-mode gradients of the scalar node `out` into `sink`.
    pub fn backward(&self, out: NodeId, sink: &mut GradSink) {
        assert_eq!(self.shape(out), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out] = Some(Tensor::scalar(1.0));
        for id in (0..=out).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            if !self.nodes[id].needs_grad {
                continue;
            }
            self.accumulate(id, &g, &mut grads, sink);
        }
    }

    fn add_grad(&self, grads: &mut Vec<Option<Tensor>>, id: NodeId, delta: Tensor) {
        if !self.nodes[id].needs_grad {
            return;
        }
        match &mut grads[id] {
            Some(g) => {
                for (a, b) in g.data.iter_mut().zip(&delta.data) {
                    *a += b;
                }
            }
            slot => *slot = Some(delta),
        }
    }

    #[allow(clippy::too_many_lines)]
    fn accumulate(&self, id: NodeId, g: &Tensor, grads: &mut Vec<Option<Tensor>>, sink: &mut GradSink) {
        let val = |n: NodeId| &self.nodes[n].val;
        match &self.nodes[id].op {
            Op::Const | Op::Detach(_) => {}
            Op::Param { block } => {
                for (a, b) in sink.grads[*block].iter_mut().zip(&g.data) {
                    *a += b;
                }
            }
            Op::GatherWs { block, idx, w, k } => {
                let f = self.store.block(*block).cols;
                let gb = &mut sink.grads[*block];
                let n = idx.len() / k;
                for i in 0..n {
                    let grow = &g.data[i * f..(i + 1) * f];
                    for j in 0..*k {
                        let wi = w[i * k + j];
                        if wi == 0.0 {
                            continue;
                        }
                        let row = idx[i * k + j] as usize * f;
                        for (c, &gv) in grow.iter().enumerate() {
                            gb[row + c] += wi * gv;
                        }
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let wb = self.store.block(*w);
                let (n, i) = (val(*x).rows, val(*x).cols);
                let o = wb.cols;
                // grad x = g * W^T
                if self.ng(*x) {
                    let mut gx = Tensor::zeros(n, i);
                    for r in 0..n {
                        for kk in 0..i {
                            let wrow = &wb.data[kk * o..(kk + 1) * o];
                            let grow = &g.data[r * o..(r + 1) * o];
                            gx.data[r * i + kk] =
                                grow.iter().zip(wrow).map(|(a, b)| a * b).sum();
                        }
                    }
                    self.add_grad(grads, *x, gx);
                }
                // grad W = X^T * g ; grad b = column sums of g
                let xv = val(*x);
                let gw = &mut sink.grads[*w];
                for r in 0..n {
                    for kk in 0..i {
                        let a = xv.data[r * i + kk];
                        if a == 0.0 {
                            continue;
                        }
                        let grow = &g.data[r * o..(r + 1) * o];
                        let wrow = &mut gw[kk * o..(kk + 1) * o];
                        for (d, gv) in wrow.iter_mut().zip(grow) {
                            *d += a * gv;
                        }
                    }
                }
                let gbv = &mut sink.grads[*b];
                for r in 0..n {
                    for c in 0..o {
                        gbv[c] += g.data[r * o + c];
                    }
                }
            }
            Op::MatmulTParam { x, w } => {
                let wb = self.store.block(*w);
                let (n, h) = (val(*x).rows, val(*x).cols);
                let i = wb.rows;
                if self.ng(*x) {
                    // gx = g * W
                    let mut gx = Tensor::zeros(n, h);
                    for r in 0..n {
                        for c in 0..i {
                            let gv = g.data[r * i + c];
                            if gv == 0.0 {
                                continue;
                            }
                            let wrow = &wb.data[c * h..(c + 1) * h];
                            for kk in 0..h {
                                gx.data[r * h + kk] += gv * wrow[kk];
                            }
                        }
                    }
                    self.add_grad(grads, *x, gx);
                }
                // gW[c,k] += sum_r g[r,c] * x[r,k]
                let xv = val(*x);
                let gw = &mut sink.grads[*w];
                for r in 0..n {
                    for c in 0..i {
                        let gv = g.data[r * i + c];
                        if gv == 0.0 {
                            continue;
                        }
                        let xrow = &xv.data[r * h..(r + 1) * h];
                        let wrow = &mut gw[c * h..(c + 1) * h];
                        for (d, xvv) in wrow.iter_mut().zip(xrow) {
                            *d += gv * xvv;
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                self.add_grad(grads, *a, g.clone());
                self.add_grad(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.add_grad(grads, *a, g.clone());
                let neg = Tensor {
                    data: g.data.iter().map(|v| -v).collect(),
                    rows: g.rows,
                    cols: g.cols,
                };
                self.add_grad(grads, *b, neg);
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    let bv = val(*b);
                    let ga = Tensor {
                        data: g.data.iter().zip(&bv.data).map(|(x, y)| x * y).collect(),
                        rows: g.rows,
                        cols: g.cols,
                    };
                    self.add_grad(grads, *a, ga);
                }
                if self.ng(*b) {
                    let av = val(*a);
                    let gb = Tensor {
                        data: g.data.iter().zip(&av.data).map(|(x, y)| x * y).collect(),
                        rows: g.rows,
                        cols: g.cols,
                    };
                    self.add_grad(grads, *b, gb);
                }
            }
            Op::AddRow(x, r) => {
                self.add_grad(grads, *x, g.clone());
                if self.ng(*r) {
                    let (n, d) = (g.rows, g.cols);
                    let mut gr = Tensor::zeros(1, d);
                    for i in 0..n {
                        for j in 0..d {
                            gr.data[j] += g.data[i * d + j];
                        }
                    }
                    self.add_grad(grads, *r, gr);
                }
            }
            Op::MulScalar(x, s) => {
                let sv = val(*s).item();
                if self.ng(*x) {
                    let gx = Tensor {
                        data: g.data.iter().map(|v| v * sv).collect(),
                        rows: g.rows,
                        cols: g.cols,
                    };
                    self.add_grad(grads, *x, gx);
                }
                if self.ng(*s) {
                    let xv = val(*x);
                    let dot: f64 = g.data.iter().zip(&xv.data).map(|(a, b)| a * b).sum();
                    self.add_grad(grads, *s, Tensor::scalar(dot));
                }
            }
            Op::Scale(x, c) => {
                let gx = Tensor {
                    data: g.data.iter().map(|v| v * c).collect(),
                    rows: g.rows,
                    cols: g.cols,
                };
                self.add_grad(grads, *x, gx);
            }
            Op::AddConst(x, _) => self.add_grad(grads, *x, g.clone()),
            Op::Neg(x) => {
                let gx = Tensor {
                    data: g.data.iter().map(|v| -v).collect(),
                    rows: g.rows,
                    cols: g.cols,
                };
                self.add_grad(grads, *x, gx);
            }
            Op::Sqr(x) => {
                let xv = val(*x);
                let gx = Tensor {
                    data: g
                        .data
                        .iter()
                        .zip(&xv.data)
                        .map(|(gv, xvv)| 2.0 * xvv * gv)
                        .collect(),
                    rows: g.rows,
                    cols: g.cols,
                };
                self.add_grad(grads, *x, gx);
            }
            Op::Sqrt(x) => {
                let yv = &self.nodes[id].val;
                let gx = Tensor {
                    data: g
                        .data
                        .iter()
                        .zip(&yv.data)
                        .map(|(gv, y)| gv * 0.5 / y.max(1e-12))
                        .collect(),
                    rows: g.rows,
                    cols: g.cols,
                };
                self.add_grad(grads, *x, gx);
            }
            Op::Abs(x) => {
                let xv = val(*x);
                let gx = Tensor {
                    data: g
                        .data
                        .iter()
                        .zip(&xv.data)
                        .map(|(gv, xvv)| gv * xvv.signum())
                        .collect(),
                    rows: g.rows,
                    cols: g.cols,
                };
                self.add_grad(grads, *x, gx);
            }
            Op::Exp(x) => {
                let yv = &self.nodes[id].val;
                let gx = Tensor {
                    data: g.data.iter().zip(&yv.data).map(|(gv, y)| gv * y).collect(),
                    rows: g.rows,
                    cols: g.cols,
                };
                self.add_grad(grads, *x, gx);
            }
            Op::Log(x) => {
                let xv = val(*x);
                let gx = Tensor {
                    data: g.data.iter().zip(&xv.data).map(|(gv, xvv)| gv / xvv).collect(),
                    rows: g.rows,
                    cols: g.cols,
                };
                self.add_grad(grads, *x, gx);
            }
            Op::Recip(x) => {
                let xv = val(*x);
                let gx = Tensor {
                    data: g
                        .data
                        .iter()
                        .zip(&xv.data)
                        .map(|(gv, xvv)| -gv / (xvv * xvv))
                        .collect(),
                    rows: g.rows,
                    cols: g.cols,
                };
                self.add_grad(grads, *x, gx);
            }
            Op::Softplus(x) => {
                let xv = val(*x);
                let gx = Tensor {
                    data: g
                        .data
                        .iter()
                        .zip(&xv.data)
                        .map(|(gv, xvv)| gv * stable_sigmoid(*xvv))
                        .collect(),
                    rows: g.rows,
                    cols: g.cols,
                };
                self.add_grad(grads, *x, gx);
            }
            Op::Sigmoid(x) => {
                let yv = &self.nodes[id].val;
                let gx = Tensor {
                    data: g
                        .data
                        .iter()
                        .zip(&yv.data)
                        .map(|(gv, y)| gv * y * (1.0 - y))
                        .collect(),
                    rows: g.rows,
                    cols: g.cols,
                };
                self.add_grad(grads, *x, gx);
            }
            Op::ClampMin(x, lo) => {
                let xv = val(*x);
                let gx = Tensor {
                    data: g
                        .data
                        .iter()
                        .zip(&xv.data)
                        .map(|(gv, xvv)| if *xvv > *lo { *gv } else { 0.0 })
                        .collect(),
                    rows: g.rows,
                    cols: g.cols,
                };
                self.add_grad(grads, *x, gx);
            }
            Op::ClampMax(x, hi) => {
                let xv = val(*x);
                let gx = Tensor {
                    data: g
                        .data
                        .iter()
                        .zip(&xv.data)
                        .map(|(gv, xvv)| if *xvv < *hi { *gv } else { 0.0 })
                        .collect(),
                    rows: g.rows,
                    cols: g.cols,
                };
                self.add_grad(grads, *x, gx);
            }
            Op::SumAll(x) => {
                let xv = val(*x);
                let gv = g.item();
                let gx = Tensor {
                    data: vec![gv; xv.data.len()],
                    rows: xv.rows,
                    cols: xv.cols,
                };
                self.add_grad(grads, *x, gx);
            }
            Op::SumRows(x) => {
                let xv = val(*x);
                let (n, d) = (xv.rows, xv.cols);
                let mut gx = Tensor::zeros(n, d);
                for i in 0..n {
                    for j in 0..d {
                        gx.data[i * d + j] = g.data[i];
                    }
                }
                self.add_grad(grads, *x, gx);
            }
            Op::SumCols(x) => {
                let xv = val(*x);
                let (n, d) = (xv.rows, xv.cols);
                let mut gx = Tensor::zeros(n, d);
                for i in 0..n {
                    gx.data[i * d..(i + 1) * d].copy_from_slice(&g.data);
                }
                self.add_grad(grads, *x, gx);
            }
            Op::ConcatCols(parts) => {
                let total = self.nodes[id].val.cols;
                let n = self.nodes[id].val.rows;
                let mut off = 0;
                for &p in parts {
                    let pd = val(p).cols;
                    if self.ng(p) {
                        let mut gp = Tensor::zeros(n, pd);
                        for i in 0..n {
                            gp.data[i * pd..(i + 1) * pd]
                                .copy_from_slice(&g.data[i * total + off..i * total + off + pd]);
                        }
                        self.add_grad(grads, p, gp);
                    }
                    off += pd;
                }
            }
            Op::SliceCols { x, start, len } => {
                let xv = val(*x);
                let (n, d) = (xv.rows, xv.cols);
                let mut gx = Tensor::zeros(n, d);
                for i in 0..n {
                    gx.data[i * d + start..i * d + start + len]
                        .copy_from_slice(&g.data[i * len..(i + 1) * len]);
                }
                self.add_grad(grads, *x, gx);
            }
            Op::GatherRows { x, rows } => {
                let xv = val(*x);
                let d = xv.cols;
                let mut gx = Tensor::zeros(xv.rows, d);
                for (i, &r) in rows.iter().enumerate() {
                    for j in 0..d {
                        gx.data[r * d + j] += g.data[i * d + j];
                    }
                }
                self.add_grad(grads, *x, gx);
            }
            Op::RowScale(x, s) => {
                let (n, d) = (g.rows, g.cols);
                if self.ng(*x) {
                    let sv = val(*s);
                    let mut gx = Tensor::zeros(n, d);
                    for i in 0..n {
                        for j in 0..d {
                            gx.data[i * d + j] = g.data[i * d + j] * sv.data[i];
                        }
                    }
                    self.add_grad(grads, *x, gx);
                }
                if self.ng(*s) {
                    let xv = val(*x);
                    let mut gs = Tensor::zeros(n, 1);
                    for i in 0..n {
                        gs.data[i] = (0..d).map(|j| g.data[i * d + j] * xv.data[i * d + j]).sum();
                    }
                    self.add_grad(grads, *s, gs);
                }
            }
            Op::RowDot(a, b) => {
                let (n, d) = (val(*a).rows, val(*a).cols);
                if self.ng(*a) {
                    let bv = val(*b);
                    let mut ga = Tensor::zeros(n, d);
                    for i in 0..n {
                        for j in 0..d {
                            ga.data[i * d + j] = g.data[i] * bv.data[i * d + j];
                        }
                    }
                    self.add_grad(grads, *a, ga);
                }
                if self.ng(*b) {
                    let av = val(*a);
                    let mut gb = Tensor::zeros(n, d);
                    for i in 0..n {
                        for j in 0..d {
                            gb.data[i * d + j] = g.data[i] * av.data[i * d + j];
                        }
                    }
                    self.add_grad(grads, *b, gb);
                }
            }
            Op::CumsumExcl(x) => {
                let n = g.rows;
                let mut gx = Tensor::zeros(n, 1);
                let mut acc = 0.0;
                for i in (0..n).rev() {
                    gx.data[i] = acc;
                    acc += g.data[i];
                }
                // note: out[i] depends on x[j<i], so gx[i] = sum_{j>i} g[j]
                self.add_grad(grads, *x, gx);
            }
            Op::ShiftSplat { x, delays } => {
                let (n, bins) = (g.rows, g.cols);
                let mut gx = Tensor::zeros(n, bins);
                for r in 0..n {
                    let db = delays[r];
                    let whole = db.floor() as i64;
                    let frac = db - db.floor();
                    let grow = &g.data[r * bins..(r + 1) * bins];
                    let gxr = &mut gx.data[r * bins..(r + 1) * bins];
                    for b in 0..bins as i64 {
                        let j = b + whole;
                        let mut acc = 0.0;
                        if j >= 0 && j < bins as i64 {
                            acc += (1.0 - frac) * grow[j as usize];
                        }
                        if frac > 0.0 && j + 1 >= 0 && j + 1 < bins as i64 {
                            acc += frac * grow[(j + 1) as usize];
                        }
                        gxr[b as usize] = acc;
                    }
                }
                self.add_grad(grads, *x, gx);
            }
            Op::Conv1d { x, kernel, center } => {
                let (n, bins) = (g.rows, g.cols);
                let mut gx = Tensor::zeros(n, bins);
                for r in 0..n {
                    let grow = &g.data[r * bins..(r + 1) * bins];
                    let gxr = &mut gx.data[r * bins..(r + 1) * bins];
                    for (l, &kv) in kernel.iter().enumerate() {
                        if kv == 0.0 {
                            continue;
                        }
                        let off = l as i64 - *center as i64;
                        for s in 0..bins as i64 {
                            let b = s + off;
                            if b >= 0 && b < bins as i64 {
                                gxr[s as usize] += kv * grow[b as usize];
                            }
                        }
                    }
                }
                self.add_grad(grads, *x, gx);
            }
            Op::NormalizeRows3(x) => {
                let xv = val(*x);
                let yv = &self.nodes[id].val;
                let n = xv.rows;
                let mut gx = Tensor::zeros(n, 3);
                for i in 0..n {
                    let r = &xv.data[i * 3..(i + 1) * 3];
                    let u = &yv.data[i * 3..(i + 1) * 3];
                    let norm = (r[0] * r[0] + r[1] * r[1] + r[2] * r[2]).sqrt().max(1e-12);
                    let gu = &g.data[i * 3..(i + 1) * 3];
                    let udotg = u[0] * gu[0] + u[1] * gu[1] + u[2] * gu[2];
                    for j in 0..3 {
                        gx.data[i * 3 + j] = (gu[j] - u[j] * udotg) / norm;
                    }
                }
                self.add_grad(grads, *x, gx);
            }
        }
    }
}

pub(crate) fn stable_softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn shift_row(src: &[f64], dst: &mut [f64], delay_bins: f64) {
    let whole = delay_bins.floor();
    let frac = delay_bins - whole;
    let whole = whole as i64;
    let n = src.len() as i64;
    for (b, &v) in src.iter().enumerate() {
        if v == 0.0 {
            continue;
        }
        let j = b as i64 + whole;
        if j >= 0 && j < n {
            dst[j as usize] += v * (1.0 - frac);
        }
        if frac > 0.0 && j + 1 >= 0 && j + 1 < n {
            dst[(j + 1) as usize] += v * frac;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_check;

    /// Builds a small composite function exercising most ops and checks the
    /// full gradient against central differences.
    #[test]
    fn composite_ops_pass_fd() {
        let mut store = ParamStore::new();
        let table = store.add_block("table", 6, 2, 0.5, 1);
        let w1 = store.add_block_he("w1", 4, 5, 2);
        let b1 = store.add_block("b1", 1, 5, 0.1, 3);
        let forward = |store: &ParamStore, sink: Option<&mut GradSink>| -> f64 {
            let mut t = Tape::new(store);
            let idx = vec![0u32, 2, 1, 3, 4, 5];
            let w = vec![0.5, 0.5, 0.25, 0.75, 1.0, 0.0];
            let feat = t.gather_ws(table, idx, w, 2); // [3,2]
            let sq = t.sqr(feat);
            let more = t.concat_cols(&[feat, sq]); // [3,4]
            let lin = t.linear(more, w1, b1); // [3,5]
            let act = t.softplus(lin);
            let sg = t.sigmoid(act);
            let col = t.sum_rows(sg); // [3,1]
            let cs = t.cumsum_excl(col);
            let both = t.mul(col, cs);
            let e = t.exp(both);
            let shifted_in = t.concat_cols(&[e, col, cs]); // [3,3]
            let sh = t.shift_splat(shifted_in, vec![0.5, 1.0, 0.25]);
            let k = t.conv1d(sh, vec![0.25, 0.5, 0.25], 1);
            let nrm = t.normalize_rows3(k);
            let d = t.row_dot(nrm, k);
            let s = t.sum_all(d);
            let l = t.log(s);
            let sc = t.scale(l, 1.3);
            let out = t.add_const(sc, 0.1);
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
            80,
            1e-4,
            7,
        );
        assert!(err < 1e-6, "composite fd error {err}");
    }

    #[test]
    fn gather_rows_and_row_scale_fd() {
        let mut store = ParamStore::new();
        let x = store.add_block("x", 4, 3, 1.0, 11);
        let forward = |store: &ParamStore, sink: Option<&mut GradSink>| -> f64 {
            let mut t = Tape::new(store);
            let xv = t.param(x);
            let picked = t.gather_rows(xv, vec![2, 0, 2]);
            let s = t.sum_rows(picked);
            let scaled = t.row_scale(picked, s);
            let total = t.sum_all(xv);
            let m = t.mul_scalar(scaled, total);
            let out = t.sum_all(m);
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
            24,
            1e-5,
            9,
        );
        assert!(err < 1e-6, "gather/scale fd error {err}");
    }
}
