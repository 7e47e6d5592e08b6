//! Multi-resolution hash grid encoding with trilinear interpolation.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::autodiff::{NodeId, ParamStore, Tape};
use crate::math::Vec3;

static OOB_WARNINGS: AtomicU64 = AtomicU64::new(0);

/// Count of out-of-bounds queries that were clamped (process lifetime).
pub fn oob_clamp_count() -> u64 {
    OOB_WARNINGS.load(Ordering::Relaxed)
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct HashGridConfig {
    pub resolutions: Vec<usize>,
    pub feat_dim: usize,
    pub table_size_log2: u32,
}

impl HashGridConfig {
    /// Geometric resolution ladder from `base` to `finest`.
    pub fn geometric(
        levels: usize,
        base: usize,
        finest: usize,
        feat_dim: usize,
        table_size_log2: u32,
    ) -> HashGridConfig {
        assert!(levels >= 1);
        let mut resolutions = Vec::with_capacity(levels);
        if levels == 1 {
            resolutions.push(finest);
        } else {
            let g = (finest as f64 / base as f64).powf(1.0 / (levels - 1) as f64);
            for l in 0..levels {
                let r = (base as f64 * g.powi(l as i32)).round() as usize;
                resolutions.push(r.max(1));
            }
            // enforce strictly increasing after rounding
            for l in 1..levels {
                if resolutions[l] <= resolutions[l - 1] {
                    resolutions[l] = resolutions[l - 1] + 1;
                }
            }
        }
        HashGridConfig {
            resolutions,
            feat_dim,
            table_size_log2,
        }
    }

    pub fn levels(&self) -> usize {
        self.resolutions.len()
    }

    pub fn finest_resolution(&self) -> usize {
        *self.resolutions.last().unwrap()
    }

    pub fn table_size(&self) -> usize {
        1usize << self.table_size_log2
    }

    pub fn out_dim(&self) -> usize {
        self.levels() * self.feat_dim
    }

    pub fn validate(&self) -> bool {
        self.resolutions.windows(2).all(|w| w[0] < w[1]) && self.feat_dim >= 1
    }
}

/// A hash grid bound to one parameter block in the store.
#[derive(Clone, Debug)]
pub struct HashGrid {
    pub cfg: HashGridConfig,
    pub block: usize,
    level_offsets: Vec<usize>,
    level_entries: Vec<usize>,
}

const P2: u64 = 2_654_435_761;
const P3: u64 = 805_459_861;

impl HashGrid {
    pub fn new(store: &mut ParamStore, name: &str, cfg: HashGridConfig, seed: u64) -> HashGrid {
        assert!(cfg.validate(), "invalid hash grid config");
        let t = cfg.table_size();
        let mut level_offsets = Vec::new();
        let mut level_entries = Vec::new();
        let mut total = 0usize;
        for &res in &cfg.resolutions {
            let verts = res + 1;
            let dense = verts
                .checked_mul(verts)
                .and_then(|v| v.checked_mul(verts))
                .unwrap_or(usize::MAX);
            let entries = dense.min(t);
            level_offsets.push(total);
            level_entries.push(entries);
            total += entries;
        }
        let block = store.add_block(name, total, cfg.feat_dim, 1e-4, seed);
        HashGrid {
            cfg,
            block,
            level_offsets,
            level_entries,
        }
    }

    fn vertex_index(&self, level: usize, res: usize, c: [usize; 3]) -> usize {
        let verts = res + 1;
        let dense = verts * verts * verts;
        let local = if dense <= self.level_entries[level] {
            (c[0] * verts + c[1]) * verts + c[2]
        } else {
            let h = (c[0] as u64)
                ^ (c[1] as u64).wrapping_mul(P2)
                ^ (c[2] as u64).wrapping_mul(P3);
            (h as usize) & (self.level_entries[level] - 1)
        };
        self.level_offsets[level] + local
    }

    /// Corner indices and trilinear weights for one query point at one level.
    /// When `grad_axis` is Some(a), the weights are the derivative of the
    /// trilinear weights w.r.t. normalized coordinate a (already scaled by
    /// the level resolution).
    fn corners(
        &self,
        level: usize,
        x: Vec3,
        grad_axis: Option<usize>,
        idx: &mut Vec<u32>,
        w: &mut Vec<f64>,
    ) {
        let res = self.cfg.resolutions[level];
        let p = clamp01(x) * res as f64;
        let cell = [
            (p.x.floor() as usize).min(res - 1),
            (p.y.floor() as usize).min(res - 1),
            (p.z.floor() as usize).min(res - 1),
        ];
        let u = [
            p.x - cell[0] as f64,
            p.y - cell[1] as f64,
            p.z - cell[2] as f64,
        ];
        for corner in 0..8usize {
            let b = [(corner >> 2) & 1, (corner >> 1) & 1, corner & 1];
            let c = [cell[0] + b[0], cell[1] + b[1], cell[2] + b[2]];
            let mut weight = 1.0;
            match grad_axis {
                None => {
                    for a in 0..3 {
                        weight *= if b[a] == 1 { u[a] } else { 1.0 - u[a] };
                    }
                }
                Some(ga) => {
                    for a in 0..3 {
                        if a == ga {
                            weight *= if b[a] == 1 { 1.0 } else { -1.0 };
                        } else {
                            weight *= if b[a] == 1 { u[a] } else { 1.0 - u[a] };
                        }
                    }
                    weight *= res as f64;
                }
            }
            idx.push(self.vertex_index(level, res, c) as u32);
            w.push(weight);
        }
    }

    /// Tape encoding of a batch of normalized positions: [n, levels*feat].
    pub fn encode_tape(&self, t: &mut Tape, xs: &[Vec3]) -> NodeId {
        self.encode_tape_axis(t, xs, None)
    }

    /// Tape encoding of d feat / d x_axis (normalized coords).
    pub fn encode_tape_grad(&self, t: &mut Tape, xs: &[Vec3], axis: usize) -> NodeId {
        self.encode_tape_axis(t, xs, Some(axis))
    }

    fn encode_tape_axis(&self, t: &mut Tape, xs: &[Vec3], axis: Option<usize>) -> NodeId {
        let mut parts = Vec::with_capacity(self.cfg.levels());
        for level in 0..self.cfg.levels() {
            let mut idx = Vec::with_capacity(xs.len() * 8);
            let mut w = Vec::with_capacity(xs.len() * 8);
            for &x in xs {
                self.corners(level, x, axis, &mut idx, &mut w);
            }
            parts.push(t.gather_ws(self.block, idx, w, 8));
        }
        t.concat_cols(&parts)
    }

    /// Plain encoding of one position into `out` (len = out_dim).
    pub fn encode_plain(&self, store: &ParamStore, x: Vec3, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.cfg.out_dim());
        let f = self.cfg.feat_dim;
        let table = &store.block(self.block).data;
        let mut idx = Vec::with_capacity(8);
        let mut w = Vec::with_capacity(8);
        for level in 0..self.cfg.levels() {
            idx.clear();
            w.clear();
            self.corners(level, x, None, &mut idx, &mut w);
            let dst = &mut out[level * f..(level + 1) * f];
            dst.iter_mut().for_each(|v| *v = 0.0);
            for j in 0..8 {
                let row = idx[j] as usize * f;
                let wj = w[j];
                for (d, s) in dst.iter_mut().zip(&table[row..row + f]) {
                    *d += wj * s;
                }
            }
        }
    }

    /// Plain encoding plus spatial gradient rows (3 x out_dim).
    pub fn encode_plain_with_grad(
        &self,
        store: &ParamStore,
        x: Vec3,
        out: &mut [f64],
        gout: &mut [Vec<f64>; 3],
    ) {
        self.encode_plain(store, x, out);
        let f = self.cfg.feat_dim;
        let table = &store.block(self.block).data;
        let mut idx = Vec::with_capacity(8);
        let mut w = Vec::with_capacity(8);
        for (axis, gaxis) in gout.iter_mut().enumerate() {
            debug_assert_eq!(gaxis.len(), self.cfg.out_dim());
            for level in 0..self.cfg.levels() {
                idx.clear();
                w.clear();
                self.corners(level, x, Some(axis), &mut idx, &mut w);
                let dst = &mut gaxis[level * f..(level + 1) * f];
                dst.iter_mut().for_each(|v| *v = 0.0);
                for j in 0..8 {
                    let row = idx[j] as usize * f;
                    let wj = w[j];
                    for (d, s) in dst.iter_mut().zip(&table[row..row + f]) {
                        *d += wj * s;
                    }
                }
            }
        }
    }
}

fn clamp01(x: Vec3) -> Vec3 {
    let c = Vec3 {
        x: x.x.clamp(0.0, 1.0),
        y: x.y.clamp(0.0, 1.0),
        z: x.z.clamp(0.0, 1.0),
    };
    if c != x {
        let prev = OOB_WARNINGS.fetch_add(1, Ordering::Relaxed);
        if prev == 0 {
            log::warn!("hash grid query outside [0,1]^3 clamped (further warnings suppressed)");
        }
    }
    c
}
