//! The learnable scene representation: geometry, appearance, materials,
//! radiance-cache heads, and the vMF sampler decoder, all backed by one
//! parameter store.

use crate::autodiff::{NodeId, ParamStore, Tape};
use crate::brdf::{DisneyGgx, VmfLobe, VmfLobeSet, VMF_KAPPA_MAX};
use crate::math::Vec3;
use crate::nn::{const_rows, Linear, Mlp};

use super::hashgrid::{HashGrid, HashGridConfig};

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

const ROUGH_BIAS: f64 = 1.0;
const METAL_BIAS: f64 = -2.0;
pub const GRAD_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub geom_grid: HashGridConfig,
    pub prop_grids: Vec<HashGridConfig>,
    pub app_grid: HashGridConfig,
    pub mat_grid: HashGridConfig,
    pub app_dim: usize,
    pub hidden: usize,
    pub n_bins: usize,
    pub init_sigma: f64,
    pub density_scale: f64,
    pub vmf_lobes: usize,
    pub decoder_lr_scale: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            geom_grid: HashGridConfig::geometric(8, 16, 2048, 2, 19),
            prop_grids: vec![
                HashGridConfig::geometric(5, 16, 512, 2, 17),
                HashGridConfig::geometric(6, 16, 1024, 2, 17),
            ],
            app_grid: HashGridConfig::geometric(8, 16, 2048, 2, 19),
            mat_grid: HashGridConfig::geometric(8, 16, 2048, 2, 19),
            app_dim: 128,
            hidden: 64,
            n_bins: 128,
            init_sigma: 0.05,
            density_scale: 50.0,
            vmf_lobes: 2,
            decoder_lr_scale: 0.1,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Desk-scale configuration used by toy scenes and tests.
    pub fn toy(n_bins: usize, seed: u64) -> ModelConfig {
        ModelConfig {
            geom_grid: HashGridConfig::geometric(5, 16, 256, 2, 15),
            prop_grids: vec![
                HashGridConfig::geometric(4, 16, 128, 2, 13),
                HashGridConfig::geometric(4, 16, 192, 2, 13),
            ],
            app_grid: HashGridConfig::geometric(5, 16, 256, 2, 15),
            mat_grid: HashGridConfig::geometric(4, 16, 128, 2, 13),
            app_dim: 128,
            hidden: 64,
            n_bins,
            init_sigma: 0.05,
            density_scale: 50.0,
            vmf_lobes: 2,
            decoder_lr_scale: 0.1,
            seed,
        }
    }
}

pub struct GeomNodes {
    pub sigma: NodeId,
    pub n_pred: NodeId,
}

pub struct GeomGradNodes {
    pub sigma: NodeId,
    pub n_pred: NodeId,
    /// Unnormalized negative density gradient direction (pre-normalization).
    pub n_derived: NodeId,
    /// Plain gradient norms (activation-scaled), for degeneracy masking.
    pub grad_norms: Vec<f64>,
}

pub struct MatNodes {
    pub albedo: NodeId,
    pub roughness: NodeId,
    pub metalness: NodeId,
}

/// Learnable scene: all fields plus their parameter store.
pub struct SceneModel {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub geom_grid: HashGrid,
    pub geom_mlp: Mlp,
    pub proposals: Vec<(HashGrid, Mlp)>,
    pub app_grid: HashGrid,
    pub app_proj: Linear,
    pub mat_grid: HashGrid,
    pub mat_lin: Linear,
    pub dir_diff: Mlp,
    pub dir_spec: Mlp,
    pub indir_brdf: Mlp,
    pub indir_rad: Mlp,
    pub vmf_dec: Mlp,
    pub density_shift: f64,
}

impl SceneModel {
    pub fn new(cfg: ModelConfig) -> SceneModel {
        assert_eq!(cfg.vmf_lobes, 2, "vMF decoder is built for 2 lobes");
        let mut store = ParamStore::new();
        let seed = cfg.seed;
        let geom_grid = HashGrid::new(&mut store, "geom.grid", cfg.geom_grid.clone(), seed ^ 0xa1);
        let geom_mlp = Mlp::new(
            &mut store,
            "geom.mlp",
            geom_grid.cfg.out_dim(),
            cfg.hidden,
            4,
            seed ^ 0xa2,
        );
        let mut proposals = Vec::new();
        for (i, pg) in cfg.prop_grids.iter().enumerate() {
            let grid = HashGrid::new(&mut store, &format!("prop{i}.grid"), pg.clone(), seed ^ (0xb0 + i as u64));
            let mlp = Mlp::new(
                &mut store,
                &format!("prop{i}.mlp"),
                grid.cfg.out_dim(),
                cfg.hidden,
                1,
                seed ^ (0xb8 + i as u64),
            );
            proposals.push((grid, mlp));
        }
        let app_grid = HashGrid::new(&mut store, "app.grid", cfg.app_grid.clone(), seed ^ 0xc1);
        let app_proj = Linear::new(
            &mut store,
            "app.proj",
            app_grid.cfg.out_dim(),
            cfg.app_dim,
            seed ^ 0xc2,
        );
        let mat_grid = HashGrid::new(&mut store, "mat.grid", cfg.mat_grid.clone(), seed ^ 0xd1);
        let mat_lin = Linear::new(&mut store, "mat.lin", mat_grid.cfg.out_dim(), 5, seed ^ 0xd2);
        let dir_diff = Mlp::new(&mut store, "cache.dir_diff", cfg.app_dim, cfg.hidden, 1, seed ^ 0xe1);
        let dir_spec = Mlp::new(
            &mut store,
            "cache.dir_spec",
            cfg.app_dim + 1,
            cfg.hidden,
            1,
            seed ^ 0xe2,
        );
        let indir_brdf = Mlp::new(
            &mut store,
            "cache.indir_brdf",
            cfg.app_dim + 1,
            cfg.hidden,
            1,
            seed ^ 0xe3,
        );
        let indir_rad = Mlp::new(
            &mut store,
            "cache.indir_rad",
            cfg.app_dim + 6,
            cfg.hidden,
            cfg.n_bins,
            seed ^ 0xe4,
        );
        let vmf_dec = Mlp::new(
            &mut store,
            "vmf.dec",
            cfg.app_dim,
            cfg.hidden,
            cfg.vmf_lobes * 5,
            seed ^ 0xe5,
        );
        // decoders learn slower than grids
        for b in 0..store.n_blocks() {
            let name = store.block(b).name.clone();
            if !name.ends_with(".grid") {
                store.set_lr_scale(b, cfg.decoder_lr_scale);
            }
        }
        let density_shift = inv_softplus(cfg.init_sigma / cfg.density_scale);
        SceneModel {
            cfg,
            store,
            geom_grid,
            geom_mlp,
            proposals,
            app_grid,
            app_proj,
            mat_grid,
            mat_lin,
            dir_diff,
            dir_spec,
            indir_brdf,
            indir_rad,
            vmf_dec,
            density_shift,
        }
    }

    fn activate_sigma(&self, raw: f64) -> f64 {
        softplus(raw + self.density_shift) * self.cfg.density_scale
    }

    // ---- plain queries (normalized coordinates) ----

    pub fn sigma(&self, x: Vec3) -> f64 {
        self.query_geometry(x).0
    }

    pub fn query_geometry(&self, x: Vec3) -> (f64, Vec3) {
        let mut feat = vec![0.0; self.geom_grid.cfg.out_dim()];
        self.geom_grid.encode_plain(&self.store, x, &mut feat);
        let mut out = [0.0; 4];
        self.geom_mlp.eval(&self.store, &feat, &mut out);
        let sigma = self.activate_sigma(out[0]);
        let nraw = Vec3 {
            x: out[1],
            y: out[2],
            z: out[3],
        };
        let n = if nraw.norm() > 1e-12 {
            nraw.normalized()
        } else {
            Vec3::Z
        };
        (sigma, n)
    }

    /// Density and its spatial gradient in normalized coordinates.
    pub fn sigma_grad(&self, x: Vec3) -> (f64, Vec3) {
        let dim = self.geom_grid.cfg.out_dim();
        let mut feat = vec![0.0; dim];
        let mut gfeat = [vec![0.0; dim], vec![0.0; dim], vec![0.0; dim]];
        self.geom_grid
            .encode_plain_with_grad(&self.store, x, &mut feat, &mut gfeat);
        let mut out = [0.0; 4];
        let mut gin = vec![0.0; dim];
        self.geom_mlp
            .eval_with_input_grad(&self.store, &feat, 0, &mut out, &mut gin);
        let sigma = self.activate_sigma(out[0]);
        let dact = sigmoid(out[0] + self.density_shift) * self.cfg.density_scale;
        let mut grad = Vec3::ZERO;
        for a in 0..3 {
            let graw: f64 = gin.iter().zip(&gfeat[a]).map(|(p, q)| p * q).sum();
            match a {
                0 => grad.x = dact * graw,
                1 => grad.y = dact * graw,
                _ => grad.z = dact * graw,
            }
        }
        (sigma, grad)
    }

    /// Unit vector opposing the density gradient, or None when the gradient
    /// is degenerate and the sample must be excluded from losses.
    pub fn derived_normal(&self, x: Vec3) -> Option<Vec3> {
        let (_, g) = self.sigma_grad(x);
        if g.norm() <= GRAD_EPS {
            return None;
        }
        Some((-g).normalized())
    }

    pub fn proposal_sigma(&self, level: usize, x: Vec3) -> f64 {
        let (grid, mlp) = &self.proposals[level];
        let mut feat = vec![0.0; grid.cfg.out_dim()];
        grid.encode_plain(&self.store, x, &mut feat);
        let mut out = [0.0];
        mlp.eval(&self.store, &feat, &mut out);
        self.activate_sigma(out[0])
    }

    pub fn appearance(&self, x: Vec3) -> Vec<f64> {
        let mut feat = vec![0.0; self.app_grid.cfg.out_dim()];
        self.app_grid.encode_plain(&self.store, x, &mut feat);
        let mut out = vec![0.0; self.cfg.app_dim];
        self.app_proj.eval(&self.store, &feat, &mut out);
        out
    }

    pub fn materials(&self, x: Vec3) -> DisneyGgx {
        let mut feat = vec![0.0; self.mat_grid.cfg.out_dim()];
        self.mat_grid.encode_plain(&self.store, x, &mut feat);
        let mut out = [0.0; 5];
        self.mat_lin.eval(&self.store, &feat, &mut out);
        DisneyGgx {
            albedo: [sigmoid(out[0]), sigmoid(out[1]), sigmoid(out[2])],
            roughness: 0.01 + 0.99 * sigmoid(out[3] + ROUGH_BIAS),
            metalness: sigmoid(out[4] + METAL_BIAS),
        }
    }

    // ---- cache heads, plain ----

    pub fn head_dir_diff(&self, f_app: &[f64]) -> f64 {
        let mut out = [0.0];
        self.dir_diff.eval(&self.store, f_app, &mut out);
        softplus(out[0])
    }

    pub fn head_dir_spec(&self, f_app: &[f64], ndoth: f64) -> f64 {
        let mut x = Vec::with_capacity(f_app.len() + 1);
        x.extend_from_slice(f_app);
        x.push(ndoth);
        let mut out = [0.0];
        self.dir_spec.eval(&self.store, &x, &mut out);
        softplus(out[0])
    }

    pub fn head_indir_brdf(&self, f_app: &[f64], ndotw: f64) -> f64 {
        let mut x = Vec::with_capacity(f_app.len() + 1);
        x.extend_from_slice(f_app);
        x.push(ndotw);
        let mut out = [0.0];
        self.indir_brdf.eval(&self.store, &x, &mut out);
        softplus(out[0])
    }

    pub fn head_indir_rad(&self, f_app: &[f64], refl: Vec3, light: Vec3) -> Vec<f64> {
        let mut x = Vec::with_capacity(f_app.len() + 6);
        x.extend_from_slice(f_app);
        x.extend_from_slice(&refl.to_array());
        x.extend_from_slice(&light.to_array());
        let mut out = vec![0.0; self.cfg.n_bins];
        self.indir_rad.eval(&self.store, &x, &mut out);
        out.iter_mut().for_each(|v| *v = softplus(*v));
        out
    }

    pub fn vmf_lobes(&self, f_app: &[f64]) -> VmfLobeSet {
        let mut raw = vec![0.0; self.cfg.vmf_lobes * 5];
        self.vmf_dec.eval(&self.store, f_app, &mut raw);
        let w0 = sigmoid(raw[4]);
        let mut lobes = Vec::with_capacity(2);
        for (i, w) in [(0usize, w0), (1usize, 1.0 - w0)] {
            let mu = Vec3 {
                x: raw[i * 5],
                y: raw[i * 5 + 1],
                z: raw[i * 5 + 2],
            };
            let mu = if mu.norm() > 1e-9 { mu.normalized() } else { Vec3::Z };
            let kappa = softplus(raw[i * 5 + 3]).min(VMF_KAPPA_MAX);
            lobes.push((VmfLobe { mu, kappa }, w));
        }
        VmfLobeSet::new(lobes)
    }

    // ---- tape queries ----

    pub fn tape_geometry(&self, t: &mut Tape, xs: &[Vec3]) -> GeomNodes {
        let feat = self.geom_grid.encode_tape(t, xs);
        let out = self.geom_mlp.forward(t, feat);
        let (sigma, n_pred) = self.finish_geometry(t, out);
        GeomNodes { sigma, n_pred }
    }

    fn finish_geometry(&self, t: &mut Tape, out: NodeId) -> (NodeId, NodeId) {
        let raw = t.slice_cols(out, 0, 1);
        let shifted = t.add_const(raw, self.density_shift);
        let sp = t.softplus(shifted);
        let sigma = t.scale(sp, self.cfg.density_scale);
        let nraw = t.slice_cols(out, 1, 3);
        let n_pred = t.normalize_rows3(nraw);
        (sigma, n_pred)
    }

    /// Geometry with the derived-normal graph (differentiable through the
    /// spatial density gradient).
    pub fn tape_geometry_with_derived(&self, t: &mut Tape, xs: &[Vec3]) -> GeomGradNodes {
        let feat = self.geom_grid.encode_tape(t, xs);
        let gfx = self.geom_grid.encode_tape_grad(t, xs, 0);
        let gfy = self.geom_grid.encode_tape_grad(t, xs, 1);
        let gfz = self.geom_grid.encode_tape_grad(t, xs, 2);
        let (out, gin) = self.geom_mlp.forward_with_input_grad(t, feat, 0);
        let (sigma, n_pred) = self.finish_geometry(t, out);
        let gx = t.row_dot(gin, gfx);
        let gy = t.row_dot(gin, gfy);
        let gz = t.row_dot(gin, gfz);
        let graw = t.concat_cols(&[gx, gy, gz]);
        let neg = t.neg(graw);
        let n_derived = t.normalize_rows3(neg);
        // degeneracy flags from the activation-scaled gradient magnitude
        let raw = t.value(out).clone();
        let grad_norms: Vec<f64> = (0..xs.len())
            .map(|i| {
                let dact =
                    sigmoid(raw.at(i, 0) + self.density_shift) * self.cfg.density_scale;
                let v = t.value(graw);
                let g = (v.at(i, 0).powi(2) + v.at(i, 1).powi(2) + v.at(i, 2).powi(2)).sqrt();
                dact * g
            })
            .collect();
        GeomGradNodes {
            sigma,
            n_pred,
            n_derived,
            grad_norms,
        }
    }

    pub fn tape_proposal(&self, t: &mut Tape, level: usize, xs: &[Vec3]) -> NodeId {
        let (grid, mlp) = &self.proposals[level];
        let feat = grid.encode_tape(t, xs);
        let out = mlp.forward(t, feat);
        let shifted = t.add_const(out, self.density_shift);
        let sp = t.softplus(shifted);
        t.scale(sp, self.cfg.density_scale)
    }

    pub fn tape_appearance(&self, t: &mut Tape, xs: &[Vec3]) -> NodeId {
        let feat = self.app_grid.encode_tape(t, xs);
        self.app_proj.forward(t, feat)
    }

    pub fn tape_materials(&self, t: &mut Tape, xs: &[Vec3]) -> MatNodes {
        let feat = self.mat_grid.encode_tape(t, xs);
        let out = self.mat_lin.forward(t, feat);
        let araw = t.slice_cols(out, 0, 3);
        let albedo = t.sigmoid(araw);
        let rraw = t.slice_cols(out, 3, 1);
        let rb = t.add_const(rraw, ROUGH_BIAS);
        let rs = t.sigmoid(rb);
        let rscaled = t.scale(rs, 0.99);
        let roughness = t.add_const(rscaled, 0.01);
        let mraw = t.slice_cols(out, 4, 1);
        let mb = t.add_const(mraw, METAL_BIAS);
        let metalness = t.sigmoid(mb);
        MatNodes {
            albedo,
            roughness,
            metalness,
        }
    }

    pub fn tape_dir_diff(&self, t: &mut Tape, f_app: NodeId) -> NodeId {
        let out = self.dir_diff.forward(t, f_app);
        t.softplus(out)
    }

    pub fn tape_dir_spec(&self, t: &mut Tape, f_app: NodeId, ndoth: &[f64]) -> NodeId {
        let n = t.shape(f_app).0;
        let c = const_rows(t, n, 1, ndoth.to_vec());
        let x = t.concat_cols(&[f_app, c]);
        let out = self.dir_spec.forward(t, x);
        t.softplus(out)
    }

    pub fn tape_indir_brdf(&self, t: &mut Tape, f_app: NodeId, ndotw: &[f64]) -> NodeId {
        let n = t.shape(f_app).0;
        let c = const_rows(t, n, 1, ndotw.to_vec());
        let x = t.concat_cols(&[f_app, c]);
        let out = self.indir_brdf.forward(t, x);
        t.softplus(out)
    }

    pub fn tape_indir_rad(
        &self,
        t: &mut Tape,
        f_app: NodeId,
        refl: &[Vec3],
        light: Vec3,
    ) -> NodeId {
        let n = t.shape(f_app).0;
        let mut cond = Vec::with_capacity(n * 6);
        for r in refl {
            cond.extend_from_slice(&r.to_array());
            cond.extend_from_slice(&light.to_array());
        }
        let c = const_rows(t, n, 6, cond);
        let x = t.concat_cols(&[f_app, c]);
        let out = self.indir_rad.forward(t, x);
        t.softplus(out)
    }

    pub fn tape_vmf_raw(&self, t: &mut Tape, f_app: NodeId) -> NodeId {
        self.vmf_dec.forward(t, f_app)
    }

    // ---- block grouping ----

    pub fn cache_head_blocks(&self) -> Vec<usize> {
        let mut ids = Vec::new();
        for m in [&self.dir_diff, &self.dir_spec, &self.indir_brdf, &self.indir_rad] {
            ids.extend_from_slice(&[m.w1, m.b1, m.w2, m.b2]);
        }
        ids
    }

    /// Freeze everything except the cache appearance decoders (relighting
    /// finetune contract).
    pub fn freeze_all_except_cache_heads(&mut self) {
        let keep = self.cache_head_blocks();
        for b in 0..self.store.n_blocks() {
            self.store.set_frozen(b, !keep.contains(&b));
        }
    }

    pub fn unfreeze_all(&mut self) {
        for b in 0..self.store.n_blocks() {
            self.store.set_frozen(b, false);
        }
    }
}

fn inv_softplus(y: f64) -> f64 {
    // solve softplus(x) = y
    (y.exp() - 1.0).max(1e-300).ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::vec3;
    use crate::rng::rng_stream;
    use rand::Rng;

    fn tiny_model() -> SceneModel {
        let mut cfg = ModelConfig::toy(16, 7);
        cfg.geom_grid = HashGridConfig::geometric(3, 4, 16, 2, 10);
        cfg.prop_grids = vec![
            HashGridConfig::geometric(2, 4, 8, 2, 8),
            HashGridConfig::geometric(2, 4, 12, 2, 8),
        ];
        cfg.app_grid = HashGridConfig::geometric(3, 4, 16, 2, 10);
        cfg.mat_grid = HashGridConfig::geometric(2, 4, 8, 2, 8);
        cfg.app_dim = 16;
        cfg.hidden = 16;
        SceneModel::new(cfg)
    }

    #[test]
    fn fresh_field_is_near_init_density() {
        let m = tiny_model();
        let mut rng = rng_stream(1, &[0]);
        for _ in 0..100 {
            let x = vec3(rng.gen(), rng.gen(), rng.gen());
            let (sigma, n) = m.query_geometry(x);
            assert!(
                sigma > 0.0 && sigma < 10.0 * m.cfg.init_sigma,
                "init sigma {sigma}"
            );
            assert!((n.norm() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn predicted_normals_are_unit() {
        let m = tiny_model();
        let mut rng = rng_stream(2, &[0]);
        for _ in 0..1000 {
            let x = vec3(rng.gen(), rng.gen(), rng.gen());
            let (_, n) = m.query_geometry(x);
            assert!((n.norm() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn materials_within_ranges() {
        let m = tiny_model();
        let mut rng = rng_stream(3, &[0]);
        for _ in 0..1000 {
            let x = vec3(rng.gen(), rng.gen(), rng.gen());
            let mat = m.materials(x);
            for c in mat.albedo {
                assert!((0.0..=1.0).contains(&c) && c.is_finite());
            }
            assert!(mat.roughness >= 0.01 && mat.roughness <= 1.0);
            assert!((0.0..=1.0).contains(&mat.metalness));
        }
    }

    #[test]
    fn sigma_spatial_gradient_matches_fd() {
        let m = tiny_model();
        let mut rng = rng_stream(4, &[0]);
        let mut checked = 0;
        while checked < 20 {
            let x = vec3(
                rng.gen_range(0.05..0.95),
                rng.gen_range(0.05..0.95),
                rng.gen_range(0.05..0.95),
            );
            // skip points too close to a cell boundary of the finest level
            let res = m.geom_grid.cfg.finest_resolution() as f64;
            let frac = |v: f64| (v * res).fract();
            if [x.x, x.y, x.z]
                .iter()
                .any(|&v| frac(v) < 0.05 || frac(v) > 0.95)
            {
                continue;
            }
            let (_, g) = m.sigma_grad(x);
            let h = 1e-5;
            for a in 0..3 {
                let mut dv = Vec3::ZERO;
                match a {
                    0 => dv.x = h,
                    1 => dv.y = h,
                    _ => dv.z = h,
                }
                let fd = (m.sigma(x + dv) - m.sigma(x - dv)) / (2.0 * h);
                let ga = g.component(a);
                let denom = fd.abs().max(ga.abs()).max(1e-10);
                assert!(
                    (fd - ga).abs() / denom < 1e-4,
                    "axis {a}: fd {fd} vs analytic {ga}"
                );
            }
            checked += 1;
        }
    }

    #[test]
    fn tape_and_plain_geometry_agree() {
        let m = tiny_model();
        let xs = vec![vec3(0.3, 0.5, 0.7), vec3(0.9, 0.1, 0.4)];
        let mut t = Tape::new(&m.store);
        let g = m.tape_geometry(&mut t, &xs);
        for (i, &x) in xs.iter().enumerate() {
            let (sigma, n) = m.query_geometry(x);
            assert!((t.value(g.sigma).at(i, 0) - sigma).abs() < 1e-12);
            for c in 0..3 {
                assert!((t.value(g.n_pred).at(i, c) - n.component(c)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn tape_derived_normal_matches_plain() {
        let m = tiny_model();
        let xs = vec![vec3(0.31, 0.52, 0.73)];
        let mut t = Tape::new(&m.store);
        let g = m.tape_geometry_with_derived(&mut t, &xs);
        let (_, grad) = m.sigma_grad(xs[0]);
        let expect = (-grad).normalized();
        for c in 0..3 {
            assert!(
                (t.value(g.n_derived).at(0, c) - expect.component(c)).abs() < 1e-9,
                "derived normal mismatch"
            );
        }
        assert!((g.grad_norms[0] - grad.norm()).abs() < 1e-9);
    }

    #[test]
    fn heads_plain_matches_tape() {
        let m = tiny_model();
        let x = vec3(0.4, 0.6, 0.5);
        let f_app = m.appearance(x);
        let mut t = Tape::new(&m.store);
        let fa = m.tape_appearance(&mut t, &[x]);
        for c in 0..m.cfg.app_dim {
            assert!((t.value(fa).at(0, c) - f_app[c]).abs() < 1e-12);
        }
        let dd = m.tape_dir_diff(&mut t, fa);
        assert!((t.value(dd).at(0, 0) - m.head_dir_diff(&f_app)).abs() < 1e-12);
        let ds = m.tape_dir_spec(&mut t, fa, &[0.8]);
        assert!((t.value(ds).at(0, 0) - m.head_dir_spec(&f_app, 0.8)).abs() < 1e-12);
        let ib = m.tape_indir_brdf(&mut t, fa, &[0.6]);
        assert!((t.value(ib).at(0, 0) - m.head_indir_brdf(&f_app, 0.6)).abs() < 1e-12);
        let refl = vec3(0.0, 0.6, 0.8);
        let light = vec3(0.2, 0.9, 0.1);
        let ir = m.tape_indir_rad(&mut t, fa, &[refl], light);
        let plain = m.head_indir_rad(&f_app, refl, light);
        for b in 0..m.cfg.n_bins {
            assert!((t.value(ir).at(0, b) - plain[b]).abs() < 1e-12);
        }
    }

    #[test]
    fn indirect_conditioning_reaches_output() {
        // two light positions produce different indirect histograms
        let m = tiny_model();
        let x = vec3(0.5, 0.5, 0.5);
        let f_app = m.appearance(x);
        let refl = vec3(0.0, 0.0, 1.0);
        let a = m.head_indir_rad(&f_app, refl, vec3(0.1, 0.2, 0.3));
        let b = m.head_indir_rad(&f_app, refl, vec3(0.8, 0.7, 0.9));
        let diff: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum();
        assert!(diff > 1e-9, "light conditioning has no effect");
        assert_eq!(a.len(), m.cfg.n_bins);
    }

    #[test]
    fn vmf_decoder_produces_valid_lobes() {
        let m = tiny_model();
        let f_app = m.appearance(vec3(0.2, 0.8, 0.5));
        let set = m.vmf_lobes(&f_app);
        let total: f64 = set.lobes.iter().map(|(_, w)| w).sum();
        assert!((total - 1.0).abs() < 1e-9);
        for (l, w) in &set.lobes {
            assert!(*w >= 0.0);
            assert!((l.mu.norm() - 1.0).abs() < 1e-9);
            assert!(l.kappa >= 0.0 && l.kappa <= VMF_KAPPA_MAX);
        }
    }

    #[test]
    fn freeze_masks_everything_but_heads() {
        let mut m = tiny_model();
        m.freeze_all_except_cache_heads();
        let heads = m.cache_head_blocks();
        for b in 0..m.store.n_blocks() {
            assert_eq!(m.store.block(b).frozen, !heads.contains(&b));
        }
        m.unfreeze_all();
        assert!((0..m.store.n_blocks()).all(|b| !m.store.block(b).frozen));
    }
}
