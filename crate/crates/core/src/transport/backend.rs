//! Scene backends for the renderer: analytic closed-form scenes and trained
//! neural models expose the same density/material/cache surface.

use crate::brdf::{DisneyGgx, VmfLobeSet};
use crate::fields::{AnalyticScene, SceneModel, ShellParams};
use crate::math::{Aabb, Vec3};
use crate::transient::TimeBinning;
use crate::transport::light::PulsedPointLight;

/// Uniform-scale world-to-normalized mapping: normalized = (world - offset) * scale.
#[derive(Copy, Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SceneTransform {
    pub scale: f64,
    pub offset: Vec3,
}

impl SceneTransform {
    pub fn identity() -> SceneTransform {
        SceneTransform {
            scale: 1.0,
            offset: Vec3::ZERO,
        }
    }

    /// Transform mapping `bounds` to the unit cube (with margin).
    pub fn fit(bounds: Aabb, margin: f64) -> SceneTransform {
        let size = bounds.max - bounds.min;
        let longest = size.x.max(size.y).max(size.z);
        let scale = 1.0 / (longest * (1.0 + 2.0 * margin));
        let center = (bounds.min + bounds.max) * 0.5;
        let offset = center - Vec3 {
            x: 0.5 / scale,
            y: 0.5 / scale,
            z: 0.5 / scale,
        };
        SceneTransform { scale, offset }
    }

    pub fn to_normalized(&self, w: Vec3) -> Vec3 {
        (w - self.offset) * self.scale
    }

    pub fn world_bounds(&self) -> Aabb {
        Aabb {
            min: self.offset,
            max: self.offset
                + Vec3 {
                    x: 1.0 / self.scale,
                    y: 1.0 / self.scale,
                    z: 1.0 / self.scale,
                },
        }
    }
}

/// What the renderer needs from a scene.
pub trait SceneBackend {
    fn world_bounds(&self) -> Aabb;
    fn density(&self, x: Vec3) -> f64;
    /// Optical depth of a ray interval at a proposal level; the last level
    /// indexes the final density field.
    fn interval_mass(&self, level: usize, o: Vec3, d: Vec3, t0: f64, t1: f64) -> f64;
    /// Optical depth plus the density-weighted mean ray parameter of the
    /// interval (the point where shading should happen).
    fn interval_mass_centroid(
        &self,
        level: usize,
        o: Vec3,
        d: Vec3,
        t0: f64,
        t1: f64,
    ) -> (f64, f64) {
        (
            self.interval_mass(level, o, d, t0, t1),
            0.5 * (t0 + t1),
        )
    }
    fn n_proposal_levels(&self) -> usize;
    fn shading_normal(&self, x: Vec3) -> Vec3;
    fn material(&self, x: Vec3) -> DisneyGgx;
    fn has_cache(&self) -> bool;
    /// One-hot outgoing direct radiance: (fractional bin, magnitude).
    fn cache_direct(
        &self,
        x: Vec3,
        light: &PulsedPointLight,
        w_out: Vec3,
        binning: TimeBinning,
    ) -> (f64, f64);
    /// Dense outgoing indirect radiance per bin.
    fn cache_indirect(&self, x: Vec3, light: &PulsedPointLight, w_out: Vec3) -> Vec<f64>;
    fn vmf(&self, x: Vec3, w_out: Vec3) -> VmfLobeSet;
    /// Binary or transmittance-based visibility of the light from `x`.
    fn light_visibility(&self, x: Vec3, light: &PulsedPointLight) -> f64;
}

/// Closed-form scene rendered through its density shell; the radiance cache
/// is identically zero.
pub struct AnalyticBackend<'a> {
    pub scene: &'a AnalyticScene,
    pub shell: ShellParams,
    pub shadows: bool,
}

impl<'a> AnalyticBackend<'a> {
    pub fn new(scene: &'a AnalyticScene, binning: TimeBinning) -> AnalyticBackend<'a> {
        AnalyticBackend {
            scene,
            shell: ShellParams::for_binning(binning.bin_width),
            shadows: true,
        }
    }
}

impl SceneBackend for AnalyticBackend<'_> {
    fn world_bounds(&self) -> Aabb {
        self.scene.bounds
    }

    fn density(&self, x: Vec3) -> f64 {
        self.scene.density(x, &self.shell)
    }

    fn interval_mass(&self, _level: usize, o: Vec3, d: Vec3, t0: f64, t1: f64) -> f64 {
        self.scene.interval_mass(o, d, t0, t1, &self.shell)
    }

    fn interval_mass_centroid(
        &self,
        _level: usize,
        o: Vec3,
        d: Vec3,
        t0: f64,
        t1: f64,
    ) -> (f64, f64) {
        self.scene.interval_mass_centroid(o, d, t0, t1, &self.shell)
    }

    fn n_proposal_levels(&self) -> usize {
        2
    }

    fn shading_normal(&self, x: Vec3) -> Vec3 {
        self.scene.shading_normal(x)
    }

    fn material(&self, x: Vec3) -> DisneyGgx {
        self.scene.material_at(x)
    }

    fn has_cache(&self) -> bool {
        false
    }

    fn cache_direct(
        &self,
        _x: Vec3,
        _light: &PulsedPointLight,
        _w_out: Vec3,
        _binning: TimeBinning,
    ) -> (f64, f64) {
        (0.0, 0.0)
    }

    fn cache_indirect(&self, _x: Vec3, _light: &PulsedPointLight, _w_out: Vec3) -> Vec<f64> {
        Vec::new()
    }

    fn vmf(&self, _x: Vec3, _w_out: Vec3) -> VmfLobeSet {
        VmfLobeSet::uniform()
    }

    fn light_visibility(&self, x: Vec3, light: &PulsedPointLight) -> f64 {
        if !self.shadows {
            return 1.0;
        }
        // exact binary visibility against the closed-form surfaces, with an
        // epsilon that steps over the query point's own shell
        let delta = light.position - x;
        let dist = delta.norm();
        if dist < 1e-9 {
            return 1.0;
        }
        let dir = delta / dist;
        let eps = 8.0 * self.shell.sigma;
        match self.scene.intersect(x + dir * eps, dir) {
            Some(h) if h.t < dist - 2.0 * eps => 0.0,
            _ => 1.0,
        }
    }
}

/// Trained neural scene. Positions are mapped through the dataset's scene
/// transform before querying the fields; densities are interpreted per
/// world unit length.
pub struct ModelBackend<'a> {
    pub model: &'a SceneModel,
    pub transform: SceneTransform,
    /// Forces the cache's indirect head to zero (the direct-only ablation).
    pub ablate_indirect: bool,
    /// Stratified density samples for light-segment transmittance.
    pub shadow_samples: usize,
    /// Shadow segment start offset in world units (steps over the surface
    /// the query point sits on).
    pub shadow_offset: f64,
}

impl<'a> ModelBackend<'a> {
    pub fn new(model: &'a SceneModel, transform: SceneTransform) -> ModelBackend<'a> {
        ModelBackend {
            model,
            transform,
            ablate_indirect: false,
            shadow_samples: 16,
            shadow_offset: 0.0,
        }
    }

    fn norm(&self, x: Vec3) -> Vec3 {
        self.transform.to_normalized(x)
    }

    /// Surface-to-light geometry shared by the direct terms.
    pub fn light_geometry(x: Vec3, light: &PulsedPointLight) -> (Vec3, f64) {
        let delta = x - light.position;
        let d = delta.norm();
        (delta / d.max(1e-12), d)
    }
}

impl SceneBackend for ModelBackend<'_> {
    fn world_bounds(&self) -> Aabb {
        self.transform.world_bounds()
    }

    fn density(&self, x: Vec3) -> f64 {
        self.model.sigma(self.norm(x))
    }

    fn interval_mass(&self, level: usize, o: Vec3, d: Vec3, t0: f64, t1: f64) -> f64 {
        let mid = o + d * (0.5 * (t0 + t1));
        let x = self.norm(mid);
        let sigma = if level < self.model.proposals.len() {
            self.model.proposal_sigma(level, x)
        } else {
            self.model.sigma(x)
        };
        sigma * (t1 - t0)
    }

    fn n_proposal_levels(&self) -> usize {
        self.model.proposals.len()
    }

    fn shading_normal(&self, x: Vec3) -> Vec3 {
        self.model.query_geometry(self.norm(x)).1
    }

    fn material(&self, x: Vec3) -> DisneyGgx {
        self.model.materials(self.norm(x))
    }

    fn has_cache(&self) -> bool {
        true
    }

    fn cache_direct(
        &self,
        x: Vec3,
        light: &PulsedPointLight,
        w_out: Vec3,
        binning: TimeBinning,
    ) -> (f64, f64) {
        let (w_l, d) = Self::light_geometry(x, light);
        let xn = self.norm(x);
        let (_, n) = self.model.query_geometry(xn);
        let to_light = -w_l;
        let cos = n.dot(to_light);
        if cos <= 0.0 {
            return (0.0, 0.0);
        }
        let f_app = self.model.appearance(xn);
        let h = (to_light + w_out).normalized();
        let ndoth = n.dot(h).clamp(-1.0, 1.0);
        let f_dir = self.model.head_dir_diff(&f_app) + self.model.head_dir_spec(&f_app, ndoth);
        let falloff = light.intensity_toward(w_l) / (d * d);
        let bin = binning.bin_of_path_length(d + light.peak_path);
        (bin, f_dir * falloff * cos)
    }

    fn cache_indirect(&self, x: Vec3, light: &PulsedPointLight, w_out: Vec3) -> Vec<f64> {
        if self.ablate_indirect {
            return vec![0.0; self.model.cfg.n_bins];
        }
        let xn = self.norm(x);
        let (_, n) = self.model.query_geometry(xn);
        let f_app = self.model.appearance(xn);
        let ndotw = n.dot(w_out).clamp(-1.0, 1.0);
        let brdf_int = self.model.head_indir_brdf(&f_app, ndotw);
        let refl = w_out.reflect(n);
        let light_n = self.norm(light.position);
        let mut rad = self.model.head_indir_rad(&f_app, refl, light_n);
        for v in rad.iter_mut() {
            *v *= brdf_int;
        }
        rad
    }

    fn vmf(&self, x: Vec3, _w_out: Vec3) -> VmfLobeSet {
        let f_app = self.model.appearance(self.norm(x));
        self.model.vmf_lobes(&f_app)
    }

    fn light_visibility(&self, x: Vec3, light: &PulsedPointLight) -> f64 {
        let delta = light.position - x;
        let dist = delta.norm();
        if dist < 1e-9 || self.shadow_samples == 0 {
            return 1.0;
        }
        let dir = delta / dist;
        let t0 = self.shadow_offset.min(dist);
        let t1 = dist;
        if t1 <= t0 {
            return 1.0;
        }
        let n = self.shadow_samples;
        let step = (t1 - t0) / n as f64;
        let mut mass = 0.0;
        for i in 0..n {
            let t = t0 + (i as f64 + 0.5) * step;
            mass += self.density(x + dir * t) * step;
        }
        (-mass).exp()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::vec3;

    #[test]
    fn transform_roundtrip_bounds() {
        let b = Aabb {
            min: vec3(-1.0, 0.0, 2.0),
            max: vec3(3.0, 2.0, 4.0),
        };
        let tr = SceneTransform::fit(b, 0.05);
        let n_min = tr.to_normalized(b.min);
        let n_max = tr.to_normalized(b.max);
        for v in [n_min, n_max] {
            assert!(v.x >= -1e-9 && v.x <= 1.0 + 1e-9);
            assert!(v.y >= -1e-9 && v.y <= 1.0 + 1e-9);
            assert!(v.z >= -1e-9 && v.z <= 1.0 + 1e-9);
        }
        // the longest axis maps to slightly less than the unit interval
        assert!((n_max.x - n_min.x) < 1.0);
        let wb = tr.world_bounds();
        assert!(wb.contains(b.min) && wb.contains(b.max));
    }
}
