//! Time-resolved rendering: cache queries along secondary rays,
//! physically-based shading with MIS, and per-pixel volume rendering.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::brdf::{eval_brdf_mono, mis_weight, pdf_brdf, sample_brdf};
use crate::math::Vec3;
use crate::rng::rng_stream;
use crate::transient::{splat, Ray, TimeBinning, TransientHistogram};

use super::backend::SceneBackend;
use super::light::{direct_incident, PulsedPointLight};
use super::sampling::{hierarchical_samples, CascadeResult, RaySampleSet};

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum RenderMode {
    Cache,
    CacheDirect,
    CacheIndirect,
    Physical,
    PhysicalDirect,
    PhysicalIndirect,
}

impl RenderMode {
    pub fn parse(s: &str) -> Option<RenderMode> {
        Some(match s {
            "cache" => RenderMode::Cache,
            "cache-direct" => RenderMode::CacheDirect,
            "cache-indirect" => RenderMode::CacheIndirect,
            "physical" => RenderMode::Physical,
            "direct-only" | "physical-direct" => RenderMode::PhysicalDirect,
            "indirect-only" | "physical-indirect" => RenderMode::PhysicalIndirect,
            _ => return None,
        })
    }

    fn wants_cache(&self) -> bool {
        matches!(
            self,
            RenderMode::Cache | RenderMode::CacheDirect | RenderMode::CacheIndirect
        )
    }
}

#[derive(Clone, Debug)]
pub struct RenderSettings {
    /// Proposal cascade sample counts; the last entry is the final count.
    pub cascade: Vec<usize>,
    /// MIS sample pairs per shaded point.
    pub n_secondary: usize,
    /// Stratified samples along each secondary ray.
    pub secondary_samples: usize,
    /// Skip samples with quadrature weight below this.
    pub w_min: f64,
    pub shadows: bool,
}

impl Default for RenderSettings {
    fn default() -> Self {
        RenderSettings {
            cascade: vec![64, 64, 32],
            n_secondary: 64,
            secondary_samples: 32,
            w_min: 1e-6,
            shadows: true,
        }
    }
}

/// Output of rendering one pixel: the full histogram, its exact
/// direct/indirect split, and auxiliary geometry channels.
#[derive(Clone, Debug)]
pub struct PixelRender {
    pub full: TransientHistogram,
    pub direct: TransientHistogram,
    pub indirect: TransientHistogram,
    pub acc: f64,
    pub depth: f64,
    pub normal: Vec3,
    pub overflow: f64,
}

/// Hierarchical samples along a ray, clipped to the scene bounds.
pub fn backend_samples<B: SceneBackend, R: Rng>(
    backend: &B,
    ray: &Ray,
    cascade: &[usize],
    rng: &mut R,
) -> CascadeResult {
    let range = backend
        .world_bounds()
        .intersect(ray.origin, ray.direction)
        .map(|(a, b)| (a.max(1e-9), b))
        .filter(|(a, b)| b > a);
    let n_prop = backend.n_proposal_levels();
    hierarchical_samples(
        ray,
        range,
        cascade,
        &mut |level, t0, t1| {
            let lv = level.min(n_prop);
            backend.interval_mass_centroid(lv, ray.origin, ray.direction, t0, t1)
        },
        rng,
    )
}

/// Orient a shading normal toward the viewer.
pub fn orient_normal(n: Vec3, w_out: Vec3) -> Vec3 {
    if n.dot(w_out) < 0.0 {
        -n
    } else {
        n
    }
}

/// Volume-render the cache along a secondary ray from `x` in direction
/// `w_in`: sum of delayed cache outputs weighted by quadrature weights.
/// The one-hot direct part is convolved with the pulse shape at assembly.
pub fn query_cache_incident<B: SceneBackend, R: Rng>(
    backend: &B,
    x: Vec3,
    w_in: Vec3,
    light: &PulsedPointLight,
    binning: TimeBinning,
    settings: &RenderSettings,
    rng: &mut R,
) -> TransientHistogram {
    let mut out = TransientHistogram::zeros(binning);
    if !backend.has_cache() {
        return out;
    }
    let ray = Ray {
        origin: x,
        direction: w_in,
    };
    let range = backend
        .world_bounds()
        .intersect(ray.origin, ray.direction)
        .map(|(a, b)| (a.max(binning.bin_width * 0.5), b))
        .filter(|(a, b)| b > a);
    let (t0, t1) = match range {
        Some(r) => r,
        None => return out,
    };
    let n = settings.secondary_samples.max(1);
    let n_prop = backend.n_proposal_levels();
    let mut direct_part = vec![0.0; binning.n_bins];
    let mut acc_mass = 0.0f64;
    let step = (t1 - t0) / n as f64;
    let w_out = -w_in;
    for i in 0..n {
        let ta = t0 + step * i as f64;
        let tb = ta + step;
        let tm = ta + step * rng.gen::<f64>();
        let m = backend.interval_mass(n_prop, ray.origin, ray.direction, ta, tb);
        let w = (1.0 - (-m).exp()) * (-acc_mass).exp();
        acc_mass += m;
        if w < settings.w_min {
            continue;
        }
        let xp = ray.at(tm);
        let (bin, mag) = backend.cache_direct(xp, light, w_out, binning);
        if mag > 0.0 {
            splat(&mut direct_part, bin + tm / binning.bin_width, w * mag);
        }
        let indirect = backend.cache_indirect(xp, light, w_out);
        if !indirect.is_empty() {
            let delay = tm / binning.bin_width;
            let whole = delay.floor();
            let frac = delay - whole;
            let whole = whole as i64;
            for (b, &v) in indirect.iter().enumerate() {
                if v == 0.0 {
                    continue;
                }
                let j = b as i64 + whole;
                if j >= 0 && (j as usize) < binning.n_bins {
                    out.values[j as usize] += w * v * (1.0 - frac);
                }
                if frac > 0.0 && j + 1 >= 0 && ((j + 1) as usize) < binning.n_bins {
                    out.values[(j + 1) as usize] += w * v * frac;
                }
            }
        }
    }
    convolve_pulse_into(&mut out.values, &direct_part, light);
    out
}

/// out += direct_part (*) centered pulse kernel
pub fn convolve_pulse_into(out: &mut [f64], direct_part: &[f64], light: &PulsedPointLight) {
    let (kernel, center) = light.centered_kernel();
    let bins = out.len();
    for (b, &v) in direct_part.iter().enumerate() {
        if v == 0.0 {
            continue;
        }
        for (l, &kv) in kernel.iter().enumerate() {
            if kv == 0.0 {
                continue;
            }
            let j = b as i64 + l as i64 - center as i64;
            if j >= 0 && (j as usize) < bins {
                out[j as usize] += v * kv;
            }
        }
    }
}

/// Direct and indirect outgoing radiance at a surface point, in the
/// direction `w_out`. The direct term is analytic (delta light); the
/// indirect term is an MIS estimate over BRDF and vMF samples of the cache.
#[allow(clippy::too_many_arguments)]
pub fn shade_physically_based<B: SceneBackend, R: Rng>(
    backend: &B,
    x: Vec3,
    n: Vec3,
    w_out: Vec3,
    light: &PulsedPointLight,
    binning: TimeBinning,
    settings: &RenderSettings,
    rng: &mut R,
) -> (TransientHistogram, TransientHistogram) {
    let mat = backend.material(x);
    // direct: f(w_l, w_out) * L_dir * cos, shadowed
    let mut direct = TransientHistogram::zeros(binning);
    let (w_l, incident) = direct_incident(light, x, binning);
    let to_light = -w_l;
    let cos_l = n.dot(to_light);
    if cos_l > 0.0 && incident.total_mass() > 0.0 && n.dot(w_out) > 0.0 {
        let vis = if settings.shadows {
            backend.light_visibility(x, light)
        } else {
            1.0
        };
        if vis > 0.0 {
            let f = eval_brdf_mono(&mat, n, to_light, w_out);
            let scale = f * cos_l * vis;
            if scale > 0.0 {
                direct = incident.scaled(scale);
            }
        }
    }
    // indirect: MIS over BRDF sampling and the learned vMF sampler
    let mut indirect = TransientHistogram::zeros(binning);
    if backend.has_cache() && settings.n_secondary > 0 && n.dot(w_out) > 0.0 {
        let lobes = backend.vmf(x, w_out);
        for _ in 0..settings.n_secondary {
            if let Some((wi, p_b)) = sample_brdf(&mat, n, w_out, rng) {
                let cos = n.dot(wi);
                if cos > 0.0 {
                    let p_v = lobes.pdf(wi);
                    let wgt = mis_weight(p_b, p_v);
                    let f = eval_brdf_mono(&mat, n, wi, w_out);
                    let s = wgt * f * cos / p_b;
                    if s > 0.0 {
                        let li =
                            query_cache_incident(backend, x, wi, light, binning, settings, rng);
                        for (o, v) in indirect.values.iter_mut().zip(&li.values) {
                            *o += s * v;
                        }
                    }
                }
            }
            let (wi, p_v) = lobes.sample(rng);
            let cos = n.dot(wi);
            if cos > 0.0 && p_v > 0.0 {
                let p_b = pdf_brdf(&mat, n, wi, w_out);
                let wgt = mis_weight(p_v, p_b);
                let f = eval_brdf_mono(&mat, n, wi, w_out);
                let s = wgt * f * cos / p_v;
                if s > 0.0 {
                    let li = query_cache_incident(backend, x, wi, light, binning, settings, rng);
                    for (o, v) in indirect.values.iter_mut().zip(&li.values) {
                        *o += s * v;
                    }
                }
            }
        }
        let inv = 1.0 / settings.n_secondary as f64;
        indirect.values.iter_mut().for_each(|v| *v *= inv);
    }
    (direct, indirect)
}

/// Render one pixel in the requested mode. Direct + indirect equals the full
/// histogram exactly (they are accumulated from the same terms).
pub fn render_pixel<B: SceneBackend>(
    backend: &B,
    ray: &Ray,
    light: &PulsedPointLight,
    mode: RenderMode,
    binning: TimeBinning,
    settings: &RenderSettings,
    seed: u64,
    tags: &[u64],
) -> PixelRender {
    let mut stream_tags = tags.to_vec();
    stream_tags.push(0x70691);
    let mut rng: ChaCha8Rng = rng_stream(seed, &stream_tags);
    let cascade = backend_samples(backend, ray, &settings.cascade, &mut rng);
    render_pixel_with_samples(backend, ray, light, mode, binning, settings, &cascade.samples, &mut rng)
}

#[allow(clippy::too_many_arguments)]
pub fn render_pixel_with_samples<B: SceneBackend, R: Rng>(
    backend: &B,
    ray: &Ray,
    light: &PulsedPointLight,
    mode: RenderMode,
    binning: TimeBinning,
    settings: &RenderSettings,
    samples: &RaySampleSet,
    rng: &mut R,
) -> PixelRender {
    let mut out = PixelRender {
        full: TransientHistogram::zeros(binning),
        direct: TransientHistogram::zeros(binning),
        indirect: TransientHistogram::zeros(binning),
        acc: 0.0,
        depth: 0.0,
        normal: Vec3::ZERO,
        overflow: 0.0,
    };
    if samples.is_empty() {
        return out;
    }
    let w_out = -ray.direction;
    let mut cache_direct_part = vec![0.0; binning.n_bins];
    for (k, &w) in samples.weights.iter().enumerate() {
        if w < settings.w_min {
            continue;
        }
        let t_k = samples.t[k];
        let x = ray.at(t_k);
        let delay_bins = t_k / binning.bin_width;
        out.acc += w;
        out.depth += w * t_k;
        let n = orient_normal(backend.shading_normal(x), w_out);
        out.normal += n * w;
        if mode.wants_cache() {
            if mode != RenderMode::CacheIndirect {
                let (bin, mag) = backend.cache_direct(x, light, w_out, binning);
                if mag > 0.0 {
                    let of = splat(&mut cache_direct_part, bin + delay_bins, w * mag);
                    out.overflow += of;
                }
            }
            if mode != RenderMode::CacheDirect {
                let ind = backend.cache_indirect(x, light, w_out);
                if !ind.is_empty() {
                    let h = TransientHistogram::from_values(ind, binning);
                    let (shifted, of) = h.shifted(t_k);
                    out.overflow += of * w;
                    for (o, v) in out.indirect.values.iter_mut().zip(&shifted.values) {
                        *o += w * v;
                    }
                }
            }
        } else {
            let want_direct = mode != RenderMode::PhysicalIndirect;
            let want_indirect = mode != RenderMode::PhysicalDirect;
            let local = RenderSettings {
                n_secondary: if want_indirect { settings.n_secondary } else { 0 },
                ..settings.clone()
            };
            let (dir, ind) =
                shade_physically_based(backend, x, n, w_out, light, binning, &local, rng);
            if want_direct {
                let (shifted, of) = dir.shifted(t_k);
                out.overflow += of * w;
                for (o, v) in out.direct.values.iter_mut().zip(&shifted.values) {
                    *o += w * v;
                }
            }
            if want_indirect {
                let (shifted, of) = ind.shifted(t_k);
                out.overflow += of * w;
                for (o, v) in out.indirect.values.iter_mut().zip(&shifted.values) {
                    *o += w * v;
                }
            }
        }
    }
    if mode.wants_cache() {
        convolve_pulse_into(&mut out.direct.values, &cache_direct_part, light);
    }
    for b in 0..binning.n_bins {
        out.full.values[b] = out.direct.values[b] + out.indirect.values[b];
    }
    if out.acc > 1e-12 {
        out.depth /= out.acc;
        if out.normal.norm() > 1e-12 {
            out.normal = out.normal.normalized();
        }
    }
    out
}
