//! Brute-force recursive time-resolved path tracer over analytic scenes.
//! This is the ground-truth reference: exact intersections, next-event
//! estimation at every bounce, BRDF-sampled continuation.

use rand::Rng;

use crate::brdf::{eval_brdf_mono, sample_brdf};
use crate::fields::AnalyticScene;
use crate::math::Vec3;
use crate::rng::rng_stream;
use crate::transient::{Ray, TimeBinning, TransientHistogram};
use crate::transport::PulsedPointLight;

#[derive(Copy, Clone, Debug)]
pub struct PathTraceConfig {
    pub max_bounces: usize,
    pub samples_per_pixel: usize,
    /// Bounce index after which Russian roulette starts.
    pub russian_roulette_start: usize,
    pub seed: u64,
}

impl Default for PathTraceConfig {
    fn default() -> Self {
        PathTraceConfig {
            max_bounces: 4,
            samples_per_pixel: 64,
            russian_roulette_start: 3,
            seed: 0,
        }
    }
}

/// Histograms separated by bounce count: index 0 holds single-scatter
/// (direct) light, index b holds light that scattered b+1 times.
#[derive(Clone, Debug)]
pub struct BounceHistograms {
    pub per_bounce: Vec<TransientHistogram>,
}

impl BounceHistograms {
    pub fn zeros(binning: TimeBinning, max_bounces: usize) -> BounceHistograms {
        BounceHistograms {
            per_bounce: (0..max_bounces)
                .map(|_| TransientHistogram::zeros(binning))
                .collect(),
        }
    }

    pub fn total(&self) -> TransientHistogram {
        let mut out = self.per_bounce[0].clone();
        for h in &self.per_bounce[1..] {
            out.add_assign(h);
        }
        out
    }

    pub fn direct(&self) -> &TransientHistogram {
        &self.per_bounce[0]
    }

    pub fn indirect(&self) -> TransientHistogram {
        let mut out = TransientHistogram::zeros(self.per_bounce[0].binning);
        for h in &self.per_bounce[1..] {
            out.add_assign(h);
        }
        out
    }
}

const HIT_EPS: f64 = 1e-7;

fn visible(scene: &AnalyticScene, from: Vec3, to: Vec3) -> bool {
    let delta = to - from;
    let dist = delta.norm();
    if dist < 1e-9 {
        return true;
    }
    let dir = delta / dist;
    match scene.intersect(from + dir * HIT_EPS, dir) {
        Some(h) => h.t >= dist - 2.0 * HIT_EPS,
        None => true,
    }
}

/// Unbiased Monte Carlo estimate of the transient response along one sensor
/// ray, with per-bounce separation. Deterministic given (cfg.seed, tags).
pub fn path_trace_transient(
    scene: &AnalyticScene,
    ray: &Ray,
    light: &PulsedPointLight,
    binning: TimeBinning,
    cfg: &PathTraceConfig,
    tags: &[u64],
) -> BounceHistograms {
    let mut out = BounceHistograms::zeros(binning, cfg.max_bounces);
    let mut stream_tags = tags.to_vec();
    stream_tags.push(0x0a1c);
    let mut rng = rng_stream(cfg.seed, &stream_tags);
    let spp = cfg.samples_per_pixel.max(1);
    let inv_spp = 1.0 / spp as f64;
    for _ in 0..spp {
        trace_one(scene, ray, light, cfg, &mut rng, inv_spp, &mut out);
    }
    out
}

fn trace_one<R: Rng>(
    scene: &AnalyticScene,
    ray: &Ray,
    light: &PulsedPointLight,
    cfg: &PathTraceConfig,
    rng: &mut R,
    weight: f64,
    out: &mut BounceHistograms,
) {
    let binning = out.per_bounce[0].binning;
    let mut origin = ray.origin;
    let mut dir = ray.direction;
    let mut throughput = weight;
    let mut path_len = 0.0f64;
    for bounce in 1..=cfg.max_bounces {
        let hit = match scene.intersect(origin, dir) {
            Some(h) => h,
            None => return,
        };
        path_len += hit.t;
        let w_out = -dir;
        // next-event estimation toward the pulsed point light
        let delta = hit.point - light.position;
        let d_l = delta.norm();
        if d_l > 1e-9 {
            let w_l = delta / d_l;
            let to_light = -w_l;
            let cos = hit.normal.dot(to_light);
            if cos > 0.0 && visible(scene, hit.point, light.position) {
                let f = eval_brdf_mono(&hit.mat, hit.normal, to_light, w_out);
                let scale =
                    throughput * f * cos * light.intensity_toward(w_l) / (d_l * d_l);
                if scale > 0.0 {
                    let (shifted, _) = light.pulse.shifted(path_len + d_l);
                    let dst = &mut out.per_bounce[bounce - 1];
                    for (o, v) in dst.values.iter_mut().zip(&shifted.values) {
                        *o += scale * v;
                    }
                }
            }
        }
        if bounce == cfg.max_bounces {
            return;
        }
        // continue the path by BRDF sampling
        let (wi, pdf) = match sample_brdf(&hit.mat, hit.normal, w_out, rng) {
            Some(s) => s,
            None => return,
        };
        let cos = hit.normal.dot(wi);
        if cos <= 0.0 {
            return;
        }
        let f = eval_brdf_mono(&hit.mat, hit.normal, wi, w_out);
        throughput *= f * cos / pdf;
        if throughput <= 0.0 {
            return;
        }
        if bounce >= cfg.russian_roulette_start {
            // survival = max albedo channel keeps deep bounces unbiased
            let p = hit
                .mat
                .albedo
                .iter()
                .cloned()
                .fold(0.0f64, f64::max)
                .clamp(0.05, 0.95);
            if rng.gen::<f64>() >= p {
                return;
            }
            throughput /= p;
        }
        origin = hit.point + hit.normal * HIT_EPS;
        dir = wi;
        // the epsilon offset is not added to path_len; it is below binning
        // resolution by construction
    }
}

/// Exact single-bounce histogram: the pulse delayed by (sensor distance +
/// light distance) and scaled by f * cos / d^2 with exact visibility.
pub fn closed_form_direct(
    scene: &AnalyticScene,
    ray: &Ray,
    light: &PulsedPointLight,
    binning: TimeBinning,
) -> TransientHistogram {
    let hit = match scene.intersect(ray.origin, ray.direction) {
        Some(h) => h,
        None => return TransientHistogram::zeros(binning),
    };
    let delta = hit.point - light.position;
    let d_l = delta.norm();
    if d_l < 1e-9 {
        return TransientHistogram::zeros(binning);
    }
    let w_l = delta / d_l;
    let to_light = -w_l;
    let cos = hit.normal.dot(to_light);
    if cos <= 0.0 || !visible(scene, hit.point, light.position) {
        return TransientHistogram::zeros(binning);
    }
    let f = eval_brdf_mono(&hit.mat, hit.normal, to_light, -ray.direction);
    let scale = f * cos * light.intensity_toward(w_l) / (d_l * d_l);
    let (shifted, _) = light.pulse.shifted(hit.t + d_l);
    shifted.scaled(scale)
}
