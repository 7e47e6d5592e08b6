use flare::brdf::DisneyGgx;
use flare::fields::AnalyticScene;
use flare::math::{vec3, Vec3};
use flare::rng::rng_stream;
use flare::transient::{Ray, TimeBinning};
use flare::transport::{backend_samples, AnalyticBackend, PulsedPointLight, RenderSettings, SceneBackend, render_pixel, RenderMode};
use rand::Rng;

fn main() {
    let binning = TimeBinning::new(0.05, 128);
    let scene = AnalyticScene::plane(Vec3::ZERO, Vec3::Z, DisneyGgx::diffuse([0.75;3]));
    let backend = AnalyticBackend::new(&scene, binning);
    let settings = RenderSettings::default();
    let mut rng = rng_stream(11, &[0]);
    // skip to ray index 1 by consuming ray 0's draws
    let mut origin = Vec3::ZERO; let mut dir = Vec3::Z;
    for _ in 0..2 {
        origin = vec3(rng.gen_range(-0.8..0.8), rng.gen_range(-0.8..0.8), rng.gen_range(0.8..1.6));
        let target = vec3(rng.gen_range(-0.6..0.6), rng.gen_range(-0.6..0.6), 0.0);
        dir = (target - origin).normalized();
    }
    println!("ray1 origin {:?} dir {:?}", origin, dir);
    let ray = Ray::new(origin, dir);
    let light = PulsedPointLight::gaussian(origin, binning, 4, 2.0, 1.0);
    let hit_t = scene.intersect(origin, dir).unwrap().t;
    println!("hit t {hit_t} -> main peak bin {}", (2.0*hit_t/0.05) as usize + 4);
    let mut r = rng_stream(7, &[1, 0x70691]);
    let cascade = backend_samples(&backend, &ray, &settings.cascade, &mut r);
    let s = &cascade.samples;
    for k in 0..s.t.len() {
        if s.weights[k] > 1e-4 && (s.t[k] - hit_t).abs() > 0.02 {
            println!("suspicious k {k}: t {:.4} dt {:.4} w {:.5}", s.t[k], s.dt[k], s.weights[k]);
        }
    }
    let px = render_pixel(&backend, &ray, &light, RenderMode::Physical, binning, &settings, 7, &[1]);
    for b in 60..80 {
        if px.full.values[b] > 1e-5 { println!("bin {b}: {:.5}", px.full.values[b]); }
    }
}
