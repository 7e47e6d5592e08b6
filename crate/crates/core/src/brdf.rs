//! Disney-GGX BRDF evaluation and sampling, the von Mises-Fisher mixture
//! used by the learned illumination sampler, and the balance heuristic for
//! multiple importance sampling.

use crate::math::{onb, vec3, Vec3};
use rand::Rng;

pub type Rgb = [f64; 3];

pub fn rgb_mean(c: Rgb) -> f64 {
    (c[0] + c[1] + c[2]) / 3.0
}

pub fn rgb_scale(c: Rgb, s: f64) -> Rgb {
    [c[0] * s, c[1] * s, c[2] * s]
}

pub fn rgb_add(a: Rgb, b: Rgb) -> Rgb {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub const ROUGHNESS_MIN: f64 = 0.01;

/// Disney-GGX material: albedo in [0,1]^3, roughness in [0.01,1],
/// metalness in [0,1].
#[derive(Copy, Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DisneyGgx {
    pub albedo: Rgb,
    pub roughness: f64,
    pub metalness: f64,
}

impl DisneyGgx {
    pub fn new(albedo: Rgb, roughness: f64, metalness: f64) -> DisneyGgx {
        DisneyGgx {
            albedo: [
                albedo[0].clamp(0.0, 1.0),
                albedo[1].clamp(0.0, 1.0),
                albedo[2].clamp(0.0, 1.0),
            ],
            roughness: roughness.clamp(ROUGHNESS_MIN, 1.0),
            metalness: metalness.clamp(0.0, 1.0),
        }
    }

    pub fn diffuse(albedo: Rgb) -> DisneyGgx {
        DisneyGgx::new(albedo, 1.0, 0.0)
    }

    /// Diffuse lobe (1 - m) a / pi, before Fresnel energy coupling.
    pub fn diffuse_lobe(&self) -> Rgb {
        rgb_scale(self.albedo, (1.0 - self.metalness) / std::f64::consts::PI)
    }

    fn f0(&self) -> Rgb {
        let m = self.metalness;
        [
            0.04 * (1.0 - m) + self.albedo[0] * m,
            0.04 * (1.0 - m) + self.albedo[1] * m,
            0.04 * (1.0 - m) + self.albedo[2] * m,
        ]
    }
}

const GRAZING_EPS: f64 = 1e-7;

fn ggx_d(alpha2: f64, ndoth: f64) -> f64 {
    if ndoth <= 0.0 {
        return 0.0;
    }
    let d = ndoth * ndoth * (alpha2 - 1.0) + 1.0;
    alpha2 / (std::f64::consts::PI * d * d)
}

fn smith_lambda(alpha2: f64, ndotv: f64) -> f64 {
    let c2 = (ndotv * ndotv).min(1.0);
    let tan2 = (1.0 - c2) / c2.max(1e-12);
    (-1.0 + (1.0 + alpha2 * tan2).sqrt()) / 2.0
}

/// Evaluate the Disney-GGX BRDF. `wi` and `wo` point away from the surface.
/// The diffuse lobe is weighted by (1 - F) so the combined lobes stay inside
/// the white-furnace energy bound.
pub fn eval_brdf(mat: &DisneyGgx, n: Vec3, wi: Vec3, wo: Vec3) -> Rgb {
    let ndoti = n.dot(wi);
    let ndoto = n.dot(wo);
    if ndoti <= 0.0 || ndoto <= 0.0 {
        return [0.0; 3];
    }
    let denom = 4.0 * ndoti * ndoto;
    if denom < GRAZING_EPS {
        return [0.0; 3];
    }
    let h = (wi + wo).normalized();
    let ndoth = n.dot(h);
    let hdoti = h.dot(wi).clamp(0.0, 1.0);
    let alpha = mat.roughness * mat.roughness;
    let alpha2 = alpha * alpha;
    let d = ggx_d(alpha2, ndoth);
    let g = 1.0 / (1.0 + smith_lambda(alpha2, ndoti) + smith_lambda(alpha2, ndoto));
    let f0 = mat.f0();
    let fre5 = (1.0 - hdoti).powi(5);
    let diffuse = mat.diffuse_lobe();
    let mut out = [0.0; 3];
    for c in 0..3 {
        let f = f0[c] + (1.0 - f0[c]) * fre5;
        out[c] = (1.0 - f) * diffuse[c] + d * f * g / (4.0 * ndoti * ndoto);
    }
    out
}

pub fn eval_brdf_mono(mat: &DisneyGgx, n: Vec3, wi: Vec3, wo: Vec3) -> f64 {
    rgb_mean(eval_brdf(mat, n, wi, wo))
}

/// PDF of `sample_brdf` for a given incident direction.
pub fn pdf_brdf(mat: &DisneyGgx, n: Vec3, wi: Vec3, wo: Vec3) -> f64 {
    let ndoti = n.dot(wi);
    if ndoti <= 0.0 || n.dot(wo) <= 0.0 {
        return 0.0;
    }
    let p_spec = spec_prob(mat);
    let h = (wi + wo).normalized();
    let ndoth = n.dot(h).max(0.0);
    let hdoto = h.dot(wo).max(1e-12);
    let alpha = mat.roughness * mat.roughness;
    let alpha2 = alpha * alpha;
    let pdf_h = ggx_d(alpha2, ndoth) * ndoth;
    let pdf_spec = pdf_h / (4.0 * hdoto);
    let pdf_diff = ndoti / std::f64::consts::PI;
    (1.0 - p_spec) * pdf_diff + p_spec * pdf_spec
}

fn spec_prob(mat: &DisneyGgx) -> f64 {
    // metals have no diffuse lobe; dielectrics split half/half
    1.0 / (2.0 - mat.metalness)
}

/// Draw an incident direction from the cosine/Trowbridge-Reitz lobe mixture.
/// Returns None when the sampled direction falls below the horizon (the
/// zero-contribution flag).
pub fn sample_brdf<R: Rng>(
    mat: &DisneyGgx,
    n: Vec3,
    wo: Vec3,
    rng: &mut R,
) -> Option<(Vec3, f64)> {
    debug_assert!(n.dot(wo) > 0.0);
    let p_spec = spec_prob(mat);
    let (t, b) = onb(n);
    let wi = if rng.gen::<f64>() < p_spec {
        // sample half vector from the GGX distribution
        let alpha = mat.roughness * mat.roughness;
        let u: f64 = rng.gen();
        let v: f64 = rng.gen();
        let tan2 = alpha * alpha * u / (1.0 - u).max(1e-15);
        let cos_t = 1.0 / (1.0 + tan2).sqrt();
        let sin_t = (1.0 - cos_t * cos_t).max(0.0).sqrt();
        let phi = std::f64::consts::TAU * v;
        let h = t * (sin_t * phi.cos()) + b * (sin_t * phi.sin()) + n * cos_t;
        let wi = wo.reflect(h);
        if wi.dot(n) <= 0.0 {
            return None;
        }
        wi
    } else {
        let u: f64 = rng.gen();
        let v: f64 = rng.gen();
        let r = u.sqrt();
        let phi = std::f64::consts::TAU * v;
        let z = (1.0 - u).max(0.0).sqrt();
        (t * (r * phi.cos()) + b * (r * phi.sin()) + n * z).normalized()
    };
    let pdf = pdf_brdf(mat, n, wi, wo);
    if pdf <= 0.0 {
        return None;
    }
    Some((wi, pdf))
}

/// Balance heuristic weight for a sample drawn from strategy `a`.
pub fn mis_weight(p_a: f64, p_b: f64) -> f64 {
    assert!(p_a >= 0.0 && p_b >= 0.0);
    assert!(p_a + p_b > 0.0, "mis_weight called with both pdfs zero");
    p_a / (p_a + p_b)
}

// ---- von Mises-Fisher mixture ----

pub const VMF_KAPPA_MAX: f64 = 1e4;

#[derive(Copy, Clone, Debug)]
pub struct VmfLobe {
    pub mu: Vec3,
    pub kappa: f64,
}

/// Mixture of vMF lobes; weights are nonnegative and sum to 1.
#[derive(Clone, Debug)]
pub struct VmfLobeSet {
    pub lobes: Vec<(VmfLobe, f64)>,
}

impl VmfLobeSet {
    pub fn new(lobes: Vec<(VmfLobe, f64)>) -> VmfLobeSet {
        let total: f64 = lobes.iter().map(|(_, w)| w).sum();
        debug_assert!((total - 1.0).abs() < 1e-6, "vMF weights must sum to 1");
        debug_assert!(lobes.iter().all(|(_, w)| *w >= 0.0));
        let lobes = lobes
            .into_iter()
            .map(|(l, w)| {
                (
                    VmfLobe {
                        mu: l.mu.normalized(),
                        kappa: l.kappa.clamp(0.0, VMF_KAPPA_MAX),
                    },
                    w,
                )
            })
            .collect();
        VmfLobeSet { lobes }
    }

    pub fn uniform() -> VmfLobeSet {
        VmfLobeSet {
            lobes: vec![(
                VmfLobe {
                    mu: Vec3::Z,
                    kappa: 0.0,
                },
                1.0,
            )],
        }
    }

    pub fn pdf(&self, w: Vec3) -> f64 {
        self.lobes
            .iter()
            .map(|(l, wt)| wt * vmf_pdf(l, w))
            .sum()
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> (Vec3, f64) {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut pick = self.lobes.len() - 1;
        for (i, (_, wt)) in self.lobes.iter().enumerate() {
            acc += wt;
            if u < acc {
                pick = i;
                break;
            }
        }
        let lobe = self.lobes[pick].0;
        let dir = vmf_sample(&lobe, rng);
        (dir, self.pdf(dir))
    }
}

fn vmf_pdf(l: &VmfLobe, w: Vec3) -> f64 {
    let k = l.kappa;
    if k < 1e-6 {
        return 1.0 / (4.0 * std::f64::consts::PI);
    }
    // kappa e^{kappa (mu.w - 1)} / (2 pi (1 - e^{-2 kappa}))
    let c = k / (std::f64::consts::TAU * (1.0 - (-2.0 * k).exp()));
    c * (k * (l.mu.dot(w) - 1.0)).exp()
}

fn vmf_sample<R: Rng>(l: &VmfLobe, rng: &mut R) -> Vec3 {
    let k = l.kappa;
    let u: f64 = rng.gen();
    let v: f64 = rng.gen();
    let cos_t = if k < 1e-6 {
        1.0 - 2.0 * u
    } else {
        // inverse CDF of the vMF polar angle
        1.0 + (u + (1.0 - u) * (-2.0 * k).exp()).ln() / k
    };
    let cos_t = cos_t.clamp(-1.0, 1.0);
    let sin_t = (1.0 - cos_t * cos_t).max(0.0).sqrt();
    let phi = std::f64::consts::TAU * v;
    let (t, b) = onb(l.mu);
    t * (sin_t * phi.cos()) + b * (sin_t * phi.sin()) + l.mu * cos_t
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_stream;

    #[test]
    fn diffuse_lobe_examples() {
        let white = DisneyGgx::new([1.0; 3], 1.0, 0.0);
        let d = white.diffuse_lobe();
        assert!((d[0] - 1.0 / std::f64::consts::PI).abs() < 1e-12);
        let metal = DisneyGgx::new([1.0; 3], 0.3, 1.0);
        assert_eq!(metal.diffuse_lobe(), [0.0; 3]);
    }

    #[test]
    fn eval_zero_below_horizon() {
        let mat = DisneyGgx::new([0.8; 3], 0.4, 0.2);
        let n = Vec3::Z;
        let wi = vec3(0.0, 0.5, -0.5).normalized();
        let wo = vec3(0.0, 0.0, 1.0);
        assert_eq!(eval_brdf(&mat, n, wi, wo), [0.0; 3]);
    }

    #[test]
    fn helmholtz_reciprocity() {
        let mut rng = rng_stream(5, &[0]);
        for _ in 0..1000 {
            let mat = DisneyGgx::new(
                [rng.gen(), rng.gen(), rng.gen()],
                rng.gen_range(0.01..1.0),
                rng.gen(),
            );
            let n = Vec3::Z;
            let wi = sample_hemi(&mut rng);
            let wo = sample_hemi(&mut rng);
            let a = eval_brdf(&mat, n, wi, wo);
            let b = eval_brdf(&mat, n, wo, wi);
            for c in 0..3 {
                assert!(
                    (a[c] - b[c]).abs() <= 1e-12 * (1.0 + a[c].abs()),
                    "reciprocity {a:?} vs {b:?}"
                );
            }
        }
    }

    fn sample_hemi<R: Rng>(rng: &mut R) -> Vec3 {
        loop {
            let v = vec3(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(0.05..1.0),
            );
            if v.norm() > 1e-3 {
                return v.normalized();
            }
        }
    }

    /// White-furnace bound via Monte Carlo hemisphere integration: the
    /// directional albedo of a white material never exceeds 1 + 1e-2.
    #[test]
    fn white_furnace_grid() {
        let mut rng = rng_stream(6, &[0]);
        let n = Vec3::Z;
        let wo = vec3(0.4, 0.0, 0.8).normalized();
        for ri in 0..5 {
            for mi in 0..5 {
                let r = 0.01 + (ri as f64 / 4.0) * 0.99;
                let m = mi as f64 / 4.0;
                let mat = DisneyGgx::new([1.0; 3], r, m);
                let ns = 100_000;
                let mut acc = 0.0;
                for _ in 0..ns {
                    // importance sampling resolves the specular spike at low
                    // roughness; rejected below-horizon draws contribute 0
                    if let Some((wi, pdf)) = sample_brdf(&mat, n, wo, &mut rng) {
                        let f = eval_brdf(&mat, n, wi, wo);
                        acc += rgb_mean(f) * wi.z.max(0.0) / pdf;
                    }
                }
                let albedo = acc / ns as f64;
                assert!(
                    albedo <= 1.0 + 1e-2,
                    "furnace violated at r={r} m={m}: {albedo}"
                );
            }
        }
    }

    #[test]
    fn sample_matches_pdf_chi_square_proxy() {
        // histogram 1e5 samples over cos-theta strata and compare against the
        // pdf integrated by fine quadrature within each stratum
        let mat = DisneyGgx::new([0.7; 3], 0.35, 0.4);
        let n = Vec3::Z;
        let wo = vec3(0.3, 0.1, 0.9).normalized();
        let mut rng = rng_stream(7, &[1]);
        let nbins = 20;
        let mut counts = vec![0.0f64; nbins];
        let ns = 100_000usize;
        let mut kept = 0usize;
        for _ in 0..ns {
            if let Some((wi, _)) = sample_brdf(&mat, n, wo, &mut rng) {
                let b = ((wi.z.clamp(0.0, 1.0 - 1e-12)) * nbins as f64) as usize;
                counts[b] += 1.0;
                kept += 1;
            }
        }
        // expected mass per stratum: integrate pdf over phi x cos bands
        let mut expected = vec![0.0f64; nbins];
        let nphi = 256;
        let ncos = 16;
        for b in 0..nbins {
            for ic in 0..ncos {
                let z = (b as f64 + (ic as f64 + 0.5) / ncos as f64) / nbins as f64;
                let sin_t = (1.0 - z * z).max(0.0).sqrt();
                for ip in 0..nphi {
                    let phi = std::f64::consts::TAU * (ip as f64 + 0.5) / nphi as f64;
                    let wi = vec3(sin_t * phi.cos(), sin_t * phi.sin(), z);
                    let pdf = pdf_brdf(&mat, n, wi, wo);
                    expected[b] += pdf * (1.0 / nbins as f64 / ncos as f64)
                        * (std::f64::consts::TAU / nphi as f64);
                }
            }
        }
        let total_expected: f64 = expected.iter().sum();
        // rejected below-horizon samples correspond to pdf mass outside the
        // hemisphere; renormalize to the kept fraction
        let mut chi2 = 0.0;
        let mut dof = 0usize;
        for b in 0..nbins {
            let e = expected[b] / total_expected * kept as f64;
            if e < 5.0 {
                continue;
            }
            chi2 += (counts[b] - e) * (counts[b] - e) / e;
            dof += 1;
        }
        // chi2 99th percentile for dof<=20 is < 37.6
        assert!(dof >= 10, "too few usable strata");
        assert!(chi2 < 37.6, "chi2 {chi2} with dof {dof}");
    }

    #[test]
    fn pdf_integrates_to_one() {
        let mat = DisneyGgx::new([0.5; 3], 0.2, 0.8);
        let n = Vec3::Z;
        let wo = vec3(-0.2, 0.4, 0.89).normalized();
        let mut rng = rng_stream(8, &[0]);
        let ns = 200_000;
        let mut acc = 0.0;
        for _ in 0..ns {
            // uniform hemisphere
            let u: f64 = rng.gen();
            let v: f64 = rng.gen();
            let z = u;
            let sin_t = (1.0 - z * z).max(0.0).sqrt();
            let phi = std::f64::consts::TAU * v;
            let wi = vec3(sin_t * phi.cos(), sin_t * phi.sin(), z);
            let updf = 1.0 / std::f64::consts::TAU;
            acc += pdf_brdf(&mat, n, wi, wo) / updf;
        }
        let total = acc / ns as f64;
        // below-horizon specular mass cannot be reached; bound within 1% + that deficit
        assert!(total <= 1.01, "pdf integral {total}");
        assert!(total > 0.9, "pdf integral {total}");
    }

    #[test]
    fn low_roughness_concentrates_near_mirror() {
        let mat = DisneyGgx::new([1.0; 3], 0.01, 1.0);
        let n = Vec3::Z;
        let wo = vec3(1.0, 0.0, 1.0).normalized();
        let mirror = wo.reflect(n);
        let mut rng = rng_stream(9, &[0]);
        let mut within = 0;
        let mut total = 0;
        for _ in 0..4000 {
            if let Some((wi, _)) = sample_brdf(&mat, n, wo, &mut rng) {
                total += 1;
                if wi.angle_deg(mirror) < 5.0 {
                    within += 1;
                }
            }
        }
        assert!(total > 3500);
        assert!(
            within as f64 / total as f64 > 0.9,
            "only {within}/{total} within 5 deg"
        );
    }

    #[test]
    fn mis_weight_examples() {
        assert_eq!(mis_weight(1.0, 1.0), 0.5);
        assert_eq!(mis_weight(1.0, 0.0), 1.0);
        assert!((mis_weight(0.2, 0.6) - 0.25).abs() < 1e-12);
    }

    #[test]
    #[should_panic]
    fn mis_weight_rejects_double_zero() {
        mis_weight(0.0, 0.0);
    }

    #[test]
    fn vmf_uniform_limit() {
        let set = VmfLobeSet::new(vec![(
            VmfLobe {
                mu: Vec3::Z,
                kappa: 0.0,
            },
            1.0,
        )]);
        let quarter = 1.0 / (4.0 * std::f64::consts::PI);
        for w in [Vec3::Z, -Vec3::Z, Vec3::X, vec3(0.6, 0.0, 0.8)] {
            assert!((set.pdf(w) - quarter).abs() < 1e-12);
        }
    }

    #[test]
    fn vmf_large_kappa_asymptote() {
        let k = 100.0;
        let set = VmfLobeSet::new(vec![(
            VmfLobe {
                mu: Vec3::Z,
                kappa: k,
            },
            1.0,
        )]);
        let expect = k / std::f64::consts::TAU;
        let got = set.pdf(Vec3::Z);
        assert!(
            (got - expect).abs() / expect < 0.01,
            "vmf peak {got} vs {expect}"
        );
    }

    #[test]
    fn vmf_mixture_of_identical_lobes() {
        let l = VmfLobe {
            mu: vec3(0.0, 0.6, 0.8).normalized(),
            kappa: 7.0,
        };
        let single = VmfLobeSet::new(vec![(l, 1.0)]);
        let double = VmfLobeSet::new(vec![(l, 0.5), (l, 0.5)]);
        let w = vec3(0.3, 0.3, 0.9).normalized();
        assert!((single.pdf(w) - double.pdf(w)).abs() < 1e-12);
    }

    #[test]
    fn vmf_pdf_normalizes() {
        let set = VmfLobeSet::new(vec![
            (
                VmfLobe {
                    mu: Vec3::Z,
                    kappa: 15.0,
                },
                0.7,
            ),
            (
                VmfLobe {
                    mu: Vec3::X,
                    kappa: 2.0,
                },
                0.3,
            ),
        ]);
        let mut rng = rng_stream(10, &[0]);
        let ns = 200_000;
        let mut acc = 0.0;
        for _ in 0..ns {
            // uniform sphere
            let z: f64 = rng.gen_range(-1.0..1.0);
            let phi: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let s = (1.0f64 - z * z).max(0.0).sqrt();
            let w = vec3(s * phi.cos(), s * phi.sin(), z);
            acc += set.pdf(w) * 4.0 * std::f64::consts::PI;
        }
        let total = acc / ns as f64;
        assert!((total - 1.0).abs() < 0.01, "vmf integral {total}");
    }

    #[test]
    fn vmf_sampling_matches_pdf_moments() {
        let set = VmfLobeSet::new(vec![(
            VmfLobe {
                mu: Vec3::Z,
                kappa: 5.0,
            },
            1.0,
        )]);
        let mut rng = rng_stream(11, &[0]);
        let ns = 100_000;
        let mut mean_cos = 0.0;
        for _ in 0..ns {
            let (w, pdf) = set.sample(&mut rng);
            assert!(pdf > 0.0);
            mean_cos += w.z;
        }
        mean_cos /= ns as f64;
        // E[cos] = coth(k) - 1/k for vMF
        let k = 5.0f64;
        let expect = 1.0 / k.tanh() - 1.0 / k;
        assert!(
            (mean_cos - expect).abs() < 0.01,
            "mean cos {mean_cos} vs {expect}"
        );
    }

    #[test]
    fn mis_combination_is_unbiased_against_single_strategies() {
        // integrand over the sphere, estimated with vMF strategy, uniform
        // strategy, and their MIS combination; all must agree within noise
        let set = VmfLobeSet::new(vec![(
            VmfLobe {
                mu: Vec3::Z,
                kappa: 8.0,
            },
            1.0,
        )]);
        let uniform = VmfLobeSet::uniform();
        let f = |w: Vec3| (1.0 + w.z).powi(2) * 0.25;
        let ns = 60_000;
        let run = |mode: u8, seed: u64| -> (f64, f64) {
            let mut rng = rng_stream(seed, &[mode as u64]);
            let mut acc = 0.0;
            let mut acc2 = 0.0;
            for _ in 0..ns {
                let est = match mode {
                    0 => {
                        let (w, p) = set.sample(&mut rng);
                        f(w) / p
                    }
                    1 => {
                        let (w, p) = uniform.sample(&mut rng);
                        f(w) / p
                    }
                    _ => {
                        let (wa, pa) = set.sample(&mut rng);
                        let (wb, pb) = uniform.sample(&mut rng);
                        let wa_other = uniform.pdf(wa);
                        let wb_other = set.pdf(wb);
                        mis_weight(pa, wa_other) * f(wa) / pa
                            + mis_weight(pb, wb_other) * f(wb) / pb
                    }
                };
                acc += est;
                acc2 += est * est;
            }
            let mean = acc / ns as f64;
            let var = (acc2 / ns as f64 - mean * mean).max(0.0);
            (mean, (var / ns as f64).sqrt())
        };
        let (m0, s0) = run(0, 21);
        let (m1, s1) = run(1, 22);
        let (m2, s2) = run(2, 23);
        let exact = 4.0 * std::f64::consts::PI / 3.0; // int (1+cos)^2/4 over sphere
        for (m, s) in [(m0, s0), (m1, s1), (m2, s2)] {
            assert!(
                (m - exact).abs() < 3.0 * s + 1e-3,
                "estimate {m} vs {exact} (stderr {s})"
            );
        }
        assert!((m2 - m0).abs() < 3.0 * (s0 + s2));
        assert!((m2 - m1).abs() < 3.0 * (s1 + s2));
    }
}
