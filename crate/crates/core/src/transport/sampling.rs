//! Volume-rendering quadrature and proposal-driven hierarchical sampling.

use rand::Rng;

use crate::transient::Ray;

/// w_k = (1 - e^{-sigma_k dt_k}) * exp(-sum_{j<k} sigma_j dt_j)
pub fn quadrature_weights(sigma: &[f64], dt: &[f64]) -> Vec<f64> {
    assert_eq!(sigma.len(), dt.len());
    weights_from_masses(sigma.iter().zip(dt).map(|(&s, &d)| s * d))
}

/// Same contract with per-interval optical depths already integrated.
pub fn weights_from_masses(masses: impl IntoIterator<Item = f64>) -> Vec<f64> {
    let mut acc = 0.0f64;
    masses
        .into_iter()
        .map(|m| {
            debug_assert!(m >= 0.0);
            let w = (1.0 - (-m).exp()) * (-acc).exp();
            acc += m;
            w
        })
        .collect()
}

/// Samples along one ray: strictly increasing midpoints, interval lengths,
/// densities, and quadrature weights.
#[derive(Clone, Debug, Default)]
pub struct RaySampleSet {
    pub t: Vec<f64>,
    pub dt: Vec<f64>,
    pub edges: Vec<f64>,
    pub sigma: Vec<f64>,
    pub weights: Vec<f64>,
}

impl RaySampleSet {
    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn acc(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn check_invariants(&self) -> bool {
        self.t.windows(2).all(|w| w[0] < w[1])
            && self.weights.iter().all(|w| (0.0..=1.0).contains(w))
            && self.acc() <= 1.0 + 1e-6
    }
}

/// One proposal stage: interval edges and the per-interval optical depths
/// that produced the resampling distribution.
#[derive(Clone, Debug)]
pub struct ProposalLevel {
    pub edges: Vec<f64>,
    pub masses: Vec<f64>,
}

pub struct CascadeResult {
    pub proposals: Vec<ProposalLevel>,
    pub samples: RaySampleSet,
}

/// Mixture floor blended into resampling so no interval ever starves.
const RESAMPLE_FLOOR: f64 = 0.01;

/// Stratified refinement through proposal levels. `mass_fn(level, ta, tb)`
/// returns the optical depth of [ta, tb] at that proposal level plus the
/// density-weighted mean ray parameter (used as the shading position at the
/// final level); level equal to `counts.len() - 1` is the final density
/// field. Deterministic given the RNG stream.
pub fn hierarchical_samples<R: Rng>(
    ray: &Ray,
    t_range: Option<(f64, f64)>,
    counts: &[usize],
    mass_fn: &mut dyn FnMut(usize, f64, f64) -> (f64, f64),
    rng: &mut R,
) -> CascadeResult {
    let _ = ray;
    let (t0, t1) = match t_range {
        Some(r) if r.1 > r.0 => r,
        _ => {
            return CascadeResult {
                proposals: Vec::new(),
                samples: RaySampleSet::default(),
            }
        }
    };
    assert!(!counts.is_empty());
    let n_levels = counts.len();
    let mut edges: Vec<f64> = uniform_edges(t0, t1, counts[0], rng);
    let mut proposals = Vec::new();
    for level in 0..n_levels - 1 {
        let masses: Vec<f64> = edges
            .windows(2)
            .map(|w| mass_fn(level, w[0], w[1]).0)
            .collect();
        let next = resample_edges(&edges, &masses, counts[level + 1], rng);
        proposals.push(ProposalLevel { edges, masses });
        edges = next;
    }
    // final level: densities and mass centroids per interval
    let final_level = n_levels - 1;
    let mut t = Vec::with_capacity(counts[final_level]);
    let mut dt = Vec::with_capacity(counts[final_level]);
    let mut sigma = Vec::with_capacity(counts[final_level]);
    let mut masses = Vec::with_capacity(counts[final_level]);
    for w in edges.windows(2) {
        let width = w[1] - w[0];
        if width <= 0.0 {
            continue;
        }
        let (m, centroid) = mass_fn(final_level, w[0], w[1]);
        t.push(centroid.clamp(w[0], w[1]));
        dt.push(width);
        sigma.push(m / width);
        masses.push(m);
    }
    let weights = weights_from_masses(masses.iter().copied());
    CascadeResult {
        proposals,
        samples: RaySampleSet {
            t,
            dt,
            edges,
            sigma,
            weights,
        },
    }
}

fn uniform_edges<R: Rng>(t0: f64, t1: f64, n: usize, rng: &mut R) -> Vec<f64> {
    // jittered interior edges keep strata boundaries stochastic while the
    // endpoints stay pinned to the range
    let mut edges = Vec::with_capacity(n + 1);
    edges.push(t0);
    let span = t1 - t0;
    for i in 1..n {
        let u = (i as f64 + (rng.gen::<f64>() - 0.5) * 0.9) / n as f64;
        edges.push(t0 + span * u);
    }
    edges.push(t1);
    edges.sort_by(|a, b| a.partial_cmp(b).unwrap());
    edges
}

/// Draw `n`+1 stratified quantiles through the CDF of interval weights
/// (quadrature weights of the proposal masses, floored by a uniform term).
fn resample_edges<R: Rng>(edges: &[f64], masses: &[f64], n: usize, rng: &mut R) -> Vec<f64> {
    let w = weights_from_masses(masses.iter().copied());
    let k = w.len();
    let total: f64 = w.iter().sum();
    let widths: Vec<f64> = edges.windows(2).map(|e| e[1] - e[0]).collect();
    let span: f64 = widths.iter().sum();
    // mixture with a uniform floor proportional to interval width
    let probs: Vec<f64> = w
        .iter()
        .zip(&widths)
        .map(|(&wi, &dw)| {
            (1.0 - RESAMPLE_FLOOR) * wi / total.max(1e-12) + RESAMPLE_FLOOR * dw / span
        })
        .collect();
    let psum: f64 = probs.iter().sum();
    let mut cdf = Vec::with_capacity(k + 1);
    cdf.push(0.0);
    let mut acc = 0.0;
    for p in &probs {
        acc += p / psum;
        cdf.push(acc);
    }
    cdf[k] = 1.0;
    // outer edges pinned to the domain so quadrature covers the full range;
    // interior edges are stratified quantiles of the CDF
    let mut out = Vec::with_capacity(n + 1);
    out.push(edges[0]);
    for i in 1..n {
        let u = ((i as f64 + (rng.gen::<f64>() - 0.5) * 0.9) / n as f64).clamp(1e-12, 1.0 - 1e-12);
        // invert the piecewise-linear CDF
        let seg = match cdf.binary_search_by(|c| c.partial_cmp(&u).unwrap()) {
            Ok(s) => s.min(k - 1),
            Err(s) => (s - 1).min(k - 1),
        };
        let lo = cdf[seg];
        let hi = cdf[seg + 1];
        let f = if hi > lo { (u - lo) / (hi - lo) } else { 0.5 };
        out.push(edges[seg] + f * (edges[seg + 1] - edges[seg]));
    }
    out.push(edges[k]);
    out.sort_by(|a, b| a.partial_cmp(b).unwrap());
    // guard against duplicate edges from CDF plateaus
    for i in 1..out.len() {
        if out[i] <= out[i - 1] {
            out[i] = out[i - 1] + 1e-12;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::vec3;
    use crate::rng::rng_stream;

    #[test]
    fn quadrature_vacuum_is_zero() {
        let w = quadrature_weights(&[0.0, 0.0, 0.0], &[1.0, 1.0, 1.0]);
        assert_eq!(w, vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn quadrature_closed_forms() {
        // single sample with optical depth 1: w = 1 - e^{-1}
        let w = quadrature_weights(&[1.0], &[1.0]);
        assert!((w[0] - (1.0 - (-1.0f64).exp())).abs() < 1e-12);
        // two samples, unit depth each: w2 = (1 - e^{-1}) e^{-1}
        let w = quadrature_weights(&[1.0, 1.0], &[1.0, 1.0]);
        assert!((w[1] - (1.0 - (-1.0f64).exp()) * (-1.0f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn transmittance_prefix_is_monotone_bounded() {
        let sigma: Vec<f64> = (0..20).map(|i| (i as f64 * 0.37).sin().abs() * 3.0).collect();
        let dt = vec![0.1; 20];
        let w = quadrature_weights(&sigma, &dt);
        let mut acc = 0.0;
        for wi in &w {
            assert!(*wi >= 0.0);
            let next = acc + wi;
            assert!(next >= acc);
            acc = next;
        }
        assert!(acc <= 1.0 + 1e-6);
    }

    fn ray() -> Ray {
        Ray::new(vec3(0.0, 0.0, 0.0), vec3(0.0, 0.0, 1.0))
    }

    #[test]
    fn empty_range_returns_empty_set() {
        let mut rng = rng_stream(1, &[]);
        let r = hierarchical_samples(&ray(), None, &[8, 8, 4], &mut |_, a, b| (0.1, 0.5 * (a + b)), &mut rng);
        assert!(r.samples.is_empty());
        assert!(r.proposals.is_empty());
    }

    #[test]
    fn uniform_density_yields_stratified_uniform_samples() {
        // Kolmogorov-Smirnov test of final sample positions against uniform
        let mut all = Vec::new();
        for trial in 0..64 {
            let mut rng = rng_stream(2, &[trial]);
            let r = hierarchical_samples(
                &ray(),
                Some((0.0, 1.0)),
                &[16, 16, 8],
                &mut |_, a, b| (0.05 * (b - a), 0.5 * (a + b)),
                &mut rng,
            );
            all.extend(r.samples.t.iter().copied());
        }
        all.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = all.len() as f64;
        let mut d = 0.0f64;
        for (i, x) in all.iter().enumerate() {
            let emp_hi = (i + 1) as f64 / n;
            let emp_lo = i as f64 / n;
            d = d.max((emp_hi - x).abs()).max((x - emp_lo).abs());
        }
        // asymptotic KS p-value: Q(lambda) = 2 sum_j (-1)^{j-1} exp(-2 j^2 lambda^2)
        let lambda = (n.sqrt() + 0.12 + 0.11 / n.sqrt()) * d;
        let mut p = 0.0;
        for j in 1..=100u32 {
            let sign = if j % 2 == 1 { 1.0 } else { -1.0 };
            let j = j as f64;
            p += 2.0 * sign * (-2.0 * j * j * lambda * lambda).exp();
        }
        assert!(p > 0.01, "KS p-value {p} (D = {d}, n = {n})");
    }

    #[test]
    fn concentrated_proposal_confines_final_samples() {
        let (a, b) = (0.4, 0.5);
        let mut inside = 0usize;
        let mut total = 0usize;
        for trial in 0..32 {
            let mut rng = rng_stream(3, &[trial]);
            let r = hierarchical_samples(
                &ray(),
                Some((0.0, 1.0)),
                &[32, 32, 16],
                &mut |_, ta, tb| {
                    // high mass only inside [a, b]
                    let lo = ta.max(a);
                    let hi = tb.min(b);
                    let overlap = (hi - lo).max(0.0);
                    let m = 40.0 * overlap + 1e-4 * (tb - ta);
                    let c = if overlap > 0.0 { 0.5 * (lo + hi) } else { 0.5 * (ta + tb) };
                    (m, c)
                },
                &mut rng,
            );
            for &t in &r.samples.t {
                total += 1;
                if (a - 0.01..=b + 0.01).contains(&t) {
                    inside += 1;
                }
            }
        }
        assert!(
            inside as f64 >= 0.8 * total as f64,
            "only {inside}/{total} samples inside the concentrated region"
        );
    }

    #[test]
    fn deterministic_under_fixed_seed() {
        let run = || {
            let mut rng = rng_stream(9, &[7]);
            hierarchical_samples(
                &ray(),
                Some((0.0, 2.0)),
                &[16, 16, 8],
                &mut |_, a, b| ((b - a) * (1.0 + (a * 10.0).sin().abs()), 0.5 * (a + b)),
                &mut rng,
            )
            .samples
            .t
        };
        assert_eq!(run(), run());
    }
}
