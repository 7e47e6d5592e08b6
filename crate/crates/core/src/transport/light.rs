//! Pulsed point light sources with optional directional intensity profiles.

use crate::math::Vec3;
use crate::transient::{TimeBinning, TransientHistogram};

/// Tabulated directional intensity as a function of the cosine between the
/// emission direction and the profile axis. Linear interpolation over
/// uniformly spaced cos-theta entries in [-1, 1].
#[derive(Clone, Debug)]
pub struct DirectionalProfile {
    pub axis: Vec3,
    pub values: Vec<f64>,
}

impl DirectionalProfile {
    pub fn new(axis: Vec3, values: Vec<f64>) -> DirectionalProfile {
        assert!(values.len() >= 2);
        assert!(values.iter().all(|v| *v >= 0.0 && v.is_finite()));
        DirectionalProfile {
            axis: axis.normalized(),
            values,
        }
    }

    pub fn intensity(&self, dir: Vec3) -> f64 {
        let c = self.axis.dot(dir).clamp(-1.0, 1.0);
        let pos = (c + 1.0) * 0.5 * (self.values.len() - 1) as f64;
        let i = (pos.floor() as usize).min(self.values.len() - 2);
        let f = pos - i as f64;
        self.values[i] * (1.0 - f) + self.values[i + 1] * f
    }
}

/// A pulsed point light. The pulse profile is a histogram of emitted
/// radiance over emission path length; synthetic pulses are normalized to a
/// peak value of 1 so the cache's one-hot magnitude carries the radiometry.
#[derive(Clone, Debug)]
pub struct PulsedPointLight {
    pub position: Vec3,
    pub pulse: TransientHistogram,
    /// Exact emission path length of the pulse maximum.
    pub peak_path: f64,
    pub profile: Option<DirectionalProfile>,
    /// Overall emitted power multiplier.
    pub power: f64,
}

impl PulsedPointLight {
    /// All emission in bin 0.
    pub fn impulse(position: Vec3, binning: TimeBinning, power: f64) -> PulsedPointLight {
        let mut pulse = TransientHistogram::zeros(binning);
        pulse.values[0] = 1.0;
        PulsedPointLight {
            position,
            pulse,
            peak_path: 0.0,
            profile: None,
            power,
        }
    }

    /// Gaussian pulse with its peak at an integer bin.
    pub fn gaussian(
        position: Vec3,
        binning: TimeBinning,
        peak_bin: usize,
        sigma_bins: f64,
        power: f64,
    ) -> PulsedPointLight {
        assert!(peak_bin < binning.n_bins);
        let mut pulse = TransientHistogram::zeros(binning);
        for (b, v) in pulse.values.iter_mut().enumerate() {
            let z = (b as f64 - peak_bin as f64) / sigma_bins;
            let g = (-0.5 * z * z).exp();
            if g > 1e-12 {
                *v = g;
            }
        }
        PulsedPointLight {
            position,
            pulse,
            peak_path: peak_bin as f64 * binning.bin_width + binning.origin_offset,
            profile: None,
            power,
        }
    }

    pub fn with_profile(mut self, profile: DirectionalProfile) -> PulsedPointLight {
        self.profile = Some(profile);
        self
    }

    pub fn intensity_toward(&self, dir: Vec3) -> f64 {
        self.power
            * self
                .profile
                .as_ref()
                .map_or(1.0, |p| p.intensity(dir))
    }

    /// Pulse shape re-indexed around its peak bin, for convolving one-hot
    /// direct radiance into a full pulse at comparison time.
    pub fn centered_kernel(&self) -> (Vec<f64>, usize) {
        let peak_idx = self
            .pulse
            .values
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap_or(0);
        let last = self
            .pulse
            .values
            .iter()
            .rposition(|v| *v > 0.0)
            .unwrap_or(0);
        (self.pulse.values[..=last].to_vec(), peak_idx)
    }
}

/// Direction from the light to `x` and the incident transient histogram at
/// `x`: the pulse delayed by the travel distance and attenuated by the
/// inverse-square falloff and the directional profile. Shadowing is the
/// caller's contract.
pub fn direct_incident(
    light: &PulsedPointLight,
    x: Vec3,
    binning: TimeBinning,
) -> (Vec3, TransientHistogram) {
    let delta = x - light.position;
    let d = delta.norm();
    assert!(d > 1e-6, "query point coincides with the light source");
    let w_l = delta / d;
    let scale = light.intensity_toward(w_l) / (d * d);
    let mut hist = TransientHistogram::zeros(binning);
    if scale > 0.0 {
        let (shifted, _overflow) = light.pulse.shifted(d);
        hist = shifted.scaled(scale);
    }
    (w_l, hist)
}
