//! Time binning and transient histogram algebra.
//!
//! All delays are measured in optical path length (meters, with c == 1), so a
//! propagation distance of `d` shifts a histogram by `d` path-length units.

use crate::math::Vec3;
use rand::Rng;
use rand_distr::{Distribution, Poisson};

/// Discretization of optical path length into histogram bins.
#[derive(Copy, Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TimeBinning {
    /// Optical path length per bin, in meters.
    pub bin_width: f64,
    pub n_bins: usize,
    /// Path length of bin 0's left edge.
    pub origin_offset: f64,
}

impl TimeBinning {
    pub fn new(bin_width: f64, n_bins: usize) -> TimeBinning {
        TimeBinning {
            bin_width,
            n_bins,
            origin_offset: 0.0,
        }
    }

    pub fn validate(&self) -> bool {
        self.bin_width > 0.0 && self.n_bins >= 1 && self.origin_offset.is_finite()
    }

    /// Fractional bin index of a path length. Out-of-range indices are
    /// returned as-is; clipping is the caller's contract.
    pub fn bin_of_path_length(&self, d: f64) -> f64 {
        debug_assert!(self.validate());
        (d - self.origin_offset) / self.bin_width
    }

    /// Path length at the center of bin `i`.
    pub fn bin_center(&self, i: usize) -> f64 {
        self.origin_offset + (i as f64 + 0.5) * self.bin_width
    }

    /// Total path length spanned by the histogram window.
    pub fn span(&self) -> f64 {
        self.n_bins as f64 * self.bin_width
    }
}

/// Radiance per optical-path-length bin. The universal currency of the
/// system: measurements, cache outputs, and renders are all histograms.
#[derive(Clone, Debug, PartialEq)]
pub struct TransientHistogram {
    pub values: Vec<f64>,
    pub binning: TimeBinning,
}

impl TransientHistogram {
    pub fn zeros(binning: TimeBinning) -> TransientHistogram {
        TransientHistogram {
            values: vec![0.0; binning.n_bins],
            binning,
        }
    }

    pub fn from_values(values: Vec<f64>, binning: TimeBinning) -> TransientHistogram {
        assert_eq!(values.len(), binning.n_bins, "histogram length mismatch");
        TransientHistogram { values, binning }
    }

    /// A unit impulse splatted at fractional bin position `bin` with total
    /// mass `mass` (two-bin linear splat; mass outside the window is dropped).
    pub fn impulse(binning: TimeBinning, bin: f64, mass: f64) -> TransientHistogram {
        let mut h = TransientHistogram::zeros(binning);
        splat(&mut h.values, bin, mass);
        h
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn total_mass(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn peak(&self) -> f64 {
        self.values.iter().cloned().fold(0.0f64, f64::max)
    }

    /// Energy-preserving shift by `delay` path-length units toward later
    /// bins, with linear splatting of fractional parts. Mass shifted past the
    /// last bin is dropped; the dropped mass is returned as the overflow
    /// counter.
    pub fn shifted(&self, delay: f64) -> (TransientHistogram, f64) {
        debug_assert!(delay >= 0.0, "shift delay must be nonnegative");
        let db = delay / self.binning.bin_width;
        let whole = db.floor();
        let frac = db - whole;
        let whole = whole as i64;
        let n = self.binning.n_bins as i64;
        let mut out = vec![0.0; self.binning.n_bins];
        let mut overflow = 0.0;
        for (i, &v) in self.values.iter().enumerate() {
            if v == 0.0 {
                continue;
            }
            let j = i as i64 + whole;
            if j < n {
                out[j as usize] += v * (1.0 - frac);
            } else {
                overflow += v * (1.0 - frac);
            }
            if frac > 0.0 {
                if j + 1 < n {
                    out[(j + 1) as usize] += v * frac;
                } else {
                    overflow += v * frac;
                }
            }
        }
        (
            TransientHistogram {
                values: out,
                binning: self.binning,
            },
            overflow,
        )
    }

    /// Bin-width-weighted sum over bins: the steady-state intensity the
    /// sensor would report when integrating over time.
    pub fn integral(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.binning.bin_width
    }

    /// Per-bin independent Poisson draws with mean `scale * value`,
    /// emulating a photon-counting sensor. Output values are integer counts.
    pub fn poisson_sample<R: Rng>(
        &self,
        scale: f64,
        rng: &mut R,
    ) -> Result<TransientHistogram, NegativeRadiance> {
        assert!(scale > 0.0, "poisson scale must be positive");
        let mut out = vec![0.0; self.binning.n_bins];
        for (i, &v) in self.values.iter().enumerate() {
            if v < 0.0 {
                return Err(NegativeRadiance { bin: i, value: v });
            }
            let mean = scale * v;
            if mean > 0.0 {
                let d = Poisson::new(mean).expect("valid poisson mean");
                out[i] = d.sample(rng);
            }
        }
        Ok(TransientHistogram {
            values: out,
            binning: self.binning,
        })
    }

    pub fn scaled(&self, s: f64) -> TransientHistogram {
        TransientHistogram {
            values: self.values.iter().map(|v| v * s).collect(),
            binning: self.binning,
        }
    }

    pub fn add_assign(&mut self, other: &TransientHistogram) {
        debug_assert_eq!(self.binning, other.binning);
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
    }
}

#[derive(Debug, thiserror::Error)]
#[error("negative radiance {value} in bin {bin}; poisson sampling needs nonnegative input")]
pub struct NegativeRadiance {
    pub bin: usize,
    pub value: f64,
}

/// Two-bin linear splat of `mass` at fractional bin position `pos` into a
/// value slice. Out-of-range mass is dropped and returned.
pub fn splat(values: &mut [f64], pos: f64, mass: f64) -> f64 {
    let lo = pos.floor();
    let frac = pos - lo;
    let lo = lo as i64;
    let n = values.len() as i64;
    let mut overflow = 0.0;
    if lo >= 0 && lo < n {
        values[lo as usize] += mass * (1.0 - frac);
    } else {
        overflow += mass * (1.0 - frac);
    }
    if frac > 0.0 {
        if lo + 1 >= 0 && lo + 1 < n {
            values[(lo + 1) as usize] += mass * frac;
        } else {
            overflow += mass * frac;
        }
    }
    overflow
}

/// A sensor ray. `direction` is unit length and points from the sensor into
/// the scene; the outgoing direction at a surface point is `-direction`.
#[derive(Copy, Clone, Debug)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
}

impl Ray {
    pub fn new(origin: Vec3, direction: Vec3) -> Ray {
        let r = Ray {
            origin,
            direction: direction.normalized(),
        };
        debug_assert!((r.direction.norm() - 1.0).abs() < 1e-9);
        r
    }

    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }
}
