//! Element gain and per-azimuth-bin array factor.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec3;

/// Amplitude gain of a single element as a function of direction in the
/// sensor frame (`+x` forward, `+y` left, `+z` up).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ElementGain {
    /// `cos(az)^p * cos(el)^q`.
    CosinePower { azimuth_exponent: f64, elevation_exponent: f64 },
    /// Bilinear lookup on an `(azimuth, elevation)` grid in degrees;
    /// `gain[a * elevation_deg.len() + e]`.
    Table {
        azimuth_deg: Vec<f64>,
        elevation_deg: Vec<f64>,
        gain: Vec<f64>,
    },
}

impl ElementGain {
    /// Cosine-power model whose amplitude falls to `1/sqrt(2)` (3 dB in
    /// power) at the given half widths.
    pub fn from_half_power_widths(azimuth_deg: f64, elevation_deg: f64) -> Self {
        let half = std::f64::consts::FRAC_1_SQRT_2.ln();
        ElementGain::CosinePower {
            azimuth_exponent: half / azimuth_deg.to_radians().cos().ln(),
            elevation_exponent: half / elevation_deg.to_radians().cos().ln(),
        }
    }

    pub fn gain(&self, local: &Vec3) -> f64 {
        if local.x <= 0.0 {
            return 0.0;
        }
        let az = local.y.atan2(local.x);
        let el = (local.z / local.norm()).clamp(-1.0, 1.0).asin();
        match self {
            ElementGain::CosinePower {
                azimuth_exponent,
                elevation_exponent,
            } => az.cos().max(0.0).powf(*azimuth_exponent) * el.cos().max(0.0).powf(*elevation_exponent),
            ElementGain::Table {
                azimuth_deg,
                elevation_deg,
                gain,
            } => {
                let (ia, ta) = bracket(azimuth_deg, az.to_degrees());
                let (ie, te) = bracket(elevation_deg, el.to_degrees());
                let ne = elevation_deg.len();
                let at = |a: usize, e: usize| gain[a * ne + e];
                let lo = at(ia, ie) * (1.0 - te) + at(ia, (ie + 1).min(ne - 1)) * te;
                let ha = (ia + 1).min(azimuth_deg.len() - 1);
                let hi = at(ha, ie) * (1.0 - te) + at(ha, (ie + 1).min(ne - 1)) * te;
                (lo * (1.0 - ta) + hi * ta).max(0.0)
            }
        }
    }
}

fn bracket(axis: &[f64], x: f64) -> (usize, f64) {
    if axis.len() == 1 || x <= axis[0] {
        return (0, 0.0);
    }
    let last = axis.len() - 1;
    if x >= axis[last] {
        return (last, 0.0);
    }
    let i = axis.partition_point(|v| *v <= x) - 1;
    (i, (x - axis[i]) / (axis[i + 1] - axis[i]))
}

/// Dirichlet kernel `sin(N pi x) / (N sin(pi x))`, 1 at integers' limit.
pub fn dirichlet(n: usize, x: f64) -> f64 {
    let s = (std::f64::consts::PI * x).sin();
    if s.abs() < 1e-12 {
        let k = x.round() as i64;
        return if (n as i64 - 1) * k % 2 == 0 { 1.0 } else { -1.0 };
    }
    (n as f64 * std::f64::consts::PI * x).sin() / (n as f64 * s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AntennaModel {
    pub element: ElementGain,
    /// Element positions along `+y` in half-wavelength units.
    pub positions: Vec<f64>,
}

impl Default for AntennaModel {
    fn default() -> Self {
        Self::uniform(8)
    }
}

impl AntennaModel {
    /// Half-wavelength uniform linear array with a 50 deg / 20 deg
    /// half-power element pattern.
    pub fn uniform(n: usize) -> Self {
        Self {
            element: ElementGain::from_half_power_widths(50.0, 20.0),
            positions: (0..n).map(|i| i as f64).collect(),
        }
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let model: Self = serde_json::from_str(&text)?;
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        if self.positions.is_empty() {
            return Err(Error::invalid("antenna model needs at least one element"));
        }
        if let ElementGain::Table {
            azimuth_deg,
            elevation_deg,
            gain,
        } = &self.element
        {
            if azimuth_deg.is_empty() || elevation_deg.is_empty() || gain.len() != azimuth_deg.len() * elevation_deg.len() {
                return Err(Error::invalid("gain table shape does not match its axes"));
            }
            if gain.iter().any(|g| !(*g >= 0.0)) {
                return Err(Error::invalid("gain table entries must be nonnegative"));
            }
        }
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.positions.len()
    }

    /// Spatial frequency `u = sin(az) / 2` of a sensor-frame direction.
    pub fn spatial_frequency(local: &Vec3) -> f64 {
        0.5 * local.y.atan2(local.x).sin()
    }

    /// Center of azimuth bin `k` after the centered FFT.
    pub fn bin_center(&self, k: usize) -> f64 {
        let n = self.count() as f64;
        (k as f64 - (self.count() / 2) as f64) / n
    }

    /// Array factor magnitude of bin `k` at spatial frequency `u`.
    pub fn array_factor(&self, k: usize, u: f64) -> f64 {
        let x = u - self.bin_center(k);
        let (mut re, mut im) = (0.0, 0.0);
        for p in &self.positions {
            let (s, c) = (2.0 * std::f64::consts::PI * p * x).sin_cos();
            re += c;
            im += s;
        }
        (re * re + im * im).sqrt() / self.count() as f64
    }

    /// Gain of azimuth bin `k` toward a sensor-frame direction.
    pub fn gain(&self, k: usize, local: &Vec3) -> f64 {
        let g = self.element.gain(local);
        if g == 0.0 {
            return 0.0;
        }
        g * self.array_factor(k, Self::spatial_frequency(local))
    }

    /// All bin gains toward `local`, written into `out`.
    pub fn gains_into(&self, local: &Vec3, out: &mut [f64]) {
        let g = self.element.gain(local);
        let u = Self::spatial_frequency(local);
        for (k, o) in out.iter_mut().enumerate() {
            *o = if g == 0.0 { 0.0 } else { g * self.array_factor(k, u) };
        }
    }
}

/// Element gain times the array factor of bin `k`, for a sensor-frame direction.
pub fn antenna_gain(model: &AntennaModel, k: usize, local: &Vec3) -> f64 {
    model.gain(k, local)
}
