//! Multiresolution spatial-hash feature encoder.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Aabb, Vec3};

/// Spatial hash primes, one per axis.
pub const HASH_PRIMES: [u32; 3] = [1, 2_654_435_761, 805_459_861];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HashEncoderConfig {
    pub levels: usize,
    pub features_per_level: usize,
    pub table_size: usize,
    /// Cell edge length of the coarsest level, meters.
    pub coarsest_resolution: f64,
    pub growth_factor: f64,
    pub bounds: Aabb,
}

impl Default for HashEncoderConfig {
    fn default() -> Self {
        Self {
            levels: 12,
            features_per_level: 2,
            table_size: 1 << 20,
            coarsest_resolution: 0.25,
            growth_factor: 2f64.powf(0.43),
            bounds: Aabb {
                min: [-5.4, -5.4, -5.4],
                max: [5.4, 5.4, 5.4],
            },
        }
    }
}

impl HashEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.features_per_level == 0 || self.table_size == 0 {
            return Err(Error::invalid("hash encoder counts must be positive"));
        }
        if !(self.growth_factor > 1.0) || !(self.coarsest_resolution > 0.0) {
            return Err(Error::invalid(
                "growth factor must exceed 1 and coarsest resolution must be positive",
            ));
        }
        Aabb::new(self.bounds.min, self.bounds.max)?;
        Ok(())
    }

    /// Cell edge length of the finest level.
    pub fn finest_resolution(&self) -> f64 {
        self.coarsest_resolution / self.growth_factor.powi(self.levels as i32 - 1)
    }

    pub fn output_dim(&self) -> usize {
        self.levels * self.features_per_level
    }
}

#[derive(Debug, Clone)]
struct Level {
    cell: f64,
    dims: [usize; 3],
    dense: bool,
    entries: usize,
    offset: usize,
}

/// Level layout over a flat parameter slice. Level `l` owns
/// `entries * features_per_level` consecutive values starting at its offset.
#[derive(Debug, Clone)]
pub struct HashEncoder {
    config: HashEncoderConfig,
    levels: Vec<Level>,
    num_params: usize,
}

/// Corner indices (already multiplied out to parameter offsets) and
/// trilinear weights of one level.
pub type Corners = ([usize; 8], [f64; 8]);

impl HashEncoder {
    pub fn new(config: HashEncoderConfig) -> Result<Self> {
        config.validate()?;
        let extent = config.bounds.extent();
        let mut levels = Vec::with_capacity(config.levels);
        let mut offset = 0;
        for l in 0..config.levels {
            let cell = config.coarsest_resolution / config.growth_factor.powi(l as i32);
            let dims = [0, 1, 2].map(|i| (extent[i] / cell).ceil() as usize + 1);
            let dense_size = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let dense = matches!(dense_size, Some(n) if n <= config.table_size);
            let entries = if dense {
                dense_size.unwrap_or(config.table_size)
            } else {
                config.table_size
            };
            levels.push(Level {
                cell,
                dims,
                dense,
                entries,
                offset,
            });
            offset += entries * config.features_per_level;
        }
        Ok(Self {
            config,
            levels,
            num_params: offset,
        })
    }

    pub fn config(&self) -> &HashEncoderConfig {
        &self.config
    }

    pub fn num_params(&self) -> usize {
        self.num_params
    }

    pub fn output_dim(&self) -> usize {
        self.config.output_dim()
    }

    /// Whether level `l` is stored densely (no collisions).
    pub fn is_dense(&self, l: usize) -> bool {
        self.levels[l].dense
    }

    fn slot(&self, level: &Level, c: [usize; 3]) -> usize {
        let idx = if level.dense {
            c[0] + level.dims[0] * (c[1] + level.dims[1] * c[2])
        } else {
            let h = (c[0] as u32).wrapping_mul(HASH_PRIMES[0])
                ^ (c[1] as u32).wrapping_mul(HASH_PRIMES[1])
                ^ (c[2] as u32).wrapping_mul(HASH_PRIMES[2]);
            h as usize % level.entries
        };
        level.offset + idx * self.config.features_per_level
    }

    /// Parameter offsets and trilinear weights of the 8 corners around `p` at
    /// level `l`. Positions outside the bounds are clamped.
    pub fn corners(&self, l: usize, p: &Vec3) -> Corners {
        let level = &self.levels[l];
        let b = &self.config.bounds;
        let mut base = [0usize; 3];
        let mut frac = [0.0; 3];
        for i in 0..3 {
            let u = ((p[i].clamp(b.min[i], b.max[i]) - b.min[i]) / level.cell).max(0.0);
            let i0 = (u.floor() as usize).min(level.dims[i] - 2);
            base[i] = i0;
            frac[i] = (u - i0 as f64).clamp(0.0, 1.0);
        }
        let mut idx = [0usize; 8];
        let mut w = [0.0; 8];
        for (n, (ix, wx)) in idx.iter_mut().zip(w.iter_mut()).enumerate() {
            let o = [n & 1, (n >> 1) & 1, (n >> 2) & 1];
            let mut weight = 1.0;
            for i in 0..3 {
                weight *= if o[i] == 1 { frac[i] } else { 1.0 - frac[i] };
            }
            *ix = self.slot(level, [base[0] + o[0], base[1] + o[1], base[2] + o[2]]);
            *wx = weight;
        }
        (idx, w)
    }

    /// Writes the concatenated per-level features of `p` into `out`.
    pub fn encode(&self, params: &[f64], p: &Vec3, out: &mut [f64]) {
        let f = self.config.features_per_level;
        debug_assert_eq!(out.len(), self.output_dim());
        for l in 0..self.levels.len() {
            let (idx, w) = self.corners(l, p);
            let dst = &mut out[l * f..(l + 1) * f];
            dst.fill(0.0);
            for n in 0..8 {
                let src = &params[idx[n]..idx[n] + f];
                for k in 0..f {
                    dst[k] += w[n] * src[k];
                }
            }
        }
    }

    /// Accumulates `d_features` (gradient of the encoding of `p`) into `grad`.
    pub fn backward(&self, p: &Vec3, d_features: &[f64], grad: &mut [f64]) {
        let f = self.config.features_per_level;
        for l in 0..self.levels.len() {
            let g = &d_features[l * f..(l + 1) * f];
            if g.iter().all(|v| *v == 0.0) {
                continue;
            }
            let (idx, w) = self.corners(l, p);
            for n in 0..8 {
                let dst = &mut grad[idx[n]..idx[n] + f];
                for k in 0..f {
                    dst[k] += w[n] * g[k];
                }
            }
        }
    }
}
