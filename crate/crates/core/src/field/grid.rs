//! Explicit trainable grid of `(sigma_bar, alpha_bar)` with trilinear
//! interpolation and no view dependence.

use serde::{Deserialize, Serialize};

use super::{head_backward, head_forward, AlphaActivation, AlphaGradRule, Field, FieldSample, HeadState, TrainableField};
use crate::error::{Error, Result};
use crate::geometry::{Aabb, Vec3};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridFieldConfig {
    pub bounds: Aabb,
    pub resolution: f64,
    pub activation: AlphaActivation,
}

#[derive(Debug, Clone)]
pub struct GridField {
    config: GridFieldConfig,
    dims: [usize; 3],
    params: Vec<f64>,
}

pub struct GridTape {
    corners: Vec<Option<([usize; 8], [f64; 8])>>,
    values: Vec<(f64, f64)>,
    heads: Vec<HeadState>,
}

impl GridField {
    /// An empty grid (`sigma_bar = alpha_bar = 0` at every vertex).
    pub fn new(config: GridFieldConfig) -> Result<Self> {
        if !(config.resolution > 0.0) {
            return Err(Error::invalid("grid resolution must be positive"));
        }
        let ext = config.bounds.extent();
        let dims = [0, 1, 2].map(|i| (ext[i] / config.resolution).ceil() as usize + 1);
        let n = dims.iter().product::<usize>();
        Ok(Self {
            config,
            dims,
            params: vec![0.0; 2 * n],
        })
    }

    pub fn config(&self) -> &GridFieldConfig {
        &self.config
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    fn corners(&self, p: &Vec3) -> Option<([usize; 8], [f64; 8])> {
        if !self.config.bounds.contains(p) {
            return None;
        }
        let mut base = [0usize; 3];
        let mut frac = [0.0; 3];
        for i in 0..3 {
            let u = (p[i] - self.config.bounds.min[i]) / self.config.resolution;
            let i0 = (u.floor().max(0.0) as usize).min(self.dims[i] - 2);
            base[i] = i0;
            frac[i] = (u - i0 as f64).clamp(0.0, 1.0);
        }
        let mut idx = [0usize; 8];
        let mut w = [0.0; 8];
        for n in 0..8 {
            let o = [n & 1, (n >> 1) & 1, (n >> 2) & 1];
            w[n] = (0..3).map(|i| if o[i] == 1 { frac[i] } else { 1.0 - frac[i] }).product();
            idx[n] = 2 * (base[0] + o[0] + self.dims[0] * (base[1] + o[1] + self.dims[1] * (base[2] + o[2])));
        }
        Some((idx, w))
    }

    fn values(&self, c: &Option<([usize; 8], [f64; 8])>) -> (f64, f64) {
        match c {
            None => (0.0, 0.0),
            Some((idx, w)) => idx.iter().zip(w).fold((0.0, 0.0), |(s, a), (i, w)| {
                (s + w * self.params[*i], a + w * self.params[i + 1])
            }),
        }
    }

    fn run(&self, positions: &[Vec3], directions: &[Vec3], clip: f64, out: &mut [FieldSample], tape: Option<&mut GridTape>) {
        let mut tape = tape;
        for ((p, d), o) in positions.iter().zip(directions).zip(out.iter_mut()) {
            let c = self.corners(p);
            let (sb, ab) = self.values(&c);
            let (s, st) = if c.is_none() {
                (
                    FieldSample::EMPTY,
                    HeadState {
                        sh: [0.0; super::sh::SH_COEFFS],
                        view: 0.0,
                        coeff_norm: 0.0,
                        pre_alpha: 0.0,
                        clipped: true,
                    },
                )
            } else {
                head_forward(sb, ab, None, d, self.config.activation, clip)
            };
            *o = s;
            if let Some(t) = tape.as_deref_mut() {
                t.corners.push(c);
                t.values.push((sb, ab));
                t.heads.push(st);
            }
        }
    }
}

impl Field for GridField {
    fn sample_batch(&self, positions: &[Vec3], directions: &[Vec3], clip: f64, out: &mut [FieldSample]) {
        self.run(positions, directions, clip, out, None);
    }
}

impl TrainableField for GridField {
    type Tape = GridTape;

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn forward_taped(&self, positions: &[Vec3], directions: &[Vec3], clip: f64, out: &mut [FieldSample]) -> GridTape {
        let mut tape = GridTape {
            corners: Vec::with_capacity(positions.len()),
            values: Vec::with_capacity(positions.len()),
            heads: Vec::with_capacity(positions.len()),
        };
        self.run(positions, directions, clip, out, Some(&mut tape));
        tape
    }

    fn backward(&self, tape: &GridTape, d_sigma: &[f64], d_log_alpha: &[f64], rule: AlphaGradRule, grad: &mut [f64]) {
        for i in 0..tape.corners.len() {
            let Some((idx, w)) = &tape.corners[i] else { continue };
            let (sb, ab) = tape.values[i];
            let (dsb, dab) = head_backward(
                &tape.heads[i],
                sb,
                ab,
                None,
                d_sigma[i],
                d_log_alpha[i],
                self.config.activation,
                rule,
                None,
            );
            for n in 0..8 {
                grad[idx[n]] += w[n] * dsb;
                grad[idx[n] + 1] += w[n] * dab;
            }
        }
    }
}
