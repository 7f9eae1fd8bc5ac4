//! Range-Doppler rendering of a field from a moving radar.
//!
//! Rendering is organized per Doppler column: for Doppler bin `j` the arc
//! of directions `w` with `<w, v> = d_j` is the same at every range, so `M`
//! rays are drawn once, each ray is marched through all range bins, and
//! every antenna bin reuses those samples with its own gain. The value at
//! `(range i, antenna k)` is
//!
//! ```text
//! Y = 2 psi / (M |v|) * sum_m g_k(w_m) * sigma(x + r_i w_m) * prod_{i' < i} alpha(x + r_i' w_m)
//! ```
//!
//! which is the arc integral of the return with the `r^2` range spreading
//! and the `r^2 / |v|` bin-volume factor cancelled.

pub mod antenna;

use std::sync::atomic::{AtomicU64, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use antenna::{antenna_gain, AntennaModel, ElementGain};

use crate::error::{Error, Result};
use crate::field::{AlphaGradRule, Field, FieldSample, TrainableField};
use crate::geometry::{arc_directions, arc_for_basis, build_arc_basis, forward_axis, Pose, RaySampling, Vec3};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RadarConfig {
    pub range_bins: usize,
    /// Range bin width, meters.
    pub range_resolution: f64,
    pub doppler_bins: usize,
    /// Doppler bin width, m/s.
    pub doppler_resolution: f64,
    pub antennas: usize,
    /// Carrier wavelength, meters.
    pub wavelength: f64,
    pub rays_per_column: usize,
    #[serde(default)]
    pub ray_sampling: RaySampling,
    /// Speeds outside `[min, max]` mark a frame invalid.
    pub speed_window: (f64, f64),
}

impl Default for RadarConfig {
    fn default() -> Self {
        Self {
            range_bins: 128,
            range_resolution: 0.042,
            doppler_bins: 256,
            doppler_resolution: 0.95 / 128.0,
            antennas: 8,
            wavelength: 0.004,
            rays_per_column: 128,
            ray_sampling: RaySampling::Stratified,
            speed_window: (0.2, 0.95),
        }
    }
}

impl RadarConfig {
    pub fn validate(&self) -> Result<()> {
        if self.range_bins == 0 || self.doppler_bins == 0 || self.antennas == 0 || self.rays_per_column == 0 {
            return Err(Error::invalid("radar bin and ray counts must be positive"));
        }
        if !(self.range_resolution > 0.0) || !(self.doppler_resolution > 0.0) || !(self.wavelength > 0.0) {
            return Err(Error::invalid("radar resolutions and wavelength must be positive"));
        }
        Ok(())
    }

    pub fn max_range(&self) -> f64 {
        self.range_bins as f64 * self.range_resolution
    }

    /// Largest Doppler magnitude on the axis.
    pub fn max_doppler(&self) -> f64 {
        (self.doppler_bins / 2) as f64 * self.doppler_resolution
    }

    /// Range sampled for bin `i`.
    pub fn range_of(&self, i: usize) -> f64 {
        i as f64 * self.range_resolution
    }

    /// Doppler velocity of bin `j`; zero sits at `doppler_bins / 2`.
    pub fn doppler_of(&self, j: usize) -> f64 {
        (j as f64 - (self.doppler_bins / 2) as f64) * self.doppler_resolution
    }

    pub fn column_observable(&self, j: usize, speed: f64) -> bool {
        self.doppler_of(j).abs() < speed
    }

    pub fn speed_valid(&self, speed: f64) -> bool {
        speed >= self.speed_window.0 && speed <= self.speed_window.1
    }

    /// Values per frame.
    pub fn frame_len(&self) -> usize {
        self.antennas * self.range_bins * self.doppler_bins
    }
}

/// One multi-antenna range-Doppler magnitude image.
///
/// `values[(k * range_bins + i) * doppler_bins + j]` for antenna bin `k`,
/// range bin `i`, Doppler bin `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct RangeDopplerFrame {
    pub antennas: usize,
    pub range_bins: usize,
    pub doppler_bins: usize,
    pub values: Vec<f32>,
    pub pose: Pose,
    pub valid: bool,
}

impl RangeDopplerFrame {
    pub fn zeros(config: &RadarConfig, pose: Pose) -> Self {
        Self {
            antennas: config.antennas,
            range_bins: config.range_bins,
            doppler_bins: config.doppler_bins,
            values: vec![0.0; config.frame_len()],
            pose,
            valid: config.speed_valid(pose.speed()),
        }
    }

    pub fn index(&self, k: usize, i: usize, j: usize) -> usize {
        (k * self.range_bins + i) * self.doppler_bins + j
    }

    pub fn get(&self, k: usize, i: usize, j: usize) -> f32 {
        self.values[self.index(k, i, j)]
    }

    /// Column `j` in `[range x antenna]` layout.
    pub fn column(&self, j: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.range_bins * self.antennas);
        for i in 0..self.range_bins {
            for k in 0..self.antennas {
                out.push(self.get(k, i, j) as f64);
            }
        }
        out
    }

    pub fn set_column(&mut self, j: usize, column: &[f64]) {
        for i in 0..self.range_bins {
            for k in 0..self.antennas {
                let idx = self.index(k, i, j);
                self.values[idx] = column[i * self.antennas + k] as f32;
            }
        }
    }

    /// Antenna-summed `[range x doppler]` image.
    pub fn antenna_sum(&self) -> Vec<f64> {
        let n = self.range_bins * self.doppler_bins;
        let mut out = vec![0.0; n];
        for k in 0..self.antennas {
            for (o, v) in out.iter_mut().zip(&self.values[k * n..(k + 1) * n]) {
                *o += *v as f64;
            }
        }
        out
    }
}

/// Rays and gains for one Doppler column of one pose.
#[derive(Debug, Clone)]
pub struct ColumnGeometry {
    pub doppler_bin: usize,
    pub observable: bool,
    /// World-frame ray directions.
    pub directions: Vec<Vec3>,
    /// `gains[m * antennas + k]`.
    pub gains: Vec<f64>,
    /// `2 psi / (M |v|)`.
    pub weight: f64,
    pub origin: Vec3,
    pub range_bins: usize,
    pub range_resolution: f64,
    pub antennas: usize,
}

impl ColumnGeometry {
    pub fn rays(&self) -> usize {
        self.directions.len()
    }

    /// Sample positions and directions, ray-major.
    pub fn samples(&self) -> (Vec<Vec3>, Vec<Vec3>) {
        let n = self.rays() * self.range_bins;
        let mut ps = Vec::with_capacity(n);
        let mut ds = Vec::with_capacity(n);
        for w in &self.directions {
            for i in 0..self.range_bins {
                ps.push(self.origin + w * (i as f64 * self.range_resolution));
                ds.push(*w);
            }
        }
        (ps, ds)
    }
}

/// Deterministic seed for column `j` of a frame rendered with `seed`.
pub fn column_seed(seed: u64, j: usize) -> u64 {
    let mut z = seed ^ (j as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Draws the rays of column `j` for `pose`.
pub fn column_geometry(
    pose: &Pose,
    config: &RadarConfig,
    antenna: &AntennaModel,
    j: usize,
    rays: usize,
    seed: u64,
) -> ColumnGeometry {
    let speed = pose.speed();
    let d = config.doppler_of(j);
    let mut geom = ColumnGeometry {
        doppler_bin: j,
        observable: false,
        directions: Vec::new(),
        gains: Vec::new(),
        weight: 0.0,
        origin: pose.position,
        range_bins: config.range_bins,
        range_resolution: config.range_resolution,
        antennas: antenna.count(),
    };
    if !(speed > 0.0) || !config.column_observable(j, speed) {
        return geom;
    }
    geom.observable = true;
    let v_local = pose.velocity_local();
    let fwd = forward_axis();
    let Ok(basis) = build_arc_basis(&v_local, &fwd) else {
        return geom;
    };
    // The arc's angular extent does not depend on range.
    let spec = arc_for_basis(1.0, d, speed, &basis, &fwd);
    if spec.empty || spec.half_angle <= 0.0 {
        return geom;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let local = arc_directions(&basis, &spec, d, speed, rays, config.ray_sampling, &mut rng);
    let k = antenna.count();
    geom.gains = vec![0.0; local.len() * k];
    for (w, g) in local.iter().zip(geom.gains.chunks_exact_mut(k)) {
        antenna.gains_into(w, g);
    }
    geom.directions = local.iter().map(|w| pose.orientation * w).collect();
    geom.weight = 2.0 * spec.half_angle / (rays as f64 * speed);
    geom
}

fn accumulate(geom: &ColumnGeometry, samples: &[FieldSample], transmittance: &mut [f64], out: &mut [f64]) {
    let (r, k) = (geom.range_bins, geom.antennas);
    for m in 0..geom.rays() {
        let ray = &samples[m * r..(m + 1) * r];
        let gains = &geom.gains[m * k..(m + 1) * k];
        let mut log_t: f64 = 0.0;
        for i in 0..r {
            let t = log_t.exp();
            transmittance[m * r + i] = t;
            let c = ray[i].sigma * t * geom.weight;
            if c != 0.0 {
                for (o, g) in out[i * k..(i + 1) * k].iter_mut().zip(gains) {
                    *o += g * c;
                }
            }
            log_t += ray[i].log_alpha;
        }
    }
}

/// Renders one column, `[range x antenna]`.
pub fn render_column<F: Field + ?Sized>(field: &F, geom: &ColumnGeometry, clip: f64) -> Vec<f64> {
    let mut out = vec![0.0; geom.range_bins * geom.antennas];
    if geom.rays() == 0 {
        return out;
    }
    let (ps, ds) = geom.samples();
    let mut samples = vec![FieldSample::EMPTY; ps.len()];
    field.sample_batch(&ps, &ds, clip, &mut samples);
    let mut t = vec![0.0; ps.len()];
    accumulate(geom, &samples, &mut t, &mut out);
    out
}

/// Samples `field` for column `j` of `pose`: `[range x antenna]`.
pub fn trace_column<F: Field + ?Sized>(
    field: &F,
    pose: &Pose,
    config: &RadarConfig,
    antenna: &AntennaModel,
    j: usize,
    clip: f64,
    seed: u64,
) -> Vec<f64> {
    let geom = column_geometry(pose, config, antenna, j, config.rays_per_column, seed);
    render_column(field, &geom, clip)
}

/// Forward state of a taped column render.
pub struct ColumnTape<T> {
    samples: Vec<FieldSample>,
    transmittance: Vec<f64>,
    field: Option<T>,
}

pub fn render_column_taped<F: TrainableField + ?Sized>(
    field: &F,
    geom: &ColumnGeometry,
    clip: f64,
) -> (Vec<f64>, ColumnTape<F::Tape>) {
    let mut out = vec![0.0; geom.range_bins * geom.antennas];
    if geom.rays() == 0 {
        return (
            out,
            ColumnTape {
                samples: Vec::new(),
                transmittance: Vec::new(),
                field: None,
            },
        );
    }
    let (ps, ds) = geom.samples();
    let mut samples = vec![FieldSample::EMPTY; ps.len()];
    let tape = field.forward_taped(&ps, &ds, clip, &mut samples);
    let mut t = vec![0.0; ps.len()];
    accumulate(geom, &samples, &mut t, &mut out);
    (
        out,
        ColumnTape {
            samples,
            transmittance: t,
            field: Some(tape),
        },
    )
}

/// Accumulates into `grad` the parameter gradient of `<d_out, column>`.
pub fn render_column_backward<F: TrainableField + ?Sized>(
    field: &F,
    geom: &ColumnGeometry,
    tape: &ColumnTape<F::Tape>,
    d_out: &[f64],
    rule: AlphaGradRule,
    grad: &mut [f64],
) {
    let Some(ftape) = &tape.field else { return };
    let (r, k) = (geom.range_bins, geom.antennas);
    let n = tape.samples.len();
    let mut d_sigma = vec![0.0; n];
    let mut d_log_alpha = vec![0.0; n];
    for m in 0..geom.rays() {
        let gains = &geom.gains[m * k..(m + 1) * k];
        let mut acc = 0.0;
        for i in (0..r).rev() {
            let s = m * r + i;
            let dc: f64 = d_out[i * k..(i + 1) * k].iter().zip(gains).map(|(d, g)| d * g).sum::<f64>() * geom.weight;
            let t = tape.transmittance[s];
            d_sigma[s] = dc * t;
            d_log_alpha[s] = acc;
            acc += dc * tape.samples[s].sigma * t;
        }
    }
    field.backward(ftape, &d_sigma, &d_log_alpha, rule, grad);
}

/// Renders every Doppler column of `pose`. Columns whose Doppler magnitude
/// reaches the speed are left at zero.
pub fn render_frame<F: Field + ?Sized>(
    field: &F,
    pose: &Pose,
    config: &RadarConfig,
    antenna: &AntennaModel,
    clip: f64,
    seed: u64,
) -> RangeDopplerFrame {
    let columns: Vec<Vec<f64>> = (0..config.doppler_bins)
        .into_par_iter()
        .map(|j| trace_column(field, pose, config, antenna, j, clip, column_seed(seed, j)))
        .collect();
    let mut frame = RangeDopplerFrame::zeros(config, *pose);
    for (j, c) in columns.iter().enumerate() {
        frame.set_column(j, c);
    }
    frame
}

/// Field wrapper counting every sample requested through it.
pub struct CountingField<'a, F: ?Sized> {
    pub inner: &'a F,
    count: AtomicU64,
}

impl<'a, F: Field + ?Sized> CountingField<'a, F> {
    pub fn new(inner: &'a F) -> Self {
        Self {
            inner,
            count: AtomicU64::new(0),
        }
    }

    pub fn count(&self) -> u64 {
        self.count.load(Ordering::Relaxed)
    }
}

impl<F: Field + ?Sized> Field for CountingField<'_, F> {
    fn sample_batch(&self, positions: &[Vec3], directions: &[Vec3], clip: f64, out: &mut [FieldSample]) {
        self.count.fetch_add(positions.len() as u64, Ordering::Relaxed);
        self.inner.sample_batch(positions, directions, clip, out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Mat3;
    use approx::assert_relative_eq;

    /// Isotropic field defined by a closure.
    struct Closure<F: Fn(&Vec3) -> (f64, f64) + Sync>(F);

    impl<F: Fn(&Vec3) -> (f64, f64) + Sync> Field for Closure<F> {
        fn sample_batch(&self, ps: &[Vec3], _: &[Vec3], _: f64, out: &mut [FieldSample]) {
            for (p, o) in ps.iter().zip(out) {
                let (s, a) = (self.0)(p);
                *o = FieldSample::from_log_alpha(s, a.ln());
            }
        }
    }

    fn small_config() -> RadarConfig {
        RadarConfig {
            range_bins: 32,
            range_resolution: 0.1,
            doppler_bins: 64,
            doppler_resolution: 0.95 / 32.0,
            antennas: 8,
            rays_per_column: 32,
            ..Default::default()
        }
    }

    fn pose(v: Vec3) -> Pose {
        Pose::new(Vec3::zeros(), Mat3::identity(), v, 0.0).unwrap()
    }

    #[test]
    fn empty_field_renders_zero() {
        let cfg = small_config();
        let f = Closure(|_| (0.0, 1.0));
        let frame = render_frame(&f, &pose(Vec3::new(0.0, 0.5, 0.0)), &cfg, &AntennaModel::default(), -1.0, 1);
        assert!(frame.values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn doppler_axis_mirrors_under_velocity_reversal() {
        let mut cfg = small_config();
        cfg.ray_sampling = RaySampling::Midpoint;
        let f = Closure(|p| {
            let s = (-((p - Vec3::new(1.5, 0.4, 0.1)).norm_squared()) / 0.1).exp();
            (s, 1.0 - 0.5 * s)
        });
        let v = Vec3::new(0.2, 0.5, 0.1);
        let a = render_frame(&f, &pose(v), &cfg, &AntennaModel::default(), -1.0, 3);
        let b = render_frame(&f, &pose(-v), &cfg, &AntennaModel::default(), -1.0, 3);
        let mut peak: f32 = 0.0;
        for k in 0..8 {
            for i in 0..32 {
                for j in 1..64 {
                    let x = a.get(k, i, j);
                    let y = b.get(k, i, 64 - j);
                    peak = peak.max(x);
                    assert!((x - y).abs() <= 1e-5 * x.abs().max(1e-3), "({k},{i},{j}) {x} vs {y}");
                }
            }
        }
        assert!(peak > 0.0);
    }

    #[test]
    fn linear_in_sigma() {
        let cfg = small_config();
        let f1 = Closure(|p| (p.x.max(0.0), 0.9));
        let f2 = Closure(|p| (2.0 * p.x.max(0.0), 0.9));
        let p = pose(Vec3::new(0.1, 0.5, 0.0));
        let a = render_frame(&f1, &p, &cfg, &AntennaModel::default(), -1.0, 5);
        let b = render_frame(&f2, &p, &cfg, &AntennaModel::default(), -1.0, 5);
        for (x, y) in a.values.iter().zip(&b.values) {
            assert_relative_eq!(2.0 * x, *y, max_relative = 1e-6);
        }
    }

    #[test]
    fn opaque_plane_hides_what_lies_behind() {
        let cfg = small_config();
        let f = Closure(|p| {
            if (p.x - 1.0).abs() < 0.05 {
                (1.0, 0.0)
            } else if (p.x - 2.0).abs() < 0.05 {
                (1.0, 1.0)
            } else {
                (0.0, 1.0)
            }
        });
        let frame = render_frame(&f, &pose(Vec3::new(0.0, 0.5, 0.0)), &cfg, &AntennaModel::default(), -1.0, 2);
        // Along the boresight ray the wall at x = 2 is at range 2 -> bin 20.
        let j0 = 32;
        let total_behind: f32 = (0..8).map(|k| frame.get(k, 20, j0)).sum();
        assert_eq!(total_behind, 0.0);
        let total_front: f32 = (0..8).map(|k| frame.get(k, 10, j0)).sum();
        assert!(total_front > 0.0);
    }

    #[test]
    fn unobservable_columns_are_zero() {
        let cfg = small_config();
        let f = Closure(|_| (1.0, 1.0));
        let frame = render_frame(&f, &pose(Vec3::new(0.0, 0.3, 0.0)), &cfg, &AntennaModel::default(), -1.0, 2);
        for j in 0..64 {
            let s: f32 = (0..32).map(|i| frame.get(3, i, j)).sum();
            if cfg.doppler_of(j).abs() >= 0.3 {
                assert_eq!(s, 0.0);
            } else {
                assert!(s > 0.0, "column {j}");
            }
        }
    }

    #[test]
    fn sample_count_matches_budget() {
        let cfg = small_config();
        let f = Closure(|_| (0.0, 1.0));
        let counter = CountingField::new(&f);
        let p = pose(Vec3::new(0.0, 0.96, 0.0));
        render_frame(&counter, &p, &cfg, &AntennaModel::default(), -1.0, 0);
        assert_eq!(counter.count(), (64 * 32 * 32) as u64);
    }

    #[test]
    fn variance_shrinks_with_ray_count() {
        let f = Closure(|p| ((-((p - Vec3::new(1.2, 0.6, 0.2)).norm_squared()) / 0.05).exp(), 1.0));
        let p = pose(Vec3::new(0.1, 0.5, 0.05));
        let antenna = AntennaModel::default();
        let var = |m: usize| {
            let mut cfg = small_config();
            cfg.rays_per_column = m;
            let vals: Vec<f64> = (0..200)
                .map(|s| trace_column(&f, &p, &cfg, &antenna, 40, -1.0, s).iter().sum())
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (vals.len() - 1) as f64
        };
        let (v4, v16) = (var(4), var(16));
        // Stratification can only beat the 1/M rate.
        assert!(v16 < v4 / 4.0 * 1.5, "v4 {v4} v16 {v16}");
    }
}
