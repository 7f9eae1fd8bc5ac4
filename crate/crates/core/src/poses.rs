//! Trajectories: smoothing, velocity estimation, validity filters and
//! synthetic loops.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{Quaternion, UnitQuaternion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Aabb, Mat3, Pose, Vec3};
use crate::renderer::RangeDopplerFrame;
use crate::renderer::RadarConfig;

/// Default sample period: one frame every 64 chirps of 1 ms.
pub const DEFAULT_PERIOD: f64 = 0.064;
pub const DEFAULT_SMOOTHING_SIGMA: f64 = 0.25;
pub const DEFAULT_MAX_ACCELERATION: f64 = 2.0;
pub const DEFAULT_SPIKE_NEIGHBORHOOD: usize = 15;

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub poses: Vec<Pose>,
    pub valid: Vec<bool>,
    /// Nominal sample period, seconds.
    pub period: f64,
}

impl Trajectory {
    /// All poses valid; timestamps must increase strictly.
    pub fn new(poses: Vec<Pose>, period: f64) -> Result<Self> {
        if poses.windows(2).any(|w| !(w[1].timestamp > w[0].timestamp)) {
            return Err(Error::invalid("trajectory timestamps must increase strictly"));
        }
        let valid = vec![true; poses.len()];
        Ok(Self { poses, valid, period })
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn speeds(&self) -> Vec<f64> {
        self.poses.iter().map(Pose::speed).collect()
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    pub fn bounds(&self) -> Option<Aabb> {
        let first = self.poses.first()?.position;
        let (mut lo, mut hi) = (first, first);
        for p in &self.poses {
            lo = lo.inf(&p.position);
            hi = hi.sup(&p.position);
        }
        Some(Aabb {
            min: [lo.x, lo.y, lo.z],
            max: [hi.x, hi.y, hi.z],
        })
    }

    /// Pose at time `t`: linear in position and velocity, slerp in
    /// orientation, clamped to the ends.
    pub fn interpolate(&self, t: f64) -> Option<Pose> {
        let first = self.poses.first()?;
        if t <= first.timestamp {
            return Some(Pose { timestamp: t, ..*first });
        }
        let last = self.poses.last()?;
        if t >= last.timestamp {
            return Some(Pose { timestamp: t, ..*last });
        }
        let i = self.poses.partition_point(|p| p.timestamp <= t) - 1;
        let (a, b) = (&self.poses[i], &self.poses[i + 1]);
        let s = (t - a.timestamp) / (b.timestamp - a.timestamp);
        Some(Pose::from_quaternion(
            a.position.lerp(&b.position, s),
            a.quaternion().slerp(&b.quaternion(), s),
            a.velocity.lerp(&b.velocity, s),
            t,
        ))
    }
}

/// Normalized Gaussian taps over `+-4 sigma`, `sigma` in samples.
fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if !(sigma > 1e-3) {
        return vec![1.0];
    }
    let half = (4.0 * sigma).ceil() as i64;
    let taps: Vec<f64> = (-half..=half).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / total).collect()
}

/// Smooths positions with a truncated Gaussian (edge replication) and
/// differentiates them by central differences. Orientations are kept as
/// given; use [`Trajectory::interpolate`] to resample.
pub fn smooth_and_differentiate(
    timestamps: &[f64],
    positions: &[Vec3],
    orientations: &[UnitQuaternion<f64>],
    sigma_seconds: f64,
) -> Result<Trajectory> {
    let n = timestamps.len();
    if n < 3 {
        return Err(Error::Empty(format!("smoothing needs at least 3 samples, got {n}")));
    }
    if positions.len() != n || orientations.len() != n {
        return Err(Error::DimensionMismatch {
            expected: format!("{n} positions and orientations"),
            actual: format!("{} and {}", positions.len(), orientations.len()),
        });
    }
    if timestamps.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::invalid("timestamps must increase strictly"));
    }
    let period = (timestamps[n - 1] - timestamps[0]) / (n - 1) as f64;
    let taps = gaussian_kernel(sigma_seconds / period);
    let half = (taps.len() / 2) as i64;
    let smoothed: Vec<Vec3> = (0..n as i64)
        .map(|i| {
            taps.iter()
                .enumerate()
                .map(|(t, w)| positions[(i + t as i64 - half).clamp(0, n as i64 - 1) as usize] * *w)
                .sum()
        })
        .collect();
    let poses = (0..n)
        .map(|i| {
            let (a, b) = (i.saturating_sub(1), (i + 1).min(n - 1));
            let v = (smoothed[b] - smoothed[a]) / (timestamps[b] - timestamps[a]);
            Pose::from_quaternion(smoothed[i], orientations[i], v, timestamps[i])
        })
        .collect();
    Trajectory::new(poses, period)
}

/// Marks poses with speed outside `[v_min, v_max]` invalid.
pub fn filter_speed_window(traj: &Trajectory, v_min: f64, v_max: f64) -> Trajectory {
    let mut out = traj.clone();
    for (p, v) in out.poses.iter().zip(out.valid.iter_mut()) {
        let s = p.speed();
        if !(s >= v_min && s <= v_max) {
            *v = false;
        }
    }
    out
}

/// `|d speed / dt|` by backward differences; the first sample uses the
/// forward difference.
pub fn speed_derivative(traj: &Trajectory) -> Vec<f64> {
    let n = traj.len();
    (0..n)
        .map(|i| {
            if n < 2 {
                return 0.0;
            }
            let (a, b) = if i == 0 { (0, 1) } else { (i - 1, i) };
            let (pa, pb) = (&traj.poses[a], &traj.poses[b]);
            ((pb.speed() - pa.speed()) / (pb.timestamp - pa.timestamp)).abs()
        })
        .collect()
}

/// Invalidates every sample whose speed changes faster than `a_max`,
/// together with `neighborhood` samples on either side.
pub fn filter_acceleration_spikes(traj: &Trajectory, a_max: f64, neighborhood: usize) -> Trajectory {
    let mut out = traj.clone();
    let n = traj.len();
    for (i, a) in speed_derivative(traj).into_iter().enumerate() {
        if a > a_max {
            let lo = i.saturating_sub(neighborhood);
            let hi = (i + neighborhood).min(n.saturating_sub(1));
            out.valid[lo..=hi].iter_mut().for_each(|v| *v = false);
        }
    }
    out
}

/// Largest observed Doppler speed per frame: the largest `|d_j|` whose
/// column energy exceeds `threshold` times the frame's strongest column.
pub fn estimate_speed_from_frames(frames: &[RangeDopplerFrame], config: &RadarConfig, threshold: f64) -> Vec<Option<f64>> {
    frames
        .iter()
        .map(|f| {
            let energy: Vec<f64> = (0..f.doppler_bins)
                .map(|j| f.column(j).iter().map(|v| v * v).sum::<f64>())
                .collect();
            let peak = energy.iter().cloned().fold(0.0, f64::max);
            if !(peak > 0.0) {
                return None;
            }
            energy
                .iter()
                .enumerate()
                .filter(|(_, e)| **e > threshold * peak)
                .map(|(j, _)| config.doppler_of(j).abs())
                .fold(None, |m: Option<f64>, d| Some(m.map_or(d, |m| m.max(d))))
        })
        .collect()
}

/// Parameters of a synthetic loop around the center of a scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySpec {
    pub bounds: Aabb,
    /// Horizontal radius of the loop.
    pub radius: f64,
    /// Height band `(low, high)` traversed by a slow vertical oscillation.
    pub height: (f64, f64),
    /// Vertical oscillation period, seconds.
    pub height_period: f64,
    /// Speed band; speed oscillates inside it.
    pub speed: (f64, f64),
    pub speed_period: f64,
    pub duration: f64,
    pub period: f64,
    /// Boresight yaw relative to the inward normal of the loop, degrees.
    pub yaw_offset_deg: f64,
    pub pitch_amplitude_deg: f64,
    pub pitch_period: f64,
}

impl TrajectorySpec {
    /// A loop inside `bounds`, looking at the center, 2,000 frames long.
    pub fn around(bounds: Aabb) -> Self {
        let e = bounds.extent();
        let c = bounds.center();
        let radius = 0.42 * e.x.min(e.y);
        Self {
            bounds,
            radius,
            height: (c.z - 0.25 * e.z, c.z + 0.25 * e.z),
            height_period: 37.0,
            speed: (0.3, 0.8),
            speed_period: 9.0,
            duration: 2000.0 * DEFAULT_PERIOD,
            period: DEFAULT_PERIOD,
            yaw_offset_deg: 0.0,
            pitch_amplitude_deg: 15.0,
            pitch_period: 11.0,
        }
    }

    pub fn frames(&self) -> usize {
        (self.duration / self.period).round() as usize
    }
}

/// World-from-sensor rotation with boresight at `(yaw, pitch)` and the
/// sensor `+z` kept as close to world up as possible.
pub fn look_rotation(yaw: f64, pitch: f64) -> Mat3 {
    let f = Vec3::new(yaw.cos() * pitch.cos(), yaw.sin() * pitch.cos(), pitch.sin());
    let left = Vec3::z().cross(&f).normalize();
    let up = f.cross(&left);
    Mat3::from_columns(&[f, left, up])
}

/// A circular loop with oscillating speed, height and pitch; the seed
/// picks the oscillation phases.
pub fn synth_trajectory(spec: &TrajectorySpec, seed: u64) -> Result<Trajectory> {
    let c = spec.bounds.center();
    let e = spec.bounds.extent();
    if !(spec.radius > 0.0) || spec.radius > 0.5 * e.x.min(e.y) {
        return Err(Error::invalid("loop radius must be positive and fit inside the bounds"));
    }
    if spec.height.0 < spec.bounds.min[2] || spec.height.1 > spec.bounds.max[2] || spec.height.0 > spec.height.1 {
        return Err(Error::invalid("height band must lie inside the bounds"));
    }
    if !(spec.speed.0 > 0.0) || spec.speed.0 > spec.speed.1 || !(spec.period > 0.0) || !(spec.duration > 0.0) {
        return Err(Error::invalid("speed band, period and duration must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tau = std::f64::consts::TAU;
    let (ph_speed, ph_height, ph_pitch, theta0) = (
        rng.gen::<f64>() * tau,
        rng.gen::<f64>() * tau,
        rng.gen::<f64>() * tau,
        rng.gen::<f64>() * tau,
    );
    let zc = 0.5 * (spec.height.0 + spec.height.1);
    let za = 0.5 * (spec.height.1 - spec.height.0);
    let wz = if za > 0.0 { tau / spec.height_period } else { 0.0 };
    let sm = 0.5 * (spec.speed.0 + spec.speed.1);
    let sa = 0.5 * (spec.speed.1 - spec.speed.0);
    let ws = tau / spec.speed_period;
    let wp = tau / spec.pitch_period;
    if za * wz >= 0.9 * spec.speed.0 {
        return Err(Error::invalid("vertical motion is too fast for the speed band"));
    }
    let speed = |t: f64| sm + sa * (ws * t + ph_speed).sin();
    let z = |t: f64| zc + za * (wz * t + ph_height).sin();
    let dz = |t: f64| za * wz * (wz * t + ph_height).cos();
    // Horizontal angular rate so the total speed follows `speed(t)`.
    let omega = |t: f64| {
        let s = speed(t);
        let v = dz(t);
        (s * s - v * v).max(0.0).sqrt() / spec.radius
    };
    let n = spec.frames();
    let sub = 16;
    let mut theta = theta0;
    let mut poses = Vec::with_capacity(n);
    for i in 0..n {
        let t = i as f64 * spec.period;
        if i > 0 {
            // Simpson substeps over the previous period.
            let h = spec.period / sub as f64;
            let t0 = t - spec.period;
            for s in 0..sub {
                let a = t0 + s as f64 * h;
                theta += h / 6.0 * (omega(a) + 4.0 * omega(a + 0.5 * h) + omega(a + h));
            }
        }
        let r = spec.radius;
        let w = omega(t);
        let position = Vec3::new(c.x + r * theta.cos(), c.y + r * theta.sin(), z(t));
        let velocity = Vec3::new(-r * w * theta.sin(), r * w * theta.cos(), dz(t));
        let inward = (theta + std::f64::consts::PI) + spec.yaw_offset_deg.to_radians();
        let pitch = spec.pitch_amplitude_deg.to_radians() * (wp * t + ph_pitch).sin();
        poses.push(Pose::new(position, look_rotation(inward, pitch), velocity, t)?);
    }
    Trajectory::new(poses, spec.period)
}

pub const TRAJECTORY_FORMAT: &str = "dopplerfield-trajectory";
pub const TRAJECTORY_VERSION: u32 = 1;
pub const TRAJECTORY_COLUMNS: [&str; 12] = ["t", "px", "py", "pz", "qw", "qx", "qy", "qz", "vx", "vy", "vz", "valid"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryHeader {
    pub format: String,
    pub version: u32,
    pub count: usize,
    pub period: f64,
    pub columns: Vec<String>,
    pub dtype: String,
    pub byte_order: String,
}

/// One JSON header line, then `count` rows of 12 little-endian `f32`.
pub fn write_trajectory(path: &Path, traj: &Trajectory) -> Result<()> {
    let header = TrajectoryHeader {
        format: TRAJECTORY_FORMAT.into(),
        version: TRAJECTORY_VERSION,
        count: traj.len(),
        period: traj.period,
        columns: TRAJECTORY_COLUMNS.iter().map(|s| s.to_string()).collect(),
        dtype: "f32".into(),
        byte_order: "little".into(),
    };
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n").map_err(io)?;
    for (p, v) in traj.poses.iter().zip(&traj.valid) {
        let q = p.quaternion();
        let row = [
            p.timestamp,
            p.position.x,
            p.position.y,
            p.position.z,
            q.w,
            q.i,
            q.j,
            q.k,
            p.velocity.x,
            p.velocity.y,
            p.velocity.z,
            if *v { 1.0 } else { 0.0 },
        ];
        for x in row {
            w.write_all(&(x as f32).to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

pub fn read_trajectory(path: &Path) -> Result<Trajectory> {
    let io = |e| Error::io(path, e);
    let mut r = BufReader::new(File::open(path).map_err(io)?);
    let mut line = String::new();
    r.read_line(&mut line).map_err(io)?;
    let header: TrajectoryHeader = serde_json::from_str(line.trim_end())?;
    if header.format != TRAJECTORY_FORMAT {
        return Err(Error::Format(format!("{} is not a trajectory file", path.display())));
    }
    if header.version != TRAJECTORY_VERSION {
        return Err(Error::SchemaVersion {
            found: header.version,
            supported: TRAJECTORY_VERSION,
        });
    }
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(io)?;
    let expected = header.count * TRAJECTORY_COLUMNS.len() * 4;
    if bytes.len() != expected {
        return Err(Error::Validation {
            path: path.to_path_buf(),
            message: format!("expected {expected} trajectory bytes, found {}", bytes.len()),
        });
    }
    let vals: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    let mut poses = Vec::with_capacity(header.count);
    let mut valid = Vec::with_capacity(header.count);
    for row in vals.chunks_exact(TRAJECTORY_COLUMNS.len()) {
        let q = UnitQuaternion::from_quaternion(Quaternion::new(row[4], row[5], row[6], row[7]));
        poses.push(Pose::from_quaternion(
            Vec3::new(row[1], row[2], row[3]),
            q,
            Vec3::new(row[8], row[9], row[10]),
            row[0],
        ));
        valid.push(row[11] != 0.0);
    }
    if poses.windows(2).any(|w| !(w[1].timestamp > w[0].timestamp)) {
        return Err(Error::Validation {
            path: path.to_path_buf(),
            message: "timestamps are not strictly increasing".into(),
        });
    }
    Ok(Trajectory {
        poses,
        valid,
        period: header.period,
    })
}
