//! Pose and integration-arc geometry.
//!
//! A range-Doppler bin `(r, d)` observed from a sensor moving with velocity
//! `v` corresponds to the intersection of the sphere `|w| = r`, the cone
//! `<w, v> = d |w|`, and the sensor's forward half-space. That intersection
//! is a circular arc, parameterized here by an orthonormal basis
//! `{p, q, v_hat}` and a half angle `psi` measured from `p`.

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Angle (radians) below which velocity is treated as parallel to the
/// forward axis.
pub const DEGENERATE_ANGLE: f64 = 1e-6;

/// Sensor forward axis in the sensor frame.
pub fn forward_axis() -> Vec3 {
    Vec3::x()
}

/// Radar pose: world-from-sensor rotation, world position and velocity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub position: Vec3,
    pub orientation: Rotation3<f64>,
    pub velocity: Vec3,
    pub timestamp: f64,
}

impl Pose {
    /// Builds a pose from a raw matrix, rejecting non-rotations.
    pub fn new(position: Vec3, orientation: Mat3, velocity: Vec3, timestamp: f64) -> Result<Self> {
        let err = (orientation.transpose() * orientation - Mat3::identity()).amax();
        if err >= 1e-6 || orientation.determinant() <= 0.0 {
            return Err(Error::invalid(format!(
                "orientation is not a proper rotation (orthogonality error {err:e})"
            )));
        }
        if !velocity.iter().all(|x| x.is_finite()) {
            return Err(Error::invalid("velocity must be finite"));
        }
        Ok(Self {
            position,
            orientation: Rotation3::from_matrix_unchecked(orientation),
            velocity,
            timestamp,
        })
    }

    pub fn from_quaternion(
        position: Vec3,
        orientation: UnitQuaternion<f64>,
        velocity: Vec3,
        timestamp: f64,
    ) -> Self {
        Self {
            position,
            orientation: orientation.to_rotation_matrix(),
            velocity,
            timestamp,
        }
    }

    pub fn speed(&self) -> f64 {
        self.velocity.norm()
    }

    /// Velocity expressed in the sensor frame.
    pub fn velocity_local(&self) -> Vec3 {
        self.orientation.inverse() * self.velocity
    }

    pub fn quaternion(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_rotation_matrix(&self.orientation)
    }
}

/// Orthonormal basis `{p, q, v_hat}` for a velocity vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArcBasis {
    pub p: Vec3,
    pub q: Vec3,
    pub v_hat: Vec3,
    /// Velocity parallel (or antiparallel) to the forward axis.
    pub degenerate: bool,
}

/// The integration arc for one `(r, d)` bin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArcSpec {
    /// Distance from the sensor to the arc's center along `v_hat`.
    pub center_distance: f64,
    /// Radius of the full Doppler ring.
    pub arc_radius: f64,
    /// Signed offset of the half-space boundary from the ring center along `+p`.
    pub chord_offset: f64,
    /// Arc covers `(-half_angle, half_angle)` about `+p`.
    pub half_angle: f64,
    pub empty: bool,
}

impl ArcSpec {
    fn empty() -> Self {
        Self {
            center_distance: 0.0,
            arc_radius: 0.0,
            chord_offset: 0.0,
            half_angle: 0.0,
            empty: true,
        }
    }
}

/// Builds `{p, q, v_hat}` with `p` the unit vector orthogonal to `v` that is
/// closest to `forward`, and `q = v_hat x p` (right-handed).
pub fn build_arc_basis(velocity: &Vec3, forward: &Vec3) -> Result<ArcBasis> {
    let speed = velocity.norm();
    if !(speed > 0.0) || !speed.is_finite() {
        return Err(Error::ZeroVelocity);
    }
    let v_hat = velocity / speed;
    let f = forward.normalize();
    let raw = f - v_hat * v_hat.dot(&f);
    let raw_norm = raw.norm();
    // |raw| = sin(angle between v and forward)
    if raw_norm < DEGENERATE_ANGLE.sin() {
        // Fixed completion. For forward = +x this is p = +y.
        let seed = if f.y.abs() < 0.9 { Vec3::y() } else { Vec3::z() };
        let p = (seed - v_hat * v_hat.dot(&seed)).normalize();
        let q = v_hat.cross(&p);
        return Ok(ArcBasis {
            p,
            q,
            v_hat,
            degenerate: true,
        });
    }
    let p = raw / raw_norm;
    let q = v_hat.cross(&p);
    Ok(ArcBasis {
        p,
        q,
        v_hat,
        degenerate: false,
    })
}

/// Arc geometry for range `r` and Doppler velocity `d`.
pub fn arc_for_bin(r: f64, d: f64, velocity: &Vec3, forward: &Vec3) -> Result<ArcSpec> {
    if !(r > 0.0) {
        return Err(Error::invalid(format!("range must be positive, got {r}")));
    }
    let basis = build_arc_basis(velocity, forward)?;
    Ok(arc_for_basis(r, d, velocity.norm(), &basis, forward))
}

/// Same as [`arc_for_bin`] with a precomputed basis.
pub fn arc_for_basis(r: f64, d: f64, speed: f64, basis: &ArcBasis, forward: &Vec3) -> ArcSpec {
    if d.abs() > speed {
        return ArcSpec::empty();
    }
    let ratio = d / speed;
    let center_distance = r * ratio;
    let arc_radius = r * (1.0 - ratio * ratio).max(0.0).sqrt();
    let cos_theta = basis.v_hat.dot(&forward.normalize());

    if basis.degenerate {
        // The ring lies entirely on one side of the forward plane.
        let side = d * cos_theta.signum();
        let half_angle = if side > 0.0 {
            std::f64::consts::PI
        } else if side < 0.0 {
            return ArcSpec::empty();
        } else {
            std::f64::consts::FRAC_PI_2
        };
        return ArcSpec {
            center_distance,
            arc_radius,
            chord_offset: 0.0,
            half_angle,
            empty: false,
        };
    }

    // The forward component of a ring point is
    //   gamma * cos_theta + r_tilde * cos(phi) * sin_theta,
    // so the arc is cos(phi) >= chord_offset / r_tilde.
    let sin_theta = (1.0 - cos_theta * cos_theta).max(0.0).sqrt();
    let chord_offset = -center_distance * cos_theta / sin_theta;
    let (half_angle, empty) = if arc_radius == 0.0 {
        // Ring collapsed to the point v_hat * gamma.
        if center_distance * cos_theta >= 0.0 {
            (std::f64::consts::PI, false)
        } else {
            (0.0, true)
        }
    } else if chord_offset > arc_radius {
        (0.0, true)
    } else if chord_offset < -arc_radius {
        (std::f64::consts::PI, false)
    } else {
        ((chord_offset / arc_radius).acos(), false)
    };
    if empty {
        return ArcSpec::empty();
    }
    ArcSpec {
        center_distance,
        arc_radius,
        chord_offset,
        half_angle,
        empty: false,
    }
}

/// How arc angles are drawn within `(-psi, psi)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RaySampling {
    /// One uniform jitter per equal-angle stratum.
    #[default]
    Stratified,
    /// Stratum midpoints; deterministic.
    Midpoint,
}

/// Stratified arc angles in `(-psi, psi)`.
pub fn arc_angles<R: Rng + ?Sized>(
    half_angle: f64,
    count: usize,
    sampling: RaySampling,
    rng: &mut R,
) -> Vec<f64> {
    let width = 2.0 * half_angle / count as f64;
    (0..count)
        .map(|m| {
            let u = match sampling {
                RaySampling::Stratified => rng.gen::<f64>(),
                RaySampling::Midpoint => 0.5,
            };
            -half_angle + (m as f64 + u) * width
        })
        .collect()
}

/// Unit directions on the arc of `(basis, spec)` for Doppler `d`.
pub fn arc_directions<R: Rng + ?Sized>(
    basis: &ArcBasis,
    spec: &ArcSpec,
    d: f64,
    speed: f64,
    count: usize,
    sampling: RaySampling,
    rng: &mut R,
) -> Vec<Vec3> {
    if spec.empty || count == 0 {
        return Vec::new();
    }
    let axial = d / speed;
    let radial = (1.0 - axial * axial).max(0.0).sqrt();
    arc_angles(spec.half_angle, count, sampling, rng)
        .into_iter()
        .map(|phi| {
            let (s, c) = phi.sin_cos();
            basis.v_hat * axial + (basis.p * c + basis.q * s) * radial
        })
        .collect()
}

/// Per-bin weight `r^2 / speed` applied to the arc sum.
pub fn bin_volume_correction(r: f64, speed: f64) -> f64 {
    debug_assert!(r > 0.0 && speed > 0.0);
    r * r / speed
}

/// Azimuth resolution obtained from Doppler: `dD * lambda / (2 v sin(theta))`.
///
/// `doppler_resolution` is the Doppler frequency resolution in Hz, i.e. the
/// reciprocal of the frame integration time.
pub fn doppler_angular_resolution(
    doppler_resolution: f64,
    wavelength: f64,
    speed: f64,
    theta: f64,
) -> Result<f64> {
    let s = theta.sin();
    if !(speed > 0.0) {
        return Err(Error::invalid("speed must be positive"));
    }
    if s.abs() < 1e-12 {
        return Err(Error::invalid("angular resolution undefined along the velocity axis"));
    }
    Ok(doppler_resolution * wavelength / (2.0 * speed * s))
}

/// Axis-aligned box in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Result<Self> {
        if (0..3).any(|i| !(max[i] > min[i])) {
            return Err(Error::invalid(format!("empty box {min:?}..{max:?}")));
        }
        Ok(Self { min, max })
    }

    pub fn min_v(&self) -> Vec3 {
        Vec3::from(self.min)
    }

    pub fn max_v(&self) -> Vec3 {
        Vec3::from(self.max)
    }

    pub fn extent(&self) -> Vec3 {
        self.max_v() - self.min_v()
    }

    pub fn center(&self) -> Vec3 {
        (self.max_v() + self.min_v()) * 0.5
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    pub fn clamp(&self, p: &Vec3) -> Vec3 {
        Vec3::new(
            p.x.clamp(self.min[0], self.max[0]),
            p.y.clamp(self.min[1], self.max[1]),
            p.z.clamp(self.min[2], self.max[2]),
        )
    }

    /// Grows the box by `margin` on every side.
    pub fn inflate(&self, margin: f64) -> Self {
        Self {
            min: self.min.map(|v| v - margin),
            max: self.max.map(|v| v + margin),
        }
    }

    /// Intersection with `other`, or `None` when disjoint.
    pub fn intersect(&self, other: &Aabb) -> Option<Self> {
        let min = [0, 1, 2].map(|i| self.min[i].max(other.min[i]));
        let max = [0, 1, 2].map(|i| self.max[i].min(other.max[i]));
        (0..3).all(|i| max[i] > min[i]).then_some(Self { min, max })
    }
}
