//! Real spherical harmonics, bands `l = 0..=4` (25 coefficients), with
//! orthonormal normalization over the unit sphere.

use crate::geometry::Vec3;

pub const SH_COEFFS: usize = 25;

/// `Y_00 = 1 / (2 sqrt(pi))`.
pub const SH_C0: f64 = 0.282_094_791_773_878_14;
const SH_C1: f64 = 0.488_602_511_902_919_9;
const SH_C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
const SH_C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];
const SH_C4: [f64; 9] = [
    2.503_342_941_796_704_6,
    -1.770_130_769_779_930_4,
    0.946_174_695_757_560_1,
    -0.669_046_543_557_289_2,
    0.105_785_546_915_204_31,
    -0.669_046_543_557_289_2,
    0.473_087_347_878_780_04,
    -1.770_130_769_779_930_4,
    0.625_835_735_449_176_1,
];

/// Evaluates all 25 basis functions at `direction` (normalized first).
pub fn sh_evaluate(direction: &Vec3) -> [f64; SH_COEFFS] {
    let n = direction.norm();
    let (x, y, z) = if n > 0.0 {
        (direction.x / n, direction.y / n, direction.z / n)
    } else {
        (0.0, 0.0, 1.0)
    };
    let (xx, yy, zz) = (x * x, y * y, z * z);
    let (xy, yz, xz) = (x * y, y * z, x * z);
    [
        SH_C0,
        -SH_C1 * y,
        SH_C1 * z,
        -SH_C1 * x,
        SH_C2[0] * xy,
        SH_C2[1] * yz,
        SH_C2[2] * (2.0 * zz - xx - yy),
        SH_C2[3] * xz,
        SH_C2[4] * (xx - yy),
        SH_C3[0] * y * (3.0 * xx - yy),
        SH_C3[1] * xy * z,
        SH_C3[2] * y * (4.0 * zz - xx - yy),
        SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy),
        SH_C3[4] * x * (4.0 * zz - xx - yy),
        SH_C3[5] * z * (xx - yy),
        SH_C3[6] * x * (xx - 3.0 * yy),
        SH_C4[0] * xy * (xx - yy),
        SH_C4[1] * yz * (3.0 * xx - yy),
        SH_C4[2] * xy * (7.0 * zz - 1.0),
        SH_C4[3] * yz * (7.0 * zz - 3.0),
        SH_C4[4] * (zz * (35.0 * zz - 30.0) + 3.0),
        SH_C4[5] * xz * (7.0 * zz - 3.0),
        SH_C4[6] * (xx - yy) * (7.0 * zz - 1.0),
        SH_C4[7] * xz * (xx - 3.0 * yy),
        SH_C4[8] * (xx * (xx - 3.0 * yy) - yy * (3.0 * xx - yy)),
    ]
}

/// Band index `l` of coefficient `i`.
pub fn band_of(i: usize) -> usize {
    (i as f64).sqrt() as usize
}

/// Unit DC-only coefficient vector.
pub fn dc_unit() -> [f64; SH_COEFFS] {
    let mut c = [0.0; SH_COEFFS];
    c[0] = 1.0;
    c
}

/// `<Y(w), c / |c|>`, falling back to the DC unit vector when `|c|` vanishes.
pub fn view_factor(y: &[f64; SH_COEFFS], c: &[f64]) -> f64 {
    let norm = c.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm < 1e-12 {
        return y[0];
    }
    y.iter().zip(c).map(|(a, b)| a * b).sum::<f64>() / norm
}

/// Projects a function on the sphere onto the 25-coefficient basis using the
/// product quadrature in [`crate::field::quadrature`].
pub fn project(f: impl Fn(&Vec3) -> f64) -> [f64; SH_COEFFS] {
    let mut c = [0.0; SH_COEFFS];
    for (w, weight) in crate::field::quadrature::product_rule(12, 24) {
        let fy = f(&w) * weight;
        let y = sh_evaluate(&w);
        for (ci, yi) in c.iter_mut().zip(y) {
            *ci += fy * yi;
        }
    }
    c
}
