//! Spherical quadrature rules.

use std::f64::consts::PI;

use crate::geometry::Vec3;

/// Gauss-Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        // Chebyshev initial guess, refined by Newton on P_n.
        let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let pn = if n == 0 { 1.0 } else if n == 1 { x } else { p1 };
            let pn1 = if n == 1 { 1.0 } else { p0 };
            dp = n as f64 * (x * pn - pn1) / (x * x - 1.0);
            let dx = pn / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        out.push((x, 2.0 / ((1.0 - x * x) * dp * dp)));
    }
    out
}

/// Product rule: Gauss-Legendre in `cos(theta)` times uniform azimuth.
/// Weights sum to `4 pi`; exact for polynomials of degree
/// `< min(2 * n_theta, n_phi)`.
pub fn product_rule(n_theta: usize, n_phi: usize) -> Vec<(Vec3, f64)> {
    let mut out = Vec::with_capacity(n_theta * n_phi);
    for (z, wz) in gauss_legendre(n_theta) {
        let rho = (1.0 - z * z).max(0.0).sqrt();
        for k in 0..n_phi {
            let phi = 2.0 * PI * (k as f64 + 0.5) / n_phi as f64;
            out.push((
                Vec3::new(rho * phi.cos(), rho * phi.sin(), z),
                wz * 2.0 * PI / n_phi as f64,
            ));
        }
    }
    out
}

/// 26-point Lebedev rule (degree 7). Weights sum to 1, so the rule returns
/// spherical means directly.
pub fn lebedev26() -> Vec<(Vec3, f64)> {
    let mut out = Vec::with_capacity(26);
    let a1 = 1.0 / 21.0;
    let a2 = 4.0 / 105.0;
    let a3 = 9.0 / 280.0;
    for axis in 0..3 {
        for s in [-1.0, 1.0] {
            let mut v = Vec3::zeros();
            v[axis] = s;
            out.push((v, a1));
        }
    }
    let h = std::f64::consts::FRAC_1_SQRT_2;
    for (i, j) in [(0, 1), (0, 2), (1, 2)] {
        for si in [-1.0, 1.0] {
            for sj in [-1.0, 1.0] {
                let mut v = Vec3::zeros();
                v[i] = si * h;
                v[j] = sj * h;
                out.push((v, a2));
            }
        }
    }
    let c = 1.0 / 3f64.sqrt();
    for sx in [-1.0, 1.0] {
        for sy in [-1.0, 1.0] {
            for sz in [-1.0, 1.0] {
                out.push((Vec3::new(sx * c, sy * c, sz * c), a3));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn legendre_integrates_polynomials() {
        let rule = gauss_legendre(8);
        let s: f64 = rule.iter().map(|(x, w)| w * x.powi(14)).sum();
        assert_relative_eq!(s, 2.0 / 15.0, epsilon = 1e-14);
        let total: f64 = rule.iter().map(|(_, w)| w).sum();
        assert_relative_eq!(total, 2.0, epsilon = 1e-14);
    }

    #[test]
    fn product_rule_area() {
        let total: f64 = product_rule(6, 12).iter().map(|(_, w)| w).sum();
        assert_relative_eq!(total, 4.0 * PI, epsilon = 1e-12);
    }

    #[test]
    fn lebedev_moments() {
        let rule = lebedev26();
        assert_eq!(rule.len(), 26);
        let total: f64 = rule.iter().map(|(_, w)| w).sum();
        assert_relative_eq!(total, 1.0, epsilon = 1e-14);
        // <x^2> = 1/3, <x^4> = 1/5, <x^2 y^2> = 1/15
        let m2: f64 = rule.iter().map(|(v, w)| w * v.x.powi(2)).sum();
        let m4: f64 = rule.iter().map(|(v, w)| w * v.x.powi(4)).sum();
        let m22: f64 = rule.iter().map(|(v, w)| w * v.x.powi(2) * v.y.powi(2)).sum();
        assert_relative_eq!(m2, 1.0 / 3.0, epsilon = 1e-14);
        assert_relative_eq!(m4, 1.0 / 5.0, epsilon = 1e-14);
        assert_relative_eq!(m22, 1.0 / 15.0, epsilon = 1e-14);
    }
}
