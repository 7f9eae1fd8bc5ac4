//! Reflectance/transmittance fields.
//!
//! A field maps a world position and a world-frame viewing direction to a
//! reflectance `sigma` and a transmittance `alpha` in `[0, 1]`. The learned
//! [`ImplicitField`] emits a view-independent amplitude pair `(sigma_bar,
//! alpha_bar)` and spherical-harmonic coefficients `c`; the view factor
//! `s = <Y(w), c / |c|>` modulates both:
//!
//! ```text
//! sigma = sigma_bar * s
//! alpha = exp(min(0, alpha_bar * s))      (alpha := 1 when sigma_bar < clip)
//! ```

pub mod activation;
pub mod checkpoint;
pub mod grid;
pub mod hash;
pub mod implicit;
pub mod mlp;
pub mod quadrature;
pub mod sh;

use crate::geometry::{Aabb, Vec3};

pub use activation::{AlphaActivation, AlphaGradRule, AnnealSchedule};
pub use grid::GridField;
pub use hash::{HashEncoder, HashEncoderConfig};
pub use implicit::{ImplicitField, ImplicitFieldConfig};

use sh::{sh_evaluate, SH_COEFFS};

/// Raw network head: `(sigma_bar, alpha_bar, c)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldOutput {
    pub sigma_bar: f64,
    pub alpha_bar: f64,
    pub sh_coeffs: [f64; SH_COEFFS],
}

/// Reflectance and transmittance at one `(position, direction)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldSample {
    pub sigma: f64,
    pub alpha: f64,
    /// `ln(alpha)`, kept separately so transmittance products can be formed
    /// as sums without re-taking logarithms.
    pub log_alpha: f64,
}

impl Default for FieldSample {
    fn default() -> Self {
        FieldSample::EMPTY
    }
}

impl FieldSample {
    pub const EMPTY: FieldSample = FieldSample {
        sigma: 0.0,
        alpha: 1.0,
        log_alpha: 0.0,
    };

    pub fn from_log_alpha(sigma: f64, log_alpha: f64) -> Self {
        Self {
            sigma,
            alpha: log_alpha.exp(),
            log_alpha,
        }
    }
}

/// Anything the renderer can sample.
pub trait Field: Sync {
    /// Samples `positions[i]` seen along `directions[i]` into `out[i]`.
    fn sample_batch(&self, positions: &[Vec3], directions: &[Vec3], clip: f64, out: &mut [FieldSample]);

    fn sample(&self, position: &Vec3, direction: &Vec3, clip: f64) -> FieldSample {
        let mut out = [FieldSample::EMPTY];
        self.sample_batch(
            std::slice::from_ref(position),
            std::slice::from_ref(direction),
            clip,
            &mut out,
        );
        out[0]
    }

    /// Direction-independent summary at each position: the spherical L2
    /// norm of `sigma` and the mean of `alpha` over directions.
    ///
    /// The default integrates numerically; fields with an analytic
    /// amplitude override it.
    fn mean_field(&self, positions: &[Vec3], clip: f64) -> Vec<(f64, f64)> {
        let l2_rule = quadrature::product_rule(5, 10);
        let mean_rule = quadrature::lebedev26();
        let mut out = Vec::with_capacity(positions.len());
        let mut ps = Vec::new();
        let mut ds = Vec::new();
        let mut samples = Vec::new();
        for p in positions {
            ps.clear();
            ds.clear();
            for (w, _) in l2_rule.iter().chain(mean_rule.iter()) {
                ps.push(*p);
                ds.push(*w);
            }
            samples.resize(ps.len(), FieldSample::EMPTY);
            self.sample_batch(&ps, &ds, clip, &mut samples);
            let (a, b) = samples.split_at(l2_rule.len());
            let l2 = a
                .iter()
                .zip(&l2_rule)
                .map(|(s, (_, w))| w * s.sigma * s.sigma)
                .sum::<f64>()
                .sqrt();
            let mean_alpha = b.iter().zip(&mean_rule).map(|(s, (_, w))| w * s.alpha).sum();
            out.push((l2, mean_alpha));
        }
        out
    }
}

/// A field with a flat parameter vector and an analytic adjoint.
pub trait TrainableField: Field {
    type Tape: Send;

    fn params(&self) -> &[f64];
    fn params_mut(&mut self) -> &mut [f64];

    fn num_params(&self) -> usize {
        self.params().len()
    }

    /// Same outputs as [`Field::sample_batch`], plus what the adjoint needs.
    fn forward_taped(
        &self,
        positions: &[Vec3],
        directions: &[Vec3],
        clip: f64,
        out: &mut [FieldSample],
    ) -> Self::Tape;

    /// Accumulates into `grad` the parameter gradient of
    /// `sum_i d_sigma[i] * sigma_i + d_log_alpha[i] * log_alpha_i`.
    fn backward(
        &self,
        tape: &Self::Tape,
        d_sigma: &[f64],
        d_log_alpha: &[f64],
        rule: AlphaGradRule,
        grad: &mut [f64],
    );
}

/// Per-sample state of the output head kept for the adjoint.
#[derive(Debug, Clone)]
pub struct HeadState {
    pub sh: [f64; SH_COEFFS],
    pub view: f64,
    pub coeff_norm: f64,
    pub pre_alpha: f64,
    pub clipped: bool,
}

/// Output head shared by every parametric field.
///
/// `coeffs = None` means isotropic (`s = Y_00`).
pub fn head_forward(
    sigma_bar: f64,
    alpha_bar: f64,
    coeffs: Option<&[f64]>,
    direction: &Vec3,
    activation: AlphaActivation,
    clip: f64,
) -> (FieldSample, HeadState) {
    let (sh, view, coeff_norm) = match coeffs {
        Some(c) => {
            let y = sh_evaluate(direction);
            let norm = c.iter().map(|v| v * v).sum::<f64>().sqrt();
            (y, sh::view_factor(&y, c), norm)
        }
        None => ([0.0; SH_COEFFS], sh::SH_C0, 0.0),
    };
    let sigma = sigma_bar * view;
    let pre_alpha = alpha_bar * view;
    let clipped = sigma_bar < clip;
    let log_alpha = if clipped { 0.0 } else { activation.log_alpha(pre_alpha) };
    (
        FieldSample::from_log_alpha(sigma, log_alpha),
        HeadState {
            sh,
            view,
            coeff_norm,
            pre_alpha,
            clipped,
        },
    )
}

/// Adjoint of [`head_forward`]. Writes `(d_sigma_bar, d_alpha_bar)` and, when
/// view-dependent, `d_coeffs`.
#[allow(clippy::too_many_arguments)]
pub fn head_backward(
    state: &HeadState,
    sigma_bar: f64,
    alpha_bar: f64,
    coeffs: Option<&[f64]>,
    d_sigma: f64,
    d_log_alpha: f64,
    activation: AlphaActivation,
    rule: AlphaGradRule,
    d_coeffs: Option<&mut [f64]>,
) -> (f64, f64) {
    let d_pre = if state.clipped {
        0.0
    } else {
        activation.backward(state.pre_alpha, d_log_alpha, rule)
    };
    let d_sigma_bar = d_sigma * state.view;
    let d_alpha_bar = d_pre * state.view;
    if let (Some(c), Some(dc)) = (coeffs, d_coeffs) {
        let d_view = d_sigma * sigma_bar + d_pre * alpha_bar;
        if state.coeff_norm >= 1e-12 {
            let inv = 1.0 / state.coeff_norm;
            for i in 0..SH_COEFFS {
                dc[i] += d_view * (state.sh[i] - state.view * c[i] * inv) * inv;
            }
        }
    }
    (d_sigma_bar, d_alpha_bar)
}

/// Voxel grid of direction-independent summaries.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanFieldGrid {
    pub bounds: Aabb,
    pub resolution: f64,
    pub dims: [usize; 3],
    /// `|sigma_bar|`, x fastest.
    pub reflectance: Vec<f64>,
    /// Mean transmittance over directions, x fastest.
    pub transmittance: Vec<f64>,
}

impl MeanFieldGrid {
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    pub fn center(&self, x: usize, y: usize, z: usize) -> Vec3 {
        Vec3::new(
            self.bounds.min[0] + (x as f64 + 0.5) * self.resolution,
            self.bounds.min[1] + (y as f64 + 0.5) * self.resolution,
            self.bounds.min[2] + (z as f64 + 0.5) * self.resolution,
        )
    }
}

/// Samples the direction-independent summary on voxel centers covering
/// `bounds` at `resolution`.
pub fn mean_field_grid<F: Field + ?Sized>(
    field: &F,
    resolution: f64,
    bounds: &Aabb,
    clip: f64,
) -> crate::error::Result<MeanFieldGrid> {
    use rayon::prelude::*;
    if !(resolution > 0.0) {
        return Err(crate::error::Error::invalid("grid resolution must be positive"));
    }
    let ext = bounds.extent();
    let dims = [0, 1, 2].map(|i| ((ext[i] / resolution).round() as usize).max(1));
    let mut grid = MeanFieldGrid {
        bounds: *bounds,
        resolution,
        dims,
        reflectance: Vec::new(),
        transmittance: Vec::new(),
    };
    let plane = dims[0] * dims[1];
    let slabs: Vec<Vec<(f64, f64)>> = (0..dims[2])
        .into_par_iter()
        .map(|z| {
            let pts: Vec<Vec3> = (0..plane)
                .map(|i| grid.center(i % dims[0], i / dims[0], z))
                .collect();
            field.mean_field(&pts, clip)
        })
        .collect();
    for (s, a) in slabs.into_iter().flatten() {
        grid.reflectance.push(s);
        grid.transmittance.push(a);
    }
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn dc_only_head_is_isotropic() {
        let mut c = [0.0; SH_COEFFS];
        c[0] = 3.0;
        for w in [Vec3::x(), Vec3::new(0.3, -0.8, 0.1), -Vec3::z()] {
            let (s, _) = head_forward(2.0, -1.0, Some(&c), &w, AlphaActivation::ClampedExp, -1.0);
            assert_relative_eq!(s.sigma, 2.0 * sh::SH_C0, epsilon = 1e-15);
        }
    }

    #[test]
    fn spherical_norm_of_sigma_is_amplitude() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let rule = quadrature::product_rule(16, 32);
        for _ in 0..20 {
            let c: Vec<f64> = (0..SH_COEFFS).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let sb = rng.gen_range(-3.0..3.0);
            let l2 = rule
                .iter()
                .map(|(w, wt)| {
                    let (s, _) = head_forward(sb, 0.0, Some(&c), w, AlphaActivation::ClampedExp, f64::NEG_INFINITY);
                    wt * s.sigma * s.sigma
                })
                .sum::<f64>()
                .sqrt();
            assert_relative_eq!(l2, f64::abs(sb), max_relative = 1e-9);
        }
    }

    #[test]
    fn clipping_forces_unit_alpha() {
        let c = sh::dc_unit();
        let (s, _) = head_forward(0.01, -5.0, Some(&c), &Vec3::x(), AlphaActivation::ClampedExp, 0.05);
        assert_eq!(s.alpha, 1.0);
        let (s, _) = head_forward(0.10, -5.0, Some(&c), &Vec3::x(), AlphaActivation::ClampedExp, 0.05);
        assert!(s.alpha < 1.0);
    }

    #[test]
    fn head_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = Vec3::new(0.2, 0.9, -0.3).normalize();
        for _ in 0..10 {
            let c: Vec<f64> = (0..SH_COEFFS).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let sb = rng.gen_range(-2.0..2.0);
            let ab = rng.gen_range(-2.0..2.0);
            let (ds, dl) = (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            let f = |sb: f64, ab: f64, c: &[f64]| {
                let (s, _) = head_forward(sb, ab, Some(c), &w, AlphaActivation::ClampedExp, f64::NEG_INFINITY);
                ds * s.sigma + dl * s.log_alpha
            };
            let (_, st) = head_forward(sb, ab, Some(&c), &w, AlphaActivation::ClampedExp, f64::NEG_INFINITY);
            if st.pre_alpha.abs() < 1e-3 {
                continue;
            }
            let mut dc = vec![0.0; SH_COEFFS];
            let (dsb, dab) = head_backward(
                &st,
                sb,
                ab,
                Some(&c),
                ds,
                dl,
                AlphaActivation::ClampedExp,
                AlphaGradRule::Exact,
                Some(&mut dc),
            );
            let h = 1e-6;
            assert_relative_eq!(dsb, (f(sb + h, ab, &c) - f(sb - h, ab, &c)) / (2.0 * h), epsilon = 1e-7);
            assert_relative_eq!(dab, (f(sb, ab + h, &c) - f(sb, ab - h, &c)) / (2.0 * h), epsilon = 1e-7);
            for i in 0..SH_COEFFS {
                let mut a = c.clone();
                let mut b = c.clone();
                a[i] += h;
                b[i] -= h;
                assert_relative_eq!(dc[i], (f(sb, ab, &a) - f(sb, ab, &b)) / (2.0 * h), epsilon = 1e-7);
            }
        }
    }
}
