//! Hash-grid encoder followed by a small MLP and a spherical-harmonic head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::hash::{HashEncoder, HashEncoderConfig};
use super::mlp::{Mlp, MlpTape};
use super::sh::SH_COEFFS;
use super::{
    head_backward, head_forward, quadrature, AlphaActivation, AlphaGradRule, Field, FieldOutput,
    FieldSample, HeadState, TrainableField,
};
use crate::error::{Error, Result};
use crate::geometry::Vec3;

/// Width of the network output: `sigma_bar`, `alpha_bar`, and the SH coefficients.
pub const HEAD_WIDTH: usize = 2 + SH_COEFFS;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImplicitFieldConfig {
    pub encoder: HashEncoderConfig,
    pub hidden: Vec<usize>,
    pub activation: AlphaActivation,
    /// When false the SH head is ignored and the field is isotropic.
    pub view_dependent: bool,
    pub seed: u64,
}

impl Default for ImplicitFieldConfig {
    fn default() -> Self {
        Self {
            encoder: HashEncoderConfig::default(),
            hidden: vec![64, 32],
            activation: AlphaActivation::ClampedExp,
            view_dependent: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ImplicitField {
    config: ImplicitFieldConfig,
    encoder: HashEncoder,
    mlp: Mlp,
    params: Vec<f64>,
}

pub struct ImplicitTape {
    /// Indices of the batch entries inside the encoder bounds.
    inside: Vec<usize>,
    positions: Vec<Vec3>,
    mlp: MlpTape,
    heads: Vec<HeadState>,
}

impl ImplicitField {
    /// Builds and initializes a field: hash features uniform in `+-1e-4`,
    /// fan-in uniform MLP weights with the output layer scaled by 0.1, and
    /// a unit bias on the DC coefficient so the initial field is nearly
    /// isotropic.
    pub fn new(config: ImplicitFieldConfig) -> Result<Self> {
        let encoder = HashEncoder::new(config.encoder.clone())?;
        if config.hidden.iter().any(|h| *h == 0) {
            return Err(Error::invalid("hidden widths must be positive"));
        }
        let mut widths = vec![encoder.output_dim()];
        widths.extend_from_slice(&config.hidden);
        widths.push(HEAD_WIDTH);
        let mlp = Mlp::new(&widths);
        let mut params = vec![0.0; encoder.num_params() + mlp.num_params()];
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (table, net) = params.split_at_mut(encoder.num_params());
        for v in table.iter_mut() {
            *v = rng.gen_range(-1e-4..1e-4);
        }
        mlp.init(net, &mut rng);
        let last_in = *config.hidden.last().unwrap_or(&widths[0]);
        let out_off = net.len() - HEAD_WIDTH * last_in - HEAD_WIDTH;
        for w in &mut net[out_off..out_off + HEAD_WIDTH * last_in] {
            *w *= 0.1;
        }
        net[net.len() - SH_COEFFS] = 1.0;
        Ok(Self {
            config,
            encoder,
            mlp,
            params,
        })
    }

    pub fn config(&self) -> &ImplicitFieldConfig {
        &self.config
    }

    pub fn encoder(&self) -> &HashEncoder {
        &self.encoder
    }

    pub fn mlp_widths(&self) -> &[usize] {
        self.mlp.widths()
    }

    fn split(&self) -> (&[f64], &[f64]) {
        self.params.split_at(self.encoder.num_params())
    }

    /// Raw head outputs at `position`.
    pub fn output(&self, position: &Vec3) -> FieldOutput {
        let tape = self.network(std::slice::from_ref(position));
        let o = tape.output();
        let mut sh_coeffs = [0.0; SH_COEFFS];
        sh_coeffs.copy_from_slice(&o[2..HEAD_WIDTH]);
        FieldOutput {
            sigma_bar: o[0],
            alpha_bar: o[1],
            sh_coeffs,
        }
    }

    fn network(&self, positions: &[Vec3]) -> MlpTape {
        let (table, net) = self.split();
        let dim = self.encoder.output_dim();
        let mut features = vec![0.0; positions.len() * dim];
        for (p, row) in positions.iter().zip(features.chunks_exact_mut(dim)) {
            self.encoder.encode(table, p, row);
        }
        self.mlp.forward(net, features, positions.len())
    }

    fn coeffs<'a>(&self, row: &'a [f64]) -> Option<&'a [f64]> {
        self.config.view_dependent.then(|| &row[2..HEAD_WIDTH])
    }

    /// Evaluates the field; positions outside the encoder bounds are empty
    /// space and skip the network.
    fn run(
        &self,
        positions: &[Vec3],
        directions: &[Vec3],
        clip: f64,
        out: &mut [FieldSample],
        keep: bool,
    ) -> Option<ImplicitTape> {
        assert_eq!(positions.len(), directions.len());
        assert_eq!(positions.len(), out.len());
        let bounds = &self.config.encoder.bounds;
        let inside: Vec<usize> = (0..positions.len()).filter(|&i| bounds.contains(&positions[i])).collect();
        let ps: Vec<Vec3> = inside.iter().map(|&i| positions[i]).collect();
        out.fill(FieldSample::EMPTY);
        let tape = self.network(&ps);
        let mut heads = Vec::with_capacity(if keep { ps.len() } else { 0 });
        for (row, &i) in tape.output().chunks_exact(HEAD_WIDTH).zip(&inside) {
            let (s, st) = head_forward(row[0], row[1], self.coeffs(row), &directions[i], self.config.activation, clip);
            out[i] = s;
            if keep {
                heads.push(st);
            }
        }
        keep.then(|| ImplicitTape {
            inside,
            positions: ps,
            mlp: tape,
            heads,
        })
    }
}

impl Field for ImplicitField {
    fn sample_batch(&self, positions: &[Vec3], directions: &[Vec3], clip: f64, out: &mut [FieldSample]) {
        self.run(positions, directions, clip, out, false);
    }

    fn mean_field(&self, positions: &[Vec3], clip: f64) -> Vec<(f64, f64)> {
        let rule = quadrature::lebedev26();
        let bounds = &self.config.encoder.bounds;
        let inside: Vec<usize> = (0..positions.len()).filter(|&i| bounds.contains(&positions[i])).collect();
        let ps: Vec<Vec3> = inside.iter().map(|&i| positions[i]).collect();
        let tape = self.network(&ps);
        let mut out = vec![(0.0, 1.0); positions.len()];
        for (row, &i) in tape.output().chunks_exact(HEAD_WIDTH).zip(&inside) {
            out[i] = {
                let alpha = rule
                    .iter()
                    .map(|(w, wt)| {
                        let (s, _) = head_forward(row[0], row[1], self.coeffs(row), w, self.config.activation, clip);
                        wt * s.alpha
                    })
                    .sum();
                (row[0].abs(), alpha)
            };
        }
        out
    }
}

impl TrainableField for ImplicitField {
    type Tape = ImplicitTape;

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn forward_taped(&self, positions: &[Vec3], directions: &[Vec3], clip: f64, out: &mut [FieldSample]) -> ImplicitTape {
        self.run(positions, directions, clip, out, true).expect("tape requested")
    }

    fn backward(&self, tape: &ImplicitTape, d_sigma: &[f64], d_log_alpha: &[f64], rule: AlphaGradRule, grad: &mut [f64]) {
        let n = tape.positions.len();
        let mut d_out = vec![0.0; n * HEAD_WIDTH];
        for (k, (row, drow)) in tape
            .mlp
            .output()
            .chunks_exact(HEAD_WIDTH)
            .zip(d_out.chunks_exact_mut(HEAD_WIDTH))
            .enumerate()
        {
            let i = tape.inside[k];
            if d_sigma[i] == 0.0 && d_log_alpha[i] == 0.0 {
                continue;
            }
            let (d0, dc) = drow.split_at_mut(2);
            let (dsb, dab) = head_backward(
                &tape.heads[k],
                row[0],
                row[1],
                self.coeffs(row),
                d_sigma[i],
                d_log_alpha[i],
                self.config.activation,
                rule,
                self.config.view_dependent.then_some(dc),
            );
            d0[0] = dsb;
            d0[1] = dab;
        }
        let split = self.encoder.num_params();
        let (_, net) = self.split();
        let (g_table, g_net) = grad.split_at_mut(split);
        let d_features = self.mlp.backward(net, &tape.mlp, &d_out, g_net);
        let dim = self.encoder.output_dim();
        for (p, df) in tape.positions.iter().zip(d_features.chunks_exact(dim)) {
            self.encoder.backward(p, df, g_table);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Aabb;
    use approx::assert_relative_eq;

    pub(crate) fn tiny_config(seed: u64) -> ImplicitFieldConfig {
        ImplicitFieldConfig {
            encoder: HashEncoderConfig {
                levels: 3,
                features_per_level: 2,
                table_size: 1 << 8,
                coarsest_resolution: 0.5,
                growth_factor: 2.0,
                bounds: Aabb::new([-1.0; 3], [1.0; 3]).unwrap(),
            },
            hidden: vec![8, 6],
            activation: AlphaActivation::ClampedExp,
            view_dependent: true,
            seed,
        }
    }

    #[test]
    fn output_width() {
        let f = ImplicitField::new(ImplicitFieldConfig {
            encoder: HashEncoderConfig {
                table_size: 1 << 10,
                ..Default::default()
            },
            ..Default::default()
        })
        .unwrap();
        assert_eq!(f.mlp_widths(), &[24, 64, 32, 27]);
    }

    #[test]
    fn initial_field_is_nearly_isotropic_and_bounded() {
        let f = ImplicitField::new(tiny_config(1)).unwrap();
        let out = f.output(&Vec3::new(0.1, 0.2, 0.3));
        assert!(out.sh_coeffs[0] > 0.5);
        let p = Vec3::new(0.3, -0.2, 0.1);
        for w in [Vec3::x(), Vec3::y(), -Vec3::z()] {
            let s = f.sample(&p, &w, f64::NEG_INFINITY);
            assert!((0.0..=1.0).contains(&s.alpha));
        }
    }

    #[test]
    fn mean_field_reflectance_matches_quadrature() {
        let f = ImplicitField::new(tiny_config(2)).unwrap();
        let p = [Vec3::new(0.2, 0.1, -0.4)];
        let exact = f.mean_field(&p, f64::NEG_INFINITY)[0];
        let rule = quadrature::product_rule(8, 16);
        let l2 = rule
            .iter()
            .map(|(w, wt)| wt * f.sample(&p[0], w, f64::NEG_INFINITY).sigma.powi(2))
            .sum::<f64>()
            .sqrt();
        assert_relative_eq!(exact.0, l2, max_relative = 1e-9);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut f = ImplicitField::new(tiny_config(3)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for v in f.params_mut().iter_mut() {
            *v += rng.gen_range(-0.3..0.3);
        }
        let positions: Vec<Vec3> = (0..5)
            .map(|_| Vec3::new(rng.gen_range(-0.9..0.9), rng.gen_range(-0.9..0.9), rng.gen_range(-0.9..0.9)))
            .collect();
        let dirs: Vec<Vec3> = (0..5)
            .map(|_| Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)).normalize())
            .collect();
        let ds: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let dl: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let clip = f64::NEG_INFINITY;
        let loss = |field: &ImplicitField| {
            let mut out = vec![FieldSample::EMPTY; 5];
            field.sample_batch(&positions, &dirs, clip, &mut out);
            out.iter().enumerate().map(|(i, s)| ds[i] * s.sigma + dl[i] * s.log_alpha).sum::<f64>()
        };
        let mut out = vec![FieldSample::EMPTY; 5];
        let tape = f.forward_taped(&positions, &dirs, clip, &mut out);
        if tape.heads.iter().any(|h| h.pre_alpha.abs() < 1e-4) {
            return;
        }
        let mut grad = vec![0.0; f.num_params()];
        f.backward(&tape, &ds, &dl, AlphaGradRule::Exact, &mut grad);
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for i in 0..f.num_params() {
            let orig = f.params()[i];
            f.params_mut()[i] = orig + h;
            let a = loss(&f);
            f.params_mut()[i] = orig - h;
            let b = loss(&f);
            f.params_mut()[i] = orig;
            let fd = (a - b) / (2.0 * h);
            let err = (grad[i] - fd).abs() / fd.abs().max(1e-6).max(grad[i].abs());
            worst = worst.max(if (grad[i] - fd).abs() < 1e-9 { 0.0 } else { err });
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }
}
