//! Fully connected network evaluated on row-major batches.

use rand::Rng;

/// Hidden nonlinearity `(z + sqrt(z^2 + 4)) / 2`, a smooth rectifier close
/// to softplus that needs only a square root.
#[inline]
pub fn squareplus(z: f64) -> f64 {
    0.5 * (z + (z * z + 4.0).sqrt())
}

#[inline]
pub fn squareplus_grad(z: f64) -> f64 {
    0.5 * (1.0 + z / (z * z + 4.0).sqrt())
}

/// Layer widths `[input, hidden.., output]` and the parameter layout: for
/// each layer a row-major `[out x in]` weight block followed by `out` biases.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    widths: Vec<usize>,
    offsets: Vec<usize>,
    num_params: usize,
}

/// Saved activations of a batched forward pass.
#[derive(Debug, Clone, Default)]
pub struct MlpTape {
    pub rows: usize,
    /// `layers[0]` is the input; `layers[l]` for `l >= 1` holds the
    /// pre-activations of layer `l`.
    pre: Vec<Vec<f64>>,
    /// Post-activations of hidden layers, `post[l]` for layer `l`.
    post: Vec<Vec<f64>>,
}

impl MlpTape {
    pub fn output(&self) -> &[f64] {
        self.pre.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

impl Mlp {
    pub fn new(widths: &[usize]) -> Self {
        assert!(widths.len() >= 2 && widths.iter().all(|w| *w > 0));
        let mut offsets = Vec::with_capacity(widths.len() - 1);
        let mut n = 0;
        for w in widths.windows(2) {
            offsets.push(n);
            n += w[0] * w[1] + w[1];
        }
        Self {
            widths: widths.to_vec(),
            offsets,
            num_params: n,
        }
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn num_params(&self) -> usize {
        self.num_params
    }

    /// Uniform fan-in initialization: weights in `+-1/sqrt(fan_in)`, zero biases.
    pub fn init<R: Rng + ?Sized>(&self, params: &mut [f64], rng: &mut R) {
        for l in 0..self.offsets.len() {
            let (fan_in, out) = (self.widths[l], self.widths[l + 1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let o = self.offsets[l];
            for w in &mut params[o..o + fan_in * out] {
                *w = rng.gen_range(-bound..bound);
            }
            params[o + fan_in * out..o + fan_in * out + out].fill(0.0);
        }
    }

    fn layer<'a>(&self, params: &'a [f64], l: usize) -> (&'a [f64], &'a [f64]) {
        let (i, o) = (self.widths[l], self.widths[l + 1]);
        let off = self.offsets[l];
        (&params[off..off + i * o], &params[off + i * o..off + i * o + o])
    }

    /// Batched forward over `rows` inputs stored row-major in `input`.
    pub fn forward(&self, params: &[f64], input: Vec<f64>, rows: usize) -> MlpTape {
        debug_assert_eq!(input.len(), rows * self.input_dim());
        let layers = self.offsets.len();
        let mut pre = Vec::with_capacity(layers + 1);
        let mut post = Vec::with_capacity(layers);
        pre.push(input);
        post.push(Vec::new());
        for l in 0..layers {
            let (fi, fo) = (self.widths[l], self.widths[l + 1]);
            let (w, b) = self.layer(params, l);
            let mut z = Vec::with_capacity(rows * fo);
            for _ in 0..rows {
                z.extend_from_slice(b);
            }
            let x: &[f64] = if l == 0 { &pre[0] } else { &post[l] };
            // z (rows x fo) += x (rows x fi) * w^T (fi x fo)
            unsafe {
                matrixmultiply::dgemm(
                    rows,
                    fi,
                    fo,
                    1.0,
                    x.as_ptr(),
                    fi as isize,
                    1,
                    w.as_ptr(),
                    1,
                    fi as isize,
                    1.0,
                    z.as_mut_ptr(),
                    fo as isize,
                    1,
                );
            }
            if l + 1 < layers {
                post.push(z.iter().map(|v| squareplus(*v)).collect());
            }
            pre.push(z);
        }
        MlpTape { rows, pre, post }
    }

    /// Backpropagates `d_output` (rows x output_dim), accumulating parameter
    /// gradients into `grad` and returning the input gradient.
    pub fn backward(&self, params: &[f64], tape: &MlpTape, d_output: &[f64], grad: &mut [f64]) -> Vec<f64> {
        let rows = tape.rows;
        let layers = self.offsets.len();
        let mut dz = d_output.to_vec();
        for l in (0..layers).rev() {
            let (fi, fo) = (self.widths[l], self.widths[l + 1]);
            let (w, _) = self.layer(params, l);
            let x: &[f64] = if l == 0 { &tape.pre[0] } else { &tape.post[l] };
            let off = self.offsets[l];
            {
                let (gw, gb) = grad[off..off + fi * fo + fo].split_at_mut(fi * fo);
                // gw (fo x fi) += dz^T (fo x rows) * x (rows x fi)
                unsafe {
                    matrixmultiply::dgemm(
                        fo,
                        rows,
                        fi,
                        1.0,
                        dz.as_ptr(),
                        1,
                        fo as isize,
                        x.as_ptr(),
                        fi as isize,
                        1,
                        1.0,
                        gw.as_mut_ptr(),
                        fi as isize,
                        1,
                    );
                }
                for r in 0..rows {
                    for (g, d) in gb.iter_mut().zip(&dz[r * fo..(r + 1) * fo]) {
                        *g += d;
                    }
                }
            }
            // dx (rows x fi) = dz (rows x fo) * w (fo x fi)
            let mut dx = vec![0.0; rows * fi];
            unsafe {
                matrixmultiply::dgemm(
                    rows,
                    fo,
                    fi,
                    1.0,
                    dz.as_ptr(),
                    fo as isize,
                    1,
                    w.as_ptr(),
                    fi as isize,
                    1,
                    0.0,
                    dx.as_mut_ptr(),
                    fi as isize,
                    1,
                );
            }
            if l > 0 {
                for (d, z) in dx.iter_mut().zip(&tape.pre[l]) {
                    *d *= squareplus_grad(*z);
                }
            }
            dz = dx;
        }
        dz
    }
}
