//! Evaluation: optimally scaled SSIM with empty-region masking, effective
//! sample size, paired z-tests and noise-equivalent references.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::renderer::RangeDopplerFrame;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SsimConfig {
    /// Lower and upper clipping percentiles, in percent.
    pub clip_percentiles: (f64, f64),
    pub dynamic_range: f64,
    /// Odd window size.
    pub window: usize,
    pub window_sigma: f64,
    /// Pixels whose mean normalized target falls below this are empty.
    pub empty_threshold: f64,
    pub k1: f64,
    pub k2: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self {
            clip_percentiles: (0.1, 99.9),
            dynamic_range: 1.0,
            window: 7,
            window_sigma: 1.5,
            empty_threshold: 0.005,
            k1: 0.01,
            k2: 0.03,
        }
    }
}

/// Least-squares gain `xi = <pred, target> / <pred, pred>`.
pub fn optimal_scale(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::DimensionMismatch {
            expected: format!("{} values", target.len()),
            actual: format!("{}", pred.len()),
        });
    }
    let pp: f64 = pred.iter().map(|p| p * p).sum();
    if !(pp > 0.0) {
        return Err(Error::invalid("optimal scale undefined for an all-zero prediction"));
    }
    Ok(pred.iter().zip(target).map(|(p, t)| p * t).sum::<f64>() / pp)
}

/// Linear-interpolated percentile (`q` in percent) of unsorted data.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut v: Vec<f64> = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    if v.is_empty() {
        return f64::NAN;
    }
    let pos = (q / 100.0).clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let i = pos.floor() as usize;
    let f = pos - i as f64;
    if i + 1 < v.len() {
        v[i] * (1.0 - f) + v[i + 1] * f
    } else {
        v[i]
    }
}

fn as_f64(frame: &RangeDopplerFrame) -> Vec<f64> {
    frame.values.iter().map(|v| *v as f64).collect()
}

/// Clipping thresholds of a target frame.
pub fn clip_range(target: &[f64], config: &SsimConfig) -> (f64, f64) {
    (
        percentile(target, config.clip_percentiles.0),
        percentile(target, config.clip_percentiles.1),
    )
}

fn normalize(values: &[f64], lo: f64, hi: f64) -> Vec<f64> {
    values.iter().map(|v| (v.clamp(lo, hi) - lo) / (hi - lo)).collect()
}

/// Per-pixel mask of non-empty target regions: the mean over `targets` of
/// each clipped and normalized target is at least the empty threshold.
pub fn empty_mask(targets: &[RangeDopplerFrame], config: &SsimConfig) -> Vec<bool> {
    let Some(first) = targets.first() else { return Vec::new() };
    let mut acc = vec![0.0; first.values.len()];
    let mut n = 0usize;
    for t in targets {
        let v = as_f64(t);
        let (lo, hi) = clip_range(&v, config);
        if !(hi > lo) {
            continue;
        }
        for (a, x) in acc.iter_mut().zip(normalize(&v, lo, hi)) {
            *a += x;
        }
        n += 1;
    }
    let n = n.max(1) as f64;
    acc.into_iter().map(|a| a / n >= config.empty_threshold).collect()
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let h = (size / 2) as f64;
    let mut w: Vec<f64> = (0..size * size)
        .map(|i| {
            let (y, x) = ((i / size) as f64 - h, (i % size) as f64 - h);
            (-(x * x + y * y) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Mean SSIM of two `rows x cols` images over windows whose center passes
/// `mask`; `None` when no window qualifies.
pub fn ssim_image(x: &[f64], y: &[f64], rows: usize, cols: usize, mask: Option<&[bool]>, config: &SsimConfig) -> Option<f64> {
    let n = config.window;
    if rows < n || cols < n {
        return None;
    }
    let w = gaussian_window(n, config.window_sigma);
    let c1 = (config.k1 * config.dynamic_range).powi(2);
    let c2 = (config.k2 * config.dynamic_range).powi(2);
    let h = n / 2;
    let (mut total, mut count) = (0.0, 0usize);
    for i in 0..=rows - n {
        for j in 0..=cols - n {
            if let Some(m) = mask {
                if !m[(i + h) * cols + j + h] {
                    continue;
                }
            }
            let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for a in 0..n {
                for b in 0..n {
                    let k = (i + a) * cols + j + b;
                    let wk = w[a * n + b];
                    mx += wk * x[k];
                    my += wk * y[k];
                    sxx += wk * x[k] * x[k];
                    syy += wk * y[k] * y[k];
                    sxy += wk * x[k] * y[k];
                }
            }
            let (vx, vy, cxy) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
            total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    (count > 0).then(|| total / count as f64)
}

/// SSIM of `pred` against `target` after optimal scaling, percentile
/// clipping and normalization, averaged over antenna channels. `None` when
/// the target is empty or no window survives the mask.
pub fn scaled_ssim(pred: &RangeDopplerFrame, target: &RangeDopplerFrame, mask: Option<&[bool]>, config: &SsimConfig) -> Option<f64> {
    let t = as_f64(target);
    let p = as_f64(pred);
    let (lo, hi) = clip_range(&t, config);
    if !(hi > lo) {
        return None;
    }
    let xi = optimal_scale(&p, &t).unwrap_or(0.0);
    let tn = normalize(&t, lo, hi);
    let scaled: Vec<f64> = p.iter().map(|v| v * xi).collect();
    let pn = normalize(&scaled, lo, hi);
    let plane = target.range_bins * target.doppler_bins;
    let mut total = 0.0;
    let mut n = 0;
    for k in 0..target.antennas {
        let s = k * plane..(k + 1) * plane;
        let m = mask.map(|m| &m[s.clone()]);
        if let Some(v) = ssim_image(&pn[s.clone()], &tn[s], target.range_bins, target.doppler_bins, m, config) {
            total += v;
            n += 1;
        }
    }
    (n > 0).then(|| total / n as f64)
}

/// Autocorrelation at lag `t` of a centered series with variance `var`.
fn autocorrelation(centered: &[f64], var: f64, t: usize) -> f64 {
    centered.iter().zip(&centered[t..]).map(|(a, b)| a * b).sum::<f64>() / var
}

/// `N / (1 + 2 sum_t rho_t)`, summing lags `1..=N/2` and stopping at the
/// first lag whose estimate is not positive.
pub fn effective_sample_size(series: &[f64]) -> Result<f64> {
    let n = series.len();
    if n < 4 {
        return Err(Error::invalid(format!("effective sample size needs at least 4 values, got {n}")));
    }
    let mean = series.iter().sum::<f64>() / n as f64;
    let centered: Vec<f64> = series.iter().map(|x| x - mean).collect();
    let var: f64 = centered.iter().map(|x| x * x).sum();
    if !(var > 0.0) {
        log::warn!("constant series: autocorrelation undefined, using N");
        return Ok(n as f64);
    }
    let mut sum = 0.0;
    for t in 1..=n / 2 {
        let rho = autocorrelation(&centered, var, t);
        if !(rho > 0.0) {
            break;
        }
        sum += rho;
    }
    Ok(n as f64 / (1.0 + 2.0 * sum))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairedTest {
    pub mean_diff: f64,
    pub se: f64,
    pub z: f64,
    /// One-sided `P(Z >= z)`: small when `a` beats `b`.
    pub p: f64,
    pub n_eff: f64,
}

/// Paired z-test of `a - b` with an autocorrelation-corrected standard error.
pub fn paired_z_test(a: &[f64], b: &[f64]) -> Result<PairedTest> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: format!("{} values", a.len()),
            actual: format!("{}", b.len()),
        });
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.len();
    let n_eff = effective_sample_size(&d)?;
    let mean = d.iter().sum::<f64>() / n as f64;
    let sd = (d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
    let se = sd / n_eff.sqrt();
    let z = if se > 0.0 {
        mean / se
    } else if mean == 0.0 {
        0.0
    } else {
        mean.signum() * f64::INFINITY
    };
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    Ok(PairedTest {
        mean_diff: mean,
        se,
        z,
        p: normal.sf(z),
        n_eff,
    })
}

/// Summary of one method's per-frame scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesSummary {
    pub mean: f64,
    pub n: usize,
    pub n_eff: f64,
    pub se: f64,
}

pub fn summarize(series: &[f64]) -> Result<SeriesSummary> {
    let n = series.len();
    let n_eff = effective_sample_size(series)?;
    let mean = series.iter().sum::<f64>() / n as f64;
    let sd = (series.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
    Ok(SeriesSummary {
        mean,
        n,
        n_eff,
        se: sd / n_eff.sqrt(),
    })
}

/// One method's row of a comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub name: String,
    pub summary: SeriesSummary,
    /// Paired test of the reference method minus this one; small `p` means
    /// the reference scores higher.
    pub vs_reference: Option<PairedTest>,
}

/// Per-frame scores of several methods on the same frames, with summaries,
/// pairwise tests and noise references.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub reference: String,
    /// Frames scored by every method.
    pub frames: Vec<usize>,
    /// Frames dropped because some method had no defined score.
    pub skipped: Vec<usize>,
    pub scores: Vec<Vec<f64>>,
    pub methods: Vec<MethodReport>,
    /// `(a, b, test of a - b)` for every ordered pair `a < b`.
    pub pairwise: Vec<(String, String, PairedTest)>,
    pub noise_references: Vec<(f64, f64)>,
}

impl EvalReport {
    /// `methods[i] = (name, per-frame scores aligned with frames)`;
    /// `reference` indexes the method the others are tested against.
    pub fn build(frames: &[usize], methods: Vec<(String, Vec<Option<f64>>)>, reference: usize) -> Result<Self> {
        if methods.is_empty() || reference >= methods.len() {
            return Err(Error::invalid("comparison needs a reference among the methods"));
        }
        if let Some((name, _)) = methods.iter().find(|(_, s)| s.len() != frames.len()) {
            return Err(Error::DimensionMismatch {
                expected: format!("{} scores", frames.len()),
                actual: format!("method {name}"),
            });
        }
        let mut kept = Vec::new();
        let mut skipped = Vec::new();
        for (k, f) in frames.iter().enumerate() {
            if methods.iter().all(|(_, s)| s[k].is_some()) {
                kept.push(k);
            } else {
                skipped.push(*f);
            }
        }
        let scores: Vec<Vec<f64>> = methods.iter().map(|(_, s)| kept.iter().map(|&k| s[k].unwrap_or(0.0)).collect()).collect();
        let mut reports = Vec::new();
        for (i, (name, _)) in methods.iter().enumerate() {
            reports.push(MethodReport {
                name: name.clone(),
                summary: summarize(&scores[i])?,
                vs_reference: if i == reference { None } else { Some(paired_z_test(&scores[reference], &scores[i])?) },
            });
        }
        let mut pairwise = Vec::new();
        for a in 0..methods.len() {
            for b in a + 1..methods.len() {
                pairwise.push((methods[a].0.clone(), methods[b].0.clone(), paired_z_test(&scores[a], &scores[b])?));
            }
        }
        Ok(Self {
            reference: methods[reference].0.clone(),
            frames: kept.iter().map(|&k| frames[k]).collect(),
            skipped,
            scores,
            methods: reports,
            pairwise,
            noise_references: Vec::new(),
        })
    }

    pub fn method(&self, name: &str) -> Option<&MethodReport> {
        self.methods.iter().find(|m| m.name == name)
    }

    /// Test of `a - b`, whichever order the pair was stored in.
    pub fn compare(&self, a: &str, b: &str) -> Option<PairedTest> {
        self.pairwise.iter().find_map(|(x, y, t)| {
            if x == a && y == b {
                Some(*t)
            } else if x == b && y == a {
                let z = -t.z;
                Some(PairedTest {
                    mean_diff: -t.mean_diff,
                    z,
                    p: Normal::new(0.0, 1.0).expect("standard normal").sf(z),
                    ..*t
                })
            } else {
                None
            }
        })
    }

    /// `frame,<method>...`, one row per scored frame.
    pub fn per_frame_csv(&self) -> String {
        let mut s = String::from("frame");
        for m in &self.methods {
            s.push(',');
            s.push_str(&m.name);
        }
        s.push('\n');
        for (k, f) in self.frames.iter().enumerate() {
            s.push_str(&f.to_string());
            for col in &self.scores {
                s.push_str(&format!(",{}", col[k]));
            }
            s.push('\n');
        }
        s
    }

    /// `method,mean,se,n,n_eff,diff_vs_reference,z,p`, plus one
    /// `noise_<dB>dB` row per noise reference.
    pub fn summary_csv(&self) -> String {
        let mut s = String::from("method,mean,se,n,n_eff,diff_vs_reference,z,p\n");
        for m in &self.methods {
            let (d, z, p) = m.vs_reference.map_or((String::new(), String::new(), String::new()), |t| {
                (t.mean_diff.to_string(), t.z.to_string(), t.p.to_string())
            });
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                m.name, m.summary.mean, m.summary.se, m.summary.n, m.summary.n_eff, d, z, p
            ));
        }
        for (db, v) in &self.noise_references {
            s.push_str(&format!("noise_{db}dB,{v},,,,,,\n"));
        }
        s
    }
}

/// Adds Gaussian noise of standard deviation `(hi - lo) * 10^(-psnr/20)`
/// (PSNR relative to the normalized dynamic range) to a target frame.
pub fn add_psnr_noise(target: &RangeDopplerFrame, psnr_db: f64, config: &SsimConfig, rng: &mut ChaCha8Rng) -> RangeDopplerFrame {
    let t = as_f64(target);
    let (lo, hi) = clip_range(&t, config);
    let sd = (hi - lo) * config.dynamic_range * 10f64.powf(-psnr_db / 20.0);
    let mut out = target.clone();
    for v in out.values.iter_mut() {
        let n: f64 = StandardNormal.sample(rng);
        *v = (*v as f64 + sd * n) as f32;
    }
    out
}

/// Mean scaled SSIM of noisy copies of `targets` at each PSNR.
pub fn noise_reference_ssim(
    targets: &[RangeDopplerFrame],
    psnr_db: &[f64],
    mask: Option<&[bool]>,
    config: &SsimConfig,
    seed: u64,
) -> Result<Vec<(f64, f64)>> {
    if targets.is_empty() {
        return Err(Error::Empty("noise reference needs target frames".into()));
    }
    Ok(psnr_db
        .iter()
        .map(|p| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ p.to_bits());
            let scores: Vec<f64> = targets
                .iter()
                .filter_map(|t| scaled_ssim(&add_psnr_noise(t, *p, config, &mut rng), t, mask, config))
                .collect();
            (*p, scores.iter().sum::<f64>() / scores.len().max(1) as f64)
        })
        .collect())
}
