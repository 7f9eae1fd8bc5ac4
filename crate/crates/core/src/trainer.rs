//! Fits an implicit field to range-Doppler frames: Adam on a per-column l1
//! loss, with the clip threshold annealed by step.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::Dataset;
use crate::error::{Error, Result};
use crate::evalmetrics::{empty_mask, scaled_ssim, SsimConfig};
use crate::field::checkpoint::{load_checkpoint, save_checkpoint};
use crate::field::{AlphaGradRule, AnnealSchedule, ImplicitField, ImplicitFieldConfig, TrainableField};
use crate::renderer::{column_geometry, column_seed, render_column_taped, render_frame, RangeDopplerFrame};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    /// Doppler columns per step.
    pub batch_size: usize,
    pub adam_betas: (f64, f64),
    pub adam_eps: f64,
    pub seed: u64,
    /// Tail of the trajectory kept out of training.
    pub holdout_fraction: f64,
    /// Rays per column while training; `None` uses the radar setting.
    pub rays_per_column: Option<usize>,
    pub anneal: AnnealSchedule,
    /// Write a checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            epochs: 3,
            batch_size: 1024,
            adam_betas: (0.9, 0.999),
            adam_eps: 1e-8,
            seed: 0,
            holdout_fraction: 0.2,
            rays_per_column: None,
            anneal: AnnealSchedule::default(),
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            return Err(Error::invalid("holdout fraction must lie in (0, 1)"));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::invalid("batch size and epochs must be positive"));
        }
        if !(self.learning_rate > 0.0) || !(self.adam_eps > 0.0) {
            return Err(Error::invalid("learning rate and epsilon must be positive"));
        }
        let (b1, b2) = self.adam_betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return Err(Error::invalid("Adam betas must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Bias-corrected Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl Adam {
    pub fn new(n: usize, learning_rate: f64, betas: (f64, f64), eps: f64) -> Self {
        Self {
            learning_rate,
            beta1: betas.0,
            beta2: betas.1,
            eps,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn update(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let step = self.learning_rate / c1;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        params
            .par_iter_mut()
            .zip(self.m.par_iter_mut())
            .zip(self.v.par_iter_mut())
            .zip(grad.par_iter())
            .with_min_len(4096)
            .for_each(|(((p, m), v), g)| {
                if *g == 0.0 && *m == 0.0 && *v == 0.0 {
                    return;
                }
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= step * *m / ((*v / c2).sqrt() + eps);
            });
    }

    fn save(&self, path: &Path) -> Result<()> {
        let io = |e| Error::io(path, e);
        let mut w = BufWriter::new(File::create(path).map_err(io)?);
        writeln!(w, "{}", serde_json::json!({ "t": self.t, "len": self.m.len() })).map_err(io)?;
        for x in self.m.iter().chain(&self.v) {
            w.write_all(&x.to_le_bytes()).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    fn load(&mut self, path: &Path) -> Result<()> {
        let io = |e| Error::io(path, e);
        let mut r = BufReader::new(File::open(path).map_err(io)?);
        let mut line = String::new();
        r.read_line(&mut line).map_err(io)?;
        let header: serde_json::Value = serde_json::from_str(line.trim_end())?;
        let len = header["len"].as_u64().unwrap_or(0) as usize;
        if len != self.m.len() {
            return Err(Error::DimensionMismatch {
                expected: format!("{} optimizer moments", self.m.len()),
                actual: format!("{len}"),
            });
        }
        self.t = header["t"].as_u64().unwrap_or(0);
        let mut buf = vec![0u8; 16 * len];
        r.read_exact(&mut buf).map_err(io)?;
        for (i, c) in buf.chunks_exact(8).enumerate() {
            let v = f64::from_le_bytes(c.try_into().expect("8 bytes"));
            if i < len {
                self.m[i] = v;
            } else {
                self.v[i - len] = v;
            }
        }
        Ok(())
    }
}

/// One Doppler column of one frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ColumnRef {
    pub frame: usize,
    pub doppler: usize,
}

/// Every observable column of the valid frames among `frames`.
pub fn observable_columns(dataset: &Dataset, frames: &[usize]) -> Vec<ColumnRef> {
    let mut out = Vec::new();
    for &f in frames {
        let frame = &dataset.frames[f];
        let speed = frame.pose.speed();
        if !frame.valid || !dataset.trajectory.valid[f] || !dataset.radar.speed_valid(speed) {
            continue;
        }
        for j in 0..dataset.radar.doppler_bins {
            if dataset.radar.column_observable(j, speed) {
                out.push(ColumnRef { frame: f, doppler: j });
            }
        }
    }
    out
}

/// Shuffles the observable columns of `frames` with `seed` and cuts them
/// into batches; the last batch may be short.
pub fn make_batches(dataset: &Dataset, frames: &[usize], batch_size: usize, seed: u64) -> Result<Vec<Vec<ColumnRef>>> {
    if batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let mut cols = observable_columns(dataset, frames);
    if cols.is_empty() {
        return Err(Error::Empty("no observable columns in the training frames".into()));
    }
    cols.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(cols.chunks(batch_size).map(|c| c.to_vec()).collect())
}

/// Ray seed of a column at a given step.
pub fn training_ray_seed(seed: u64, step: u64, column: ColumnRef) -> u64 {
    column_seed(column_seed(seed ^ step.wrapping_mul(0xA076_1D64_78BD_642F), column.frame), column.doppler)
}

#[derive(Debug, Clone)]
pub struct TrainState<F> {
    pub field: F,
    pub adam: Adam,
    pub step: u64,
    pub threshold: f64,
    pub losses: Vec<f64>,
}

impl<F: TrainableField> TrainState<F> {
    pub fn new(field: F, config: &TrainConfig) -> Self {
        let adam = Adam::new(field.num_params(), config.learning_rate, config.adam_betas, config.adam_eps);
        Self {
            field,
            adam,
            step: 0,
            threshold: config.anneal.threshold(0),
            losses: Vec::new(),
        }
    }
}

/// Renders, differentiates and updates on one batch; returns the mean
/// per-column l1 loss.
pub fn train_step<F>(state: &mut TrainState<F>, dataset: &Dataset, batch: &[ColumnRef], config: &TrainConfig) -> Result<f64>
where
    F: TrainableField + Sync,
    F::Tape: Send,
{
    let rays = config.rays_per_column.unwrap_or(dataset.radar.rays_per_column);
    let clip = config.anneal.threshold(state.step);
    state.threshold = clip;
    let n = state.field.num_params();
    let field = &state.field;
    let step = state.step;
    let scale = 1.0 / batch.len() as f64;
    let (grad, loss, bad) = batch
        .par_iter()
        .fold(
            || (vec![0.0; n], 0.0, Vec::new()),
            |(mut grad, mut loss, mut bad), c| {
                let frame = &dataset.frames[c.frame];
                let geom = column_geometry(
                    &frame.pose,
                    &dataset.radar,
                    &dataset.antenna,
                    c.doppler,
                    rays,
                    training_ray_seed(config.seed, step, *c),
                );
                let (pred, tape) = render_column_taped(field, &geom, clip);
                let target = frame.column(c.doppler);
                let entries = pred.len() as f64;
                let l: f64 = pred.iter().zip(&target).map(|(p, t)| (p - t).abs()).sum::<f64>() / entries;
                if !l.is_finite() {
                    bad.push(*c);
                    return (grad, loss, bad);
                }
                loss += l * scale;
                let d_out: Vec<f64> = pred
                    .iter()
                    .zip(&target)
                    .map(|(p, t)| {
                        let d = p - t;
                        if d > 0.0 {
                            scale / entries
                        } else if d < 0.0 {
                            -scale / entries
                        } else {
                            0.0
                        }
                    })
                    .collect();
                crate::renderer::render_column_backward(field, &geom, &tape, &d_out, AlphaGradRule::Configured, &mut grad);
                (grad, loss, bad)
            },
        )
        .reduce(
            || (vec![0.0; n], 0.0, Vec::new()),
            |(mut ga, la, mut ba), (gb, lb, bb)| {
                ga.iter_mut().zip(&gb).for_each(|(a, b)| *a += b);
                ba.extend(bb);
                (ga, la + lb, ba)
            },
        );
    if !bad.is_empty() || !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        let cols: Vec<String> = bad.iter().map(|c| format!("({}, {})", c.frame, c.doppler)).collect();
        return Err(Error::NumericalAbort {
            step: state.step,
            columns: if cols.is_empty() { "gradient".into() } else { cols.join(", ") },
        });
    }
    state.adam.update(state.field.params_mut(), &grad);
    state.step += 1;
    state.threshold = config.anneal.threshold(state.step);
    state.losses.push(loss);
    Ok(loss)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: u64,
    pub loss: f64,
    pub threshold: f64,
    pub wall_time: f64,
}

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const OPTIMIZER_FILE: &str = "optimizer.bin";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";

pub struct FitReport {
    pub field: ImplicitField,
    pub steps: u64,
    pub log: Vec<LogRow>,
    /// Mean scaled SSIM over the holdout frames with a defined score.
    pub holdout_ssim: Option<f64>,
    pub holdout_scores: Vec<f64>,
    /// Valid holdout frames, in order.
    pub holdout_frames: Vec<usize>,
    /// Score of each of `holdout_frames`; `None` where undefined.
    pub holdout_per_frame: Vec<Option<f64>>,
    pub checkpoint: Option<PathBuf>,
}

fn write_log(path: &Path, rows: &[LogRow]) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    writeln!(w, "step,loss,threshold,wall_time").map_err(io)?;
    for r in rows {
        writeln!(w, "{},{},{},{}", r.step, r.loss, r.threshold, r.wall_time).map_err(io)?;
    }
    w.flush().map_err(io)
}

fn read_log(path: &Path) -> Result<Vec<LogRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let bad = || Error::Format(format!("malformed log line {line:?} in {}", path.display()));
        if f.len() != 4 {
            return Err(bad());
        }
        rows.push(LogRow {
            step: f[0].parse().map_err(|_| bad())?,
            loss: f[1].parse().map_err(|_| bad())?,
            threshold: f[2].parse().map_err(|_| bad())?,
            wall_time: f[3].parse().map_err(|_| bad())?,
        });
    }
    Ok(rows)
}

/// Renders `frames` of `dataset` with `field` at the radar's ray count.
pub fn render_frames(field: &ImplicitField, dataset: &Dataset, frames: &[usize], clip: f64, seed: u64) -> Vec<RangeDopplerFrame> {
    frames
        .iter()
        .map(|&i| render_frame(field, &dataset.frames[i].pose, &dataset.radar, &dataset.antenna, clip, column_seed(seed, i)))
        .collect()
}

/// Per-frame scaled SSIM of `predictions` against the valid holdout targets;
/// frames without a defined score are dropped.
pub fn score_frames(predictions: &[RangeDopplerFrame], targets: &[&RangeDopplerFrame], ssim: &SsimConfig) -> Vec<Option<f64>> {
    let owned: Vec<RangeDopplerFrame> = targets.iter().map(|t| (*t).clone()).collect();
    let mask = empty_mask(&owned, ssim);
    predictions
        .par_iter()
        .zip(targets.par_iter())
        .map(|(p, t)| scaled_ssim(p, t, Some(&mask), ssim))
        .collect()
}

/// Trains for `config.epochs` epochs, writing the checkpoint and loss log
/// into `out_dir` when given. With `resume`, a checkpoint, optimizer state
/// and log found in `out_dir` are restored and already completed steps are
/// skipped.
pub fn fit(
    dataset: &Dataset,
    config: &TrainConfig,
    field_config: &ImplicitFieldConfig,
    out_dir: Option<&Path>,
    resume: bool,
) -> Result<FitReport> {
    config.validate()?;
    dataset.radar.validate()?;
    let (train, holdout) = dataset.split_indices(config.holdout_fraction);
    let batches_per_epoch: Vec<Vec<Vec<ColumnRef>>> = (0..config.epochs)
        .map(|e| make_batches(dataset, &train, config.batch_size, column_seed(config.seed, e)))
        .collect::<Result<_>>()?;
    let mut state = TrainState::new(ImplicitField::new(field_config.clone())?, config);
    let mut log = Vec::new();
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let ckpt = dir.join(CHECKPOINT_FILE);
        if resume && ckpt.exists() {
            let (field, step) = load_checkpoint(&ckpt)?;
            if field.config() != field_config {
                return Err(Error::invalid("checkpoint was trained with a different field configuration"));
            }
            state = TrainState::new(field, config);
            state.step = step;
            let opt = dir.join(OPTIMIZER_FILE);
            if opt.exists() {
                state.adam.load(&opt)?;
            }
            let lp = dir.join(TRAIN_LOG_FILE);
            if lp.exists() {
                log = read_log(&lp)?;
                log.retain(|r| r.step < step);
            }
            log::info!("resumed from step {step}");
        }
    }
    let save = |state: &TrainState<ImplicitField>, log: &[LogRow]| -> Result<Option<PathBuf>> {
        let Some(dir) = out_dir else { return Ok(None) };
        let ckpt = dir.join(CHECKPOINT_FILE);
        save_checkpoint(&ckpt, &state.field, state.step)?;
        state.adam.save(&dir.join(OPTIMIZER_FILE))?;
        write_log(&dir.join(TRAIN_LOG_FILE), log)?;
        Ok(Some(ckpt))
    };
    let start = Instant::now();
    let offset = log.last().map_or(0.0, |r: &LogRow| r.wall_time);
    let mut global = 0u64;
    for (epoch, batches) in batches_per_epoch.iter().enumerate() {
        for batch in batches {
            if global < state.step {
                global += 1;
                continue;
            }
            let threshold = config.anneal.threshold(state.step);
            let loss = train_step(&mut state, dataset, batch, config)?;
            log.push(LogRow {
                step: state.step - 1,
                loss,
                threshold,
                wall_time: offset + start.elapsed().as_secs_f64(),
            });
            global += 1;
            if state.step % 10 == 0 {
                log::info!("epoch {epoch} step {} loss {loss:.6e}", state.step);
            }
            if config.checkpoint_every > 0 && state.step % config.checkpoint_every == 0 {
                save(&state, &log)?;
            }
        }
    }
    let checkpoint = save(&state, &log)?;
    let valid: Vec<usize> = holdout.into_iter().filter(|&i| dataset.frames[i].valid).collect();
    let final_clip = config.anneal.threshold(state.step);
    let preds = render_frames(&state.field, dataset, &valid, final_clip, config.seed);
    let targets: Vec<&RangeDopplerFrame> = valid.iter().map(|&i| &dataset.frames[i]).collect();
    let per_frame = score_frames(&preds, &targets, &SsimConfig::default());
    let scores: Vec<f64> = per_frame.iter().flatten().copied().collect();
    let holdout_ssim = (!scores.is_empty()).then(|| scores.iter().sum::<f64>() / scores.len() as f64);
    Ok(FitReport {
        field: state.field,
        steps: state.step,
        log,
        holdout_ssim,
        holdout_scores: scores,
        holdout_frames: valid,
        holdout_per_frame: per_frame,
        checkpoint,
    })
}
