use std::path::Path;

use dopplerfield::baselines::{cfar_predictions, lidar_predictions, nearest_predictions, valid_frames};
use dopplerfield::datasets::{read_dataset, write_dataset, Dataset, Provenance};
use dopplerfield::evalmetrics::{empty_mask, noise_reference_ssim, scaled_ssim, summarize, EvalReport};
use dopplerfield::field::checkpoint::load_checkpoint;
use dopplerfield::field::{mean_field_grid, Field, ImplicitField};
use dopplerfield::geometry::{Aabb, Pose, Vec3};
use dopplerfield::poses::{read_trajectory, synth_trajectory, Trajectory, TrajectorySpec};
use dopplerfield::renderer::{column_seed, render_frame, AntennaModel, RangeDopplerFrame};
use dopplerfield::scenes::{bake_dataset, five_box_scene, SceneSpec};
use dopplerfield::sigproc::{process_cube, read_iq, rolling_offsets, synthesize_iq_stream, PointTarget};
use dopplerfield::trainer::fit;
use nalgebra::UnitQuaternion;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::RunConfig;
use crate::export::{write_f32, write_frame_png, write_gray_png, write_text};
use crate::{Axis, BakeArgs, Baseline, CliError, DspArgs, RenderArgs, TomoArgs, TrainArgs};

const RENDER_SEED_SALT: u64 = 0x5EED_0F_2E4D;

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::usage(e.to_string()))?;
    write_text(path, &text)
}

fn trajectory_spec(cfg: &RunConfig, bounds: &Aabb) -> TrajectorySpec {
    let mut spec = TrajectorySpec::around(*bounds);
    let e = bounds.extent();
    spec.radius = cfg.trajectory.radius_fraction * e.x.min(e.y);
    spec.speed = cfg.trajectory.speed;
    spec.period = cfg.trajectory.period;
    spec.duration = cfg.trajectory.frames as f64 * cfg.trajectory.period;
    spec
}

pub fn bake(cfg: &mut RunConfig, a: &BakeArgs) -> Result<(), CliError> {
    if let Some(f) = a.frames {
        cfg.trajectory.frames = f;
    }
    let spec = match &a.scene {
        Some(p) => SceneSpec::from_json_file(p)?,
        None => five_box_scene(),
    };
    let scene = spec.build()?;
    let traj = synth_trajectory(&trajectory_spec(cfg, &spec.bounds), cfg.seed)?;
    let ds = bake_dataset(&scene, Some(&spec), &traj, &cfg.radar, &cfg.antenna(), cfg.seed)?;
    write_dataset(&ds, None, &a.out)?;
    spec.write_json(&a.out.join("scene.json"))?;
    cfg.echo(&a.out)?;
    let valid = ds.frames.iter().filter(|f| f.valid).count();
    println!("wrote {} frames ({valid} valid) to {}", ds.len(), a.out.display());
    Ok(())
}

pub fn dsp(cfg: &mut RunConfig, a: &DspArgs) -> Result<(), CliError> {
    let (stream, mut chirp) = match (&a.iq, &a.targets) {
        (Some(p), _) => read_iq(p)?,
        (None, Some(t)) => {
            let text = std::fs::read_to_string(t).map_err(|e| CliError::usage(format!("cannot read {}: {e}", t.display())))?;
            let targets: Vec<PointTarget> = serde_json::from_str(&text)
                .map_err(|e| CliError::usage(format!("invalid target list {}: {e}", t.display())))?;
            let mut chirp = cfg.chirp.clone();
            if let Some(s) = a.stride {
                chirp.frame_stride = s;
            }
            let n = a.chirps.unwrap_or(chirp.chirps_per_frame + 4 * chirp.frame_stride);
            (synthesize_iq_stream(&targets, &chirp, n)?, chirp)
        }
        (None, None) => return Err(CliError::usage("dsp needs --iq or --targets")),
    };
    if let Some(s) = a.stride {
        chirp.frame_stride = s;
    }
    chirp.validate()?;
    let mut offsets = rolling_offsets(stream.chirps, &chirp);
    if let Some(n) = a.frames {
        offsets.truncate(n);
    }
    if offsets.is_empty() {
        return Err(dopplerfield::Error::Empty(format!(
            "{} chirps do not fill one {}-chirp frame",
            stream.chirps, chirp.chirps_per_frame
        ))
        .into());
    }
    let traj = a.trajectory.as_deref().map(read_trajectory).transpose()?;
    let half = chirp.chirps_per_frame / 2;
    let poses: Vec<Pose> = offsets
        .iter()
        .map(|o| {
            let t = (o + half) as f64 * chirp.inter_chirp_period;
            match &traj {
                Some(tr) => tr.interpolate(t).ok_or_else(|| {
                    CliError::from(dopplerfield::Error::Validation {
                        path: a.trajectory.clone().unwrap_or_default(),
                        message: format!("trajectory does not cover frame time {t}"),
                    })
                }),
                None => Ok(Pose::from_quaternion(Vec3::zeros(), UnitQuaternion::identity(), Vec3::zeros(), t)),
            }
        })
        .collect::<Result<_, _>>()?;
    let frames: Vec<RangeDopplerFrame> = offsets
        .par_iter()
        .zip(&poses)
        .map(|(o, p)| process_cube(&stream.slice_chirps(*o, chirp.chirps_per_frame), &chirp, *p))
        .collect::<Result<_, _>>()?;
    let period = chirp.frame_stride as f64 * chirp.inter_chirp_period;
    let mut trajectory = Trajectory::new(poses, period)?;
    for (v, f) in trajectory.valid.iter_mut().zip(&frames) {
        *v = f.valid;
    }
    let ds = Dataset {
        radar: chirp.radar_config(),
        antenna: AntennaModel::uniform(chirp.channels),
        trajectory,
        frames,
        provenance: Provenance {
            source: "dsp".into(),
            seed: a.targets.as_ref().map(|_| cfg.seed),
            scene: None,
            extra: Default::default(),
        },
    };
    write_dataset(&ds, Some(&chirp), &a.out)?;
    cfg.chirp = chirp;
    cfg.echo(&a.out)?;
    println!("wrote {} frames to {}", ds.len(), a.out.display());
    Ok(())
}

#[derive(Serialize)]
struct HoldoutReport {
    steps: u64,
    frames_scored: usize,
    mean_ssim: Option<f64>,
    se: Option<f64>,
    n_eff: Option<f64>,
}

pub fn train(cfg: &mut RunConfig, a: &TrainArgs) -> Result<(), CliError> {
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(l) = a.learning_rate {
        cfg.train.learning_rate = l;
    }
    if let Some(b) = a.batch_size {
        cfg.train.batch_size = b;
    }
    cfg.train.seed = cfg.seed;
    let ds = read_dataset(&a.dataset)?.load()?;
    cfg.radar = ds.radar.clone();
    cfg.echo(&a.out)?;
    let report = fit(&ds, &cfg.train, &cfg.field, Some(&a.out), a.resume)?;
    let summary = (report.holdout_scores.len() >= 4)
        .then(|| summarize(&report.holdout_scores))
        .transpose()?;
    let holdout = HoldoutReport {
        steps: report.steps,
        frames_scored: report.holdout_scores.len(),
        mean_ssim: report.holdout_ssim,
        se: summary.as_ref().map(|s| s.se),
        n_eff: summary.as_ref().map(|s| s.n_eff),
    };
    write_json(&a.out.join("holdout.json"), &holdout)?;
    match (holdout.mean_ssim, holdout.se) {
        (Some(m), Some(se)) => println!("steps {} holdout SSIM {m:.4} +- {se:.4}", report.steps),
        (Some(m), None) => println!("steps {} holdout SSIM {m:.4}", report.steps),
        _ => println!("steps {} (no holdout frame could be scored)", report.steps),
    }
    Ok(())
}

/// Parses `0,3,10-12` into indices.
pub fn parse_indices(text: &str, len: usize) -> Result<Vec<usize>, CliError> {
    let bad = || CliError::usage(format!("invalid frame list {text:?}"));
    let mut out = Vec::new();
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        if let Some((a, b)) = part.split_once('-') {
            let (a, b): (usize, usize) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
            if a > b {
                return Err(bad());
            }
            out.extend(a..=b);
        } else {
            out.push(part.parse().map_err(|_| bad())?);
        }
    }
    if let Some(&i) = out.iter().find(|&&i| i >= len) {
        return Err(dopplerfield::Error::IndexOutOfRange { index: i, len }.into());
    }
    Ok(out)
}

fn render_learned(field: &ImplicitField, step: u64, cfg: &RunConfig, ds: &Dataset, frames: &[usize]) -> Vec<RangeDopplerFrame> {
    let clip = cfg.train.anneal.threshold(step);
    frames
        .iter()
        .map(|&i| render_frame(field, &ds.frames[i].pose, &ds.radar, &ds.antenna, clip, column_seed(cfg.seed ^ RENDER_SEED_SALT, i)))
        .collect()
}

pub fn render(cfg: &mut RunConfig, a: &RenderArgs) -> Result<(), CliError> {
    let (field, step) = load_checkpoint(&a.checkpoint)?;
    let ds = read_dataset(&a.dataset)?.load()?;
    let frames = match &a.frames {
        Some(t) => parse_indices(t, ds.len())?,
        None => ds.split_indices(cfg.train.holdout_fraction).1,
    };
    std::fs::create_dir_all(&a.out).map_err(|e| CliError::usage(format!("cannot create {}: {e}", a.out.display())))?;
    let rendered = render_learned(&field, step, cfg, &ds, &frames);
    for (i, f) in frames.iter().zip(&rendered) {
        write_frame_png(&a.out.join(format!("frame_{i:05}.png")), f)?;
    }
    write_f32(&a.out.join("rendered.f32"), rendered.iter().flat_map(|f| f.values.iter().map(|v| *v as f64)))?;
    write_json(&a.out.join("rendered.json"), &serde_json::json!({
        "frames": frames,
        "frame_shape": [ds.radar.antennas, ds.radar.range_bins, ds.radar.doppler_bins],
        "checkpoint_step": step,
    }))?;
    cfg.echo(&a.out)?;
    println!("rendered {} frames into {}", frames.len(), a.out.display());
    Ok(())
}

pub fn eval(
    cfg: &mut RunConfig,
    dataset: &Path,
    checkpoint: Option<&Path>,
    baselines: &[Baseline],
    out: &Path,
) -> Result<(), CliError> {
    if checkpoint.is_none() && baselines.len() < 2 {
        return Err(CliError::usage("comparing baselines needs at least two of them"));
    }
    let ds = read_dataset(dataset)?.load()?;
    let scene_spec = ds.provenance.scene.clone();
    if baselines.contains(&Baseline::Lidar) && scene_spec.is_none() {
        return Err(CliError::usage(
            "the lidar baseline needs an occupancy grid, which is only available for datasets baked from a scene",
        ));
    }
    let (train, holdout) = ds.split_indices(cfg.train.holdout_fraction);
    let train = valid_frames(&ds, &train);
    let holdout = valid_frames(&ds, &holdout);
    if holdout.len() < 4 || train.is_empty() {
        return Err(dopplerfield::Error::Empty("too few valid training or holdout frames to evaluate".into()).into());
    }
    let targets: Vec<RangeDopplerFrame> = holdout.iter().map(|&i| ds.frames[i].clone()).collect();
    let mask = empty_mask(&targets, &cfg.ssim);
    let score = |preds: &[RangeDopplerFrame]| -> Vec<Option<f64>> {
        preds
            .par_iter()
            .zip(targets.par_iter())
            .map(|(p, t)| scaled_ssim(p, t, Some(&mask), &cfg.ssim))
            .collect()
    };
    let mut methods = Vec::new();
    if let Some(ckpt) = checkpoint {
        let (field, step) = load_checkpoint(ckpt)?;
        methods.push(("learned".to_string(), score(&render_learned(&field, step, cfg, &ds, &holdout))));
    }
    let seed = cfg.seed ^ RENDER_SEED_SALT;
    for b in baselines {
        let preds = match b {
            Baseline::Lidar => {
                let scene = scene_spec.as_ref().expect("checked above").build()?;
                lidar_predictions(&ds, &scene, cfg.occupancy_resolution, &holdout, seed)?
            }
            Baseline::Nearest => nearest_predictions(&ds, &train, &holdout, &cfg.neighbor)?,
            Baseline::Cfar => {
                let bounds = match &scene_spec {
                    Some(s) => s.bounds,
                    None => ds
                        .trajectory
                        .bounds()
                        .ok_or_else(|| dopplerfield::Error::Empty("trajectory".into()))?
                        .inflate(ds.radar.max_range()),
                };
                let (map, preds) = cfar_predictions(&ds, &train, &holdout, &bounds, &cfg.cfar, seed)?;
                std::fs::create_dir_all(out).map_err(|e| CliError::usage(format!("cannot create {}: {e}", out.display())))?;
                map.cloud.write_text(&out.join("cfar_points.txt"))?;
                map.scene.write_grid_dump(&out.join("cfar_grid.f32"))?;
                preds
            }
        };
        methods.push((b.name().to_string(), score(&preds)));
    }
    let mut report = EvalReport::build(&holdout, methods, 0)?;
    report.noise_references = noise_reference_ssim(&targets, &cfg.noise_psnr_db, Some(&mask), &cfg.ssim, cfg.seed)?;
    cfg.echo(out)?;
    write_text(&out.join("per_frame.csv"), &report.per_frame_csv())?;
    write_text(&out.join("summary.csv"), &report.summary_csv())?;
    write_json(&out.join("report.json"), &report)?;
    println!("{:<10} {:>8} {:>8} {:>8} {:>10}", "method", "ssim", "se", "n_eff", format!("p vs {}", report.reference));
    for m in &report.methods {
        let p = m.vs_reference.map_or("-".to_string(), |t| format!("{:.3e}", t.p));
        println!("{:<10} {:>8.4} {:>8.4} {:>8.1} {:>10}", m.name, m.summary.mean, m.summary.se, m.summary.n_eff, p);
    }
    for (db, v) in &report.noise_references {
        println!("{:<10} {:>8.4}", format!("{db}dB"), v);
    }
    Ok(())
}

pub fn tomo(cfg: &mut RunConfig, a: &TomoArgs) -> Result<(), CliError> {
    let (field, step) = load_checkpoint(&a.checkpoint)?;
    let clip = cfg.train.anneal.threshold(step);
    let bounds = field.config().encoder.bounds;
    if !(a.resolution > 0.0) {
        return Err(CliError::usage("slice resolution must be positive"));
    }
    let n = match a.axis {
        Axis::X => 0,
        Axis::Y => 1,
        Axis::Z => 2,
    };
    if a.at < bounds.min[n] || a.at > bounds.max[n] {
        return Err(CliError::usage(format!(
            "slice coordinate {} lies outside the field bounds [{}, {}]",
            a.at, bounds.min[n], bounds.max[n]
        )));
    }
    let (u, v) = match n {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    let e = bounds.extent();
    let (nu, nv) = (((e[u] / a.resolution).round() as usize).max(1), ((e[v] / a.resolution).round() as usize).max(1));
    // Image rows run from high v (top) to low v.
    let rows: Vec<Vec<(f64, f64)>> = (0..nv)
        .into_par_iter()
        .map(|r| {
            let pts: Vec<Vec3> = (0..nu)
                .map(|c| {
                    let mut p = Vec3::zeros();
                    p[n] = a.at;
                    p[u] = bounds.min[u] + (c as f64 + 0.5) * a.resolution;
                    p[v] = bounds.max[v] - (r as f64 + 0.5) * a.resolution;
                    p
                })
                .collect();
            field.mean_field(&pts, clip)
        })
        .collect();
    let vals: Vec<(f64, f64)> = rows.into_iter().flatten().collect();
    let refl: Vec<f64> = vals.iter().map(|x| x.0).collect();
    let trans: Vec<f64> = vals.iter().map(|x| x.1).collect();
    std::fs::create_dir_all(&a.out).map_err(|e| CliError::usage(format!("cannot create {}: {e}", a.out.display())))?;
    let hi = refl.iter().cloned().fold(0.0, f64::max);
    write_gray_png(&a.out.join("reflectance.png"), nu, nv, &refl, 0.0, hi)?;
    write_gray_png(&a.out.join("transmittance.png"), nu, nv, &trans, 0.0, 1.0)?;
    write_f32(&a.out.join("slice.f32"), refl.iter().chain(&trans).copied())?;
    write_json(&a.out.join("slice.json"), &serde_json::json!({
        "axis": (["x", "y", "z"][n]),
        "at": a.at,
        "resolution": a.resolution,
        "width": nu,
        "height": nv,
        "channels": ["reflectance", "transmittance"],
        "layout": "channel-major, rows from high to low coordinate",
        "bounds": bounds,
    }))?;
    if a.volume {
        let grid = mean_field_grid(&field, a.resolution, &bounds, clip)?;
        write_f32(&a.out.join("volume.f32"), grid.reflectance.iter().chain(&grid.transmittance).copied())?;
        write_json(&a.out.join("volume.json"), &serde_json::json!({
            "dims": grid.dims,
            "resolution": grid.resolution,
            "bounds": grid.bounds,
            "channels": ["reflectance", "transmittance"],
            "layout": "channel-major, x fastest",
        }))?;
    }
    cfg.echo(&a.out)?;
    println!("slice {}x{} at {}={} written to {}", nu, nv, ["x", "y", "z"][n], a.at, a.out.display());
    Ok(())
}
