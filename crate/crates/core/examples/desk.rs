//! Bakes the five-box scene, fits a field to it and reports holdout SSIM.
//!
//! `cargo run --release --example desk [frames]`

use std::time::Instant;

use dopplerfield::field::{HashEncoderConfig, ImplicitFieldConfig};
use dopplerfield::poses::{synth_trajectory, TrajectorySpec};
use dopplerfield::renderer::{AntennaModel, RadarConfig};
use dopplerfield::scenes::{bake_dataset, five_box_scene};
use dopplerfield::trainer::{fit, TrainConfig};

fn main() -> dopplerfield::Result<()> {
    let frames: usize = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(2000);
    let spec = five_box_scene();
    let scene = spec.build()?;
    let radar = RadarConfig {
        range_bins: 32,
        range_resolution: 0.1,
        doppler_bins: 64,
        doppler_resolution: 0.95 / 32.0,
        antennas: 8,
        rays_per_column: 128,
        ..Default::default()
    };
    let mut tspec = TrajectorySpec::around(spec.bounds);
    tspec.duration = frames as f64 * tspec.period;
    let trajectory = synth_trajectory(&tspec, 1)?;

    let t = Instant::now();
    let dataset = bake_dataset(&scene, Some(&spec), &trajectory, &radar, &AntennaModel::uniform(8), 7)?;
    println!("baked {} frames in {:.1}s", dataset.len(), t.elapsed().as_secs_f64());

    let field = ImplicitFieldConfig {
        encoder: HashEncoderConfig {
            levels: 8,
            features_per_level: 2,
            table_size: 1 << 18,
            coarsest_resolution: 0.5,
            growth_factor: 1.5,
            bounds: spec.bounds,
        },
        hidden: vec![64, 32],
        ..Default::default()
    };
    let train = TrainConfig {
        batch_size: 128,
        rays_per_column: Some(16),
        ..Default::default()
    };
    let t = Instant::now();
    let report = fit(&dataset, &train, &field, None, false)?;
    println!("{} steps in {:.1}s", report.steps, t.elapsed().as_secs_f64());
    for row in report.log.iter().step_by((report.log.len() / 10).max(1)) {
        println!("  step {:>5}  loss {:.4e}  clip {:+.3}", row.step, row.loss, row.threshold);
    }
    match report.holdout_ssim {
        Some(s) => println!("holdout SSIM {s:.4} over {} frames", report.holdout_frames.len()),
        None => println!("no scorable holdout frames"),
    }
    Ok(())
}
