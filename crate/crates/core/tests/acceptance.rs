//! Acceptance criteria. Each test prints one `[PASS]`/`[FAIL]` line to
//! stderr (bypassing output capture) and asserts on the same condition.

use std::f64::consts::PI;
use std::io::Write;
use std::sync::OnceLock;
use std::time::Instant;

use dopplerfield::baselines::{
    cfar_detect_image, cfar_predictions, lidar_predictions, nearest_predictions, CfarConfig, NeighborWeights,
    DEFAULT_OCCUPANCY_RESOLUTION,
};
use dopplerfield::datasets::Dataset;
use dopplerfield::diffengine::{finite_difference_check, Program, Registry, RenderColumnOp};
use dopplerfield::evalmetrics::{
    effective_sample_size, empty_mask, noise_reference_ssim, scaled_ssim, EvalReport, SsimConfig,
};
use dopplerfield::field::quadrature::product_rule;
use dopplerfield::field::sh::{sh_evaluate, view_factor, SH_COEFFS};
use dopplerfield::field::{Field, HashEncoderConfig, ImplicitField, ImplicitFieldConfig, TrainableField};
use dopplerfield::geometry::{arc_for_bin, forward_axis, Aabb, Mat3, Pose, Vec3};
use dopplerfield::poses::{
    filter_acceleration_spikes, filter_speed_window, look_rotation, synth_trajectory, Trajectory, TrajectorySpec,
};
use dopplerfield::renderer::{
    column_geometry, column_seed, render_column, render_frame, AntennaModel, CountingField, RadarConfig,
    RangeDopplerFrame,
};
use dopplerfield::scenes::{bake_dataset, five_box_scene, MaterialPreset, SceneSpec, VoxelScene};
use dopplerfield::sigproc::{hann, process_cube, rolling_offsets, synthesize_iq, ChirpConfig, PointTarget};
use dopplerfield::trainer::{fit, FitReport, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use rayon::prelude::*;

fn verdict(id: u32, name: &str, pass: bool, detail: String) {
    let line = format!("[{}] {id:>2} {name}: {detail}\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(pass, "criterion {id} ({name}) failed: {detail}");
}

fn random_unit(rng: &mut impl Rng) -> Vec3 {
    loop {
        let v = Vec3::new(
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        );
        let n = v.norm();
        if n > 1e-6 {
            return v / n;
        }
    }
}

/// Orthonormal pair spanning the plane orthogonal to `axis`, built without
/// reference to any sensor axis.
fn ring_basis(axis: &Vec3) -> (Vec3, Vec3) {
    let seed = if axis.z.abs() < 0.9 { Vec3::z() } else { Vec3::x() };
    let e1 = seed.cross(axis).normalize();
    let e2 = axis.cross(&e1);
    (e1, e2)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ArcClass {
    Empty,
    Partial,
    Full,
}

#[test]
fn c01_arc_extent_matches_monte_carlo_ring_fraction() {
    const TRIPLES: usize = 1000;
    const SAMPLES: usize = 100_000;
    let start = Instant::now();
    let fwd = forward_axis();
    let results: Vec<(ArcClass, ArcClass, f64)> = (0..TRIPLES)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(column_seed(1, t));
            let speed = rng.gen_range(0.1..2.0);
            // A few velocities exactly along the boresight exercise the
            // degenerate basis.
            let v_hat = if t % 25 == 0 {
                Vec3::x() * if t % 50 == 0 { 1.0 } else { -1.0 }
            } else {
                random_unit(&mut rng)
            };
            let v = v_hat * speed;
            let d = rng.gen_range(-1.2..1.2) * speed;
            let r = rng.gen_range(0.05..10.0);
            let spec = arc_for_bin(r, d, &v, &fwd).unwrap();
            let lib = if spec.empty {
                ArcClass::Empty
            } else if spec.half_angle >= PI {
                ArcClass::Full
            } else {
                ArcClass::Partial
            };
            let p = if spec.empty { 0.0 } else { spec.half_angle / PI };
            if d.abs() > speed {
                return (lib, ArcClass::Empty, 0.0);
            }
            let c = d / speed;
            let s = (1.0 - c * c).sqrt();
            let (e1, e2) = ring_basis(&v_hat);
            let mut hits = 0usize;
            for _ in 0..SAMPLES {
                let phi = rng.gen_range(0.0..std::f64::consts::TAU);
                let (sn, cs) = phi.sin_cos();
                let w = v_hat * c + (e1 * cs + e2 * sn) * s;
                if w.dot(&fwd) > 0.0 {
                    hits += 1;
                }
            }
            let brute = match hits {
                0 => ArcClass::Empty,
                h if h == SAMPLES => ArcClass::Full,
                _ => ArcClass::Partial,
            };
            let sigma = (p * (1.0 - p) / SAMPLES as f64).sqrt();
            let dev = (hits as f64 / SAMPLES as f64 - p).abs();
            let z = if sigma > 0.0 {
                dev / sigma
            } else if dev == 0.0 {
                0.0
            } else {
                f64::INFINITY
            };
            (lib, brute, z)
        })
        .collect();
    let mismatched = results.iter().filter(|(a, b, _)| a != b).count();
    let partial: Vec<f64> = results.iter().filter(|(a, _, _)| *a == ArcClass::Partial).map(|r| r.2).collect();
    let beyond3 = results.iter().filter(|r| r.2 > 3.0).count();
    let worst = results.iter().map(|r| r.2).fold(0.0, f64::max);
    let count = |c: ArcClass| results.iter().filter(|r| r.1 == c).count();
    let secs = start.elapsed().as_secs_f64();
    // Under the null each partial triple exceeds 3 sigma with probability
    // 0.0027; more than 9 of ~600 has probability below 1e-3.
    let pass = mismatched == 0 && beyond3 <= 9 && worst < 5.0 && secs < 60.0;
    verdict(
        1,
        "geometry oracle",
        pass,
        format!(
            "{TRIPLES} triples ({} empty, {} partial, {} full), class mismatches {mismatched}, \
             beyond 3 sigma {beyond3}/{}, worst {worst:.2} sigma, {secs:.1}s",
            count(ArcClass::Empty),
            count(ArcClass::Partial),
            count(ArcClass::Full),
            partial.len()
        ),
    );
}

#[test]
fn c02_sh_basis_is_orthonormal_and_reflectance_norm_is_sigma_bar() {
    let rule = product_rule(24, 48);
    let ys: Vec<([f64; SH_COEFFS], f64)> = rule.iter().map(|(w, wt)| (sh_evaluate(w), *wt)).collect();
    let mut gram_err: f64 = 0.0;
    for i in 0..SH_COEFFS {
        for j in 0..SH_COEFFS {
            let g: f64 = ys.iter().map(|(y, wt)| wt * y[i] * y[j]).sum();
            let want = if i == j { 1.0 } else { 0.0 };
            gram_err = gram_err.max((g - want).abs());
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut norm_err: f64 = 0.0;
    for _ in 0..100 {
        let c: Vec<f64> = (0..SH_COEFFS).map(|_| StandardNormal.sample(&mut rng)).collect();
        let sigma_bar: f64 = rng.gen_range(-3.0..3.0);
        let l2 = ys
            .iter()
            .map(|(y, wt)| {
                let s = sigma_bar * view_factor(y, &c);
                wt * s * s
            })
            .sum::<f64>()
            .sqrt();
        norm_err = norm_err.max((l2 - sigma_bar.abs()).abs() / sigma_bar.abs());
    }
    verdict(
        2,
        "SH orthonormality",
        gram_err < 1e-9 && norm_err < 1e-6,
        format!("max |G - I| = {gram_err:.2e} (< 1e-9), max relative L2 error = {norm_err:.2e} (< 1e-6)"),
    );
}

fn tiny_radar() -> RadarConfig {
    RadarConfig {
        range_bins: 8,
        range_resolution: 0.1,
        doppler_bins: 16,
        doppler_resolution: 0.06,
        antennas: 2,
        rays_per_column: 4,
        ..Default::default()
    }
}

#[test]
fn c03_render_and_loss_gradients_match_central_differences() {
    const SCENES: u64 = 20;
    let start = Instant::now();
    let radar = tiny_radar();
    let antenna = AntennaModel::uniform(radar.antennas);
    let mut worst: f64 = 0.0;
    let mut checked = 0usize;
    let mut custom = 0usize;
    let mut failures = Vec::new();
    for s in 0..SCENES {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + s);
        let cfg = ImplicitFieldConfig {
            encoder: HashEncoderConfig {
                levels: 2,
                features_per_level: 2,
                table_size: 1 << 6,
                coarsest_resolution: 0.5,
                growth_factor: 2.0,
                bounds: Aabb::new([-1.0; 3], [1.0; 3]).unwrap(),
            },
            hidden: vec![8],
            seed: s,
            ..Default::default()
        };
        let mut field = ImplicitField::new(cfg).unwrap();
        let table = field.encoder().num_params();
        for p in &mut field.params_mut()[..table] {
            *p = rng.gen_range(-1.0..1.0);
        }
        let position = Vec3::new(rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3));
        let orientation = *nalgebra::Rotation3::new(random_unit(&mut rng) * rng.gen_range(0.0..PI)).matrix();
        let velocity = random_unit(&mut rng) * rng.gen_range(0.3..0.9);
        let pose = Pose::new(position, orientation, velocity, 0.0).unwrap();
        let geometry = loop {
            let j = rng.gen_range(0..radar.doppler_bins);
            let g = column_geometry(&pose, &radar, &antenna, j, radar.rays_per_column, s);
            if g.rays() > 0 {
                break g;
            }
        };
        let pred = render_column(&field, &geometry, f64::NEG_INFINITY);
        let scale = pred.iter().map(|v| v.abs()).fold(1e-3, f64::max);
        let target: Vec<f64> = pred
            .iter()
            .map(|p| p + if rng.gen::<bool>() { 1.0 } else { -1.0 } * rng.gen_range(0.2..1.0) * scale)
            .collect();
        let mut reg = Registry::with_builtins();
        reg.register(
            "render_column",
            RenderColumnOp {
                field: field.clone(),
                geometry,
                clip: f64::NEG_INFINITY,
            },
        );
        let mut prog = Program::new(2);
        let y = prog.push("render_column", &[0]);
        let loss = prog.push("l1_loss", &[y, 1]);
        let prog = prog.output(&[loss]);
        let report = finite_difference_check(&reg, &prog, &[field.params().to_vec(), target], 1e-5, 1e-4).unwrap();
        worst = worst.max(report.max_error);
        checked += report.relative_errors.len() - report.custom_rule_entries.len();
        custom += report.custom_rule_entries.len();
        if !report.pass {
            failures.push((s, report.max_error, report.max_location));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        3,
        "gradient fidelity",
        failures.is_empty() && secs < 300.0,
        format!(
            "{SCENES} scenes, {checked} entries checked, {custom} custom-rule entries excluded, \
             max relative error {worst:.2e} (< 1e-4), failures {failures:?}, {secs:.1}s"
        ),
    );
}

fn desk_radar() -> RadarConfig {
    RadarConfig {
        range_bins: 32,
        range_resolution: 0.1,
        doppler_bins: 64,
        doppler_resolution: 0.95 / 32.0,
        antennas: 8,
        rays_per_column: 128,
        ..Default::default()
    }
}

/// Arc integral of one column by a dense midpoint rule over the front part
/// of the Doppler ring, with the front interval solved in closed form.
fn quadrature_column(
    scene: &VoxelScene,
    pose: &Pose,
    radar: &RadarConfig,
    antenna: &AntennaModel,
    j: usize,
    points: usize,
) -> Vec<f64> {
    let (nr, na) = (radar.range_bins, antenna.count());
    let mut out = vec![0.0; nr * na];
    let v = pose.velocity_local();
    let speed = v.norm();
    let d = radar.doppler_of(j);
    if d.abs() >= speed {
        return out;
    }
    let v_hat = v / speed;
    let (c, s) = (d / speed, (1.0 - (d / speed).powi(2)).sqrt());
    let (e1, e2) = ring_basis(&v_hat);
    // forward component: a + b cos(phi) + e sin(phi)
    let (a, b, e) = (v_hat.x * c, e1.x * s, e2.x * s);
    let amp = b.hypot(e);
    let (lo, hi) = if amp <= a.abs() {
        if a > 0.0 {
            (0.0, std::f64::consts::TAU)
        } else {
            return out;
        }
    } else {
        let center = e.atan2(b);
        let half = (-a / amp).acos();
        (center - half, center + half)
    };
    let step = (hi - lo) / points as f64;
    let mut gains = vec![0.0; na];
    for n in 0..points {
        let phi = lo + (n as f64 + 0.5) * step;
        let (sn, cs) = phi.sin_cos();
        let local = v_hat * c + (e1 * cs + e2 * sn) * s;
        for (k, g) in gains.iter_mut().enumerate() {
            *g = antenna.gain(k, &local);
        }
        let world = pose.orientation * local;
        let mut transmittance = 1.0;
        for i in 0..nr {
            let p = pose.position + world * radar.range_of(i);
            let sample = scene.sample_scene(&p, &world, f64::NEG_INFINITY);
            for k in 0..na {
                out[i * na + k] += gains[k] * sample.sigma * transmittance * step / speed;
            }
            transmittance *= sample.log_alpha.exp();
        }
    }
    out
}

fn three_box_scene() -> VoxelScene {
    let mut scene = VoxelScene::new(Aabb::new([-2.0, -2.0, 0.0], [2.0, 2.0, 2.0]).unwrap(), 0.05).unwrap();
    scene
        .add_box(&Aabb::new([0.0, 0.4, 0.2], [0.5, 0.9, 0.9]).unwrap(), &MaterialPreset::reflect_transmit(), None)
        .unwrap();
    scene
        .add_box(&Aabb::new([0.3, -0.8, 0.1], [0.9, -0.1, 1.0]).unwrap(), &MaterialPreset::opaque_specular(), Some(2))
        .unwrap();
    scene
        .add_box(&Aabb::new([-0.6, -0.3, 0.3], [-0.3, 0.3, 1.2]).unwrap(), &MaterialPreset::mesh(), Some(1))
        .unwrap();
    scene
}

#[test]
fn c04_renderer_matches_dense_quadrature() {
    const RENDERS: u64 = 64;
    let scene = three_box_scene();
    let radar = desk_radar();
    let antenna = AntennaModel::uniform(radar.antennas);
    let orientation = look_rotation(0.15, 0.05);
    let velocity = orientation * Vec3::new(0.35, 0.45, 0.1);
    let pose = Pose::new(Vec3::new(-1.6, 0.05, 0.7), orientation, velocity, 0.0).unwrap();
    let truth: Vec<Vec<f64>> = (0..radar.doppler_bins)
        .into_par_iter()
        .map(|j| quadrature_column(&scene, &pose, &radar, &antenna, j, 8192))
        .collect();
    let renders: Vec<RangeDopplerFrame> = (0..RENDERS)
        .map(|s| render_frame(&scene, &pose, &radar, &antenna, f64::NEG_INFINITY, 1000 + s))
        .collect();
    let peak = truth.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    let (mut total, mut within, mut nonzero) = (0usize, 0usize, 0usize);
    for (j, col) in truth.iter().enumerate() {
        if !radar.column_observable(j, pose.speed()) {
            continue;
        }
        for i in 0..radar.range_bins {
            for k in 0..radar.antennas {
                let xs: Vec<f64> = renders.iter().map(|f| f.get(k, i, j) as f64).collect();
                let mean = xs.iter().sum::<f64>() / RENDERS as f64;
                let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (RENDERS - 1) as f64;
                let se = (var / RENDERS as f64).sqrt();
                let want = col[i * radar.antennas + k];
                // f32 storage of the rendered frames bounds the attainable agreement.
                let tol = 3.0 * se + 1e-6 * peak;
                total += 1;
                if want.abs() > 1e-6 * peak {
                    nonzero += 1;
                }
                if (mean - want).abs() <= tol {
                    within += 1;
                }
            }
        }
    }
    let frac = within as f64 / total as f64;
    verdict(
        4,
        "renderer brute-force equivalence",
        frac >= 0.99 && nonzero > total / 10,
        format!("{within}/{total} observable bin values within 3 sigma ({:.2}%, need >= 99%), {nonzero} nonzero", 100.0 * frac),
    );
}

#[test]
fn c05_field_samples_per_frame_equal_bins_times_rays() {
    let scene = five_box_scene().build().unwrap();
    let mut results = Vec::new();
    for rays in [RadarConfig::default().rays_per_column, 16] {
        let radar = RadarConfig {
            rays_per_column: rays,
            ..Default::default()
        };
        let antenna = AntennaModel::uniform(radar.antennas);
        // Velocity across the boresight keeps every column's arc non-empty.
        let pose = Pose::new(Vec3::new(0.0, 0.0, 1.0), Mat3::identity(), Vec3::new(0.0, 0.96, 0.0), 0.0).unwrap();
        let counting = CountingField::new(&scene);
        render_frame(&counting, &pose, &radar, &antenna, f64::NEG_INFINITY, 5);
        let want = (radar.doppler_bins * rays * radar.range_bins) as u64;
        results.push((rays, counting.count(), want));
    }
    verdict(
        5,
        "sample budget",
        results.iter().all(|(_, got, want)| got == want),
        format!("(M, counted, doppler x M x range) = {results:?}"),
    );
}

struct Desk {
    dataset: Dataset,
    spec: SceneSpec,
    scene: VoxelScene,
    report: FitReport,
    eval: EvalReport,
    seconds: f64,
}

fn desk_field_config(bounds: Aabb) -> ImplicitFieldConfig {
    ImplicitFieldConfig {
        encoder: HashEncoderConfig {
            levels: 8,
            features_per_level: 2,
            table_size: 1 << 18,
            coarsest_resolution: 0.5,
            growth_factor: 1.5,
            bounds,
        },
        hidden: vec![64, 32],
        ..Default::default()
    }
}

fn finest_resolution(cfg: &HashEncoderConfig) -> f64 {
    cfg.coarsest_resolution / cfg.growth_factor.powi(cfg.levels as i32 - 1)
}

fn desk() -> &'static Desk {
    static DESK: OnceLock<Desk> = OnceLock::new();
    DESK.get_or_init(|| {
        let start = Instant::now();
        let spec = five_box_scene();
        let scene = spec.build().unwrap();
        let radar = desk_radar();
        let antenna = AntennaModel::uniform(radar.antennas);
        let traj = synth_trajectory(&TrajectorySpec::around(spec.bounds), 1).unwrap();
        let dataset = bake_dataset(&scene, Some(&spec), &traj, &radar, &antenna, 7).unwrap();
        let train_cfg = TrainConfig {
            batch_size: 128,
            rays_per_column: Some(16),
            ..Default::default()
        };
        let report = fit(&dataset, &train_cfg, &desk_field_config(spec.bounds), None, false).unwrap();
        let holdout = report.holdout_frames.clone();
        let (train, _) = dataset.split_indices(train_cfg.holdout_fraction);
        let train: Vec<usize> = train.into_iter().filter(|&i| dataset.frames[i].valid).collect();
        let targets: Vec<RangeDopplerFrame> = holdout.iter().map(|&i| dataset.frames[i].clone()).collect();
        let ssim = SsimConfig::default();
        let mask = empty_mask(&targets, &ssim);
        let score = |preds: &[RangeDopplerFrame]| -> Vec<Option<f64>> {
            preds
                .par_iter()
                .zip(targets.par_iter())
                .map(|(p, t)| scaled_ssim(p, t, Some(&mask), &ssim))
                .collect()
        };
        let seed = 0x5EED;
        // Desk frames are a quarter of the default size along each axis, and
        // so is the CFAR window.
        let cfar_cfg = CfarConfig {
            training: 4,
            guard: 1,
            ..Default::default()
        };
        let (_, cfar) = cfar_predictions(&dataset, &train, &holdout, &spec.bounds, &cfar_cfg, seed).unwrap();
        let lidar = lidar_predictions(&dataset, &scene, DEFAULT_OCCUPANCY_RESOLUTION, &holdout, seed).unwrap();
        let nearest = nearest_predictions(&dataset, &train, &holdout, &NeighborWeights::default()).unwrap();
        let methods = vec![
            ("learned".to_string(), report.holdout_per_frame.clone()),
            ("cfar".to_string(), score(&cfar)),
            ("lidar".to_string(), score(&lidar)),
            ("nearest".to_string(), score(&nearest)),
        ];
        let mut eval = EvalReport::build(&holdout, methods, 0).unwrap();
        eval.noise_references = noise_reference_ssim(&targets, &[25.0, 30.0, 35.0], Some(&mask), &ssim, 3).unwrap();
        Desk {
            dataset,
            spec,
            scene,
            report,
            eval,
            seconds: start.elapsed().as_secs_f64(),
        }
    })
}

#[test]
fn c06_desk_scale_recovery_and_baseline_ordering() {
    let desk = desk();
    let e = &desk.eval;
    let mean = |m: &str| e.method(m).map(|r| r.summary.mean).unwrap_or(f64::NAN);
    let learned = mean("learned");
    let gaps = [("learned", "cfar"), ("cfar", "lidar"), ("cfar", "nearest")];
    let tests: Vec<(String, f64, f64)> = gaps
        .iter()
        .map(|(a, b)| {
            let t = e.compare(a, b).unwrap();
            (format!("{a}>{b}"), t.mean_diff, t.p)
        })
        .collect();
    let ordered = tests.iter().all(|(_, diff, p)| *diff > 0.0 && *p < 0.05);
    let pass = learned > 0.90 && ordered && desk.seconds < 1800.0;
    verdict(
        6,
        "end-to-end recovery",
        pass,
        format!(
            "{} frames, {} steps, holdout SSIM learned {learned:.4} (> 0.90), cfar {:.4}, lidar {:.4}, nearest {:.4}; \
             gaps (diff, p) {tests:?}; noise refs {:?}; {:.0}s",
            desk.dataset.len(),
            desk.report.steps,
            mean("cfar"),
            mean("lidar"),
            mean("nearest"),
            e.noise_references,
            desk.seconds
        ),
    );
}

#[test]
fn c07_slices_localize_boxes_and_separate_materials() {
    let desk = desk();
    let field = &desk.report.field;
    let clip = TrainConfig::default().anneal.threshold(desk.report.steps);
    let tol = 2.0 * finest_resolution(&field.config().encoder);
    let (z, res) = (0.3, 0.02);
    let b = desk.spec.bounds;
    let (nx, ny) = (((b.max[0] - b.min[0]) / res).round() as usize, ((b.max[1] - b.min[1]) / res).round() as usize);
    let points: Vec<Vec3> = (0..ny)
        .flat_map(|y| (0..nx).map(move |x| (x, y)))
        .map(|(x, y)| Vec3::new(b.min[0] + (x as f64 + 0.5) * res, b.min[1] + (y as f64 + 0.5) * res, z))
        .collect();
    let slice: Vec<(f64, f64)> = points.par_chunks(1024).flat_map_iter(|c| field.mean_field(c, clip)).collect();
    let truth: Vec<(f64, f64)> =
        points.par_chunks(1024).flat_map_iter(|c| desk.scene.mean_field(c, f64::NEG_INFINITY)).collect();

    struct BoxStats {
        name: String,
        error: f64,
        reflectance: f64,
        transmittance: f64,
        true_reflectance: f64,
        true_transmittance: f64,
    }
    let wall = 2.0 * desk.spec.resolution;
    let stats: Vec<BoxStats> = desk
        .spec
        .boxes
        .iter()
        .map(|bx| {
            let (lo, hi) = (bx.bounds.min, bx.bounds.max);
            let region = |p: &Vec3, m: f64| p.x >= lo[0] - m && p.x <= hi[0] + m && p.y >= lo[1] - m && p.y <= hi[1] + m;
            let near: Vec<usize> = (0..points.len()).filter(|&i| region(&points[i], 0.02)).collect();
            let peak = near.iter().map(|&i| slice[i].0).fold(0.0, f64::max);
            let (mut w, mut cx, mut cy) = (0.0, 0.0, 0.0);
            for &i in &near {
                let s = slice[i].0;
                if s >= 0.5 * peak {
                    w += s;
                    cx += s * points[i].x;
                    cy += s * points[i].y;
                }
            }
            let center = bx.bounds.center();
            let error = if w > 0.0 { (cx / w - center.x).hypot(cy / w - center.y) } else { f64::INFINITY };
            let shell: Vec<usize> = near
                .iter()
                .copied()
                .filter(|&i| region(&points[i], 0.0) && !region(&points[i], -wall))
                .collect();
            let n = shell.len().max(1) as f64;
            let mean = |v: &[(f64, f64)], f: fn(&(f64, f64)) -> f64| shell.iter().map(|&i| f(&v[i])).sum::<f64>() / n;
            BoxStats {
                name: bx.material.name.clone(),
                error,
                reflectance: mean(&slice, |v| v.0),
                transmittance: mean(&slice, |v| v.1),
                true_reflectance: mean(&truth, |v| v.0),
                true_transmittance: mean(&truth, |v| v.1),
            }
        })
        .collect();
    // Half the spherical L2 norm of a unit isotropic reflector.
    let reflective = 0.5 * (4.0 * PI).sqrt();
    const TRANSMISSIVE: f64 = 0.75;
    let mut lines = Vec::new();
    let mut pass = true;
    for s in &stats {
        let learned = (s.reflectance >= reflective, s.transmittance >= TRANSMISSIVE);
        let want = (s.true_reflectance >= reflective, s.true_transmittance >= TRANSMISSIVE);
        let ok = s.error < tol && learned == want;
        pass &= ok;
        lines.push(format!(
            "{} err {:.3} refl {:.2}/{:.2} alpha {:.2}/{:.2} class {:?}/{:?}",
            s.name, s.error, s.reflectance, s.true_reflectance, s.transmittance, s.true_transmittance, learned, want
        ));
    }
    verdict(
        7,
        "tomography recovery",
        pass,
        format!(
            "centroid tolerance {tol:.4} m at z = {z}; classes (reflective, transmissive) learned/true; {}",
            lines.join("; ")
        ),
    );
}

fn small_chirp() -> ChirpConfig {
    ChirpConfig {
        samples_per_chirp: 64,
        chirps_per_frame: 32,
        frame_stride: 8,
        channels: 4,
        range_bins_out: 32,
        ..Default::default()
    }
}

fn argmax(v: &[f32]) -> usize {
    v.iter().enumerate().fold(0, |b, (i, x)| if *x > v[b] { i } else { b })
}

#[test]
fn c08_signal_processing_bins_sidelobes_and_frame_counts() {
    let cfg = small_chirp();
    let (dr, dd) = (cfg.range_resolution(), cfg.doppler_resolution());
    let (nr, nd, na) = (cfg.range_bins_out, cfg.chirps_per_frame, cfg.channels);
    let pose = Pose::new(Vec3::zeros(), Mat3::identity(), Vec3::new(0.0, 0.5, 0.0), 0.0).unwrap();
    let mut misplaced = Vec::new();
    let mut placed = 0;
    for range_bin in [2usize, 9, 17, 30] {
        for doppler_offset in [-11i64, -3, 0, 4, 12] {
            let t = PointTarget {
                range: range_bin as f64 * dr,
                radial_velocity: doppler_offset as f64 * dd,
                amplitude: 1.0,
                azimuth: 0.0,
            };
            let frame = process_cube(&synthesize_iq(&[t], &cfg).unwrap(), &cfg, pose).unwrap();
            let peak = argmax(&frame.values);
            let (k, rest) = (peak / (nr * nd), peak % (nr * nd));
            let got = (k, rest / nd, rest % nd);
            let want = (na / 2, range_bin, (nd as i64 / 2 - doppler_offset) as usize);
            if got == want {
                placed += 1;
            } else {
                misplaced.push((got, want));
            }
        }
    }

    // Zero-padded DFT of the window by direct summation.
    let n = 64;
    let pad = 32;
    let w = hann(n);
    let spectrum: Vec<f64> = (0..n * pad / 2)
        .map(|f| {
            let (mut re, mut im) = (0.0, 0.0);
            for (i, wi) in w.iter().enumerate() {
                let a = -2.0 * PI * (f * i) as f64 / (n * pad) as f64;
                re += wi * a.cos();
                im += wi * a.sin();
            }
            re.hypot(im)
        })
        .collect();
    let first_null = (1..spectrum.len() - 1)
        .find(|&i| spectrum[i] <= spectrum[i - 1] && spectrum[i] <= spectrum[i + 1])
        .unwrap();
    let sidelobe = spectrum[first_null..].iter().cloned().fold(0.0, f64::max);
    let suppression = 20.0 * (spectrum[0] / sidelobe).log10();

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut count_errors = 0;
    for _ in 0..500 {
        let c = ChirpConfig {
            chirps_per_frame: rng.gen_range(1..300),
            frame_stride: rng.gen_range(1..100),
            ..Default::default()
        };
        let total = rng.gen_range(0..2000);
        let want: Vec<usize> = if total < c.chirps_per_frame {
            Vec::new()
        } else {
            (0..=(total - c.chirps_per_frame) / c.frame_stride).map(|k| k * c.frame_stride).collect()
        };
        if rolling_offsets(total, &c) != want {
            count_errors += 1;
        }
    }
    verdict(
        8,
        "signal processing",
        misplaced.is_empty() && suppression >= 31.0 && count_errors == 0,
        format!(
            "{placed}/20 on-bin targets in exact bins {misplaced:?}; first sidelobe {suppression:.2} dB (>= 31); \
             frame-count mismatches {count_errors}/500"
        ),
    );
}

#[test]
fn c09_cfar_false_alarm_rate_and_detection() {
    let cfg = CfarConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (rows, cols) = (1000, 1000);
    let noise: Vec<f64> = (0..rows * cols).map(|_| Exp1.sample(&mut rng)).collect();
    let alarms = cfar_detect_image(&noise, rows, cols, &cfg).unwrap().len();
    let rate = alarms as f64 / (rows * cols) as f64;

    let (r, c) = (64, 64);
    let trials = 200;
    let mut detected = 0;
    for _ in 0..trials {
        let mut img: Vec<f64> = (0..r * c).map(|_| Exp1.sample(&mut rng)).collect();
        let (ti, tj) = (rng.gen_range(0..r), rng.gen_range(0..c));
        // 20 dB above the mean noise power
        img[ti * c + tj] += 100.0;
        let hits = cfar_detect_image(&img, r, c, &cfg).unwrap();
        if hits.iter().any(|d| d.range_bin == ti && d.doppler_bin == tj) {
            detected += 1;
        }
    }
    verdict(
        9,
        "CFAR statistics",
        (0.005..=0.02).contains(&rate) && detected == trials,
        format!(
            "false-alarm rate {rate:.5} over 1e6 cells at Pfa {} (in [0.005, 0.02]); 20 dB target detected {detected}/{trials}",
            cfg.false_alarm_rate
        ),
    );
}

#[test]
fn c10_metrics_ess_gain_invariance_and_noise_references() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let phi = 0.5;
    let n = 200_000;
    let mut x = 0.0;
    let series: Vec<f64> = (0..n)
        .map(|_| {
            let e: f64 = StandardNormal.sample(&mut rng);
            x = phi * x + e;
            x
        })
        .collect();
    let ess = effective_sample_size(&series).unwrap();
    let want = (1.0 - phi) / (1.0 + phi) * n as f64;
    let ess_err = (ess - want).abs() / want;

    let spec = five_box_scene();
    let scene = spec.build().unwrap();
    let radar = desk_radar();
    let antenna = AntennaModel::uniform(radar.antennas);
    let mut tspec = TrajectorySpec::around(spec.bounds);
    tspec.duration = 20.0 * tspec.period;
    let traj = synth_trajectory(&tspec, 4).unwrap();
    let targets: Vec<RangeDopplerFrame> = traj
        .poses
        .iter()
        .enumerate()
        .map(|(i, p)| render_frame(&scene, p, &radar, &antenna, f64::NEG_INFINITY, i as u64))
        .collect();
    let ssim = SsimConfig::default();
    let mut gain_err: f64 = 0.0;
    for c in [0.5f32, 2.0, 10.0] {
        for t in &targets {
            let mut p = t.clone();
            p.values.iter_mut().for_each(|v| *v *= c);
            let s = scaled_ssim(&p, t, None, &ssim).unwrap();
            gain_err = gain_err.max((s - 1.0).abs());
        }
    }
    let refs = noise_reference_ssim(&targets, &[25.0, 30.0, 35.0], None, &ssim, 11).unwrap();
    let monotone = refs.windows(2).all(|w| w[1].1 > w[0].1);
    verdict(
        10,
        "metrics",
        ess_err < 0.1 && gain_err < 1e-6 && monotone,
        format!(
            "AR(1) ESS {ess:.0} vs {want:.0} ({:.2}% off, < 10%); max |SSIM(c y, y) - 1| = {gain_err:.1e}; noise refs {refs:?}",
            100.0 * ess_err
        ),
    );
}

#[test]
fn c11_pose_filters_match_brute_force() {
    const NEIGHBORS: usize = 15;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut mismatches = 0;
    let mut invalidated = 0;
    let trials = 40;
    for _ in 0..trials {
        let n = rng.gen_range(2..400);
        let mut t = 0.0;
        let mut pos = Vec3::zeros();
        let poses: Vec<Pose> = (0..n)
            .map(|_| {
                t += rng.gen_range(0.03..0.1);
                let mut speed = rng.gen_range(0.4..0.6);
                if rng.gen_bool(0.03) {
                    speed = rng.gen_range(0.0..1.5);
                }
                let v = random_unit(&mut rng) * speed;
                pos += v * 0.064;
                Pose::new(pos, Mat3::identity(), v, t).unwrap()
            })
            .collect();
        let mut traj = Trajectory::new(poses, 0.064).unwrap();
        for v in traj.valid.iter_mut() {
            *v = !rng.gen_bool(0.05);
        }
        let (vmin, vmax, amax) = (0.2, 0.95, 2.0);

        let speeds: Vec<f64> = traj.poses.iter().map(|p| p.velocity.norm()).collect();
        let brute_window: Vec<bool> =
            (0..n).map(|i| traj.valid[i] && speeds[i] >= vmin && speeds[i] <= vmax).collect();
        let accel: Vec<f64> = (0..n)
            .map(|i| {
                if n < 2 {
                    return 0.0;
                }
                let (a, b) = if i == 0 { (0, 1) } else { (i - 1, i) };
                ((speeds[b] - speeds[a]) / (traj.poses[b].timestamp - traj.poses[a].timestamp)).abs()
            })
            .collect();
        let brute_spikes: Vec<bool> = (0..n)
            .map(|i| {
                let spiked = (0..n).any(|j| (i as i64 - j as i64).unsigned_abs() as usize <= NEIGHBORS && accel[j] > amax);
                traj.valid[i] && !spiked
            })
            .collect();
        let window = filter_speed_window(&traj, vmin, vmax);
        let spikes = filter_acceleration_spikes(&traj, amax, NEIGHBORS);
        mismatches += (0..n).filter(|&i| window.valid[i] != brute_window[i]).count();
        mismatches += (0..n).filter(|&i| spikes.valid[i] != brute_spikes[i]).count();
        invalidated += brute_spikes.iter().filter(|v| !**v).count();
    }
    verdict(
        11,
        "pose filters",
        mismatches == 0 && invalidated > 0,
        format!("{trials} random trajectories, {mismatches} mismatched samples, {invalidated} samples invalidated by spikes"),
    );
}
