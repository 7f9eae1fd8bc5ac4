//! Comparison methods: a constant-material occupancy raytracer, nearest
//! neighbor frame lookup, and CFAR detection with DoA and grid aggregation.
//!
//! Every rendering baseline goes through [`render_frame`]; only the sampled
//! field differs.

use std::io::Write;
use std::path::Path;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::Dataset;
use crate::error::{Error, Result};
use crate::geometry::{Aabb, Pose, Vec3};
use crate::renderer::{column_seed, render_frame, AntennaModel, RadarConfig, RangeDopplerFrame};
use crate::scenes::VoxelScene;

/// Boolean occupancy on a regular grid.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyGrid {
    pub bounds: Aabb,
    pub resolution: f64,
    pub dims: [usize; 3],
    pub occupied: Vec<bool>,
}

pub const DEFAULT_OCCUPANCY_RESOLUTION: f64 = 0.02;

impl OccupancyGrid {
    pub fn new(bounds: Aabb, resolution: f64) -> Result<Self> {
        if !(resolution > 0.0) {
            return Err(Error::invalid("occupancy resolution must be positive"));
        }
        let e = bounds.extent();
        let dims = [0, 1, 2].map(|i| ((e[i] / resolution).round() as usize).max(1));
        Ok(Self {
            bounds,
            resolution,
            dims,
            occupied: vec![false; dims.iter().product()],
        })
    }

    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    pub fn cell_center(&self, x: usize, y: usize, z: usize) -> Vec3 {
        let h = self.resolution;
        Vec3::new(
            self.bounds.min[0] + (x as f64 + 0.5) * h,
            self.bounds.min[1] + (y as f64 + 0.5) * h,
            self.bounds.min[2] + (z as f64 + 0.5) * h,
        )
    }

    /// Marks every cell whose center lies in `region`.
    pub fn fill(&mut self, region: &Aabb) {
        for z in 0..self.dims[2] {
            for y in 0..self.dims[1] {
                for x in 0..self.dims[0] {
                    if region.contains(&self.cell_center(x, y, z)) {
                        let i = self.index(x, y, z);
                        self.occupied[i] = true;
                    }
                }
            }
        }
    }

    /// Occupancy of a ground-truth scene: a cell is occupied when the scene
    /// voxel containing its center reflects or attenuates.
    pub fn from_scene(scene: &VoxelScene, resolution: f64) -> Result<Self> {
        let mut grid = Self::new(scene.bounds, resolution)?;
        for z in 0..grid.dims[2] {
            for y in 0..grid.dims[1] {
                for x in 0..grid.dims[0] {
                    let p = grid.cell_center(x, y, z);
                    let v = [0, 1, 2].map(|a| {
                        (((p[a] - scene.bounds.min[a]) / scene.resolution).floor() as isize)
                            .clamp(0, scene.dims[a] as isize - 1) as usize
                    });
                    let s = scene.index(v[0], v[1], v[2]);
                    if scene.sigma[s] > 0.0 || scene.alpha[s] < 1.0 {
                        let i = grid.index(x, y, z);
                        grid.occupied[i] = true;
                    }
                }
            }
        }
        Ok(grid)
    }

    pub fn occupied_count(&self) -> usize {
        self.occupied.iter().filter(|o| **o).count()
    }

    /// Constant-material scene: `sigma = 1, alpha = 0` on occupied cells,
    /// empty elsewhere, trilinearly interpolated by the scene sampler.
    pub fn to_scene(&self) -> Result<VoxelScene> {
        let mut scene = VoxelScene::new(self.bounds, self.resolution)?;
        scene.dims = self.dims;
        scene.sigma = self.occupied.iter().map(|o| if *o { 1.0 } else { 0.0 }).collect();
        scene.alpha = self.occupied.iter().map(|o| if *o { 0.0 } else { 1.0 }).collect();
        Ok(scene)
    }
}

/// Renders the occupancy baseline for one pose.
pub fn lidar_baseline_render(
    grid: &OccupancyGrid,
    pose: &Pose,
    radar: &RadarConfig,
    antenna: &AntennaModel,
    seed: u64,
) -> Result<RangeDopplerFrame> {
    let scene = grid.to_scene()?;
    Ok(render_frame(&scene, pose, radar, antenna, f64::NEG_INFINITY, seed))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NeighborWeights {
    /// Meters per m/s of velocity difference.
    pub velocity: f64,
    /// Meters per radian of rotation difference.
    pub rotation: f64,
}

impl Default for NeighborWeights {
    fn default() -> Self {
        Self {
            velocity: 1.0,
            rotation: 0.5,
        }
    }
}

/// `|dp| + w_v |dv| + w_R angle(R_a^T R_b)`.
pub fn pose_distance(a: &Pose, b: &Pose, w: &NeighborWeights) -> f64 {
    let mut d = (a.position - b.position).norm() + w.velocity * (a.velocity - b.velocity).norm();
    if w.rotation != 0.0 {
        d += w.rotation * (a.orientation.inverse() * b.orientation).angle();
    }
    d
}

/// Index of the training pose closest to `query`; ties go to the earliest
/// timestamp.
pub fn nearest_index(train: &[Pose], query: &Pose, weights: &NeighborWeights) -> Result<usize> {
    let mut best: Option<(f64, usize)> = None;
    for (i, p) in train.iter().enumerate() {
        let d = pose_distance(p, query, weights);
        best = match best {
            None => Some((d, i)),
            Some((bd, bi)) if d < bd || (d == bd && p.timestamp < train[bi].timestamp) => Some((d, i)),
            b => b,
        };
    }
    best.map(|b| b.1)
        .ok_or_else(|| Error::Empty("nearest neighbor needs a training set".into()))
}

/// The stored frame nearest to `query`, re-stamped with the query pose.
pub fn nearest_neighbor_predict(
    train: &[RangeDopplerFrame],
    query: &Pose,
    weights: &NeighborWeights,
) -> Result<RangeDopplerFrame> {
    let poses: Vec<Pose> = train.iter().map(|f| f.pose).collect();
    let mut out = train[nearest_index(&poses, query, weights)?].clone();
    out.pose = *query;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CfarConfig {
    pub false_alarm_rate: f64,
    /// Training cells along each axis, split evenly across both sides.
    pub training: usize,
    /// Guard cells on each side of the cell under test.
    pub guard: usize,
    /// Aggregation grid cell size, meters.
    pub grid_resolution: f64,
}

impl Default for CfarConfig {
    fn default() -> Self {
        Self {
            false_alarm_rate: 0.01,
            training: 16,
            guard: 4,
            grid_resolution: 0.05,
        }
    }
}

impl CfarConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.false_alarm_rate > 0.0 && self.false_alarm_rate < 1.0) {
            return Err(Error::invalid("false alarm rate must lie in (0, 1)"));
        }
        if self.training < 2 || self.guard >= self.training {
            return Err(Error::invalid("CFAR needs guard < training and at least 2 training cells"));
        }
        if !(self.grid_resolution > 0.0) {
            return Err(Error::invalid("aggregation resolution must be positive"));
        }
        Ok(())
    }

    /// Window side: guard and training cells on both sides of the cell.
    pub fn window(&self) -> usize {
        2 * (self.guard + self.training / 2) + 1
    }
}

/// CA-CFAR threshold multiplier `N (Pfa^(-1/N) - 1)` for exponential noise.
pub fn cfar_scale(pfa: f64, n: usize) -> f64 {
    let n = n as f64;
    n * (pfa.powf(-1.0 / n) - 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub range_bin: usize,
    pub doppler_bin: usize,
    pub amplitude: f64,
}

fn integral_image(img: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut s = vec![0.0; (rows + 1) * (cols + 1)];
    for i in 0..rows {
        let mut row = 0.0;
        for j in 0..cols {
            row += img[i * cols + j];
            s[(i + 1) * (cols + 1) + j + 1] = s[i * (cols + 1) + j + 1] + row;
        }
    }
    s
}

/// Two-dimensional cell-averaging CFAR on a `rows x cols` power-like image.
/// Windows are truncated at the borders and the multiplier follows the
/// number of training cells actually present.
pub fn cfar_detect_image(img: &[f64], rows: usize, cols: usize, config: &CfarConfig) -> Result<Vec<Detection>> {
    config.validate()?;
    let w = config.window();
    if rows < w || cols < w {
        return Err(Error::invalid(format!(
            "image {rows}x{cols} is smaller than the {w}x{w} CFAR window"
        )));
    }
    let s = integral_image(img, rows, cols);
    let rect = |i0: usize, i1: usize, j0: usize, j1: usize| -> (f64, usize) {
        let c = cols + 1;
        (s[i1 * c + j1] - s[i0 * c + j1] - s[i1 * c + j0] + s[i0 * c + j0], (i1 - i0) * (j1 - j0))
    };
    let outer = config.guard + config.training / 2;
    let g = config.guard;
    let mut out = Vec::new();
    for i in 0..rows {
        for j in 0..cols {
            let (o_sum, o_n) = rect(i.saturating_sub(outer), (i + outer + 1).min(rows), j.saturating_sub(outer), (j + outer + 1).min(cols));
            let (g_sum, g_n) = rect(i.saturating_sub(g), (i + g + 1).min(rows), j.saturating_sub(g), (j + g + 1).min(cols));
            let n = o_n - g_n;
            let noise = (o_sum - g_sum) / n as f64;
            let v = img[i * cols + j];
            // Rendered frames can be negative; a negative window mean would
            // otherwise flag empty cells.
            if v > 0.0 && v > cfar_scale(config.false_alarm_rate, n) * noise {
                out.push(Detection {
                    range_bin: i,
                    doppler_bin: j,
                    amplitude: v,
                });
            }
        }
    }
    Ok(out)
}

/// CA-CFAR on the antenna-summed image of `frame`.
pub fn cfar_detect(frame: &RangeDopplerFrame, config: &CfarConfig) -> Result<Vec<Detection>> {
    cfar_detect_image(&frame.antenna_sum(), frame.range_bins, frame.doppler_bins, config)
}

/// Uniform steering grid over `[-max, max]` radians.
pub fn steering_grid(points: usize, max: f64) -> Vec<f64> {
    if points < 2 {
        return vec![0.0];
    }
    (0..points).map(|i| -max + 2.0 * max * i as f64 / (points - 1) as f64).collect()
}

/// Half-wavelength ULA steering vector `exp(i pi k sin(theta))`.
pub fn steering_vector(n: usize, theta: f64) -> Vec<Complex64> {
    let s = std::f64::consts::PI * theta.sin();
    (0..n).map(|k| Complex64::from_polar(1.0, s * k as f64)).collect()
}

/// Bartlett power `|a(theta)^H x|^2` at each steering angle.
pub fn bartlett_spectrum(snapshot: &[Complex64], grid: &[f64]) -> Vec<f64> {
    grid.iter()
        .map(|t| {
            steering_vector(snapshot.len(), *t)
                .iter()
                .zip(snapshot)
                .map(|(a, x)| a.conj() * x)
                .sum::<Complex64>()
                .norm_sqr()
        })
        .collect()
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |b, (i, x)| if *x > b.1 { (i, *x) } else { b })
        .0
}

/// Azimuth (radians, `+y` positive) maximizing the Bartlett spectrum of a
/// complex element snapshot.
pub fn bartlett_doa(snapshot: &[Complex64], grid: &[f64]) -> Result<f64> {
    if snapshot.iter().all(|x| x.norm_sqr() == 0.0) {
        return Err(Error::invalid("Bartlett DoA of an all-zero snapshot"));
    }
    if grid.is_empty() {
        return Err(Error::Empty("steering grid".into()));
    }
    Ok(grid[argmax(&bartlett_spectrum(snapshot, grid))])
}

/// Bartlett scan for magnitude frames, whose antenna axis already holds
/// azimuth-FFT bins: the beam magnitudes are matched against each bin's
/// array factor along the steering grid.
pub fn bartlett_doa_beamspace(beams: &[f64], antenna: &AntennaModel, grid: &[f64]) -> Result<f64> {
    if beams.iter().all(|b| *b == 0.0) {
        return Err(Error::invalid("Bartlett DoA of an all-zero snapshot"));
    }
    if beams.len() != antenna.count() {
        return Err(Error::DimensionMismatch {
            expected: format!("{} beams", antenna.count()),
            actual: format!("{}", beams.len()),
        });
    }
    let scores: Vec<f64> = grid
        .iter()
        .map(|t| {
            let u = 0.5 * t.sin();
            let af: Vec<f64> = (0..beams.len()).map(|k| antenna.array_factor(k, u)).collect();
            let norm = af.iter().map(|a| a * a).sum::<f64>().sqrt();
            af.iter().zip(beams).map(|(a, b)| a * b).sum::<f64>() / norm.max(1e-12)
        })
        .collect();
    Ok(grid[argmax(&scores)])
}

/// Sensor-frame point at `range` and azimuth `az` with zero elevation,
/// mapped to the world.
pub fn deproject(pose: &Pose, range: f64, azimuth: f64) -> Vec3 {
    let local = Vec3::new(azimuth.cos(), azimuth.sin(), 0.0) * range;
    pose.position + pose.orientation * local
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<(Vec3, f64)>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Whitespace-separated `x y z amplitude`, one point per line.
    pub fn write_text(&self, path: &Path) -> Result<()> {
        let io = |e| Error::io(path, e);
        let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
        for (p, a) in &self.points {
            writeln!(w, "{} {} {} {}", p.x, p.y, p.z, a).map_err(io)?;
        }
        w.flush().map_err(io)
    }
}

/// Detected reflectors and the transparent max-amplitude grid built from them.
#[derive(Debug, Clone)]
pub struct CfarMap {
    pub cloud: PointCloud,
    pub scene: VoxelScene,
}

/// Detects every valid frame, deprojects detections with a beam-space DoA
/// estimate, and keeps the maximum amplitude per grid cell. Grid cells are
/// fully transparent.
pub fn cfar_aggregate(
    frames: &[&RangeDopplerFrame],
    radar: &RadarConfig,
    antenna: &AntennaModel,
    bounds: &Aabb,
    config: &CfarConfig,
) -> Result<CfarMap> {
    config.validate()?;
    let grid = steering_grid(361, 80f64.to_radians());
    let per_frame: Vec<Result<Vec<(Vec3, f64)>>> = frames
        .par_iter()
        .filter(|f| f.valid)
        .map(|f| {
            let mut pts = Vec::new();
            for d in cfar_detect(f, config)? {
                let beams: Vec<f64> = (0..f.antennas).map(|k| f.get(k, d.range_bin, d.doppler_bin) as f64).collect();
                let az = bartlett_doa_beamspace(&beams, antenna, &grid)?;
                pts.push((deproject(&f.pose, radar.range_of(d.range_bin), az), d.amplitude));
            }
            Ok(pts)
        })
        .collect();
    let mut cloud = PointCloud::default();
    for r in per_frame {
        cloud.points.extend(r?);
    }
    let mut scene = VoxelScene::new(*bounds, config.grid_resolution)?;
    for (p, a) in &cloud.points {
        if !bounds.contains(p) {
            continue;
        }
        let v = [0, 1, 2].map(|ax| {
            (((p[ax] - bounds.min[ax]) / config.grid_resolution).floor() as usize).min(scene.dims[ax] - 1)
        });
        let i = scene.index(v[0], v[1], v[2]);
        scene.sigma[i] = scene.sigma[i].max(*a);
    }
    Ok(CfarMap { cloud, scene })
}

/// Renders a novel view of the aggregated CFAR grid.
pub fn cfar_render(map: &CfarMap, pose: &Pose, radar: &RadarConfig, antenna: &AntennaModel, seed: u64) -> RangeDopplerFrame {
    render_frame(&map.scene, pose, radar, antenna, f64::NEG_INFINITY, seed)
}

/// Valid frames among `indices`.
pub fn valid_frames(dataset: &Dataset, indices: &[usize]) -> Vec<usize> {
    indices.iter().copied().filter(|&i| dataset.frames[i].valid).collect()
}

/// Occupancy-baseline renders of `frames`.
pub fn lidar_predictions(
    dataset: &Dataset,
    scene: &VoxelScene,
    resolution: f64,
    frames: &[usize],
    seed: u64,
) -> Result<Vec<RangeDopplerFrame>> {
    let occupied = OccupancyGrid::from_scene(scene, resolution)?.to_scene()?;
    Ok(frames
        .iter()
        .map(|&i| {
            let pose = &dataset.frames[i].pose;
            render_frame(&occupied, pose, &dataset.radar, &dataset.antenna, f64::NEG_INFINITY, column_seed(seed, i))
        })
        .collect())
}

/// Nearest training frame for each of `frames`.
pub fn nearest_predictions(
    dataset: &Dataset,
    train: &[usize],
    frames: &[usize],
    weights: &NeighborWeights,
) -> Result<Vec<RangeDopplerFrame>> {
    let poses: Vec<Pose> = train.iter().map(|&i| dataset.frames[i].pose).collect();
    frames
        .par_iter()
        .map(|&i| {
            let query = dataset.frames[i].pose;
            let k = nearest_index(&poses, &query, weights)?;
            let mut out = dataset.frames[train[k]].clone();
            out.pose = query;
            Ok(out)
        })
        .collect()
}

/// CFAR map built from `train`, rendered at each of `frames`.
pub fn cfar_predictions(
    dataset: &Dataset,
    train: &[usize],
    frames: &[usize],
    bounds: &Aabb,
    config: &CfarConfig,
    seed: u64,
) -> Result<(CfarMap, Vec<RangeDopplerFrame>)> {
    let train_frames: Vec<&RangeDopplerFrame> = train.iter().map(|&i| &dataset.frames[i]).collect();
    let map = cfar_aggregate(&train_frames, &dataset.radar, &dataset.antenna, bounds, config)?;
    let preds = frames
        .iter()
        .map(|&i| cfar_render(&map, &dataset.frames[i].pose, &dataset.radar, &dataset.antenna, column_seed(seed, i)))
        .collect();
    Ok((map, preds))
}
