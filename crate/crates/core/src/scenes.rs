//! Synthetic ground-truth scenes on an explicit voxel grid.
//!
//! A [`VoxelScene`] stores per-voxel reflectance `sigma`, transmittance
//! `alpha` and, optionally, 25 SH coefficients. Sampling interpolates
//! trilinearly between voxel centers and applies the same view-factor head
//! as the learned field, with `sigma_bar = sigma / Y_00` and
//! `alpha_bar = ln(alpha) / Y_00` so that an isotropic voxel reproduces its
//! stored values.

use std::collections::HashMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::{Dataset, Provenance};
use crate::error::{Error, Result};
use crate::field::sh::{project, SH_C0, SH_COEFFS};
use crate::field::{head_forward, AlphaActivation, Field, FieldSample};
use crate::geometry::{Aabb, Vec3};
use crate::poses::Trajectory;
use crate::renderer::{column_seed, render_frame, AntennaModel, RadarConfig, RangeDopplerFrame};

/// Smallest stored transmittance; keeps `ln(alpha)` finite.
pub const MIN_ALPHA: f64 = 1e-12;

/// Directional reflectance lobe `floor + max(0, -<w, n>)^sharpness` about a
/// surface normal `n`, projected onto SH.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpecularProfile {
    pub sharpness: f64,
    pub floor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaterialPreset {
    pub name: String,
    pub sigma: f64,
    pub alpha: f64,
    #[serde(default)]
    pub specular: Option<SpecularProfile>,
}

impl MaterialPreset {
    pub fn new(name: &str, sigma: f64, alpha: f64) -> Self {
        Self {
            name: name.into(),
            sigma,
            alpha,
            specular: None,
        }
    }

    /// Blocks everything and reflects mostly toward the face normal.
    pub fn opaque_specular() -> Self {
        Self {
            specular: Some(SpecularProfile {
                sharpness: 2.0,
                floor: 0.35,
            }),
            ..Self::new("opaque_specular", 1.0, 0.0)
        }
    }

    /// Reflects but lets most energy through.
    pub fn reflect_transmit() -> Self {
        Self::new("reflect_transmit", 0.8, 0.9)
    }

    /// Reflects and blocks, diffusely.
    pub fn reflect_block() -> Self {
        Self::new("reflect_block", 1.0, 0.0)
    }

    /// Strong reflector that still passes part of the energy.
    pub fn mesh() -> Self {
        Self::new("mesh", 1.0, 0.8)
    }

    /// Faint reflector, fully transmissive.
    pub fn transparent() -> Self {
        Self::new("transparent", 0.15, 1.0)
    }

    pub fn by_name(name: &str) -> Option<Self> {
        Some(match name {
            "opaque_specular" => Self::opaque_specular(),
            "reflect_transmit" => Self::reflect_transmit(),
            "reflect_block" => Self::reflect_block(),
            "mesh" => Self::mesh(),
            "transparent" => Self::transparent(),
            "opaque" => Self::new("opaque", 1.0, 0.0),
            _ => return None,
        })
    }

    fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) || !self.sigma.is_finite() {
            return Err(Error::invalid(format!("material {}: alpha must lie in [0, 1]", self.name)));
        }
        Ok(())
    }
}

/// An axis-aligned box primitive; `shell` is the wall thickness in voxels
/// for a hollow box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxPrimitive {
    pub bounds: Aabb,
    pub material: MaterialPreset,
    #[serde(default)]
    pub shell: Option<usize>,
}

/// Reconstructable scene description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub bounds: Aabb,
    pub resolution: f64,
    pub boxes: Vec<BoxPrimitive>,
}

impl SceneSpec {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn build(&self) -> Result<VoxelScene> {
        let mut scene = VoxelScene::new(self.bounds, self.resolution)?;
        for b in &self.boxes {
            scene.add_box(&b.bounds, &b.material, b.shell)?;
        }
        Ok(scene)
    }
}

/// Five hollow boxes on a 4 m x 4 m x 2 m floor, one per material preset.
pub fn five_box_scene() -> SceneSpec {
    let bounds = Aabb::new([-2.0, -2.0, 0.0], [2.0, 2.0, 2.0]).unwrap();
    let boxes = [
        ([-0.9, 0.3, 0.0], [-0.3, 0.9, 0.7], MaterialPreset::opaque_specular()),
        ([0.3, 0.3, 0.0], [0.9, 0.9, 0.9], MaterialPreset::reflect_transmit()),
        ([0.35, -0.9, 0.0], [0.95, -0.3, 0.6], MaterialPreset::reflect_block()),
        ([-0.9, -0.85, 0.0], [-0.35, -0.3, 0.8], MaterialPreset::mesh()),
        ([-0.25, -0.25, 0.0], [0.25, 0.25, 1.0], MaterialPreset::transparent()),
    ];
    SceneSpec {
        bounds,
        resolution: 0.05,
        boxes: boxes
            .into_iter()
            .map(|(lo, hi, material)| BoxPrimitive {
                bounds: Aabb::new(lo, hi).unwrap(),
                material,
                shell: Some(2),
            })
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoxelScene {
    pub bounds: Aabb,
    pub resolution: f64,
    pub dims: [usize; 3],
    pub sigma: Vec<f64>,
    pub alpha: Vec<f64>,
    /// `[voxel][25]` when any voxel is view dependent.
    pub sh: Option<Vec<f64>>,
}

impl VoxelScene {
    /// An empty scene: `sigma = 0`, `alpha = 1`.
    pub fn new(bounds: Aabb, resolution: f64) -> Result<Self> {
        if !(resolution > 0.0) {
            return Err(Error::invalid("scene resolution must be positive"));
        }
        let e = bounds.extent();
        let dims = [0, 1, 2].map(|i| ((e[i] / resolution).round() as usize).max(1));
        let n = dims.iter().product();
        Ok(Self {
            bounds,
            resolution,
            dims,
            sigma: vec![0.0; n],
            alpha: vec![1.0; n],
            sh: None,
        })
    }

    pub fn len(&self) -> usize {
        self.sigma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sigma.is_empty()
    }

    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    pub fn voxel_center(&self, x: usize, y: usize, z: usize) -> Vec3 {
        let h = self.resolution;
        Vec3::new(
            self.bounds.min[0] + (x as f64 + 0.5) * h,
            self.bounds.min[1] + (y as f64 + 0.5) * h,
            self.bounds.min[2] + (z as f64 + 0.5) * h,
        )
    }

    /// Sets a single voxel.
    pub fn set_voxel(&mut self, x: usize, y: usize, z: usize, sigma: f64, alpha: f64) {
        let i = self.index(x, y, z);
        self.sigma[i] = sigma;
        self.alpha[i] = alpha.clamp(0.0, 1.0);
    }

    /// Writes `material` into every voxel whose center lies in `region`;
    /// with `shell = Some(t)` only voxels within `t` voxels of the box
    /// surface. Later boxes overwrite earlier ones. Parts outside the scene
    /// bounds are dropped with a warning.
    pub fn add_box(&mut self, region: &Aabb, material: &MaterialPreset, shell: Option<usize>) -> Result<()> {
        material.validate()?;
        let Some(clipped) = region.intersect(&self.bounds) else {
            log::warn!("box {region:?} lies outside the scene and was skipped");
            return Ok(());
        };
        if &clipped != region {
            log::warn!("box {region:?} clipped to the scene bounds");
        }
        let lobes = material.specular.map(|s| FaceLobes::new(&s));
        if lobes.is_some() && self.sh.is_none() {
            let mut sh = vec![0.0; self.len() * SH_COEFFS];
            for c in sh.chunks_exact_mut(SH_COEFFS) {
                c[0] = 1.0;
            }
            self.sh = Some(sh);
        }
        let wall = shell.map(|t| t as f64 * self.resolution);
        for z in 0..self.dims[2] {
            for y in 0..self.dims[1] {
                for x in 0..self.dims[0] {
                    let p = self.voxel_center(x, y, z);
                    if !region.contains(&p) {
                        continue;
                    }
                    // Distance to the nearest face and that face's normal.
                    let (depth, normal) = nearest_face(region, &p);
                    if let Some(w) = wall {
                        if depth >= w {
                            continue;
                        }
                    }
                    let i = self.index(x, y, z);
                    self.sigma[i] = material.sigma;
                    self.alpha[i] = material.alpha;
                    if let Some(sh) = self.sh.as_mut() {
                        let c = &mut sh[i * SH_COEFFS..(i + 1) * SH_COEFFS];
                        match &lobes {
                            Some(l) => c.copy_from_slice(&l.coeffs[normal]),
                            None => {
                                c.fill(0.0);
                                c[0] = 1.0;
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn corners(&self, p: &Vec3) -> Option<([usize; 8], [f64; 8])> {
        if !self.bounds.contains(p) {
            return None;
        }
        let mut lo = [0usize; 3];
        let mut hi = [0usize; 3];
        let mut frac = [0.0; 3];
        for a in 0..3 {
            let u = (p[a] - self.bounds.min[a]) / self.resolution - 0.5;
            let n = self.dims[a];
            if n == 1 || u <= 0.0 {
                (lo[a], hi[a], frac[a]) = (0, 0, 0.0);
            } else if u >= (n - 1) as f64 {
                (lo[a], hi[a], frac[a]) = (n - 1, n - 1, 0.0);
            } else {
                let i0 = u.floor() as usize;
                (lo[a], hi[a], frac[a]) = (i0, i0 + 1, u - i0 as f64);
            }
        }
        let mut idx = [0usize; 8];
        let mut w = [0.0; 8];
        for n in 0..8 {
            let pick = |a: usize| if (n >> a) & 1 == 1 { (hi[a], frac[a]) } else { (lo[a], 1.0 - frac[a]) };
            let (x, wx) = pick(0);
            let (y, wy) = pick(1);
            let (z, wz) = pick(2);
            idx[n] = self.index(x, y, z);
            w[n] = wx * wy * wz;
        }
        Some((idx, w))
    }

    /// Samples the scene; outside the bounds the scene is empty.
    pub fn sample_scene(&self, position: &Vec3, direction: &Vec3, clip: f64) -> FieldSample {
        let Some((idx, w)) = self.corners(position) else {
            return FieldSample::EMPTY;
        };
        let mut sigma = 0.0;
        let mut alpha = 0.0;
        for n in 0..8 {
            sigma += w[n] * self.sigma[idx[n]];
            alpha += w[n] * self.alpha[idx[n]];
        }
        let coeffs = self.sh.as_ref().map(|sh| {
            let mut c = [0.0; SH_COEFFS];
            for n in 0..8 {
                for (ci, v) in c.iter_mut().zip(&sh[idx[n] * SH_COEFFS..(idx[n] + 1) * SH_COEFFS]) {
                    *ci += w[n] * v;
                }
            }
            c
        });
        let alpha_bar = alpha.max(MIN_ALPHA).ln() / SH_C0;
        let (s, _) = head_forward(
            sigma / SH_C0,
            alpha_bar,
            coeffs.as_ref().map(|c| c.as_slice()),
            direction,
            AlphaActivation::ClampedExp,
            clip,
        );
        s
    }

    /// Raw little-endian `f32` dump: sigma grid then alpha grid, x fastest.
    pub fn write_grid_dump(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::with_capacity(8 * self.len());
        for v in self.sigma.iter().chain(&self.alpha) {
            bytes.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }
}

impl Field for VoxelScene {
    fn sample_batch(&self, positions: &[Vec3], directions: &[Vec3], clip: f64, out: &mut [FieldSample]) {
        for ((p, d), o) in positions.iter().zip(directions).zip(out.iter_mut()) {
            *o = self.sample_scene(p, d, clip);
        }
    }
}

/// SH coefficients of the specular lobe for each of the six face normals.
struct FaceLobes {
    coeffs: [[f64; SH_COEFFS]; 6],
}

const FACE_NORMALS: [[f64; 3]; 6] = [
    [-1.0, 0.0, 0.0],
    [1.0, 0.0, 0.0],
    [0.0, -1.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, 0.0, -1.0],
    [0.0, 0.0, 1.0],
];

impl FaceLobes {
    fn new(profile: &SpecularProfile) -> Self {
        let coeffs = FACE_NORMALS.map(|n| {
            let n = Vec3::from(n);
            // Rays travel from the sensor, so a face is seen head-on along -n.
            project(|w| profile.floor + (-w.dot(&n)).max(0.0).powf(profile.sharpness))
        });
        Self { coeffs }
    }
}

fn nearest_face(region: &Aabb, p: &Vec3) -> (f64, usize) {
    let mut best = (f64::INFINITY, 0);
    for a in 0..3 {
        let lo = p[a] - region.min[a];
        let hi = region.max[a] - p[a];
        if lo < best.0 {
            best = (lo, 2 * a);
        }
        if hi < best.0 {
            best = (hi, 2 * a + 1);
        }
    }
    best
}

/// Renders every valid pose of `trajectory` against `scene`. Invalid poses
/// (flagged, or speed outside the radar's window) produce zero frames
/// marked invalid.
pub fn bake_dataset(
    scene: &VoxelScene,
    spec: Option<&SceneSpec>,
    trajectory: &Trajectory,
    radar: &RadarConfig,
    antenna: &AntennaModel,
    seed: u64,
) -> Result<Dataset> {
    radar.validate()?;
    antenna.validate()?;
    if antenna.count() != radar.antennas {
        return Err(Error::DimensionMismatch {
            expected: format!("{} antennas", radar.antennas),
            actual: format!("{}", antenna.count()),
        });
    }
    let frames: Vec<RangeDopplerFrame> = trajectory
        .poses
        .par_iter()
        .zip(&trajectory.valid)
        .enumerate()
        .map(|(i, (pose, ok))| {
            if *ok && radar.speed_valid(pose.speed()) {
                let mut f = render_frame(scene, pose, radar, antenna, f64::NEG_INFINITY, column_seed(seed, i));
                f.valid = true;
                f
            } else {
                let mut f = RangeDopplerFrame::zeros(radar, *pose);
                f.valid = false;
                f
            }
        })
        .collect();
    let mut trajectory = trajectory.clone();
    for (v, f) in trajectory.valid.iter_mut().zip(&frames) {
        *v = f.valid;
    }
    Ok(Dataset {
        radar: radar.clone(),
        antenna: antenna.clone(),
        trajectory,
        frames,
        provenance: Provenance {
            source: "synthetic".into(),
            seed: Some(seed),
            scene: spec.cloned(),
            extra: HashMap::new(),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::sh::sh_evaluate;
    use crate::geometry::{Mat3, Pose};
    use approx::assert_relative_eq;

    fn unit_scene() -> VoxelScene {
        VoxelScene::new(Aabb::new([0.0; 3], [1.0; 3]).unwrap(), 0.1).unwrap()
    }

    #[test]
    fn voxel_center_returns_stored_values() {
        let mut s = unit_scene();
        s.set_voxel(3, 4, 5, 0.7, 0.25);
        let p = s.voxel_center(3, 4, 5);
        let out = s.sample_scene(&p, &Vec3::x(), f64::NEG_INFINITY);
        assert_relative_eq!(out.sigma, 0.7, max_relative = 1e-12);
        assert_relative_eq!(out.alpha, 0.25, max_relative = 1e-12);
        assert_eq!(s.sample_scene(&Vec3::new(1.5, 0.5, 0.5), &Vec3::x(), 0.0), FieldSample::EMPTY);
    }

    #[test]
    fn presets_match_their_semantics() {
        let mut s = unit_scene();
        let region = Aabb::new([0.2; 3], [0.8; 3]).unwrap();
        s.add_box(&region, &MaterialPreset::reflect_transmit(), Some(2)).unwrap();
        let wall = s.sample_scene(&s.voxel_center(2, 5, 5), &Vec3::x(), f64::NEG_INFINITY);
        assert!(wall.sigma > 0.5 && wall.alpha > 0.85);
        // hollow inside
        let inner = s.sample_scene(&s.voxel_center(5, 5, 5), &Vec3::x(), f64::NEG_INFINITY);
        assert_eq!(inner.sigma, 0.0);
        s.add_box(&region, &MaterialPreset::reflect_block(), None).unwrap();
        let blocked = s.sample_scene(&s.voxel_center(5, 5, 5), &Vec3::x(), f64::NEG_INFINITY);
        assert!(blocked.alpha < 1e-9);
    }

    #[test]
    fn later_boxes_win() {
        let mut s = unit_scene();
        let region = Aabb::new([0.0; 3], [0.5; 3]).unwrap();
        s.add_box(&region, &MaterialPreset::mesh(), None).unwrap();
        s.add_box(&region, &MaterialPreset::transparent(), None).unwrap();
        let i = s.index(1, 1, 1);
        assert_eq!((s.sigma[i], s.alpha[i]), (0.15, 1.0));
    }

    #[test]
    fn out_of_bounds_box_is_clipped() {
        let mut s = unit_scene();
        let region = Aabb::new([0.78, 0.0, 0.0], [3.0, 1.0, 1.0]).unwrap();
        s.add_box(&region, &MaterialPreset::mesh(), None).unwrap();
        assert_eq!(s.sigma.iter().filter(|v| **v > 0.0).count(), 2 * 10 * 10);
    }

    #[test]
    fn specular_scene_shares_the_field_formula() {
        let mut s = unit_scene();
        s.add_box(&Aabb::new([0.0; 3], [1.0; 3]).unwrap(), &MaterialPreset::opaque_specular(), None)
            .unwrap();
        let p = s.voxel_center(0, 5, 5);
        let c = &s.sh.as_ref().unwrap()[s.index(0, 5, 5) * SH_COEFFS..][..SH_COEFFS];
        let head_on = s.sample_scene(&p, &Vec3::x(), f64::NEG_INFINITY).sigma;
        let grazing = s.sample_scene(&p, &Vec3::y(), f64::NEG_INFINITY).sigma;
        assert!(head_on > 1.5 * grazing, "{head_on} vs {grazing}");
        for d in [Vec3::x(), Vec3::new(0.3, 0.4, -0.2).normalize()] {
            let (expected, _) = head_forward(
                1.0 / SH_C0,
                MIN_ALPHA.ln() / SH_C0,
                Some(c),
                &d,
                AlphaActivation::ClampedExp,
                f64::NEG_INFINITY,
            );
            let y = sh_evaluate(&d);
            let norm = c.iter().map(|v| v * v).sum::<f64>().sqrt();
            let dot: f64 = y.iter().zip(c).map(|(a, b)| a * b).sum();
            assert_relative_eq!(expected.sigma, dot / norm / SH_C0, max_relative = 1e-12);
            assert_eq!(s.sample_scene(&p, &d, f64::NEG_INFINITY), expected);
        }
    }

    #[test]
    fn isotropic_scene_matches_an_implicit_field_head() {
        // An isotropic head with sigma_bar = sigma / Y00 samples like the scene.
        let mut s = unit_scene();
        s.set_voxel(5, 5, 5, 0.4, 0.6);
        let p = s.voxel_center(5, 5, 5);
        let (expected, _) = head_forward(
            0.4 / SH_C0,
            0.6f64.ln() / SH_C0,
            None,
            &Vec3::z(),
            AlphaActivation::ClampedExp,
            f64::NEG_INFINITY,
        );
        assert_eq!(s.sample_scene(&p, &Vec3::z(), f64::NEG_INFINITY), expected);
    }

    #[test]
    fn five_box_spec_round_trips_through_json() {
        let spec = five_box_scene();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scene.json");
        spec.write_json(&path).unwrap();
        let back = SceneSpec::from_json_file(&path).unwrap();
        assert_eq!(back, spec);
        let scene = back.build().unwrap();
        assert_eq!(scene.dims, [80, 80, 40]);
        assert!(scene.sh.is_some());
    }

    #[test]
    fn empty_scene_bakes_zero_frames() {
        let scene = unit_scene();
        let poses = (0..3)
            .map(|i| Pose::new(Vec3::new(0.5, 0.5, 0.5), Mat3::identity(), Vec3::new(0.0, 0.5, 0.0), i as f64).unwrap())
            .collect();
        let traj = Trajectory::new(poses, 1.0).unwrap();
        let radar = RadarConfig {
            range_bins: 8,
            doppler_bins: 16,
            rays_per_column: 4,
            ..Default::default()
        };
        let ds = bake_dataset(&scene, None, &traj, &radar, &AntennaModel::default(), 1).unwrap();
        assert_eq!(ds.frames.len(), 3);
        assert!(ds.frames.iter().all(|f| f.valid && f.values.iter().all(|v| *v == 0.0)));
    }
}
