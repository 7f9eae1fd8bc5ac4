//! On-disk dataset container.
//!
//! A dataset directory holds `manifest.json`, `frames.f32` (one
//! little-endian `f32` tensor `[N x antennas x range x doppler]`, row-major)
//! and `trajectory.bin` (see [`crate::poses::write_trajectory`]).

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::poses::{read_trajectory, write_trajectory, Trajectory};
use crate::renderer::{AntennaModel, RadarConfig, RangeDopplerFrame};
use crate::scenes::SceneSpec;
use crate::sigproc::ChirpConfig;

pub const DATASET_SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const FRAMES_FILE: &str = "frames.f32";
pub const TRAJECTORY_FILE: &str = "trajectory.bin";

/// Where a dataset came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Provenance {
    /// `"synthetic"`, `"dsp"` or `"external"`.
    pub source: String,
    pub seed: Option<u64>,
    pub scene: Option<SceneSpec>,
    #[serde(default)]
    pub extra: HashMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub radar: RadarConfig,
    pub antenna: AntennaModel,
    #[serde(default)]
    pub chirp: Option<ChirpConfig>,
    pub trajectory_file: String,
    pub frames_file: String,
    pub frame_count: usize,
    /// `[antennas, range_bins, doppler_bins]`.
    pub frame_shape: [usize; 3],
    pub provenance: Provenance,
    pub dtype: String,
    pub byte_order: String,
}

impl DatasetManifest {
    fn frame_bytes(&self) -> u64 {
        4 * self.frame_shape.iter().product::<usize>() as u64
    }
}

/// A fully loaded dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub radar: RadarConfig,
    pub antenna: AntennaModel,
    pub trajectory: Trajectory,
    pub frames: Vec<RangeDopplerFrame>,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Splits frame indices into `(train, holdout)`: the holdout is the last
    /// `holdout_fraction` of the trajectory in time.
    pub fn split_indices(&self, holdout_fraction: f64) -> (Vec<usize>, Vec<usize>) {
        let n = self.len();
        let cut = n - ((n as f64 * holdout_fraction).round() as usize).min(n);
        ((0..cut).collect(), (cut..n).collect())
    }
}

pub fn write_dataset(dataset: &Dataset, chirp: Option<&ChirpConfig>, dir: &Path) -> Result<DatasetManifest> {
    if dataset.frames.len() != dataset.trajectory.len() {
        return Err(Error::DimensionMismatch {
            expected: format!("{} frames (one per pose)", dataset.trajectory.len()),
            actual: format!("{}", dataset.frames.len()),
        });
    }
    let shape = [dataset.radar.antennas, dataset.radar.range_bins, dataset.radar.doppler_bins];
    if let Some(f) = dataset.frames.iter().find(|f| [f.antennas, f.range_bins, f.doppler_bins] != shape) {
        return Err(Error::DimensionMismatch {
            expected: format!("frame shape {shape:?}"),
            actual: format!("{:?}", [f.antennas, f.range_bins, f.doppler_bins]),
        });
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let frames_path = dir.join(FRAMES_FILE);
    let io = |e| Error::io(&frames_path, e);
    let mut w = BufWriter::new(File::create(&frames_path).map_err(io)?);
    for f in &dataset.frames {
        for v in &f.values {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)?;
    let mut traj = dataset.trajectory.clone();
    for (v, f) in traj.valid.iter_mut().zip(&dataset.frames) {
        *v = *v && f.valid;
    }
    write_trajectory(&dir.join(TRAJECTORY_FILE), &traj)?;
    let manifest = DatasetManifest {
        schema_version: DATASET_SCHEMA_VERSION,
        radar: dataset.radar.clone(),
        antenna: dataset.antenna.clone(),
        chirp: chirp.cloned(),
        trajectory_file: TRAJECTORY_FILE.into(),
        frames_file: FRAMES_FILE.into(),
        frame_count: dataset.len(),
        frame_shape: shape,
        provenance: dataset.provenance.clone(),
        dtype: "f32".into(),
        byte_order: "little".into(),
    };
    let mpath = dir.join(MANIFEST_FILE);
    std::fs::write(&mpath, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&mpath, e))?;
    Ok(manifest)
}

/// Validated handle with random access to frames.
#[derive(Debug, Clone)]
pub struct DatasetReader {
    pub manifest: DatasetManifest,
    pub trajectory: Trajectory,
    frames_path: PathBuf,
}

/// Opens and validates a dataset directory; frames are read on demand.
pub fn read_dataset(dir: &Path) -> Result<DatasetReader> {
    let mpath = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    let version = value.get("schema_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if version != DATASET_SCHEMA_VERSION {
        return Err(Error::SchemaVersion {
            found: version,
            supported: DATASET_SCHEMA_VERSION,
        });
    }
    let manifest: DatasetManifest = serde_json::from_value(value)?;
    let invalid = |message: String| Error::Validation {
        path: mpath.clone(),
        message,
    };
    if manifest.dtype != "f32" || manifest.byte_order != "little" {
        return Err(invalid(format!(
            "unsupported dtype {} / byte order {}",
            manifest.dtype, manifest.byte_order
        )));
    }
    let r = &manifest.radar;
    if manifest.frame_shape != [r.antennas, r.range_bins, r.doppler_bins] || manifest.antenna.count() != r.antennas {
        return Err(invalid(format!(
            "frame shape {:?} does not match the radar configuration",
            manifest.frame_shape
        )));
    }
    r.validate()?;
    let frames_path = dir.join(&manifest.frames_file);
    let actual = std::fs::metadata(&frames_path).map_err(|e| Error::io(&frames_path, e))?.len();
    let expected = manifest.frame_bytes() * manifest.frame_count as u64;
    if actual != expected {
        return Err(Error::Validation {
            path: frames_path,
            message: format!("expected {expected} bytes of frames, found {actual}"),
        });
    }
    let trajectory = read_trajectory(&dir.join(&manifest.trajectory_file))?;
    if trajectory.len() != manifest.frame_count {
        return Err(invalid(format!(
            "{} frames but {} poses",
            manifest.frame_count,
            trajectory.len()
        )));
    }
    Ok(DatasetReader {
        manifest,
        trajectory,
        frames_path,
    })
}

impl DatasetReader {
    pub fn len(&self) -> usize {
        self.manifest.frame_count
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn frame(&self, index: usize) -> Result<RangeDopplerFrame> {
        if index >= self.len() {
            return Err(Error::IndexOutOfRange { index, len: self.len() });
        }
        let io = |e| Error::io(&self.frames_path, e);
        let mut f = File::open(&self.frames_path).map_err(io)?;
        let size = self.manifest.frame_bytes();
        f.seek(SeekFrom::Start(size * index as u64)).map_err(io)?;
        let mut bytes = vec![0u8; size as usize];
        f.read_exact(&mut bytes).map_err(io)?;
        Ok(self.decode(index, &bytes))
    }

    fn decode(&self, index: usize, bytes: &[u8]) -> RangeDopplerFrame {
        let [antennas, range_bins, doppler_bins] = self.manifest.frame_shape;
        RangeDopplerFrame {
            antennas,
            range_bins,
            doppler_bins,
            values: bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect(),
            pose: self.trajectory.poses[index],
            valid: self.trajectory.valid[index],
        }
    }

    pub fn load(&self) -> Result<Dataset> {
        let io = |e| Error::io(&self.frames_path, e);
        let mut bytes = Vec::new();
        File::open(&self.frames_path).map_err(io)?.read_to_end(&mut bytes).map_err(io)?;
        let size = self.manifest.frame_bytes() as usize;
        let frames = (0..self.len())
            .map(|i| self.decode(i, &bytes[i * size..(i + 1) * size]))
            .collect();
        Ok(Dataset {
            radar: self.manifest.radar.clone(),
            antenna: self.manifest.antenna.clone(),
            trajectory: self.trajectory.clone(),
            frames,
            provenance: self.manifest.provenance.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Mat3, Pose, Vec3};

    fn small(n: usize) -> Dataset {
        let radar = RadarConfig {
            range_bins: 4,
            doppler_bins: 6,
            antennas: 2,
            ..Default::default()
        };
        let poses: Vec<Pose> = (0..n)
            .map(|i| Pose::new(Vec3::new(i as f64, 0.0, 0.0), Mat3::identity(), Vec3::new(0.0, 0.5, 0.0), i as f64 * 0.064).unwrap())
            .collect();
        let trajectory = Trajectory::new(poses.clone(), 0.064).unwrap();
        let frames = poses
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let mut f = RangeDopplerFrame::zeros(&radar, *p);
                f.values.iter_mut().enumerate().for_each(|(k, v)| *v = (i * 100 + k) as f32 * 0.37);
                f.valid = true;
                f
            })
            .collect();
        Dataset {
            radar,
            antenna: AntennaModel::uniform(2),
            trajectory,
            frames,
            provenance: Provenance {
                source: "test".into(),
                ..Default::default()
            },
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let ds = small(3);
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&ds, None, dir.path()).unwrap();
        let reader = read_dataset(dir.path()).unwrap();
        let f0 = reader.frame(0).unwrap();
        assert_eq!(f0.values, ds.frames[0].values);
        let back = reader.load().unwrap();
        for (a, b) in back.frames.iter().zip(&ds.frames) {
            assert_eq!(a.values, b.values);
            assert_eq!(a.valid, b.valid);
        }
        assert_eq!(back.radar, ds.radar);
        assert!(matches!(reader.frame(3), Err(Error::IndexOutOfRange { index: 3, len: 3 })));
    }

    #[test]
    fn concurrent_readers_agree() {
        let ds = small(4);
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&ds, None, dir.path()).unwrap();
        let reader = read_dataset(dir.path()).unwrap();
        let frames: Vec<Vec<f32>> = std::thread::scope(|s| {
            let hs: Vec<_> = (0..4).map(|_| s.spawn(|| reader.frame(2).unwrap().values)).collect();
            hs.into_iter().map(|h| h.join().unwrap()).collect()
        });
        assert!(frames.iter().all(|f| *f == ds.frames[2].values));
    }

    #[test]
    fn truncated_frames_are_rejected() {
        let ds = small(3);
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&ds, None, dir.path()).unwrap();
        let p = dir.path().join(FRAMES_FILE);
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 8]).unwrap();
        match read_dataset(dir.path()) {
            Err(Error::Validation { message, .. }) => {
                assert!(message.contains("576") && message.contains("568"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_dataset_is_valid() {
        let ds = small(0);
        let dir = tempfile::tempdir().unwrap();
        let m = write_dataset(&ds, None, dir.path()).unwrap();
        assert_eq!(m.frame_count, 0);
        assert!(read_dataset(dir.path()).unwrap().load().unwrap().is_empty());
    }

    #[test]
    fn schema_version_is_checked() {
        let ds = small(1);
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&ds, None, dir.path()).unwrap();
        let p = dir.path().join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&p).unwrap().replace("\"schema_version\": 1", "\"schema_version\": 7");
        std::fs::write(&p, text).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::SchemaVersion { found: 7, supported: 1 })));
    }

    #[test]
    fn holdout_is_the_tail() {
        let ds = small(10);
        let (train, hold) = ds.split_indices(0.2);
        assert_eq!(train, (0..8).collect::<Vec<_>>());
        assert_eq!(hold, vec![8, 9]);
    }
}
