//! Run configuration: TOML file, then command-line overrides.

use std::path::{Path, PathBuf};

use dopplerfield::baselines::{CfarConfig, NeighborWeights};
use dopplerfield::evalmetrics::SsimConfig;
use dopplerfield::field::ImplicitFieldConfig;
use dopplerfield::renderer::{AntennaModel, RadarConfig};
use dopplerfield::sigproc::ChirpConfig;
use dopplerfield::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const CONFIG_ENV: &str = "DOPPLERFIELD_CONFIG";
pub const RESOLVED_CONFIG_FILE: &str = "config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrajectoryOptions {
    pub frames: usize,
    /// Loop radius as a fraction of the smaller horizontal extent.
    pub radius_fraction: f64,
    pub speed: (f64, f64),
    pub period: f64,
}

impl Default for TrajectoryOptions {
    fn default() -> Self {
        Self {
            frames: 2000,
            radius_fraction: 0.42,
            speed: (0.3, 0.8),
            period: dopplerfield::poses::DEFAULT_PERIOD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub threads: Option<usize>,
    pub radar: RadarConfig,
    pub antenna: Option<AntennaModel>,
    pub chirp: ChirpConfig,
    pub trajectory: TrajectoryOptions,
    pub train: TrainConfig,
    pub field: ImplicitFieldConfig,
    pub cfar: CfarConfig,
    pub neighbor: NeighborWeights,
    pub ssim: SsimConfig,
    pub occupancy_resolution: f64,
    pub noise_psnr_db: Vec<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            threads: None,
            radar: RadarConfig::default(),
            antenna: None,
            chirp: ChirpConfig::default(),
            trajectory: TrajectoryOptions::default(),
            train: TrainConfig::default(),
            field: ImplicitFieldConfig::default(),
            cfar: CfarConfig::default(),
            neighbor: NeighborWeights::default(),
            ssim: SsimConfig::default(),
            occupancy_resolution: dopplerfield::baselines::DEFAULT_OCCUPANCY_RESOLUTION,
            noise_psnr_db: vec![25.0, 30.0, 35.0],
        }
    }
}

impl RunConfig {
    /// Reads `path`, or the file named by the environment variable, or
    /// falls back to defaults.
    pub fn load(path: Option<&Path>) -> Result<(Self, Option<PathBuf>), CliError> {
        let path = path
            .map(Path::to_path_buf)
            .or_else(|| std::env::var_os(CONFIG_ENV).map(PathBuf::from));
        let Some(path) = path else {
            return Ok((Self::default(), None));
        };
        let text = std::fs::read_to_string(&path)
            .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: Self = toml::from_str(&text)
            .map_err(|e| CliError::usage(format!("invalid config {}: {e}", path.display())))?;
        Ok((cfg, Some(path)))
    }

    pub fn antenna(&self) -> AntennaModel {
        self.antenna.clone().unwrap_or_else(|| AntennaModel::uniform(self.radar.antennas))
    }

    /// Writes the resolved configuration into `dir`.
    pub fn echo(&self, dir: &Path) -> Result<(), CliError> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::usage(format!("cannot create {}: {e}", dir.display())))?;
        let text = toml::to_string_pretty(self).map_err(|e| CliError::usage(format!("cannot serialize config: {e}")))?;
        let path = dir.join(RESOLVED_CONFIG_FILE);
        std::fs::write(&path, text).map_err(|e| CliError::usage(format!("cannot write {}: {e}", path.display())))
    }
}
