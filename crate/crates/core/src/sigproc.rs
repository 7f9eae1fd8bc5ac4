//! FMCW front end: IQ synthesis for point targets and the windowed FFT
//! chain from IQ cubes to range-Doppler-azimuth magnitude frames.
//!
//! Doppler bins of processed frames are indexed by closing speed
//! `<w, v>` (the renderer's convention), i.e. the negated range rate.

use std::f64::consts::{PI, TAU};
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Pose;
use crate::renderer::{RadarConfig, RangeDopplerFrame};

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChirpConfig {
    pub samples_per_chirp: usize,
    pub chirps_per_frame: usize,
    /// Chirps between consecutive frame starts.
    pub frame_stride: usize,
    /// Seconds.
    pub inter_chirp_period: f64,
    /// Sweep bandwidth, Hz.
    pub bandwidth: f64,
    /// Meters.
    pub wavelength: f64,
    /// Virtual channels (tx x rx).
    pub channels: usize,
    /// Range bins kept after calibration.
    pub range_bins_out: usize,
    /// Range bins dropped before truncation.
    pub calibration_offset: usize,
}

impl Default for ChirpConfig {
    fn default() -> Self {
        Self {
            samples_per_chirp: 512,
            chirps_per_frame: 256,
            frame_stride: 64,
            inter_chirp_period: 1e-3,
            bandwidth: SPEED_OF_LIGHT / (2.0 * 0.042),
            wavelength: 0.004,
            channels: 8,
            range_bins_out: 128,
            calibration_offset: 0,
        }
    }
}

impl ChirpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples_per_chirp == 0 || self.chirps_per_frame == 0 || self.channels == 0 || self.frame_stride == 0 {
            return Err(Error::invalid("chirp dimensions must be positive"));
        }
        if self.frame_stride > self.chirps_per_frame {
            return Err(Error::invalid("frame stride exceeds the frame length"));
        }
        if self.calibration_offset + self.range_bins_out > self.samples_per_chirp {
            return Err(Error::invalid("calibration offset plus output range bins exceed the range FFT"));
        }
        if !(self.bandwidth > 0.0) || !(self.inter_chirp_period > 0.0) || !(self.wavelength > 0.0) {
            return Err(Error::invalid("bandwidth, chirp period and wavelength must be positive"));
        }
        Ok(())
    }

    /// `c / (2 B)`.
    pub fn range_resolution(&self) -> f64 {
        SPEED_OF_LIGHT / (2.0 * self.bandwidth)
    }

    /// `lambda / (2 N_c T_c)`.
    pub fn doppler_resolution(&self) -> f64 {
        self.wavelength / (2.0 * self.chirps_per_frame as f64 * self.inter_chirp_period)
    }

    /// Frame geometry of processed cubes.
    pub fn radar_config(&self) -> RadarConfig {
        RadarConfig {
            range_bins: self.range_bins_out,
            range_resolution: self.range_resolution(),
            doppler_bins: self.chirps_per_frame,
            doppler_resolution: self.doppler_resolution(),
            antennas: self.channels,
            wavelength: self.wavelength,
            ..RadarConfig::default()
        }
    }
}

/// `data[(channel * chirps + chirp) * samples + sample]`.
#[derive(Debug, Clone, PartialEq)]
pub struct IqCube {
    pub channels: usize,
    pub chirps: usize,
    pub samples: usize,
    pub data: Vec<Complex64>,
}

impl IqCube {
    pub fn zeros(channels: usize, chirps: usize, samples: usize) -> Self {
        Self {
            channels,
            chirps,
            samples,
            data: vec![Complex64::new(0.0, 0.0); channels * chirps * samples],
        }
    }

    pub fn index(&self, channel: usize, chirp: usize, sample: usize) -> usize {
        (channel * self.chirps + chirp) * self.samples + sample
    }

    /// Chirps `[start, start + count)` of every channel.
    pub fn slice_chirps(&self, start: usize, count: usize) -> IqCube {
        let mut out = IqCube::zeros(self.channels, count, self.samples);
        for ch in 0..self.channels {
            let src = self.index(ch, start, 0);
            let dst = out.index(ch, 0, 0);
            out.data[dst..dst + count * self.samples].copy_from_slice(&self.data[src..src + count * self.samples]);
        }
        out
    }
}

/// A point scatterer for IQ synthesis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointTarget {
    /// Meters.
    pub range: f64,
    /// Range rate, m/s (positive when receding).
    pub radial_velocity: f64,
    pub amplitude: f64,
    /// Radians, positive toward sensor `+y`.
    pub azimuth: f64,
}

/// Beat-signal samples for `targets` over `chirps` chirps.
pub fn synthesize_iq_stream(targets: &[PointTarget], config: &ChirpConfig, chirps: usize) -> Result<IqCube> {
    config.validate()?;
    let dr = config.range_resolution();
    let max_range = config.samples_per_chirp as f64 * dr;
    let max_speed = 0.5 * config.chirps_per_frame as f64 * config.doppler_resolution();
    for t in targets {
        if !(t.range >= 0.0 && t.range < max_range) {
            return Err(Error::invalid(format!(
                "target range {} m aliases: unambiguous range is [0, {max_range:.3}) m",
                t.range
            )));
        }
        if !(t.radial_velocity.abs() < max_speed) {
            return Err(Error::invalid(format!(
                "target radial velocity {} m/s aliases: unambiguous band is (-{max_speed:.4}, {max_speed:.4}) m/s",
                t.radial_velocity
            )));
        }
        if !(t.azimuth.abs() < 0.5 * PI) {
            return Err(Error::invalid("target azimuth must lie in the front half-plane"));
        }
    }
    let mut cube = IqCube::zeros(config.channels, chirps, config.samples_per_chirp);
    let ns = config.samples_per_chirp as f64;
    for t in targets {
        let bin = t.range / dr;
        let u = 0.5 * t.azimuth.sin();
        for ch in 0..config.channels {
            for c in 0..chirps {
                let r = t.range + t.radial_velocity * c as f64 * config.inter_chirp_period;
                let slow = 2.0 * TAU * r / config.wavelength;
                let phase0 = slow + TAU * ch as f64 * u;
                for s in 0..config.samples_per_chirp {
                    let i = cube.index(ch, c, s);
                    cube.data[i] += Complex64::from_polar(t.amplitude, phase0 + TAU * bin * s as f64 / ns);
                }
            }
        }
    }
    Ok(cube)
}

/// One frame of `chirps_per_frame` chirps.
pub fn synthesize_iq(targets: &[PointTarget], config: &ChirpConfig) -> Result<IqCube> {
    synthesize_iq_stream(targets, config, config.chirps_per_frame)
}

/// Periodic Hann window of length `n`.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.5 - 0.5 * (TAU * i as f64 / n as f64).cos()).collect()
}

/// Windowed FFT along range and Doppler for every channel:
/// `[channel][range_out][doppler]`, Doppler centered and indexed by closing
/// speed, range truncated after the calibration offset.
pub fn range_doppler(cube: &IqCube, config: &ChirpConfig) -> Result<Vec<Complex64>> {
    config.validate()?;
    if cube.channels != config.channels || cube.chirps != config.chirps_per_frame || cube.samples != config.samples_per_chirp {
        return Err(Error::DimensionMismatch {
            expected: format!(
                "{} x {} x {} cube",
                config.channels, config.chirps_per_frame, config.samples_per_chirp
            ),
            actual: format!("{} x {} x {}", cube.channels, cube.chirps, cube.samples),
        });
    }
    let (nc, ns) = (cube.chirps, cube.samples);
    let mut planner = FftPlanner::<f64>::new();
    let fft_r = planner.plan_fft_forward(ns);
    let fft_d = planner.plan_fft_forward(nc);
    let (wr, wd) = (hann(ns), hann(nc));
    let nr = config.range_bins_out;
    let mut out = vec![Complex64::new(0.0, 0.0); cube.channels * nr * nc];
    let mut col = vec![Complex64::new(0.0, 0.0); nc];
    for ch in 0..cube.channels {
        let mut rows: Vec<Complex64> = cube.data[cube.index(ch, 0, 0)..cube.index(ch, 0, 0) + nc * ns].to_vec();
        for row in rows.chunks_exact_mut(ns) {
            row.iter_mut().zip(&wr).for_each(|(x, w)| *x *= w);
            fft_r.process(row);
        }
        for i in 0..nr {
            let r = i + config.calibration_offset;
            for c in 0..nc {
                col[c] = rows[c * ns + r] * wd[c];
            }
            fft_d.process(&mut col);
            for (k, v) in col.iter().enumerate() {
                // Shifted index s has range rate (s - nc/2) dD; closing speed is its negation.
                let s = (k + nc / 2) % nc;
                let j = (nc - s) % nc;
                out[(ch * nr + i) * nc + j] = *v;
            }
        }
    }
    Ok(out)
}

/// Unwindowed FFT across channels, centered: `[azimuth][range][doppler]`.
pub fn azimuth_fft(rd: &[Complex64], channels: usize, range_bins: usize, doppler_bins: usize) -> Vec<Complex64> {
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(channels);
    let plane = range_bins * doppler_bins;
    let mut out = vec![Complex64::new(0.0, 0.0); rd.len()];
    let mut buf = vec![Complex64::new(0.0, 0.0); channels];
    for p in 0..plane {
        for ch in 0..channels {
            buf[ch] = rd[ch * plane + p];
        }
        fft.process(&mut buf);
        for (k, v) in buf.iter().enumerate() {
            out[((k + channels / 2) % channels) * plane + p] = *v;
        }
    }
    out
}

/// Full chain to a magnitude frame.
pub fn process_cube(cube: &IqCube, config: &ChirpConfig, pose: Pose) -> Result<RangeDopplerFrame> {
    let rd = range_doppler(cube, config)?;
    let az = azimuth_fft(&rd, config.channels, config.range_bins_out, config.chirps_per_frame);
    let radar = config.radar_config();
    let mut frame = RangeDopplerFrame::zeros(&radar, pose);
    for (o, v) in frame.values.iter_mut().zip(&az) {
        *o = v.norm() as f32;
    }
    frame.valid = radar.speed_valid(pose.speed());
    Ok(frame)
}

/// Start offsets of the rolling frames in a stream of `total` chirps.
pub fn rolling_offsets(total: usize, config: &ChirpConfig) -> Vec<usize> {
    if total < config.chirps_per_frame {
        return Vec::new();
    }
    (0..=(total - config.chirps_per_frame) / config.frame_stride)
        .map(|i| i * config.frame_stride)
        .collect()
}

pub fn rolling_frames(stream: &IqCube, config: &ChirpConfig) -> Vec<IqCube> {
    rolling_offsets(stream.chirps, config)
        .into_iter()
        .map(|o| stream.slice_chirps(o, config.chirps_per_frame))
        .collect()
}

pub const IQ_FORMAT: &str = "dopplerfield-iq";
pub const IQ_VERSION: u32 = 1;

/// Sidecar describing a raw IQ file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IqSidecar {
    pub format: String,
    pub version: u32,
    pub chirp: ChirpConfig,
    pub channels: usize,
    pub chirps: usize,
    pub samples: usize,
    pub dtype: String,
    pub byte_order: String,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Interleaved little-endian `complex32` samples plus a `.json` sidecar.
pub fn write_iq(path: &Path, cube: &IqCube, config: &ChirpConfig) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    for z in &cube.data {
        w.write_all(&(z.re as f32).to_le_bytes()).map_err(io)?;
        w.write_all(&(z.im as f32).to_le_bytes()).map_err(io)?;
    }
    w.flush().map_err(io)?;
    let side = IqSidecar {
        format: IQ_FORMAT.into(),
        version: IQ_VERSION,
        chirp: config.clone(),
        channels: cube.channels,
        chirps: cube.chirps,
        samples: cube.samples,
        dtype: "complex32".into(),
        byte_order: "little".into(),
    };
    let sp = sidecar_path(path);
    std::fs::write(&sp, serde_json::to_string_pretty(&side)?).map_err(|e| Error::io(&sp, e))
}

pub fn read_iq(path: &Path) -> Result<(IqCube, ChirpConfig)> {
    let sp = sidecar_path(path);
    let text = std::fs::read_to_string(&sp).map_err(|e| Error::io(&sp, e))?;
    let side: IqSidecar = serde_json::from_str(&text).map_err(|e| Error::Validation {
        path: sp.clone(),
        message: format!("malformed IQ sidecar: {e}"),
    })?;
    if side.format != IQ_FORMAT || side.dtype != "complex32" || side.byte_order != "little" {
        return Err(Error::Validation {
            path: sp,
            message: "sidecar does not describe little-endian complex32 IQ".into(),
        });
    }
    if side.version != IQ_VERSION {
        return Err(Error::SchemaVersion {
            found: side.version,
            supported: IQ_VERSION,
        });
    }
    side.chirp.validate()?;
    if side.channels != side.chirp.channels || side.samples != side.chirp.samples_per_chirp {
        return Err(Error::Validation {
            path: sp,
            message: "sidecar dimensions disagree with its chirp configuration".into(),
        });
    }
    let io = |e| Error::io(path, e);
    let mut bytes = Vec::new();
    File::open(path).map_err(io)?.read_to_end(&mut bytes).map_err(io)?;
    let expected = 8 * side.channels * side.chirps * side.samples;
    if bytes.len() != expected {
        return Err(Error::Validation {
            path: path.to_path_buf(),
            message: format!("expected {expected} IQ bytes, found {}", bytes.len()),
        });
    }
    let data = bytes
        .chunks_exact(8)
        .map(|b| {
            Complex64::new(
                f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
                f32::from_le_bytes([b[4], b[5], b[6], b[7]]) as f64,
            )
        })
        .collect();
    Ok((
        IqCube {
            channels: side.channels,
            chirps: side.chirps,
            samples: side.samples,
            data,
        },
        side.chirp,
    ))
}
