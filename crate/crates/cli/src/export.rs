//! PNG and raw float exports.

use std::path::Path;

use dopplerfield::renderer::RangeDopplerFrame;

use crate::CliError;

/// 8-bit grayscale PNG of a row-major `width x height` image mapped
/// linearly from `[lo, hi]`.
pub fn write_gray_png(path: &Path, width: usize, height: usize, values: &[f64], lo: f64, hi: f64) -> Result<(), CliError> {
    let span = if hi > lo { hi - lo } else { 1.0 };
    let pixels: Vec<u8> = values
        .iter()
        .map(|v| (((v - lo) / span).clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let img = image::GrayImage::from_raw(width as u32, height as u32, pixels)
        .ok_or_else(|| CliError::usage(format!("image buffer does not match {width}x{height}")))?;
    img.save(path)
        .map_err(|e| CliError::usage(format!("cannot write {}: {e}", path.display())))
}

/// Antenna-summed range-Doppler image, range increasing downward.
pub fn write_frame_png(path: &Path, frame: &RangeDopplerFrame) -> Result<(), CliError> {
    let img = frame.antenna_sum();
    let hi = img.iter().cloned().fold(0.0, f64::max);
    write_gray_png(path, frame.doppler_bins, frame.range_bins, &img, 0.0, hi)
}

/// Little-endian `f32` values.
pub fn write_f32(path: &Path, values: impl IntoIterator<Item = f64>) -> Result<(), CliError> {
    let bytes: Vec<u8> = values.into_iter().flat_map(|v| (v as f32).to_le_bytes()).collect();
    std::fs::write(path, bytes).map_err(|e| CliError::usage(format!("cannot write {}: {e}", path.display())))
}

pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::usage(format!("cannot write {}: {e}", path.display())))
}
