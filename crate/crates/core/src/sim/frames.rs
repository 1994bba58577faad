//! PNG frame dumps: 8-bit RGB, 16-bit millimeter depth, 16-bit instance labels.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use super::render::GroundTruthFrame;
use super::SimError;
use crate::geometry::Observation;

fn write_png<W: Write>(out: W, width: u32, height: u32, color: png::ColorType, depth: png::BitDepth, data: &[u8]) -> Result<(), SimError> {
    let mut enc = png::Encoder::new(out, width, height);
    enc.set_color(color);
    enc.set_depth(depth);
    let mut w = enc.write_header().map_err(|e| SimError::Io(e.to_string()))?;
    w.write_image_data(data).map_err(|e| SimError::Io(e.to_string()))
}

fn create(path: &Path) -> Result<BufWriter<File>, SimError> {
    File::create(path).map(BufWriter::new).map_err(|e| SimError::Io(format!("{}: {e}", path.display())))
}

/// RGB image encoded as PNG bytes.
pub fn encode_rgb_png(obs: &Observation) -> Result<Vec<u8>, SimError> {
    let mut buf = Vec::new();
    let data: Vec<u8> = obs.rgb.data.iter().flatten().copied().collect();
    write_png(&mut buf, obs.rgb.width, obs.rgb.height, png::ColorType::Rgb, png::BitDepth::Eight, &data)?;
    Ok(buf)
}

/// Depth in millimeters, saturating at 65535; 0 stays invalid.
pub fn depth_mm(obs: &Observation) -> Vec<u16> {
    obs.depth.data.iter().map(|d| (d * 1000.0).round().clamp(0.0, u16::MAX as f64) as u16).collect()
}

fn be_bytes(values: impl Iterator<Item = u16>) -> Vec<u8> {
    values.flat_map(u16::to_be_bytes).collect()
}

/// Writes `{prefix}_rgb.png`, `{prefix}_depth.png` and `{prefix}_label.png`.
pub fn write_frames(dir: &Path, prefix: &str, obs: &Observation, gt: &GroundTruthFrame) -> Result<Vec<PathBuf>, SimError> {
    std::fs::create_dir_all(dir).map_err(|e| SimError::Io(format!("{}: {e}", dir.display())))?;
    let (w, h) = (obs.rgb.width, obs.rgb.height);
    let rgb = dir.join(format!("{prefix}_rgb.png"));
    std::fs::write(&rgb, encode_rgb_png(obs)?).map_err(|e| SimError::Io(e.to_string()))?;
    let depth = dir.join(format!("{prefix}_depth.png"));
    write_png(create(&depth)?, w, h, png::ColorType::Grayscale, png::BitDepth::Sixteen, &be_bytes(depth_mm(obs).into_iter()))?;
    let label = dir.join(format!("{prefix}_label.png"));
    let ids = gt.instance.data.iter().map(|&i| i.min(u16::MAX as u32) as u16);
    write_png(create(&label)?, w, h, png::ColorType::Grayscale, png::BitDepth::Sixteen, &be_bytes(ids))?;
    Ok(vec![rgb, depth, label])
}
