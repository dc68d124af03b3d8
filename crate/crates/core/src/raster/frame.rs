//! Speed frames: the per-period grid image of a road network.
//!
//! Frame archive layout (little-endian): magic `SFR1`, `u32` H, `u32` W,
//! `u32` frame count, then per frame an `i64` timestamp followed by `H·W`
//! row-major `f32` values.

use std::io::{Read, Write};

use super::network::RoadNetwork;
use super::speed::LinkSpeedVector;
use crate::autodiff::param::read_u32;
use crate::error::{Error, Result};

pub const ARCHIVE_MAGIC: &[u8; 4] = b"SFR1";

/// Default clip speed of the grayscale mapping, km/h.
pub const DEFAULT_V_MAX: f64 = 80.0;

#[derive(Clone, Debug, PartialEq)]
pub struct SpeedFrame {
    pub timestamp: i64,
    pub rows: usize,
    pub cols: usize,
    /// km/h, row-major; 0 where no link crosses the cell.
    pub values: Vec<f32>,
}

/// A frame scaled into `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedFrame {
    pub timestamp: i64,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f32>,
}

impl SpeedFrame {
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.values[row * self.cols + col]
    }
}

/// Paints link speeds onto the grid: each cell takes the mean speed of the
/// links crossing it, or 0 if none does.
pub fn rasterize(network: &RoadNetwork, speeds: &LinkSpeedVector, timestamp: i64) -> Result<SpeedFrame> {
    let mut by_index = vec![None; network.links().len()];
    for (&id, &v) in &speeds.speeds {
        let li = network.link_index(id).ok_or(Error::UnknownLink(id))?;
        by_index[li] = v;
    }
    let by_index: Vec<f64> = by_index
        .into_iter()
        .enumerate()
        .map(|(li, v)| {
            v.ok_or_else(|| {
                Error::Contract(format!(
                    "speed of link {} missing; fill gaps before rasterizing",
                    network.links()[li].id()
                ))
            })
        })
        .collect::<Result<_>>()?;
    Ok(rasterize_speeds(network, &by_index, timestamp))
}

/// Same as [`rasterize`] with speeds already in canonical link order.
pub fn rasterize_speeds(network: &RoadNetwork, speeds: &[f64], timestamp: i64) -> SpeedFrame {
    let (rows, cols) = network.grid_dims();
    let mut values = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let links = network.links_in_cell(r, c);
            let v = if links.is_empty() {
                0.0
            } else {
                links.iter().map(|&li| speeds[li]).sum::<f64>() / links.len() as f64
            };
            values.push(v as f32);
        }
    }
    SpeedFrame {
        timestamp,
        rows,
        cols,
        values,
    }
}

/// Clip-and-scale grayscale mapping `v -> min(max(v, 0), v_max) / v_max`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Normalizer {
    v_max: f64,
}

impl Normalizer {
    pub fn new(v_max: f64) -> Result<Self> {
        if !(v_max > 0.0) || !v_max.is_finite() {
            return Err(Error::config("raster.v_max", format!("{v_max} is not positive")));
        }
        Ok(Normalizer { v_max })
    }

    pub fn v_max(&self) -> f64 {
        self.v_max
    }

    pub fn normalize(&self, v: f64) -> f64 {
        v.clamp(0.0, self.v_max) / self.v_max
    }

    pub fn denormalize(&self, x: f64) -> f64 {
        x * self.v_max
    }

    pub fn normalize_frame(&self, frame: &SpeedFrame) -> NormalizedFrame {
        NormalizedFrame {
            timestamp: frame.timestamp,
            rows: frame.rows,
            cols: frame.cols,
            values: frame
                .values
                .iter()
                .map(|&v| self.normalize(v as f64) as f32)
                .collect(),
        }
    }
}

pub fn normalize_frame(frame: &SpeedFrame, v_max: f64) -> Result<NormalizedFrame> {
    Ok(Normalizer::new(v_max)?.normalize_frame(frame))
}

pub fn write_archive<W: Write>(mut w: W, frames: &[SpeedFrame]) -> Result<()> {
    let (rows, cols) = frames.first().map_or((0, 0), |f| (f.rows, f.cols));
    if frames.iter().any(|f| f.rows != rows || f.cols != cols) {
        return Err(Error::shape("frames in one archive must share dimensions"));
    }
    w.write_all(ARCHIVE_MAGIC)?;
    for d in [rows, cols, frames.len()] {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for f in frames {
        w.write_all(&f.timestamp.to_le_bytes())?;
        for &v in &f.values {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_archive<R: Read>(mut r: R) -> Result<Vec<SpeedFrame>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != ARCHIVE_MAGIC {
        return Err(Error::Format(format!("bad frame archive magic {magic:?}")));
    }
    let rows = read_u32(&mut r)? as usize;
    let cols = read_u32(&mut r)? as usize;
    let count = read_u32(&mut r)? as usize;
    let mut frames = Vec::with_capacity(count);
    let mut buf8 = [0u8; 8];
    let mut buf4 = [0u8; 4];
    for _ in 0..count {
        r.read_exact(&mut buf8)?;
        let timestamp = i64::from_le_bytes(buf8);
        let mut values = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            r.read_exact(&mut buf4)?;
            values.push(f32::from_le_bytes(buf4));
        }
        frames.push(SpeedFrame {
            timestamp,
            rows,
            cols,
            values,
        });
    }
    Ok(frames)
}
