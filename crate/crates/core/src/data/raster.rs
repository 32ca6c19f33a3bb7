//! Semantic map rasters: the TRJGRID1 container and agent-centric crops.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAGIC: &[u8] = b"TRJGRID1";

/// `channels` grids of `height × width` cells, channel-major then row-major.
/// Cell `(row, col)` covers world `[origin + (col, row)·r, origin + (col+1, row+1)·r)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MapRaster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub resolution: f64,
    pub origin: [f64; 2],
    pub values: Vec<f32>,
}

impl MapRaster {
    pub fn new(
        width: usize,
        height: usize,
        channels: usize,
        resolution: f64,
        origin: [f64; 2],
        values: Vec<f32>,
    ) -> Result<Self> {
        let map = Self {
            width,
            height,
            channels,
            resolution,
            origin,
            values,
        };
        map.validate()?;
        Ok(map)
    }

    pub fn zeros(width: usize, height: usize, channels: usize, resolution: f64, origin: [f64; 2]) -> Result<Self> {
        Self::new(
            width,
            height,
            channels,
            resolution,
            origin,
            vec![0.0; width * height * channels],
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 || self.channels == 0 {
            return Err(Error::Raster("width, height and channels must be at least 1".into()));
        }
        if !(self.resolution > 0.0 && self.resolution.is_finite()) {
            return Err(Error::Raster(format!(
                "resolution must be positive, got {}",
                self.resolution
            )));
        }
        if !self.origin.iter().all(|v| v.is_finite()) {
            return Err(Error::Raster("origin must be finite".into()));
        }
        let expected = self.width * self.height * self.channels;
        if self.values.len() != expected {
            return Err(Error::Raster(format!(
                "payload has {} values, header implies {expected}",
                self.values.len()
            )));
        }
        if let Some(i) = self.values.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Raster(format!("value {} at {i} outside [0, 1]", self.values[i])));
        }
        Ok(())
    }

    pub fn index(&self, channel: usize, row: usize, col: usize) -> usize {
        (channel * self.height + row) * self.width + col
    }

    pub fn get(&self, channel: usize, row: usize, col: usize) -> f32 {
        self.values[self.index(channel, row, col)]
    }

    pub fn set(&mut self, channel: usize, row: usize, col: usize, v: f32) {
        let i = self.index(channel, row, col);
        self.values[i] = v;
    }

    /// `(row, col)` of the cell containing a world point, if inside the map.
    pub fn cell_of(&self, p: [f64; 2]) -> Option<(usize, usize)> {
        let c = ((p[0] - self.origin[0]) / self.resolution).floor();
        let r = ((p[1] - self.origin[1]) / self.resolution).floor();
        (c >= 0.0 && r >= 0.0 && (c as usize) < self.width && (r as usize) < self.height)
            .then_some((r as usize, c as usize))
    }

    /// World coordinates of a cell center.
    pub fn cell_center(&self, row: usize, col: usize) -> [f64; 2] {
        [
            self.origin[0] + (col as f64 + 0.5) * self.resolution,
            self.origin[1] + (row as f64 + 0.5) * self.resolution,
        ]
    }

    /// Continuous cell coordinates `(x, y)` in units of cells, where cell
    /// `(row, col)` has its center at `(col + 0.5, row + 0.5)`.
    fn grid_coords(&self, p: [f64; 2]) -> (f64, f64) {
        (
            (p[0] - self.origin[0]) / self.resolution,
            (p[1] - self.origin[1]) / self.resolution,
        )
    }

    fn sample_nearest(&self, channel: usize, p: [f64; 2], pad: f32) -> f32 {
        match self.cell_of(p) {
            Some((r, c)) => self.get(channel, r, c),
            None => pad,
        }
    }

    fn sample_bilinear(&self, channel: usize, p: [f64; 2], pad: f32) -> f32 {
        let (gx, gy) = self.grid_coords(p);
        let (x, y) = (gx - 0.5, gy - 0.5);
        let (x0, y0) = (x.floor(), y.floor());
        let (fx, fy) = ((x - x0) as f32, (y - y0) as f32);
        let at = |r: f64, c: f64| -> f32 {
            if r < 0.0 || c < 0.0 || r as usize >= self.height || c as usize >= self.width {
                pad
            } else {
                self.get(channel, r as usize, c as usize)
            }
        };
        let top = at(y0, x0) * (1.0 - fx) + at(y0, x0 + 1.0) * fx;
        let bottom = at(y0 + 1.0, x0) * (1.0 - fx) + at(y0 + 1.0, x0 + 1.0) * fx;
        top * (1.0 - fy) + bottom * fy
    }
}

pub fn write_map_raster(path: &Path, map: &MapRaster) -> Result<()> {
    map.validate()?;
    let mut buf = Vec::with_capacity(64 + map.values.len() * 4);
    buf.extend_from_slice(MAGIC);
    buf.push(b'\n');
    writeln!(
        buf,
        "{} {} {} {} {} {}",
        map.width, map.height, map.channels, map.resolution, map.origin[0], map.origin[1]
    )?;
    for v in &map.values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_map_raster(path: &Path) -> Result<MapRaster> {
    parse_map_raster(&fs::read(path)?)
}

pub fn parse_map_raster(bytes: &[u8]) -> Result<MapRaster> {
    if !bytes.starts_with(MAGIC) {
        return Err(Error::Raster("missing TRJGRID1 magic".into()));
    }
    let rest = &bytes[MAGIC.len()..];
    let rest = rest
        .strip_prefix(b"\n")
        .or_else(|| rest.strip_prefix(b"\r\n"))
        .ok_or_else(|| Error::Raster("magic must be followed by a newline".into()))?;
    let eol = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Raster("missing header line".into()))?;
    let header = std::str::from_utf8(&rest[..eol]).map_err(|_| Error::Raster("header is not ASCII".into()))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 6 {
        return Err(Error::Raster(format!("header needs 6 fields, found {}", fields.len())));
    }
    let int = |s: &str, what: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::Raster(format!("bad {what} `{s}`")))
    };
    let float = |s: &str, what: &str| s.parse::<f64>().map_err(|_| Error::Raster(format!("bad {what} `{s}`")));
    let width = int(fields[0], "width")?;
    let height = int(fields[1], "height")?;
    let channels = int(fields[2], "channels")?;
    let resolution = float(fields[3], "resolution")?;
    let origin = [float(fields[4], "origin_x")?, float(fields[5], "origin_y")?];
    let payload = &rest[eol + 1..];
    let n = width
        .checked_mul(height)
        .and_then(|v| v.checked_mul(channels))
        .ok_or_else(|| Error::Raster("raster dimensions overflow".into()))?;
    if payload.len() != n * 4 {
        return Err(Error::Raster(format!(
            "payload is {} bytes, header implies {}",
            payload.len(),
            n * 4
        )));
    }
    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    MapRaster::new(width, height, channels, resolution, origin, values)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    #[default]
    Nearest,
    Bilinear,
}

/// Geometry of an agent-centric crop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CropSpec {
    /// Side length of the crop in meters.
    pub context: f64,
    /// Output meters per cell.
    pub resolution: f64,
    /// Distance of the agent from the rear edge as a fraction of `context`.
    #[serde(default = "default_rear_fraction")]
    pub rear_fraction: f64,
    #[serde(default)]
    pub pad: f32,
    #[serde(default)]
    pub interpolation: Interpolation,
}

fn default_rear_fraction() -> f64 {
    0.25
}

impl CropSpec {
    pub fn new(context: f64, resolution: f64) -> Self {
        Self {
            context,
            resolution,
            rear_fraction: default_rear_fraction(),
            pad: 0.0,
            interpolation: Interpolation::Nearest,
        }
    }

    /// Cells per side.
    pub fn size(&self) -> usize {
        (self.context / self.resolution).round().max(1.0) as usize
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.context > 0.0 && self.resolution > 0.0) {
            return Err(Error::InvalidInput(
                "crop context and resolution must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.rear_fraction) {
            return Err(Error::InvalidInput("crop rear_fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// World point sampled by output cell `(row, col)`: columns run along the
    /// heading, rows along its left normal.
    pub fn sample_point(&self, position: [f64; 2], heading: f64, row: usize, col: usize) -> [f64; 2] {
        let u = (col as f64 + 0.5) * self.resolution - self.rear_fraction * self.context;
        let w = (row as f64 + 0.5) * self.resolution - 0.5 * self.context;
        let (s, c) = heading.sin_cos();
        [position[0] + u * c - w * s, position[1] + u * s + w * c]
    }
}

/// Local raster `[channels × size × size]`, channel-major then row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapCrop {
    pub size: usize,
    pub channels: usize,
    pub values: Vec<f64>,
}

impl MapCrop {
    pub fn get(&self, channel: usize, row: usize, col: usize) -> f64 {
        self.values[(channel * self.size + row) * self.size + col]
    }
}

/// Crops a `size × size × L` window around `position`, rotated so the heading
/// points along increasing columns. Cells outside the map take `spec.pad`.
pub fn crop_rotate_map(map: &MapRaster, position: [f64; 2], heading: f64, spec: &CropSpec) -> MapCrop {
    let size = spec.size();
    let mut values = Vec::with_capacity(map.channels * size * size);
    for ch in 0..map.channels {
        for row in 0..size {
            for col in 0..size {
                let p = spec.sample_point(position, heading, row, col);
                let v = match spec.interpolation {
                    Interpolation::Nearest => map.sample_nearest(ch, p, spec.pad),
                    Interpolation::Bilinear => map.sample_bilinear(ch, p, spec.pad),
                };
                values.push(f64::from(v));
            }
        }
    }
    MapCrop {
        size,
        channels: map.channels,
        values,
    }
}
