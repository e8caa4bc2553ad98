use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::shapes::PointCloudShape;
use crate::error::{Error, Result};

/// Radius, in pixels, of the disk splatted for every projected point.
pub const SPLAT_RADIUS_PX: f64 = 1.5;

/// Camera direction in radians. Azimuth rotates about +z, elevation tilts
/// the camera above the xy plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct View {
    pub azimuth: f64,
    pub elevation: f64,
}

impl View {
    pub fn new(azimuth: f64, elevation: f64) -> Self {
        Self { azimuth, elevation }
    }

    /// `count` views at evenly spaced azimuths starting from 0.
    pub fn ring(count: usize, elevation: f64) -> Vec<View> {
        (0..count)
            .map(|k| View::new(2.0 * std::f64::consts::PI * k as f64 / count as f64, elevation))
            .collect()
    }

    /// Orthonormal image-plane axes (right, up).
    fn basis(&self) -> ([f64; 3], [f64; 3]) {
        let (sa, ca) = self.azimuth.sin_cos();
        let (se, ce) = self.elevation.sin_cos();
        ([-sa, ca, 0.0], [-se * ca, -se * sa, ce])
    }
}

/// Projection model used for silhouettes. Only orthographic is supported.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CameraModel {
    #[default]
    Orthographic,
}

/// Square binary silhouette, row-major, row 0 at the top.
#[derive(Debug, Clone, PartialEq)]
pub struct SilhouetteImage {
    pub resolution: usize,
    pub pixels: Vec<f64>,
    pub view: View,
}

impl SilhouetteImage {
    pub fn blank(resolution: usize, view: View) -> Self {
        Self { resolution, pixels: vec![0.0; resolution * resolution], view }
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.resolution + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.pixels[row * self.resolution + col] = value.clamp(0.0, 1.0);
    }

    pub fn mass(&self) -> f64 {
        self.pixels.iter().sum()
    }

    /// Writes an 8-bit grayscale PNG.
    pub fn write_png(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut encoder = png::Encoder::new(BufWriter::new(file), self.resolution as u32, self.resolution as u32);
        encoder.set_color(png::ColorType::Grayscale);
        encoder.set_depth(png::BitDepth::Eight);
        let mut writer = encoder.write_header().map_err(|e| Error::Png(e.to_string()))?;
        let bytes: Vec<u8> = self.pixels.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        writer.write_image_data(&bytes).map_err(|e| Error::Png(e.to_string()))?;
        writer.finish().map_err(|e| Error::Png(e.to_string()))
    }

    /// Reads an 8-bit grayscale PNG written by [`SilhouetteImage::write_png`].
    pub fn read_png(path: &Path, view: View) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let decoder = png::Decoder::new(BufReader::new(file));
        let mut reader = decoder.read_info().map_err(|e| Error::Png(e.to_string()))?;
        let info = reader.info();
        if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Eight {
            return Err(Error::Png(format!("{}: expected 8-bit grayscale", path.display())));
        }
        if info.width != info.height {
            return Err(Error::Png(format!("{}: image is not square", path.display())));
        }
        let res = info.width as usize;
        let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(res * res)];
        let frame = reader.next_frame(&mut buf).map_err(|e| Error::Png(e.to_string()))?;
        let pixels = buf[..frame.buffer_size()].iter().map(|&b| b as f64 / 255.0).collect();
        Ok(Self { resolution: res, pixels, view })
    }
}

/// Orthographic silhouette: every point is projected onto the view plane
/// (`[-1, 1]` maps to the full image) and splatted as a disk of radius
/// [`SPLAT_RADIUS_PX`] with value 1 on a 0 background.
pub fn render_silhouette(shape: &PointCloudShape, view: View, resolution: usize) -> Result<SilhouetteImage> {
    if resolution < 8 {
        return Err(Error::Config(format!("silhouette resolution must be at least 8, got {resolution}")));
    }
    let (right, up) = view.basis();
    let res = resolution as f64;
    let mut image = SilhouetteImage::blank(resolution, view);
    let r2 = SPLAT_RADIUS_PX * SPLAT_RADIUS_PX;
    for p in &shape.points {
        let u = p[0] * right[0] + p[1] * right[1] + p[2] * right[2];
        let v = p[0] * up[0] + p[1] * up[1] + p[2] * up[2];
        let col = (u + 1.0) / 2.0 * res - 0.5;
        let row = (1.0 - v) / 2.0 * res - 0.5;
        let c0 = (col - SPLAT_RADIUS_PX).ceil().max(0.0) as usize;
        let c1 = (col + SPLAT_RADIUS_PX).floor().min(res - 1.0);
        let r0 = (row - SPLAT_RADIUS_PX).ceil().max(0.0) as usize;
        let r1 = (row + SPLAT_RADIUS_PX).floor().min(res - 1.0);
        if c1 < 0.0 || r1 < 0.0 {
            continue;
        }
        for r in r0..=r1 as usize {
            for c in c0..=c1 as usize {
                let (dr, dc) = (r as f64 - row, c as f64 - col);
                if dr * dr + dc * dc <= r2 {
                    image.set(r, c, 1.0);
                }
            }
        }
    }
    Ok(image)
}
