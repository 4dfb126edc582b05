//! Value types that flow between generators, embedders, probes and metrics.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Side length of the square crops every embedder and landmark model consumes.
pub const CROP_SIZE: usize = 224;

/// Declared value range of an [`ImageTensor`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RangeTag {
    /// `[0, 1]`, the canonical in-memory range.
    Unit,
    /// `[0, 255]`, used for histograms, metrics and file I/O.
    Byte,
}

impl RangeTag {
    pub fn max_value(self) -> f64 {
        match self {
            RangeTag::Unit => 1.0,
            RangeTag::Byte => 255.0,
        }
    }
}

/// H×W×3 image stored row-major with interleaved channels (HWC).
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    range: RangeTag,
    pixels: Vec<f64>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, range: RangeTag, pixels: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Input(format!(
                "image dimensions must be positive, got {height}x{width}"
            )));
        }
        if pixels.len() != height * width * 3 {
            return Err(Error::Input(format!(
                "expected {} pixel values for {height}x{width}x3, got {}",
                height * width * 3,
                pixels.len()
            )));
        }
        let max = range.max_value();
        if let Some(v) = pixels.iter().find(|v| !v.is_finite()) {
            return Err(Error::Input(format!("non-finite pixel value {v}")));
        }
        if let Some(v) = pixels.iter().find(|v| **v < 0.0 || **v > max) {
            return Err(Error::Input(format!(
                "pixel value {v} outside declared range [0, {max}]"
            )));
        }
        Ok(Self {
            height,
            width,
            range,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, range: RangeTag, rgb: [f64; 3]) -> Result<Self> {
        let pixels = (0..height * width).flat_map(|_| rgb).collect();
        Self::new(height, width, range, pixels)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn range(&self) -> RangeTag {
        self.range
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<f64> {
        self.pixels
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.pixels[(y * self.width + x) * 3 + c]
    }

    pub fn same_shape(&self, other: &ImageTensor) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Copy of the image rescaled to `range`.
    pub fn to_range(&self, range: RangeTag) -> ImageTensor {
        if range == self.range {
            return self.clone();
        }
        let scale = range.max_value() / self.range.max_value();
        ImageTensor {
            height: self.height,
            width: self.width,
            range,
            pixels: self
                .pixels
                .iter()
                .map(|v| (v * scale).clamp(0.0, range.max_value()))
                .collect(),
        }
    }

    /// One channel as a contiguous vector.
    pub fn channel(&self, c: usize) -> Vec<f64> {
        self.pixels.iter().skip(c).step_by(3).copied().collect()
    }

    pub fn check_crop(&self) -> Result<()> {
        if self.height != CROP_SIZE || self.width != CROP_SIZE {
            return Err(Error::Input(format!(
                "expected a {CROP_SIZE}x{CROP_SIZE} crop, got {}x{}",
                self.height, self.width
            )));
        }
        Ok(())
    }

    /// Loads a PNG/JPEG file into the unit range.
    pub fn load(path: &Path) -> Result<ImageTensor> {
        let img = image::open(path)?.to_rgb8();
        let (w, h) = img.dimensions();
        let pixels = img.as_raw().iter().map(|&b| f64::from(b) / 255.0).collect();
        ImageTensor::new(h as usize, w as usize, RangeTag::Unit, pixels)
    }

    /// 8-bit RGB encoding of the image.
    pub fn to_rgb8(&self) -> image::RgbImage {
        let scale = 255.0 / self.range.max_value();
        let raw = self
            .pixels
            .iter()
            .map(|v| (v * scale).round().clamp(0.0, 255.0) as u8)
            .collect();
        image::RgbImage::from_raw(self.width as u32, self.height as u32, raw)
            .expect("buffer length matches dimensions")
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8()
            .save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    /// Center square crop followed by a box-filtered resize to `size`x`size`.
    ///
    /// Default preprocessing for real photographs when no alignment adapter
    /// is configured.
    pub fn center_crop_resize(&self, size: usize) -> ImageTensor {
        let side = self.height.min(self.width);
        let y0 = (self.height - side) / 2;
        let x0 = (self.width - side) / 2;
        let scale = side as f64 / size as f64;
        let mut out = Vec::with_capacity(size * size * 3);
        for oy in 0..size {
            let sy0 = (oy as f64 * scale).floor() as usize;
            let sy1 = (((oy + 1) as f64 * scale).ceil() as usize).clamp(sy0 + 1, side);
            for ox in 0..size {
                let sx0 = (ox as f64 * scale).floor() as usize;
                let sx1 = (((ox + 1) as f64 * scale).ceil() as usize).clamp(sx0 + 1, side);
                let n = ((sy1 - sy0) * (sx1 - sx0)) as f64;
                for c in 0..3 {
                    let mut acc = 0.0;
                    for sy in sy0..sy1 {
                        for sx in sx0..sx1 {
                            acc += self.get(y0 + sy, x0 + sx, c);
                        }
                    }
                    out.push(acc / n);
                }
            }
        }
        ImageTensor {
            height: size,
            width: size,
            range: self.range,
            pixels: out,
        }
    }

    /// Shift content by `(dx, dy)` whole pixels, filling exposed area with `fill`.
    pub fn translate(&self, dx: i64, dy: i64, fill: [f64; 3]) -> ImageTensor {
        let mut pixels = Vec::with_capacity(self.pixels.len());
        for y in 0..self.height as i64 {
            for x in 0..self.width as i64 {
                let sy = y - dy;
                let sx = x - dx;
                if sy >= 0 && sx >= 0 && sy < self.height as i64 && sx < self.width as i64 {
                    let base = (sy as usize * self.width + sx as usize) * 3;
                    pixels.extend_from_slice(&self.pixels[base..base + 3]);
                } else {
                    pixels.extend_from_slice(&fill);
                }
            }
        }
        ImageTensor {
            height: self.height,
            width: self.width,
            range: self.range,
            pixels,
        }
    }
}

/// Identity embedding produced by an embedder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Descriptor {
    pub values: Vec<f64>,
    pub source: String,
}

impl Descriptor {
    pub fn new(values: Vec<f64>, source: impl Into<String>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("descriptor contains non-finite values".into()));
        }
        Ok(Self {
            values,
            source: source.into(),
        })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let d: Descriptor = serde_json::from_str(&text)?;
        Descriptor::new(d.values, d.source)
    }
}

/// Generator input vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentCode {
    pub values: Vec<f64>,
}

impl LatentCode {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("latent code contains non-finite values".into()));
        }
        Ok(Self { values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// Number of points in the 68-point facial annotation scheme.
pub const LANDMARK_COUNT: usize = 68;

/// 68 facial landmarks in crop pixel coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct LandmarkSet {
    points: Vec<[f64; 2]>,
}

impl LandmarkSet {
    pub fn new(points: Vec<[f64; 2]>) -> Result<Self> {
        if points.len() != LANDMARK_COUNT {
            return Err(Error::Input(format!(
                "expected {LANDMARK_COUNT} landmarks, got {}",
                points.len()
            )));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Input("landmark coordinates must be finite".into()));
        }
        Ok(Self { points })
    }

    /// Parses the flat `[x0, y0, x1, y1, ...]` serialization.
    pub fn from_flat(values: &[f64]) -> Result<Self> {
        if values.len() != 2 * LANDMARK_COUNT {
            return Err(Error::Input(format!(
                "expected {} landmark coordinates, got {}",
                2 * LANDMARK_COUNT,
                values.len()
            )));
        }
        Self::new(values.chunks(2).map(|p| [p[0], p[1]]).collect())
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.points.iter().flat_map(|p| *p).collect()
    }

    pub fn points(&self) -> &[[f64; 2]] {
        &self.points
    }

    pub fn centroid(&self) -> [f64; 2] {
        centroid(&self.points)
    }

    /// Distance between the centroids of the two eye contours (points 36-41 and 42-47).
    pub fn interocular(&self) -> f64 {
        let a = centroid(&self.points[36..42]);
        let b = centroid(&self.points[42..48]);
        ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
    }

    pub fn translated(&self, dx: f64, dy: f64) -> LandmarkSet {
        LandmarkSet {
            points: self.points.iter().map(|p| [p[0] + dx, p[1] + dy]).collect(),
        }
    }
}

fn centroid(points: &[[f64; 2]]) -> [f64; 2] {
    let n = points.len() as f64;
    let (sx, sy) = points
        .iter()
        .fold((0.0, 0.0), |(sx, sy), p| (sx + p[0], sy + p[1]));
    [sx / n, sy / n]
}
