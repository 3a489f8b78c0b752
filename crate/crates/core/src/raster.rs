//! In-memory raster types shared by every stage of the pipeline, plus
//! 8-bit file I/O.
//!
//! Images are row-major with interleaved channels and values in `[0, 1]`.
//! Binary masks follow the thresholding rule used by the mask-stack format:
//! an 8-bit gray value `v` is foreground iff `v >= 128`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Gray level at or above which an 8-bit mask pixel counts as foreground.
pub const MASK_THRESHOLD: u8 = 128;

/// A solid fill color with components in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rgb(pub [f64; 3]);

impl Rgb {
    pub const WHITE: Rgb = Rgb([1.0, 1.0, 1.0]);
    pub const BLACK: Rgb = Rgb([0.0, 0.0, 0.0]);

    pub fn new(r: f64, g: f64, b: f64) -> Self {
        Rgb([r, g, b])
    }

    pub fn gray(v: f64) -> Self {
        Rgb([v, v, v])
    }

    pub fn clamped(self) -> Self {
        Rgb(self.0.map(|c| c.clamp(0.0, 1.0)))
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|c| c.is_finite())
    }

    /// Quantize to 8 bits per channel (round half up, clamped).
    pub fn to_u8(self) -> [u8; 3] {
        self.0.map(to_u8)
    }

    pub fn from_u8(c: [u8; 3]) -> Self {
        Rgb(c.map(|v| f64::from(v) / 255.0))
    }

    /// `#rrggbb`, lowercase.
    pub fn to_hex(self) -> String {
        let [r, g, b] = self.to_u8();
        format!("#{r:02x}{g:02x}{b:02x}")
    }
}

pub(crate) fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

/// Row-major `width × height × channels` image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterImage {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl RasterImage {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self::filled(width, height, channels, 0.0)
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        assert!(channels == 1 || channels == 3, "channels must be 1 or 3");
        RasterImage {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn from_rgb(width: usize, height: usize, color: Rgb) -> Self {
        let mut img = Self::new(width, height, 3);
        for px in img.data.chunks_exact_mut(3) {
            px.copy_from_slice(&color.0);
        }
        img
    }

    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::Shape(format!(
                "unsupported channel count {channels}"
            )));
        }
        if data.len() != width * height * channels {
            return Err(Error::Shape(format!(
                "data length {} does not match {width}x{height}x{channels}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite pixel value".into()));
        }
        Ok(RasterImage {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn same_shape(&self, other: &RasterImage) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn pixel_rgb(&self, x: usize, y: usize) -> Rgb {
        if self.channels == 1 {
            Rgb::gray(self.get(x, y, 0))
        } else {
            Rgb([self.get(x, y, 0), self.get(x, y, 1), self.get(x, y, 2)])
        }
    }

    /// Expand a single-channel image to RGB; RGB images are cloned.
    pub fn to_rgb(&self) -> RasterImage {
        if self.channels == 3 {
            return self.clone();
        }
        let data = self.data.iter().flat_map(|&v| [v, v, v]).collect();
        RasterImage {
            width: self.width,
            height: self.height,
            channels: 3,
            data,
        }
    }

    /// Rec. 601 luma for RGB inputs; single-channel images are cloned.
    pub fn to_gray(&self) -> RasterImage {
        if self.channels == 1 {
            return self.clone();
        }
        let data = self
            .data
            .chunks_exact(3)
            .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
            .collect();
        RasterImage {
            width: self.width,
            height: self.height,
            channels: 1,
            data,
        }
    }

    /// Box-filter downsampling by an integer factor. Dimensions must divide.
    pub fn downsample(&self, factor: usize) -> Result<RasterImage> {
        if factor == 0 || !self.width.is_multiple_of(factor) || !self.height.is_multiple_of(factor) {
            return Err(Error::Shape(format!(
                "cannot downsample {}x{} by {factor}",
                self.width, self.height
            )));
        }
        let (w, h, c) = (self.width / factor, self.height / factor, self.channels);
        let mut out = RasterImage::new(w, h, c);
        let norm = 1.0 / (factor * factor) as f64;
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let mut acc = 0.0;
                    for sy in 0..factor {
                        for sx in 0..factor {
                            acc += self.get(x * factor + sx, y * factor + sy, ch);
                        }
                    }
                    out.set(x, y, ch, acc * norm);
                }
            }
        }
        Ok(out)
    }

    /// Bilinear resampling to an arbitrary size (pixel-center aligned).
    pub fn resize_bilinear(&self, width: usize, height: usize) -> RasterImage {
        let mut out = RasterImage::new(width, height, self.channels);
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        for y in 0..height {
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let ty = fy - y0 as f64;
            for x in 0..width {
                let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let tx = fx - x0 as f64;
                for c in 0..self.channels {
                    let top = self.get(x0, y0, c) * (1.0 - tx) + self.get(x1, y0, c) * tx;
                    let bot = self.get(x0, y1, c) * (1.0 - tx) + self.get(x1, y1, c) * tx;
                    out.set(x, y, c, top * (1.0 - ty) + bot * ty);
                }
            }
        }
        out
    }

    pub fn load(path: &Path) -> Result<RasterImage> {
        let img = image::open(path).map_err(|e| Error::Format {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        let data = rgb.as_raw().iter().map(|&v| f64::from(v) / 255.0).collect();
        RasterImage::from_vec(w as usize, h as usize, 3, data)
    }

    /// Write as 8-bit PNG or PPM/PGM (chosen by extension).
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.data.iter().map(|&v| to_u8(v)).collect();
        let (w, h) = (self.width as u32, self.height as u32);
        let color = if self.channels == 1 {
            image::ExtendedColorType::L8
        } else {
            image::ExtendedColorType::Rgb8
        };
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .unwrap_or("")
            .to_ascii_lowercase();
        let format = match ext.as_str() {
            "ppm" | "pgm" | "pnm" => image::ImageFormat::Pnm,
            _ => image::ImageFormat::Png,
        };
        image::save_buffer_with_format(path, &bytes, w, h, color, format).map_err(|e| Error::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }
}

/// Peak signal-to-noise ratio in dB for images in `[0, 1]`.
pub fn psnr(a: &RasterImage, b: &RasterImage) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::Shape("psnr: image shapes differ".into()));
    }
    let mse = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.data.len().max(1) as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

/// Strictly binary `width × height` raster.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize) -> Self {
        BinaryMask {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    pub fn full(width: usize, height: usize) -> Self {
        BinaryMask {
            width,
            height,
            data: vec![true; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut m = Self::new(width, height);
        for y in 0..height {
            for x in 0..width {
                m.data[y * width + x] = f(x, y);
            }
        }
        m
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Shape(format!(
                "mask data length {} does not match {width}x{height}",
                data.len()
            )));
        }
        Ok(BinaryMask {
            width,
            height,
            data,
        })
    }

    /// Threshold 8-bit gray values at [`MASK_THRESHOLD`].
    pub fn from_gray_u8(width: usize, height: usize, gray: &[u8]) -> Result<Self> {
        Self::from_vec(
            width,
            height,
            gray.iter().map(|&v| v >= MASK_THRESHOLD).collect(),
        )
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    /// Out-of-bounds reads return `false`.
    #[inline]
    pub fn get_signed(&self, x: i64, y: i64) -> bool {
        x >= 0
            && y >= 0
            && (x as usize) < self.width
            && (y as usize) < self.height
            && self.data[y as usize * self.width + x as usize]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&v| v)
    }

    pub fn intersection_count(&self, other: &BinaryMask) -> usize {
        debug_assert_eq!(self.dims(), other.dims());
        self.data
            .iter()
            .zip(&other.data)
            .filter(|(a, b)| **a && **b)
            .count()
    }

    pub fn union_with(&mut self, other: &BinaryMask) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a |= *b;
        }
    }

    /// Bounding box `(x0, y0, x1, y1)` (exclusive max) of foreground pixels.
    pub fn bbox(&self) -> Option<(usize, usize, usize, usize)> {
        let mut bb: Option<(usize, usize, usize, usize)> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    bb = Some(match bb {
                        None => (x, y, x + 1, y + 1),
                        Some((x0, y0, x1, y1)) => {
                            (x0.min(x), y0.min(y), x1.max(x + 1), y1.max(y + 1))
                        }
                    });
                }
            }
        }
        bb
    }

    pub fn to_image(&self) -> RasterImage {
        let data = self
            .data
            .iter()
            .map(|&v| if v { 1.0 } else { 0.0 })
            .collect();
        RasterImage {
            width: self.width,
            height: self.height,
            channels: 1,
            data,
        }
    }

    pub fn load(path: &Path) -> Result<BinaryMask> {
        let img = image::open(path).map_err(|e| Error::Format {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let gray = img.to_luma8();
        let (w, h) = gray.dimensions();
        Self::from_gray_u8(w as usize, h as usize, gray.as_raw())
    }

    /// Foreground written as 255, background as 0.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.data.iter().map(|&v| if v { 255 } else { 0 }).collect();
        image::save_buffer_with_format(
            path,
            &bytes,
            self.width as u32,
            self.height as u32,
            image::ExtendedColorType::L8,
            image::ImageFormat::Png,
        )
        .map_err(|e| Error::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }
}
