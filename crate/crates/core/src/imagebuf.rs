//! Floating-point raster images, PPM I/O and quality metrics.
//!
//! Pixels are stored row-major and channel-interleaved with intensities in
//! `[0, 1]`. Quantization to bytes only happens in [`save_ppm`].
//!
//! Geometry uses normalized coordinates with the image center at the origin:
//! pixel `(col c, row r)` of a `w x h` image sits at
//! `x = (c + 0.5) / w - 0.5`, `y = (r + 0.5) / h - 0.5`. The y axis points
//! down, so `y = -0.5` is the top edge of the raster.

use crate::error::{Error, Result};

/// A point in normalized image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const ZERO: Point = Point { x: 0.0, y: 0.0 };

    pub const fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn dist_sq(self, other: Point) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        dx * dx + dy * dy
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl std::ops::Add for Point {
    type Output = Point;
    fn add(self, o: Point) -> Point {
        Point::new(self.x + o.x, self.y + o.y)
    }
}

impl std::ops::Sub for Point {
    type Output = Point;
    fn sub(self, o: Point) -> Point {
        Point::new(self.x - o.x, self.y - o.y)
    }
}

impl std::ops::Mul<f64> for Point {
    type Output = Point;
    fn mul(self, s: f64) -> Point {
        Point::new(self.x * s, self.y * s)
    }
}

/// Normalized coordinates of the center of pixel `(col, row)`.
#[inline]
pub fn pixel_center(col: usize, row: usize, width: usize, height: usize) -> Point {
    Point::new(
        (col as f64 + 0.5) / width as f64 - 0.5,
        (row as f64 + 0.5) / height as f64 - 0.5,
    )
}

/// Continuous pixel-space position (column, row) of a normalized point.
#[inline]
pub fn to_pixel(p: Point, width: usize, height: usize) -> (f64, f64) {
    ((p.x + 0.5) * width as f64 - 0.5, (p.y + 0.5) * height as f64 - 0.5)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    /// Builds an image, checking the buffer length and intensity range.
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::arg(format!("zero image dimension {width}x{height}")));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::arg(format!("unsupported channel count {channels}")));
        }
        if data.len() != width * height * channels {
            return Err(Error::arg(format!(
                "buffer length {} does not match {width}x{height}x{channels}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::arg(format!("intensity {} at index {i} outside [0, 1]", data[i])));
        }
        Ok(Image {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Result<Self> {
        Image::new(width, height, channels, vec![value; width * height * channels])
    }

    /// Builds an image from values that are clamped into `[0, 1]`.
    ///
    /// Used by resampling code whose convex combinations can drift an ulp
    /// outside the unit interval.
    pub(crate) fn from_clamped(width: usize, height: usize, channels: usize, mut data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), width * height * channels);
        for v in &mut data {
            *v = v.clamp(0.0, 1.0);
        }
        Image {
            width,
            height,
            channels,
            data,
        }
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, col: usize, row: usize, ch: usize) -> f64 {
        self.data[(row * self.width + col) * self.channels + ch]
    }

    /// Pixel value, or `pad` when `(col, row)` lies outside the raster.
    #[inline]
    pub fn get_or(&self, col: isize, row: isize, ch: usize, pad: f64) -> f64 {
        if col < 0 || row < 0 || col as usize >= self.width || row as usize >= self.height {
            pad
        } else {
            self.get(col as usize, row as usize, ch)
        }
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    /// Mean of the channels; identity for single-channel images.
    pub fn to_gray(&self) -> Image {
        if self.channels == 1 {
            return self.clone();
        }
        let data = self
            .data
            .chunks_exact(3)
            .map(|px| (px[0] + px[1] + px[2]) / 3.0)
            .collect();
        Image::from_clamped(self.width, self.height, 1, data)
    }

    /// Separable Gaussian blur with clamp-to-edge borders.
    pub fn gaussian_blur(&self, sigma: f64) -> Image {
        if sigma <= 0.0 {
            return self.clone();
        }
        let radius = (3.0 * sigma).ceil() as isize;
        let kernel: Vec<f64> = (-radius..=radius)
            .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
            .collect();
        let norm: f64 = kernel.iter().sum();
        let kernel: Vec<f64> = kernel.into_iter().map(|k| k / norm).collect();

        let (w, h, c) = (self.width as isize, self.height as isize, self.channels);
        let mut tmp = vec![0.0; self.data.len()];
        for row in 0..h {
            for col in 0..w {
                for ch in 0..c {
                    let mut acc = 0.0;
                    for (k, wk) in kernel.iter().enumerate() {
                        let cc = (col + k as isize - radius).clamp(0, w - 1);
                        acc += wk * self.get(cc as usize, row as usize, ch);
                    }
                    tmp[((row * w + col) as usize) * c + ch] = acc;
                }
            }
        }
        let mut out = vec![0.0; self.data.len()];
        for row in 0..h {
            for col in 0..w {
                for ch in 0..c {
                    let mut acc = 0.0;
                    for (k, wk) in kernel.iter().enumerate() {
                        let rr = (row + k as isize - radius).clamp(0, h - 1);
                        acc += wk * tmp[((rr * w + col) as usize) * c + ch];
                    }
                    out[((row * w + col) as usize) * c + ch] = acc;
                }
            }
        }
        Image::from_clamped(self.width, self.height, self.channels, out)
    }
}

struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderReader<'a> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::Parse {
            offset: self.pos,
            message: message.into(),
        }
    }

    /// Skips whitespace and `#` comments that run to end of line.
    fn skip_space(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                b if b.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.err(format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Parse {
                offset: start,
                message: format!("{what} out of range"),
            })
    }
}

/// Decodes a binary PPM (`P6`) or PGM (`P5`) with maxval 255.
pub fn load_ppm(bytes: &[u8]) -> Result<Image> {
    let mut rd = HeaderReader { bytes, pos: 0 };
    if bytes.len() < 2 {
        return Err(rd.err("truncated header"));
    }
    let channels = match &bytes[..2] {
        b"P5" => 1,
        b"P6" => 3,
        _ => return Err(rd.err("unsupported magic")),
    };
    rd.pos = 2;
    let width = rd.number("width")?;
    let height = rd.number("height")?;
    rd.skip_space();
    let maxval_at = rd.pos;
    let maxval = rd.number("maxval")?;
    if maxval != 255 {
        return Err(Error::Parse {
            offset: maxval_at,
            message: format!("unsupported maxval {maxval}"),
        });
    }
    if width == 0 || height == 0 {
        return Err(rd.err("zero image dimension"));
    }
    // exactly one whitespace byte separates the header from the payload
    match bytes.get(rd.pos) {
        Some(b) if b.is_ascii_whitespace() => rd.pos += 1,
        _ => return Err(rd.err("expected whitespace after maxval")),
    }
    let need = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| rd.err("image dimensions overflow"))?;
    let payload = &bytes[rd.pos..];
    if payload.len() < need {
        return Err(Error::Parse {
            offset: bytes.len(),
            message: format!("truncated payload: expected {need} bytes, found {}", payload.len()),
        });
    }
    let data = payload[..need].iter().map(|&b| b as f64 / 255.0).collect();
    Image::new(width, height, channels, data)
}

#[inline]
fn quantize(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Encodes as `P5` (one channel) or `P6` (three channels), maxval 255.
pub fn save_ppm(img: &Image) -> Vec<u8> {
    let magic = if img.channels == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.data.iter().map(|&v| quantize(v)));
    out
}

pub fn read_ppm(path: impl AsRef<std::path::Path>) -> Result<Image> {
    load_ppm(&std::fs::read(path)?)
}

pub fn write_ppm(path: impl AsRef<std::path::Path>, img: &Image) -> Result<()> {
    std::fs::write(path, save_ppm(img))?;
    Ok(())
}

/// Bilinear resize on pixel centers in normalized coordinates.
///
/// Sample positions are clamped to the outermost pixel centers, so edges
/// replicate instead of fading.
pub fn resize_bilinear(img: &Image, out_w: usize, out_h: usize) -> Result<Image> {
    if out_w == 0 || out_h == 0 {
        return Err(Error::arg(format!("zero target dimension {out_w}x{out_h}")));
    }
    let (w, h, c) = (img.width, img.height, img.channels);
    let mut data = Vec::with_capacity(out_w * out_h * c);
    for row in 0..out_h {
        for col in 0..out_w {
            let (px, py) = to_pixel(pixel_center(col, row, out_w, out_h), w, h);
            let px = px.clamp(0.0, (w - 1) as f64);
            let py = py.clamp(0.0, (h - 1) as f64);
            let x0 = px.floor() as usize;
            let y0 = py.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let y1 = (y0 + 1).min(h - 1);
            let fx = px - x0 as f64;
            let fy = py - y0 as f64;
            for ch in 0..c {
                let top = img.get(x0, y0, ch) * (1.0 - fx) + img.get(x1, y0, ch) * fx;
                let bot = img.get(x0, y1, ch) * (1.0 - fx) + img.get(x1, y1, ch) * fx;
                data.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    Ok(Image::from_clamped(out_w, out_h, c, data))
}

/// Mean squared intensity error over all pixels and channels.
pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::arg(format!(
            "shape mismatch: {}x{}x{} vs {}x{}x{}",
            a.width, a.height, a.channels, b.width, b.height, b.channels
        )));
    }
    let sum: f64 = a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(sum / a.data.len() as f64)
}

/// Peak signal-to-noise ratio for unit-range images, `+inf` for identical inputs.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}
