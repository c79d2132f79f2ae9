//! Image containers and the intensity primitives the rest of the pipeline is
//! built on: decoding, channel fusion, mean blur, background subtraction,
//! histogram equalization and level adjustment.

use std::io::Cursor;

use image::{ImageBuffer, ImageFormat, Luma, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::morphology::Mask;
use crate::{Error, Result, Scalar};

/// 8-bit RGB raster stored as three row-major planes.
#[derive(Clone, PartialEq, Eq)]
pub struct RasterImage {
    width: usize,
    height: usize,
    red: Vec<u8>,
    green: Vec<u8>,
    blue: Vec<u8>,
}

impl std::fmt::Debug for RasterImage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RasterImage")
            .field("width", &self.width)
            .field("height", &self.height)
            .finish_non_exhaustive()
    }
}

impl RasterImage {
    pub fn new(width: usize, height: usize) -> Result<Self> {
        Self::filled(width, height, [0, 0, 0])
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidInput(format!(
                "image dimensions must be positive, got {width}x{height}"
            )));
        }
        let n = width * height;
        Ok(Self {
            width,
            height,
            red: vec![rgb[0]; n],
            green: vec![rgb[1]; n],
            blue: vec![rgb[2]; n],
        })
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> [u8; 3],
    ) -> Result<Self> {
        let mut img = Self::new(width, height)?;
        for y in 0..height {
            for x in 0..width {
                img.set(x, y, f(x, y));
            }
        }
        Ok(img)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn red(&self) -> &[u8] {
        &self.red
    }

    pub fn green(&self) -> &[u8] {
        &self.green
    }

    pub fn blue(&self) -> &[u8] {
        &self.blue
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = y * self.width + x;
        [self.red[i], self.green[i], self.blue[i]]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = y * self.width + x;
        self.red[i] = rgb[0];
        self.green[i] = rgb[1];
        self.blue[i] = rgb[2];
    }

    /// Rec. 601 luma of pixel `i` (row-major index), in [0,1].
    #[inline]
    pub fn luma_at(&self, i: usize) -> f64 {
        luma(self.red[i], self.green[i], self.blue[i]) / 255.0
    }

    pub fn from_rgb_image(img: &RgbImage) -> Result<Self> {
        let (w, h) = img.dimensions();
        let mut out = Self::new(w as usize, h as usize)?;
        for (x, y, p) in img.enumerate_pixels() {
            out.set(x as usize, y as usize, p.0);
        }
        Ok(out)
    }

    pub fn to_rgb_image(&self) -> RgbImage {
        ImageBuffer::from_fn(self.width as u32, self.height as u32, |x, y| {
            Rgb(self.get(x as usize, y as usize))
        })
    }
}

#[inline]
pub(crate) fn luma(r: u8, g: u8, b: u8) -> f64 {
    0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64
}

/// Decodes a JPEG or PNG payload.
pub fn decode_image(bytes: &[u8]) -> Result<RasterImage> {
    let format = image::guess_format(bytes).map_err(|e| Error::Decode(e.to_string()))?;
    if !matches!(format, ImageFormat::Png | ImageFormat::Jpeg) {
        return Err(Error::Decode(format!("unsupported format {format:?}")));
    }
    let decoded = image::load_from_memory_with_format(bytes, format)
        .map_err(|e| Error::Decode(e.to_string()))?;
    if decoded.width() == 0 || decoded.height() == 0 {
        return Err(Error::InvalidInput("decoded image has a zero dimension".into()));
    }
    RasterImage::from_rgb_image(&decoded.to_rgb8())
}

pub fn encode_png(img: &RasterImage) -> Result<Vec<u8>> {
    let mut out = Cursor::new(Vec::new());
    img.to_rgb_image()
        .write_to(&mut out, ImageFormat::Png)
        .map_err(|e| Error::Encode(e.to_string()))?;
    Ok(out.into_inner())
}

/// Single-channel image with samples in [0,1].
#[derive(Clone, Debug, PartialEq)]
pub struct Gray<T> {
    width: usize,
    height: usize,
    pub(crate) data: Vec<T>,
}

impl<T: Scalar> Gray<T> {
    pub fn new(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidInput("gray image dimensions must be positive".into()));
        }
        if data.len() != width * height {
            return Err(Error::InvalidInput(format!(
                "expected {} samples, got {}",
                width * height,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !(**v >= T::zero() && **v <= T::one())) {
            return Err(Error::InvalidInput(format!("sample {bad} outside [0,1]")));
        }
        Ok(Self { width, height, data })
    }

    /// # Panics
    /// Panics on a zero dimension.
    pub fn filled(width: usize, height: usize, value: T) -> Self {
        assert!(width > 0 && height > 0, "gray image dimensions must be positive");
        Self { width, height, data: vec![value.clamp01(); width * height] }
    }

    /// Builds an image from a closure; results are clamped to [0,1].
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        assert!(width > 0 && height > 0, "gray image dimensions must be positive");
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y).clamp01());
            }
        }
        Self { width, height, data }
    }

    pub(crate) fn from_raw(width: usize, height: usize, data: Vec<T>) -> Self {
        debug_assert_eq!(data.len(), width * height);
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn samples(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> T {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: T) {
        self.data[y * self.width + x] = v.clamp01();
    }

    /// Applies `f` per sample, clamping the result.
    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::from_raw(self.width, self.height, self.data.iter().map(|&v| f(v).clamp01()).collect())
    }

    pub fn same_size(&self, other_w: usize, other_h: usize) -> bool {
        self.width == other_w && self.height == other_h
    }

    /// Mean over the set bits of `mask`, or over every pixel when `mask` is `None`.
    pub fn mean(&self, mask: Option<&Mask>) -> Option<f64> {
        let mut sum = 0.0;
        let mut n = 0usize;
        for (i, v) in self.data.iter().enumerate() {
            if mask.map_or(true, |m| m.bits()[i]) {
                sum += v.as_f64();
                n += 1;
            }
        }
        (n > 0).then(|| sum / n as f64)
    }

    /// Sorted sample values under `mask`, for percentile lookups.
    pub fn sorted_values(&self, mask: Option<&Mask>) -> Vec<T> {
        let mut values: Vec<T> = self
            .data
            .iter()
            .enumerate()
            .filter(|(i, _)| mask.map_or(true, |m| m.bits()[*i]))
            .map(|(_, v)| *v)
            .collect();
        values.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
        values
    }

    /// 16-bit grayscale PNG with samples scaled by 65535.
    pub fn to_png16(&self) -> Result<Vec<u8>> {
        let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
            ImageBuffer::from_fn(self.width as u32, self.height as u32, |x, y| {
                let v = self.get(x as usize, y as usize).as_f64();
                Luma([(v * 65535.0).round() as u16])
            });
        let mut out = Cursor::new(Vec::new());
        buf.write_to(&mut out, ImageFormat::Png).map_err(|e| Error::Encode(e.to_string()))?;
        Ok(out.into_inner())
    }
}

/// Nearest-rank percentile of an ascending slice, `q` in [0,1].
pub fn percentile<T: Scalar>(sorted: &[T], q: f64) -> Option<T> {
    if sorted.is_empty() {
        return None;
    }
    let idx = ((sorted.len() - 1) as f64 * q.clamp(0.0, 1.0)).round() as usize;
    Some(sorted[idx])
}

/// Per-channel weights for collapsing RGB into the working channel.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelWeights {
    pub w_red: f64,
    pub w_green: f64,
    pub w_blue: f64,
}

impl Default for ChannelWeights {
    /// Red dropped, green at full range, blue attenuated to 0.4.
    fn default() -> Self {
        Self { w_red: 0.0, w_green: 1.0, w_blue: 0.4 }
    }
}

impl ChannelWeights {
    pub fn new(w_red: f64, w_green: f64, w_blue: f64) -> Result<Self> {
        let w = Self { w_red, w_green, w_blue };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let ws = [self.w_red, self.w_green, self.w_blue];
        if ws.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidInput(format!("channel weights must be >= 0: {ws:?}")));
        }
        if ws.iter().all(|w| *w == 0.0) {
            return Err(Error::InvalidInput("channel weights are all zero".into()));
        }
        Ok(())
    }

    fn sum(&self) -> f64 {
        self.w_red + self.w_green + self.w_blue
    }
}

/// Weighted channel fusion normalized by the weight sum.
pub fn fuse_channels<T: Scalar>(img: &RasterImage, w: &ChannelWeights) -> Result<Gray<T>> {
    w.validate()?;
    let norm = 255.0 * w.sum();
    let data = (0..img.width * img.height)
        .map(|i| {
            let v = w.w_red * img.red[i] as f64
                + w.w_green * img.green[i] as f64
                + w.w_blue * img.blue[i] as f64;
            T::of(v / norm).clamp01()
        })
        .collect();
    Ok(Gray::from_raw(img.width, img.height, data))
}

/// Windowed mean over `[i-r, i+r]` with edge replication.
///
/// Sums run over offsets from the first sample so constant lines come back
/// bit-identical.
fn box_mean_line<T: Scalar>(src: &[T], radius: usize, dst: &mut [T], prefix: &mut Vec<f64>) {
    let n = src.len();
    let reference = src[0].as_f64();
    let span = 2 * radius + 1;
    prefix.clear();
    prefix.push(0.0);
    let mut acc = 0.0;
    for j in 0..n + 2 * radius {
        let k = j.saturating_sub(radius).min(n - 1);
        acc += src[k].as_f64() - reference;
        prefix.push(acc);
    }
    for (i, out) in dst.iter_mut().enumerate() {
        let mean = (prefix[i + span] - prefix[i]) / span as f64;
        *out = T::of(reference + mean).clamp01();
    }
}

/// Separable mean filter with window `2*radius+1` and edge replication.
pub fn smooth<T: Scalar>(img: &Gray<T>, radius: usize) -> Gray<T> {
    if radius == 0 {
        return img.clone();
    }
    let (w, h) = (img.width, img.height);
    let mut prefix = Vec::new();
    let mut horiz = vec![T::zero(); w * h];
    for y in 0..h {
        box_mean_line(&img.data[y * w..(y + 1) * w], radius, &mut horiz[y * w..(y + 1) * w], &mut prefix);
    }
    let mut out = vec![T::zero(); w * h];
    let mut col = vec![T::zero(); h];
    let mut col_out = vec![T::zero(); h];
    for x in 0..w {
        for y in 0..h {
            col[y] = horiz[y * w + x];
        }
        box_mean_line(&col, radius, &mut col_out, &mut prefix);
        for y in 0..h {
            out[y * w + x] = col_out[y];
        }
    }
    Gray::from_raw(w, h, out)
}

/// Linear rescale so the median under `roi` lands on `target`, clamped to
/// [0,1]. A zero median leaves the image unchanged.
pub fn normalize_median<T: Scalar>(img: &Gray<T>, roi: &Mask, target: f64) -> Gray<T> {
    let sorted = img.sorted_values(Some(roi));
    let median = percentile(&sorted, 0.5).map_or(0.0, |m| m.as_f64());
    if median <= 0.0 {
        return img.clone();
    }
    let gain = T::of(target / median);
    img.map(|v| (v * gain).clamp01())
}

/// `clamp(img - smooth(img, radius) + 0.5, 0, 1)`: mid-gray means no local contrast.
pub fn subtract_background<T: Scalar>(img: &Gray<T>, radius: usize) -> Gray<T> {
    let bg = smooth(img, radius.max(1));
    let half = T::of(0.5);
    let data = img
        .data
        .iter()
        .zip(&bg.data)
        .map(|(&v, &b)| (v - b + half).clamp01())
        .collect();
    Gray::from_raw(img.width, img.height, data)
}

/// Histogram equalization by CDF remapping: a sample in bin `b` maps to
/// `cdf(b) / n`. With a `roi`, the histogram is taken under the mask and only
/// masked pixels are remapped.
pub fn equalize_histogram<T: Scalar>(img: &Gray<T>, bins: usize, roi: Option<&Mask>) -> Result<Gray<T>> {
    if bins < 2 {
        return Err(Error::InvalidInput(format!("need at least 2 bins, got {bins}")));
    }
    if let Some(m) = roi {
        if m.width() != img.width || m.height() != img.height {
            return Err(Error::InvalidInput("roi size does not match image".into()));
        }
    }
    let bin_of = |v: T| ((v.as_f64() * bins as f64) as usize).min(bins - 1);
    let inside = |i: usize| roi.map_or(true, |m| m.bits()[i]);
    let mut hist = vec![0u64; bins];
    let mut total = 0u64;
    for (i, &v) in img.data.iter().enumerate() {
        if inside(i) {
            hist[bin_of(v)] += 1;
            total += 1;
        }
    }
    if total == 0 {
        return Ok(img.clone());
    }
    let mut lut = Vec::with_capacity(bins);
    let mut acc = 0u64;
    for count in hist {
        acc += count;
        lut.push(T::of(acc as f64 / total as f64));
    }
    let data = img
        .data
        .iter()
        .enumerate()
        .map(|(i, &v)| if inside(i) { lut[bin_of(v)] } else { v })
        .collect();
    Ok(Gray::from_raw(img.width, img.height, data))
}

/// Contrast about mid-gray (128) per channel, then saturation about the
/// per-pixel luma. Samples are rounded and clamped to [0,255].
pub fn adjust_levels(img: &RasterImage, saturation_gain: f64, contrast_gain: f64) -> Result<RasterImage> {
    if !(saturation_gain > 0.0 && contrast_gain > 0.0) {
        return Err(Error::InvalidInput("level gains must be positive".into()));
    }
    if saturation_gain == 1.0 && contrast_gain == 1.0 {
        return Ok(img.clone());
    }
    let mut out = img.clone();
    for i in 0..img.width * img.height {
        let c = [img.red[i], img.green[i], img.blue[i]]
            .map(|v| 128.0 + (v as f64 - 128.0) * contrast_gain);
        let y = 0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2];
        let s = c.map(|v| (y + (v - y) * saturation_gain).round().clamp(0.0, 255.0) as u8);
        out.red[i] = s[0];
        out.green[i] = s[1];
        out.blue[i] = s[2];
    }
    Ok(out)
}
