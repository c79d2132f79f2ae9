//! Flat morphology, thresholding, connected components and region
//! measurement.
//!
//! Every neighborhood operation replicates edge samples, which for flat
//! max/min filters is the same as clamping the window to the raster.

use std::collections::HashMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::raster::Gray;
use crate::{Error, Result, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SeShape {
    Square,
    Disc,
}

/// Flat structuring element centered on the origin. Radius 0 is the identity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StructuringElement {
    pub shape: SeShape,
    pub radius: usize,
}

impl StructuringElement {
    pub fn square(radius: usize) -> Self {
        Self { shape: SeShape::Square, radius }
    }

    pub fn disc(radius: usize) -> Self {
        Self { shape: SeShape::Disc, radius }
    }

    /// Half-width of the element on row offset `dy`.
    fn half_width(&self, dy: usize) -> usize {
        match self.shape {
            SeShape::Square => self.radius,
            SeShape::Disc => {
                let r2 = (self.radius * self.radius) as f64;
                ((r2 - (dy * dy) as f64).max(0.0).sqrt() + 1e-9).floor() as usize
            }
        }
    }

    pub fn contains(&self, dx: isize, dy: isize) -> bool {
        let r = self.radius as isize;
        match self.shape {
            SeShape::Square => dx.abs() <= r && dy.abs() <= r,
            SeShape::Disc => dx * dx + dy * dy <= r * r,
        }
    }
}

/// Binary image, one flag per pixel in row-major order.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl std::fmt::Debug for Mask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Mask")
            .field("width", &self.width)
            .field("height", &self.height)
            .field("count", &self.count())
            .finish()
    }
}

impl Mask {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, bits: vec![false; width * height] }
    }

    pub fn from_bits(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(Error::InvalidInput(format!(
                "mask of {width}x{height} needs {} bits, got {}",
                width * height,
                bits.len()
            )));
        }
        Ok(Self { width, height, bits })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        Self { width, height, bits }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|b| *b)
    }

    fn zip_with(&self, other: &Mask, f: impl Fn(bool, bool) -> bool) -> Mask {
        assert_eq!((self.width, self.height), (other.width, other.height), "mask size mismatch");
        Mask {
            width: self.width,
            height: self.height,
            bits: self.bits.iter().zip(&other.bits).map(|(a, b)| f(*a, *b)).collect(),
        }
    }

    pub fn and(&self, other: &Mask) -> Mask {
        self.zip_with(other, |a, b| a && b)
    }

    pub fn or(&self, other: &Mask) -> Mask {
        self.zip_with(other, |a, b| a || b)
    }

    pub fn and_not(&self, other: &Mask) -> Mask {
        self.zip_with(other, |a, b| a && !b)
    }

    pub fn complement(&self) -> Mask {
        Mask { width: self.width, height: self.height, bits: self.bits.iter().map(|b| !b).collect() }
    }

    pub fn intersects(&self, other: &Mask) -> bool {
        self.bits.iter().zip(&other.bits).any(|(a, b)| *a && *b)
    }

    /// Pixels whose centers lie within `radius` of `(cx, cy)`.
    pub fn disc(width: usize, height: usize, cx: f64, cy: f64, radius: f64) -> Mask {
        let r2 = radius * radius;
        Mask::from_fn(width, height, |x, y| {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            dx * dx + dy * dy <= r2
        })
    }

    pub fn paint_region(&mut self, region: &Region) {
        for &(x, y) in &region.pixels {
            self.set(x as usize, y as usize, true);
        }
    }

    pub fn from_regions<'a>(width: usize, height: usize, regions: impl IntoIterator<Item = &'a Region>) -> Mask {
        let mut m = Mask::new(width, height);
        for r in regions {
            m.paint_region(r);
        }
        m
    }

    /// 1-bit PNG dump.
    pub fn to_png(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, self.width as u32, self.height as u32);
            enc.set_color(png::ColorType::Grayscale);
            enc.set_depth(png::BitDepth::One);
            let mut writer = enc.write_header().map_err(|e| Error::Encode(e.to_string()))?;
            let stride = self.width.div_ceil(8);
            let mut packed = vec![0u8; stride * self.height];
            for y in 0..self.height {
                for x in 0..self.width {
                    if self.get(x, y) {
                        packed[y * stride + x / 8] |= 0x80 >> (x % 8);
                    }
                }
            }
            writer.write_image_data(&packed).map_err(|e| Error::Encode(e.to_string()))?;
        }
        Ok(out)
    }
}

/// Raster types the flat morphology operators apply to.
pub trait Morphable: Sized {
    type Sample: Copy;

    fn dims(&self) -> (usize, usize);
    fn samples_slice(&self) -> &[Self::Sample];
    fn rebuild(&self, data: Vec<Self::Sample>) -> Self;
    fn sup(a: Self::Sample, b: Self::Sample) -> Self::Sample;
    fn inf(a: Self::Sample, b: Self::Sample) -> Self::Sample;
}

impl<T: Scalar> Morphable for Gray<T> {
    type Sample = T;

    fn dims(&self) -> (usize, usize) {
        (self.width(), self.height())
    }
    fn samples_slice(&self) -> &[T] {
        self.samples()
    }
    fn rebuild(&self, data: Vec<T>) -> Self {
        Gray::from_raw(self.width(), self.height(), data)
    }
    #[inline]
    fn sup(a: T, b: T) -> T {
        if a >= b {
            a
        } else {
            b
        }
    }
    #[inline]
    fn inf(a: T, b: T) -> T {
        if a <= b {
            a
        } else {
            b
        }
    }
}

impl Morphable for Mask {
    type Sample = bool;

    fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }
    fn samples_slice(&self) -> &[bool] {
        &self.bits
    }
    fn rebuild(&self, data: Vec<bool>) -> Self {
        Mask { width: self.width, height: self.height, bits: data }
    }
    #[inline]
    fn sup(a: bool, b: bool) -> bool {
        a | b
    }
    #[inline]
    fn inf(a: bool, b: bool) -> bool {
        a & b
    }
}

/// van Herk / Gil-Werman running extremum over `[i-k, i+k]` with clamped ends.
fn window_line<V: Copy, F: Fn(V, V) -> V + Copy>(src: &[V], k: usize, op: F, dst: &mut [V], buf: &mut LineBuffers<V>) {
    let n = src.len();
    if k == 0 {
        dst.copy_from_slice(src);
        return;
    }
    let block = 2 * k + 1;
    let LineBuffers { pad, pre, suf } = buf;
    pad.clear();
    pad.extend(std::iter::repeat(src[0]).take(k));
    pad.extend_from_slice(src);
    pad.extend(std::iter::repeat(src[n - 1]).take(k));
    pre.clear();
    pre.extend_from_slice(pad);
    suf.clear();
    suf.extend_from_slice(pad);
    for chunk in pre.chunks_mut(block) {
        for j in 1..chunk.len() {
            chunk[j] = op(chunk[j - 1], chunk[j]);
        }
    }
    for chunk in suf.chunks_mut(block) {
        for j in (0..chunk.len() - 1).rev() {
            chunk[j] = op(chunk[j + 1], chunk[j]);
        }
    }
    for ((out, &s), &p) in dst.iter_mut().zip(&suf[..n]).zip(&pre[2 * k..2 * k + n]) {
        *out = op(s, p);
    }
}

struct LineBuffers<V> {
    pad: Vec<V>,
    pre: Vec<V>,
    suf: Vec<V>,
}

fn flat_filter<M: Morphable, F: Fn(M::Sample, M::Sample) -> M::Sample + Copy>(img: &M, se: &StructuringElement, op: F) -> M {
    let (w, h) = img.dims();
    let src = img.samples_slice();
    if se.radius == 0 || w == 0 || h == 0 {
        return img.rebuild(src.to_vec());
    }
    let mut buf = LineBuffers { pad: Vec::new(), pre: Vec::new(), suf: Vec::new() };
    let horizontal = |k: usize, buf: &mut LineBuffers<M::Sample>| {
        let mut out = src.to_vec();
        for (row, dst) in src.chunks(w).zip(out.chunks_mut(w)) {
            window_line(row, k, op, dst, buf);
        }
        out
    };
    match se.shape {
        SeShape::Square => {
            let rows = horizontal(se.radius, &mut buf);
            let mut out = rows.clone();
            let mut col = Vec::with_capacity(h);
            let mut col_out = Vec::with_capacity(h);
            for x in 0..w {
                col.clear();
                col.extend((0..h).map(|y| rows[y * w + x]));
                col_out.clear();
                col_out.extend_from_slice(&col);
                window_line(&col, se.radius, op, &mut col_out, &mut buf);
                for y in 0..h {
                    out[y * w + x] = col_out[y];
                }
            }
            img.rebuild(out)
        }
        SeShape::Disc => {
            // Row offsets sharing a half-width reuse one horizontal pass.
            let mut out = horizontal(se.half_width(0), &mut buf);
            let mut dy = 1;
            while dy <= se.radius {
                let k = se.half_width(dy);
                let mut last = dy;
                while last < se.radius && se.half_width(last + 1) == k {
                    last += 1;
                }
                let rows = horizontal(k, &mut buf);
                for y in 0..h {
                    let acc = &mut out[y * w..(y + 1) * w];
                    for d in dy..=last {
                        let up = &rows[y.saturating_sub(d) * w..][..w];
                        let down = &rows[(y + d).min(h - 1) * w..][..w];
                        for ((a, &u), &v) in acc.iter_mut().zip(up).zip(down) {
                            *a = op(*a, op(u, v));
                        }
                    }
                }
                dy = last + 1;
            }
            img.rebuild(out)
        }
    }
}

/// Neighborhood maximum (boolean OR for masks).
pub fn dilate<M: Morphable>(img: &M, se: &StructuringElement) -> M {
    flat_filter(img, se, M::sup)
}

/// Neighborhood minimum (boolean AND for masks).
pub fn erode<M: Morphable>(img: &M, se: &StructuringElement) -> M {
    flat_filter(img, se, M::inf)
}

/// Erosion of the dilation: fills dark structures narrower than the element.
pub fn close<M: Morphable>(img: &M, se: &StructuringElement) -> M {
    erode(&dilate(img, se), se)
}

/// Dilation of the erosion: removes bright structures narrower than the element.
pub fn open<M: Morphable>(img: &M, se: &StructuringElement) -> M {
    dilate(&erode(img, se), se)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Polarity {
    Above,
    Below,
}

/// Strict comparison against `t`.
pub fn threshold<T: Scalar>(img: &Gray<T>, t: T, polarity: Polarity) -> Mask {
    let bits = img
        .samples()
        .iter()
        .map(|&v| match polarity {
            Polarity::Above => v > t,
            Polarity::Below => v < t,
        })
        .collect();
    Mask { width: img.width(), height: img.height(), bits }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BBox {
    pub fn width(&self) -> usize {
        self.x1 - self.x0 + 1
    }
    pub fn height(&self) -> usize {
        self.y1 - self.y0 + 1
    }
}

/// Connected set of pixels with shape and intensity measurements.
///
/// `pixels` are sorted in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Region {
    pub pixels: Vec<(u32, u32)>,
    pub area: usize,
    pub centroid: (f64, f64),
    pub bbox: BBox,
    /// Isoperimetric compactness, 1 for a disc.
    pub ovalness: f64,
    pub mean_width: f64,
    pub mean_intensity: f64,
}

impl Region {
    /// Builds and shape-measures a region from its pixels. Intensity stays 0
    /// until [`region_props`] is applied.
    pub fn from_pixels(mut pixels: Vec<(u32, u32)>) -> Result<Self> {
        if pixels.is_empty() {
            return Err(Error::InvalidInput("region has no pixels".into()));
        }
        pixels.sort_unstable_by_key(|&(x, y)| (y, x));
        pixels.dedup();
        let area = pixels.len();
        let (mut sx, mut sy) = (0.0, 0.0);
        let mut bbox = BBox { x0: usize::MAX, y0: usize::MAX, x1: 0, y1: 0 };
        for &(x, y) in &pixels {
            sx += x as f64;
            sy += y as f64;
            bbox.x0 = bbox.x0.min(x as usize);
            bbox.y0 = bbox.y0.min(y as usize);
            bbox.x1 = bbox.x1.max(x as usize);
            bbox.y1 = bbox.y1.max(y as usize);
        }
        let mut region = Region {
            pixels,
            area,
            centroid: (sx / area as f64, sy / area as f64),
            bbox,
            ovalness: 0.0,
            mean_width: 0.0,
            mean_intensity: 0.0,
        };
        let local = LocalBitmap::new(&region);
        region.ovalness = local.ovalness(area);
        region.mean_width = local.mean_width(&region.pixels);
        Ok(region)
    }

    /// Diameter of the disc with the same area.
    pub fn equivalent_diameter(&self) -> f64 {
        2.0 * (self.area as f64 / PI).sqrt()
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        self.pixels.binary_search_by_key(&(y as u32, x as u32), |&(px, py)| (py, px)).is_ok()
    }

    pub fn overlap(&self, other: &Region) -> usize {
        let (mut i, mut j, mut n) = (0, 0, 0);
        let key = |p: &(u32, u32)| (p.1, p.0);
        while i < self.pixels.len() && j < other.pixels.len() {
            match key(&self.pixels[i]).cmp(&key(&other.pixels[j])) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    n += 1;
                    i += 1;
                    j += 1;
                }
            }
        }
        n
    }

    pub fn touches(&self, mask: &Mask) -> bool {
        self.pixels.iter().any(|&(x, y)| mask.get(x as usize, y as usize))
    }

    pub fn distance_to(&self, p: (f64, f64)) -> f64 {
        ((self.centroid.0 - p.0).powi(2) + (self.centroid.1 - p.1).powi(2)).sqrt()
    }
}

/// Region pixels rasterized into their bounding box plus a one-pixel frame.
struct LocalBitmap {
    x0: isize,
    y0: isize,
    w: usize,
    h: usize,
    bits: Vec<bool>,
}

impl LocalBitmap {
    fn new(region: &Region) -> Self {
        let x0 = region.bbox.x0 as isize - 1;
        let y0 = region.bbox.y0 as isize - 1;
        let w = region.bbox.width() + 2;
        let h = region.bbox.height() + 2;
        let mut bits = vec![false; w * h];
        for &(x, y) in &region.pixels {
            let lx = (x as isize - x0) as usize;
            let ly = (y as isize - y0) as usize;
            bits[ly * w + lx] = true;
        }
        Self { x0, y0, w, h, bits }
    }

    /// 4π·area / perimeter², perimeter being boundary edge steps scaled by π/4.
    fn ovalness(&self, area: usize) -> f64 {
        let mut edges = 0usize;
        for ly in 1..self.h - 1 {
            for lx in 1..self.w - 1 {
                let i = ly * self.w + lx;
                if self.bits[i] {
                    edges += [i - 1, i + 1, i - self.w, i + self.w].iter().filter(|&&j| !self.bits[j]).count();
                }
            }
        }
        let perimeter = edges as f64 * PI / 4.0;
        (4.0 * PI * area as f64 / (perimeter * perimeter)).clamp(0.0, 1.0)
    }

    /// Three times the mean distance from each pixel to the region boundary,
    /// where that distance is the exact Euclidean distance to the nearest
    /// background pixel center, less half a pixel. Equals the radius of a
    /// disc and stays below 2 for one-pixel-wide structures.
    fn mean_width(&self, pixels: &[(u32, u32)]) -> f64 {
        let d2 = squared_edt(&self.bits, self.w, self.h);
        let sum: f64 = pixels
            .iter()
            .map(|&(x, y)| {
                let lx = (x as isize - self.x0) as usize;
                let ly = (y as isize - self.y0) as usize;
                d2[ly * self.w + lx].sqrt() - 0.5
            })
            .sum();
        3.0 * sum / pixels.len() as f64
    }
}

/// Exact squared Euclidean distance from each foreground pixel to the
/// nearest background pixel (Felzenszwalb-Huttenlocher).
pub(crate) fn squared_edt(fg: &[bool], w: usize, h: usize) -> Vec<f64> {
    const INF: f64 = 1e20;
    let mut grid: Vec<f64> = fg.iter().map(|&b| if b { INF } else { 0.0 }).collect();
    let mut f = Vec::new();
    let mut d = Vec::new();
    for x in 0..w {
        f.clear();
        f.extend((0..h).map(|y| grid[y * w + x]));
        edt_1d(&f, &mut d);
        for y in 0..h {
            grid[y * w + x] = d[y];
        }
    }
    for y in 0..h {
        f.clear();
        f.extend_from_slice(&grid[y * w..(y + 1) * w]);
        edt_1d(&f, &mut d);
        grid[y * w..(y + 1) * w].copy_from_slice(&d);
    }
    grid
}

fn edt_1d(f: &[f64], d: &mut Vec<f64>) {
    let n = f.len();
    d.clear();
    d.resize(n, 0.0);
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let cross = |q: usize, p: usize| {
        ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64))
    };
    for q in 1..n {
        let mut s = cross(q, v[k]);
        // z[0] is -inf, so k never underflows
        while s <= z[k] {
            k -= 1;
            s = cross(q, v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, out) in d.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let dq = q as f64 - v[k] as f64;
        *out = dq * dq + f[v[k]];
    }
}

/// 8-connected components, in order of their first pixel in raster order.
pub fn connected_components(mask: &Mask) -> Vec<Region> {
    let (w, h) = (mask.width, mask.height);
    let mut labels = vec![u32::MAX; w * h];
    let mut parent: Vec<u32> = Vec::new();

    fn find(parent: &mut [u32], mut a: u32) -> u32 {
        while parent[a as usize] != a {
            parent[a as usize] = parent[parent[a as usize] as usize];
            a = parent[a as usize];
        }
        a
    }

    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !mask.bits[i] {
                continue;
            }
            let mut label = u32::MAX;
            let mut neighbors = [u32::MAX; 4];
            if x > 0 {
                neighbors[0] = labels[i - 1];
            }
            if y > 0 {
                neighbors[1] = labels[i - w];
                if x > 0 {
                    neighbors[2] = labels[i - w - 1];
                }
                if x + 1 < w {
                    neighbors[3] = labels[i - w + 1];
                }
            }
            for n in neighbors.into_iter().filter(|&n| n != u32::MAX) {
                if label == u32::MAX {
                    label = find(&mut parent, n);
                } else {
                    let a = find(&mut parent, label);
                    let b = find(&mut parent, n);
                    if a != b {
                        let (lo, hi) = (a.min(b), a.max(b));
                        parent[hi as usize] = lo;
                        label = lo;
                    }
                }
            }
            if label == u32::MAX {
                label = parent.len() as u32;
                parent.push(label);
            }
            labels[i] = label;
        }
    }

    let mut slot: HashMap<u32, usize> = HashMap::new();
    let mut groups: Vec<Vec<(u32, u32)>> = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let l = labels[y * w + x];
            if l == u32::MAX {
                continue;
            }
            let root = find(&mut parent, l);
            let idx = *slot.entry(root).or_insert_with(|| {
                groups.push(Vec::new());
                groups.len() - 1
            });
            groups[idx].push((x as u32, y as u32));
        }
    }
    groups
        .into_iter()
        .map(|pixels| Region::from_pixels(pixels).expect("component is nonempty"))
        .collect()
}

/// Re-measures a region's shape and adds its mean intensity over `img`.
pub fn region_props<T: Scalar>(region: &Region, img: &Gray<T>) -> Result<Region> {
    let mut out = Region::from_pixels(region.pixels.clone())?;
    if out.bbox.x1 >= img.width() || out.bbox.y1 >= img.height() {
        return Err(Error::InvalidInput("region lies outside the image".into()));
    }
    let sum: f64 = out.pixels.iter().map(|&(x, y)| img.get(x as usize, y as usize).as_f64()).sum();
    out.mean_intensity = sum / out.area as f64;
    Ok(out)
}

/// Components of one threshold level of a scan.
#[derive(Clone, Debug)]
pub struct ScanLevel {
    pub level: f64,
    pub regions: Vec<Region>,
}

/// Thresholds at each level, restricted to `roi`, and returns measured
/// components per level. Levels must loosen monotonically (descending for
/// [`Polarity::Above`], ascending for [`Polarity::Below`]) so that every
/// region is contained in exactly one region of the next level.
pub fn threshold_scan<T: Scalar>(img: &Gray<T>, levels: &[T], polarity: Polarity, roi: &Mask) -> Result<Vec<ScanLevel>> {
    if roi.is_empty() {
        return Err(Error::InvalidInput("threshold scan roi is empty".into()));
    }
    if roi.width != img.width() || roi.height != img.height() {
        return Err(Error::InvalidInput("roi size does not match image".into()));
    }
    let loosening = levels.windows(2).all(|p| match polarity {
        Polarity::Above => p[0] > p[1],
        Polarity::Below => p[0] < p[1],
    });
    if !loosening {
        return Err(Error::InvalidInput(format!(
            "threshold levels must be strictly {} for {polarity:?}",
            if polarity == Polarity::Above { "descending" } else { "ascending" }
        )));
    }
    levels
        .iter()
        .map(|&t| {
            let mask = threshold(img, t, polarity).and(roi);
            let regions = connected_components(&mask)
                .into_iter()
                .map(|r| with_intensity(r, img))
                .collect();
            Ok(ScanLevel { level: t.as_f64(), regions })
        })
        .collect()
}

pub(crate) fn with_intensity<T: Scalar>(mut region: Region, img: &Gray<T>) -> Region {
    let sum: f64 = region.pixels.iter().map(|&(x, y)| img.get(x as usize, y as usize).as_f64()).sum();
    region.mean_intensity = sum / region.area as f64;
    region
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask_from(rows: &[&str]) -> Mask {
        let h = rows.len();
        let w = rows[0].len();
        Mask::from_fn(w, h, |x, y| rows[y].as_bytes()[x] == b'#')
    }

    /// Direct neighborhood extremum with clamped coordinates.
    fn brute<T: Copy>(data: &[T], w: usize, h: usize, se: &StructuringElement, pick: fn(T, T) -> T) -> Vec<T> {
        let r = se.radius as isize;
        let mut out = Vec::with_capacity(data.len());
        for y in 0..h as isize {
            for x in 0..w as isize {
                let mut acc = data[(y * w as isize + x) as usize];
                for dy in -r..=r {
                    for dx in -r..=r {
                        if se.contains(dx, dy) {
                            let xx = (x + dx).clamp(0, w as isize - 1) as usize;
                            let yy = (y + dy).clamp(0, h as isize - 1) as usize;
                            acc = pick(acc, data[yy * w + xx]);
                        }
                    }
                }
                out.push(acc);
            }
        }
        out
    }

    #[test]
    fn dilate_single_pixel_square() {
        let mut m = Mask::new(5, 5);
        m.set(2, 2, true);
        let d = dilate(&m, &StructuringElement::square(1));
        let expected = mask_from(&[".....", ".###.", ".###.", ".###.", "....."]);
        assert_eq!(d, expected);
    }

    #[test]
    fn identity_and_empty_cases() {
        let m = mask_from(&["#..#", ".##.", "#..."]);
        assert_eq!(dilate(&m, &StructuringElement::disc(0)), m);
        assert_eq!(erode(&m, &StructuringElement::square(0)), m);
        let empty = Mask::new(6, 4);
        assert_eq!(dilate(&empty, &StructuringElement::disc(2)), empty);
        assert_eq!(open(&empty, &StructuringElement::disc(2)), empty);
    }

    #[test]
    fn erode_full_and_block() {
        let full = Mask::from_fn(6, 6, |_, _| true);
        assert_eq!(erode(&full, &StructuringElement::square(1)), full);
        let block = mask_from(&[".....", ".###.", ".###.", ".###.", "....."]);
        let mut center = Mask::new(5, 5);
        center.set(2, 2, true);
        assert_eq!(erode(&block, &StructuringElement::square(1)), center);
    }

    #[test]
    fn close_removes_thin_dark_line() {
        let img = Gray::<f64>::from_fn(15, 15, |x, _| if x == 7 { 0.1 } else { 0.8 });
        let closed = close(&img, &StructuringElement::disc(2));
        assert!(closed.samples().iter().all(|&v| v >= 0.8));
    }

    #[test]
    fn flat_filters_match_brute_force() {
        let w = 23;
        let h = 17;
        let gray = Gray::<f64>::from_fn(w, h, |x, y| ((x * 37 + y * 91 + x * y) % 29) as f64 / 28.0);
        let mask = Mask::from_fn(w, h, |x, y| (x * 13 + y * 7 + x * y) % 5 == 0);
        for se in [StructuringElement::square(1), StructuringElement::square(3), StructuringElement::disc(1), StructuringElement::disc(2), StructuringElement::disc(5)] {
            assert_eq!(dilate(&gray, &se).samples(), &brute(gray.samples(), w, h, &se, f64::max)[..], "{se:?}");
            assert_eq!(erode(&gray, &se).samples(), &brute(gray.samples(), w, h, &se, f64::min)[..], "{se:?}");
            assert_eq!(dilate(&mask, &se).bits(), &brute(mask.bits(), w, h, &se, |a, b| a | b)[..]);
            assert_eq!(erode(&mask, &se).bits(), &brute(mask.bits(), w, h, &se, |a, b| a & b)[..]);
        }
    }

    #[test]
    fn threshold_examples() {
        let img = Gray::<f64>::new(3, 1, vec![0.2, 0.6, 0.9]).unwrap();
        assert_eq!(threshold(&img, 0.5, Polarity::Above).bits(), &[false, true, true]);
        assert!(threshold(&img, 1.0, Polarity::Above).is_empty());
        assert!(threshold(&img, 0.0, Polarity::Below).is_empty());
    }

    #[test]
    fn scan_dot_then_haze() {
        let img = Gray::<f64>::from_fn(20, 20, |x, y| {
            if (x, y) == (5, 5) {
                0.95
            } else if x >= 10 && y >= 10 {
                0.6
            } else {
                0.1
            }
        });
        let roi = Mask::from_fn(20, 20, |_, _| true);
        let scan = threshold_scan(&img, &[0.9, 0.5], Polarity::Above, &roi).unwrap();
        assert_eq!(scan[0].regions.len(), 1);
        assert_eq!(scan[0].regions[0].pixels, vec![(5, 5)]);
        assert_eq!(scan[1].regions.len(), 2);
        assert_eq!(scan[1].regions.iter().map(|r| r.area).sum::<usize>(), 101);
    }

    #[test]
    fn scan_uniform_and_errors() {
        let img = Gray::<f64>::filled(8, 8, 0.2);
        let roi = Mask::from_fn(8, 8, |_, _| true);
        let scan = threshold_scan(&img, &[0.9, 0.6, 0.3], Polarity::Above, &roi).unwrap();
        assert!(scan.iter().all(|l| l.regions.is_empty()));
        assert!(threshold_scan(&img, &[0.5], Polarity::Above, &Mask::new(8, 8)).is_err());
        assert!(threshold_scan(&img, &[0.3, 0.6], Polarity::Above, &roi).is_err());
        assert!(threshold_scan(&img, &[0.6, 0.3], Polarity::Below, &roi).is_err());
    }

    #[test]
    fn components_connectivity() {
        let diag = mask_from(&["#.", ".#"]);
        assert_eq!(connected_components(&diag).len(), 1);
        assert!(connected_components(&Mask::new(4, 4)).is_empty());
        let checker = Mask::from_fn(4, 4, |x, y| (x + y) % 2 == 0);
        let cc = connected_components(&checker);
        assert_eq!(cc.len(), 1);
        assert_eq!(cc[0].area, 8);
        let two = mask_from(&["##..#", "....#", "#...."]);
        assert_eq!(connected_components(&two).len(), 3);
    }

    #[test]
    fn components_u_shape_merges() {
        let u = mask_from(&["#...#", "#...#", "#####"]);
        let cc = connected_components(&u);
        assert_eq!(cc.len(), 1);
        assert_eq!(cc[0].area, 9);
    }

    #[test]
    fn disc_region_props() {
        let m = Mask::disc(61, 61, 30.0, 30.0, 20.0);
        let cc = connected_components(&m);
        assert_eq!(cc.len(), 1);
        let r = &cc[0];
        assert!(r.ovalness >= 0.85, "ovalness {}", r.ovalness);
        assert!((r.mean_width - 20.0).abs() <= 2.0, "mean width {}", r.mean_width);
        assert!((r.centroid.0 - 30.0).abs() < 1e-9 && (r.centroid.1 - 30.0).abs() < 1e-9);
    }

    #[test]
    fn line_region_props() {
        let m = Mask::from_fn(60, 5, |x, y| y == 2 && (5..55).contains(&x));
        let r = &connected_components(&m)[0];
        assert_eq!(r.area, 50);
        assert!(r.ovalness <= 0.25, "ovalness {}", r.ovalness);
        assert!(r.mean_width <= 2.0, "mean width {}", r.mean_width);
    }

    #[test]
    fn single_pixel_region() {
        let img = Gray::<f64>::from_fn(5, 5, |x, y| if (x, y) == (3, 1) { 0.7 } else { 0.0 });
        let r = region_props(&Region::from_pixels(vec![(3, 1)]).unwrap(), &img).unwrap();
        assert_eq!(r.area, 1);
        assert!(r.mean_width <= 2.0);
        assert_eq!(r.centroid, (3.0, 1.0));
        assert!((r.mean_intensity - 0.7).abs() < 1e-12);
        assert!(Region::from_pixels(vec![]).is_err());
    }

    #[test]
    fn edt_matches_brute_force() {
        let w = 19;
        let h = 13;
        let fg: Vec<bool> = (0..w * h).map(|i| (i * 7919) % 11 != 0).collect();
        let d2 = squared_edt(&fg, w, h);
        for y in 0..h {
            for x in 0..w {
                if !fg[y * w + x] {
                    assert_eq!(d2[y * w + x], 0.0);
                    continue;
                }
                let mut best = f64::INFINITY;
                for yy in 0..h {
                    for xx in 0..w {
                        if !fg[yy * w + xx] {
                            let d = (x as f64 - xx as f64).powi(2) + (y as f64 - yy as f64).powi(2);
                            best = best.min(d);
                        }
                    }
                }
                assert_eq!(d2[y * w + x], best);
            }
        }
    }

    #[test]
    fn mask_png_is_one_bit() {
        let m = mask_from(&["#.#.#.#.#", "........."]);
        let png = m.to_png().unwrap();
        let decoded = image::load_from_memory(&png).unwrap().to_luma8();
        assert_eq!(decoded.get_pixel(0, 0).0[0], 255);
        assert_eq!(decoded.get_pixel(1, 0).0[0], 0);
        assert_eq!(decoded.get_pixel(8, 0).0[0], 255);
    }
}
