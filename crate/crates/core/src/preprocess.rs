//! Quality gating: circular field detection, the radial crop, acquisition
//! defect bands and the accept/reject decision.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::morphology::{connected_components, Mask};
use crate::raster::RasterImage;
use crate::{Error, Result};

/// Circle bounding the illuminated part of the photograph.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldGeometry {
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
}

impl FieldGeometry {
    #[inline]
    pub fn distance(&self, x: f64, y: f64) -> f64 {
        ((x - self.cx).powi(2) + (y - self.cy).powi(2)).sqrt()
    }

    #[inline]
    pub fn contains(&self, x: f64, y: f64) -> bool {
        (x - self.cx).powi(2) + (y - self.cy).powi(2) <= self.radius * self.radius
    }

    pub fn mask(&self, width: usize, height: usize) -> Mask {
        Mask::disc(width, height, self.cx, self.cy, self.radius)
    }

    /// Field pixels farther than `fraction * radius` from the rim's outside,
    /// i.e. the disc of radius `(1 - fraction) * radius`.
    pub fn interior_mask(&self, width: usize, height: usize, band: f64) -> Mask {
        Mask::disc(width, height, self.cx, self.cy, self.radius * (1.0 - band))
    }

    pub fn diameter(&self) -> f64 {
        2.0 * self.radius
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DefectKind {
    Overexposure,
    Underexposure,
    RainbowArtifact,
    EyelashOcclusion,
    Blur,
    BadGeometry,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DefectLocation {
    Top,
    Bottom,
    Global,
}

/// An acquisition defect. For top/bottom bands, `severity` is the fraction of
/// field area the band covers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Defect {
    pub kind: DefectKind,
    pub location: DefectLocation,
    pub severity: f64,
}

impl Defect {
    pub fn new(kind: DefectKind, location: DefectLocation, severity: f64) -> Self {
        Self { kind, location, severity: severity.clamp(0.0, 1.0) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub field: Option<FieldGeometry>,
    pub defects: Vec<Defect>,
    pub crop_top: usize,
    pub crop_bottom: usize,
    pub retained_fraction: f64,
    pub accepted: bool,
    pub reason: String,
}

/// Thresholds for field detection, defect scanning and the gate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QualityConfig {
    /// Luma above which a pixel belongs to the imaged field.
    pub field_luma_floor: f64,
    /// Bright-frame fraction beyond which the inscribed circle is used.
    pub full_frame_fraction: f64,
    pub crop_scale: f64,
    pub strata: usize,
    /// Fraction of a stratum's field pixels that must violate a bound.
    pub stratum_violation: f64,
    pub over_luma: f64,
    pub under_luma: f64,
    pub blur_floor: f64,
    /// Images losing more than this fraction of field area are rejected.
    pub reject_fraction: f64,
    /// Global defects at or above this severity reject the image.
    pub global_severity: f64,
    pub eyelash_min_area: f64,
}

impl Default for QualityConfig {
    fn default() -> Self {
        Self {
            field_luma_floor: 0.04,
            full_frame_fraction: 0.95,
            crop_scale: 0.9,
            strata: 16,
            stratum_violation: 0.6,
            over_luma: 0.95,
            under_luma: 0.05,
            blur_floor: 0.015,
            reject_fraction: 0.30,
            global_severity: 0.5,
            eyelash_min_area: 0.002,
        }
    }
}

impl QualityConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        let ok = unit(self.field_luma_floor)
            && unit(self.full_frame_fraction)
            && self.crop_scale > 0.0
            && self.crop_scale <= 1.0
            && self.strata >= 2
            && unit(self.stratum_violation)
            && unit(self.over_luma)
            && unit(self.under_luma)
            && self.under_luma < self.over_luma
            && self.blur_floor >= 0.0
            && unit(self.reject_fraction)
            && unit(self.global_severity)
            && unit(self.eyelash_min_area);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput("quality config value out of range".into()))
        }
    }
}

/// Locates the circular field: the largest bright component, enclosed by its
/// minimal circle. Falls back to the inscribed circle when the frame is
/// almost entirely bright.
pub fn detect_field(img: &RasterImage, cfg: &QualityConfig) -> Result<FieldGeometry> {
    let (w, h) = (img.width(), img.height());
    let bright = Mask::from_bits(w, h, (0..w * h).map(|i| img.luma_at(i) > cfg.field_luma_floor).collect())?;
    let count = bright.count();
    if count == 0 {
        return Err(Error::FieldDetection);
    }
    if count as f64 >= cfg.full_frame_fraction * (w * h) as f64 {
        return Ok(FieldGeometry { cx: w as f64 / 2.0 - 0.5, cy: h as f64 / 2.0 - 0.5, radius: w.min(h) as f64 / 2.0 });
    }
    let largest = connected_components(&bright)
        .into_iter()
        .max_by_key(|r| r.area)
        .ok_or(Error::FieldDetection)?;
    // Tiny specks are noise, not a field.
    if largest.area < 64 {
        return Err(Error::FieldDetection);
    }
    let region = Mask::from_regions(w, h, [&largest]);
    let boundary: Vec<(f64, f64)> = largest
        .pixels
        .iter()
        .filter(|&&(x, y)| {
            let (x, y) = (x as usize, y as usize);
            x == 0 || y == 0 || x + 1 == w || y + 1 == h
                || !region.get(x - 1, y)
                || !region.get(x + 1, y)
                || !region.get(x, y - 1)
                || !region.get(x, y + 1)
        })
        .map(|&(x, y)| (x as f64, y as f64))
        .collect();
    let (cx, cy, radius) = min_enclosing_circle(&convex_hull(boundary));
    if radius <= 0.0 {
        return Err(Error::FieldDetection);
    }
    Ok(FieldGeometry { cx, cy, radius })
}

fn convex_hull(mut pts: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    pts.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let cross = |o: (f64, f64), a: (f64, f64), b: (f64, f64)| (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0);
    let chain = |iter: &mut dyn Iterator<Item = &(f64, f64)>| {
        let mut part: Vec<(f64, f64)> = Vec::new();
        for &p in iter {
            while part.len() >= 2 && cross(part[part.len() - 2], part[part.len() - 1], p) <= 0.0 {
                part.pop();
            }
            part.push(p);
        }
        part.pop();
        part
    };
    let mut hull = chain(&mut pts.iter());
    hull.extend(chain(&mut pts.iter().rev()));
    hull
}

/// Welzl's minimal enclosing circle over a fixed-seed shuffle.
fn min_enclosing_circle(points: &[(f64, f64)]) -> (f64, f64, f64) {
    let mut pts = points.to_vec();
    pts.shuffle(&mut ChaCha8Rng::seed_from_u64(0x5eed));
    let inside = |c: (f64, f64, f64), p: (f64, f64)| ((p.0 - c.0).powi(2) + (p.1 - c.1).powi(2)).sqrt() <= c.2 + 1e-7;
    let two = |a: (f64, f64), b: (f64, f64)| {
        let cx = (a.0 + b.0) / 2.0;
        let cy = (a.1 + b.1) / 2.0;
        (cx, cy, ((a.0 - cx).powi(2) + (a.1 - cy).powi(2)).sqrt())
    };
    let three = |a: (f64, f64), b: (f64, f64), c: (f64, f64)| {
        let d = 2.0 * (a.0 * (b.1 - c.1) + b.0 * (c.1 - a.1) + c.0 * (a.1 - b.1));
        if d.abs() < 1e-12 {
            // collinear: the widest pair
            let cands = [two(a, b), two(a, c), two(b, c)];
            return cands.into_iter().fold((0.0, 0.0, -1.0), |m, c| if c.2 > m.2 { c } else { m });
        }
        let sa = a.0 * a.0 + a.1 * a.1;
        let sb = b.0 * b.0 + b.1 * b.1;
        let sc = c.0 * c.0 + c.1 * c.1;
        let ux = (sa * (b.1 - c.1) + sb * (c.1 - a.1) + sc * (a.1 - b.1)) / d;
        let uy = (sa * (c.0 - b.0) + sb * (a.0 - c.0) + sc * (b.0 - a.0)) / d;
        (ux, uy, ((a.0 - ux).powi(2) + (a.1 - uy).powi(2)).sqrt())
    };
    let Some(&first) = pts.first() else {
        return (0.0, 0.0, 0.0);
    };
    let mut c = (first.0, first.1, 0.0);
    for i in 1..pts.len() {
        if inside(c, pts[i]) {
            continue;
        }
        c = (pts[i].0, pts[i].1, 0.0);
        for j in 0..i {
            if inside(c, pts[j]) {
                continue;
            }
            c = two(pts[i], pts[j]);
            for k in 0..j {
                if !inside(c, pts[k]) {
                    c = three(pts[i], pts[j], pts[k]);
                }
            }
        }
    }
    c
}

/// Zeroes every pixel farther than `scale * radius` from the field center.
pub fn crop_field(img: &RasterImage, field: &FieldGeometry, scale: f64) -> Result<(RasterImage, FieldGeometry)> {
    if !(scale > 0.0 && scale <= 1.0) {
        return Err(Error::InvalidInput(format!("crop scale must be in (0,1], got {scale}")));
    }
    let cropped = FieldGeometry { radius: field.radius * scale, ..*field };
    let mut out = img.clone();
    let r2 = cropped.radius * cropped.radius;
    for y in 0..img.height() {
        let dy2 = (y as f64 - cropped.cy).powi(2);
        for x in 0..img.width() {
            if (x as f64 - cropped.cx).powi(2) + dy2 > r2 {
                out.set(x, y, [0, 0, 0]);
            }
        }
    }
    Ok((out, cropped))
}

/// In-field pixel count per image row.
fn row_field_counts(w: usize, h: usize, field: &FieldGeometry) -> Vec<usize> {
    (0..h)
        .map(|y| {
            let dy = y as f64 - field.cy;
            let half = field.radius * field.radius - dy * dy;
            if half < 0.0 {
                return 0;
            }
            let half = half.sqrt();
            let lo = (field.cx - half).ceil().max(0.0);
            let hi = (field.cx + half).floor().min(w as f64 - 1.0);
            if hi < lo {
                0
            } else {
                (hi - lo) as usize + 1
            }
        })
        .collect()
}

/// Fundus tissue is red-dominant; green- or blue-dominant field pixels come
/// from flare.
#[inline]
fn is_rainbow(rgb: [u8; 3], luma: f64) -> bool {
    luma > 0.2 && (rgb[2] > rgb[0] || rgb[1] > rgb[0])
}

#[derive(Clone, Copy)]
enum Violation {
    Over,
    Under,
    Rainbow,
}

impl Violation {
    fn kind(self) -> DefectKind {
        match self {
            Violation::Over => DefectKind::Overexposure,
            Violation::Under => DefectKind::Underexposure,
            Violation::Rainbow => DefectKind::RainbowArtifact,
        }
    }
}

/// Finds exposure bands, flare, eyelash occlusion and blur inside the field.
pub fn scan_defects(img: &RasterImage, field: &FieldGeometry, cfg: &QualityConfig) -> Vec<Defect> {
    let (w, h) = (img.width(), img.height());
    let field_rows = row_field_counts(w, h, field);
    let total: usize = field_rows.iter().sum();
    if total == 0 {
        return Vec::new();
    }
    let mut defects = Vec::new();

    let kinds = [Violation::Over, Violation::Under, Violation::Rainbow];
    let mut row_hits = vec![[0usize; 3]; h];
    let r2 = field.radius * field.radius;
    for (y, hits) in row_hits.iter_mut().enumerate() {
        if field_rows[y] == 0 {
            continue;
        }
        let dy2 = (y as f64 - field.cy).powi(2);
        for x in 0..w {
            if (x as f64 - field.cx).powi(2) + dy2 > r2 {
                continue;
            }
            let i = y * w + x;
            let l = img.luma_at(i);
            hits[0] += (l > cfg.over_luma) as usize;
            hits[1] += (l < cfg.under_luma) as usize;
            hits[2] += is_rainbow(img.get(x, y), l) as usize;
        }
    }

    let first = field_rows.iter().position(|&c| c > 0).unwrap_or(0);
    let last = field_rows.iter().rposition(|&c| c > 0).unwrap_or(0);
    let span = last - first + 1;
    let strata = cfg.strata.min(span).max(1);
    let stratum_rows = |s: usize| (first + s * span / strata, first + (s + 1) * span / strata);

    for (k, violation) in kinds.iter().enumerate() {
        let hits_total: usize = row_hits.iter().map(|r| r[k]).sum();
        let overall = hits_total as f64 / total as f64;
        if overall >= cfg.global_severity {
            defects.push(Defect::new(violation.kind(), DefectLocation::Global, overall));
            continue;
        }
        let bad: Vec<bool> = (0..strata)
            .map(|s| {
                let (a, b) = stratum_rows(s);
                let n: usize = field_rows[a..b].iter().sum();
                let v: usize = row_hits[a..b].iter().map(|r| r[k]).sum();
                n > 0 && v as f64 > cfg.stratum_violation * n as f64
            })
            .collect();
        let top_run = bad.iter().take_while(|b| **b).count();
        let bottom_run = bad.iter().rev().take_while(|b| **b).count();
        if top_run == strata {
            defects.push(Defect::new(violation.kind(), DefectLocation::Global, overall));
            continue;
        }
        let row_bad = |y: usize| field_rows[y] > 0 && row_hits[y][k] as f64 > cfg.stratum_violation * field_rows[y] as f64;
        if top_run > 0 {
            // Refine the cut inside the run and the stratum after it.
            let search_end = stratum_rows((top_run + 1).min(strata) - 1).1;
            let cut = (first..search_end).filter(|&y| row_bad(y)).max().unwrap_or(stratum_rows(top_run - 1).1 - 1);
            let area: usize = field_rows[first..=cut].iter().sum();
            defects.push(Defect::new(violation.kind(), DefectLocation::Top, area as f64 / total as f64));
        }
        if bottom_run > 0 {
            let search_start = stratum_rows(strata - bottom_run).0;
            let search_start = stratum_rows(strata.saturating_sub(bottom_run + 1)).0.min(search_start);
            let cut = (search_start..=last).filter(|&y| row_bad(y)).min().unwrap_or(search_start);
            let area: usize = field_rows[cut..=last].iter().sum();
            defects.push(Defect::new(violation.kind(), DefectLocation::Bottom, area as f64 / total as f64));
        }
    }

    if let Some(d) = eyelash_defect(img, field, &field_rows, total, cfg) {
        defects.push(d);
    }

    let sharpness = mean_gradient(img, field);
    if sharpness < cfg.blur_floor {
        let severity = if cfg.blur_floor > 0.0 { 1.0 - sharpness / cfg.blur_floor } else { 0.0 };
        defects.push(Defect::new(DefectKind::Blur, DefectLocation::Global, severity));
    }
    defects
}

/// Mean luma gradient magnitude over the field interior (forward differences).
pub fn mean_gradient(img: &RasterImage, field: &FieldGeometry) -> f64 {
    let (w, h) = (img.width(), img.height());
    let inner = FieldGeometry { radius: (field.radius - 2.0).max(0.0), ..*field };
    let mut sum = 0.0;
    let mut n = 0usize;
    for y in 0..h.saturating_sub(1) {
        for x in 0..w.saturating_sub(1) {
            if !inner.contains(x as f64, y as f64) {
                continue;
            }
            let i = y * w + x;
            let l = img.luma_at(i);
            let gx = img.luma_at(i + 1) - l;
            let gy = img.luma_at(i + w) - l;
            sum += (gx * gx + gy * gy).sqrt();
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// An elongated dark region entering the upper half of the field from the rim.
fn eyelash_defect(img: &RasterImage, field: &FieldGeometry, field_rows: &[usize], total: usize, cfg: &QualityConfig) -> Option<Defect> {
    let (w, h) = (img.width(), img.height());
    let mut lumas: Vec<f64> = (0..w * h)
        .filter(|&i| field.contains((i % w) as f64, (i / w) as f64))
        .map(|i| img.luma_at(i))
        .collect();
    if lumas.is_empty() {
        return None;
    }
    let mid = lumas.len() / 2;
    let (_, median, _) = lumas.select_nth_unstable_by(mid, |a, b| a.total_cmp(b));
    let dark_level = 0.35 * *median;
    let dark = Mask::from_fn(w, h, |x, y| {
        (y as f64) < field.cy && field.contains(x as f64, y as f64) && img.luma_at(y * w + x) < dark_level
    });
    let min_area = (cfg.eyelash_min_area * total as f64).max(1.0) as usize;
    let lash = connected_components(&dark).into_iter().find(|r| {
        r.area >= min_area
            && r.ovalness < 0.35
            && r.pixels.iter().any(|&(x, y)| field.distance(x as f64, y as f64) >= field.radius - 2.0)
    })?;
    let area: usize = field_rows[..=lash.bbox.y1].iter().sum();
    Some(Defect::new(DefectKind::EyelashOcclusion, DefectLocation::Top, area as f64 / total as f64))
}

/// Result of trimming defect bands.
#[derive(Clone, Debug)]
pub struct DefectCrop {
    pub image: RasterImage,
    /// Field area left after trimming, as a fraction of the original.
    pub retained_fraction: f64,
    pub crop_top: usize,
    pub crop_bottom: usize,
    /// Rows blanked by the trim.
    pub removed_rows: Vec<bool>,
}

/// Zeroes the top/bottom bands named by `defects`. Band height is chosen so
/// each band covers its defect's `severity` of the field area.
pub fn crop_defects(img: &RasterImage, field: &FieldGeometry, defects: &[Defect]) -> DefectCrop {
    let (w, h) = (img.width(), img.height());
    let field_rows = row_field_counts(w, h, field);
    let total: usize = field_rows.iter().sum();
    if total == 0 {
        return DefectCrop { image: img.clone(), retained_fraction: 0.0, crop_top: 0, crop_bottom: 0, removed_rows: vec![false; h] };
    }
    let sev = |loc: DefectLocation| {
        defects.iter().filter(|d| d.location == loc).map(|d| d.severity).fold(0.0f64, f64::max)
    };
    let (top_sev, bottom_sev) = (sev(DefectLocation::Top), sev(DefectLocation::Bottom));
    let first = field_rows.iter().position(|&c| c > 0).unwrap_or(0);
    let last = field_rows.iter().rposition(|&c| c > 0).unwrap_or(0);

    // Rows [first, top_end) and (bottom_start, last] are removed.
    let eps = 1e-9 * total as f64;
    let mut top_end = first;
    let mut acc = 0usize;
    if top_sev > 0.0 {
        while top_end <= last && (acc as f64) < top_sev * total as f64 - eps {
            acc += field_rows[top_end];
            top_end += 1;
        }
    }
    let mut bottom_start = last as isize;
    acc = 0;
    if bottom_sev > 0.0 {
        while bottom_start >= first as isize && (acc as f64) < bottom_sev * total as f64 - eps {
            acc += field_rows[bottom_start as usize];
            bottom_start -= 1;
        }
    }
    let mut out = img.clone();
    let mut removed = vec![false; h];
    for (y, flag) in removed.iter_mut().enumerate() {
        *flag = (y >= first && y < top_end) || (y as isize > bottom_start && y <= last);
    }
    for y in (0..h).filter(|&y| removed[y]) {
        for x in 0..w {
            out.set(x, y, [0, 0, 0]);
        }
    }
    let kept: usize = field_rows.iter().zip(&removed).filter(|(_, r)| !**r).map(|(c, _)| *c).sum();
    let crop_top = top_end.saturating_sub(first);
    let crop_bottom = (last as isize - bottom_start).max(0) as usize;
    DefectCrop { image: out, retained_fraction: kept as f64 / total as f64, crop_top, crop_bottom, removed_rows: removed }
}

/// The accept/reject rule. Returns `(accepted, reason)`.
pub fn quality_verdict(retained_fraction: f64, defects: &[Defect], cfg: &QualityConfig) -> (bool, String) {
    let min_retained = 1.0 - cfg.reject_fraction;
    if retained_fraction < min_retained - 1e-12 {
        return (false, format!("crop exceeded {}%", (cfg.reject_fraction * 100.0).round()));
    }
    let blocking = defects.iter().find(|d| {
        d.location == DefectLocation::Global
            && matches!(d.kind, DefectKind::Blur | DefectKind::Overexposure | DefectKind::Underexposure)
            && d.severity >= cfg.global_severity
    });
    if let Some(d) = blocking {
        let name = match d.kind {
            DefectKind::Blur => "image out of focus",
            DefectKind::Overexposure => "image globally overexposed",
            _ => "image globally underexposed",
        };
        return (false, name.to_string());
    }
    (true, "ok".to_string())
}

/// Cropped, defect-trimmed image and its field, ready for analysis.
#[derive(Clone, Debug)]
pub struct GatedImage {
    pub image: RasterImage,
    pub field: FieldGeometry,
    /// Field pixels that survived the defect trim.
    pub valid: Mask,
}

/// Field detection, radial crop, defect scan, defect crop and verdict.
pub fn gate(img: &RasterImage, cfg: &QualityConfig) -> (QualityReport, Option<GatedImage>) {
    let field = match detect_field(img, cfg) {
        Ok(f) => f,
        Err(e) => {
            let report = QualityReport {
                field: None,
                defects: vec![Defect::new(DefectKind::BadGeometry, DefectLocation::Global, 1.0)],
                crop_top: 0,
                crop_bottom: 0,
                retained_fraction: 0.0,
                accepted: false,
                reason: e.to_string(),
            };
            return (report, None);
        }
    };
    let (cropped, field) = match crop_field(img, &field, cfg.crop_scale) {
        Ok(v) => v,
        Err(e) => {
            let report = QualityReport {
                field: Some(field),
                defects: Vec::new(),
                crop_top: 0,
                crop_bottom: 0,
                retained_fraction: 0.0,
                accepted: false,
                reason: e.to_string(),
            };
            return (report, None);
        }
    };
    let defects = scan_defects(&cropped, &field, cfg);
    let trimmed = crop_defects(&cropped, &field, &defects);
    let (accepted, reason) = quality_verdict(trimmed.retained_fraction, &defects, cfg);
    let report = QualityReport {
        field: Some(field),
        defects,
        crop_top: trimmed.crop_top,
        crop_bottom: trimmed.crop_bottom,
        retained_fraction: trimmed.retained_fraction,
        accepted,
        reason,
    };
    let gated = accepted.then(|| {
        let (w, h) = (img.width(), img.height());
        let mut valid = field.mask(w, h);
        for y in (0..h).filter(|&y| trimmed.removed_rows[y]) {
            for x in 0..w {
                valid.set(x, y, false);
            }
        }
        GatedImage { image: trimmed.image, field, valid }
    });
    (report, gated)
}
