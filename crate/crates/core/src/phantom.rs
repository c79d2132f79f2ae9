//! Deterministic synthetic fundus photographs with exact ground truth.
//!
//! A phantom is an orange circular field on black with a bright optic disc,
//! a dark macula about five disc radii toward the field center, a branching
//! vessel tree rooted at the disc, seeded lesions and optional exposure
//! bands. All randomness comes from one ChaCha stream seeded by the spec, so
//! a spec always renders to the same bytes.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::morphology::{dilate, Mask, Region, StructuringElement};
use crate::preprocess::{Defect, DefectKind, DefectLocation, FieldGeometry};
use crate::raster::{encode_png, RasterImage};
use crate::{Error, Result};

/// Radial crop applied by the quality gate; truth geometry is expressed
/// against the cropped field.
const CROP_SCALE: f64 = 0.9;
/// Disc radius as a fraction of the cropped field radius.
const DISC_RADIUS_FRACTION: f64 = 0.125;
/// Root vessel width as a fraction of the cropped field radius.
const ROOT_VESSEL_WIDTH: f64 = 0.015;
const VESSEL_WIDTH_DECAY: f64 = 0.7;
/// Lesions stay inside this fraction of the cropped radius.
const LESION_ZONE: f64 = 0.84;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode")]
pub enum DiscPlacement {
    /// Left or right of center at 0.5-0.65 field radii.
    Auto,
    /// Disc at the field center (geometry defect).
    Centered,
    /// No visible disc (geometry defect). Vessels still converge off-screen.
    Absent,
    /// Explicit placement in pixels.
    Fixed { cx: f64, cy: f64, radius: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExudateLayout {
    /// Within two disc radii of the macula.
    Clustered,
    /// Uniform over the analysis zone.
    Scattered,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LesionPlan {
    pub microaneurysms: usize,
    pub hemorrhages: usize,
    pub exudates: usize,
    pub exudate_layout: ExudateLayout,
    /// Diameter ranges in disc radii.
    pub ma_diameter: (f64, f64),
    pub hemorrhage_diameter: (f64, f64),
    pub exudate_diameter: (f64, f64),
}

impl Default for LesionPlan {
    fn default() -> Self {
        Self {
            microaneurysms: 0,
            hemorrhages: 0,
            exudates: 0,
            exudate_layout: ExudateLayout::Clustered,
            ma_diameter: (0.09, 0.12),
            hemorrhage_diameter: (0.5, 0.8),
            exudate_diameter: (0.22, 0.32),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BandKind {
    Overexposed,
    Underexposed,
}

/// Exposure band covering `fraction` of the cropped field area.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DefectBand {
    pub kind: BandKind,
    pub location: DefectLocation,
    pub fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub disc: DiscPlacement,
    /// Fractional darkening at the macula center.
    pub macula_contrast: f64,
    /// Branching levels of each vessel trunk.
    pub vessel_depth: usize,
    pub lesions: LesionPlan,
    pub defects: Vec<DefectBand>,
    /// Box blur applied after rendering; 0 keeps the image sharp.
    pub blur_radius: usize,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            seed: 42,
            width: 1024,
            height: 768,
            disc: DiscPlacement::Auto,
            macula_contrast: 0.35,
            vessel_depth: 5,
            lesions: LesionPlan::default(),
            defects: Vec::new(),
            blur_radius: 0,
        }
    }
}

impl PhantomSpec {
    /// Lesion load typical of `grade` (0-3), drawn from `seed`.
    pub fn for_grade(seed: u64, grade: u8) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        let mut lesions = LesionPlan::default();
        match grade {
            0 => {}
            1 => lesions.microaneurysms = rng.gen_range(2..=6),
            2 => {
                lesions.microaneurysms = rng.gen_range(0..=4);
                match rng.gen_range(0..3) {
                    0 => lesions.hemorrhages = rng.gen_range(1..=4),
                    1 => lesions.exudates = rng.gen_range(6..=12),
                    _ => {
                        lesions.hemorrhages = rng.gen_range(1..=3);
                        lesions.exudates = rng.gen_range(6..=10);
                    }
                }
            }
            3 => {
                lesions.microaneurysms = rng.gen_range(2..=5);
                lesions.hemorrhages = rng.gen_range(12..=15);
                if rng.gen_bool(0.5) {
                    lesions.exudates = rng.gen_range(6..=10);
                }
            }
            _ => return Err(Error::PhantomSpec(format!("grade {grade} cannot be generated"))),
        }
        Ok(Self { seed, lesions, ..Self::default() })
    }

    fn validate(&self) -> Result<()> {
        if self.width < 64 || self.height < 64 {
            return Err(Error::PhantomSpec("phantom must be at least 64x64".into()));
        }
        if !(0.0..=1.0).contains(&self.macula_contrast) {
            return Err(Error::PhantomSpec("macula contrast must be in [0,1]".into()));
        }
        let l = &self.lesions;
        for (lo, hi) in [l.ma_diameter, l.hemorrhage_diameter, l.exudate_diameter] {
            if !(lo > 0.0 && lo <= hi) {
                return Err(Error::PhantomSpec(format!("bad diameter range ({lo}, {hi})")));
            }
            // disc radius is 1/8 of the cropped field radius
            if hi * DISC_RADIUS_FRACTION >= LESION_ZONE {
                return Err(Error::PhantomSpec("lesion larger than the field".into()));
            }
        }
        if self.defects.iter().any(|d| !(0.0..1.0).contains(&d.fraction) || d.location == DefectLocation::Global) {
            return Err(Error::PhantomSpec("defect bands need a top/bottom location and fraction in [0,1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LesionKind {
    Microaneurysm,
    Hemorrhage,
    HardExudate,
}

/// Placement log entry for one seeded lesion.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeededLesion {
    pub kind: LesionKind,
    pub center: (f64, f64),
    pub radius: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthDisc {
    pub center: (f64, f64),
    pub radius: f64,
}

/// Exact answers for one phantom.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GroundTruth {
    pub spec: PhantomSpec,
    /// Field as rendered, before the radial crop.
    pub field: FieldGeometry,
    /// Field after the 0.9 radial crop.
    pub analysis_field: FieldGeometry,
    /// Visible disc; `None` for disc-absent phantoms.
    pub disc: Option<TruthDisc>,
    pub macula: (f64, f64),
    pub lesions: Vec<SeededLesion>,
    pub grade: u8,
    pub defects: Vec<Defect>,
    /// Whether the gate and geometry check should let the image through.
    pub analyzable: bool,
    #[serde(skip)]
    pub vessel_mask: Option<Mask>,
    #[serde(skip)]
    pub lesion_regions: Vec<(LesionKind, Region)>,
}

impl GroundTruth {
    pub fn regions(&self, kind: LesionKind) -> Vec<Region> {
        self.lesion_regions.iter().filter(|(k, _)| *k == kind).map(|(_, r)| r.clone()).collect()
    }

    pub fn lesion_mask(&self, kind: LesionKind) -> Mask {
        let (w, h) = (self.spec.width, self.spec.height);
        Mask::from_regions(w, h, self.lesion_regions.iter().filter(|(k, _)| *k == kind).map(|(_, r)| r))
    }

    pub fn count(&self, kind: LesionKind) -> usize {
        self.lesions.iter().filter(|l| l.kind == kind).count()
    }
}

/// Grade implied by a lesion inventory: 0 none, 1 microaneurysms only,
/// 2 any hemorrhage or an exudate cluster, 3 at least `severe_count`
/// hemorrhages spread over three or more field quadrants.
pub fn truth_grade(lesions: &[SeededLesion], field: &FieldGeometry, severe_count: usize) -> u8 {
    let hemorrhages: Vec<_> = lesions.iter().filter(|l| l.kind == LesionKind::Hemorrhage).collect();
    let exudates = lesions.iter().filter(|l| l.kind == LesionKind::HardExudate).count();
    let mas = lesions.iter().filter(|l| l.kind == LesionKind::Microaneurysm).count();
    let mut quadrants = [false; 4];
    for h in &hemorrhages {
        quadrants[quadrant(h.center, field)] = true;
    }
    if hemorrhages.len() >= severe_count && quadrants.iter().filter(|q| **q).count() >= 3 {
        3
    } else if !hemorrhages.is_empty() || exudates >= 2 {
        2
    } else if mas > 0 || exudates > 0 {
        1
    } else {
        0
    }
}

pub(crate) fn quadrant(p: (f64, f64), field: &FieldGeometry) -> usize {
    (p.0 >= field.cx) as usize + 2 * (p.1 >= field.cy) as usize
}

pub struct Phantom {
    pub image: RasterImage,
    pub truth: GroundTruth,
}

#[derive(Clone, Copy, Debug)]
struct Segment {
    a: (f64, f64),
    b: (f64, f64),
    half_width: f64,
}

impl Segment {
    fn distance(&self, p: (f64, f64)) -> f64 {
        let (dx, dy) = (self.b.0 - self.a.0, self.b.1 - self.a.1);
        let len2 = dx * dx + dy * dy;
        let t = if len2 > 0.0 { (((p.0 - self.a.0) * dx + (p.1 - self.a.1) * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
        ((p.0 - self.a.0 - t * dx).powi(2) + (p.1 - self.a.1 - t * dy).powi(2)).sqrt()
    }
}

/// Smooth background: a few long sinusoids plus fine choroidal grain.
struct Texture {
    waves: Vec<(f64, f64, f64, f64)>,
}

impl Texture {
    fn new(rng: &mut ChaCha8Rng, field_radius: f64) -> Self {
        let mut waves = Vec::new();
        for i in 0..10 {
            let coarse = i < 5;
            let wavelength = if coarse {
                rng.gen_range(0.5..1.4) * field_radius
            } else {
                rng.gen_range(4.0..7.0)
            };
            let amplitude = if coarse { 0.012 } else { 0.008 };
            let theta = rng.gen_range(0.0..PI);
            let k = 2.0 * PI / wavelength;
            waves.push((k * theta.cos(), k * theta.sin(), rng.gen_range(0.0..2.0 * PI), amplitude));
        }
        Self { waves }
    }

    fn at(&self, x: f64, y: f64) -> f64 {
        self.waves.iter().map(|&(kx, ky, phase, amp)| amp * (kx * x + ky * y + phase).sin()).sum()
    }
}

/// Renders a phantom and its ground truth.
pub fn generate(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    // Independent streams so that, e.g., dropping the vessels leaves texture
    // and noise untouched.
    let stream = |k: u64| {
        let mut r = ChaCha8Rng::seed_from_u64(spec.seed);
        r.set_stream(k);
        r
    };
    let mut rng = stream(0);
    let (w, h) = (spec.width, spec.height);
    let field = FieldGeometry { cx: w as f64 / 2.0, cy: h as f64 / 2.0, radius: 0.96 * w.min(h) as f64 / 2.0 };
    let analysis = FieldGeometry { radius: field.radius * CROP_SCALE, ..field };
    let rc = analysis.radius;

    // Landmarks.
    let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    let disc_radius = DISC_RADIUS_FRACTION * rc * rng.gen_range(0.92..1.08);
    let tilt = rng.gen_range(-10.0f64..10.0).to_radians();
    let offset = rng.gen_range(0.5..0.65) * field.radius;
    let auto_center = (field.cx + side * offset * tilt.cos(), field.cy + offset * tilt.sin());
    let (disc_center, disc_radius) = match spec.disc {
        DiscPlacement::Auto | DiscPlacement::Absent => (auto_center, disc_radius),
        DiscPlacement::Centered => ((field.cx + rng.gen_range(-0.03..0.03) * rc, field.cy), disc_radius),
        DiscPlacement::Fixed { cx, cy, radius } => ((cx, cy), radius),
    };
    let to_center = (field.cx - disc_center.0, field.cy - disc_center.1);
    let norm = (to_center.0.powi(2) + to_center.1.powi(2)).sqrt();
    let axis = if norm > 1e-6 { (to_center.0 / norm, to_center.1 / norm) } else { (-side, 0.0) };
    let jitter = (rng.gen_range(-0.15..0.15) * disc_radius, rng.gen_range(-0.15..0.15) * disc_radius);
    let macula = (
        disc_center.0 + 5.0 * disc_radius * axis.0 + jitter.0,
        disc_center.1 + 5.0 * disc_radius * axis.1 + jitter.1,
    );
    let visible_disc = !matches!(spec.disc, DiscPlacement::Absent);

    // Vessel tree.
    let segments = grow_vessels(&mut stream(1), disc_center, axis, macula, disc_radius, &field, rc, spec.vessel_depth);
    let vessel_mask = rasterize_segments(&segments, w, h, &analysis);

    // Lesions.
    let lesions = place_lesions(&mut stream(2), spec, &analysis, disc_center, disc_radius, macula, &vessel_mask)?;

    // Intensity ("tissue brightness" in green units).
    let texture = Texture::new(&mut stream(3), rc);
    let mut rng = stream(4);
    let sigma_macula = 0.9 * disc_radius;
    let mut lesion_owner: Vec<u16> = vec![0; w * h];
    let mut lesion_pixels: Vec<Vec<(u32, u32)>> = vec![Vec::new(); lesions.len()];
    for (idx, l) in lesions.iter().enumerate() {
        let r = l.radius;
        let (x0, x1) = ((l.center.0 - r - 1.0).floor().max(0.0) as usize, ((l.center.0 + r + 1.0).ceil() as usize).min(w - 1));
        let (y0, y1) = ((l.center.1 - r - 1.0).floor().max(0.0) as usize, ((l.center.1 + r + 1.0).ceil() as usize).min(h - 1));
        for y in y0..=y1 {
            for x in x0..=x1 {
                let d = ((x as f64 - l.center.0).powi(2) + (y as f64 - l.center.1).powi(2)).sqrt();
                if d <= r.max(0.75) && lesion_owner[y * w + x] == 0 {
                    lesion_owner[y * w + x] = idx as u16 + 1;
                    lesion_pixels[idx].push((x as u32, y as u32));
                }
            }
        }
    }

    let mut img = RasterImage::new(w, h)?;
    for y in 0..h {
        for x in 0..w {
            let (fx, fy) = (x as f64, y as f64);
            if !field.contains(fx, fy) {
                continue;
            }
            let rho = field.distance(fx, fy) / field.radius;
            let mut b = 108.0 * (1.0 - 0.22 * rho * rho) * (1.0 + texture.at(fx, fy));
            let dm2 = (fx - macula.0).powi(2) + (fy - macula.1).powi(2);
            b *= 1.0 - spec.macula_contrast * (-dm2 / (2.0 * sigma_macula * sigma_macula)).exp();
            if visible_disc {
                let dd = ((fx - disc_center.0).powi(2) + (fy - disc_center.1).powi(2)).sqrt() / disc_radius;
                if dd < 1.15 {
                    // plateau with a soft rim
                    let t = ((1.15 - dd) / 0.3).clamp(0.0, 1.0);
                    let s = t * t * (3.0 - 2.0 * t);
                    let disc_b = 205.0 + 30.0 * (1.0 - dd * dd).max(0.0);
                    b = b + (disc_b - b) * s;
                }
            }
            let i = y * w + x;
            if vessel_mask.bits()[i] {
                b *= 0.55;
            }
            match lesion_owner[i] {
                0 => {}
                k => match lesions[k as usize - 1].kind {
                    LesionKind::Microaneurysm | LesionKind::Hemorrhage => b *= 0.45,
                    LesionKind::HardExudate => b += 0.55 * (235.0 - b).max(0.0),
                },
            }
            b += rng.gen_range(-5.0..5.0);
            img.set(x, y, tissue_rgb(b));
        }
    }

    // Exposure bands over the full rendered rows.
    let mut defects = Vec::new();
    for band in &spec.defects {
        let rows = band_rows(&analysis, w, h, band.fraction, band.location);
        for y in rows.clone() {
            for x in 0..w {
                if field.contains(x as f64, y as f64) {
                    let rgb = match band.kind {
                        BandKind::Overexposed => {
                            let n = rng.gen_range(0..4u8);
                            [255, 251 - n, 247 - n]
                        }
                        BandKind::Underexposed => [24, 6, 2],
                    };
                    img.set(x, y, rgb);
                }
            }
        }
        let kind = match band.kind {
            BandKind::Overexposed => DefectKind::Overexposure,
            BandKind::Underexposed => DefectKind::Underexposure,
        };
        defects.push(Defect::new(kind, band.location, band.fraction));
    }
    if spec.blur_radius > 0 {
        img = box_blur_rgb(&img, spec.blur_radius);
        defects.push(Defect::new(DefectKind::Blur, DefectLocation::Global, 1.0));
    }

    let mut lesion_regions = Vec::new();
    for (l, px) in lesions.iter().zip(lesion_pixels) {
        if !px.is_empty() {
            lesion_regions.push((l.kind, Region::from_pixels(px)?));
        }
    }
    let grade = truth_grade(&lesions, &analysis, 10);
    let band_total: f64 = spec.defects.iter().map(|d| d.fraction).sum();
    let disc_ok = visible_disc && {
        let d = ((disc_center.0 - analysis.cx).powi(2) + (disc_center.1 - analysis.cy).powi(2)).sqrt();
        d >= 0.25 * analysis.radius
    };
    let analyzable = disc_ok && band_total <= 0.30 && spec.blur_radius == 0;
    let truth = GroundTruth {
        spec: spec.clone(),
        field,
        analysis_field: analysis,
        disc: visible_disc.then_some(TruthDisc { center: disc_center, radius: disc_radius }),
        macula,
        lesions,
        grade,
        defects,
        analyzable,
        vessel_mask: Some(vessel_mask),
        lesion_regions,
    };
    Ok(Phantom { image: img, truth })
}

#[inline]
fn tissue_rgb(b: f64) -> [u8; 3] {
    let b = b.clamp(0.0, 255.0);
    [
        (150.0 + 0.8 * b).round().min(255.0) as u8,
        b.round() as u8,
        (0.3 * b + 8.0).round().min(255.0) as u8,
    ]
}

/// Rows of a band covering `fraction` of the analysis field's area.
fn band_rows(field: &FieldGeometry, w: usize, h: usize, fraction: f64, location: DefectLocation) -> std::ops::Range<usize> {
    let counts: Vec<usize> = (0..h)
        .map(|y| (0..w).filter(|&x| field.contains(x as f64, y as f64)).count())
        .collect();
    let total: usize = counts.iter().sum();
    let target = fraction * total as f64;
    let mut acc = 0usize;
    match location {
        DefectLocation::Top => {
            let mut y = 0;
            while y < h && (acc as f64) < target {
                acc += counts[y];
                y += 1;
            }
            0..y
        }
        _ => {
            let mut y = h;
            while y > 0 && (acc as f64) < target {
                y -= 1;
                acc += counts[y];
            }
            y..h
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn grow_vessels(
    rng: &mut ChaCha8Rng,
    disc: (f64, f64),
    axis: (f64, f64),
    macula: (f64, f64),
    disc_radius: f64,
    field: &FieldGeometry,
    rc: f64,
    depth: usize,
) -> Vec<Segment> {
    let mut segments = Vec::new();
    let base = axis.1.atan2(axis.0);
    let avoid = 1.5 * disc_radius;
    // (angle offset from the macula axis, curvature toward the axis)
    let trunks = [(55f64, -1.0), (-55f64, 1.0), (150f64, 0.0), (-150f64, 0.0)];
    let mut stack: Vec<(f64, f64, f64, f64, usize, f64)> = trunks
        .iter()
        .map(|&(deg, bend)| (disc.0, disc.1, base + deg.to_radians(), ROOT_VESSEL_WIDTH * rc, 0, bend))
        .collect();
    while let Some((x, y, angle, width, level, bend)) = stack.pop() {
        if level >= depth {
            continue;
        }
        let length = 0.22 * rc * 0.8f64.powi(level as i32) * rng.gen_range(0.85..1.15);
        let steps = 4;
        let mut p = (x, y);
        let mut a = angle;
        let mut alive = true;
        for _ in 0..steps {
            a += bend * 0.12 + rng.gen_range(-0.08..0.08);
            let q = (p.0 + a.cos() * length / steps as f64, p.1 + a.sin() * length / steps as f64);
            let near_macula = ((q.0 - macula.0).powi(2) + (q.1 - macula.1).powi(2)).sqrt() < avoid;
            if near_macula || !field.contains(q.0, q.1) {
                alive = false;
                break;
            }
            segments.push(Segment { a: p, b: q, half_width: width / 2.0 });
            p = q;
        }
        if !alive {
            continue;
        }
        let spread = rng.gen_range(0.3..0.55);
        let child_width = width * VESSEL_WIDTH_DECAY;
        stack.push((p.0, p.1, a + spread, child_width, level + 1, bend * 0.6));
        stack.push((p.0, p.1, a - spread, child_width, level + 1, bend * 0.6));
    }
    segments
}

/// Pixels whose centers lie within a segment's half-width (at least half a
/// pixel), restricted to the analysis field.
fn rasterize_segments(segments: &[Segment], w: usize, h: usize, analysis: &FieldGeometry) -> Mask {
    let mut mask = Mask::new(w, h);
    for s in segments {
        let hw = s.half_width.max(0.5);
        let x0 = (s.a.0.min(s.b.0) - hw - 1.0).floor().max(0.0) as usize;
        let x1 = ((s.a.0.max(s.b.0) + hw + 1.0).ceil() as usize).min(w - 1);
        let y0 = (s.a.1.min(s.b.1) - hw - 1.0).floor().max(0.0) as usize;
        let y1 = ((s.a.1.max(s.b.1) + hw + 1.0).ceil() as usize).min(h - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let p = (x as f64, y as f64);
                if s.distance(p) <= hw && analysis.contains(p.0, p.1) {
                    mask.set(x, y, true);
                }
            }
        }
    }
    mask
}

#[allow(clippy::too_many_arguments)]
fn place_lesions(
    rng: &mut ChaCha8Rng,
    spec: &PhantomSpec,
    analysis: &FieldGeometry,
    disc: (f64, f64),
    disc_radius: f64,
    macula: (f64, f64),
    vessels: &Mask,
) -> Result<Vec<SeededLesion>> {
    let plan = &spec.lesions;
    let (w, h) = (spec.width, spec.height);
    let margin = StructuringElement::disc(3);
    let vessel_zone = dilate(vessels, &margin);
    let mut placed: Vec<SeededLesion> = Vec::new();
    let zone = LESION_ZONE * analysis.radius;

    let clear_of_vessels = |c: (f64, f64), r: f64| {
        let rr = r + 2.0;
        let (x0, x1) = ((c.0 - rr).floor().max(0.0) as usize, ((c.0 + rr).ceil() as usize).min(w - 1));
        let (y0, y1) = ((c.1 - rr).floor().max(0.0) as usize, ((c.1 + rr).ceil() as usize).min(h - 1));
        for y in y0..=y1 {
            for x in x0..=x1 {
                let d = ((x as f64 - c.0).powi(2) + (y as f64 - c.1).powi(2)).sqrt();
                if d <= rr && vessel_zone.get(x, y) {
                    return false;
                }
            }
        }
        true
    };

    let mut requests: Vec<(LesionKind, (f64, f64))> = Vec::new();
    requests.extend(std::iter::repeat((LesionKind::Hemorrhage, plan.hemorrhage_diameter)).take(plan.hemorrhages));
    requests.extend(std::iter::repeat((LesionKind::HardExudate, plan.exudate_diameter)).take(plan.exudates));
    requests.extend(std::iter::repeat((LesionKind::Microaneurysm, plan.ma_diameter)).take(plan.microaneurysms));

    let mut hemorrhage_index = 0usize;
    for (kind, (lo, hi)) in requests {
        let radius = rng.gen_range(lo..=hi) * disc_radius / 2.0;
        let mut done = false;
        for _attempt in 0..4000 {
            let c = match kind {
                LesionKind::HardExudate if plan.exudate_layout == ExudateLayout::Clustered => {
                    let rho = rng.gen_range(0.5..2.0) * disc_radius;
                    let t = rng.gen_range(0.0..2.0 * PI);
                    (macula.0 + rho * t.cos(), macula.1 + rho * t.sin())
                }
                LesionKind::Hemorrhage => {
                    // Round-robin over quadrants so heavy loads spread out.
                    let q = hemorrhage_index % 4;
                    let rho = zone * rng.gen::<f64>().sqrt();
                    let t = rng.gen_range(0.0..PI / 2.0) + q as f64 * PI / 2.0;
                    (analysis.cx + rho * t.cos(), analysis.cy + rho * t.sin())
                }
                _ => {
                    let rho = zone * rng.gen::<f64>().sqrt();
                    let t = rng.gen_range(0.0..2.0 * PI);
                    (analysis.cx + rho * t.cos(), analysis.cy + rho * t.sin())
                }
            };
            if analysis.distance(c.0, c.1) + radius > zone {
                continue;
            }
            if ((c.0 - disc.0).powi(2) + (c.1 - disc.1).powi(2)).sqrt() < 2.2 * disc_radius + radius {
                continue;
            }
            let to_macula = ((c.0 - macula.0).powi(2) + (c.1 - macula.1).powi(2)).sqrt();
            if kind != LesionKind::HardExudate && to_macula < 1.4 * disc_radius + radius {
                continue;
            }
            let gap = match kind {
                LesionKind::HardExudate => 2.5 * radius + 4.0,
                _ => 0.35 * disc_radius + 6.0,
            };
            if placed.iter().any(|o| ((o.center.0 - c.0).powi(2) + (o.center.1 - c.1).powi(2)).sqrt() < o.radius + radius + gap.max(o.radius)) {
                continue;
            }
            if !clear_of_vessels(c, radius) {
                continue;
            }
            placed.push(SeededLesion { kind, center: c, radius });
            done = true;
            break;
        }
        if !done {
            return Err(Error::PhantomSpec(format!("could not place {kind:?} of radius {radius:.1}")));
        }
        if kind == LesionKind::Hemorrhage {
            hemorrhage_index += 1;
        }
    }
    Ok(placed)
}

fn box_blur_rgb(img: &RasterImage, radius: usize) -> RasterImage {
    use crate::raster::{smooth, Gray};
    let (w, h) = (img.width(), img.height());
    let plane = |data: &[u8]| {
        let g = Gray::<f32>::from_fn(w, h, |x, y| data[y * w + x] as f32 / 255.0);
        smooth(&g, radius)
    };
    let (r, g, b) = (plane(img.red()), plane(img.green()), plane(img.blue()));
    RasterImage::from_fn(w, h, |x, y| {
        [r.get(x, y), g.get(x, y), b.get(x, y)].map(|v| (v * 255.0).round() as u8)
    })
    .expect("dimensions are positive")
}

/// Splits `n` into per-grade counts by largest remainder.
fn grade_counts(n: usize, mix: &[f64; 4]) -> Result<[usize; 4]> {
    let sum: f64 = mix.iter().sum();
    if mix.iter().any(|p| *p < 0.0) || (sum - 1.0).abs() > 1e-6 {
        return Err(Error::PhantomSpec(format!("grade mix must sum to 1, got {mix:?}")));
    }
    let raw: Vec<f64> = mix.iter().map(|p| p * n as f64).collect();
    let mut counts = [0usize; 4];
    for (c, r) in counts.iter_mut().zip(&raw) {
        *c = r.floor() as usize;
    }
    let mut order: Vec<usize> = (0..4).collect();
    order.sort_by(|&a, &b| (raw[b] - raw[b].floor()).total_cmp(&(raw[a] - raw[a].floor())).then(a.cmp(&b)));
    let mut left = n - counts.iter().sum::<usize>();
    for i in order {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    Ok(counts)
}

/// One corpus member.
pub struct CorpusItem {
    pub name: String,
    pub seed: u64,
    pub phantom: Phantom,
}

/// Grade proportions (levels 0-3) of the reference evaluation corpus.
pub const REFERENCE_MIX: [f64; 4] = [0.4, 0.2, 0.3, 0.1];

/// `n` phantoms whose target grades follow `grade_mix` (levels 0-3) exactly
/// up to rounding, in a seeded order.
pub fn corpus(seed: u64, n: usize, grade_mix: [f64; 4]) -> Result<Vec<CorpusItem>> {
    corpus_with(seed, n, grade_mix, &PhantomSpec::default())
}

/// As [`corpus`], taking size and rendering options from `template`.
pub fn corpus_with(seed: u64, n: usize, grade_mix: [f64; 4], template: &PhantomSpec) -> Result<Vec<CorpusItem>> {
    let counts = grade_counts(n, &grade_mix)?;
    let mut grades: Vec<u8> = counts.iter().enumerate().flat_map(|(g, &c)| std::iter::repeat(g as u8).take(c)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    grades.shuffle(&mut rng);
    let mut items = Vec::with_capacity(n);
    for (i, grade) in grades.into_iter().enumerate() {
        let item_seed: u64 = rng.gen();
        let base = PhantomSpec::for_grade(item_seed, grade)?;
        let spec = PhantomSpec { lesions: base.lesions, seed: item_seed, ..template.clone() };
        let phantom = generate(&spec)?;
        if phantom.truth.grade != grade {
            return Err(Error::PhantomSpec(format!("phantom {i} rendered grade {} instead of {grade}", phantom.truth.grade)));
        }
        items.push(CorpusItem { name: format!("phantom_{i:04}"), seed: item_seed, phantom });
    }
    Ok(items)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub image: String,
    pub truth: String,
    pub seed: u64,
    pub grade: u8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub seed: u64,
    pub grade_mix: [f64; 4],
    pub entries: Vec<ManifestEntry>,
}

/// Writes `<name>.png`, `<name>.truth.json` and `<name>.vessels.png` per item
/// plus `manifest.json`.
pub fn write_corpus(dir: &Path, seed: u64, grade_mix: [f64; 4], items: &[CorpusItem]) -> Result<CorpusManifest> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    for item in items {
        let image = format!("{}.png", item.name);
        let truth = format!("{}.truth.json", item.name);
        fs::write(dir.join(&image), encode_png(&item.phantom.image)?)?;
        fs::write(dir.join(&truth), serde_json::to_vec_pretty(&item.phantom.truth)?)?;
        if let Some(v) = &item.phantom.truth.vessel_mask {
            fs::write(dir.join(format!("{}.vessels.png", item.name)), v.to_png()?)?;
        }
        entries.push(ManifestEntry { name: item.name.clone(), image, truth, seed: item.seed, grade: item.phantom.truth.grade });
    }
    let manifest = CorpusManifest { seed, grade_mix, entries };
    fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> PhantomSpec {
        PhantomSpec { seed, width: 512, height: 384, ..PhantomSpec::default() }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate(&PhantomSpec::for_grade(42, 2).unwrap()).unwrap();
        let b = generate(&PhantomSpec::for_grade(42, 2).unwrap()).unwrap();
        assert_eq!(encode_png(&a.image).unwrap(), encode_png(&b.image).unwrap());
        assert_eq!(a.truth.lesions, b.truth.lesions);
    }

    #[test]
    fn grade_zero_has_no_lesions() {
        let p = generate(&small(3)).unwrap();
        assert!(p.truth.lesions.is_empty() && p.truth.lesion_regions.is_empty());
        assert_eq!(p.truth.grade, 0);
    }

    #[test]
    fn clustered_exudates_sit_near_macula() {
        let mut spec = small(11);
        spec.lesions.exudates = 12;
        let p = generate(&spec).unwrap();
        let dd = 2.0 * p.truth.disc.unwrap().radius;
        let ex = p.truth.regions(LesionKind::HardExudate);
        assert_eq!(ex.len(), 12);
        assert!(ex.iter().all(|r| r.distance_to(p.truth.macula) <= 2.0 * dd));
        // 12 separate components in the exudate mask
        let mask = p.truth.lesion_mask(LesionKind::HardExudate);
        assert_eq!(crate::morphology::connected_components(&mask).len(), 12);
    }

    #[test]
    fn lesion_masks_match_placement_log() {
        let p = generate(&PhantomSpec::for_grade(5, 3).unwrap()).unwrap();
        assert_eq!(p.truth.lesions.len(), p.truth.lesion_regions.len());
        for (l, (kind, r)) in p.truth.lesions.iter().zip(&p.truth.lesion_regions) {
            assert_eq!(l.kind, *kind);
            assert!(r.distance_to(l.center) <= 1.0, "{l:?} vs {:?}", r.centroid);
        }
    }

    #[test]
    fn renderer_is_honest() {
        let mut spec = small(17);
        spec.lesions.hemorrhages = 3;
        let p = generate(&spec).unwrap();
        let fused: crate::GrayImage = crate::raster::fuse_channels(&p.image, &Default::default()).unwrap();
        let (w, h) = (spec.width, spec.height);
        let disc = p.truth.disc.unwrap();
        let inside = Mask::disc(w, h, disc.center.0, disc.center.1, disc.radius * 0.8);
        let ring = Mask::disc(w, h, disc.center.0, disc.center.1, disc.radius * 2.0)
            .and_not(&Mask::disc(w, h, disc.center.0, disc.center.1, disc.radius * 1.3));
        let vessels = p.truth.vessel_mask.clone().unwrap();
        let no_vessels = vessels.complement();
        assert!(fused.mean(Some(&inside)).unwrap() > fused.mean(Some(&ring.and(&no_vessels))).unwrap() + 0.2);
        let m = p.truth.macula;
        let core = Mask::disc(w, h, m.0, m.1, disc.radius * 0.5).and(&no_vessels);
        let around = Mask::disc(w, h, m.0, m.1, disc.radius * 3.5)
            .and_not(&Mask::disc(w, h, m.0, m.1, disc.radius * 2.5))
            .and(&no_vessels);
        assert!(fused.mean(Some(&core)).unwrap() < fused.mean(Some(&around)).unwrap());
        // vessel pixels are darker than the background right next to them
        let near = dilate(&vessels, &StructuringElement::disc(3)).and_not(&dilate(&vessels, &StructuringElement::disc(1)));
        let far_from_disc = Mask::disc(w, h, disc.center.0, disc.center.1, disc.radius * 1.5).complement();
        let v = fused.mean(Some(&vessels.and(&far_from_disc))).unwrap();
        let bg = fused.mean(Some(&near.and(&far_from_disc))).unwrap();
        assert!(v < 0.7 * bg, "vessel {v} background {bg}");
        for r in p.truth.regions(LesionKind::Hemorrhage) {
            let cx = r.centroid.0 as usize;
            let cy = r.centroid.1 as usize;
            assert!((fused.get(cx, cy) as f64) < 0.6 * bg);
        }
    }

    #[test]
    fn grade_four_and_bad_specs_are_rejected() {
        assert!(PhantomSpec::for_grade(1, 4).is_err());
        let mut spec = small(1);
        spec.lesions.hemorrhage_diameter = (1.0, 30.0);
        spec.lesions.hemorrhages = 1;
        assert!(matches!(generate(&spec), Err(Error::PhantomSpec(_))));
    }

    #[test]
    fn corpus_mix_is_exact_and_reproducible() {
        let template = PhantomSpec { width: 384, height: 288, ..PhantomSpec::default() };
        let items = corpus_with(7, 20, [0.4, 0.2, 0.3, 0.1], &template).unwrap();
        let mut hist = [0; 4];
        for it in &items {
            hist[it.phantom.truth.grade as usize] += 1;
        }
        assert_eq!(hist, [8, 4, 6, 2]);
        let again = corpus_with(7, 20, [0.4, 0.2, 0.3, 0.1], &template).unwrap();
        let seeds: Vec<u64> = items.iter().map(|i| i.seed).collect();
        assert_eq!(seeds, again.iter().map(|i| i.seed).collect::<Vec<_>>());
        assert!(corpus(7, 0, [1.0, 0.0, 0.0, 0.0]).unwrap().is_empty());
        assert!(corpus(7, 3, [0.5, 0.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn grade_count_rounding() {
        assert_eq!(grade_counts(100, &[0.4, 0.2, 0.3, 0.1]).unwrap(), [40, 20, 30, 10]);
        assert_eq!(grade_counts(1, &[1.0, 0.0, 0.0, 0.0]).unwrap(), [1, 0, 0, 0]);
        assert_eq!(grade_counts(3, &[0.25, 0.25, 0.25, 0.25]).unwrap().iter().sum::<usize>(), 3);
    }

    #[test]
    fn defect_band_truth() {
        let mut spec = small(23);
        spec.defects.push(DefectBand { kind: BandKind::Overexposed, location: DefectLocation::Bottom, fraction: 0.2 });
        let p = generate(&spec).unwrap();
        assert_eq!(p.truth.defects.len(), 1);
        assert!(p.truth.analyzable);
        let last = p.image.get(spec.width / 2, (p.truth.field.cy + p.truth.field.radius * 0.95) as usize);
        assert_eq!(last[0], 255);
    }
}
