//! Optic disc and macula localization, plus the field-geometry check.

use serde::{Deserialize, Serialize};

use crate::morphology::{close, connected_components, threshold_scan, Mask, Polarity, Region, StructuringElement};
use crate::preprocess::FieldGeometry;
use crate::raster::{percentile, smooth, subtract_background, Gray};
use crate::{Error, Result, Scalar};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LandmarkConfig {
    /// Vessel-suppressing closing radius, in field radii.
    pub closing_radius: f64,
    /// Descending percentiles (in [0,1]) of the candidate scan.
    pub disc_percentiles: Vec<f64>,
    /// Expected disc diameter, in field diameters.
    pub disc_size_prior: f64,
    /// Log-scale spread of the size prior.
    pub disc_size_spread: f64,
    /// Candidates reaching into this outer fraction of the radius are dropped.
    pub border_band: f64,
    /// Minimum disc-minus-surround contrast relative to the 1-99% range.
    pub min_prominence: f64,
    /// Brightness shift of the stability probe.
    pub stability_shift: f64,
    /// Largest tolerated center shift under the probe, in disc radii.
    pub stability_tolerance: f64,
    /// Discs closer than this many field radii to the center are rejected.
    pub centered_fraction: f64,
    /// Discs scoring below this are treated as missing.
    pub min_disc_score: f64,
    /// Disc-to-macula distance, in disc diameters.
    pub macula_distance: f64,
    /// The macula search starts this many disc diameters past the disc.
    pub macula_search_start: f64,
    pub macula_min_compactness: f64,
    pub macula_min_depth: f64,
    /// Largest gap between a found macula and the geometric estimate, in disc diameters.
    pub macula_agreement: f64,
    /// Background-subtraction radius of the macula search, in field radii.
    pub macula_background: f64,
    /// Smoothing radius of the macula search, in disc radii.
    pub macula_smoothing: f64,
}

impl Default for LandmarkConfig {
    fn default() -> Self {
        Self {
            closing_radius: 0.02,
            disc_percentiles: vec![0.995, 0.99, 0.985, 0.98, 0.97, 0.96, 0.95, 0.93],
            disc_size_prior: 0.125,
            disc_size_spread: 0.35,
            border_band: 0.08,
            min_prominence: 0.5,
            stability_shift: 0.05,
            stability_tolerance: 0.5,
            centered_fraction: 0.25,
            min_disc_score: 0.05,
            macula_distance: 2.5,
            macula_search_start: 1.25,
            macula_min_compactness: 0.3,
            macula_min_depth: 0.3,
            macula_agreement: 1.0,
            macula_background: 0.4,
            macula_smoothing: 0.5,
        }
    }
}

impl LandmarkConfig {
    pub fn validate(&self) -> Result<()> {
        let p = &self.disc_percentiles;
        if p.is_empty() || p.iter().any(|q| !(0.0..=1.0).contains(q)) || p.windows(2).any(|w| w[0] <= w[1]) {
            return Err(Error::InvalidInput("disc percentiles must be strictly descending in [0,1]".into()));
        }
        let positive = [
            self.closing_radius,
            self.disc_size_prior,
            self.disc_size_spread,
            self.stability_tolerance,
            self.macula_distance,
            self.macula_background,
            self.macula_smoothing,
        ];
        if positive.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::InvalidInput("landmark sizes must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.border_band)
            || !(0.0..1.0).contains(&self.centered_fraction)
            || !(0.0..1.0).contains(&self.min_disc_score)
        {
            return Err(Error::InvalidInput("landmark fractions must lie in [0,1)".into()));
        }
        Ok(())
    }

    fn closing_element(&self, field: &FieldGeometry) -> StructuringElement {
        StructuringElement::disc(((self.closing_radius * field.radius).round() as usize).max(1))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscLandmark {
    pub center: (f64, f64),
    pub radius: f64,
    pub score: f64,
    pub prominence: f64,
    pub confidence: f64,
    /// Whether the center held under the brightness probe.
    pub stable: bool,
}

/// A scored disc candidate from the threshold scan.
#[derive(Clone, Debug)]
pub struct DiscCandidate {
    pub region: Region,
    pub level: f64,
    pub border_adjacent: bool,
    /// Filled in by selection.
    pub score: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GeometryReason {
    Ok,
    DiscCentered,
    DiscMissing,
}

impl GeometryReason {
    pub fn as_str(self) -> &'static str {
        match self {
            GeometryReason::Ok => "ok",
            GeometryReason::DiscCentered => "disc-centered",
            GeometryReason::DiscMissing => "disc-missing",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeometryVerdict {
    pub ok: bool,
    pub reason: GeometryReason,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaculaMethod {
    /// A dark compact region agreeing with the geometric estimate.
    DarkestRegion,
    /// Fixed offset from the disc toward the field center.
    Geometric,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaculaLandmark {
    pub center: (f64, f64),
    pub method: MaculaMethod,
    pub confidence: f64,
    pub depth: f64,
    pub compactness: f64,
}

fn sorted_percentile<T: Scalar>(sorted: &[T], q: f64) -> f64 {
    percentile(sorted, q).map_or(0.0, |v| v.as_f64())
}

fn region_mean<T: Scalar>(img: &Gray<T>, region: &Region) -> f64 {
    region.pixels.iter().map(|&(x, y)| img.get(x as usize, y as usize).as_f64()).sum::<f64>() / region.area as f64
}

/// Mean of `img` over pixels of `roi` at distance `[inner, outer)` from `c`.
fn annulus_mean<T: Scalar>(img: &Gray<T>, roi: &Mask, c: (f64, f64), inner: f64, outer: f64) -> Option<f64> {
    let (w, h) = (img.width(), img.height());
    let x0 = (c.0 - outer).floor().max(0.0) as usize;
    let y0 = (c.1 - outer).floor().max(0.0) as usize;
    let x1 = ((c.0 + outer).ceil().max(0.0) as usize).min(w.saturating_sub(1));
    let y1 = ((c.1 + outer).ceil().max(0.0) as usize).min(h.saturating_sub(1));
    let (mut sum, mut n) = (0.0, 0usize);
    for y in y0..=y1 {
        for x in x0..=x1 {
            let d = ((x as f64 - c.0).powi(2) + (y as f64 - c.1).powi(2)).sqrt();
            if d >= inner && d < outer && roi.get(x, y) {
                sum += img.get(x, y).as_f64();
                n += 1;
            }
        }
    }
    (n > 0).then(|| sum / n as f64)
}

/// Grayscale closing with a disc sized to the field; removes dark structures
/// narrower than the element.
pub fn suppress_vessels<T: Scalar>(img: &Gray<T>, field: &FieldGeometry, cfg: &LandmarkConfig) -> Gray<T> {
    close(img, &cfg.closing_element(field))
}

/// Bright components of a descending scan at absolute `levels`.
fn scan_candidates<T: Scalar>(suppressed: &Gray<T>, field: &FieldGeometry, levels: &[T], cfg: &LandmarkConfig) -> Result<Vec<DiscCandidate>> {
    let roi = field.mask(suppressed.width(), suppressed.height());
    let rim = (1.0 - cfg.border_band) * field.radius;
    let mut out = Vec::new();
    for scan in threshold_scan(suppressed, levels, Polarity::Above, &roi)? {
        for region in scan.regions {
            let border_adjacent = region.pixels.iter().any(|&(x, y)| field.distance(x as f64, y as f64) > rim);
            out.push(DiscCandidate { region, level: scan.level, border_adjacent, score: 0.0 });
        }
    }
    Ok(out)
}

/// Absolute thresholds at the configured percentiles of `img` inside the
/// field, made strictly descending. Samples at the maximum are left out of
/// the pool so a clipped plateau cannot absorb every level.
pub fn disc_levels<T: Scalar>(img: &Gray<T>, field: &FieldGeometry, cfg: &LandmarkConfig) -> Vec<T> {
    let roi = field.mask(img.width(), img.height());
    let mut sorted = img.sorted_values(Some(&roi));
    if let Some(&top) = sorted.last() {
        sorted.truncate(sorted.partition_point(|&v| v < top));
    }
    let mut levels: Vec<T> = Vec::new();
    for &q in &cfg.disc_percentiles {
        let Some(v) = percentile(&sorted, q) else { break };
        if levels.last().map_or(true, |&l| v < l) {
            levels.push(v);
        }
    }
    levels
}

/// Candidate bright regions of the vessel-suppressed channel. Candidates
/// reaching into the outer border band are kept but flagged.
pub fn detect_disc_candidates<T: Scalar>(suppressed: &Gray<T>, field: &FieldGeometry, cfg: &LandmarkConfig) -> Result<Vec<DiscCandidate>> {
    let roi = field.mask(suppressed.width(), suppressed.height());
    if roi.is_empty() {
        return Err(Error::InvalidInput("field does not overlap the image".into()));
    }
    let sorted = suppressed.sorted_values(Some(&roi));
    if sorted.first() == sorted.last() {
        return Ok(Vec::new());
    }
    let levels = disc_levels(suppressed, field, cfg);
    scan_candidates(suppressed, field, &levels, cfg)
}

/// Scores candidates against the suppressed channel: brightness on the
/// 1-99% range times a log-normal size prior. Border-adjacent and
/// non-prominent candidates do not survive.
fn rank_candidates<T: Scalar>(candidates: Vec<DiscCandidate>, suppressed: &Gray<T>, field: &FieldGeometry, cfg: &LandmarkConfig) -> Vec<(DiscCandidate, f64)> {
    let roi = field.mask(suppressed.width(), suppressed.height());
    let sorted = suppressed.sorted_values(Some(&roi));
    let lo = sorted_percentile(&sorted, 0.01);
    let range = (sorted_percentile(&sorted, 0.99) - lo).max(1e-9);
    let expected = cfg.disc_size_prior * field.diameter();
    let mut out: Vec<(DiscCandidate, f64)> = candidates
        .into_iter()
        .filter(|c| !c.border_adjacent)
        .filter_map(|mut c| {
            let inside = region_mean(suppressed, &c.region);
            let radius = c.region.equivalent_diameter() / 2.0;
            let surround = annulus_mean(suppressed, &roi, c.region.centroid, 1.5 * radius, 2.5 * radius)?;
            let prominence = (inside - surround) / range;
            if prominence < cfg.min_prominence {
                return None;
            }
            let ratio = c.region.equivalent_diameter() / expected;
            let prior = (-(ratio.ln().powi(2)) / (2.0 * cfg.disc_size_spread.powi(2))).exp();
            c.score = (inside - lo) / range * prior;
            Some((c, prominence))
        })
        .collect();
    out.sort_by(|a, b| b.0.score.total_cmp(&a.0.score));
    out
}

fn best_disc<T: Scalar>(suppressed: &Gray<T>, field: &FieldGeometry, levels: &[T], cfg: &LandmarkConfig) -> Result<Option<DiscLandmark>> {
    let candidates = scan_candidates(suppressed, field, levels, cfg)?;
    Ok(rank_candidates(candidates, suppressed, field, cfg).into_iter().next().map(|(c, prominence)| DiscLandmark {
        center: c.region.centroid,
        radius: c.region.equivalent_diameter() / 2.0,
        score: c.score,
        prominence,
        confidence: c.score.clamp(0.0, 1.0),
        stable: true,
    }))
}

/// Picks the disc among `candidates`, or `None` when nothing survives. The
/// choice is repeated on a brightened copy scanned at the same absolute
/// levels; a center that moves too far marks the disc unstable and halves
/// its confidence.
pub fn select_disc<T: Scalar>(
    candidates: Vec<DiscCandidate>,
    suppressed: &Gray<T>,
    field: &FieldGeometry,
    cfg: &LandmarkConfig,
) -> Result<Option<DiscLandmark>> {
    let mut levels: Vec<T> = candidates.iter().map(|c| T::of(c.level)).collect();
    levels.sort_by(|a, b| b.as_f64().total_cmp(&a.as_f64()));
    levels.dedup();
    let Some((best, prominence)) = rank_candidates(candidates, suppressed, field, cfg).into_iter().next() else {
        return Ok(None);
    };
    let mut disc = DiscLandmark {
        center: best.region.centroid,
        radius: best.region.equivalent_diameter() / 2.0,
        score: best.score,
        prominence,
        confidence: best.score.clamp(0.0, 1.0),
        stable: true,
    };
    let shift = T::of(cfg.stability_shift);
    let brighter = suppressed.map(|v| (v + shift).clamp01());
    let probe = best_disc(&brighter, field, &levels, cfg)?;
    let moved = probe.map_or(f64::INFINITY, |p| {
        ((p.center.0 - disc.center.0).powi(2) + (p.center.1 - disc.center.1).powi(2)).sqrt()
    });
    if moved > cfg.stability_tolerance * disc.radius {
        disc.stable = false;
        disc.confidence /= 2.0;
    }
    Ok(Some(disc))
}

/// Vessel suppression, candidate scan and selection on the working channel.
pub fn detect_disc<T: Scalar>(working: &Gray<T>, field: &FieldGeometry, cfg: &LandmarkConfig) -> Result<Option<DiscLandmark>> {
    let suppressed = suppress_vessels(working, field, cfg);
    let candidates = detect_disc_candidates(&suppressed, field, cfg)?;
    select_disc(candidates, &suppressed, field, cfg)
}

/// Rejects images without a disc or with the disc near the field center.
pub fn validate_geometry(disc: Option<&DiscLandmark>, field: &FieldGeometry, cfg: &LandmarkConfig) -> GeometryVerdict {
    let reason = match disc {
        None => GeometryReason::DiscMissing,
        Some(d) if d.score < cfg.min_disc_score => GeometryReason::DiscMissing,
        Some(d) if field.distance(d.center.0, d.center.1) < cfg.centered_fraction * field.radius => {
            GeometryReason::DiscCentered
        }
        Some(_) => GeometryReason::Ok,
    };
    GeometryVerdict { ok: reason == GeometryReason::Ok, reason }
}

/// Unit vector from the disc toward the field center.
pub(crate) fn disc_axis(disc: &DiscLandmark, field: &FieldGeometry) -> (f64, f64) {
    let (dx, dy) = (field.cx - disc.center.0, field.cy - disc.center.1);
    let n = (dx * dx + dy * dy).sqrt();
    if n < 1e-9 {
        (1.0, 0.0)
    } else {
        (dx / n, dy / n)
    }
}

pub fn geometric_macula(disc: &DiscLandmark, field: &FieldGeometry, cfg: &LandmarkConfig) -> (f64, f64) {
    let u = disc_axis(disc, field);
    let d = cfg.macula_distance * 2.0 * disc.radius;
    (disc.center.0 + d * u.0, disc.center.1 + d * u.1)
}

/// Darkest compact region beyond the disc along the disc-center axis, on a
/// vessel-suppressed, flattened and smoothed channel. Falls back to the
/// geometric estimate when the region is not compact, shallow, or far from it.
pub fn detect_macula<T: Scalar>(
    channel: &Gray<T>,
    field: &FieldGeometry,
    disc: &DiscLandmark,
    cfg: &LandmarkConfig,
) -> MaculaLandmark {
    let (w, h) = (channel.width(), channel.height());
    let geometric = geometric_macula(disc, field, cfg);
    let fallback = MaculaLandmark {
        center: geometric,
        method: MaculaMethod::Geometric,
        confidence: 0.5 * disc.confidence,
        depth: 0.0,
        compactness: 0.0,
    };

    let closed = close(channel, &cfg.closing_element(field));
    let flat = subtract_background(&closed, ((cfg.macula_background * field.radius).round() as usize).max(1));
    let soft = smooth(&flat, ((cfg.macula_smoothing * disc.radius).round() as usize).max(1));

    let u = disc_axis(disc, field);
    let start = cfg.macula_search_start * 2.0 * disc.radius;
    let reach = 2.0 * cfg.macula_distance * 2.0 * disc.radius;
    let search = Mask::from_fn(w, h, |x, y| {
        let (px, py) = (x as f64 - disc.center.0, y as f64 - disc.center.1);
        let along = px * u.0 + py * u.1;
        along >= start && along <= reach && field.distance(x as f64, y as f64) <= 0.9 * field.radius
    });
    let sorted = soft.sorted_values(Some(&search));
    if sorted.is_empty() {
        return fallback;
    }
    let darkest = sorted[0].as_f64();
    let depth = sorted_percentile(&sorted, 0.5) - darkest;
    let cut = T::of(darkest + 0.5 * depth);
    let basin = Mask::from_fn(w, h, |x, y| search.get(x, y) && soft.get(x, y) <= cut);
    let seed = soft
        .samples()
        .iter()
        .enumerate()
        .filter(|&(i, _)| search.bits()[i])
        .min_by(|a, b| a.1.as_f64().total_cmp(&b.1.as_f64()))
        .map(|(i, _)| ((i % w) as usize, (i / w) as usize));
    let Some(seed) = seed else {
        return fallback;
    };
    let Some(region) = connected_components(&basin).into_iter().find(|r| r.contains(seed.0, seed.1)) else {
        return fallback;
    };
    let center = region.centroid;
    let gap = ((center.0 - geometric.0).powi(2) + (center.1 - geometric.1).powi(2)).sqrt();
    let agrees = gap <= cfg.macula_agreement * 2.0 * disc.radius;
    if region.ovalness >= cfg.macula_min_compactness && depth >= cfg.macula_min_depth && agrees {
        let agreement = 1.0 - gap / (cfg.macula_agreement * 2.0 * disc.radius);
        MaculaLandmark {
            center,
            method: MaculaMethod::DarkestRegion,
            confidence: (region.ovalness * (0.5 + 0.5 * agreement)).clamp(0.0, 1.0),
            depth,
            compactness: region.ovalness,
        }
    } else {
        MaculaLandmark { depth, compactness: region.ovalness, ..fallback }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate, DiscPlacement, PhantomSpec};
    use crate::raster::{equalize_histogram, fuse_channels, ChannelWeights};
    use crate::GrayImage;

    fn fused_phantom(spec: &PhantomSpec) -> (GrayImage, FieldGeometry, crate::phantom::GroundTruth) {
        let p = generate(spec).unwrap();
        let fused: GrayImage = fuse_channels(&p.image, &ChannelWeights::default()).unwrap();
        (fused, p.truth.analysis_field, p.truth)
    }

    fn small(seed: u64) -> PhantomSpec {
        PhantomSpec { seed, width: 512, height: 384, ..PhantomSpec::default() }
    }

    fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
        ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
    }

    #[test]
    fn finds_disc_on_phantoms() {
        let cfg = LandmarkConfig::default();
        for seed in 0..6 {
            let (img, field, truth) = fused_phantom(&small(seed));
            let disc = detect_disc(&img, &field, &cfg).unwrap().expect("disc");
            let t = truth.disc.unwrap();
            assert!(dist(disc.center, t.center) <= 0.25 * t.radius, "seed {seed}: {disc:?} vs {t:?}");
            assert!(disc.stable);
            assert!(validate_geometry(Some(&disc), &field, &cfg).ok);
        }
    }

    #[test]
    fn geometry_defects_are_flagged() {
        let cfg = LandmarkConfig::default();
        for seed in 0..3 {
            let (img, field, _) = fused_phantom(&PhantomSpec { disc: DiscPlacement::Absent, ..small(seed) });
            let disc = detect_disc(&img, &field, &cfg).unwrap();
            let v = validate_geometry(disc.as_ref(), &field, &cfg);
            assert_eq!(v.reason, GeometryReason::DiscMissing, "seed {seed}: {disc:?}");

            let (img, field, _) = fused_phantom(&PhantomSpec { disc: DiscPlacement::Centered, ..small(seed) });
            let disc = detect_disc(&img, &field, &cfg).unwrap();
            let v = validate_geometry(disc.as_ref(), &field, &cfg);
            assert_eq!(v.reason, GeometryReason::DiscCentered, "seed {seed}: {disc:?}");
        }
    }

    #[test]
    fn macula_within_half_disc_radius() {
        let cfg = LandmarkConfig::default();
        for seed in 0..6 {
            let (img, field, truth) = fused_phantom(&PhantomSpec::for_grade(seed, 2).map(|s| PhantomSpec { width: 512, height: 384, ..s }).unwrap());
            let disc = detect_disc(&img, &field, &cfg).unwrap().unwrap();
            let eq = equalize_histogram(&img, 256, Some(&field.mask(img.width(), img.height()))).unwrap();
            let m = detect_macula(&eq, &field, &disc, &cfg);
            let r = truth.disc.unwrap().radius;
            assert!(dist(m.center, truth.macula) <= 0.5 * r, "seed {seed}: {m:?} vs {:?}", truth.macula);
        }
    }

    #[test]
    fn flat_macula_falls_back_to_geometry() {
        let cfg = LandmarkConfig::default();
        let (img, field, _) = fused_phantom(&PhantomSpec { macula_contrast: 0.0, ..small(4) });
        let disc = detect_disc(&img, &field, &cfg).unwrap().unwrap();
        let eq = equalize_histogram(&img, 256, Some(&field.mask(img.width(), img.height()))).unwrap();
        let m = detect_macula(&eq, &field, &disc, &cfg);
        if m.method == MaculaMethod::Geometric {
            assert_eq!(m.center, geometric_macula(&disc, &field, &cfg));
        } else {
            assert!(dist(m.center, geometric_macula(&disc, &field, &cfg)) <= 2.0 * disc.radius);
        }
    }

    #[test]
    fn geometric_macula_points_at_center() {
        let cfg = LandmarkConfig::default();
        let field = FieldGeometry { cx: 100.0, cy: 100.0, radius: 90.0 };
        let disc = DiscLandmark { center: (40.0, 100.0), radius: 10.0, score: 1.0, prominence: 1.0, confidence: 1.0, stable: true };
        assert_eq!(geometric_macula(&disc, &field, &cfg), (90.0, 100.0));
        let v = validate_geometry(Some(&DiscLandmark { center: (110.0, 100.0), ..disc }), &field, &cfg);
        assert_eq!((v.ok, v.reason.as_str()), (false, "disc-centered"));
    }

    #[test]
    fn config_validation() {
        assert!(LandmarkConfig::default().validate().is_ok());
        let bad = LandmarkConfig { disc_percentiles: vec![0.9, 0.95], ..LandmarkConfig::default() };
        assert!(bad.validate().is_err());
        let bad = LandmarkConfig { closing_radius: 0.0, ..LandmarkConfig::default() };
        assert!(bad.validate().is_err());
    }
}
