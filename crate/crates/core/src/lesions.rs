//! Vessel segmentation, dark and bright lesion detection, and grading.
//!
//! Dark structures are read off a black top-hat of the median-normalized
//! channel, bright ones off a white top-hat. Each background first removes
//! small structures of the opposite polarity (vessels for the bright side,
//! exudates for the dark side), so gaps between them do not read as
//! lesions. Percentile threshold schedules are capped by absolute contrast
//! floors so a lesion-free image produces no candidates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::landmarks::{DiscLandmark, MaculaLandmark};
use crate::morphology::{close, dilate, open, threshold_scan, Mask, Polarity, Region, StructuringElement};
use crate::phantom::quadrant;
use crate::preprocess::FieldGeometry;
use crate::raster::{normalize_median, percentile, Gray};
use crate::{Error, Result, Scalar};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LesionConfig {
    /// Median of the field is mapped here before the top-hats.
    pub normalize_target: f64,
    /// Top-hat element radius, in field radii.
    pub tophat_radius: f64,
    /// Ascending percentiles of the dark scan.
    pub dark_percentiles: Vec<f64>,
    /// Descending percentiles of the bright scan.
    pub bright_percentiles: Vec<f64>,
    /// Dark levels never rise above `0.5 - min_dark_contrast`.
    pub min_dark_contrast: f64,
    /// Bright levels never drop below `0.5 + min_bright_contrast`.
    pub min_bright_contrast: f64,
    /// Outer fraction of the field radius left out of the analysis.
    pub edge_band: f64,
    pub oval_max_vessel: f64,
    /// Vessel components must span more than this many disc radii.
    pub min_vessel_extent: f64,
    /// Opening radius (field radii) that keeps blobs and removes vessels.
    pub blob_core_radius: f64,
    /// Dark regions within this many vessel-kernel radii of the disc rim join the vessels.
    pub disc_link_kernels: f64,
    /// Vessel-suppression kernel radius, in field radii (shared with the landmarks).
    pub vessel_kernel: f64,
    pub oval_min_lesion: f64,
    pub hemorrhage_width_ratio: f64,
    /// Largest microaneurysm equivalent diameter, in disc radii.
    pub ma_max_diameter: f64,
    /// Dilation applied to the vessel mask before the membership test, in pixels.
    pub vessel_proximity: usize,
    /// Lesions stay outside this many disc radii from the disc center.
    pub disc_exclusion: f64,
    /// Bright regions wider than this (disc radii) are never exudates.
    pub exudate_max_diameter: f64,
    /// Cluster must sit within this many disc diameters of the macula, on average.
    pub exudate_cluster_radius: f64,
    /// Mean pairwise distance must fall under this fraction of the uniform baseline.
    pub scatter_ratio: f64,
    pub baseline_draws: usize,
    pub baseline_seed: u64,
    /// Members farther than this many cluster radii from the cluster centroid are dropped.
    pub outlier_factor: f64,
    pub severe_hemorrhages: usize,
    pub severe_quadrants: usize,
}

impl Default for LesionConfig {
    fn default() -> Self {
        Self {
            normalize_target: 0.4,
            tophat_radius: 0.06,
            dark_percentiles: vec![0.01, 0.02, 0.04, 0.07, 0.11, 0.16, 0.22, 0.30],
            bright_percentiles: vec![0.995, 0.99, 0.98, 0.97, 0.95, 0.92, 0.89, 0.85],
            min_dark_contrast: 0.08,
            min_bright_contrast: 0.12,
            edge_band: 0.08,
            oval_max_vessel: 0.35,
            min_vessel_extent: 0.25,
            blob_core_radius: 0.012,
            disc_link_kernels: 2.0,
            vessel_kernel: 0.02,
            oval_min_lesion: 0.6,
            hemorrhage_width_ratio: 1.5,
            ma_max_diameter: 0.125,
            vessel_proximity: 2,
            disc_exclusion: 1.5,
            exudate_max_diameter: 0.8,
            exudate_cluster_radius: 2.0,
            scatter_ratio: 0.7,
            baseline_draws: 1000,
            baseline_seed: 0x5eed,
            outlier_factor: 2.0,
            severe_hemorrhages: 10,
            severe_quadrants: 3,
        }
    }
}

impl LesionConfig {
    pub fn validate(&self) -> Result<()> {
        let ascending = |v: &[f64]| v.windows(2).all(|w| w[0] < w[1]);
        let in_unit = |v: &[f64]| v.iter().all(|q| (0.0..=1.0).contains(q));
        if self.dark_percentiles.is_empty() || !ascending(&self.dark_percentiles) || !in_unit(&self.dark_percentiles) {
            return Err(Error::InvalidInput("dark percentiles must ascend within [0,1]".into()));
        }
        let mut bright = self.bright_percentiles.clone();
        bright.reverse();
        if bright.is_empty() || !ascending(&bright) || !in_unit(&bright) {
            return Err(Error::InvalidInput("bright percentiles must descend within [0,1]".into()));
        }
        if !(0.0..0.5).contains(&self.min_dark_contrast) || !(0.0..0.5).contains(&self.min_bright_contrast) {
            return Err(Error::InvalidInput("contrast floors must lie in [0,0.5)".into()));
        }
        if !(0.0..1.0).contains(&self.edge_band) || !(self.normalize_target > 0.0 && self.normalize_target <= 1.0) {
            return Err(Error::InvalidInput("edge band or normalization target out of range".into()));
        }
        if self.baseline_draws == 0 || self.severe_quadrants > 4 {
            return Err(Error::InvalidInput("baseline draws must be positive and quadrants at most 4".into()));
        }
        for (name, v) in [
            ("tophat_radius", self.tophat_radius),
            ("vessel_kernel", self.vessel_kernel),
            ("blob_core_radius", self.blob_core_radius),
            ("ma_max_diameter", self.ma_max_diameter),
            ("scatter_ratio", self.scatter_ratio),
            ("exudate_cluster_radius", self.exudate_cluster_radius),
        ] {
            if !(v > 0.0) {
                return Err(Error::InvalidInput(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

/// Dark and bright top-hat channels; 0.5 means no local contrast.
#[derive(Clone, Debug)]
pub struct LesionChannels<T> {
    pub dark: Gray<T>,
    pub bright: Gray<T>,
}

pub fn lesion_channels<T: Scalar>(fused: &Gray<T>, field: &FieldGeometry, cfg: &LesionConfig) -> LesionChannels<T> {
    let roi = field.mask(fused.width(), fused.height());
    let norm = normalize_median(fused, &roi, cfg.normalize_target);
    let element = |scale: f64| StructuringElement::disc(((scale * field.radius).round() as usize).max(1));
    let (se, small) = (element(cfg.tophat_radius), element(cfg.vessel_kernel));
    let half = T::of(0.5);
    let closed = close(&open(&norm, &small), &se);
    let opened = open(&close(&norm, &small), &se);
    let zip = |a: &Gray<T>, f: &dyn Fn(T, T) -> T| {
        Gray::from_fn(fused.width(), fused.height(), |x, y| f(norm.get(x, y), a.get(x, y)).clamp01())
    };
    LesionChannels {
        dark: zip(&closed, &|v, bg| v - bg + half),
        bright: zip(&opened, &|v, bg| v - bg + half),
    }
}

/// Field interior without the outer edge band.
pub fn analysis_mask(field: &FieldGeometry, width: usize, height: usize, edge_band: f64) -> Mask {
    field.interior_mask(width, height, edge_band)
}

fn disc_mask(disc: &DiscLandmark, width: usize, height: usize, scale: f64) -> Mask {
    Mask::disc(width, height, disc.center.0, disc.center.1, disc.radius * scale)
}

/// Percentile levels capped by a contrast floor, made strictly monotone.
fn capped_levels<T: Scalar>(img: &Gray<T>, roi: &Mask, percentiles: &[f64], polarity: Polarity, floor: f64) -> Vec<T> {
    let sorted = img.sorted_values(Some(roi));
    let mut levels: Vec<T> = Vec::new();
    for &q in percentiles {
        let p = percentile(&sorted, q).map_or(0.5, |v| v.as_f64());
        let v = match polarity {
            Polarity::Below => p.min(0.5 - floor),
            Polarity::Above => p.max(0.5 + floor),
        };
        let v = T::of(v);
        let fresh = levels.last().map_or(true, |&l| match polarity {
            Polarity::Below => v > l,
            Polarity::Above => v < l,
        });
        if fresh {
            levels.push(v);
        }
    }
    levels
}

/// Wide dark blobs: what survives an opening of the loosest dark mask with
/// an element broader than any vessel.
pub fn blob_cores<T: Scalar>(dark: &Gray<T>, field: &FieldGeometry, cfg: &LesionConfig) -> Mask {
    let (w, h) = (dark.width(), dark.height());
    let roi = analysis_mask(field, w, h, cfg.edge_band);
    let levels = capped_levels(dark, &roi, &cfg.dark_percentiles, Polarity::Below, cfg.min_dark_contrast);
    let Some(&loosest) = levels.last() else {
        return Mask::new(w, h);
    };
    let mask = Mask::from_fn(w, h, |x, y| roi.get(x, y) && dark.get(x, y) < loosest);
    let radius = ((cfg.blob_core_radius * field.radius).round() as usize).max(1);
    open(&mask, &StructuringElement::disc(radius))
}

/// Ascending dark scan away from blob cores; a component joins the vessels
/// when it is long and elongated, or when it reaches the disc neighbourhood.
/// The mask is the union over levels.
pub fn segment_vessels<T: Scalar>(dark: &Gray<T>, field: &FieldGeometry, disc: &DiscLandmark, cfg: &LesionConfig) -> Result<Mask> {
    let (w, h) = (dark.width(), dark.height());
    let cores = dilate(&blob_cores(dark, field, cfg), &StructuringElement::disc(cfg.vessel_proximity));
    let roi = analysis_mask(field, w, h, cfg.edge_band).and_not(&cores);
    let mut vessels = Mask::new(w, h);
    if roi.is_empty() {
        return Ok(vessels);
    }
    let link = disc.radius + cfg.disc_link_kernels * cfg.vessel_kernel * field.radius;
    let min_extent = cfg.min_vessel_extent * disc.radius;
    let levels = capped_levels(dark, &roi, &cfg.dark_percentiles, Polarity::Below, cfg.min_dark_contrast);
    for scan in threshold_scan(dark, &levels, Polarity::Below, &roi)? {
        for region in scan.regions {
            let extent = (region.bbox.width() as f64).hypot(region.bbox.height() as f64);
            let elongated = region.ovalness < cfg.oval_max_vessel && extent > min_extent;
            let near_disc = || region.distance_to(disc.center) <= link;
            if elongated || near_disc() {
                vessels.paint_region(&region);
            }
        }
    }
    Ok(vessels)
}

/// Area-weighted mean width of the vessel components.
pub fn vessel_mean_width(vessels: &Mask) -> Option<f64> {
    let comps = crate::morphology::connected_components(vessels);
    let area: usize = comps.iter().map(|r| r.area).sum();
    (area > 0).then(|| comps.iter().map(|r| r.mean_width * r.area as f64).sum::<f64>() / area as f64)
}

fn sort_regions(regions: &mut [Region]) {
    regions.sort_by(|a, b| a.pixels[0].1.cmp(&b.pixels[0].1).then(a.pixels[0].0.cmp(&b.pixels[0].0)));
}

/// Splits dark candidates into hemorrhages and microaneurysms. Regions
/// touching the (dilated) vessel mask or the disc are dropped, as are
/// non-oval ones and oval ones too narrow for a hemorrhage yet too large for
/// a microaneurysm.
pub fn classify_dark_lesions(
    candidates: &[Region],
    vessels: &Mask,
    vessel_width: f64,
    disc: &DiscLandmark,
    cfg: &LesionConfig,
) -> (Vec<Region>, Vec<Region>) {
    let near_vessels = dilate(vessels, &StructuringElement::disc(cfg.vessel_proximity));
    let disc_zone = disc_mask(disc, vessels.width(), vessels.height(), cfg.disc_exclusion);
    let ma_limit = cfg.ma_max_diameter * disc.radius;
    let (mut hemorrhages, mut mas) = (Vec::new(), Vec::new());
    for r in candidates {
        if r.touches(&near_vessels) || r.touches(&disc_zone) || r.ovalness < cfg.oval_min_lesion {
            continue;
        }
        if r.mean_width > cfg.hemorrhage_width_ratio * vessel_width {
            hemorrhages.push(r.clone());
        } else if r.equivalent_diameter() <= ma_limit {
            mas.push(r.clone());
        }
    }
    sort_regions(&mut hemorrhages);
    sort_regions(&mut mas);
    (hemorrhages, mas)
}

/// Dark components of the loosest dark level inside the analysis region.
pub fn dark_candidates<T: Scalar>(dark: &Gray<T>, field: &FieldGeometry, cfg: &LesionConfig) -> Result<Vec<Region>> {
    let roi = analysis_mask(field, dark.width(), dark.height(), cfg.edge_band);
    if roi.is_empty() {
        return Ok(Vec::new());
    }
    let levels = capped_levels(dark, &roi, &cfg.dark_percentiles, Polarity::Below, cfg.min_dark_contrast);
    let loosest = &levels[levels.len() - 1..];
    Ok(threshold_scan(dark, loosest, Polarity::Below, &roi)?.pop().map(|s| s.regions).unwrap_or_default())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterStats {
    pub member_count: usize,
    pub mean_pairwise_distance: f64,
    pub mean_distance_to_macula: f64,
    /// Expected mean pairwise distance of as many uniform points in the field.
    pub scatter_baseline: f64,
}

fn mean_pairwise(points: &[(f64, f64)]) -> f64 {
    let n = points.len();
    if n < 2 {
        return 0.0;
    }
    let mut sum = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            sum += ((points[i].0 - points[j].0).powi(2) + (points[i].1 - points[j].1).powi(2)).sqrt();
        }
    }
    sum / (n * (n - 1) / 2) as f64
}

/// Monte-Carlo mean pairwise distance of `n` points uniform in the field disc.
pub fn scatter_baseline(n: usize, field: &FieldGeometry, draws: usize, seed: u64) -> f64 {
    if n < 2 {
        return 0.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pts = vec![(0.0, 0.0); n];
    let mut total = 0.0;
    for _ in 0..draws {
        for p in pts.iter_mut() {
            let rho = field.radius * rng.gen::<f64>().sqrt();
            let t = rng.gen_range(0.0..std::f64::consts::TAU);
            *p = (field.cx + rho * t.cos(), field.cy + rho * t.sin());
        }
        total += mean_pairwise(&pts);
    }
    total / draws as f64
}

pub fn cluster_stats(regions: &[Region], macula: (f64, f64), field: &FieldGeometry, cfg: &LesionConfig) -> Option<ClusterStats> {
    if regions.is_empty() {
        return None;
    }
    let pts: Vec<(f64, f64)> = regions.iter().map(|r| r.centroid).collect();
    let to_macula = pts.iter().map(|p| ((p.0 - macula.0).powi(2) + (p.1 - macula.1).powi(2)).sqrt()).sum::<f64>() / pts.len() as f64;
    Some(ClusterStats {
        member_count: pts.len(),
        mean_pairwise_distance: mean_pairwise(&pts),
        mean_distance_to_macula: to_macula,
        scatter_baseline: scatter_baseline(pts.len(), field, cfg.baseline_draws, cfg.baseline_seed),
    })
}

/// Result of the bright-lesion stage.
#[derive(Clone, Debug)]
pub struct BrightLesions {
    pub hard_exudates: Vec<Region>,
    pub bright_unclassified: Vec<Region>,
    pub stats: Option<ClusterStats>,
}

/// Descending bright scan outside `exclusions`. The candidate set is a hard
/// exudate cluster when it sits near the macula and is tighter than uniform
/// scatter; members far from the cluster core are left unclassified.
pub fn detect_bright_lesions<T: Scalar>(
    bright: &Gray<T>,
    exclusions: &Mask,
    field: &FieldGeometry,
    disc: &DiscLandmark,
    macula: &MaculaLandmark,
    cfg: &LesionConfig,
) -> Result<BrightLesions> {
    let (w, h) = (bright.width(), bright.height());
    let roi = analysis_mask(field, w, h, cfg.edge_band).and_not(exclusions);
    let empty = BrightLesions { hard_exudates: Vec::new(), bright_unclassified: Vec::new(), stats: None };
    if roi.is_empty() {
        return Ok(empty);
    }
    let levels = capped_levels(bright, &roi, &cfg.bright_percentiles, Polarity::Above, cfg.min_bright_contrast);
    let loosest = &levels[levels.len() - 1..];
    let regions = threshold_scan(bright, loosest, Polarity::Above, &roi)?.pop().map(|s| s.regions).unwrap_or_default();
    let max_diameter = cfg.exudate_max_diameter * disc.radius;
    let (mut candidates, mut unclassified): (Vec<Region>, Vec<Region>) =
        regions.into_iter().partition(|r| r.equivalent_diameter() <= max_diameter);
    sort_regions(&mut candidates);

    let stats = cluster_stats(&candidates, macula.center, field, cfg);
    let clustered = stats.is_some_and(|s| {
        s.member_count >= 2
            && s.mean_distance_to_macula <= cfg.exudate_cluster_radius * 2.0 * disc.radius
            && s.mean_pairwise_distance < cfg.scatter_ratio * s.scatter_baseline
    });
    let mut exudates = Vec::new();
    if clustered {
        let n = candidates.len() as f64;
        let core = (
            candidates.iter().map(|r| r.centroid.0).sum::<f64>() / n,
            candidates.iter().map(|r| r.centroid.1).sum::<f64>() / n,
        );
        let dist = |r: &Region| ((r.centroid.0 - core.0).powi(2) + (r.centroid.1 - core.1).powi(2)).sqrt();
        let radius = candidates.iter().map(dist).sum::<f64>() / n;
        for r in candidates {
            if dist(&r) <= cfg.outlier_factor * radius.max(1.0) {
                exudates.push(r);
            } else {
                unclassified.push(r);
            }
        }
        if exudates.len() < 2 {
            unclassified.append(&mut exudates);
        }
    } else {
        unclassified.extend(candidates);
    }
    sort_regions(&mut unclassified);
    Ok(BrightLesions { hard_exudates: exudates, bright_unclassified: unclassified, stats })
}

/// Everything found in one image.
#[derive(Clone, Debug)]
pub struct LesionSet {
    pub vessel_mask: Mask,
    pub hemorrhages: Vec<Region>,
    pub microaneurysms: Vec<Region>,
    pub hard_exudates: Vec<Region>,
    pub bright_unclassified: Vec<Region>,
    pub cluster: Option<ClusterStats>,
}

impl LesionSet {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            vessel_mask: Mask::new(width, height),
            hemorrhages: Vec::new(),
            microaneurysms: Vec::new(),
            hard_exudates: Vec::new(),
            bright_unclassified: Vec::new(),
            cluster: None,
        }
    }

    pub fn summary(&self) -> LesionSummary {
        let list = |v: &[Region]| v.iter().map(RegionSummary::from).collect();
        LesionSummary {
            vessel_pixels: self.vessel_mask.count(),
            hemorrhages: list(&self.hemorrhages),
            microaneurysms: list(&self.microaneurysms),
            hard_exudates: list(&self.hard_exudates),
            bright_unclassified: list(&self.bright_unclassified),
            cluster: self.cluster,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionSummary {
    pub centroid: (f64, f64),
    pub area: usize,
    pub equivalent_diameter: f64,
    pub ovalness: f64,
    pub mean_width: f64,
}

impl From<&Region> for RegionSummary {
    fn from(r: &Region) -> Self {
        Self {
            centroid: r.centroid,
            area: r.area,
            equivalent_diameter: r.equivalent_diameter(),
            ovalness: r.ovalness,
            mean_width: r.mean_width,
        }
    }
}

/// JSON form of a [`LesionSet`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LesionSummary {
    pub vessel_pixels: usize,
    pub hemorrhages: Vec<RegionSummary>,
    pub microaneurysms: Vec<RegionSummary>,
    pub hard_exudates: Vec<RegionSummary>,
    pub bright_unclassified: Vec<RegionSummary>,
    pub cluster: Option<ClusterStats>,
}

/// Runs the vessel, dark-lesion and bright-lesion stages in order.
pub fn detect_lesions<T: Scalar>(
    fused: &Gray<T>,
    field: &FieldGeometry,
    disc: &DiscLandmark,
    macula: &MaculaLandmark,
    cfg: &LesionConfig,
) -> Result<LesionSet> {
    let (w, h) = (fused.width(), fused.height());
    let channels = lesion_channels(fused, field, cfg);
    let vessels = segment_vessels(&channels.dark, field, disc, cfg)?;
    let width = vessel_mean_width(&vessels).unwrap_or(2.0);
    let candidates = dark_candidates(&channels.dark, field, cfg)?;
    let (hemorrhages, microaneurysms) = classify_dark_lesions(&candidates, &vessels, width, disc, cfg);

    let mut exclusions = vessels.or(&disc_mask(disc, w, h, cfg.disc_exclusion));
    for r in hemorrhages.iter().chain(&microaneurysms) {
        exclusions.paint_region(r);
    }
    let exclusions = dilate(&exclusions, &StructuringElement::disc(cfg.vessel_proximity));
    let bright = detect_bright_lesions(&channels.bright, &exclusions, field, disc, macula, cfg)?;
    Ok(LesionSet {
        vessel_mask: vessels,
        hemorrhages,
        microaneurysms,
        hard_exudates: bright.hard_exudates,
        bright_unclassified: bright.bright_unclassified,
        cluster: bright.stats,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DrGrade {
    /// 0 none, 1 mild, 2 moderate, 3 severe non-proliferative, 4 proliferative.
    pub level: u8,
    pub referral: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradeReport {
    pub level: u8,
    pub referral: bool,
    pub rationale: String,
}

impl GradeReport {
    pub fn grade(&self) -> DrGrade {
        DrGrade { level: self.level, referral: self.referral }
    }
}

/// Maps lesion counts to a level. Level 4 is never produced: new vessel
/// growth is not detected.
pub fn grade(lesions: &LesionSet, field: &FieldGeometry, macula: (f64, f64), disc_radius: f64, cfg: &LesionConfig) -> GradeReport {
    let mut quadrants = [false; 4];
    for r in &lesions.hemorrhages {
        quadrants[quadrant(r.centroid, field)] = true;
    }
    let spread = quadrants.iter().filter(|q| **q).count();
    let hm = lesions.hemorrhages.len();
    let ex = lesions.hard_exudates.len();
    let ma = lesions.microaneurysms.len();
    let (level, why) = if hm >= cfg.severe_hemorrhages && spread >= cfg.severe_quadrants {
        (3, format!("{hm} hemorrhages in {spread} quadrants"))
    } else if hm > 0 || ex > 0 {
        (2, format!("{hm} hemorrhages, {ex} hard exudates in a cluster"))
    } else if ma > 0 {
        (1, format!("{ma} microaneurysms only"))
    } else {
        (0, "no lesions found".to_string())
    };
    let reach = cfg.exudate_cluster_radius * 2.0 * disc_radius;
    let exudate_near_macula = lesions.hard_exudates.iter().any(|r| r.distance_to(macula) <= reach);
    let referral = level >= 2 || (level >= 1 && exudate_near_macula);
    GradeReport { level, referral, rationale: why }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::landmarks::MaculaMethod;
    use crate::morphology::connected_components;

    fn disc_at(x: f64, y: f64, r: f64) -> DiscLandmark {
        DiscLandmark { center: (x, y), radius: r, score: 1.0, prominence: 1.0, confidence: 1.0, stable: true }
    }

    fn macula_at(x: f64, y: f64) -> MaculaLandmark {
        MaculaLandmark { center: (x, y), method: MaculaMethod::Geometric, confidence: 0.5, depth: 0.0, compactness: 0.0 }
    }

    fn blob(cx: i64, cy: i64, r: f64) -> Region {
        let mut px = Vec::new();
        let ri = r.ceil() as i64;
        for y in cy - ri..=cy + ri {
            for x in cx - ri..=cx + ri {
                if (((x - cx).pow(2) + (y - cy).pow(2)) as f64).sqrt() <= r {
                    px.push((x as u32, y as u32));
                }
            }
        }
        Region::from_pixels(px).unwrap()
    }

    fn set_with(hm: Vec<Region>, ma: Vec<Region>, ex: Vec<Region>) -> LesionSet {
        LesionSet { hemorrhages: hm, microaneurysms: ma, hard_exudates: ex, ..LesionSet::empty(400, 400) }
    }

    const FIELD: FieldGeometry = FieldGeometry { cx: 200.0, cy: 200.0, radius: 190.0 };

    #[test]
    fn grade_table() {
        let cfg = LesionConfig::default();
        let g = grade(&LesionSet::empty(400, 400), &FIELD, (200.0, 200.0), 20.0, &cfg);
        assert_eq!((g.level, g.referral), (0, false));
        let mas = vec![blob(100, 100, 1.0), blob(300, 100, 1.0), blob(100, 300, 1.0)];
        let g = grade(&set_with(vec![], mas.clone(), vec![]), &FIELD, (200.0, 200.0), 20.0, &cfg);
        assert_eq!((g.level, g.referral), (1, false));
        let ex = vec![blob(210, 200, 2.0), blob(190, 205, 2.0)];
        let g = grade(&set_with(vec![blob(120, 120, 6.0)], vec![], ex), &FIELD, (200.0, 200.0), 20.0, &cfg);
        assert_eq!((g.level, g.referral), (2, true));
        let many: Vec<Region> = (0..12).map(|i| blob(60 + (i % 4) * 90, 60 + (i / 4) * 120, 5.0)).collect();
        let g = grade(&set_with(many, vec![], vec![]), &FIELD, (200.0, 200.0), 20.0, &cfg);
        assert_eq!(g.level, 3);
        let clumped: Vec<Region> = (0..12).map(|i| blob(30 + i * 12, 40, 4.0)).collect();
        let g = grade(&set_with(clumped, vec![], vec![]), &FIELD, (200.0, 200.0), 20.0, &cfg);
        assert_eq!(g.level, 2, "one quadrant only");
    }

    #[test]
    fn classification_rules() {
        let cfg = LesionConfig::default();
        let disc = disc_at(60.0, 200.0, 40.0);
        let vessels = Mask::new(400, 400);
        let blot = blob(250, 120, 10.0); // 0.5 disc radii across
        let dot = blob(300, 300, 1.2); // ~0.06 disc radii
        let streak = Region::from_pixels((200..240).flat_map(|x| [(x, 250), (x, 251)]).collect()).unwrap();
        assert!(streak.ovalness < 0.3);
        let (hm, ma) = classify_dark_lesions(&[blot.clone(), dot.clone(), streak], &vessels, 3.0, &disc, &cfg);
        assert_eq!(hm, vec![blot.clone()]);
        assert_eq!(ma, vec![dot.clone()]);
        // permutation invariance
        let (hm2, ma2) = classify_dark_lesions(&[dot.clone(), blot.clone()], &vessels, 3.0, &disc, &cfg);
        assert_eq!((hm2, ma2), (vec![blot.clone()], vec![dot]));
        // touching a vessel disqualifies
        let mut v = Mask::new(400, 400);
        for y in 100..140 {
            v.set(262, y, true);
        }
        let (hm, _) = classify_dark_lesions(&[blot], &v, 3.0, &disc, &cfg);
        assert!(hm.is_empty());
    }

    #[test]
    fn clustered_vs_scattered_exudates() {
        let cfg = LesionConfig::default();
        let disc = disc_at(60.0, 200.0, 25.0);
        let macula = macula_at(185.0, 200.0);
        let mut clustered = Mask::new(400, 400);
        for i in 0..12 {
            let t = i as f64 / 12.0 * std::f64::consts::TAU;
            let (x, y) = (185.0 + 45.0 * t.cos(), 200.0 + 45.0 * t.sin());
            clustered = clustered.or(&Mask::disc(400, 400, x, y, 3.0));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut scattered = Mask::new(400, 400);
        let mut placed = 0;
        while placed < 12 {
            let (x, y) = (rng.gen_range(40.0..360.0), rng.gen_range(40.0..360.0));
            if FIELD.distance(x, y) < 160.0 && ((x - 60.0f64).powi(2) + (y - 200.0f64).powi(2)).sqrt() > 50.0 {
                scattered = scattered.or(&Mask::disc(400, 400, x, y, 3.0));
                placed += 1;
            }
        }
        let render = |m: &Mask| Gray::<f32>::from_fn(400, 400, |x, y| if m.get(x, y) { 0.9 } else { 0.5 });
        let none = Mask::new(400, 400);
        let out = detect_bright_lesions(&render(&clustered), &none, &FIELD, &disc, &macula, &cfg).unwrap();
        assert!(out.hard_exudates.len() >= 10, "{} {:?} {}", out.hard_exudates.len(), out.stats, out.bright_unclassified.len());
        let out = detect_bright_lesions(&render(&scattered), &none, &FIELD, &disc, &macula, &cfg).unwrap();
        assert!(out.hard_exudates.is_empty());
        assert_eq!(out.bright_unclassified.len(), connected_components(&scattered).len());
        let flat = Gray::<f32>::filled(400, 400, 0.5);
        let out = detect_bright_lesions(&flat, &none, &FIELD, &disc, &macula, &cfg).unwrap();
        assert!(out.hard_exudates.is_empty() && out.bright_unclassified.is_empty() && out.stats.is_none());
    }

    #[test]
    fn baseline_matches_closed_form() {
        // mean distance between two uniform points in a disc of radius R is 128R/(45π)
        let f = FieldGeometry { cx: 0.0, cy: 0.0, radius: 1.0 };
        let mc = scatter_baseline(2, &f, 20000, 1);
        let exact = 128.0 / (45.0 * std::f64::consts::PI);
        assert!((mc - exact).abs() < 0.01, "{mc} vs {exact}");
        assert_eq!(scatter_baseline(2, &f, 100, 9), scatter_baseline(2, &f, 100, 9));
    }

    #[test]
    fn uniform_image_has_no_vessels_or_lesions() {
        let cfg = LesionConfig::default();
        let img = Gray::<f32>::filled(400, 400, 0.4);
        let disc = disc_at(80.0, 200.0, 24.0);
        let c = lesion_channels(&img, &FIELD, &cfg);
        assert!(segment_vessels(&c.dark, &FIELD, &disc, &cfg).unwrap().is_empty());
        assert!(dark_candidates(&c.dark, &FIELD, &cfg).unwrap().is_empty());
    }

    #[test]
    fn config_checks() {
        assert!(LesionConfig::default().validate().is_ok());
        let bad = LesionConfig { dark_percentiles: vec![0.3, 0.1], ..LesionConfig::default() };
        assert!(bad.validate().is_err());
        let bad = LesionConfig { bright_percentiles: vec![0.8, 0.9], ..LesionConfig::default() };
        assert!(bad.validate().is_err());
    }
}
