//! End-to-end case analysis: gate, landmarks, lesions, grade and overlay.

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::landmarks::{
    detect_disc, detect_macula, validate_geometry, DiscLandmark, GeometryVerdict, LandmarkConfig, MaculaLandmark,
};
use crate::lesions::{detect_lesions, grade, GradeReport, LesionConfig, LesionSet, LesionSummary};
use crate::morphology::{Mask, Region};
use crate::preprocess::{gate, FieldGeometry, GatedImage, QualityConfig, QualityReport};
use crate::raster::{decode_image, encode_png, equalize_histogram, fuse_channels, percentile, ChannelWeights, RasterImage};
use crate::{Error, GrayImage, Result, PIPELINE_VERSION};

/// Every tunable of the pipeline in one serializable document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub quality: QualityConfig,
    pub channel_weights: ChannelWeights,
    pub equalize_bins: usize,
    pub landmarks: LandmarkConfig,
    pub lesions: LesionConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            quality: QualityConfig::default(),
            channel_weights: ChannelWeights::default(),
            equalize_bins: 256,
            landmarks: LandmarkConfig::default(),
            lesions: LesionConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.quality.validate()?;
        self.channel_weights.validate()?;
        self.landmarks.validate()?;
        self.lesions.validate()?;
        if !(2..=65536).contains(&self.equalize_bins) {
            return Err(Error::InvalidInput(format!("equalize_bins {} outside 2..=65536", self.equalize_bins)));
        }
        if self.landmarks.closing_radius != self.lesions.vessel_kernel {
            return Err(Error::InvalidInput("landmark closing radius and lesion vessel kernel differ".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Hex SHA-256 of the compact JSON form.
    pub fn fingerprint(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Landmarks {
    pub disc: DiscLandmark,
    pub macula: MaculaLandmark,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseReport {
    pub case_id: String,
    pub received: DateTime<Utc>,
    pub pipeline_version: String,
    pub config_fingerprint: String,
    pub quality: QualityReport,
    pub geometry: Option<GeometryVerdict>,
    pub landmarks: Option<Landmarks>,
    pub lesions: Option<LesionSummary>,
    pub grade: Option<GradeReport>,
    pub accepted: bool,
    pub reason: String,
    /// File name of the rendered overlay next to the report.
    pub overlay: String,
}

impl CaseReport {
    /// Checks the accepted/rejected field contract.
    pub fn is_consistent(&self) -> bool {
        if self.accepted {
            self.quality.accepted && self.landmarks.is_some() && self.lesions.is_some() && self.grade.is_some()
        } else {
            self.landmarks.is_none() && self.lesions.is_none() && self.grade.is_none() && !self.reason.is_empty()
        }
    }
}

pub const OVERLAY_NAME: &str = "overlay.png";

/// A finished case: the report, the encoded overlay, and the lesion masks
/// behind the summary when the image was graded.
#[derive(Clone, Debug)]
pub struct CaseOutcome {
    pub report: CaseReport,
    pub overlay_png: Vec<u8>,
    pub lesions: Option<LesionSet>,
}

/// Decodes and analyzes an image payload. Only a decode failure is an error;
/// everything later ends in a report.
pub fn run_pipeline(bytes: &[u8], cfg: &PipelineConfig, case_id: &str, received: DateTime<Utc>) -> Result<CaseOutcome> {
    let img = decode_image(bytes)?;
    analyze(&img, cfg, case_id, received)
}

pub fn analyze(img: &RasterImage, cfg: &PipelineConfig, case_id: &str, received: DateTime<Utc>) -> Result<CaseOutcome> {
    cfg.validate()?;
    let (quality, gated) = gate(img, &cfg.quality);
    let mut report = CaseReport {
        case_id: case_id.to_string(),
        received,
        pipeline_version: PIPELINE_VERSION.to_string(),
        config_fingerprint: cfg.fingerprint(),
        reason: quality.reason.clone(),
        quality,
        geometry: None,
        landmarks: None,
        lesions: None,
        grade: None,
        accepted: false,
        overlay: OVERLAY_NAME.to_string(),
    };
    let Some(gated) = gated else {
        let overlay_png = encode_png(img)?;
        return Ok(CaseOutcome { report, overlay_png, lesions: None });
    };

    let found = match diagnose(&gated, cfg) {
        Ok(d) => d,
        Err(e) => {
            report.reason = format!("analysis failed: {e}");
            return Ok(CaseOutcome { overlay_png: encode_png(img)?, report, lesions: None });
        }
    };
    report.geometry = Some(found.geometry);
    let Stage::Graded { disc, macula, lesions, grade } = found.stage else {
        report.reason = found.geometry.reason.as_str().to_string();
        let overlay_png = encode_png(&render_overlay(img, &gated.field, found.disc.as_ref(), None, None))?;
        return Ok(CaseOutcome { report, overlay_png, lesions: None });
    };

    let overlay = render_overlay(img, &gated.field, Some(&disc), Some(&macula), Some(&lesions));
    report.accepted = true;
    report.reason = "ok".to_string();
    report.lesions = Some(lesions.summary());
    report.grade = Some(grade);
    report.landmarks = Some(Landmarks { disc, macula });
    Ok(CaseOutcome { report, overlay_png: encode_png(&overlay)?, lesions: Some(lesions) })
}

enum Stage {
    Ungradable,
    Graded { disc: DiscLandmark, macula: MaculaLandmark, lesions: LesionSet, grade: GradeReport },
}

struct Diagnosis {
    geometry: GeometryVerdict,
    disc: Option<DiscLandmark>,
    stage: Stage,
}

fn diagnose(gated: &GatedImage, cfg: &PipelineConfig) -> Result<Diagnosis> {
    let field = gated.field;
    let fused = working_channel(gated, &cfg.channel_weights)?;
    let disc = detect_disc(&fused, &field, &cfg.landmarks)?;
    let geometry = validate_geometry(disc.as_ref(), &field, &cfg.landmarks);
    let Some(d) = disc.filter(|_| geometry.ok) else {
        return Ok(Diagnosis { geometry, disc, stage: Stage::Ungradable });
    };
    let roi = field.mask(fused.width(), fused.height());
    let equalized = equalize_histogram(&fused, cfg.equalize_bins, Some(&roi))?;
    let macula = detect_macula(&equalized, &field, &d, &cfg.landmarks);
    let lesions = detect_lesions(&fused, &field, &d, &macula, &cfg.lesions)?;
    let grade = grade(&lesions, &field, macula.center, d.radius, &cfg.lesions);
    Ok(Diagnosis {
        geometry,
        disc: Some(d.clone()),
        stage: Stage::Graded { disc: d, macula, lesions, grade },
    })
}

/// Fused channel with the trimmed bands filled by the median of the kept
/// field, so the removed rows carry no structure.
pub fn working_channel(gated: &GatedImage, weights: &ChannelWeights) -> Result<GrayImage> {
    let mut fused: GrayImage = fuse_channels(&gated.image, weights)?;
    let (w, h) = (fused.width(), fused.height());
    let field = gated.field.mask(w, h);
    if field.count() == gated.valid.count() {
        return Ok(fused);
    }
    let fill = percentile(&fused.sorted_values(Some(&gated.valid)), 0.5).unwrap_or(0.0);
    let trimmed = field.and_not(&gated.valid);
    for y in 0..h {
        for x in 0..w {
            if trimmed.get(x, y) {
                fused.set(x, y, fill);
            }
        }
    }
    Ok(fused)
}

const VESSEL: [u8; 3] = [40, 90, 255];
const HEMORRHAGE: [u8; 3] = [255, 0, 0];
const MICROANEURYSM: [u8; 3] = [255, 140, 0];
const EXUDATE: [u8; 3] = [255, 255, 0];
const OUTLINE: [u8; 3] = [255, 255, 255];

/// Paints the findings over the original image.
pub fn render_overlay(
    img: &RasterImage,
    field: &FieldGeometry,
    disc: Option<&DiscLandmark>,
    macula: Option<&MaculaLandmark>,
    lesions: Option<&LesionSet>,
) -> RasterImage {
    let mut out = img.clone();
    if let Some(set) = lesions {
        paint_mask(&mut out, &set.vessel_mask, VESSEL);
        paint_regions(&mut out, &set.hard_exudates, EXUDATE);
        paint_regions(&mut out, &set.microaneurysms, MICROANEURYSM);
        paint_regions(&mut out, &set.hemorrhages, HEMORRHAGE);
    }
    outline(&mut out, field.cx, field.cy, field.radius);
    if let Some(d) = disc {
        outline(&mut out, d.center.0, d.center.1, d.radius);
        if let Some(m) = macula {
            outline(&mut out, m.center.0, m.center.1, d.radius);
        }
    }
    out
}

fn paint_mask(img: &mut RasterImage, mask: &Mask, rgb: [u8; 3]) {
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if mask.get(x, y) {
                img.set(x, y, rgb);
            }
        }
    }
}

fn paint_regions(img: &mut RasterImage, regions: &[Region], rgb: [u8; 3]) {
    for r in regions {
        for &(x, y) in &r.pixels {
            img.set(x as usize, y as usize, rgb);
        }
    }
}

fn outline(img: &mut RasterImage, cx: f64, cy: f64, r: f64) {
    let (w, h) = (img.width(), img.height());
    let y0 = (cy - r - 2.0).floor().max(0.0) as usize;
    let y1 = ((cy + r + 2.0).ceil().max(0.0) as usize).min(h);
    let x0 = (cx - r - 2.0).floor().max(0.0) as usize;
    let x1 = ((cx + r + 2.0).ceil().max(0.0) as usize).min(w);
    for y in y0..y1 {
        for x in x0..x1 {
            let d = (x as f64 - cx).hypot(y as f64 - cy);
            if (d - r).abs() <= 1.0 {
                img.set(x, y, OUTLINE);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate, BandKind, DefectBand, DiscPlacement, PhantomSpec};
    use crate::preprocess::DefectLocation;

    fn at() -> DateTime<Utc> {
        DateTime::from_timestamp(1_700_000_000, 0).unwrap()
    }

    #[test]
    fn config_round_trips_and_fingerprint_tracks_values() {
        let cfg = PipelineConfig::default();
        let back = PipelineConfig::from_json(&cfg.to_json().unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.fingerprint(), cfg.fingerprint());
        let mut nudged = cfg.clone();
        nudged.lesions.scatter_ratio += 1e-9;
        assert_ne!(nudged.fingerprint(), cfg.fingerprint());
    }

    #[test]
    fn mismatched_vessel_kernels_are_invalid() {
        let mut cfg = PipelineConfig::default();
        cfg.lesions.vessel_kernel = 0.03;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn moderate_phantom_is_graded_and_referred() {
        let ph = generate(&PhantomSpec::for_grade(11, 2).unwrap()).unwrap();
        let out = analyze(&ph.image, &PipelineConfig::default(), "c1", at()).unwrap();
        let r = &out.report;
        assert!(r.accepted, "{}", r.reason);
        assert!(r.is_consistent());
        let g = r.grade.as_ref().unwrap();
        assert_eq!((g.level, g.referral), (2, true), "{}", g.rationale);
    }

    #[test]
    fn heavy_overexposure_is_rejected_without_grade() {
        let spec = PhantomSpec {
            seed: 5,
            defects: vec![DefectBand { kind: BandKind::Overexposed, location: DefectLocation::Top, fraction: 0.4 }],
            ..PhantomSpec::default()
        };
        let ph = generate(&spec).unwrap();
        let out = analyze(&ph.image, &PipelineConfig::default(), "c2", at()).unwrap();
        assert!(!out.report.accepted);
        assert!(!out.report.quality.accepted);
        assert!(out.report.is_consistent());
    }

    #[test]
    fn centered_disc_is_rejected_with_reason() {
        let spec = PhantomSpec { seed: 6, disc: DiscPlacement::Centered, ..PhantomSpec::default() };
        let out = analyze(&generate(&spec).unwrap().image, &PipelineConfig::default(), "c3", at()).unwrap();
        assert!(!out.report.accepted);
        assert_eq!(out.report.reason, "disc-centered");
        assert!(out.report.is_consistent());
    }

    #[test]
    fn exudate_cluster_is_not_taken_for_a_missing_disc() {
        let spec = PhantomSpec { disc: DiscPlacement::Absent, ..PhantomSpec::for_grade(701, 2).unwrap() };
        let out = analyze(&generate(&spec).unwrap().image, &PipelineConfig::default(), "c4", at()).unwrap();
        assert_eq!((out.report.accepted, out.report.reason.as_str()), (false, "disc-missing"));
    }

    #[test]
    fn identical_input_gives_identical_output() {
        let ph = generate(&PhantomSpec::for_grade(3, 1).unwrap()).unwrap();
        let png = encode_png(&ph.image).unwrap();
        let cfg = PipelineConfig::default();
        let a = run_pipeline(&png, &cfg, "x", at()).unwrap();
        let b = run_pipeline(&png, &cfg, "x", at()).unwrap();
        assert_eq!(serde_json::to_string(&a.report).unwrap(), serde_json::to_string(&b.report).unwrap());
        assert_eq!(a.overlay_png, b.overlay_png);
    }

    #[test]
    fn undecodable_payload_is_an_error() {
        let err = run_pipeline(b"not an image", &PipelineConfig::default(), "x", at()).unwrap_err();
        assert!(matches!(err, Error::Decode(_)));
    }
}
