//! Offline commands: single-image and batch analysis, phantom generation,
//! and agreement scoring of grade files.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::Utc;
use drscreen_core::evaluation::AgreementReport;
use drscreen_core::phantom::{corpus_with, write_corpus, CorpusManifest, PhantomSpec};
use drscreen_core::pipeline::OVERLAY_NAME;
use drscreen_core::{run_pipeline, CaseReport, PipelineConfig};
use serde::{Deserialize, Serialize};

use crate::error::{Result, ServiceError};
use crate::store::write_atomic;

/// Case name to grade level; `None` marks an image the pipeline rejected.
pub type GradeMap = BTreeMap<String, Option<u8>>;

pub const GRADES_FILE: &str = "grades.json";
const LEVELS: usize = 5;

pub fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    match path {
        Some(p) => Ok(PipelineConfig::from_json(&fs::read_to_string(p)?)?),
        None => Ok(PipelineConfig::default()),
    }
}

/// Analyzes one image file; with `out`, writes `report.json` and the overlay there.
pub fn analyze_file(image: &Path, cfg: &PipelineConfig, out: Option<&Path>) -> Result<CaseReport> {
    let bytes = fs::read(image)?;
    let name = case_name(image);
    let outcome = run_pipeline(&bytes, cfg, &name, Utc::now())?;
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        write_atomic(&dir.join("report.json"), &serde_json::to_vec_pretty(&outcome.report)?)?;
        write_atomic(&dir.join(OVERLAY_NAME), &outcome.overlay_png)?;
    }
    Ok(outcome.report)
}

fn case_name(path: &Path) -> String {
    path.file_stem().map_or_else(|| "case".to_string(), |s| s.to_string_lossy().into_owned())
}

fn is_image(path: &Path) -> bool {
    let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
    matches!(ext.as_deref(), Some("png" | "jpg" | "jpeg")) && !path.to_string_lossy().ends_with(".vessels.png")
}

/// One line of batch output.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BatchEntry {
    pub name: String,
    pub report: Option<CaseReport>,
    pub error: Option<String>,
}

/// Analyzes every PNG/JPEG in `dir` in name order. Results go to
/// `out/<name>/` plus a `grades.json` over all of them.
pub fn batch(dir: &Path, cfg: &PipelineConfig, out: &Path) -> Result<Vec<BatchEntry>> {
    let mut images: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_image(p))
        .collect();
    images.sort();
    fs::create_dir_all(out)?;
    let mut entries = Vec::with_capacity(images.len());
    let mut grades = GradeMap::new();
    for path in images {
        let name = case_name(&path);
        match analyze_file(&path, cfg, Some(&out.join(&name))) {
            Ok(report) => {
                grades.insert(name.clone(), report.grade.as_ref().map(|g| g.level));
                entries.push(BatchEntry { name, report: Some(report), error: None });
            }
            Err(e) => entries.push(BatchEntry { name, report: None, error: Some(e.to_string()) }),
        }
    }
    write_atomic(&out.join(GRADES_FILE), &serde_json::to_vec_pretty(&grades)?)?;
    Ok(entries)
}

/// Renders `n` phantoms following `mix` into `out` with a manifest.
pub fn generate_phantoms(seed: u64, n: usize, mix: [f64; 4], width: usize, height: usize, out: &Path) -> Result<CorpusManifest> {
    let template = PhantomSpec { width, height, ..PhantomSpec::default() };
    let items = corpus_with(seed, n, mix, &template)?;
    Ok(write_corpus(out, seed, mix, &items)?)
}

/// Reads a grade map, or the reference grades of a corpus manifest.
pub fn read_grades(path: &Path) -> Result<GradeMap> {
    let text = fs::read_to_string(path)?;
    if let Ok(m) = serde_json::from_str::<CorpusManifest>(&text) {
        return Ok(m.entries.into_iter().map(|e| (e.name, Some(e.grade))).collect());
    }
    Ok(serde_json::from_str(&text)?)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Evaluation {
    pub agreement: AgreementReport,
    /// Cases the pipeline rejected, left out of the agreement.
    pub ungraded: Vec<String>,
    /// Reference cases with no prediction at all.
    pub missing: Vec<String>,
}

impl Evaluation {
    pub fn to_text(&self) -> String {
        let mut text = self.agreement.to_text();
        if !self.ungraded.is_empty() {
            text.push_str(&format!("\nungraded (rejected): {}", self.ungraded.len()));
        }
        if !self.missing.is_empty() {
            text.push_str(&format!("\nmissing predictions: {}", self.missing.len()));
        }
        text
    }
}

/// Quadratic-weighted agreement over the cases graded on both sides.
pub fn evaluate(predicted: &GradeMap, reference: &GradeMap) -> Result<Evaluation> {
    let (mut refs, mut preds) = (Vec::new(), Vec::new());
    let (mut ungraded, mut missing) = (Vec::new(), Vec::new());
    for (name, truth) in reference {
        let Some(truth) = truth else { continue };
        match predicted.get(name) {
            Some(Some(p)) => {
                refs.push(*truth as usize);
                preds.push(*p as usize);
            }
            Some(None) => ungraded.push(name.clone()),
            None => missing.push(name.clone()),
        }
    }
    if refs.is_empty() {
        return Err(ServiceError::Validation("no case is graded in both files".into()));
    }
    let agreement = AgreementReport::from_grades(&refs, &preds, LEVELS)?;
    Ok(Evaluation { agreement, ungraded, missing })
}
