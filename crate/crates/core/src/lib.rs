//! Automated diabetic-retinopathy screening for hand-held ophthalmoscope
//! photographs.
//!
//! The pipeline runs in a fixed order: quality gating of the circular
//! information field, channel fusion and normalization, optic disc and
//! macula localization, vessel and lesion detection, and a five-level
//! grade with a referral flag. Image math is generic over the sample type
//! through [`Scalar`]; the pipeline itself works in `f32`.

pub mod error;
pub mod evaluation;
pub mod landmarks;
pub mod lesions;
pub mod morphology;
pub mod phantom;
pub mod pipeline;
pub mod preprocess;
pub mod raster;
mod scalar;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Working-channel image used by the pipeline.
pub type GrayImage = raster::Gray<f32>;
/// Double-precision working channel, mostly useful for oracles and analysis.
pub type GrayImage64 = raster::Gray<f64>;

pub use landmarks::{DiscLandmark, GeometryReason, GeometryVerdict, MaculaLandmark, MaculaMethod};
pub use lesions::{ClusterStats, DrGrade, GradeReport, LesionSet};
pub use morphology::{Mask, Region, StructuringElement};
pub use pipeline::{analyze, run_pipeline, CaseOutcome, CaseReport, PipelineConfig};
pub use preprocess::{Defect, FieldGeometry, QualityReport};
pub use raster::{ChannelWeights, Gray, RasterImage};

/// Version string recorded in every case report.
pub const PIPELINE_VERSION: &str = env!("CARGO_PKG_VERSION");
