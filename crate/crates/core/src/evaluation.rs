//! Grade agreement (quadratic-weighted Cohen's kappa) and region-level
//! detection scoring.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::morphology::Region;
use crate::{Error, Result, Scalar};

/// Square count table: rows are the reference rater, columns the algorithm.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(counts: Vec<Vec<u64>>) -> Result<Self> {
        let k = counts.len();
        if k < 2 {
            return Err(Error::InvalidInput(format!("need at least 2 grades, got {k}")));
        }
        if counts.iter().any(|row| row.len() != k) {
            return Err(Error::InvalidInput("confusion matrix must be square".into()));
        }
        if counts.iter().flatten().all(|&c| c == 0) {
            return Err(Error::InvalidInput("confusion matrix is empty".into()));
        }
        Ok(Self { k, counts })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn transpose(&self) -> Self {
        let counts = (0..self.k).map(|i| (0..self.k).map(|j| self.counts[j][i]).collect()).collect();
        Self { k: self.k, counts }
    }

    /// Plain-text table with row/column grade headers.
    pub fn to_table(&self) -> String {
        let mut s = String::from("ref\\alg");
        for j in 0..self.k {
            let _ = write!(s, "{j:>6}");
        }
        s.push('\n');
        for (i, row) in self.counts.iter().enumerate() {
            let _ = write!(s, "{i:>7}");
            for c in row {
                let _ = write!(s, "{c:>6}");
            }
            s.push('\n');
        }
        s
    }
}

/// `1 - Σ w·O / Σ w·E` with `w_ij = (i-j)² / (k-1)²`, `O` the observed
/// proportions and `E` the outer product of the marginals.
pub fn quadratic_weighted_kappa<T: Scalar>(m: &ConfusionMatrix) -> Result<T> {
    let k = m.k;
    let n = T::of(m.total() as f64);
    let denom_w = T::of(((k - 1) * (k - 1)) as f64);
    let rows: Vec<T> = m.counts.iter().map(|r| T::of(r.iter().sum::<u64>() as f64) / n).collect();
    let cols: Vec<T> = (0..k).map(|j| T::of(m.counts.iter().map(|r| r[j]).sum::<u64>() as f64) / n).collect();
    let mut observed = T::zero();
    let mut expected = T::zero();
    for i in 0..k {
        for j in 0..k {
            let d = T::of(i as f64 - j as f64);
            let w = d * d / denom_w;
            observed = observed + w * T::of(m.counts[i][j] as f64) / n;
            expected = expected + w * rows[i] * cols[j];
        }
    }
    if expected == T::zero() {
        return Err(Error::DegenerateAgreement);
    }
    Ok(T::one() - observed / expected)
}

pub fn confusion_from_grades(reference: &[usize], predicted: &[usize], k: usize) -> Result<ConfusionMatrix> {
    if reference.len() != predicted.len() {
        return Err(Error::InvalidInput(format!(
            "grade lists differ in length: {} vs {}",
            reference.len(),
            predicted.len()
        )));
    }
    if let Some(bad) = reference.iter().chain(predicted).find(|&&g| g >= k) {
        return Err(Error::InvalidInput(format!("grade {bad} outside [0, {k})")));
    }
    let mut counts = vec![vec![0u64; k]; k];
    for (&r, &p) in reference.iter().zip(predicted) {
        counts[r][p] += 1;
    }
    ConfusionMatrix::new(counts)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectionScore {
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl DetectionScore {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
        Self { true_positives: tp, false_positives: fp, false_negatives: fn_, precision, recall, f1 }
    }

    /// Sums counts across images and recomputes the ratios.
    pub fn merge(&self, other: &DetectionScore) -> DetectionScore {
        Self::from_counts(
            self.true_positives + other.true_positives,
            self.false_positives + other.false_positives,
            self.false_negatives + other.false_negatives,
        )
    }
}

/// Minimum intersection-over-union for a match when the centroid test fails.
pub const MATCH_IOU: f64 = 0.2;

/// Greedy one-to-one matching by descending pixel overlap. A pair is
/// admissible when the prediction's centroid falls inside the truth region or
/// their IoU reaches [`MATCH_IOU`].
pub fn match_regions(predicted: &[Region], truth: &[Region]) -> DetectionScore {
    let mut pairs = Vec::new();
    for (pi, p) in predicted.iter().enumerate() {
        let (cx, cy) = (p.centroid.0.round() as usize, p.centroid.1.round() as usize);
        for (ti, t) in truth.iter().enumerate() {
            let disjoint_boxes = p.bbox.x1 < t.bbox.x0 || t.bbox.x1 < p.bbox.x0 || p.bbox.y1 < t.bbox.y0 || t.bbox.y1 < p.bbox.y0;
            if disjoint_boxes {
                continue;
            }
            let overlap = p.overlap(t);
            let iou = overlap as f64 / (p.area + t.area - overlap) as f64;
            if t.contains(cx, cy) || iou >= MATCH_IOU {
                pairs.push((overlap, pi, ti));
            }
        }
    }
    pairs.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used_p = vec![false; predicted.len()];
    let mut used_t = vec![false; truth.len()];
    let mut tp = 0;
    for (_, pi, ti) in pairs {
        if !used_p[pi] && !used_t[ti] {
            used_p[pi] = true;
            used_t[ti] = true;
            tp += 1;
        }
    }
    DetectionScore::from_counts(tp, predicted.len() - tp, truth.len() - tp)
}

/// Agreement summary for a set of graded cases.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AgreementReport {
    pub cases: usize,
    pub kappa: Option<f64>,
    pub confusion: ConfusionMatrix,
}

impl AgreementReport {
    pub fn from_grades(reference: &[usize], predicted: &[usize], k: usize) -> Result<Self> {
        let confusion = confusion_from_grades(reference, predicted, k)?;
        let kappa = match quadratic_weighted_kappa::<f64>(&confusion) {
            Ok(v) => Some(v),
            Err(Error::DegenerateAgreement) => None,
            Err(e) => return Err(e),
        };
        Ok(Self { cases: reference.len(), kappa, confusion })
    }

    pub fn to_text(&self) -> String {
        let kappa = self.kappa.map_or_else(|| "undefined".to_string(), |k| format!("{k:.3}"));
        format!("cases: {}\nquadratic weighted kappa: {kappa}\n{}", self.cases, self.confusion.to_table())
    }
}
