//! Precision/recall against ground truth with greedy box-IoU matching, and
//! per-image agreement statistics between two detector configurations.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detector::{response_order, Blob, DetectionParams, Detector};
use crate::error::{Error, Result};
use crate::image_core::Image;
use crate::synth::GroundTruthCircle;

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;

/// Axis-aligned box `[x0, x1] x [y0, y1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundingBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BoundingBox {
    pub fn around_circle(x: f64, y: f64, r: f64) -> Self {
        Self {
            x0: x - r,
            y0: y - r,
            x1: x + r,
            y1: y + r,
        }
    }

    pub fn area(&self) -> f64 {
        (self.x1 - self.x0).max(0.0) * (self.y1 - self.y0).max(0.0)
    }

    pub fn iou(&self, other: &BoundingBox) -> f64 {
        let iw = (self.x1.min(other.x1) - self.x0.max(other.x0)).max(0.0);
        let ih = (self.y1.min(other.y1) - self.y0.max(other.y0)).max(0.0);
        let inter = iw * ih;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}

impl From<&Blob> for BoundingBox {
    fn from(b: &Blob) -> Self {
        BoundingBox::around_circle(b.x as f64, b.y as f64, b.radius)
    }
}

impl From<&GroundTruthCircle> for BoundingBox {
    fn from(c: &GroundTruthCircle) -> Self {
        BoundingBox::around_circle(c.x, c.y, c.r)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Match {
    pub pred: usize,
    pub truth: usize,
    pub iou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub iou_threshold: f64,
    pub matches: Vec<Match>,
}

/// Greedy matching: predictions in descending response (ties by row, then
/// column) each take the still-unmatched truth of highest box IoU, if that IoU
/// reaches `iou_threshold`. Empty denominators give precision/recall 1.
pub fn match_voc(preds: &[Blob], truths: &[GroundTruthCircle], iou_threshold: f64) -> Result<EvalReport> {
    if !(iou_threshold > 0.0 && iou_threshold <= 1.0) {
        return Err(Error::param(format!(
            "iou threshold must be in (0, 1], got {iou_threshold}"
        )));
    }
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| response_order(&preds[a], &preds[b]));
    let truth_boxes: Vec<BoundingBox> = truths.iter().map(BoundingBox::from).collect();
    let mut taken = vec![false; truths.len()];
    let mut matches = Vec::new();
    for &p in &order {
        let pbox = BoundingBox::from(&preds[p]);
        let best = truth_boxes
            .iter()
            .enumerate()
            .filter(|(t, _)| !taken[*t])
            .map(|(t, tb)| (t, pbox.iou(tb)))
            .fold(None, |best: Option<(usize, f64)>, (t, iou)| match best {
                Some((_, b)) if b >= iou => best,
                _ => Some((t, iou)),
            });
        if let Some((t, iou)) = best {
            if iou >= iou_threshold {
                taken[t] = true;
                matches.push(Match { pred: p, truth: t, iou });
            }
        }
    }
    let tp = matches.len();
    let fp = preds.len() - tp;
    let fn_ = truths.len() - tp;
    let ratio = |num: usize, den: usize| if den == 0 { 1.0 } else { num as f64 / den as f64 };
    Ok(EvalReport {
        tp,
        fp,
        fn_,
        precision: ratio(tp, tp + fp),
        recall: ratio(tp, tp + fn_),
        iou_threshold,
        matches,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParityRow {
    pub image: String,
    pub precision_a: f64,
    pub recall_a: f64,
    pub precision_b: f64,
    pub recall_b: f64,
    /// `precision_a - precision_b`
    pub dp: f64,
    /// `recall_a - recall_b`
    pub dr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParityStats {
    pub rows: Vec<ParityRow>,
    pub mean_dp: f64,
    pub mean_dr: f64,
    pub std_dp: f64,
    pub std_dr: f64,
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = values.clone().sum::<f64>() / n as f64;
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    (mean, var.sqrt())
}

impl ParityStats {
    pub fn from_rows(rows: Vec<ParityRow>) -> Self {
        let (mean_dp, std_dp) = mean_std(rows.iter().map(|r| r.dp));
        let (mean_dr, std_dr) = mean_std(rows.iter().map(|r| r.dr));
        Self {
            rows,
            mean_dp,
            mean_dr,
            std_dp,
            std_dr,
        }
    }

    pub fn mean_abs_dp(&self) -> f64 {
        mean_std(self.rows.iter().map(|r| r.dp.abs())).0
    }

    pub fn mean_abs_dr(&self) -> f64 {
        mean_std(self.rows.iter().map(|r| r.dr.abs())).0
    }

    /// Fraction of images whose precision and recall agree exactly.
    pub fn identical_fraction(&self) -> f64 {
        if self.rows.is_empty() {
            return 1.0;
        }
        let same = self.rows.iter().filter(|r| r.dp == 0.0 && r.dr == 0.0).count();
        same as f64 / self.rows.len() as f64
    }

    /// Per-image rows followed by `#`-prefixed summary lines.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "image",
            "precision_a",
            "recall_a",
            "precision_b",
            "recall_b",
            "dp",
            "dr",
        ])?;
        for r in &self.rows {
            w.write_record([
                r.image.clone(),
                r.precision_a.to_string(),
                r.recall_a.to_string(),
                r.precision_b.to_string(),
                r.recall_b.to_string(),
                r.dp.to_string(),
                r.dr.to_string(),
            ])?;
        }
        let mut out = w.into_inner().map_err(|e| Error::io("<parity csv>", e.into_error()))?;
        writeln!(
            out,
            "# mean_dp={},mean_dr={},std_dp={},std_dr={},identical_fraction={}",
            self.mean_dp,
            self.mean_dr,
            self.std_dp,
            self.std_dr,
            self.identical_fraction()
        )
        .map_err(|e| Error::io("<parity csv>", e))?;
        Ok(())
    }
}

/// Blobs present in only one of two detections of the same image.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BlobDiff {
    pub only_a: Vec<Blob>,
    pub only_b: Vec<Blob>,
}

impl BlobDiff {
    pub fn is_empty(&self) -> bool {
        self.only_a.is_empty() && self.only_b.is_empty()
    }
}

/// Pairs blobs by centre and radius (radius within `radius_tol`).
pub fn diff_blob_sets(a: &[Blob], b: &[Blob], radius_tol: f64) -> BlobDiff {
    let mut used = vec![false; b.len()];
    let mut only_a = Vec::new();
    for blob in a {
        let hit = b.iter().enumerate().position(|(j, other)| {
            !used[j] && other.x == blob.x && other.y == blob.y && (other.radius - blob.radius).abs() <= radius_tol
        });
        match hit {
            Some(j) => used[j] = true,
            None => only_a.push(blob.clone()),
        }
    }
    let only_b = b
        .iter()
        .zip(&used)
        .filter(|(_, &u)| !u)
        .map(|(blob, _)| blob.clone())
        .collect();
    BlobDiff { only_a, only_b }
}

/// Detection outputs of both configurations on one image.
#[derive(Clone, Debug)]
pub struct ParitySample {
    pub report_a: EvalReport,
    pub report_b: EvalReport,
    pub diff: BlobDiff,
}

/// Runs both configurations on every image and evaluates each against its truths.
///
/// The two configurations must share a sigma ladder; only backend or numeric
/// options may differ.
pub fn parity_detailed(
    images: &[Image],
    truths: &[Vec<GroundTruthCircle>],
    params_a: &DetectionParams,
    params_b: &DetectionParams,
    iou_threshold: f64,
) -> Result<Vec<ParitySample>> {
    if images.len() != truths.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} images but {} truth sets",
            images.len(),
            truths.len()
        )));
    }
    if params_a.ladder()? != params_b.ladder()? {
        return Err(Error::param(
            "parity requires both configurations to share a sigma ladder",
        ));
    }
    let detector_a = Detector::new(params_a.clone())?;
    let detector_b = Detector::new(params_b.clone())?;
    images
        .par_iter()
        .zip(truths)
        .map(|(img, truth)| {
            let a = detector_a.detect(img)?.blobs.blobs;
            let b = detector_b.detect(img)?.blobs.blobs;
            Ok(ParitySample {
                report_a: match_voc(&a, truth, iou_threshold)?,
                report_b: match_voc(&b, truth, iou_threshold)?,
                diff: diff_blob_sets(&a, &b, 1e-9),
            })
        })
        .collect()
}

pub fn parity(
    images: &[Image],
    truths: &[Vec<GroundTruthCircle>],
    params_a: &DetectionParams,
    params_b: &DetectionParams,
    iou_threshold: f64,
) -> Result<ParityStats> {
    let samples = parity_detailed(images, truths, params_a, params_b, iou_threshold)?;
    let rows = samples
        .iter()
        .enumerate()
        .map(|(i, s)| ParityRow {
            image: i.to_string(),
            precision_a: s.report_a.precision,
            recall_a: s.report_a.recall,
            precision_b: s.report_b.precision,
            recall_b: s.report_b.recall,
            dp: s.report_a.precision - s.report_b.precision,
            dr: s.report_a.recall - s.report_b.recall,
        })
        .collect();
    Ok(ParityStats::from_rows(rows))
}
