//! Detection average precision and the per-step metrics record.

use crate::geometry::{iou, BBox};

/// Minimum sigmoid score for a (query, class) pair to count as a detection.
pub const SCORE_THRESHOLD: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub image: usize,
    pub class: usize,
    pub score: f64,
    pub bbox: BBox,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruth {
    pub image: usize,
    pub class: usize,
    pub bbox: BBox,
}

/// Area under the all-point interpolated precision-recall curve for one
/// class at one IoU threshold. `None` if the class has no ground truth.
///
/// Detections are visited by descending score (ties keep input order); each
/// takes the unmatched ground truth of its image with the highest IoU, if
/// that IoU reaches `threshold`.
pub fn class_ap(dets: &[Detection], gts: &[GroundTruth], class: usize, threshold: f64) -> Option<f64> {
    let gts: Vec<&GroundTruth> = gts.iter().filter(|g| g.class == class).collect();
    if gts.is_empty() {
        return None;
    }
    let mut dets: Vec<&Detection> = dets.iter().filter(|d| d.class == class).collect();
    dets.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut used = vec![false; gts.len()];
    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(dets.len());
    let mut precision = Vec::with_capacity(dets.len());
    for (rank, d) in dets.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts.iter().enumerate() {
            if used[j] || g.image != d.image {
                continue;
            }
            let o = iou(d.bbox, g.bbox);
            if o >= threshold && best.is_none_or(|(_, b)| o > b) {
                best = Some((j, o));
            }
        }
        if let Some((j, _)) = best {
            used[j] = true;
            tp += 1;
        }
        recall.push(tp as f64 / gts.len() as f64);
        precision.push(tp as f64 / (rank + 1) as f64);
    }
    Some(interpolated_area(&recall, &precision))
}

/// All-point interpolation: precision is replaced by its running maximum
/// from the right and integrated over recall.
pub fn interpolated_area(recall: &[f64], precision: &[f64]) -> f64 {
    let mut envelope = precision.to_vec();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut area = 0.0;
    let mut prev = 0.0;
    for (r, p) in recall.iter().zip(&envelope) {
        area += (r - prev) * p;
        prev = *r;
    }
    area
}

/// IoU thresholds 0.5, 0.55, ..., 0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApSummary {
    pub ap50: f64,
    /// Mean over [`coco_thresholds`].
    pub ap: f64,
    pub per_threshold: Vec<f64>,
}

/// Class-averaged AP at each threshold, skipping classes without ground
/// truth. Zero when no class has ground truth.
pub fn average_precision(dets: &[Detection], gts: &[GroundTruth], num_classes: usize) -> ApSummary {
    let per_threshold: Vec<f64> = coco_thresholds()
        .into_iter()
        .map(|t| {
            let aps: Vec<f64> = (0..num_classes).filter_map(|c| class_ap(dets, gts, c, t)).collect();
            if aps.is_empty() {
                0.0
            } else {
                aps.iter().sum::<f64>() / aps.len() as f64
            }
        })
        .collect();
    ApSummary { ap50: per_threshold[0], ap: per_threshold.iter().sum::<f64>() / 10.0, per_threshold }
}

/// One row of training metrics.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    /// Batch-mean total loss, summed over supervision positions.
    pub loss: f64,
    pub focal: f64,
    pub l1: f64,
    pub giou: f64,
    /// Batch-mean total loss at each supervised position, in order.
    pub position_losses: Vec<f64>,
    pub grad_norm: f64,
    /// Batch-mean `|f(y) - y|` at the final training iterate.
    pub residual: f64,
    /// Nodes on the largest per-scene tape.
    pub tape_nodes: usize,
    /// Taped refinement applications per scene.
    pub refine_apps: usize,
    pub ap50: Option<f64>,
    pub ap: Option<f64>,
}

pub const CSV_HEADER: &str =
    "step,epoch,lr,loss,focal,l1,giou,grad_norm,residual,tape_nodes,refine_apps,ap50,ap,position_losses";

impl MetricsRecord {
    pub fn is_finite(&self) -> bool {
        [self.loss, self.focal, self.l1, self.giou, self.grad_norm, self.residual]
            .iter()
            .chain(&self.position_losses)
            .all(|v| v.is_finite())
    }

    /// CSV row matching [`CSV_HEADER`]; position losses are `;`-separated
    /// and missing AP values are empty.
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_default();
        let positions: Vec<String> = self.position_losses.iter().map(|v| format!("{v:.6}")).collect();
        format!(
            "{},{},{:e},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6e},{},{},{},{},{}",
            self.step,
            self.epoch,
            self.lr,
            self.loss,
            self.focal,
            self.l1,
            self.giou,
            self.grad_norm,
            self.residual,
            self.tape_nodes,
            self.refine_apps,
            opt(self.ap50),
            opt(self.ap),
            positions.join(";")
        )
    }
}
