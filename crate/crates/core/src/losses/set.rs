use super::{focal_cost, focal_terms, Assignment, FocalParams, LossError, Result};
use crate::geometry::{giou, giou_tensor, BBox};
use crate::tensor::{Tape, Tensor};

/// Weights of the classification, L1 and GIoU terms, shared by the loss and
/// the matching cost.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub focal: f64,
    pub l1: f64,
    pub giou: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { focal: 2.0, l1: 5.0, giou: 2.0 }
    }
}

impl LossWeights {
    pub fn scaled(self, c: f64) -> Self {
        Self { focal: self.focal * c, l1: self.l1 * c, giou: self.giou * c }
    }
}

/// Head output for one image: `N x K` class logits and `N x 4` corner boxes
/// in pixels.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub logits: Tensor,
    pub boxes: Tensor,
}

impl Prediction {
    pub fn len(&self) -> usize {
        self.logits.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_classes(&self) -> usize {
        self.logits.shape()[1]
    }

    pub fn box_at(&self, i: usize) -> BBox {
        let d = &self.boxes.data()[i * 4..i * 4 + 4];
        BBox::new(d[0], d[1], d[2], d[3])
    }
}

/// Ground truth for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct Targets {
    pub classes: Vec<usize>,
    pub boxes: Vec<BBox>,
    /// `(height, width)` in pixels; L1 distances are divided by it.
    pub image_size: (usize, usize),
}

impl Targets {
    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    fn norm_scale(&self) -> [f64; 4] {
        let (h, w) = (self.image_size.0 as f64, self.image_size.1 as f64);
        [w, h, w, h]
    }
}

fn l1_normalized(a: BBox, b: BBox, scale: [f64; 4]) -> f64 {
    a.to_array().iter().zip(b.to_array()).zip(scale).map(|((p, q), s)| (p - q).abs() / s).sum()
}

/// `cost[i][j] = focal * focal_cost + l1 * L1 + giou * (1 - GIoU)` for
/// prediction `i` against target `j`. Computed on detached values.
pub fn match_cost(pred: &Prediction, gt: &Targets, w: LossWeights, focal: FocalParams) -> Result<Vec<Vec<f64>>> {
    let k = pred.num_classes();
    if let Some(&c) = gt.classes.iter().find(|&&c| c >= k) {
        return Err(LossError::ClassOutOfRange { class: c, num_classes: k });
    }
    let scale = gt.norm_scale();
    let logits = pred.logits.data();
    Ok((0..pred.len())
        .map(|i| {
            let pb = pred.box_at(i);
            gt.classes
                .iter()
                .zip(&gt.boxes)
                .map(|(&c, &tb)| {
                    w.focal * focal_cost(logits[i * k + c], focal)
                        + w.l1 * l1_normalized(pb, tb, scale)
                        + w.giou * (1.0 - giou(pb, tb))
                })
                .collect()
        })
        .collect())
}

/// Weighted total plus the unweighted normalized terms.
#[derive(Debug, Clone)]
pub struct SetLoss {
    pub total: Tensor,
    pub focal: f64,
    pub l1: f64,
    pub giou: f64,
}

/// Focal loss summed over every prediction and class, L1 and `1 - GIoU`
/// summed over matched pairs, each divided by `max(1, #targets)`.
pub fn set_loss(
    tape: &Tape,
    pred: &Prediction,
    gt: &Targets,
    assignment: &Assignment,
    w: LossWeights,
    focal: FocalParams,
) -> Result<SetLoss> {
    let n = pred.len();
    let mut targets = vec![None; n];
    for &(i, j) in &assignment.pairs {
        if i >= n || j >= gt.len() {
            return Err(LossError::Shape(format!("pair ({i}, {j}) out of range")));
        }
        targets[i] = Some(gt.classes[j]);
    }
    let norm = gt.len().max(1) as f64;
    let cls = tape.scale(&tape.sum(&focal_terms(tape, &pred.logits, &targets, focal)?)?, 1.0 / norm)?;

    let (l1, giou_term) = if assignment.pairs.is_empty() {
        (Tensor::scalar(0.0), Tensor::scalar(0.0))
    } else {
        let rows: Vec<usize> = assignment.pairs.iter().map(|p| p.0).collect();
        let matched = tape.index_select(&pred.boxes, rows)?;
        let m = assignment.pairs.len();
        let tb: Vec<f64> = assignment.pairs.iter().flat_map(|&(_, j)| gt.boxes[j].to_array()).collect();
        let tb = Tensor::new(vec![m, 4], tb)?;
        let inv_scale = Tensor::vector(gt.norm_scale().iter().map(|s| 1.0 / s).collect());
        let diff = tape.mul(&tape.sub(&matched, &tb)?, &inv_scale)?;
        let l1 = tape.scale(&tape.sum(&tape.abs(&diff)?)?, 1.0 / norm)?;
        let g = giou_tensor(tape, &matched, &tb)?;
        let giou_term = tape.scale(&tape.sum(&tape.shift(&tape.scale(&g, -1.0)?, 1.0)?)?, 1.0 / norm)?;
        (l1, giou_term)
    };
    let total = tape.add(
        &tape.add(&tape.scale(&cls, w.focal)?, &tape.scale(&l1, w.l1)?)?,
        &tape.scale(&giou_term, w.giou)?,
    )?;
    Ok(SetLoss { total, focal: cls.item(), l1: l1.item(), giou: giou_term.item() })
}
