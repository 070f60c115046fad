//! Boxes, the `(x, y, z, r)` positional codec and IoU/GIoU.
//!
//! `z = log2(sqrt(w h))` and `r = log2(h / w)`, so `w = 2^(z - r/2)` and
//! `h = 2^(z + r/2)`. Box deltas are scale-relative: center offsets are
//! multiplied by `2^z`.

use thiserror::Error;

use crate::tensor::{Tape, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("box sides must be positive, got w={w} h={h}")]
    Degenerate { w: f64, h: f64 },
}

/// Axis-aligned box in corner form. Constructors keep `x1 <= x2`, `y1 <= y2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

/// Center form `(cx, cy, w, h)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CenterBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PositionalVector {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub r: f64,
}

impl BBox {
    /// Corner box from any two corners; flipped coordinates are swapped.
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1: x1.min(x2), y1: y1.min(y2), x2: x1.max(x2), y2: y1.max(y2) }
    }

    pub fn from_array(c: [f64; 4]) -> Self {
        Self::new(c[0], c[1], c[2], c[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn to_center(self) -> CenterBox {
        CenterBox {
            cx: 0.5 * (self.x1 + self.x2),
            cy: 0.5 * (self.y1 + self.y2),
            w: self.width(),
            h: self.height(),
        }
    }
}

impl CenterBox {
    pub fn to_corners(self) -> BBox {
        BBox::new(self.cx - 0.5 * self.w, self.cy - 0.5 * self.h, self.cx + 0.5 * self.w, self.cy + 0.5 * self.h)
    }
}

impl PositionalVector {
    pub fn new(x: f64, y: f64, z: f64, r: f64) -> Self {
        Self { x, y, z, r }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x, self.y, self.z, self.r]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }
}

pub fn encode_box(b: CenterBox) -> Result<PositionalVector, GeometryError> {
    if !(b.w > 0.0 && b.h > 0.0) {
        return Err(GeometryError::Degenerate { w: b.w, h: b.h });
    }
    Ok(PositionalVector { x: b.cx, y: b.cy, z: 0.5 * (b.w * b.h).log2(), r: (b.h / b.w).log2() })
}

pub fn encode_corners(b: BBox) -> Result<PositionalVector, GeometryError> {
    encode_box(b.to_center())
}

pub fn decode_pos(p: PositionalVector) -> CenterBox {
    CenterBox { cx: p.x, cy: p.y, w: (p.z - 0.5 * p.r).exp2(), h: (p.z + 0.5 * p.r).exp2() }
}

pub fn apply_box_delta(p: PositionalVector, delta: [f64; 4]) -> PositionalVector {
    let s = p.z.exp2();
    PositionalVector { x: p.x + delta[0] * s, y: p.y + delta[1] * s, z: p.z + delta[2], r: p.r + delta[3] }
}

pub fn iou(a: BBox, b: BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

pub fn giou(a: BBox, b: BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    let hull = (a.x2.max(b.x2) - a.x1.min(b.x1)) * (a.y2.max(b.y2) - a.y1.min(b.y1));
    let iou = if union > 0.0 { inter / union } else { 0.0 };
    if hull > 0.0 {
        iou - (hull - union) / hull
    } else {
        iou
    }
}

fn column(tape: &Tape, t: &Tensor, i: usize) -> crate::tensor::Result<Tensor> {
    tape.slice(t, 1, i, 1)
}

/// Differentiable `decode_pos` on an `N x 4` positional tensor, returning
/// `N x 4` corners.
pub fn decode_to_corners(tape: &Tape, p: &Tensor) -> crate::tensor::Result<Tensor> {
    let ln2 = std::f64::consts::LN_2;
    let (x, y, z, r) = (column(tape, p, 0)?, column(tape, p, 1)?, column(tape, p, 2)?, column(tape, p, 3)?);
    let half_r = tape.scale(&r, 0.5)?;
    let w = tape.exp(&tape.scale(&tape.sub(&z, &half_r)?, ln2)?)?;
    let h = tape.exp(&tape.scale(&tape.add(&z, &half_r)?, ln2)?)?;
    let hw = tape.scale(&w, 0.5)?;
    let hh = tape.scale(&h, 0.5)?;
    let parts = [tape.sub(&x, &hw)?, tape.sub(&y, &hh)?, tape.add(&x, &hw)?, tape.add(&y, &hh)?];
    tape.concat(&parts.iter().collect::<Vec<_>>(), 1)
}

/// Differentiable `encode_box` on `N x 4` canonical corners.
pub fn encode_corners_tensor(tape: &Tape, c: &Tensor) -> crate::tensor::Result<Tensor> {
    let inv_ln2 = 1.0 / std::f64::consts::LN_2;
    let (x1, y1, x2, y2) = (column(tape, c, 0)?, column(tape, c, 1)?, column(tape, c, 2)?, column(tape, c, 3)?);
    let lw = tape.log(&tape.sub(&x2, &x1)?)?;
    let lh = tape.log(&tape.sub(&y2, &y1)?)?;
    let parts = [
        tape.scale(&tape.add(&x1, &x2)?, 0.5)?,
        tape.scale(&tape.add(&y1, &y2)?, 0.5)?,
        tape.scale(&tape.add(&lw, &lh)?, 0.5 * inv_ln2)?,
        tape.scale(&tape.sub(&lh, &lw)?, inv_ln2)?,
    ];
    tape.concat(&parts.iter().collect::<Vec<_>>(), 1)
}

/// Differentiable `apply_box_delta` row by row on `N x 4` tensors.
pub fn apply_box_delta_tensor(tape: &Tape, p: &Tensor, delta: &Tensor) -> crate::tensor::Result<Tensor> {
    let scale = tape.exp(&tape.scale(&column(tape, p, 2)?, std::f64::consts::LN_2)?)?;
    let offsets = tape.mul(&tape.slice(delta, 1, 0, 2)?, &scale)?;
    let center = tape.add(&tape.slice(p, 1, 0, 2)?, &offsets)?;
    let shape = tape.add(&tape.slice(p, 1, 2, 2)?, &tape.slice(delta, 1, 2, 2)?)?;
    tape.concat(&[&center, &shape], 1)
}

/// Row-wise GIoU of matching rows of two `N x 4` corner tensors, as `N x 1`.
/// Boxes must have positive area.
pub fn giou_tensor(tape: &Tape, a: &Tensor, b: &Tensor) -> crate::tensor::Result<Tensor> {
    let col = |t: &Tensor, i| column(tape, t, i);
    let (ax1, ay1, ax2, ay2) = (col(a, 0)?, col(a, 1)?, col(a, 2)?, col(a, 3)?);
    let (bx1, by1, bx2, by2) = (col(b, 0)?, col(b, 1)?, col(b, 2)?, col(b, 3)?);
    let zero = Tensor::zeros(vec![1]);
    let area = |x1: &Tensor, y1: &Tensor, x2: &Tensor, y2: &Tensor| -> crate::tensor::Result<Tensor> {
        tape.mul(&tape.sub(x2, x1)?, &tape.sub(y2, y1)?)
    };
    let iw = tape.maximum(&tape.sub(&tape.minimum(&ax2, &bx2)?, &tape.maximum(&ax1, &bx1)?)?, &zero)?;
    let ih = tape.maximum(&tape.sub(&tape.minimum(&ay2, &by2)?, &tape.maximum(&ay1, &by1)?)?, &zero)?;
    let inter = tape.mul(&iw, &ih)?;
    let union = tape.sub(&tape.add(&area(&ax1, &ay1, &ax2, &ay2)?, &area(&bx1, &by1, &bx2, &by2)?)?, &inter)?;
    let hull = area(
        &tape.minimum(&ax1, &bx1)?,
        &tape.minimum(&ay1, &by1)?,
        &tape.maximum(&ax2, &bx2)?,
        &tape.maximum(&ay2, &by2)?,
    )?;
    let iou = tape.div(&inter, &union)?;
    tape.sub(&iou, &tape.div(&tape.sub(&hull, &union)?, &hull)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encode_examples() {
        let p = encode_box(CenterBox { cx: 8.0, cy: 8.0, w: 4.0, h: 4.0 }).unwrap();
        assert_eq!(p, PositionalVector::new(8.0, 8.0, 2.0, 0.0));
        let p = encode_box(CenterBox { cx: 1.0, cy: 2.0, w: 2.0, h: 8.0 }).unwrap();
        assert_eq!(p, PositionalVector::new(1.0, 2.0, 2.0, 2.0));
        assert!(encode_box(CenterBox { cx: 0.0, cy: 0.0, w: 0.0, h: 1.0 }).is_err());
        assert!(encode_box(CenterBox { cx: 0.0, cy: 0.0, w: 1.0, h: -2.0 }).is_err());
    }

    #[test]
    fn decode_examples() {
        assert_eq!(decode_pos(PositionalVector::new(8.0, 8.0, 2.0, 0.0)), CenterBox { cx: 8.0, cy: 8.0, w: 4.0, h: 4.0 });
        assert_eq!(decode_pos(PositionalVector::default()), CenterBox { cx: 0.0, cy: 0.0, w: 1.0, h: 1.0 });
    }

    #[test]
    fn delta_examples() {
        let p = PositionalVector::new(0.0, 0.0, 2.0, 0.0);
        assert_eq!(apply_box_delta(p, [0.0; 4]), p);
        assert_eq!(apply_box_delta(p, [1.0, 0.0, 0.0, 0.0]).x, 4.0);
    }

    #[test]
    fn iou_and_giou_examples() {
        let a = BBox::new(0.0, 0.0, 2.0, 2.0);
        let b = BBox::new(1.0, 1.0, 3.0, 3.0);
        assert_eq!(iou(a, a), 1.0);
        assert_eq!(giou(a, a), 1.0);
        assert!((iou(a, b) - 1.0 / 7.0).abs() < 1e-15);
        assert!((giou(a, b) - (1.0 / 7.0 - 2.0 / 9.0)).abs() < 1e-15);
        assert_eq!(iou(a, BBox::new(5.0, 5.0, 6.0, 6.0)), 0.0);
        let far = giou(BBox::new(0.0, 0.0, 1.0, 1.0), BBox::new(1e6, 0.0, 1e6 + 1.0, 1.0));
        assert!(far < -0.999);
    }

    #[test]
    fn flipped_corners_are_canonicalized() {
        let b = BBox::new(3.0, 5.0, 1.0, 2.0);
        assert_eq!(b.to_array(), [1.0, 2.0, 3.0, 5.0]);
    }

    #[test]
    fn tensor_decode_matches_scalar() {
        let tape = Tape::new();
        let p = PositionalVector::new(3.0, -1.0, 1.3, -0.4);
        let t = decode_to_corners(&tape, &Tensor::new(vec![1, 4], p.to_array().to_vec()).unwrap()).unwrap();
        let expected = decode_pos(p).to_corners().to_array();
        for (a, b) in t.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
