//! Codec round trips, GIoU properties and gradients of the tensor forms.

use std::convert::Infallible;

use deqdet::geometry::*;
use deqdet::tensor::{finite_diff_grad, Tape, Tensor};
use proptest::prelude::*;

fn center_box() -> impl Strategy<Value = CenterBox> {
    (-500.0f64..500.0, -500.0f64..500.0, 0.1f64..1000.0, 0.1f64..1000.0)
        .prop_map(|(cx, cy, w, h)| CenterBox { cx, cy, w, h })
}

fn corner_box() -> impl Strategy<Value = BBox> {
    center_box().prop_map(CenterBox::to_corners)
}

fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()).max(1.0)
}

proptest! {
    #[test]
    fn codec_round_trip(b in center_box()) {
        let back = decode_pos(encode_box(b).unwrap());
        prop_assert!(close(back.cx, b.cx, 1e-9) && close(back.cy, b.cy, 1e-9));
        prop_assert!((back.w - b.w).abs() <= 1e-9 * b.w && (back.h - b.h).abs() <= 1e-9 * b.h);
    }

    #[test]
    fn giou_properties(a in corner_box(), b in corner_box()) {
        let g = giou(a, b);
        prop_assert!(close(g, giou(b, a), 1e-12));
        prop_assert!(g <= iou(a, b) + 1e-12);
        prop_assert!(g > -1.0 && g <= 1.0);
        prop_assert!((0.0..=1.0).contains(&iou(a, b)));
        prop_assert!((giou(a, a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn deltas_keep_sides_positive(
        b in center_box(),
        steps in prop::collection::vec(prop::array::uniform4(-3.0f64..3.0), 0..8),
    ) {
        let mut p = encode_box(b).unwrap();
        prop_assert_eq!(apply_box_delta(p, [0.0; 4]), p);
        for d in steps {
            p = apply_box_delta(p, d);
            let c = decode_pos(p);
            prop_assert!(c.w > 0.0 && c.h > 0.0);
        }
    }

    #[test]
    fn tensor_giou_matches_scalar(a in corner_box(), b in corner_box()) {
        let tape = Tape::new();
        let ta = Tensor::new(vec![1, 4], a.to_array().to_vec()).unwrap();
        let tb = Tensor::new(vec![1, 4], b.to_array().to_vec()).unwrap();
        prop_assert!(close(giou_tensor(&tape, &ta, &tb).unwrap().item(), giou(a, b), 1e-12));
    }
}

fn rel(a: &Tensor, b: &Tensor) -> f64 {
    let d: f64 = a.data().iter().zip(b.data()).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
    d / a.norm().max(b.norm()).max(1e-12)
}

fn check_grad(inputs: Vec<Tensor>, f: impl Fn(&Tape, &[Tensor]) -> Tensor) {
    let tape = Tape::new();
    let leaves: Vec<Tensor> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let grads = tape.backward(&f(&tape, &leaves)).unwrap();
    let fd = finite_diff_grad(&inputs, 1e-6, |p| Ok::<_, Infallible>(f(&Tape::new(), p).item())).unwrap();
    for (leaf, g) in leaves.iter().zip(&fd) {
        let err = rel(&grads.wrt(leaf), g);
        assert!(err < 1e-5, "relative error {err:e}");
    }
}

fn weighted_sum(tape: &Tape, t: &Tensor) -> Tensor {
    let w = Tensor::new(t.shape().to_vec(), (0..t.numel()).map(|i| 0.3 + 0.17 * i as f64).collect()).unwrap();
    tape.dot(t, &w).unwrap()
}

#[test]
fn codec_gradients() {
    let p = Tensor::from_rows(&[vec![3.0, 4.0, 1.2, -0.3], vec![-2.0, 0.5, 0.4, 0.9]]).unwrap();
    check_grad(vec![p], |tape, x| weighted_sum(tape, &decode_to_corners(tape, &x[0]).unwrap()));
    let c = Tensor::from_rows(&[vec![0.0, 1.0, 3.0, 2.5], vec![-1.0, -2.0, 4.0, 5.0]]).unwrap();
    check_grad(vec![c], |tape, x| weighted_sum(tape, &encode_corners_tensor(tape, &x[0]).unwrap()));
}

#[test]
fn delta_gradients() {
    let p = Tensor::from_rows(&[vec![3.0, 4.0, 1.2, -0.3], vec![-2.0, 0.5, 0.4, 0.9]]).unwrap();
    let d = Tensor::from_rows(&[vec![0.1, -0.2, 0.3, 0.05], vec![-0.4, 0.25, -0.1, 0.2]]).unwrap();
    check_grad(vec![p, d], |tape, x| weighted_sum(tape, &apply_box_delta_tensor(tape, &x[0], &x[1]).unwrap()));
}

#[test]
fn giou_gradients() {
    // overlapping, disjoint and nested pairs, away from ties between edges
    let a = Tensor::from_rows(&[vec![0.0, 0.0, 2.0, 2.1], vec![0.0, 0.0, 1.0, 1.3], vec![0.0, 0.0, 5.0, 4.0]]).unwrap();
    let b = Tensor::from_rows(&[vec![1.1, 0.9, 3.0, 3.2], vec![2.0, 3.0, 4.5, 3.7], vec![1.0, 1.2, 2.0, 2.5]]).unwrap();
    check_grad(vec![a, b], |tape, x| weighted_sum(tape, &giou_tensor(tape, &x[0], &x[1]).unwrap()));
}

#[test]
fn decode_then_encode_is_identity_on_tensors() {
    let tape = Tape::new();
    let p = Tensor::from_rows(&[vec![3.0, 4.0, 1.2, -0.3], vec![-2.0, 0.5, 0.4, 0.9]]).unwrap();
    let back = encode_corners_tensor(&tape, &decode_to_corners(&tape, &p).unwrap()).unwrap();
    assert!(rel(&back, &p) < 1e-12);
}
