use crate::error::{rejected, Result};
use crate::tensor::{squared_distance, Tensor};

/// Value of the triplet objective and whether the hinge is active.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub active: bool,
}

fn check(fa: &Tensor, fb: &Tensor, fc: &Tensor, margin: f64) -> Result<()> {
    fa.same_shape(fb)?;
    fa.same_shape(fc)?;
    if fa.rank() != 1 {
        return Err(rejected("embeddings must be vectors"));
    }
    if !(margin > 0.0) {
        return Err(rejected(format!("margin must be positive, got {margin}")));
    }
    Ok(())
}

/// `max(0, margin + D(a,b) - (D(a,c) + D(b,c)) / 2)` with squared Euclidean `D`.
///
/// The dissimilar sample is pushed away from both members of the similar
/// pair, which makes the objective symmetric in `a` and `b`.
pub fn triplet_loss(fa: &Tensor, fb: &Tensor, fc: &Tensor, margin: f64) -> Result<LossValue> {
    check(fa, fb, fc, margin)?;
    let (a, b, c) = (fa.data(), fb.data(), fc.data());
    let z = margin + squared_distance(a, b) - 0.5 * (squared_distance(a, c) + squared_distance(b, c));
    Ok(LossValue { value: z.max(0.0), active: z > 0.0 })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TripletGrads {
    pub anchor: Tensor,
    pub similar: Tensor,
    pub dissimilar: Tensor,
}

/// Exact gradients when the hinge is active; zeros otherwise, including at the kink.
pub fn triplet_loss_backward(fa: &Tensor, fb: &Tensor, fc: &Tensor, margin: f64) -> Result<TripletGrads> {
    let active = triplet_loss(fa, fb, fc, margin)?.active;
    let (a, b, c) = (fa.data(), fb.data(), fc.data());
    let n = a.len();
    let (mut ga, mut gb, mut gc) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    if active {
        for i in 0..n {
            ga[i] = 2.0 * (a[i] - b[i]) - (a[i] - c[i]);
            gb[i] = 2.0 * (b[i] - a[i]) - (b[i] - c[i]);
            gc[i] = (a[i] - c[i]) + (b[i] - c[i]);
        }
    }
    let shape = fa.shape().to_vec();
    Ok(TripletGrads {
        anchor: Tensor::new(shape.clone(), ga)?,
        similar: Tensor::new(shape.clone(), gb)?,
        dissimilar: Tensor::new(shape, gc)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn v(x: &[f64]) -> Tensor {
        Tensor::from_vec(x.to_vec())
    }

    #[test]
    fn all_equal_gives_margin() {
        let a = v(&[0.3, -1.2]);
        let l = triplet_loss(&a, &a, &a, 1.0).unwrap();
        assert_eq!(l.value, 1.0);
        assert!(l.active);
    }

    #[test]
    fn inactive_hinge() {
        let l = triplet_loss(&v(&[0.0]), &v(&[0.0]), &v(&[2.0]), 1.0).unwrap();
        assert_eq!(l, LossValue { value: 0.0, active: false });
        let g = triplet_loss_backward(&v(&[0.0]), &v(&[0.0]), &v(&[2.0]), 1.0).unwrap();
        assert_eq!(g.anchor.data(), &[0.0]);
        assert_eq!(g.similar.data(), &[0.0]);
        assert_eq!(g.dissimilar.data(), &[0.0]);
    }

    #[test]
    fn hand_evaluated_case() {
        // D(a,b)=1, D(a,c)=1, D(b,c)=0 -> 1 + 1 - 0.5
        let l = triplet_loss(&v(&[0.0]), &v(&[1.0]), &v(&[1.0]), 1.0).unwrap();
        assert_eq!(l.value, 1.5);
        let g = triplet_loss_backward(&v(&[0.0]), &v(&[1.0]), &v(&[1.0]), 1.0).unwrap();
        assert_eq!(g.anchor.data(), &[-1.0]);
        // 2(b-a) - (b-c) = 2; (a-c) + (b-c) = -1
        assert_eq!(g.similar.data(), &[2.0]);
        assert_eq!(g.dissimilar.data(), &[-1.0]);
    }

    #[test]
    fn kink_has_zero_gradient() {
        // z = 1 + 0 - 0.5*(1+1) = 0 exactly
        let g = triplet_loss_backward(&v(&[0.0]), &v(&[0.0]), &v(&[1.0]), 1.0).unwrap();
        assert_eq!(triplet_loss(&v(&[0.0]), &v(&[0.0]), &v(&[1.0]), 1.0).unwrap().value, 0.0);
        assert_eq!(g.anchor.data(), &[0.0]);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(triplet_loss(&v(&[0.0]), &v(&[0.0, 1.0]), &v(&[0.0]), 1.0).is_err());
        assert!(triplet_loss(&v(&[0.0]), &v(&[0.0]), &v(&[0.0]), 0.0).is_err());
    }

    #[test]
    fn matches_finite_differences() {
        let fa = v(&[0.2, -0.4, 0.9]);
        let fb = v(&[0.5, 0.1, 0.3]);
        let fc = v(&[0.1, -0.2, 0.6]);
        let g = triplet_loss_backward(&fa, &fb, &fc, 1.0).unwrap();
        let eps = 1e-6;
        let f = |a: &Tensor, b: &Tensor, c: &Tensor| triplet_loss(a, b, c, 1.0).unwrap().value;
        for (which, analytic) in [&g.anchor, &g.similar, &g.dissimilar].into_iter().enumerate() {
            for i in 0..3 {
                let mut args = [fa.clone(), fb.clone(), fc.clone()];
                args[which].data_mut()[i] += eps;
                let up = f(&args[0], &args[1], &args[2]);
                args[which].data_mut()[i] -= 2.0 * eps;
                let down = f(&args[0], &args[1], &args[2]);
                let numeric = (up - down) / (2.0 * eps);
                let a = analytic.data()[i];
                assert!((a - numeric).abs() <= 1e-6 * a.abs().max(1.0), "{a} vs {numeric}");
            }
        }
    }

    proptest! {
        #[test]
        fn nonnegative_and_symmetric(
            a in prop::collection::vec(-5.0f64..5.0, 4),
            b in prop::collection::vec(-5.0f64..5.0, 4),
            c in prop::collection::vec(-5.0f64..5.0, 4),
            margin in 0.01f64..3.0,
        ) {
            let (a, b, c) = (v(&a), v(&b), v(&c));
            let l1 = triplet_loss(&a, &b, &c, margin).unwrap().value;
            let l2 = triplet_loss(&b, &a, &c, margin).unwrap().value;
            prop_assert!(l1 >= 0.0);
            prop_assert!((l1 - l2).abs() <= 1e-12 * l1.abs().max(1.0));
        }
    }
}
