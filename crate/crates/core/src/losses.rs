//! One-hot targets and the multi-class soft Dice loss.
//!
//! For class `k` with predicted probabilities `p` and one-hot target `t`,
//! summed over every pixel of the batch:
//!
//! ```text
//! term_k = (c * sum(p * t) + eps) / (sum(p) + sum(t) + eps)
//! loss   = 1 - mean_k term_k
//! ```
//!
//! `c = 1` is [`DiceVariant::AsPrinted`], whose optimum is 0.5 rather than 0;
//! `c = 2` is the conventional soft Dice ([`DiceVariant::FactorTwo`]).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};
use crate::volume::LabelMask;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DiceVariant {
    /// Intersection term without the factor two.
    AsPrinted,
    /// Standard soft Dice with `2 * intersection`.
    FactorTwo,
}

impl DiceVariant {
    fn factor<T: Real>(self) -> T {
        match self {
            DiceVariant::AsPrinted => T::one(),
            DiceVariant::FactorTwo => T::lit(2.0),
        }
    }
}

/// Default additive smoothing of each class term.
pub const DEFAULT_SMOOTH: f64 = 1.0;

/// `N x K x H x W` tensor with exactly one 1 per pixel across classes.
#[derive(Debug, Clone, PartialEq)]
pub struct OneHotTarget<T>(Tensor<T>);

impl<T: Real> OneHotTarget<T> {
    pub fn tensor(&self) -> &Tensor<T> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.0
    }

    /// Class index per pixel, `N x H x W` flattened.
    pub fn argmax(&self) -> Vec<u8> {
        argmax_channels(&self.0).expect("one-hot targets are rank 4")
    }
}

/// One-hot encode every slice of `mask` into an `N x K x H x W` tensor.
pub fn one_hot_encode<T: Real>(mask: &LabelMask, num_classes: usize) -> Result<OneHotTarget<T>> {
    mask.validate_classes(num_classes)?;
    let d = mask.dims();
    let hw = d.slice_len();
    let mut data = vec![T::zero(); d.slices * num_classes * hw];
    for s in 0..d.slices {
        for (p, &c) in mask.slice(s).iter().enumerate() {
            data[(s * num_classes + c as usize) * hw + p] = T::one();
        }
    }
    Ok(OneHotTarget(Tensor::new(
        vec![d.slices, num_classes, d.height, d.width],
        data,
    )?))
}

/// Per-pixel argmax over the channel axis; ties resolve to the lowest class.
pub fn argmax_channels<T: Real>(probs: &Tensor<T>) -> Result<Vec<u8>> {
    let [n, k, h, w] = probs.dims4()?;
    let hw = h * w;
    let d = probs.data();
    let mut out = vec![0u8; n * hw];
    for b in 0..n {
        for p in 0..hw {
            let mut best = 0;
            for c in 1..k {
                if d[(b * k + c) * hw + p] > d[(b * k + best) * hw + p] {
                    best = c;
                }
            }
            out[b * hw + p] = best as u8;
        }
    }
    Ok(out)
}

struct ClassSums<T> {
    inter: Vec<T>,
    pred: Vec<T>,
    truth: Vec<T>,
}

fn class_sums<T: Real>(probs: &Tensor<T>, target: &Tensor<T>) -> Result<ClassSums<T>> {
    if probs.shape() != target.shape() {
        return Err(Error::shape(format!(
            "soft dice: probabilities {:?} and target {:?} differ",
            probs.shape(),
            target.shape()
        )));
    }
    let [n, k, h, w] = probs.dims4()?;
    let hw = h * w;
    let mut sums = ClassSums {
        inter: vec![T::zero(); k],
        pred: vec![T::zero(); k],
        truth: vec![T::zero(); k],
    };
    for b in 0..n {
        for c in 0..k {
            let start = (b * k + c) * hw;
            let p = &probs.data()[start..start + hw];
            let t = &target.data()[start..start + hw];
            for (&pv, &tv) in p.iter().zip(t) {
                sums.inter[c] += pv * tv;
                sums.pred[c] += pv;
                sums.truth[c] += tv;
            }
        }
    }
    Ok(sums)
}

/// Loss value for `probs` against a one-hot `target` of the same shape.
pub fn soft_dice_forward<T: Real>(probs: &Tensor<T>, target: &Tensor<T>, variant: DiceVariant, smooth: T) -> Result<T> {
    let s = class_sums(probs, target)?;
    let k = T::from_usize(s.inter.len()).unwrap();
    let c: T = variant.factor();
    let mut total = T::zero();
    for i in 0..s.inter.len() {
        total += (c * s.inter[i] + smooth) / (s.pred[i] + s.truth[i] + smooth);
    }
    Ok(T::one() - total / k)
}

/// Gradient of [`soft_dice_forward`] with respect to `probs`.
pub fn soft_dice_backward<T: Real>(
    probs: &Tensor<T>,
    target: &Tensor<T>,
    variant: DiceVariant,
    smooth: T,
) -> Result<Tensor<T>> {
    let s = class_sums(probs, target)?;
    let [n, k, h, w] = probs.dims4()?;
    let hw = h * w;
    let kf = T::from_usize(k).unwrap();
    let c: T = variant.factor();
    let mut grad = vec![T::zero(); probs.len()];
    for ci in 0..k {
        let denom = s.pred[ci] + s.truth[ci] + smooth;
        let numer = c * s.inter[ci] + smooth;
        // d term / d p = (c * t * denom - numer) / denom^2
        let a = c / denom / kf;
        let b = numer / (denom * denom) / kf;
        for bi in 0..n {
            let start = (bi * k + ci) * hw;
            for (g, &t) in grad[start..start + hw]
                .iter_mut()
                .zip(&target.data()[start..start + hw])
            {
                *g = b - a * t;
            }
        }
    }
    Tensor::new(probs.shape().to_vec(), grad)
}

/// Convenience wrapper over a typed one-hot target.
pub fn soft_dice_loss<T: Real>(
    probs: &Tensor<T>,
    target: &OneHotTarget<T>,
    variant: DiceVariant,
    smooth: T,
) -> Result<T> {
    soft_dice_forward(probs, target.tensor(), variant, smooth)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Spacing;

    fn mask(rows: &[&[u8]]) -> LabelMask {
        LabelMask::from_rows(rows, Spacing::isotropic_2d(1.0)).unwrap()
    }

    #[test]
    fn one_hot_places_single_one_along_class_axis() {
        let t = one_hot_encode::<f64>(&mask(&[&[0, 3]]), 4).unwrap();
        assert_eq!(t.tensor().shape(), &[1, 4, 1, 2]);
        // class-major layout: [c0: p0 p1][c1: ..][c2: ..][c3: ..]
        assert_eq!(t.tensor().data(), &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(t.argmax(), vec![0, 3]);
    }

    #[test]
    fn one_hot_rejects_out_of_range_class_with_coordinates() {
        let err = one_hot_encode::<f32>(&mask(&[&[0, 1], &[4, 0]]), 4).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("row 1") && msg.contains("col 0"), "{msg}");
    }

    #[test]
    fn perfect_prediction_as_printed_is_one_half() {
        let m = mask(&[&[0, 1], &[2, 3]]);
        let t = one_hot_encode::<f64>(&m, 4).unwrap();
        let loss = soft_dice_loss(t.tensor(), &t, DiceVariant::AsPrinted, 0.0).unwrap();
        assert!((loss - 0.5).abs() < 1e-12);
        let loss = soft_dice_loss(t.tensor(), &t, DiceVariant::FactorTwo, 0.0).unwrap();
        assert!(loss.abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let p = Tensor::<f64>::zeros(&[1, 4, 2, 2]);
        let t = Tensor::<f64>::zeros(&[1, 4, 2, 3]);
        assert!(soft_dice_forward(&p, &t, DiceVariant::FactorTwo, 1.0).is_err());
    }
}
