use crate::autodiff::Mode;
use crate::error::{Error, Result};
use crate::imaging::{default_min_size, preprocess_volume, remove_small_components, PreprocessConfig};
use crate::losses::argmax_channels;
use crate::metrics::{evaluate_subjects, mean_foreground_dice, MetricsReport};
use crate::network::{model_forward, ModelWeights};
use crate::phantom::SubjectSample;
use crate::tensor::{Real, Tensor};
use crate::volume::{Dims, ImageVolume, LabelMask};

use super::data::Prepared;

fn check_size<T: Real>(weights: &ModelWeights<T>, size: usize) -> Result<()> {
    if weights.config.input_size != size {
        return Err(Error::shape(format!(
            "preprocessed slices are {size}x{size}, model expects {0}x{0}",
            weights.config.input_size
        )));
    }
    Ok(())
}

/// Per-pixel argmax labels of a preprocessed volume, slice-major.
pub fn predict_prepared<T: Real>(weights: &ModelWeights<T>, image: &ImageVolume, eval_batch: usize) -> Result<Vec<u8>> {
    let d = image.dims();
    if d.height != d.width {
        return Err(Error::shape(format!(
            "preprocessed slices must be square, got {}x{}",
            d.height, d.width
        )));
    }
    check_size(weights, d.height)?;
    let hw = d.slice_len();
    let mut labels = Vec::with_capacity(d.len());
    let mut s = 0;
    while s < d.slices {
        let n = eval_batch.max(1).min(d.slices - s);
        let data = image.data()[s * hw..(s + n) * hw]
            .iter()
            .map(|&v| T::lit(v as f64))
            .collect();
        let batch = Tensor::new(vec![n, 1, d.height, d.width], data)?;
        let probs = model_forward(weights, &batch, Mode::Eval)?;
        labels.extend(argmax_channels(&probs)?);
        s += n;
    }
    Ok(labels)
}

/// Mean over subjects of the mean foreground Dice, without post-processing.
pub fn validation_dice<T: Real>(weights: &ModelWeights<T>, val: &[Prepared], eval_batch: usize) -> Result<f64> {
    if val.is_empty() {
        return Err(Error::Dataset("no validation subjects".into()));
    }
    let mut sum = 0.0;
    for p in val {
        let labels = predict_prepared(weights, &p.image, eval_batch)?;
        let pred = LabelMask::new(p.mask.dims(), labels, p.mask.spacing)?;
        sum += mean_foreground_dice(&pred, &p.mask)?;
    }
    Ok(sum / val.len() as f64)
}

/// Smallest kept component for a model's slice size.
pub fn min_component_size<T: Real>(weights: &ModelWeights<T>) -> usize {
    let s = weights.config.input_size;
    default_min_size(s, s)
}

/// Label mask of a raw volume at its own size: preprocess, eval-mode
/// forward, argmax, and back through the inverse crop or pad. No
/// post-processing.
pub fn predict_volume<T: Real>(
    weights: &ModelWeights<T>,
    image: &ImageVolume,
    pre: &PreprocessConfig,
    eval_batch: usize,
) -> Result<LabelMask> {
    check_size(weights, pre.target_size)?;
    let d = image.dims();
    let prepared = preprocess_volume(image, pre)?;
    let labels = predict_prepared(weights, &prepared, eval_batch)?;
    let t = pre.target_size;
    let mut out = Vec::with_capacity(d.len());
    for s in labels.chunks(t * t) {
        out.extend(restore(s, t, d.height, d.width));
    }
    LabelMask::new(
        Dims {
            slices: d.slices,
            height: d.height,
            width: d.width,
        },
        out,
        image.spacing,
    )
}

/// Inverse of the centre crop or pad: a `t x t` slice back to `h x w`,
/// zero where the network never saw the image.
fn restore(slice: &[u8], t: usize, h: usize, w: usize) -> Vec<u8> {
    let mut out = vec![0; h * w];
    let (oy, ox) = (h.abs_diff(t) / 2, w.abs_diff(t) / 2);
    for r in 0..h {
        let ty = if h >= t { r.wrapping_sub(oy) } else { r + oy };
        if ty >= t {
            continue;
        }
        for c in 0..w {
            let tx = if w >= t { c.wrapping_sub(ox) } else { c + ox };
            if tx < t {
                out[r * w + c] = slice[ty * t + tx];
            }
        }
    }
    out
}

/// Per-subject predictions and their scores.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub predictions: Vec<LabelMask>,
}

/// Predict every subject, optionally remove components below `min_size`,
/// and score against the ground truth.
pub fn evaluate_arm<T: Real>(
    weights: &ModelWeights<T>,
    samples: &[SubjectSample],
    pre: &PreprocessConfig,
    eval_batch: usize,
    postprocess: bool,
) -> Result<Evaluation> {
    let raw = samples
        .iter()
        .map(|s| predict_volume(weights, &s.image, pre, eval_batch))
        .collect::<Result<Vec<_>>>()?;
    let min_size = postprocess.then(|| min_component_size(weights));
    evaluate_predictions(raw, samples, min_size)
}

pub fn evaluate_predictions(
    raw: Vec<LabelMask>,
    samples: &[SubjectSample],
    min_size: Option<usize>,
) -> Result<Evaluation> {
    let predictions: Vec<LabelMask> = match min_size {
        Some(m) => raw.iter().map(|p| remove_small_components(p, m)).collect(),
        None => raw,
    };
    let gts: Vec<LabelMask> = samples.iter().map(|s| s.mask.clone()).collect();
    let report = evaluate_subjects(&predictions, &gts)?;
    Ok(Evaluation { report, predictions })
}
