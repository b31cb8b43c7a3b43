//! Slice preprocessing, training-time augmentation and connected-component
//! post-processing.
//!
//! Preprocessing runs in a fixed order: CLAHE per slice, z-score over the
//! whole volume, then centre crop or pad to the network input size.

mod augment;
mod clahe;
mod components;

pub use augment::{augment_sample, AugmentParams};
pub use clahe::{clahe_slice, tile_mapping, ClaheParams};
pub use components::{connected_components, default_min_size, remove_small_components, Components};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::volume::{Dims, ImageVolume, LabelMask};

/// Volume standardized to zero mean and unit population variance; all
/// zeros if the standard deviation is below `1e-8`.
pub fn zscore_normalize_volume(vol: &ImageVolume) -> ImageVolume {
    let data = vol.data();
    let n = data.len() as f64;
    let mean = data.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = data.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    let out = if sd < 1e-8 {
        vec![0.0; data.len()]
    } else {
        data.iter().map(|&v| ((v as f64 - mean) / sd) as f32).collect()
    };
    vol.with_data(vol.dims(), out).expect("same dimensions")
}

/// Offset of the kept (or original) window along one axis. Both crop and
/// pad put the extra pixel of an odd difference at the bottom/right, so the
/// two are inverse on the central region.
fn offset(from: usize, to: usize) -> usize {
    from.abs_diff(to) / 2
}

/// Centre crop or zero pad an `h x w` slice to `target x target`.
pub fn center_crop_or_pad<T: Copy + Default>(slice: &[T], h: usize, w: usize, target: usize) -> Vec<T> {
    let mut out = vec![T::default(); target * target];
    let (oy, ox) = (offset(h, target), offset(w, target));
    for ty in 0..target {
        let sy = if h >= target { ty + oy } else { ty.wrapping_sub(oy) };
        if sy >= h {
            continue;
        }
        for tx in 0..target {
            let sx = if w >= target { tx + ox } else { tx.wrapping_sub(ox) };
            if sx < w {
                out[ty * target + tx] = slice[sy * w + sx];
            }
        }
    }
    out
}

fn square(d: Dims, target: usize) -> Dims {
    Dims {
        slices: d.slices,
        height: target,
        width: target,
    }
}

pub fn crop_or_pad_volume(vol: &ImageVolume, target: usize) -> ImageVolume {
    let d = vol.dims();
    let data = (0..d.slices)
        .flat_map(|s| center_crop_or_pad(vol.slice(s), d.height, d.width, target))
        .collect();
    vol.with_data(square(d, target), data).expect("square target")
}

pub fn crop_or_pad_mask(mask: &LabelMask, target: usize) -> LabelMask {
    let d = mask.dims();
    let data = (0..d.slices)
        .flat_map(|s| center_crop_or_pad(mask.slice(s), d.height, d.width, target))
        .collect();
    LabelMask::new(square(d, target), data, mask.spacing).expect("square target")
}

/// Settings of the fixed preprocessing chain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    pub clahe: ClaheParams,
    /// Side of the square slices fed to the network.
    pub target_size: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            clahe: ClaheParams::default(),
            target_size: 96,
        }
    }
}

/// CLAHE per slice, then z-score over the volume, then crop or pad.
pub fn preprocess_volume(vol: &ImageVolume, cfg: &PreprocessConfig) -> Result<ImageVolume> {
    let d = vol.dims();
    let mut eq = Vec::with_capacity(d.len());
    for s in 0..d.slices {
        eq.extend(clahe_slice(vol.slice(s), d.height, d.width, &cfg.clahe)?);
    }
    let eq = vol.with_data(d, eq)?;
    Ok(crop_or_pad_volume(&zscore_normalize_volume(&eq), cfg.target_size))
}
