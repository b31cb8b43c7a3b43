use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ranges of the random in-plane augmentations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentParams {
    /// Rotation angle range in degrees.
    pub rotation_deg: [f64; 2],
    /// Isotropic zoom range.
    pub scale: [f64; 2],
    /// Elastic displacement: uniform noise in `[-1, 1)` per pixel, blurred
    /// with `elastic_sigma`, times `elastic_alpha` pixels.
    pub elastic_alpha: f64,
    /// Smoothing of the elastic field in pixels.
    pub elastic_sigma: f64,
    /// Probability of a horizontal flip.
    pub flip_prob: f64,
    /// Additive intensity shift range.
    pub intensity_shift: [f64; 2],
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self {
            rotation_deg: [-15.0, 15.0],
            scale: [0.9, 1.1],
            elastic_alpha: 10.0,
            elastic_sigma: 4.0,
            flip_prob: 0.5,
            intensity_shift: [-0.1, 0.1],
        }
    }
}

impl AugmentParams {
    /// No-op augmentation.
    pub fn identity() -> Self {
        Self {
            rotation_deg: [0.0, 0.0],
            scale: [1.0, 1.0],
            elastic_alpha: 0.0,
            elastic_sigma: 0.0,
            flip_prob: 0.0,
            intensity_shift: [0.0, 0.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, [lo, hi]) in [
            ("rotation_deg", self.rotation_deg),
            ("scale", self.scale),
            ("intensity_shift", self.intensity_shift),
        ] {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::config(format!(
                    "augmentation range {name} = [{lo}, {hi}] is not ordered"
                )));
            }
        }
        if self.scale[0] <= 0.0 {
            return Err(Error::config(format!(
                "augmentation scale must be positive, got {:?}",
                self.scale
            )));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::config(format!(
                "flip probability {} is outside [0, 1]",
                self.flip_prob
            )));
        }
        if !(self.elastic_alpha >= 0.0 && self.elastic_sigma >= 0.0) {
            return Err(Error::config("elastic alpha and sigma must be non-negative"));
        }
        Ok(())
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, [lo, hi]: [f64; 2]) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

/// Separable Gaussian blur with edge replication.
fn gaussian_blur(field: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return field.to_vec();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let pass = |src: &[f64], along_rows: bool| -> Vec<f64> {
        let mut out = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, &kv) in kernel.iter().enumerate() {
                    let off = k as isize - radius;
                    let (yy, xx) = if along_rows {
                        (y as isize, (x as isize + off).clamp(0, w as isize - 1))
                    } else {
                        ((y as isize + off).clamp(0, h as isize - 1), x as isize)
                    };
                    acc += kv * src[yy as usize * w + xx as usize];
                }
                out[y * w + x] = acc;
            }
        }
        out
    };
    pass(&pass(field, true), false)
}

/// Coordinates within `1e-9` of an integer are snapped to it, so right-angle
/// rotations and the identity map pixels exactly.
fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < 1e-9 {
        r
    } else {
        v
    }
}

fn bilinear(img: &[f32], h: usize, w: usize, y: f64, x: f64) -> f32 {
    if y < 0.0 || x < 0.0 || y > (h - 1) as f64 || x > (w - 1) as f64 {
        return 0.0;
    }
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (ty, tx) = (y - y0 as f64, x - x0 as f64);
    let at = |r: usize, c: usize| img[r * w + c] as f64;
    let top = at(y0, x0) * (1.0 - tx) + at(y0, x1) * tx;
    let bottom = at(y1, x0) * (1.0 - tx) + at(y1, x1) * tx;
    (top * (1.0 - ty) + bottom * ty) as f32
}

fn nearest(mask: &[u8], h: usize, w: usize, y: f64, x: f64) -> u8 {
    let (r, c) = (y.round(), x.round());
    if r < 0.0 || c < 0.0 || r > (h - 1) as f64 || c > (w - 1) as f64 {
        return 0;
    }
    mask[r as usize * w + c as usize]
}

/// One random draw of [`AugmentParams`] applied to an `h x w` image and
/// its mask.
///
/// The same inverse map (flip, elastic offset, then rotation and zoom about
/// the centre) is sampled bilinearly for the image and by nearest neighbour
/// for the mask; samples outside the frame are 0. The intensity shift
/// touches the image only.
pub fn augment_sample<R: Rng + ?Sized>(
    image: &[f32],
    mask: &[u8],
    h: usize,
    w: usize,
    params: &AugmentParams,
    rng: &mut R,
) -> Result<(Vec<f32>, Vec<u8>)> {
    params.validate()?;
    if image.len() != h * w || mask.len() != h * w {
        return Err(Error::shape(format!(
            "augmentation expects {h}x{w} image and mask, got {} and {} values",
            image.len(),
            mask.len()
        )));
    }
    let angle = uniform(rng, params.rotation_deg).to_radians();
    let zoom = uniform(rng, params.scale);
    let flip = params.flip_prob > 0.0 && rng.random::<f64>() < params.flip_prob;
    let shift = uniform(rng, params.intensity_shift) as f32;
    let (dy, dx) = if params.elastic_alpha > 0.0 {
        let mut field = || -> Vec<f64> {
            let raw: Vec<f64> = (0..h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut f = gaussian_blur(&raw, h, w, params.elastic_sigma);
            f.iter_mut().for_each(|v| *v *= params.elastic_alpha);
            f
        };
        (Some(field()), Some(field()))
    } else {
        (None, None)
    };

    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (sin, cos) = angle.sin_cos();
    let mut out_img = vec![0f32; h * w];
    let mut out_mask = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let mut py = y as f64;
            let mut px = if flip { (w - 1 - x) as f64 } else { x as f64 };
            if let (Some(fy), Some(fx)) = (&dy, &dx) {
                py += fy[i];
                px += fx[i];
            }
            let (ry, rx) = ((py - cy) / zoom, (px - cx) / zoom);
            let sy = snap(cy + cos * ry - sin * rx);
            let sx = snap(cx + sin * ry + cos * rx);
            out_img[i] = bilinear(image, h, w, sy, sx) + shift;
            out_mask[i] = nearest(mask, h, w, sy, sx);
        }
    }
    Ok((out_img, out_mask))
}
