use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::geometry::{SubjectGeometry, Tissue};
use crate::error::{Error, Result};
use crate::volume::{Dims, Domain, ImageVolume, LabelMask, Spacing};

/// Mean intensity and noise level of one tissue.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TissueLevel {
    pub mean: f64,
    pub sd: f64,
}

const fn level(mean: f64, sd: f64) -> TissueLevel {
    TissueLevel { mean, sd }
}

/// Appearance model of one sequence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainAppearance {
    pub background: TissueLevel,
    /// Ventricular cavities and background vessels.
    pub blood: TissueLevel,
    pub myocardium: TissueLevel,
    pub scar: TissueLevel,
    /// Peak relative deviation of the smooth multiplicative bias field.
    pub bias_amplitude: f64,
    /// Per-volume multiplicative gain range.
    pub gain: [f64; 2],
    /// Per-volume additive offset range.
    pub offset: [f64; 2],
}

impl DomainAppearance {
    /// Bright blood, intermediate myocardium and scar.
    pub fn bssfp() -> Self {
        Self {
            background: level(0.22, 0.04),
            blood: level(0.80, 0.04),
            myocardium: level(0.40, 0.04),
            scar: level(0.40, 0.04),
            bias_amplitude: 0.15,
            gain: [0.9, 1.1],
            offset: [-0.05, 0.05],
        }
    }

    /// Dark blood, bright myocardium, brighter oedematous scar.
    pub fn t2() -> Self {
        Self {
            background: level(0.30, 0.05),
            blood: level(0.15, 0.05),
            myocardium: level(0.55, 0.05),
            scar: level(0.70, 0.05),
            bias_amplitude: 0.15,
            gain: [0.9, 1.1],
            offset: [-0.05, 0.05],
        }
    }

    /// Nulled healthy myocardium, enhanced scar, grey blood, and noisier
    /// than the source sequences.
    pub fn lge() -> Self {
        Self {
            background: level(0.50, 0.10),
            blood: level(0.62, 0.10),
            myocardium: level(0.15, 0.08),
            scar: level(0.80, 0.10),
            bias_amplitude: 0.15,
            gain: [0.9, 1.1],
            offset: [-0.05, 0.05],
        }
    }

    pub fn preset(domain: Domain) -> Self {
        match domain {
            Domain::Bssfp => Self::bssfp(),
            Domain::T2 => Self::t2(),
            Domain::Lge => Self::lge(),
        }
    }

    /// Without noise, bias field or jitter: every tissue renders at its mean.
    pub fn noiseless(mut self) -> Self {
        for t in [
            &mut self.background,
            &mut self.blood,
            &mut self.myocardium,
            &mut self.scar,
        ] {
            t.sd = 0.0;
        }
        self.bias_amplitude = 0.0;
        self.gain = [1.0, 1.0];
        self.offset = [0.0, 0.0];
        self
    }

    fn tissue(&self, t: Tissue) -> TissueLevel {
        match t {
            Tissue::Background => self.background,
            Tissue::Blood | Tissue::Vessel => self.blood,
            Tissue::Myocardium => self.myocardium,
            Tissue::Scar => self.scar,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, t) in [
            ("background", self.background),
            ("blood", self.blood),
            ("myocardium", self.myocardium),
            ("scar", self.scar),
        ] {
            if !(0.0..=1.0).contains(&t.mean) || !(t.sd >= 0.0 && t.sd.is_finite()) {
                return Err(Error::config(format!(
                    "{name} intensity mean {} must lie in [0, 1] with a non-negative sd, got sd {}",
                    t.mean, t.sd
                )));
            }
        }
        if !(0.0..1.0).contains(&self.bias_amplitude) {
            return Err(Error::config(format!(
                "bias amplitude {} is outside [0, 1)",
                self.bias_amplitude
            )));
        }
        for (name, [lo, hi]) in [("gain", self.gain), ("offset", self.offset)] {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::config(format!(
                    "appearance {name} range [{lo}, {hi}] is not ordered"
                )));
            }
        }
        if self.gain[0] <= 0.0 {
            return Err(Error::config("appearance gain must be positive"));
        }
        Ok(())
    }
}

fn draw<R: Rng + ?Sized>(rng: &mut R, [lo, hi]: [f64; 2]) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

/// Image and mask of one subject in one sequence.
///
/// The mask depends on the geometry only. Each voxel is
/// `clamp(gain * (mean + noise) * bias + offset, 0, 1)`, where the bias field
/// is one plus the amplitude times the average of two slowly varying
/// sinusoids drawn once per volume.
pub fn render_domain<R: Rng + ?Sized>(
    geometry: &SubjectGeometry,
    domain: Domain,
    appearance: &DomainAppearance,
    spacing: Spacing,
    subject_id: &str,
    rng: &mut R,
) -> Result<(ImageVolume, LabelMask)> {
    appearance.validate()?;
    let n = geometry.image_size;
    let dims = Dims {
        slices: geometry.slices.len(),
        height: n,
        width: n,
    };
    let (tissue, labels) = geometry.rasterize();

    let gain = draw(rng, appearance.gain);
    let offset = draw(rng, appearance.offset);
    let mut waves = [(0.0, 0.0, 0.0); 2];
    for w in waves.iter_mut() {
        let dir = draw(rng, [0.0, 2.0 * PI]);
        let freq = draw(rng, [0.5, 1.5]) * 2.0 * PI / n as f64;
        *w = (freq * dir.sin(), freq * dir.cos(), draw(rng, [0.0, 2.0 * PI]));
    }
    let unit = Normal::new(0.0, 1.0).expect("unit normal");

    let mut data = Vec::with_capacity(dims.len());
    for (i, t) in tissue.iter().enumerate() {
        let lvl = appearance.tissue(*t);
        let noise = if lvl.sd > 0.0 { lvl.sd * unit.sample(rng) } else { 0.0 };
        let bias = if appearance.bias_amplitude > 0.0 {
            let (r, c) = (((i / n) % n) as f64, (i % n) as f64);
            let s: f64 = waves.iter().map(|(fy, fx, ph)| (fy * r + fx * c + ph).sin()).sum();
            1.0 + appearance.bias_amplitude * s / 2.0
        } else {
            1.0
        };
        let v = gain * (lvl.mean + noise) * bias + offset;
        data.push(v.clamp(0.0, 1.0) as f32);
    }
    let image = ImageVolume::new(dims, data, spacing, subject_id, domain)?;
    let mask = LabelMask::new(dims, labels, spacing)?;
    Ok((image, mask))
}
