use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::class;

/// Sampling ranges of the per-subject anatomy, in pixels of the rendered
/// image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnatomyConfig {
    /// Side of the square rendered slices.
    pub image_size: usize,
    /// Maximum offset of the LV centre from the image centre, per axis.
    pub center_jitter: f64,
    /// Maximum drift of the LV centre from the first to the last slice.
    pub center_drift: f64,
    /// LV cavity radius at the basal slice.
    pub lv_radius: [f64; 2],
    /// Relative shrink of the cavity radius at the apical slice.
    pub lv_taper: f64,
    pub myo_thickness: [f64; 2],
    /// RV disk radius at the basal slice.
    pub rv_radius: [f64; 2],
    pub rv_taper: f64,
    /// Direction of the RV from the LV centre, degrees, 0 = +x, 90 = +y.
    pub rv_angle_deg: [f64; 2],
    /// Distance of the RV disk centre beyond the myocardium, as a fraction
    /// of the RV radius.
    pub rv_offset: [f64; 2],
    /// Total angular extent of the RV crescent seen from the LV centre.
    pub rv_extent_deg: [f64; 2],
    /// Fraction of subjects with a scar arc in the myocardium.
    pub scar_fraction: f64,
    pub scar_span_deg: [f64; 2],
    /// Background structures with blood-pool intensity (vessels), placed
    /// opposite the RV.
    pub distractors: [usize; 2],
    pub distractor_radius: [f64; 2],
}

impl AnatomyConfig {
    /// Ranges for `image_size` pixels, proportional to the 96-pixel preset.
    pub fn for_size(image_size: usize) -> Self {
        let k = image_size as f64 / 96.0;
        let px = |a: f64, b: f64| [a * k, b * k];
        Self {
            image_size,
            center_jitter: 3.0 * k,
            center_drift: 2.0 * k,
            lv_radius: px(8.0, 11.0),
            lv_taper: 0.45,
            myo_thickness: px(3.0, 5.0),
            rv_radius: px(8.0, 11.0),
            rv_taper: 0.5,
            rv_angle_deg: [150.0, 210.0],
            rv_offset: [0.3, 0.6],
            rv_extent_deg: [100.0, 160.0],
            scar_fraction: 0.5,
            scar_span_deg: [40.0, 120.0],
            distractors: [1, 2],
            distractor_radius: px(2.5, 4.0),
        }
    }

    /// Largest distance of any structure from the LV centre.
    fn reach(&self) -> f64 {
        let wall = self.lv_radius[1] + self.myo_thickness[1];
        let rv = wall + self.rv_radius[1] * (1.0 + self.rv_offset[1]);
        let vessel = wall + DISTRACTOR_GAP + 2.0 * self.distractor_radius[1];
        rv.max(vessel)
    }

    pub fn validate(&self) -> Result<()> {
        let ranges = [
            ("lv_radius", self.lv_radius),
            ("myo_thickness", self.myo_thickness),
            ("rv_radius", self.rv_radius),
            ("rv_angle_deg", self.rv_angle_deg),
            ("rv_offset", self.rv_offset),
            ("rv_extent_deg", self.rv_extent_deg),
            ("scar_span_deg", self.scar_span_deg),
            ("distractor_radius", self.distractor_radius),
        ];
        for (name, [lo, hi]) in ranges {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::config(format!(
                    "anatomy range {name} = [{lo}, {hi}] is not ordered"
                )));
            }
        }
        if self.lv_radius[0] <= 1.0 || self.myo_thickness[0] < 1.5 || self.rv_radius[0] <= 1.0 {
            return Err(Error::config(
                "anatomy needs LV and RV radii above 1 pixel and a myocardium at least 1.5 pixels thick",
            ));
        }
        // Radii shrink towards the apex; the smallest slice must still hold
        // a cavity and an RV crescent.
        if !(0.0..0.8).contains(&self.lv_taper) || !(0.0..0.8).contains(&self.rv_taper) {
            return Err(Error::config("anatomy tapers must lie in [0, 0.8)"));
        }
        if self.rv_offset[0] <= 0.0 || self.rv_extent_deg[0] <= 0.0 || self.rv_extent_deg[1] > 360.0 {
            return Err(Error::config(
                "RV offset and angular extent must be positive, extent at most 360",
            ));
        }
        if !(0.0..=1.0).contains(&self.scar_fraction) {
            return Err(Error::config(format!(
                "scar fraction {} is outside [0, 1]",
                self.scar_fraction
            )));
        }
        if self.distractors[0] > self.distractors[1] || self.center_jitter < 0.0 || self.center_drift < 0.0 {
            return Err(Error::config("distractor count range or centre jitter is invalid"));
        }
        let room = self.image_size as f64 / 2.0 - 1.0 - MARGIN;
        let need = self.center_jitter + self.center_drift + self.reach() + 1.0;
        if need > room {
            return Err(Error::config(format!(
                "anatomy reaches {need:.1} pixels from the image centre but a {} pixel image with a {MARGIN} pixel margin allows {room:.1}",
                self.image_size
            )));
        }
        Ok(())
    }
}

/// Smallest distance of any foreground pixel from the image border.
pub const MARGIN: f64 = 2.0;
const DISTRACTOR_GAP: f64 = 3.0;

/// Subject-level anatomy; slices are obtained by [`Anatomy::sample`].
#[derive(Debug, Clone, PartialEq)]
pub struct Anatomy {
    pub image_size: usize,
    pub center: (f64, f64),
    pub drift: (f64, f64),
    pub lv_radius: f64,
    pub lv_taper: f64,
    pub myo_thickness: f64,
    pub rv_radius: f64,
    pub rv_taper: f64,
    pub rv_angle: f64,
    pub rv_offset: f64,
    pub rv_half_extent: f64,
    /// Start angle and span of the scar arc, radians.
    pub scar: Option<(f64, f64)>,
    /// Angle relative to the LV, distance from its wall, radius.
    pub distractors: Vec<(f64, f64, f64)>,
}

fn draw<R: Rng + ?Sized>(rng: &mut R, [lo, hi]: [f64; 2]) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

impl Anatomy {
    pub fn random<R: Rng + ?Sized>(cfg: &AnatomyConfig, rng: &mut R) -> Self {
        let c = cfg.image_size as f64 / 2.0 - 0.5;
        let j = cfg.center_jitter;
        let center = (c + draw(rng, [-j, j]), c + draw(rng, [-j, j]));
        let dir = draw(rng, [0.0, 2.0 * PI]);
        let len = draw(rng, [0.0, cfg.center_drift]);
        let drift = (len * dir.sin(), len * dir.cos());
        let lv_radius = draw(rng, cfg.lv_radius);
        let myo_thickness = draw(rng, cfg.myo_thickness);
        let rv_radius = draw(rng, cfg.rv_radius);
        let rv_angle = draw(rng, cfg.rv_angle_deg).to_radians();
        let rv_offset = draw(rng, cfg.rv_offset);
        let rv_half_extent = draw(rng, cfg.rv_extent_deg).to_radians() / 2.0;
        let scar = (rng.random::<f64>() < cfg.scar_fraction).then(|| {
            let start = draw(rng, [0.0, 2.0 * PI]);
            (start, draw(rng, cfg.scar_span_deg).to_radians())
        });
        let count = rng.random_range(cfg.distractors[0]..=cfg.distractors[1]);
        let distractors = (0..count)
            .map(|_| {
                let angle = rv_angle + PI + draw(rng, [-0.6, 0.6]);
                let r = draw(rng, cfg.distractor_radius);
                (angle, DISTRACTOR_GAP, r)
            })
            .collect();
        Self {
            image_size: cfg.image_size,
            center,
            drift,
            lv_radius,
            lv_taper: cfg.lv_taper,
            myo_thickness,
            rv_radius,
            rv_taper: cfg.rv_taper,
            rv_angle,
            rv_offset,
            rv_half_extent,
            scar,
            distractors,
        }
    }

    /// `slices` evenly spaced sections from base (t = 0) to apex (t = 1).
    pub fn sample(&self, slices: usize) -> SubjectGeometry {
        let slices = (0..slices)
            .map(|i| {
                let t = if slices > 1 {
                    i as f64 / (slices - 1) as f64
                } else {
                    0.0
                };
                self.section(t)
            })
            .collect();
        SubjectGeometry {
            image_size: self.image_size,
            slices,
        }
    }

    fn section(&self, t: f64) -> SliceGeometry {
        let center = (self.center.0 + t * self.drift.0, self.center.1 + t * self.drift.1);
        let lv_radius = self.lv_radius * (1.0 - self.lv_taper * t);
        let wall = lv_radius + self.myo_thickness;
        let rv_radius = self.rv_radius * (1.0 - self.rv_taper * t);
        let d = wall + self.rv_offset * rv_radius;
        let rv_center = (center.0 + d * self.rv_angle.sin(), center.1 + d * self.rv_angle.cos());
        let distractors = self
            .distractors
            .iter()
            .map(|&(a, gap, r)| {
                let d = wall + gap + r;
                (center.0 + d * a.sin(), center.1 + d * a.cos(), r)
            })
            .collect();
        SliceGeometry {
            center,
            lv_radius,
            myo_thickness: self.myo_thickness,
            rv_center,
            rv_radius,
            rv_angle: self.rv_angle,
            rv_half_extent: self.rv_half_extent,
            scar: self.scar,
            distractors,
        }
    }
}

/// One short-axis section. Positions are `(row, col)` in pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceGeometry {
    pub center: (f64, f64),
    pub lv_radius: f64,
    pub myo_thickness: f64,
    pub rv_center: (f64, f64),
    pub rv_radius: f64,
    pub rv_angle: f64,
    pub rv_half_extent: f64,
    pub scar: Option<(f64, f64)>,
    /// Centre row, centre col, radius.
    pub distractors: Vec<(f64, f64, f64)>,
}

/// What a pixel shows: its label and whether the tissue is scar or a
/// blood-filled background structure.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tissue {
    Background,
    Blood,
    Myocardium,
    Scar,
    Vessel,
}

impl Tissue {
    pub fn label(self) -> u8 {
        match self {
            Tissue::Background | Tissue::Vessel => class::BACKGROUND,
            Tissue::Blood => class::LV,
            Tissue::Myocardium | Tissue::Scar => class::MYO,
        }
    }
}

/// Angle difference wrapped into `[0, 2pi)`.
fn wrap(a: f64) -> f64 {
    a.rem_euclid(2.0 * PI)
}

impl SliceGeometry {
    /// Tissue and label of the pixel centred at `(row, col)`. Structures are
    /// resolved LV, then myocardium, then RV, then vessels.
    pub fn classify(&self, row: f64, col: f64) -> (Tissue, u8) {
        let (dy, dx) = (row - self.center.0, col - self.center.1);
        let d = dy.hypot(dx);
        let wall = self.lv_radius + self.myo_thickness;
        if d <= self.lv_radius {
            return (Tissue::Blood, class::LV);
        }
        if d <= wall {
            let scar = self
                .scar
                .is_some_and(|(start, span)| wrap(dy.atan2(dx) - start) <= span);
            let t = if scar { Tissue::Scar } else { Tissue::Myocardium };
            return (t, class::MYO);
        }
        let (ry, rx) = (row - self.rv_center.0, col - self.rv_center.1);
        if d > wall + 1.0 && ry.hypot(rx) <= self.rv_radius {
            let off = wrap(dy.atan2(dx) - self.rv_angle + PI) - PI;
            if off.abs() <= self.rv_half_extent {
                return (Tissue::Blood, class::RV);
            }
        }
        for &(cy, cx, r) in &self.distractors {
            if (row - cy).hypot(col - cx) <= r {
                return (Tissue::Vessel, class::BACKGROUND);
            }
        }
        (Tissue::Background, class::BACKGROUND)
    }
}

/// Sampled sections of one subject.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectGeometry {
    pub image_size: usize,
    pub slices: Vec<SliceGeometry>,
}

impl SubjectGeometry {
    /// Tissue map and label mask, slice-major.
    pub fn rasterize(&self) -> (Vec<Tissue>, Vec<u8>) {
        let n = self.image_size;
        let mut tissue = Vec::with_capacity(self.slices.len() * n * n);
        let mut labels = Vec::with_capacity(tissue.capacity());
        for s in &self.slices {
            for r in 0..n {
                for c in 0..n {
                    let (t, l) = s.classify(r as f64, c as f64);
                    tissue.push(t);
                    labels.push(l);
                }
            }
        }
        (tissue, labels)
    }

    /// Check the rasterized layout: every cavity pixel is enclosed by
    /// myocardium (no 4-neighbour is background or RV), RV never touches
    /// the cavity, each slice has all three structures, and no foreground
    /// or vessel pixel lies within the margin of the border.
    pub fn check(&self) -> Result<()> {
        let n = self.image_size;
        let (tissue, labels) = self.rasterize();
        let m = MARGIN as usize;
        for (s, (lab, tis)) in labels.chunks(n * n).zip(tissue.chunks(n * n)).enumerate() {
            for class_id in [class::LV, class::RV, class::MYO] {
                if !lab.contains(&class_id) {
                    return Err(Error::Dataset(format!("slice {s} has no pixels of class {class_id}")));
                }
            }
            for r in 0..n {
                for c in 0..n {
                    let i = r * n + c;
                    let occupied = lab[i] != class::BACKGROUND || tis[i] == Tissue::Vessel;
                    if occupied && (r < m || c < m || r >= n - m || c >= n - m) {
                        return Err(Error::Dataset(format!(
                            "slice {s}: structure at ({r}, {c}) inside the margin"
                        )));
                    }
                    if lab[i] != class::LV {
                        continue;
                    }
                    let neighbours = [(r.wrapping_sub(1), c), (r + 1, c), (r, c.wrapping_sub(1)), (r, c + 1)];
                    for (nr, nc) in neighbours {
                        let l = lab[nr * n + nc];
                        if l == class::BACKGROUND || l == class::RV {
                            return Err(Error::Dataset(format!(
                                "slice {s}: cavity pixel ({r}, {c}) touches class {l} at ({nr}, {nc})"
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}
