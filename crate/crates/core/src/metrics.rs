//! Overlap and surface-distance evaluation of label masks.

use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::volume::{class, LabelMask, Spacing};

/// Voxel coordinate `(slice, row, col)`.
pub type Voxel = [usize; 3];

/// Structures in report order.
pub const STRUCTURES: [(&str, u8); 3] = [("Myo", class::MYO), ("LV", class::LV), ("RV", class::RV)];

fn same_geometry(pred: &LabelMask, gt: &LabelMask) -> Result<()> {
    if pred.dims() != gt.dims() {
        return Err(Error::shape(format!(
            "prediction is {:?}, ground truth is {:?}",
            pred.dims(),
            gt.dims()
        )));
    }
    Ok(())
}

/// `(dice, jaccard)` of one class; two empty sets score `(1, 1)`.
pub fn overlap_scores(pred: &LabelMask, gt: &LabelMask, class_id: u8) -> Result<(f64, f64)> {
    same_geometry(pred, gt)?;
    let (mut a, mut b, mut both) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        let (ip, ig) = (p == class_id, g == class_id);
        a += ip as usize;
        b += ig as usize;
        both += (ip && ig) as usize;
    }
    if a + b == 0 {
        return Ok((1.0, 1.0));
    }
    let dice = 2.0 * both as f64 / (a + b) as f64;
    let jaccard = both as f64 / (a + b - both) as f64;
    Ok((dice, jaccard))
}

/// Voxels of `class_id` with an in-plane 4-neighbour outside the class or on
/// the slice border, in row-major order.
pub fn extract_boundary(mask: &LabelMask, class_id: u8) -> Vec<Voxel> {
    let d = mask.dims();
    let (h, w) = (d.height, d.width);
    let mut out = Vec::new();
    for s in 0..d.slices {
        let sl = mask.slice(s);
        let inside = |r: usize, c: usize| sl[r * w + c] == class_id;
        for r in 0..h {
            for c in 0..w {
                if !inside(r, c) {
                    continue;
                }
                let edge = r == 0
                    || c == 0
                    || r + 1 == h
                    || c + 1 == w
                    || !inside(r - 1, c)
                    || !inside(r + 1, c)
                    || !inside(r, c - 1)
                    || !inside(r, c + 1);
                if edge {
                    out.push([s, r, c]);
                }
            }
        }
    }
    out
}

#[inline]
fn dist(a: Voxel, b: Voxel, sp: &Spacing) -> f64 {
    let dz = (a[0] as f64 - b[0] as f64) * sp.slice;
    let dy = (a[1] as f64 - b[1] as f64) * sp.row;
    let dx = (a[2] as f64 - b[2] as f64) * sp.col;
    (dz * dz + dy * dy + dx * dx).sqrt()
}

/// For every point of `from`, the distance to the nearest point of `to`.
fn nearest(from: &[Voxel], to: &[Voxel], sp: &Spacing) -> Vec<f64> {
    from.iter()
        .map(|&a| to.iter().map(|&b| dist(a, b, sp)).fold(f64::INFINITY, f64::min))
        .collect()
}

/// Exact symmetric Hausdorff distance in millimetres; `None` if either set is
/// empty.
pub fn hausdorff_distance(a: &[Voxel], b: &[Voxel], spacing: &Spacing) -> Option<f64> {
    if a.is_empty() || b.is_empty() {
        return None;
    }
    let ab = nearest(a, b, spacing).into_iter().fold(0.0, f64::max);
    let ba = nearest(b, a, spacing).into_iter().fold(0.0, f64::max);
    Some(ab.max(ba))
}

/// Symmetric average surface distance in millimetres; `None` if either set
/// is empty.
///
/// The minima of `a` are summed in order, then those of `b`, then divided by
/// `|a| + |b|`.
pub fn average_surface_distance(a: &[Voxel], b: &[Voxel], spacing: &Spacing) -> Option<f64> {
    if a.is_empty() || b.is_empty() {
        return None;
    }
    let mut sum = 0.0;
    for d in nearest(a, b, spacing) {
        sum += d;
    }
    for d in nearest(b, a, spacing) {
        sum += d;
    }
    Some(sum / (a.len() + b.len()) as f64)
}

/// Scores of one structure of one subject.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StructureScores {
    pub dice: f64,
    pub jaccard: f64,
    pub asd_mm: Option<f64>,
    pub hd_mm: Option<f64>,
}

pub fn structure_scores(pred: &LabelMask, gt: &LabelMask, class_id: u8) -> Result<StructureScores> {
    let (dice, jaccard) = overlap_scores(pred, gt, class_id)?;
    let (bp, bg) = (extract_boundary(pred, class_id), extract_boundary(gt, class_id));
    let sp = gt.spacing;
    Ok(StructureScores {
        dice,
        jaccard,
        asd_mm: average_surface_distance(&bp, &bg, &sp),
        hd_mm: hausdorff_distance(&bp, &bg, &sp),
    })
}

/// Mean and population standard deviation over the defined values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Stat {
    pub mean: Option<f64>,
    pub sd: Option<f64>,
    pub count: usize,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self {
                mean: None,
                sd: None,
                count: 0,
            };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Self {
            mean: Some(mean),
            sd: Some(var.sqrt()),
            count: values.len(),
        }
    }

    fn average(stats: &[Stat]) -> Self {
        let mean: Option<Vec<f64>> = stats.iter().map(|s| s.mean).collect();
        let sd: Option<Vec<f64>> = stats.iter().map(|s| s.sd).collect();
        let avg = |v: Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
        Self {
            mean: mean.map(avg),
            sd: sd.map(avg),
            count: stats.iter().map(|s| s.count).min().unwrap_or(0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub structure: String,
    pub dice: Stat,
    pub jaccard: Stat,
    pub asd_mm: Stat,
    pub hd_mm: Stat,
}

/// Per-structure scores over subjects plus an `Average` row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub subjects: usize,
    pub rows: Vec<ReportRow>,
    /// `(subject index, structure)` pairs whose distances were undefined.
    pub undefined_distances: Vec<(usize, String)>,
    /// Per subject, scores in [`STRUCTURES`] order.
    pub per_subject: Vec<Vec<StructureScores>>,
}

pub const CSV_HEADER: &str = "structure,dice_mean,dice_sd,jaccard_mean,jaccard_sd,asd_mean,asd_sd,hd_mean,hd_sd";

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl MetricsReport {
    pub fn row(&self, structure: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.structure == structure)
    }

    /// Mean foreground Dice (the `Average` row).
    pub fn mean_dice(&self) -> f64 {
        self.row("Average").and_then(|r| r.dice.mean).unwrap_or(0.0)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                r.structure,
                cell(r.dice.mean),
                cell(r.dice.sd),
                cell(r.jaccard.mean),
                cell(r.jaccard.sd),
                cell(r.asd_mm.mean),
                cell(r.asd_mm.sd),
                cell(r.hd_mm.mean),
                cell(r.hd_mm.sd)
            );
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Score paired volumes structure by structure.
pub fn evaluate_subjects(preds: &[LabelMask], gts: &[LabelMask]) -> Result<MetricsReport> {
    if preds.len() != gts.len() {
        return Err(Error::shape(format!(
            "{} predictions for {} ground-truth volumes",
            preds.len(),
            gts.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::Dataset("no subjects to evaluate".into()));
    }
    let mut per_subject = Vec::with_capacity(preds.len());
    for (i, (p, g)) in preds.iter().zip(gts).enumerate() {
        if p.spacing != g.spacing {
            return Err(Error::shape(format!(
                "subject {i}: prediction spacing {:?} differs from ground truth {:?}",
                p.spacing, g.spacing
            )));
        }
        let scores = STRUCTURES
            .iter()
            .map(|&(_, c)| structure_scores(p, g, c))
            .collect::<Result<Vec<_>>>()?;
        per_subject.push(scores);
    }
    let mut rows = Vec::with_capacity(4);
    let mut undefined = Vec::new();
    for (k, &(name, _)) in STRUCTURES.iter().enumerate() {
        let col = |f: &dyn Fn(&StructureScores) -> Option<f64>| -> Vec<f64> {
            per_subject.iter().filter_map(|s| f(&s[k])).collect()
        };
        for (i, s) in per_subject.iter().enumerate() {
            if s[k].hd_mm.is_none() {
                log::warn!("subject {i}: {name} distances undefined (empty structure), excluded");
                undefined.push((i, name.to_string()));
            }
        }
        rows.push(ReportRow {
            structure: name.to_string(),
            dice: Stat::of(&col(&|s| Some(s.dice))),
            jaccard: Stat::of(&col(&|s| Some(s.jaccard))),
            asd_mm: Stat::of(&col(&|s| s.asd_mm)),
            hd_mm: Stat::of(&col(&|s| s.hd_mm)),
        });
    }
    let pick = |f: fn(&ReportRow) -> Stat| -> Vec<Stat> { rows.iter().map(f).collect() };
    let average = ReportRow {
        structure: "Average".into(),
        dice: Stat::average(&pick(|r| r.dice)),
        jaccard: Stat::average(&pick(|r| r.jaccard)),
        asd_mm: Stat::average(&pick(|r| r.asd_mm)),
        hd_mm: Stat::average(&pick(|r| r.hd_mm)),
    };
    rows.push(average);
    Ok(MetricsReport {
        subjects: preds.len(),
        rows,
        undefined_distances: undefined,
        per_subject,
    })
}

/// Mean foreground Dice of one volume pair over classes 1..=3.
pub fn mean_foreground_dice(pred: &LabelMask, gt: &LabelMask) -> Result<f64> {
    let mut sum = 0.0;
    for &(_, c) in &STRUCTURES {
        sum += overlap_scores(pred, gt, c)?.0;
    }
    Ok(sum / STRUCTURES.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Dims;
    use proptest::prelude::*;

    fn unit() -> Spacing {
        Spacing::isotropic_2d(1.0)
    }

    fn mask(rows: &[&[u8]]) -> LabelMask {
        LabelMask::from_rows(rows, unit()).unwrap()
    }

    #[test]
    fn overlap_examples() {
        let m = mask(&[&[1, 1, 0], &[0, 2, 0]]);
        assert_eq!(overlap_scores(&m, &m, 1).unwrap(), (1.0, 1.0));
        assert_eq!(overlap_scores(&m, &m, 3).unwrap(), (1.0, 1.0));
        let a = mask(&[&[1, 0, 0, 0]]);
        let b = mask(&[&[0, 0, 1, 0]]);
        assert_eq!(overlap_scores(&a, &b, 1).unwrap(), (0.0, 0.0));
        let gt = mask(&[&[1, 1, 0]]);
        let pred = mask(&[&[0, 1, 1]]);
        let (d, j) = overlap_scores(&pred, &gt, 1).unwrap();
        assert_eq!(d, 0.5);
        assert!((j - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn boundary_examples() {
        let single = mask(&[&[0, 0, 0], &[0, 2, 0], &[0, 0, 0]]);
        assert_eq!(extract_boundary(&single, 2), vec![[0, 1, 1]]);

        let mut rows = vec![vec![0u8; 6]; 6];
        for row in rows.iter_mut().skip(1).take(4) {
            row[1..5].fill(1);
        }
        let refs: Vec<&[u8]> = rows.iter().map(|r| r.as_slice()).collect();
        let sq = mask(&refs);
        let b = extract_boundary(&sq, 1);
        assert_eq!(b.len(), 12);
        assert!(!b.contains(&[0, 2, 2]) && !b.contains(&[0, 3, 3]));

        let full = LabelMask::new(
            Dims {
                slices: 1,
                height: 5,
                width: 4,
            },
            vec![3; 20],
            unit(),
        )
        .unwrap();
        assert_eq!(extract_boundary(&full, 3).len(), 2 * 5 + 2 * 4 - 4);
        assert!(extract_boundary(&full, 1).is_empty());
    }

    #[test]
    fn distance_examples() {
        let sp = unit();
        assert_eq!(hausdorff_distance(&[[0, 0, 0]], &[[0, 3, 4]], &sp), Some(5.0));
        let fine = Spacing::isotropic_2d(0.75);
        assert_eq!(hausdorff_distance(&[[0, 0, 0]], &[[0, 0, 2]], &fine), Some(1.5));
        assert_eq!(average_surface_distance(&[[0, 0, 0]], &[[0, 0, 2]], &sp), Some(2.0));
        let a = [[0, 1, 1], [0, 2, 5]];
        assert_eq!(hausdorff_distance(&a, &a, &sp), Some(0.0));
        assert_eq!(average_surface_distance(&a, &a, &sp), Some(0.0));
        assert_eq!(hausdorff_distance(&[], &a, &sp), None);
        assert_eq!(average_surface_distance(&a, &[], &sp), None);
    }

    #[test]
    fn slice_thickness_enters_distances() {
        let sp = Spacing::new(1.0, 1.0, 8.0).unwrap();
        assert_eq!(hausdorff_distance(&[[0, 0, 0]], &[[1, 0, 0]], &sp), Some(8.0));
    }

    #[test]
    fn perfect_predictions_report_ones_and_zeros() {
        let m = mask(&[&[0, 1, 1, 0], &[3, 3, 2, 2], &[3, 1, 2, 0]]);
        let r = evaluate_subjects(&[m.clone(), m.clone()], &[m.clone(), m]).unwrap();
        assert_eq!(r.rows.len(), 4);
        for row in &r.rows {
            assert_eq!(row.dice.mean, Some(1.0));
            assert_eq!(row.dice.sd, Some(0.0));
            assert_eq!(row.jaccard.mean, Some(1.0));
            assert_eq!(row.hd_mm.mean, Some(0.0));
            assert_eq!(row.asd_mm.mean, Some(0.0));
        }
        let csv = r.to_csv();
        assert!(csv.starts_with(CSV_HEADER));
        assert_eq!(csv.lines().count(), 5);
        assert_eq!(csv.lines().nth(1).unwrap().split(',').next(), Some("Myo"));
        let json: serde_json::Value = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(json["rows"][3]["structure"], "Average");
    }

    #[test]
    fn empty_prediction_marks_distances_undefined() {
        let gt = mask(&[&[1, 1, 2, 3]]);
        let pred = mask(&[&[1, 1, 0, 3]]);
        let r = evaluate_subjects(&[pred], &[gt]).unwrap();
        assert_eq!(r.undefined_distances, vec![(0, "RV".to_string())]);
        let rv = r.row("RV").unwrap();
        assert_eq!(rv.dice.mean, Some(0.0));
        assert_eq!(rv.hd_mm.mean, None);
        assert_eq!(r.row("Average").unwrap().hd_mm.mean, None);
        assert!(r.to_csv().lines().nth(3).unwrap().ends_with(",,"));
    }

    fn arb_mask(size: usize) -> impl Strategy<Value = LabelMask> {
        proptest::collection::vec(0u8..4, size * size).prop_map(move |data| {
            LabelMask::new(
                Dims {
                    slices: 1,
                    height: size,
                    width: size,
                },
                data,
                Spacing::isotropic_2d(1.0),
            )
            .unwrap()
        })
    }

    fn arb_points() -> impl Strategy<Value = Vec<Voxel>> {
        proptest::collection::vec(
            (0usize..3, 0usize..20, 0usize..20).prop_map(|(s, r, c)| [s, r, c]),
            1..30,
        )
    }

    proptest! {
        #[test]
        fn dice_dominates_jaccard(a in arb_mask(8), b in arb_mask(8), c in 0u8..4) {
            let (d, j) = overlap_scores(&a, &b, c).unwrap();
            prop_assert!(d >= j);
            prop_assert_eq!(d == j, d == 0.0 || d == 1.0);
        }

        #[test]
        fn distances_are_symmetric_translation_invariant_and_ordered(
            a in arb_points(),
            b in arb_points(),
            shift in (0usize..5, 0usize..5, 0usize..5),
        ) {
            let sp = Spacing::new(0.8, 1.3, 5.0).unwrap();
            let hd = hausdorff_distance(&a, &b, &sp).unwrap();
            let asd = average_surface_distance(&a, &b, &sp).unwrap();
            prop_assert_eq!(Some(hd), hausdorff_distance(&b, &a, &sp));
            let asd_ba = average_surface_distance(&b, &a, &sp).unwrap();
            prop_assert!((asd - asd_ba).abs() <= 1e-12 * asd.max(1.0));
            let mv = |p: &Vec<Voxel>| -> Vec<Voxel> {
                p.iter().map(|v| [v[0] + shift.0, v[1] + shift.1, v[2] + shift.2]).collect()
            };
            prop_assert_eq!(Some(hd), hausdorff_distance(&mv(&a), &mv(&b), &sp));
            let asd_mv = average_surface_distance(&mv(&a), &mv(&b), &sp).unwrap();
            prop_assert!((asd - asd_mv).abs() <= 1e-12 * asd.max(1.0));
            prop_assert!(hd >= asd);
        }

        #[test]
        fn spacing_scale_scales_distances(a in arb_points(), b in arb_points(), k in 0u32..4) {
            let sp = Spacing::new(0.7, 1.1, 3.0).unwrap();
            let s = f64::powi(2.0, k as i32);
            let hd = hausdorff_distance(&a, &b, &sp).unwrap();
            let asd = average_surface_distance(&a, &b, &sp).unwrap();
            prop_assert_eq!(hausdorff_distance(&a, &b, &sp.scaled(s)), Some(hd * s));
            prop_assert_eq!(average_surface_distance(&a, &b, &sp.scaled(s)), Some(asd * s));
        }
    }
}
