//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use segadapt::volume::{Dims, LabelMask, Spacing};

/// Random single-slice mask built from overlapping rectangles of classes 1..=3.
pub fn random_mask(rng: &mut ChaCha8Rng, n: usize) -> LabelMask {
    let mut data = vec![0u8; n * n];
    for _ in 0..rng.random_range(0..6) {
        let class = rng.random_range(1..=3u8);
        let (r0, c0) = (rng.random_range(0..n), rng.random_range(0..n));
        let (h, w) = (rng.random_range(1..=n / 2), rng.random_range(1..=n / 2));
        for r in r0..(r0 + h).min(n) {
            for c in c0..(c0 + w).min(n) {
                data[r * n + c] = class;
            }
        }
    }
    for _ in 0..rng.random_range(0..20) {
        data[rng.random_range(0..n * n)] = rng.random_range(0..=3);
    }
    let dims = Dims {
        slices: 1,
        height: n,
        width: n,
    };
    LabelMask::new(dims, data, Spacing::new(1.25, 0.75, 8.0).unwrap()).unwrap()
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Boundary by explicit neighbour probing with signed offsets.
pub fn boundary_oracle(mask: &LabelMask, class: u8) -> Vec<[usize; 3]> {
    let d = mask.dims();
    let mut out = Vec::new();
    for s in 0..d.slices {
        for r in 0..d.height {
            for c in 0..d.width {
                if mask.get(s, r, c) != class {
                    continue;
                }
                let outside = [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)].iter().any(|&(dr, dc)| {
                    let (rr, cc) = (r as i64 + dr, c as i64 + dc);
                    rr < 0
                        || cc < 0
                        || rr >= d.height as i64
                        || cc >= d.width as i64
                        || mask.get(s, rr as usize, cc as usize) != class
                });
                if outside {
                    out.push([s, r, c]);
                }
            }
        }
    }
    out
}

fn d(a: [usize; 3], b: [usize; 3], sp: &Spacing) -> f64 {
    let z = (a[0] as f64 - b[0] as f64) * sp.slice;
    let y = (a[1] as f64 - b[1] as f64) * sp.row;
    let x = (a[2] as f64 - b[2] as f64) * sp.col;
    (z * z + y * y + x * x).sqrt()
}

/// Double-loop Hausdorff distance.
pub fn hausdorff_oracle(a: &[[usize; 3]], b: &[[usize; 3]], sp: &Spacing) -> f64 {
    let mut worst: f64 = 0.0;
    for (from, to) in [(a, b), (b, a)] {
        for &p in from {
            let mut best = f64::INFINITY;
            for &q in to {
                best = best.min(d(p, q, sp));
            }
            worst = worst.max(best);
        }
    }
    worst
}

/// Double-loop symmetric surface distance, minima of `a` summed first.
pub fn asd_oracle(a: &[[usize; 3]], b: &[[usize; 3]], sp: &Spacing) -> f64 {
    let mut sum = 0.0;
    for (from, to) in [(a, b), (b, a)] {
        for &p in from {
            let mut best = f64::INFINITY;
            for &q in to {
                best = best.min(d(p, q, sp));
            }
            sum += best;
        }
    }
    sum / (a.len() + b.len()) as f64
}

/// Dice and Jaccard from explicit index sets.
pub fn overlap_oracle(pred: &LabelMask, gt: &LabelMask, class: u8) -> (f64, f64) {
    let set = |m: &LabelMask| -> HashSet<usize> {
        m.data()
            .iter()
            .enumerate()
            .filter(|(_, &v)| v == class)
            .map(|(i, _)| i)
            .collect()
    };
    let (a, b) = (set(pred), set(gt));
    if a.is_empty() && b.is_empty() {
        return (1.0, 1.0);
    }
    let inter = a.intersection(&b).count() as f64;
    let union = a.union(&b).count() as f64;
    (2.0 * inter / (a.len() + b.len()) as f64, inter / union)
}
