use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Contrast-limited adaptive histogram equalization settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClaheParams {
    /// Histogram bins are clipped at `clip_limit` times the mean bin count.
    pub clip_limit: f64,
    /// Tile rows and columns.
    pub grid: [usize; 2],
    pub bins: usize,
}

impl Default for ClaheParams {
    fn default() -> Self {
        Self {
            clip_limit: 2.0,
            grid: [8, 8],
            bins: 256,
        }
    }
}

impl ClaheParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_limit.is_finite() && self.clip_limit > 0.0) {
            return Err(Error::config(format!(
                "CLAHE clip limit must be positive, got {}",
                self.clip_limit
            )));
        }
        if self.grid.contains(&0) || self.bins < 2 {
            return Err(Error::config(format!(
                "CLAHE needs a positive tile grid and at least 2 bins, got {:?} and {}",
                self.grid, self.bins
            )));
        }
        Ok(())
    }
}

/// Tile `i` of `n` over `len` pixels covers `[i*len/n, (i+1)*len/n)`.
fn tile_bounds(len: usize, n: usize) -> Vec<(usize, usize)> {
    (0..n).map(|i| (i * len / n, (i + 1) * len / n)).collect()
}

fn bin_of(v: f32, bins: usize) -> usize {
    ((v.clamp(0.0, 1.0) as f64 * bins as f64) as usize).min(bins - 1)
}

/// Clipped, redistributed, cumulative mapping of one tile's histogram, as
/// output intensities in `[0, 1]` per bin.
pub fn tile_mapping(values: impl Iterator<Item = f32>, params: &ClaheParams) -> Vec<f64> {
    let bins = params.bins;
    let mut hist = vec![0f64; bins];
    let mut count = 0usize;
    for v in values {
        hist[bin_of(v, bins)] += 1.0;
        count += 1;
    }
    if count == 0 {
        return (0..bins).map(|b| (b as f64 + 0.5) / bins as f64).collect();
    }
    let clip = params.clip_limit * count as f64 / bins as f64;
    let mut excess = 0.0;
    for h in hist.iter_mut() {
        if *h > clip {
            excess += *h - clip;
            *h = clip;
        }
    }
    let share = excess / bins as f64;
    let mut acc = 0.0;
    hist.iter()
        .map(|h| {
            acc += h + share;
            (acc / count as f64).min(1.0)
        })
        .collect()
}

/// Neighbouring tile indices and the weight of the second one for a pixel
/// at `pos`, interpolating between tile centres and clamping at the edges.
fn interp(pos: usize, centres: &[f64]) -> (usize, usize, f64) {
    let p = pos as f64;
    let last = centres.len() - 1;
    if p <= centres[0] {
        return (0, 0, 0.0);
    }
    if p >= centres[last] {
        return (last, last, 0.0);
    }
    let i = centres.iter().rposition(|&c| c <= p).unwrap();
    let t = (p - centres[i]) / (centres[i + 1] - centres[i]);
    (i, i + 1, t)
}

/// CLAHE of one `h x w` slice with values in `[0, 1]`.
pub fn clahe_slice(slice: &[f32], h: usize, w: usize, params: &ClaheParams) -> Result<Vec<f32>> {
    params.validate()?;
    if slice.len() != h * w {
        return Err(Error::shape(format!(
            "slice has {} values, expected {h}x{w}",
            slice.len()
        )));
    }
    if let Some(i) = slice.iter().position(|v| !v.is_finite()) {
        return Err(Error::shape(format!(
            "CLAHE input is not finite at row {}, col {}",
            i / w,
            i % w
        )));
    }
    let ty = params.grid[0].min(h);
    let tx = params.grid[1].min(w);
    let rows = tile_bounds(h, ty);
    let cols = tile_bounds(w, tx);
    let mut maps = Vec::with_capacity(ty * tx);
    for &(r0, r1) in &rows {
        for &(c0, c1) in &cols {
            let values = (r0..r1).flat_map(|r| slice[r * w + c0..r * w + c1].iter().copied());
            maps.push(tile_mapping(values, params));
        }
    }
    let centre = |b: &[(usize, usize)]| -> Vec<f64> { b.iter().map(|&(a, e)| (a + e - 1) as f64 / 2.0).collect() };
    let (cy, cx) = (centre(&rows), centre(&cols));
    let mut out = vec![0f32; h * w];
    for y in 0..h {
        let (i0, i1, wy) = interp(y, &cy);
        for x in 0..w {
            let (j0, j1, wx) = interp(x, &cx);
            let b = bin_of(slice[y * w + x], params.bins);
            let m = |i: usize, j: usize| maps[i * tx + j][b];
            let top = m(i0, j0) * (1.0 - wx) + m(i0, j1) * wx;
            let bottom = m(i1, j0) * (1.0 - wx) + m(i1, j1) * wx;
            out[y * w + x] = (top * (1.0 - wy) + bottom * wy).clamp(0.0, 1.0) as f32;
        }
    }
    Ok(out)
}
