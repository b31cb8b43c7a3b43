use crate::volume::LabelMask;

/// 8-connected in-plane components of one class, labelled per slice.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Components {
    /// Label per voxel: 0 outside the class, otherwise `1..=sizes.len()`
    /// in order of first appearance in a slice-major, row-major scan.
    pub labels: Vec<u32>,
    /// Voxel count of label `i + 1`.
    pub sizes: Vec<usize>,
}

impl Components {
    pub fn count(&self) -> usize {
        self.sizes.len()
    }
}

pub fn connected_components(mask: &LabelMask, class_id: u8) -> Components {
    let d = mask.dims();
    let (h, w) = (d.height, d.width);
    let data = mask.data();
    let mut labels = vec![0u32; data.len()];
    let mut sizes = Vec::new();
    let mut stack = Vec::new();
    for s in 0..d.slices {
        let base = s * h * w;
        for start in base..base + h * w {
            if data[start] != class_id || labels[start] != 0 {
                continue;
            }
            sizes.push(0);
            let label = sizes.len() as u32;
            labels[start] = label;
            stack.push(start - base);
            while let Some(p) = stack.pop() {
                sizes[label as usize - 1] += 1;
                let (r, c) = (p / w, p % w);
                for nr in r.saturating_sub(1)..=(r + 1).min(h - 1) {
                    for nc in c.saturating_sub(1)..=(c + 1).min(w - 1) {
                        let q = base + nr * w + nc;
                        if data[q] == class_id && labels[q] == 0 {
                            labels[q] = label;
                            stack.push(nr * w + nc);
                        }
                    }
                }
            }
        }
    }
    Components { labels, sizes }
}

/// Smallest component kept by default: 0.1% of the slice area, rounded up.
pub fn default_min_size(height: usize, width: usize) -> usize {
    (height * width).div_ceil(1000)
}

/// Relabel every foreground component smaller than `min_size` voxels as
/// background.
pub fn remove_small_components(mask: &LabelMask, min_size: usize) -> LabelMask {
    let mut out = mask.clone();
    if min_size == 0 {
        return out;
    }
    let top = mask.data().iter().copied().max().unwrap_or(0);
    for class_id in 1..=top {
        let cc = connected_components(mask, class_id);
        for (v, &l) in out.data_mut().iter_mut().zip(&cc.labels) {
            if l != 0 && cc.sizes[l as usize - 1] < min_size {
                *v = 0;
            }
        }
    }
    out
}
