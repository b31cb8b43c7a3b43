//! Forward and backward kernels for the non-convolution primitives.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub(crate) fn same_shape<T: Real>(what: &str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{what} requires identical shapes, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// 2x2 max pooling with stride 2; odd extents keep a truncated last window.
pub(crate) fn maxpool2x2_forward<T: Real>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let [n, c, h, w] = x.dims4()?;
    let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut argmax = Vec::with_capacity(n * c * ho * wo);
    let data = x.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best_idx = base + 2 * oy * w + 2 * ox;
                let mut best = data[best_idx];
                for iy in 2 * oy..(2 * oy + 2).min(h) {
                    for ix in 2 * ox..(2 * ox + 2).min(w) {
                        let idx = base + iy * w + ix;
                        // strict comparison keeps the first maximum in row-major order
                        if data[idx] > best {
                            best = data[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                argmax.push(best_idx);
            }
        }
    }
    Ok((Tensor::new(vec![n, c, ho, wo], out)?, argmax))
}

pub(crate) fn maxpool2x2_backward<T: Real>(
    input_shape: &[usize],
    argmax: &[usize],
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let mut dx = Tensor::zeros(input_shape);
    let d = dx.data_mut();
    for (&idx, &g) in argmax.iter().zip(grad_out.data()) {
        d[idx] += g;
    }
    Ok(dx)
}

pub(crate) fn upsample2x_forward<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.dims4()?;
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); n * c * h2 * w2];
    for plane in 0..n * c {
        let src = &x.data()[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out[plane * h2 * w2..(plane + 1) * h2 * w2];
        for y in 0..h2 {
            let srow = &src[(y / 2) * w..(y / 2 + 1) * w];
            for (xo, v) in dst[y * w2..(y + 1) * w2].iter_mut().enumerate() {
                *v = srow[xo / 2];
            }
        }
    }
    Tensor::new(vec![n, c, h2, w2], out)
}

pub(crate) fn upsample2x_backward<T: Real>(input_shape: &[usize], grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let mut dx = Tensor::zeros(input_shape);
    let [n, c, h, w] = dx.dims4()?;
    let w2 = 2 * w;
    let g = grad_out.data();
    let d = dx.data_mut();
    for plane in 0..n * c {
        let gp = &g[plane * 4 * h * w..(plane + 1) * 4 * h * w];
        let dp = &mut d[plane * h * w..(plane + 1) * h * w];
        for y in 0..2 * h {
            for x in 0..w2 {
                dp[(y / 2) * w + x / 2] += gp[y * w2 + x];
            }
        }
    }
    Ok(dx)
}

pub(crate) fn concat_forward<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, ca, h, w] = a.dims4()?;
    let [nb, cb, hb, wb] = b.dims4()?;
    if (n, h, w) != (nb, hb, wb) {
        return Err(Error::shape(format!(
            "concat_channels needs matching N, H, W; got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (sa, sb) = (ca * h * w, cb * h * w);
    let mut out = Vec::with_capacity(n * (sa + sb));
    for i in 0..n {
        out.extend_from_slice(&a.data()[i * sa..(i + 1) * sa]);
        out.extend_from_slice(&b.data()[i * sb..(i + 1) * sb]);
    }
    Tensor::new(vec![n, ca + cb, h, w], out)
}

pub(crate) fn concat_backward<T: Real>(
    a_shape: &[usize],
    b_shape: &[usize],
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let n = a_shape[0];
    let sa: usize = a_shape[1..].iter().product();
    let sb: usize = b_shape[1..].iter().product();
    let mut da = Vec::with_capacity(n * sa);
    let mut db = Vec::with_capacity(n * sb);
    for chunk in grad_out.data().chunks(sa + sb) {
        da.extend_from_slice(&chunk[..sa]);
        db.extend_from_slice(&chunk[sa..]);
    }
    Ok((Tensor::new(a_shape.to_vec(), da)?, Tensor::new(b_shape.to_vec(), db)?))
}

pub(crate) fn softmax_channels_forward<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, k, h, w] = x.dims4()?;
    if k < 2 {
        return Err(Error::shape(format!(
            "softmax over channels needs at least 2 classes, got {k}"
        )));
    }
    let hw = h * w;
    let mut out = vec![T::zero(); x.len()];
    let src = x.data();
    for b in 0..n {
        let base = b * k * hw;
        for p in 0..hw {
            let mut max = T::neg_infinity();
            for c in 0..k {
                max = max.max(src[base + c * hw + p]);
            }
            let mut denom = T::zero();
            for c in 0..k {
                let e = (src[base + c * hw + p] - max).exp();
                out[base + c * hw + p] = e;
                denom += e;
            }
            for c in 0..k {
                out[base + c * hw + p] = out[base + c * hw + p] / denom;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

pub(crate) fn softmax_channels_backward<T: Real>(y: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, k, h, w] = y.dims4()?;
    let hw = h * w;
    let (yd, gd) = (y.data(), grad_out.data());
    let mut dx = vec![T::zero(); y.len()];
    for b in 0..n {
        let base = b * k * hw;
        for p in 0..hw {
            let mut dot = T::zero();
            for c in 0..k {
                dot += yd[base + c * hw + p] * gd[base + c * hw + p];
            }
            for c in 0..k {
                let i = base + c * hw + p;
                dx[i] = yd[i] * (gd[i] - dot);
            }
        }
    }
    Tensor::new(y.shape().to_vec(), dx)
}

/// Per-channel mean and biased variance over N x H x W.
pub(crate) fn channel_moments<T: Real>(x: &Tensor<T>) -> Result<(Vec<T>, Vec<T>)> {
    let [n, c, h, w] = x.dims4()?;
    let hw = h * w;
    let count = T::from_usize(n * hw).expect("count");
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = T::zero();
        for b in 0..n {
            let start = (b * c + ch) * hw;
            s += x.data()[start..start + hw].iter().copied().sum::<T>();
        }
        let m = s / count;
        let mut sq = T::zero();
        for b in 0..n {
            let start = (b * c + ch) * hw;
            sq += x.data()[start..start + hw]
                .iter()
                .map(|&v| (v - m) * (v - m))
                .sum::<T>();
        }
        mean[ch] = m;
        var[ch] = sq / count;
    }
    Ok((mean, var))
}

pub(crate) fn batchnorm_apply<T: Real>(
    x: &Tensor<T>,
    mean: &[T],
    inv_std: &[T],
    gamma: &[T],
    beta: &[T],
) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.dims4()?;
    let hw = h * w;
    let mut out = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            let start = (b * c + ch) * hw;
            let scale = gamma[ch] * inv_std[ch];
            let shift = beta[ch] - mean[ch] * scale;
            for (o, &v) in out[start..start + hw].iter_mut().zip(&x.data()[start..start + hw]) {
                *o = v * scale + shift;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

pub(crate) struct BatchNormGrads<T> {
    pub input: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

pub(crate) fn batchnorm_backward<T: Real>(
    x: &Tensor<T>,
    mean: &[T],
    inv_std: &[T],
    gamma: &[T],
    batch_stats: bool,
    grad_out: &Tensor<T>,
) -> Result<BatchNormGrads<T>> {
    let [n, c, h, w] = x.dims4()?;
    let hw = h * w;
    let m = T::from_usize(n * hw).expect("count");
    let (xd, gd) = (x.data(), grad_out.data());
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ch in 0..c {
        let (mut sg, mut sgx) = (T::zero(), T::zero());
        for b in 0..n {
            let start = (b * c + ch) * hw;
            for i in start..start + hw {
                let xhat = (xd[i] - mean[ch]) * inv_std[ch];
                sg += gd[i];
                sgx += gd[i] * xhat;
            }
        }
        dbeta[ch] = sg;
        dgamma[ch] = sgx;
    }
    let mut dx = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            let start = (b * c + ch) * hw;
            let k = gamma[ch] * inv_std[ch];
            for i in start..start + hw {
                dx[i] = if batch_stats {
                    let xhat = (xd[i] - mean[ch]) * inv_std[ch];
                    k / m * (m * gd[i] - dbeta[ch] - xhat * dgamma[ch])
                } else {
                    k * gd[i]
                };
            }
        }
    }
    Ok(BatchNormGrads {
        input: Tensor::new(x.shape().to_vec(), dx)?,
        gamma: Tensor::new(vec![c], dgamma)?,
        beta: Tensor::new(vec![c], dbeta)?,
    })
}
