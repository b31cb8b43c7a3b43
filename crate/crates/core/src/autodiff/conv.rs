//! 2D cross-correlation via im2col and GEMM.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Stride, dilation and symmetric zero padding of a 2D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn new(stride: usize, dilation: usize, padding: usize) -> Self {
        Self {
            stride,
            dilation,
            padding,
        }
    }

    /// Stride-1 geometry that keeps H x W unchanged for an odd `kernel` size.
    pub fn same(kernel: usize, dilation: usize) -> Self {
        Self::new(1, dilation, dilation * (kernel - 1) / 2)
    }

    /// Output extent along one axis, or `None` if the dilated kernel does not fit.
    pub fn output_extent(&self, input: usize, kernel: usize) -> Option<usize> {
        if self.stride == 0 || self.dilation == 0 || kernel == 0 {
            return None;
        }
        let span = self.dilation * (kernel - 1) + 1;
        let padded = input + 2 * self.padding;
        if padded < span {
            return None;
        }
        Some((padded - span) / self.stride + 1)
    }

    fn is_pointwise(&self, kh: usize, kw: usize) -> bool {
        kh == 1 && kw == 1 && self.stride == 1 && self.padding == 0
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvDims {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvDims {
    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }
}

pub(crate) fn conv_dims<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    geom: ConvGeometry,
) -> Result<ConvDims> {
    let [n, c, h, w] = input.dims4()?;
    let [o, ci, kh, kw] = kernel.dims4().map_err(|_| {
        Error::shape(format!(
            "conv2d kernel must be O x I x Kh x Kw, got {:?}",
            kernel.shape()
        ))
    })?;
    if ci != c {
        return Err(Error::shape(format!(
            "conv2d channel mismatch: input has {c} channels, kernel expects {ci}"
        )));
    }
    if let Some(b) = bias {
        if b.shape() != [o] {
            return Err(Error::shape(format!(
                "conv2d bias must have shape [{o}], got {:?}",
                b.shape()
            )));
        }
    }
    let ho = geom.output_extent(h, kh).ok_or_else(|| {
        Error::shape(format!(
            "conv2d height: input {h} with padding {} is smaller than dilated kernel extent {}",
            geom.padding,
            geom.dilation * (kh.max(1) - 1) + 1
        ))
    })?;
    let wo = geom.output_extent(w, kw).ok_or_else(|| {
        Error::shape(format!(
            "conv2d width: input {w} with padding {} is smaller than dilated kernel extent {}",
            geom.padding,
            geom.dilation * (kw.max(1) - 1) + 1
        ))
    })?;
    Ok(ConvDims {
        n,
        c,
        h,
        w,
        o,
        kh,
        kw,
        ho,
        wo,
    })
}

/// Valid output range `[lo, hi)` along one axis for a stride-1 tap at `offset`.
fn valid_range(out_len: usize, in_len: usize, offset: isize) -> (usize, usize) {
    let lo = (-offset).clamp(0, out_len as isize) as usize;
    let hi = (in_len as isize - offset).clamp(lo as isize, out_len as isize) as usize;
    (lo, hi)
}

/// Writes the patch matrix of one sample into `cols`, row `i` starting at
/// `cols[i * ld + off]`, so several samples can share one wide matrix.
fn im2col<T: Real>(x: &[T], d: &ConvDims, g: ConvGeometry, cols: &mut [T], ld: usize, off: usize) {
    let pad = g.padding as isize;
    for ci in 0..d.c {
        let plane = &x[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let row = ((ci * d.kh + ki) * d.kw + kj) * ld + off;
                let xoff = (kj * g.dilation) as isize - pad;
                for oy in 0..d.ho {
                    let iy = (oy * g.stride + ki * g.dilation) as isize - pad;
                    let dst = &mut cols[row + oy * d.wo..row + (oy + 1) * d.wo];
                    if iy < 0 || iy >= d.h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    if g.stride == 1 {
                        let (lo, hi) = valid_range(d.wo, d.w, xoff);
                        dst[..lo].fill(T::zero());
                        if hi > lo {
                            let s = (lo as isize + xoff) as usize;
                            dst[lo..hi].copy_from_slice(&src[s..s + (hi - lo)]);
                        }
                        dst[hi..].fill(T::zero());
                    } else {
                        for (ox, v) in dst.iter_mut().enumerate() {
                            let ix = (ox * g.stride) as isize + xoff;
                            *v = if ix < 0 || ix >= d.w as isize {
                                T::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Transposed patch matrix, one row of length `rows()` per output pixel.
/// The kernel gradient GEMM runs much faster with this operand contiguous.
fn im2col_t<T: Real>(x: &[T], d: &ConvDims, g: ConvGeometry, cols: &mut [T]) {
    let r = d.rows();
    let pad = g.padding as isize;
    for oy in 0..d.ho {
        let block = &mut cols[oy * d.wo * r..(oy + 1) * d.wo * r];
        for ci in 0..d.c {
            let plane = &x[ci * d.h * d.w..(ci + 1) * d.h * d.w];
            for ki in 0..d.kh {
                let iy = (oy * g.stride + ki * g.dilation) as isize - pad;
                for kj in 0..d.kw {
                    let col = (ci * d.kh + ki) * d.kw + kj;
                    if iy < 0 || iy >= d.h as isize {
                        for ox in 0..d.wo {
                            block[ox * r + col] = T::zero();
                        }
                        continue;
                    }
                    let src = &plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    let xoff = (kj * g.dilation) as isize - pad;
                    for ox in 0..d.wo {
                        let ix = (ox * g.stride) as isize + xoff;
                        block[ox * r + col] = if ix < 0 || ix >= d.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], d: &ConvDims, g: ConvGeometry, x: &mut [T]) {
    let p = d.cols();
    let pad = g.padding as isize;
    for ci in 0..d.c {
        let plane = &mut x[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let row = ((ci * d.kh + ki) * d.kw + kj) * p;
                let xoff = (kj * g.dilation) as isize - pad;
                for oy in 0..d.ho {
                    let iy = (oy * g.stride + ki * g.dilation) as isize - pad;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let src = &cols[row + oy * d.wo..row + (oy + 1) * d.wo];
                    let dst = &mut plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    for (ox, &v) in src.iter().enumerate() {
                        let ix = (ox * g.stride) as isize + xoff;
                        if ix >= 0 && ix < d.w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Samples per GEMM. Small feature maps give skinny products that run far
/// below peak, so their patch matrices are laid side by side.
fn group_size(d: &ConvDims) -> usize {
    let p = d.cols().max(1);
    let by_width = 1024usize.div_ceil(p);
    let by_memory = (1usize << 24) / (d.rows() * p).max(1);
    by_width.min(by_memory).clamp(1, d.n.max(1))
}

#[derive(Default)]
struct Scratch<T> {
    cols: Vec<T>,
    out: Vec<T>,
}

/// `out = kernel * im2col(x)` for a run of consecutive samples.
fn conv_group<T: Real>(x: &[T], k: &[T], d: &ConvDims, g: ConvGeometry, s: &mut Scratch<T>, out: &mut [T]) {
    let (r, p) = (d.rows(), d.cols());
    let in_stride = d.c * d.h * d.w;
    let count = out.len() / (d.o * p);
    if count == 1 {
        if g.is_pointwise(d.kh, d.kw) {
            T::gemm(d.o, r, p, k, (r, 1), x, (p, 1), T::zero(), out, (p, 1));
        } else {
            s.cols.resize(r * p, T::zero());
            im2col(x, d, g, &mut s.cols, p, 0);
            T::gemm(d.o, r, p, k, (r, 1), &s.cols, (p, 1), T::zero(), out, (p, 1));
        }
        return;
    }
    let wide = count * p;
    s.cols.resize(r * wide, T::zero());
    s.out.resize(d.o * wide, T::zero());
    for (i, x_n) in x.chunks(in_stride).enumerate() {
        im2col(x_n, d, g, &mut s.cols, wide, i * p);
    }
    T::gemm(
        d.o,
        r,
        wide,
        k,
        (r, 1),
        &s.cols,
        (wide, 1),
        T::zero(),
        &mut s.out,
        (wide, 1),
    );
    for (i, out_n) in out.chunks_mut(d.o * p).enumerate() {
        for (o, row) in out_n.chunks_mut(p).enumerate() {
            row.copy_from_slice(&s.out[o * wide + i * p..o * wide + (i + 1) * p]);
        }
    }
}

/// Convolution of a whole batch, `out` being `n x o x p`.
fn conv_batch<T: Real>(x: &[T], k: &[T], d: &ConvDims, g: ConvGeometry, out: &mut [T]) {
    let p = d.cols();
    let in_stride = d.c * d.h * d.w;
    let gs = group_size(d);
    out.par_chunks_mut(gs * d.o * p)
        .zip(x.par_chunks(gs * in_stride))
        .for_each_init(Scratch::default, |s, (out_g, x_g)| {
            conv_group(x_g, k, d, g, s, out_g);
        });
}

pub(crate) fn conv2d_forward<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    geom: ConvGeometry,
) -> Result<Tensor<T>> {
    let d = conv_dims(input, kernel, bias, geom)?;
    let p = d.cols();
    let mut out = vec![T::zero(); d.n * d.o * p];
    conv_batch(input.data(), kernel.data(), &d, geom, &mut out);
    if let Some(b) = bias {
        for out_n in out.chunks_mut(d.o * p) {
            for (row, &bv) in out_n.chunks_mut(p).zip(b.data()) {
                row.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    Tensor::new(vec![d.n, d.o, d.ho, d.wo], out)
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub kernel: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

/// For stride 1 and square kernels the input gradient is itself a
/// convolution of the output gradient with the flipped, transposed kernel.
fn transposed<T: Real>(k: &[T], d: &ConvDims, g: ConvGeometry) -> Option<(Vec<T>, ConvDims, ConvGeometry)> {
    let span = g.dilation * (d.kh - 1);
    if g.stride != 1 || d.kh != d.kw || g.padding > span {
        return None;
    }
    let (kh, kw) = (d.kh, d.kw);
    let mut kt = vec![T::zero(); k.len()];
    for o in 0..d.o {
        for c in 0..d.c {
            for i in 0..kh {
                for j in 0..kw {
                    kt[((c * d.o + o) * kh + (kh - 1 - i)) * kw + (kw - 1 - j)] = k[((o * d.c + c) * kh + i) * kw + j];
                }
            }
        }
    }
    let td = ConvDims {
        n: d.n,
        c: d.o,
        h: d.ho,
        w: d.wo,
        o: d.c,
        kh,
        kw,
        ho: d.h,
        wo: d.w,
    };
    Some((kt, td, ConvGeometry::new(1, g.dilation, span - g.padding)))
}

pub(crate) fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    geom: ConvGeometry,
    grad_out: &Tensor<T>,
    want: (bool, bool, bool),
) -> Result<ConvGrads<T>> {
    let d = conv_dims(input, kernel, None, geom)?;
    let (r, p) = (d.rows(), d.cols());
    let in_stride = d.c * d.h * d.w;
    let pointwise = geom.is_pointwise(d.kh, d.kw);
    let k = kernel.data();
    let (want_input, want_kernel, want_bias) = want;
    let mut grads = ConvGrads {
        input: None,
        kernel: None,
        bias: None,
    };

    if want_kernel {
        // Accumulated sample by sample in order, independent of threading.
        let mut dk = vec![T::zero(); d.o * r];
        let mut cols = Vec::new();
        for (x_n, gy_n) in input.data().chunks(in_stride).zip(grad_out.data().chunks(d.o * p)) {
            if pointwise {
                T::gemm(d.o, p, r, gy_n, (p, 1), x_n, (1, p), T::one(), &mut dk, (r, 1));
            } else {
                cols.resize(p * r, T::zero());
                im2col_t(x_n, &d, geom, &mut cols);
                T::gemm(d.o, p, r, gy_n, (p, 1), &cols, (r, 1), T::one(), &mut dk, (r, 1));
            }
        }
        grads.kernel = Some(Tensor::new(kernel.shape().to_vec(), dk)?);
    }
    if want_bias {
        let mut db = vec![T::zero(); d.o];
        for gy_n in grad_out.data().chunks(d.o * p) {
            for (acc, row) in db.iter_mut().zip(gy_n.chunks(p)) {
                *acc += row.iter().copied().sum::<T>();
            }
        }
        grads.bias = Some(Tensor::new(vec![d.o], db)?);
    }
    if want_input {
        let mut dx = vec![T::zero(); d.n * in_stride];
        let gy = grad_out.data();
        if let (false, Some((kt, td, tg))) = (pointwise, transposed(k, &d, geom)) {
            conv_batch(gy, &kt, &td, tg, &mut dx);
        } else {
            dx.par_chunks_mut(in_stride)
                .zip(gy.par_chunks(d.o * p))
                .for_each_init(Vec::new, |dcols, (dx_n, gy_n)| {
                    if pointwise {
                        T::gemm(r, d.o, p, k, (1, r), gy_n, (p, 1), T::zero(), dx_n, (p, 1));
                    } else {
                        dcols.resize(r * p, T::zero());
                        T::gemm(r, d.o, p, k, (1, r), gy_n, (p, 1), T::zero(), dcols, (p, 1));
                        col2im(dcols, &d, geom, dx_n);
                    }
                });
        }
        grads.input = Some(Tensor::new(input.shape().to_vec(), dx)?);
    }
    Ok(grads)
}
