//! Value-level kernels shared by the autodiff tape and the inference path.
//!
//! Every reduction runs in a fixed loop order. Batch-parallel kernels split the
//! batch into fixed-size chunks and combine partial results sequentially, so
//! results do not depend on the number of worker threads.

use rayon::prelude::*;

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Samples per parallel work unit in the batch-reduced kernels.
const BATCH_CHUNK: usize = 4;

fn check_nhwc<T: Real>(op: &'static str, x: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    match *x.shape() {
        [n, h, w, c] => Ok((n, h, w, c)),
        _ => Err(Error::InvalidShape {
            op,
            shape: x.shape().to_vec(),
            reason: "expected rank-4 NHWC tensor".into(),
        }),
    }
}

fn conv_shapes<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
) -> Result<(usize, usize, usize, usize, usize)> {
    let (n, h, wd, cin) = check_nhwc("conv2d", x)?;
    match *w.shape() {
        [kh, kw, wcin, cout] if kh > 0 && kw > 0 && wcin == cin && kh % 2 == 1 && kw % 2 == 1 => {
            Ok((n, h, wd, cin, cout))
        }
        _ => Err(Error::ShapeMismatch {
            op: "conv2d",
            lhs: x.shape().to_vec(),
            rhs: w.shape().to_vec(),
        }),
    }
}

/// 2-D cross-correlation, stride 1, zero "same" padding.
///
/// `x` is `[N, H, W, Cin]`, `w` is `[kh, kw, Cin, Cout]` with odd kernel
/// extents, `b` is `[Cout]`.
pub fn conv2d<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, h, wd, cin, cout) = conv_shapes(x, w)?;
    let (kh, kw) = (w.shape()[0], w.shape()[1]);
    if b.shape() != [cout] {
        return Err(Error::ShapeMismatch {
            op: "conv2d bias",
            lhs: w.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let (ph, pw) = (kh / 2, kw / 2);
    let xs = x.data();
    let ws = w.data();
    let bs = b.data();
    let mut out = vec![T::zero(); n * h * wd * cout];
    let plane_in = h * wd * cin;
    let plane_out = h * wd * cout;
    if plane_out == 0 {
        return Tensor::from_parts(vec![n, h, wd, cout], out);
    }
    out.par_chunks_mut(plane_out)
        .enumerate()
        .for_each(|(ni, o)| {
            let xi = &xs[ni * plane_in..(ni + 1) * plane_in];
            for y in 0..h {
                for xx in 0..wd {
                    let acc = &mut o[(y * wd + xx) * cout..(y * wd + xx + 1) * cout];
                    acc.copy_from_slice(bs);
                    for ky in 0..kh {
                        let iy = y as isize + ky as isize - ph as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = xx as isize + kx as isize - pw as isize;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            let px = &xi[(iy as usize * wd + ix as usize) * cin..][..cin];
                            let wk = &ws[(ky * kw + kx) * cin * cout..][..cin * cout];
                            for (ci, &a) in px.iter().enumerate() {
                                let wrow = &wk[ci * cout..(ci + 1) * cout];
                                for (acc_v, &wv) in acc.iter_mut().zip(wrow) {
                                    *acc_v = *acc_v + a * wv;
                                }
                            }
                        }
                    }
                }
            }
        });
    Tensor::from_parts(vec![n, h, wd, cout], out)
}

/// Input (if requested), kernel and bias gradients.
pub type ConvGrads<T> = (Option<Tensor<T>>, Tensor<T>, Tensor<T>);

/// Gradients of [`conv2d`] with respect to input, kernel and bias.
pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gout: &Tensor<T>,
    need_input_grad: bool,
) -> Result<ConvGrads<T>> {
    let (n, h, wd, cin, cout) = conv_shapes(x, w)?;
    if gout.shape() != [n, h, wd, cout] {
        return Err(Error::ShapeMismatch {
            op: "conv2d_backward",
            lhs: vec![n, h, wd, cout],
            rhs: gout.shape().to_vec(),
        });
    }
    let (kh, kw) = (w.shape()[0], w.shape()[1]);
    let (ph, pw) = (kh / 2, kw / 2);
    let xs = x.data();
    let ws = w.data();
    let gs = gout.data();
    let plane_in = h * wd * cin;
    let plane_out = h * wd * cout;

    let gx = if need_input_grad {
        // wt[ky][kx][co][ci] so the inner loop runs over contiguous ci.
        let mut wt = vec![T::zero(); ws.len()];
        for k in 0..kh * kw {
            for ci in 0..cin {
                for co in 0..cout {
                    wt[k * cin * cout + co * cin + ci] = ws[k * cin * cout + ci * cout + co];
                }
            }
        }
        let mut gx = vec![T::zero(); n * plane_in];
        if plane_in > 0 {
            gx.par_chunks_mut(plane_in).enumerate().for_each(|(ni, gxi)| {
                let gi = &gs[ni * plane_out..(ni + 1) * plane_out];
                for y in 0..h {
                    for xx in 0..wd {
                        let g = &gi[(y * wd + xx) * cout..][..cout];
                        for ky in 0..kh {
                            let iy = y as isize + ky as isize - ph as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = xx as isize + kx as isize - pw as isize;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                let dst = &mut gxi[(iy as usize * wd + ix as usize) * cin..][..cin];
                                let wk = &wt[(ky * kw + kx) * cin * cout..][..cin * cout];
                                for (co, &gv) in g.iter().enumerate() {
                                    let wrow = &wk[co * cin..(co + 1) * cin];
                                    for (d, &wv) in dst.iter_mut().zip(wrow) {
                                        *d = *d + gv * wv;
                                    }
                                }
                            }
                        }
                    }
                }
            });
        }
        Some(Tensor::from_parts(x.shape().to_vec(), gx)?)
    } else {
        None
    };

    let chunks: Vec<(Vec<T>, Vec<T>)> = (0..n.div_ceil(BATCH_CHUNK))
        .into_par_iter()
        .map(|chunk| {
            let mut gw = vec![T::zero(); ws.len()];
            let mut gb = vec![T::zero(); cout];
            let lo = chunk * BATCH_CHUNK;
            let hi = (lo + BATCH_CHUNK).min(n);
            for ni in lo..hi {
                let xi = &xs[ni * plane_in..(ni + 1) * plane_in];
                let gi = &gs[ni * plane_out..(ni + 1) * plane_out];
                for y in 0..h {
                    for xx in 0..wd {
                        let g = &gi[(y * wd + xx) * cout..][..cout];
                        for (b, &gv) in gb.iter_mut().zip(g) {
                            *b = *b + gv;
                        }
                        for ky in 0..kh {
                            let iy = y as isize + ky as isize - ph as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = xx as isize + kx as isize - pw as isize;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                let px = &xi[(iy as usize * wd + ix as usize) * cin..][..cin];
                                let gwk = &mut gw[(ky * kw + kx) * cin * cout..][..cin * cout];
                                for (ci, &a) in px.iter().enumerate() {
                                    let row = &mut gwk[ci * cout..(ci + 1) * cout];
                                    for (r, &gv) in row.iter_mut().zip(g) {
                                        *r = *r + a * gv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            (gw, gb)
        })
        .collect();

    let mut gw = vec![T::zero(); ws.len()];
    let mut gb = vec![T::zero(); cout];
    for (pw_, pb) in &chunks {
        for (a, &b) in gw.iter_mut().zip(pw_) {
            *a = *a + b;
        }
        for (a, &b) in gb.iter_mut().zip(pb) {
            *a = *a + b;
        }
    }
    Ok((
        gx,
        Tensor::from_parts(w.shape().to_vec(), gw)?,
        Tensor::from_parts(vec![cout], gb)?,
    ))
}

/// Mixes the trailing axis by a square matrix: `y[.., i] = Σ_j w[i, j] · x[.., j]`.
pub fn channel_matmul<T: Real>(x: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    let c = x.channels();
    if w.shape() != [c, c] {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            lhs: x.shape().to_vec(),
            rhs: w.shape().to_vec(),
        });
    }
    let ws = w.data();
    let mut out = vec![T::zero(); x.numel()];
    for (src, dst) in x.data().chunks(c).zip(out.chunks_mut(c)) {
        for (i, d) in dst.iter_mut().enumerate() {
            let row = &ws[i * c..(i + 1) * c];
            let mut acc = T::zero();
            for (&a, &b) in row.iter().zip(src) {
                acc = acc + a * b;
            }
            *d = acc;
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

/// Gradients of [`channel_matmul`].
pub fn channel_matmul_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gout: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let c = x.channels();
    let wt = transpose(w)?;
    let gx = channel_matmul(gout, &wt)?;
    let mut gw = vec![T::zero(); c * c];
    for (xr, gr) in x.data().chunks(c).zip(gout.data().chunks(c)) {
        for (i, &g) in gr.iter().enumerate() {
            let row = &mut gw[i * c..(i + 1) * c];
            for (r, &xv) in row.iter_mut().zip(xr) {
                *r = *r + g * xv;
            }
        }
    }
    Ok((gx, Tensor::from_parts(vec![c, c], gw)?))
}

pub fn transpose<T: Real>(m: &Tensor<T>) -> Result<Tensor<T>> {
    let (r, c) = match *m.shape() {
        [r, c] => (r, c),
        _ => {
            return Err(Error::InvalidShape {
                op: "transpose",
                shape: m.shape().to_vec(),
                reason: "expected a matrix".into(),
            })
        }
    };
    let d = m.data();
    let mut out = vec![T::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = d[i * c + j];
        }
    }
    Tensor::from_parts(vec![c, r], out)
}

/// Channel slice `[start, start + len)` of the trailing axis.
pub fn slice_channels<T: Real>(x: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    let c = x.channels();
    if x.rank() == 0 || start + len > c {
        return Err(Error::InvalidShape {
            op: "slice",
            shape: x.shape().to_vec(),
            reason: format!("channel range {start}..{} out of bounds", start + len),
        });
    }
    let mut out = Vec::with_capacity(x.numel() / c.max(1) * len);
    for px in x.data().chunks(c) {
        out.extend_from_slice(&px[start..start + len]);
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = len;
    Tensor::from_parts(shape, out)
}

/// Concatenation along the trailing axis.
pub fn concat_channels<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (ra, rb) = (a.rank(), b.rank());
    if ra == 0 || ra != rb || a.shape()[..ra - 1] != b.shape()[..rb - 1] {
        return Err(Error::ShapeMismatch {
            op: "concat",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let (ca, cb) = (a.channels(), b.channels());
    let mut out = Vec::with_capacity(a.numel() + b.numel());
    for (pa, pb) in a.data().chunks(ca).zip(b.data().chunks(cb)) {
        out.extend_from_slice(pa);
        out.extend_from_slice(pb);
    }
    let mut shape = a.shape().to_vec();
    *shape.last_mut().unwrap() = ca + cb;
    Tensor::from_parts(shape, out)
}

/// `x[.., c] + b[c]`.
pub fn add_channel<T: Real>(x: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    broadcast_channel("add", x, b, |a, b| a + b)
}

/// `x[.., c] * s[c]`.
pub fn mul_channel<T: Real>(x: &Tensor<T>, s: &Tensor<T>) -> Result<Tensor<T>> {
    broadcast_channel("mul", x, s, |a, b| a * b)
}

fn broadcast_channel<T: Real>(
    op: &'static str,
    x: &Tensor<T>,
    v: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    let c = x.channels();
    if v.shape() != [c] {
        return Err(Error::ShapeMismatch {
            op,
            lhs: x.shape().to_vec(),
            rhs: v.shape().to_vec(),
        });
    }
    let vs = v.data();
    let mut out = Vec::with_capacity(x.numel());
    for px in x.data().chunks(c) {
        out.extend(px.iter().zip(vs).map(|(&a, &b)| f(a, b)));
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

/// Sums a tensor over every axis but the last, giving a `[C]` vector.
pub fn reduce_to_channels<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let c = x.channels();
    let mut out = vec![T::zero(); c];
    for px in x.data().chunks(c) {
        for (o, &v) in out.iter_mut().zip(px) {
            *o = *o + v;
        }
    }
    Tensor::from_parts(vec![c], out).expect("channel reduction shape")
}

/// Per-sample sums over every axis but the first, accumulated in `f64`.
pub fn sum_per_sample<T: Real>(x: &Tensor<T>) -> Vec<f64> {
    let n = x.shape().first().copied().unwrap_or(1).max(1);
    let m = x.numel() / n;
    if m == 0 {
        return vec![0.0; n];
    }
    x.data()
        .chunks(m)
        .map(|c| c.iter().map(|v| v.to_f64().unwrap()).sum())
        .collect()
}

pub fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}
