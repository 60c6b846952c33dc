//! Forward and backward kernels for graph ops.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::Tensor;

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n {
            a[i + a.len() - n]
        } else {
            1
        };
        let db = if i + b.len() >= n {
            b[i + b.len() - n]
        } else {
            1
        };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `src` viewed as broadcast to `target` (0 on broadcast axes).
fn broadcast_strides(src: &[usize], target: &[usize]) -> Option<Vec<usize>> {
    if src.len() > target.len() {
        return None;
    }
    let off = target.len() - src.len();
    let mut strides = vec![0; target.len()];
    let mut acc = 1;
    for i in (0..src.len()).rev() {
        let d = src[i];
        let t = target[i + off];
        if d == t {
            strides[i + off] = if d == 1 { 0 } else { acc };
        } else if d != 1 {
            return None;
        }
        acc *= d;
    }
    Some(strides)
}

/// Walks every index of `shape`, passing the flat output index and the flat
/// index into a source with the given strides.
fn walk(shape: &[usize], strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let n: usize = shape.iter().product();
    if n == 0 {
        return;
    }
    if shape.is_empty() {
        f(0, 0);
        return;
    }
    let nd = shape.len();
    let inner = shape[nd - 1];
    let inner_stride = strides[nd - 1];
    let mut idx = vec![0usize; nd];
    let mut base = 0usize;
    let mut out = 0usize;
    loop {
        for k in 0..inner {
            f(out + k, base + k * inner_stride);
        }
        out += inner;
        // odometer over the leading axes
        let mut d = nd - 1;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            base += strides[d];
            if idx[d] < shape[d] {
                break;
            }
            base -= strides[d] * shape[d];
            idx[d] = 0;
        }
    }
}

pub(crate) fn expand(t: &Tensor, shape: &[usize]) -> Result<Tensor> {
    if t.shape() == shape {
        return Ok(t.clone());
    }
    let strides = broadcast_strides(t.shape(), shape)
        .ok_or_else(|| Error::shape("broadcast", format!("{:?} -> {:?}", t.shape(), shape)))?;
    let n: usize = shape.iter().product();
    let mut out = vec![0.0; n];
    let src = t.data();
    walk(shape, &strides, |o, s| out[o] = src[s]);
    Tensor::new(shape.to_vec(), out)
}

/// Sums `t` down to `shape`, the adjoint of [`expand`].
pub(crate) fn reduce_to(t: &Tensor, shape: &[usize]) -> Result<Tensor> {
    if t.shape() == shape {
        return Ok(t.clone());
    }
    let strides = broadcast_strides(shape, t.shape())
        .ok_or_else(|| Error::shape("reduce", format!("{:?} -> {:?}", t.shape(), shape)))?;
    let n: usize = shape.iter().product();
    let mut out = vec![0.0; n];
    let src = t.data();
    walk(t.shape(), &strides, |o, s| out[s] += src[o]);
    Tensor::new(shape.to_vec(), out)
}

pub(crate) fn binary(
    a: &Tensor,
    b: &Tensor,
    op: &'static str,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    let shape = broadcast_shape(a.shape(), b.shape())
        .ok_or_else(|| Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())))?;
    let ea = expand(a, &shape)?;
    let eb = expand(b, &shape)?;
    ea.zip_map(&eb, f)
}

fn view2(data: &[f64], rows: usize, cols: usize) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((rows, cols), data).expect("view2 shape")
}

fn view2_mut(data: &mut [f64], rows: usize, cols: usize) -> ArrayViewMut2<'_, f64> {
    ArrayViewMut2::from_shape((rows, cols), data).expect("view2_mut shape")
}

pub(crate) fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k, n) = matmul_dims(a, b)?;
    let mut out = vec![0.0; m * n];
    general_mat_mul(
        1.0,
        &view2(a.data(), m, k),
        &view2(b.data(), k, n),
        0.0,
        &mut view2_mut(&mut out, m, n),
    );
    Tensor::new([m, n], out)
}

pub(crate) fn matmul_dims(a: &Tensor, b: &Tensor) -> Result<(usize, usize, usize)> {
    if a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(Error::shape(
            "matmul",
            format!("{:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    Ok((a.shape()[0], a.shape()[1], b.shape()[1]))
}

pub(crate) fn matmul_backward(a: &Tensor, b: &Tensor, g: &Tensor) -> Result<(Tensor, Tensor)> {
    let (m, k, n) = matmul_dims(a, b)?;
    let mut ga = vec![0.0; m * k];
    let mut gb = vec![0.0; k * n];
    let gv = view2(g.data(), m, n);
    general_mat_mul(
        1.0,
        &gv,
        &view2(b.data(), k, n).t(),
        0.0,
        &mut view2_mut(&mut ga, m, k),
    );
    general_mat_mul(
        1.0,
        &view2(a.data(), m, k).t(),
        &gv,
        0.0,
        &mut view2_mut(&mut gb, k, n),
    );
    Ok((Tensor::new([m, k], ga)?, Tensor::new([k, n], gb)?))
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

pub(crate) fn conv_dims(x: &Tensor, w: &Tensor, pad: usize) -> Result<ConvDims> {
    let (xs, ws) = (x.shape(), w.shape());
    if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] || ws[2] != ws[3] {
        return Err(Error::shape(
            "conv2d",
            format!("input {:?}, kernel {:?}", xs, ws),
        ));
    }
    let k = ws[2];
    if xs[2] + 2 * pad < k || xs[3] + 2 * pad < k {
        return Err(Error::shape(
            "conv2d",
            format!("kernel {k} larger than padded input {:?}", xs),
        ));
    }
    Ok(ConvDims {
        batch: xs[0],
        cin: xs[1],
        h: xs[2],
        w: xs[3],
        cout: ws[0],
        k,
        pad,
        ho: xs[2] + 2 * pad - k + 1,
        wo: xs[3] + 2 * pad - k + 1,
    })
}

/// Valid output columns `[lo, hi)` for kernel offset `kx`.
fn valid_range(kx: usize, pad: usize, w: usize, wo: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(kx);
    let hi = (w + pad).saturating_sub(kx).min(wo);
    (lo, hi.max(lo))
}

fn im2col(x: &[f64], d: &ConvDims, col: &mut [f64]) {
    let npix = d.ho * d.wo;
    for ci in 0..d.cin {
        let plane = &x[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for ky in 0..d.k {
            for kx in 0..d.k {
                let row = &mut col[((ci * d.k + ky) * d.k + kx) * npix..][..npix];
                let (lo, hi) = valid_range(kx, d.pad, d.w, d.wo);
                for oy in 0..d.ho {
                    let dst = &mut row[oy * d.wo..(oy + 1) * d.wo];
                    let iy = oy + ky;
                    if iy < d.pad || iy - d.pad >= d.h {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[(iy - d.pad) * d.w..];
                    dst[..lo].fill(0.0);
                    dst[hi..].fill(0.0);
                    for ox in lo..hi {
                        dst[ox] = src[ox + kx - d.pad];
                    }
                }
            }
        }
    }
}

fn col2im(col: &[f64], d: &ConvDims, x: &mut [f64]) {
    let npix = d.ho * d.wo;
    for ci in 0..d.cin {
        let plane = &mut x[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for ky in 0..d.k {
            for kx in 0..d.k {
                let row = &col[((ci * d.k + ky) * d.k + kx) * npix..][..npix];
                let (lo, hi) = valid_range(kx, d.pad, d.w, d.wo);
                for oy in 0..d.ho {
                    let iy = oy + ky;
                    if iy < d.pad || iy - d.pad >= d.h {
                        continue;
                    }
                    let src = &row[oy * d.wo..(oy + 1) * d.wo];
                    let dst = &mut plane[(iy - d.pad) * d.w..];
                    for ox in lo..hi {
                        dst[ox + kx - d.pad] += src[ox];
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation over NCHW input with an OIHW kernel, stride 1.
pub(crate) fn conv2d(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, pad: usize) -> Result<Tensor> {
    let d = conv_dims(x, w, pad)?;
    if let Some(b) = bias {
        if b.shape() != [d.cout] {
            return Err(Error::shape(
                "conv2d",
                format!("bias {:?} for {} channels", b.shape(), d.cout),
            ));
        }
    }
    let rows = d.cin * d.k * d.k;
    let npix = d.ho * d.wo;
    let in_step = d.cin * d.h * d.w;
    let out_step = d.cout * npix;
    let mut out = vec![0.0; d.batch * out_step];
    par::for_each_chunk_mut(&mut out, out_step, |bi, dst| {
        let mut col = vec![0.0; rows * npix];
        im2col(&x.data()[bi * in_step..(bi + 1) * in_step], &d, &mut col);
        if let Some(b) = bias {
            for (co, row) in dst.chunks_mut(npix).enumerate() {
                row.fill(b.data()[co]);
            }
        }
        general_mat_mul(
            1.0,
            &view2(w.data(), d.cout, rows),
            &view2(&col, rows, npix),
            if bias.is_some() { 1.0 } else { 0.0 },
            &mut view2_mut(dst, d.cout, npix),
        );
    });
    Tensor::new([d.batch, d.cout, d.ho, d.wo], out)
}

/// Returns gradients for input, kernel and (optionally) bias.
pub(crate) fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    with_bias: bool,
    pad: usize,
    g: &Tensor,
) -> Result<(Tensor, Tensor, Option<Tensor>)> {
    let d = conv_dims(x, w, pad)?;
    let rows = d.cin * d.k * d.k;
    let npix = d.ho * d.wo;
    let in_step = d.cin * d.h * d.w;
    let out_step = d.cout * npix;
    let per_sample = par::map_range(d.batch, |bi| {
        let xs = &x.data()[bi * in_step..(bi + 1) * in_step];
        let gs = view2(&g.data()[bi * out_step..(bi + 1) * out_step], d.cout, npix);
        let mut col = vec![0.0; rows * npix];
        im2col(xs, &d, &mut col);
        let mut gw = vec![0.0; d.cout * rows];
        general_mat_mul(
            1.0,
            &gs,
            &view2(&col, rows, npix).t(),
            0.0,
            &mut view2_mut(&mut gw, d.cout, rows),
        );
        // reuse the column buffer for the input gradient
        general_mat_mul(
            1.0,
            &view2(w.data(), d.cout, rows).t(),
            &gs,
            0.0,
            &mut view2_mut(&mut col, rows, npix),
        );
        let mut gx = vec![0.0; in_step];
        col2im(&col, &d, &mut gx);
        (gx, gw)
    });
    let mut gx = Vec::with_capacity(d.batch * in_step);
    let mut gw = vec![0.0; d.cout * rows];
    for (gxs, gws) in per_sample {
        gx.extend_from_slice(&gxs);
        for (acc, v) in gw.iter_mut().zip(&gws) {
            *acc += v;
        }
    }
    let gb = with_bias.then(|| {
        let mut gb = vec![0.0; d.cout];
        for bi in 0..d.batch {
            for (co, acc) in gb.iter_mut().enumerate() {
                let s = (bi * d.cout + co) * npix;
                *acc += g.data()[s..s + npix].iter().sum::<f64>();
            }
        }
        Tensor::new([d.cout], gb)
    });
    Ok((
        Tensor::new(x.shape().to_vec(), gx)?,
        Tensor::new(w.shape().to_vec(), gw)?,
        gb.transpose()?,
    ))
}

fn spatial(t: &Tensor, op: &'static str) -> Result<(usize, usize, usize)> {
    let s = t.shape();
    if s.len() < 2 {
        return Err(Error::shape(
            op,
            format!("need at least 2 dims, got {:?}", s),
        ));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    Ok((s[..s.len() - 2].iter().product(), h, w))
}

fn with_spatial(shape: &[usize], h: usize, w: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    let n = s.len();
    s[n - 2] = h;
    s[n - 1] = w;
    s
}

pub(crate) fn pool2(x: &Tensor, max: bool) -> Result<Tensor> {
    let op = if max { "max_pool2" } else { "avg_pool2" };
    let (n, h, w) = spatial(x, op)?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(op, format!("odd spatial size {h}x{w}")));
    }
    let (ho, wo) = (h / 2, w / 2);
    let src = x.data();
    let mut out = vec![0.0; n * ho * wo];
    for p in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                let i = p * h * w + 2 * oy * w + 2 * ox;
                let q = [src[i], src[i + 1], src[i + w], src[i + w + 1]];
                out[(p * ho + oy) * wo + ox] = if max {
                    q.iter().copied().fold(f64::NEG_INFINITY, f64::max)
                } else {
                    0.25 * (q[0] + q[1] + q[2] + q[3])
                };
            }
        }
    }
    Tensor::new(with_spatial(x.shape(), ho, wo), out)
}

pub(crate) fn pool2_backward(x: &Tensor, g: &Tensor, max: bool) -> Result<Tensor> {
    let (n, h, w) = spatial(x, "pool2_backward")?;
    let (ho, wo) = (h / 2, w / 2);
    let src = x.data();
    let gd = g.data();
    let mut out = vec![0.0; x.len()];
    for p in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                let i = p * h * w + 2 * oy * w + 2 * ox;
                let gi = gd[(p * ho + oy) * wo + ox];
                let idx = [i, i + 1, i + w, i + w + 1];
                if max {
                    // first maximum wins on ties
                    let mut best = idx[0];
                    for &j in &idx[1..] {
                        if src[j] > src[best] {
                            best = j;
                        }
                    }
                    out[best] += gi;
                } else {
                    for &j in &idx {
                        out[j] += 0.25 * gi;
                    }
                }
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

pub(crate) fn upsample2(x: &Tensor) -> Result<Tensor> {
    let (n, h, w) = spatial(x, "upsample2")?;
    let (ho, wo) = (2 * h, 2 * w);
    let src = x.data();
    let mut out = vec![0.0; n * ho * wo];
    for p in 0..n {
        for oy in 0..ho {
            let srow = &src[p * h * w + (oy / 2) * w..][..w];
            let drow = &mut out[(p * ho + oy) * wo..][..wo];
            for (ox, v) in drow.iter_mut().enumerate() {
                *v = srow[ox / 2];
            }
        }
    }
    Tensor::new(with_spatial(x.shape(), ho, wo), out)
}

pub(crate) fn upsample2_backward(x: &Tensor, g: &Tensor) -> Result<Tensor> {
    let (n, h, w) = spatial(x, "upsample2_backward")?;
    let (ho, wo) = (2 * h, 2 * w);
    let gd = g.data();
    let mut out = vec![0.0; x.len()];
    for p in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                out[p * h * w + (oy / 2) * w + ox / 2] += gd[(p * ho + oy) * wo + ox];
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// `(outer, axis length, inner)` decomposition around `axis`.
fn around(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    )
}

pub(crate) fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = parts[0].shape();
    if axis >= first.len() {
        return Err(Error::shape(
            "concat",
            format!("axis {axis} for shape {:?}", first),
        ));
    }
    let mut total = 0;
    for p in parts {
        let s = p.shape();
        let same_rest = s.len() == first.len()
            && s.iter()
                .zip(first)
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !same_rest {
            return Err(Error::shape(
                "concat",
                format!("{:?} vs {:?} on axis {axis}", s, first),
            ));
        }
        total += s[axis];
    }
    let (outer, _, inner) = around(first, axis);
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for p in parts {
            let len = p.shape()[axis] * inner;
            out.extend_from_slice(&p.data()[o * len..(o + 1) * len]);
        }
    }
    let mut shape = first.to_vec();
    shape[axis] = total;
    Tensor::new(shape, out)
}

pub(crate) fn slice_axis(x: &Tensor, axis: usize, start: usize, end: usize) -> Result<Tensor> {
    let s = x.shape();
    if axis >= s.len() || start >= end || end > s[axis] {
        return Err(Error::shape(
            "slice",
            format!("{start}..{end} on axis {axis} of {:?}", s),
        ));
    }
    let (outer, len, inner) = around(s, axis);
    let mut out = Vec::with_capacity(outer * (end - start) * inner);
    for o in 0..outer {
        let base = o * len * inner;
        out.extend_from_slice(&x.data()[base + start * inner..base + end * inner]);
    }
    let mut shape = s.to_vec();
    shape[axis] = end - start;
    Tensor::new(shape, out)
}

pub(crate) fn slice_axis_backward(
    shape: &[usize],
    axis: usize,
    start: usize,
    end: usize,
    g: &Tensor,
) -> Result<Tensor> {
    let (outer, len, inner) = around(shape, axis);
    let mut out = vec![0.0; outer * len * inner];
    let span = (end - start) * inner;
    for o in 0..outer {
        let base = o * len * inner + start * inner;
        out[base..base + span].copy_from_slice(&g.data()[o * span..(o + 1) * span]);
    }
    Tensor::new(shape.to_vec(), out)
}

pub(crate) fn channel_bias(x: &Tensor, v: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 4 || v.shape() != [s[0], s[1]] {
        return Err(Error::shape(
            "channel_bias",
            format!("{:?} + {:?}", s, v.shape()),
        ));
    }
    let plane = s[2] * s[3];
    let mut out = x.data().to_vec();
    for (i, chunk) in out.chunks_mut(plane).enumerate() {
        let b = v.data()[i];
        chunk.iter_mut().for_each(|o| *o += b);
    }
    Tensor::new(s.to_vec(), out)
}

pub(crate) fn channel_scale(x: &Tensor, v: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 4 || v.shape() != [s[0], s[1]] {
        return Err(Error::shape(
            "channel_scale",
            format!("{:?} * {:?}", s, v.shape()),
        ));
    }
    let plane = s[2] * s[3];
    let mut out = x.data().to_vec();
    for (i, chunk) in out.chunks_mut(plane).enumerate() {
        let k = v.data()[i];
        chunk.iter_mut().for_each(|o| *o *= k);
    }
    Tensor::new(s.to_vec(), out)
}

pub(crate) fn channel_bias_backward(x: &Tensor, g: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    let plane = s[2] * s[3];
    let sums = g.data().chunks(plane).map(|c| c.iter().sum()).collect();
    Tensor::new([s[0], s[1]], sums)
}
