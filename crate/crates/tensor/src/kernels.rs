//! Raw forward/backward kernels. The tape wraps these; they are also usable
//! directly on plain tensors.

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

pub(crate) struct ConvDims {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    f: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

pub(crate) fn conv_dims(x: &[usize], k: &[usize], stride: usize, pad: usize) -> Result<ConvDims> {
    if x.len() != 4 || k.len() != 4 {
        return Err(TensorError::Shape(format!(
            "conv2d expects [N,C,H,W] input and [F,C,k,k] kernel, got {x:?} and {k:?}"
        )));
    }
    if x[1] != k[1] {
        return Err(TensorError::Shape(format!(
            "conv2d channel mismatch: input has {} channels, kernel expects {}",
            x[1], k[1]
        )));
    }
    if k[2] % 2 == 0 || k[3] % 2 == 0 {
        return Err(TensorError::Contract(format!("conv2d kernel extents must be odd, got {k:?}")));
    }
    if stride == 0 {
        return Err(TensorError::Contract("conv2d stride must be positive".into()));
    }
    let (h, w) = (x[2], x[3]);
    if h + 2 * pad < k[2] || w + 2 * pad < k[3] {
        return Err(TensorError::Shape(format!("kernel {k:?} larger than padded input {x:?}")));
    }
    Ok(ConvDims {
        n: x[0],
        c: x[1],
        h,
        w,
        f: k[0],
        kh: k[2],
        kw: k[3],
        ho: (h + 2 * pad - k[2]) / stride + 1,
        wo: (w + 2 * pad - k[3]) / stride + 1,
        stride,
        pad,
    })
}

/// Output positions `o` with `0 <= o*stride + tap - pad < extent`.
#[inline]
fn valid_range(out_extent: usize, extent: usize, tap: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if tap >= pad { 0 } else { (pad - tap).div_ceil(stride) };
    let top = extent as isize - 1 + pad as isize - tap as isize;
    if top < 0 {
        return (0, 0);
    }
    let hi = (top as usize / stride + 1).min(out_extent);
    (lo.min(hi), hi)
}

/// 2-D cross-correlation, NCHW layout, no bias.
pub fn conv2d(x: &Tensor, k: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let d = conv_dims(x.shape(), k.shape(), stride, pad)?;
    let mut out = vec![0.0; d.n * d.f * d.ho * d.wo];
    let xd = x.data();
    let kd = k.data();
    for n in 0..d.n {
        for f in 0..d.f {
            let plane = &mut out[(n * d.f + f) * d.ho * d.wo..][..d.ho * d.wo];
            for c in 0..d.c {
                let xin = &xd[(n * d.c + c) * d.h * d.w..][..d.h * d.w];
                for ky in 0..d.kh {
                    let (ylo, yhi) = valid_range(d.ho, d.h, ky, d.stride, d.pad);
                    for kx in 0..d.kw {
                        let wgt = kd[((f * d.c + c) * d.kh + ky) * d.kw + kx];
                        let (xlo, xhi) = valid_range(d.wo, d.w, kx, d.stride, d.pad);
                        if xlo >= xhi {
                            continue;
                        }
                        let x0 = xlo * d.stride + kx - d.pad;
                        for oy in ylo..yhi {
                            let iy = oy * d.stride + ky - d.pad;
                            let row = &xin[iy * d.w..][..d.w];
                            let orow = &mut plane[oy * d.wo + xlo..oy * d.wo + xhi];
                            if d.stride == 1 {
                                for (o, &v) in orow.iter_mut().zip(&row[x0..]) {
                                    *o += wgt * v;
                                }
                            } else {
                                for (o, &v) in orow.iter_mut().zip(row[x0..].iter().step_by(d.stride)) {
                                    *o += wgt * v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![d.n, d.f, d.ho, d.wo], out)
}

/// Gradients of conv2d w.r.t. input (when `want_dx`) and kernel.
pub(crate) fn conv2d_backward(
    x: &Tensor,
    k: &Tensor,
    g: &Tensor,
    stride: usize,
    pad: usize,
    want_dx: bool,
    want_dk: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let d = conv_dims(x.shape(), k.shape(), stride, pad).expect("validated in forward");
    let xd = x.data();
    let kd = k.data();
    let gd = g.data();
    let mut dx = want_dx.then(|| vec![0.0; xd.len()]);
    let mut dk = want_dk.then(|| vec![0.0; kd.len()]);
    for n in 0..d.n {
        for f in 0..d.f {
            let gplane = &gd[(n * d.f + f) * d.ho * d.wo..][..d.ho * d.wo];
            for c in 0..d.c {
                let xoff = (n * d.c + c) * d.h * d.w;
                for ky in 0..d.kh {
                    let (ylo, yhi) = valid_range(d.ho, d.h, ky, d.stride, d.pad);
                    for kx in 0..d.kw {
                        let ki = ((f * d.c + c) * d.kh + ky) * d.kw + kx;
                        let (xlo, xhi) = valid_range(d.wo, d.w, kx, d.stride, d.pad);
                        if xlo >= xhi {
                            continue;
                        }
                        let x0 = xlo * d.stride + kx - d.pad;
                        if let Some(dk) = dk.as_mut() {
                            let mut acc = 0.0;
                            for oy in ylo..yhi {
                                let iy = oy * d.stride + ky - d.pad;
                                let row = &xd[xoff + iy * d.w..][..d.w];
                                let grow = &gplane[oy * d.wo + xlo..oy * d.wo + xhi];
                                if d.stride == 1 {
                                    acc += grow.iter().zip(&row[x0..]).map(|(a, b)| a * b).sum::<f64>();
                                } else {
                                    acc += grow
                                        .iter()
                                        .zip(row[x0..].iter().step_by(d.stride))
                                        .map(|(a, b)| a * b)
                                        .sum::<f64>();
                                }
                            }
                            dk[ki] += acc;
                        }
                        if let Some(dx) = dx.as_mut() {
                            let wgt = kd[ki];
                            for oy in ylo..yhi {
                                let iy = oy * d.stride + ky - d.pad;
                                let row = &mut dx[xoff + iy * d.w..][..d.w];
                                let grow = &gplane[oy * d.wo + xlo..oy * d.wo + xhi];
                                if d.stride == 1 {
                                    for (r, &g) in row[x0..].iter_mut().zip(grow) {
                                        *r += wgt * g;
                                    }
                                } else {
                                    for (r, &g) in row[x0..].iter_mut().step_by(d.stride).zip(grow) {
                                        *r += wgt * g;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (
        dx.map(|v| Tensor::new(x.shape().to_vec(), v).unwrap()),
        dk.map(|v| Tensor::new(k.shape().to_vec(), v).unwrap()),
    )
}

/// Sampling tolerance at the image border, in pixels.
pub const EDGE_TOL: f64 = 1e-9;

struct Tap {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    fx: f64,
    fy: f64,
}

#[inline]
fn tap(x: f64, y: f64, h: usize, w: usize) -> Option<Tap> {
    // NaN fails every comparison and lands out of view. Coordinates within
    // EDGE_TOL of the border snap onto it, so round-off from a projection
    // round trip cannot drop edge pixels.
    let (xmax, ymax) = ((w - 1) as f64, (h - 1) as f64);
    if !(x >= -EDGE_TOL && y >= -EDGE_TOL && x <= xmax + EDGE_TOL && y <= ymax + EDGE_TOL) {
        return None;
    }
    let x = x.clamp(0.0, xmax);
    let y = y.clamp(0.0, ymax);
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    Some(Tap {
        x0,
        y0,
        x1: (x0 + 1).min(w - 1),
        y1: (y0 + 1).min(h - 1),
        fx: x - x0 as f64,
        fy: y - y0 as f64,
    })
}

fn sample_dims(img: &[usize], coords: &[usize]) -> Result<(usize, usize, usize, usize, usize)> {
    if img.len() != 3 || coords.len() != 3 || coords[0] != 2 {
        return Err(TensorError::Shape(format!(
            "bilinear_sample expects [C,H,W] image and [2,H',W'] coords, got {img:?} and {coords:?}"
        )));
    }
    if img[1] == 0 || img[2] == 0 {
        return Err(TensorError::Shape("bilinear_sample on empty image".into()));
    }
    Ok((img[0], img[1], img[2], coords[1], coords[2]))
}

/// Bilinear sampling of `img` ([C,H,W]) at continuous pixel coordinates
/// `coords` ([2,H',W'], channel 0 = column, channel 1 = row). Integer
/// coordinates address pixel centers. Coordinates outside `[0, W-1] x [0, H-1]`
/// produce 0; the returned `[1,H',W']` mask is 1 where the sample was in view.
pub fn bilinear_sample(img: &Tensor, coords: &Tensor) -> Result<(Tensor, Tensor)> {
    let (c, h, w, ho, wo) = sample_dims(img.shape(), coords.shape())?;
    let np = ho * wo;
    let id = img.data();
    let cd = coords.data();
    let mut out = vec![0.0; c * np];
    let mut mask = vec![0.0; np];
    for p in 0..np {
        let Some(t) = tap(cd[p], cd[np + p], h, w) else {
            continue;
        };
        mask[p] = 1.0;
        let (w00, w01) = ((1.0 - t.fx) * (1.0 - t.fy), t.fx * (1.0 - t.fy));
        let (w10, w11) = ((1.0 - t.fx) * t.fy, t.fx * t.fy);
        for ch in 0..c {
            let plane = &id[ch * h * w..][..h * w];
            out[ch * np + p] = w00 * plane[t.y0 * w + t.x0]
                + w01 * plane[t.y0 * w + t.x1]
                + w10 * plane[t.y1 * w + t.x0]
                + w11 * plane[t.y1 * w + t.x1];
        }
    }
    Ok((
        Tensor::new(vec![c, ho, wo], out)?,
        Tensor::new(vec![1, ho, wo], mask)?,
    ))
}

pub(crate) fn bilinear_sample_backward(
    img: &Tensor,
    coords: &Tensor,
    g: &Tensor,
    want_dimg: bool,
    want_dcoords: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let (c, h, w, ho, wo) = sample_dims(img.shape(), coords.shape()).expect("validated in forward");
    let np = ho * wo;
    let id = img.data();
    let cd = coords.data();
    let gd = g.data();
    let mut dimg = want_dimg.then(|| vec![0.0; id.len()]);
    let mut dcoords = want_dcoords.then(|| vec![0.0; cd.len()]);
    for p in 0..np {
        let Some(t) = tap(cd[p], cd[np + p], h, w) else {
            continue;
        };
        let (mut gx, mut gy) = (0.0, 0.0);
        for ch in 0..c {
            let gv = gd[ch * np + p];
            if gv == 0.0 {
                continue;
            }
            let base = ch * h * w;
            let (i00, i01) = (base + t.y0 * w + t.x0, base + t.y0 * w + t.x1);
            let (i10, i11) = (base + t.y1 * w + t.x0, base + t.y1 * w + t.x1);
            if let Some(di) = dimg.as_mut() {
                di[i00] += gv * (1.0 - t.fx) * (1.0 - t.fy);
                di[i01] += gv * t.fx * (1.0 - t.fy);
                di[i10] += gv * (1.0 - t.fx) * t.fy;
                di[i11] += gv * t.fx * t.fy;
            }
            if dcoords.is_some() {
                gx += gv * ((1.0 - t.fy) * (id[i01] - id[i00]) + t.fy * (id[i11] - id[i10]));
                gy += gv * ((1.0 - t.fx) * (id[i10] - id[i00]) + t.fx * (id[i11] - id[i01]));
            }
        }
        if let Some(dc) = dcoords.as_mut() {
            dc[p] += gx;
            dc[np + p] += gy;
        }
    }
    (
        dimg.map(|v| Tensor::new(img.shape().to_vec(), v).unwrap()),
        dcoords.map(|v| Tensor::new(coords.shape().to_vec(), v).unwrap()),
    )
}

fn plane_dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(TensorError::Shape(format!("expected at least 2 axes, got {shape:?}")));
    }
    let h = shape[shape.len() - 2];
    let w = shape[shape.len() - 1];
    let planes = shape[..shape.len() - 2].iter().product();
    Ok((planes, h, w))
}

/// Nearest-neighbour 2x upsampling of the two trailing axes.
pub(crate) fn upsample2x(x: &Tensor) -> Result<Tensor> {
    let (planes, h, w) = plane_dims(x.shape())?;
    let (h2, w2) = (2 * h, 2 * w);
    let xd = x.data();
    let mut out = vec![0.0; planes * h2 * w2];
    for p in 0..planes {
        for y in 0..h2 {
            let src = &xd[(p * h + y / 2) * w..][..w];
            let dst = &mut out[(p * h2 + y) * w2..][..w2];
            for (xo, v) in dst.iter_mut().enumerate() {
                *v = src[xo / 2];
            }
        }
    }
    let mut shape = x.shape().to_vec();
    let r = shape.len();
    shape[r - 2] = h2;
    shape[r - 1] = w2;
    Tensor::new(shape, out)
}

pub(crate) fn upsample2x_backward(in_shape: &[usize], g: &Tensor) -> Tensor {
    let (planes, h, w) = plane_dims(in_shape).expect("validated in forward");
    let (h2, w2) = (2 * h, 2 * w);
    let gd = g.data();
    let mut out = vec![0.0; planes * h * w];
    for p in 0..planes {
        for y in 0..h2 {
            let src = &gd[(p * h2 + y) * w2..][..w2];
            let dst = &mut out[(p * h + y / 2) * w..][..w];
            for (xo, v) in src.iter().enumerate() {
                dst[xo / 2] += v;
            }
        }
    }
    Tensor::new(in_shape.to_vec(), out).unwrap()
}

#[inline]
fn reflect(i: isize, n: usize) -> usize {
    if i < 0 {
        (-i) as usize
    } else if i as usize >= n {
        2 * (n - 1) - i as usize
    } else {
        i as usize
    }
}

/// 3x3 mean filter with reflection padding of one pixel, over the trailing two axes.
pub(crate) fn avg_pool3x3(x: &Tensor) -> Result<Tensor> {
    let (planes, h, w) = plane_dims(x.shape())?;
    if h < 2 || w < 2 {
        return Err(TensorError::Shape(format!("avg_pool3x3 needs H,W >= 2, got {:?}", x.shape())));
    }
    let xd = x.data();
    let mut out = vec![0.0; xd.len()];
    for p in 0..planes {
        let src = &xd[p * h * w..][..h * w];
        let dst = &mut out[p * h * w..][..h * w];
        for y in 0..h {
            for xx in 0..w {
                let mut acc = 0.0;
                for dy in -1..=1isize {
                    let yy = reflect(y as isize + dy, h);
                    for dx in -1..=1isize {
                        acc += src[yy * w + reflect(xx as isize + dx, w)];
                    }
                }
                dst[y * w + xx] = acc / 9.0;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

pub(crate) fn avg_pool3x3_backward(g: &Tensor) -> Tensor {
    let (planes, h, w) = plane_dims(g.shape()).expect("validated in forward");
    let gd = g.data();
    let mut out = vec![0.0; gd.len()];
    for p in 0..planes {
        let src = &gd[p * h * w..][..h * w];
        let dst = &mut out[p * h * w..][..h * w];
        for y in 0..h {
            for xx in 0..w {
                let gv = src[y * w + xx] / 9.0;
                for dy in -1..=1isize {
                    let yy = reflect(y as isize + dy, h);
                    for dx in -1..=1isize {
                        dst[yy * w + reflect(xx as isize + dx, w)] += gv;
                    }
                }
            }
        }
    }
    Tensor::new(g.shape().to_vec(), out).unwrap()
}
