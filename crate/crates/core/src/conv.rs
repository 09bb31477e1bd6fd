//! Dense 2-D convolution, pooling, and upsampling kernels. The stride-1
//! paths accumulate along contiguous rows so the compiler can vectorize.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub f: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
    pub stride: usize,
    pub padding: usize,
}

pub(crate) fn conv_dims(
    in_shape: &[usize],
    k_shape: &[usize],
    stride: usize,
    padding: usize,
) -> Result<ConvDims> {
    if in_shape.len() != 4 || k_shape.len() != 4 {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            lhs: in_shape.to_vec(),
            rhs: k_shape.to_vec(),
        });
    }
    let (n, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let (f, kc, kh, kw) = (k_shape[0], k_shape[1], k_shape[2], k_shape[3]);
    if kc != c {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            lhs: in_shape.to_vec(),
            rhs: k_shape.to_vec(),
        });
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::Domain {
            op: "conv2d",
            detail: format!("kernel extents must be odd, got {kh}x{kw}"),
        });
    }
    if stride == 0 {
        return Err(Error::Domain {
            op: "conv2d",
            detail: "stride must be positive".into(),
        });
    }
    let span_h = (h + 2 * padding).checked_sub(kh);
    let span_w = (w + 2 * padding).checked_sub(kw);
    let (span_h, span_w) = match (span_h, span_w) {
        (Some(a), Some(b)) => (a, b),
        _ => {
            return Err(Error::Domain {
                op: "conv2d",
                detail: "kernel larger than padded input".into(),
            })
        }
    };
    if span_h % stride != 0 || span_w % stride != 0 {
        return Err(Error::Domain {
            op: "conv2d",
            detail: "output extent is not integral for this stride".into(),
        });
    }
    Ok(ConvDims {
        n,
        c,
        h,
        w,
        f,
        kh,
        kw,
        oh: span_h / stride + 1,
        ow: span_w / stride + 1,
        stride,
        padding,
    })
}

/// Half-open column range [x0, x1) of output positions whose input column
/// ox + kx - padding stays inside [0, w). Stride-1 only.
#[inline]
fn col_range(kx: usize, padding: usize, w: usize, ow: usize) -> (usize, usize) {
    let x0 = padding.saturating_sub(kx);
    let x1 = ow.min((w + padding).saturating_sub(kx));
    (x0, x1.max(x0))
}

pub(crate) fn conv2d_forward(input: &[f64], kernel: &[f64], d: &ConvDims) -> Vec<f64> {
    let mut out = vec![0.0; d.n * d.f * d.oh * d.ow];
    if d.stride == 1 {
        for n in 0..d.n {
            for f in 0..d.f {
                for c in 0..d.c {
                    for ky in 0..d.kh {
                        for kx in 0..d.kw {
                            let w = kernel[((f * d.c + c) * d.kh + ky) * d.kw + kx];
                            let (x0, x1) = col_range(kx, d.padding, d.w, d.ow);
                            if x1 == x0 {
                                continue;
                            }
                            for oy in 0..d.oh {
                                let iy = (oy + ky) as isize - d.padding as isize;
                                if iy < 0 || iy as usize >= d.h {
                                    continue;
                                }
                                let ob = ((n * d.f + f) * d.oh + oy) * d.ow;
                                let ibase =
                                    ((n * d.c + c) * d.h + iy as usize) * d.w + (x0 + kx) - d.padding;
                                let orow = &mut out[ob + x0..ob + x1];
                                let irow = &input[ibase..ibase + (x1 - x0)];
                                for (o, i) in orow.iter_mut().zip(irow) {
                                    *o += w * *i;
                                }
                            }
                        }
                    }
                }
            }
        }
    } else {
        for n in 0..d.n {
            for f in 0..d.f {
                for oy in 0..d.oh {
                    for ox in 0..d.ow {
                        let mut acc = 0.0;
                        for c in 0..d.c {
                            for ky in 0..d.kh {
                                let iy = (oy * d.stride + ky) as isize - d.padding as isize;
                                if iy < 0 || iy as usize >= d.h {
                                    continue;
                                }
                                for kx in 0..d.kw {
                                    let ix = (ox * d.stride + kx) as isize - d.padding as isize;
                                    if ix < 0 || ix as usize >= d.w {
                                        continue;
                                    }
                                    acc += input
                                        [((n * d.c + c) * d.h + iy as usize) * d.w + ix as usize]
                                        * kernel[((f * d.c + c) * d.kh + ky) * d.kw + kx];
                                }
                            }
                        }
                        out[((n * d.f + f) * d.oh + oy) * d.ow + ox] = acc;
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn conv2d_backward_input(upstream: &[f64], kernel: &[f64], d: &ConvDims) -> Vec<f64> {
    let mut din = vec![0.0; d.n * d.c * d.h * d.w];
    if d.stride == 1 {
        for n in 0..d.n {
            for f in 0..d.f {
                for c in 0..d.c {
                    for ky in 0..d.kh {
                        for kx in 0..d.kw {
                            let w = kernel[((f * d.c + c) * d.kh + ky) * d.kw + kx];
                            let (x0, x1) = col_range(kx, d.padding, d.w, d.ow);
                            if x1 == x0 {
                                continue;
                            }
                            for oy in 0..d.oh {
                                let iy = (oy + ky) as isize - d.padding as isize;
                                if iy < 0 || iy as usize >= d.h {
                                    continue;
                                }
                                let ob = ((n * d.f + f) * d.oh + oy) * d.ow;
                                let ibase =
                                    ((n * d.c + c) * d.h + iy as usize) * d.w + (x0 + kx) - d.padding;
                                let irow = &mut din[ibase..ibase + (x1 - x0)];
                                let urow = &upstream[ob + x0..ob + x1];
                                for (i, u) in irow.iter_mut().zip(urow) {
                                    *i += w * *u;
                                }
                            }
                        }
                    }
                }
            }
        }
    } else {
        for n in 0..d.n {
            for f in 0..d.f {
                for oy in 0..d.oh {
                    for ox in 0..d.ow {
                        let u = upstream[((n * d.f + f) * d.oh + oy) * d.ow + ox];
                        for c in 0..d.c {
                            for ky in 0..d.kh {
                                let iy = (oy * d.stride + ky) as isize - d.padding as isize;
                                if iy < 0 || iy as usize >= d.h {
                                    continue;
                                }
                                for kx in 0..d.kw {
                                    let ix = (ox * d.stride + kx) as isize - d.padding as isize;
                                    if ix < 0 || ix as usize >= d.w {
                                        continue;
                                    }
                                    din[((n * d.c + c) * d.h + iy as usize) * d.w + ix as usize] +=
                                        u * kernel[((f * d.c + c) * d.kh + ky) * d.kw + kx];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    din
}

pub(crate) fn conv2d_backward_kernel(upstream: &[f64], input: &[f64], d: &ConvDims) -> Vec<f64> {
    let mut dk = vec![0.0; d.f * d.c * d.kh * d.kw];
    if d.stride == 1 {
        for f in 0..d.f {
            for c in 0..d.c {
                for ky in 0..d.kh {
                    for kx in 0..d.kw {
                        let (x0, x1) = col_range(kx, d.padding, d.w, d.ow);
                        if x1 == x0 {
                            continue;
                        }
                        let mut acc = 0.0;
                        for n in 0..d.n {
                            for oy in 0..d.oh {
                                let iy = (oy + ky) as isize - d.padding as isize;
                                if iy < 0 || iy as usize >= d.h {
                                    continue;
                                }
                                let ob = ((n * d.f + f) * d.oh + oy) * d.ow;
                                let ibase =
                                    ((n * d.c + c) * d.h + iy as usize) * d.w + (x0 + kx) - d.padding;
                                acc += dot(
                                    &input[ibase..ibase + (x1 - x0)],
                                    &upstream[ob + x0..ob + x1],
                                );
                            }
                        }
                        dk[((f * d.c + c) * d.kh + ky) * d.kw + kx] = acc;
                    }
                }
            }
        }
    } else {
        for n in 0..d.n {
            for f in 0..d.f {
                for oy in 0..d.oh {
                    for ox in 0..d.ow {
                        let u = upstream[((n * d.f + f) * d.oh + oy) * d.ow + ox];
                        for c in 0..d.c {
                            for ky in 0..d.kh {
                                let iy = (oy * d.stride + ky) as isize - d.padding as isize;
                                if iy < 0 || iy as usize >= d.h {
                                    continue;
                                }
                                for kx in 0..d.kw {
                                    let ix = (ox * d.stride + kx) as isize - d.padding as isize;
                                    if ix < 0 || ix as usize >= d.w {
                                        continue;
                                    }
                                    dk[((f * d.c + c) * d.kh + ky) * d.kw + kx] += u
                                        * input
                                            [((n * d.c + c) * d.h + iy as usize) * d.w + ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    dk
}

/// Four-lane dot product; independent accumulators let the loop vectorize.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let (x, y) = (&a[i * 4..i * 4 + 4], &b[i * 4..i * 4 + 4]);
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// 2x2 max pooling over the trailing two axes; ties go to the first
/// candidate in row-major order. Returns values, argmax flat indices into
/// the input, and the output shape.
pub(crate) fn maxpool2_forward(
    input: &[f64],
    shape: &[usize],
) -> Result<(Vec<f64>, Vec<usize>, Vec<usize>)> {
    let rank = shape.len();
    if rank < 2 {
        return Err(Error::Domain {
            op: "maxpool2",
            detail: format!("rank {rank} input has no spatial axes"),
        });
    }
    let (h, w) = (shape[rank - 2], shape[rank - 1]);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Domain {
            op: "maxpool2",
            detail: format!("spatial extents {h}x{w} must be even"),
        });
    }
    let planes: usize = shape[..rank - 2].iter().product();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; planes * oh * ow];
    let mut arg = vec![0usize; planes * oh * ow];
    for p in 0..planes {
        let ibase = p * h * w;
        let obase = p * oh * ow;
        for oy in 0..oh {
            for ox in 0..ow {
                let i00 = ibase + (2 * oy) * w + 2 * ox;
                let candidates = [i00, i00 + 1, i00 + w, i00 + w + 1];
                let mut best = candidates[0];
                let mut best_v = input[best];
                for &ci in &candidates[1..] {
                    if input[ci] > best_v {
                        best_v = input[ci];
                        best = ci;
                    }
                }
                out[obase + oy * ow + ox] = best_v;
                arg[obase + oy * ow + ox] = best;
            }
        }
    }
    let mut out_shape = shape.to_vec();
    out_shape[rank - 2] = oh;
    out_shape[rank - 1] = ow;
    Ok((out, arg, out_shape))
}

/// Nearest-neighbor 2x upsampling over the trailing two axes.
pub(crate) fn upsample2_forward(input: &[f64], shape: &[usize]) -> Result<(Vec<f64>, Vec<usize>)> {
    let rank = shape.len();
    if rank < 2 {
        return Err(Error::Domain {
            op: "upsample2",
            detail: format!("rank {rank} input has no spatial axes"),
        });
    }
    let (h, w) = (shape[rank - 2], shape[rank - 1]);
    let planes: usize = shape[..rank - 2].iter().product();
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        let ibase = p * h * w;
        let obase = p * oh * ow;
        for y in 0..oh {
            let irow = ibase + (y / 2) * w;
            let orow = obase + y * ow;
            for x in 0..ow {
                out[orow + x] = input[irow + x / 2];
            }
        }
    }
    let mut out_shape = shape.to_vec();
    out_shape[rank - 2] = oh;
    out_shape[rank - 1] = ow;
    Ok((out, out_shape))
}

pub(crate) fn upsample2_backward(upstream: &[f64], in_shape: &[usize]) -> Vec<f64> {
    let rank = in_shape.len();
    let (h, w) = (in_shape[rank - 2], in_shape[rank - 1]);
    let planes: usize = in_shape[..rank - 2].iter().product();
    let ow = 2 * w;
    let mut din = vec![0.0; planes * h * w];
    for p in 0..planes {
        let ibase = p * h * w;
        let obase = p * 4 * h * w;
        for y in 0..h {
            for x in 0..w {
                let o00 = obase + (2 * y) * ow + 2 * x;
                din[ibase + y * w + x] =
                    upstream[o00] + upstream[o00 + 1] + upstream[o00 + ow] + upstream[o00 + ow + 1];
            }
        }
    }
    din
}
