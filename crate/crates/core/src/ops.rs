//! Numeric kernels over [`Tensor`].
//!
//! Reductions (convolution sums, matmul rows, pooling means, softmax
//! normalizers) accumulate in `f64` and round once to `f32` on store.

use crate::tensor::{ShapeError, Tensor};

/// Output spatial size of a strided window sweep; `None` when the kernel
/// does not fit.
fn window_out(size: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = size + 2 * padding;
    if kernel > padded {
        None
    } else {
        Some((padded - kernel) / stride + 1)
    }
}

/// 2-D cross-correlation. `input` is NCHW, `weight` is OIHW, `bias` has length O.
pub fn conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor, ShapeError> {
    const OP: &str = "conv2d";
    let (n, c, h, w) = input.dims4(OP)?;
    let (o, i, kh, kw) = weight.dims4(OP)?;
    if stride == 0 {
        return Err(ShapeError::NonPositive { op: OP, what: "stride" });
    }
    if c != i {
        return Err(ShapeError::DimMismatch {
            op: OP,
            what: "input channels vs weight in-channels",
            lhs: c,
            rhs: i,
        });
    }
    if bias.len() != o || bias.rank() != 1 {
        return Err(ShapeError::DimMismatch {
            op: OP,
            what: "bias length vs out-channels",
            lhs: bias.len(),
            rhs: o,
        });
    }
    let too_large = || ShapeError::KernelTooLarge {
        op: OP,
        kernel: kh.max(kw),
        height: h,
        width: w,
        padding,
    };
    let oh = window_out(h, kh, stride, padding).ok_or_else(too_large)?;
    let ow = window_out(w, kw, stride, padding).ok_or_else(too_large)?;

    let x = input.data();
    let wt = weight.data();
    let b = bias.data();
    let mut out = vec![0.0f32; n * o * oh * ow];
    let mut acc = vec![0.0f64; oh * ow];
    for batch in 0..n {
        for oc in 0..o {
            acc.fill(f64::from(b[oc]));
            for ic in 0..c {
                let plane = &x[(batch * c + ic) * h * w..][..h * w];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = f64::from(wt[((oc * i + ic) * kh + ky) * kw + kx]);
                        if wv == 0.0 {
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let row = &plane[iy as usize * w..][..w];
                            let acc_row = &mut acc[oy * ow..][..ow];
                            for (ox, a) in acc_row.iter_mut().enumerate() {
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if ix >= 0 && ix < w as isize {
                                    *a += wv * f64::from(row[ix as usize]);
                                }
                            }
                        }
                    }
                }
            }
            let dst = &mut out[(batch * o + oc) * oh * ow..][..oh * ow];
            for (d, &a) in dst.iter_mut().zip(&acc) {
                *d = a as f32;
            }
        }
    }
    Tensor::new(vec![n, o, oh, ow], out)
}

/// Gradient of a conv2d output with respect to its input.
///
/// `grad_out` has the conv output shape; the result has `input_shape`.
pub fn conv2d_input_grad(
    grad_out: &Tensor,
    weight: &Tensor,
    input_shape: &[usize],
    stride: usize,
    padding: usize,
) -> Result<Tensor, ShapeError> {
    const OP: &str = "conv2d_input_grad";
    let (n, o, oh, ow) = grad_out.dims4(OP)?;
    let (wo, i, kh, kw) = weight.dims4(OP)?;
    let &[_, c, h, w] = input_shape else {
        return Err(ShapeError::WrongRank {
            op: OP,
            expected: 4,
            shape: input_shape.to_vec(),
        });
    };
    if wo != o || i != c {
        return Err(ShapeError::ShapeMismatch {
            op: OP,
            lhs: grad_out.shape().to_vec(),
            rhs: weight.shape().to_vec(),
        });
    }
    let g = grad_out.data();
    let wt = weight.data();
    let mut acc = vec![0.0f64; n * c * h * w];
    for batch in 0..n {
        for oc in 0..o {
            let gplane = &g[(batch * o + oc) * oh * ow..][..oh * ow];
            for ic in 0..c {
                let dst = &mut acc[(batch * c + ic) * h * w..][..h * w];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = f64::from(wt[((oc * i + ic) * kh + ky) * kw + kx]);
                        for oy in 0..oh {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for ox in 0..ow {
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if ix >= 0 && ix < w as isize {
                                    dst[iy as usize * w + ix as usize] +=
                                        wv * f64::from(gplane[oy * ow + ox]);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(input_shape.to_vec(), acc.into_iter().map(|v| v as f32).collect())
}

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|x| x.max(0.0))
}

/// Passes `grad_out` where the forward input was strictly positive.
pub fn relu_grad(grad_out: &Tensor, input: &Tensor) -> Result<Tensor, ShapeError> {
    grad_out.zip_with(input, "relu_grad", |g, x| if x > 0.0 { g } else { 0.0 })
}

/// Result of [`maxpool2d`]: pooled values plus, for each output element,
/// the flat index into the input it was taken from.
#[derive(Debug, Clone)]
pub struct MaxPool {
    pub output: Tensor,
    pub argmax: Vec<usize>,
}

/// Windowed max without padding. Ties resolve to the first element in
/// row-major window order.
pub fn maxpool2d(input: &Tensor, kernel: usize, stride: usize) -> Result<MaxPool, ShapeError> {
    const OP: &str = "maxpool2d";
    let (n, c, h, w) = input.dims4(OP)?;
    if kernel == 0 {
        return Err(ShapeError::NonPositive { op: OP, what: "kernel" });
    }
    if stride == 0 {
        return Err(ShapeError::NonPositive { op: OP, what: "stride" });
    }
    let too_large = || ShapeError::KernelTooLarge {
        op: OP,
        kernel,
        height: h,
        width: w,
        padding: 0,
    };
    let oh = window_out(h, kernel, stride, 0).ok_or_else(too_large)?;
    let ow = window_out(w, kernel, stride, 0).ok_or_else(too_large)?;
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * stride * w + ox * stride;
                for ky in 0..kernel {
                    for kx in 0..kernel {
                        let idx = base + (oy * stride + ky) * w + ox * stride + kx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
    }
    Ok(MaxPool {
        output: Tensor::new(vec![n, c, oh, ow], out)?,
        argmax,
    })
}

/// Routes each output gradient to the recorded argmax position.
pub fn maxpool2d_grad(
    grad_out: &Tensor,
    argmax: &[usize],
    input_shape: &[usize],
) -> Result<Tensor, ShapeError> {
    if grad_out.len() != argmax.len() {
        return Err(ShapeError::DimMismatch {
            op: "maxpool2d_grad",
            what: "gradient length vs argmax table",
            lhs: grad_out.len(),
            rhs: argmax.len(),
        });
    }
    let mut acc = vec![0.0f64; input_shape.iter().product()];
    for (&g, &idx) in grad_out.data().iter().zip(argmax) {
        acc[idx] += f64::from(g);
    }
    Tensor::new(input_shape.to_vec(), acc.into_iter().map(|v| v as f32).collect())
}

/// Per-channel spatial mean, NCHW -> NC.
pub fn global_avgpool(input: &Tensor) -> Result<Tensor, ShapeError> {
    let (n, c, h, w) = input.dims4("global_avgpool")?;
    let area = (h * w) as f64;
    let data = input
        .data()
        .chunks(h * w)
        .map(|plane| (plane.iter().map(|&v| f64::from(v)).sum::<f64>() / area) as f32)
        .collect();
    Tensor::new(vec![n, c], data)
}

/// Spreads an NC gradient uniformly over each HxW plane.
pub fn global_avgpool_grad(grad_out: &Tensor, input_shape: &[usize]) -> Result<Tensor, ShapeError> {
    let &[n, c, h, w] = input_shape else {
        return Err(ShapeError::WrongRank {
            op: "global_avgpool_grad",
            expected: 4,
            shape: input_shape.to_vec(),
        });
    };
    if grad_out.len() != n * c {
        return Err(ShapeError::DimMismatch {
            op: "global_avgpool_grad",
            what: "gradient length vs channels",
            lhs: grad_out.len(),
            rhs: n * c,
        });
    }
    let area = (h * w) as f64;
    let mut data = Vec::with_capacity(n * c * h * w);
    for &g in grad_out.data() {
        let v = (f64::from(g) / area) as f32;
        data.extend(std::iter::repeat_n(v, h * w));
    }
    Tensor::new(input_shape.to_vec(), data)
}

/// Affine map `input · weightᵀ + bias` with `input` NxF and `weight` OxF.
pub fn linear(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor, ShapeError> {
    const OP: &str = "linear";
    let (n, f) = input.dims2(OP)?;
    let (o, wf) = weight.dims2(OP)?;
    if f != wf {
        return Err(ShapeError::DimMismatch {
            op: OP,
            what: "input features vs weight features",
            lhs: f,
            rhs: wf,
        });
    }
    if bias.len() != o || bias.rank() != 1 {
        return Err(ShapeError::DimMismatch {
            op: OP,
            what: "bias length vs outputs",
            lhs: bias.len(),
            rhs: o,
        });
    }
    let x = input.data();
    let wt = weight.data();
    let mut out = Vec::with_capacity(n * o);
    for row in x.chunks(f) {
        for (oc, wrow) in wt.chunks(f).enumerate() {
            let dot: f64 = row
                .iter()
                .zip(wrow)
                .map(|(&a, &b)| f64::from(a) * f64::from(b))
                .sum();
            out.push((dot + f64::from(bias.data()[oc])) as f32);
        }
    }
    Tensor::new(vec![n, o], out)
}

/// Gradient of a linear layer output with respect to its NxF input.
pub fn linear_input_grad(grad_out: &Tensor, weight: &Tensor) -> Result<Tensor, ShapeError> {
    let (n, o) = grad_out.dims2("linear_input_grad")?;
    let (wo, f) = weight.dims2("linear_input_grad")?;
    if wo != o {
        return Err(ShapeError::DimMismatch {
            op: "linear_input_grad",
            what: "gradient outputs vs weight outputs",
            lhs: o,
            rhs: wo,
        });
    }
    let wt = weight.data();
    let mut out = Vec::with_capacity(n * f);
    for grow in grad_out.data().chunks(o) {
        for j in 0..f {
            let s: f64 = grow
                .iter()
                .enumerate()
                .map(|(oc, &g)| f64::from(g) * f64::from(wt[oc * f + j]))
                .sum();
            out.push(s as f32);
        }
    }
    Tensor::new(vec![n, f], out)
}

/// Row-wise softmax over an NxC tensor, max-subtracted.
pub fn softmax(input: &Tensor) -> Result<Tensor, ShapeError> {
    let (n, c) = input.dims2("softmax")?;
    let mut out = Vec::with_capacity(n * c);
    for row in input.data().chunks(c) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let exps: Vec<f64> = row
            .iter()
            .map(|&v| (f64::from(v) - f64::from(max)).exp())
            .collect();
        let sum: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| (e / sum) as f32));
    }
    Tensor::new(vec![n, c], out)
}

/// Bilinear resize of every plane of an NCHW tensor to `out_h x out_w`.
///
/// Uses half-pixel centers (`align_corners = false`): output pixel `y` samples
/// source coordinate `(y + 0.5) * h / out_h - 0.5`, clamped to the valid range.
/// No antialiasing is applied when shrinking.
pub fn upsample_bilinear(input: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor, ShapeError> {
    const OP: &str = "upsample_bilinear";
    let (n, c, h, w) = input.dims4(OP)?;
    if out_h == 0 || out_w == 0 {
        return Err(ShapeError::NonPositive {
            op: OP,
            what: "output size",
        });
    }
    if out_h == h && out_w == w {
        return Ok(input.clone());
    }
    let ys = axis_taps(h, out_h);
    let xs = axis_taps(w, out_w);
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * out_h * out_w);
    for plane in x.chunks(h * w) {
        for &(y0, y1, wy) in &ys {
            let r0 = &plane[y0 * w..][..w];
            let r1 = &plane[y1 * w..][..w];
            for &(x0, x1, wx) in &xs {
                let top = f64::from(r0[x0]) * (1.0 - wx) + f64::from(r0[x1]) * wx;
                let bot = f64::from(r1[x0]) * (1.0 - wx) + f64::from(r1[x1]) * wx;
                out.push((top * (1.0 - wy) + bot * wy) as f32);
            }
        }
    }
    Tensor::new(vec![n, c, out_h, out_w], out)
}

fn axis_taps(size: usize, out: usize) -> Vec<(usize, usize, f64)> {
    let scale = size as f64 / out as f64;
    (0..out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(size - 1);
            let i1 = (i0 + 1).min(size - 1);
            let frac = if i0 == i1 { 0.0 } else { src - i0 as f64 };
            (i0, i1, frac)
        })
        .collect()
}
