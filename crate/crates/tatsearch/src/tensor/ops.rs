//! Forward and backward implementations of the op set.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Zero-pads a [C,H,W] tensor by `pad` on both spatial sides.
fn pad_input(input: &Tensor, pad: usize) -> (Vec<f64>, usize, usize) {
    let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let mut out = vec![0.0; c * ph * pw];
    let src = input.data();
    for ci in 0..c {
        for y in 0..h {
            let srow = ci * h * w + y * w;
            let drow = ci * ph * pw + (y + pad) * pw + pad;
            out[drow..drow + w].copy_from_slice(&src[srow..srow + w]);
        }
    }
    (out, ph, pw)
}

/// 2-D cross-correlation of a [C,H,W] input with an [F,C,kh,kw] kernel.
///
/// Output is [F,H',W'] with H' = (H + 2*pad - kh)/stride + 1 (floored).
pub fn conv2d(input: &Tensor, kernel: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let (c, h, w) = input.dims3()?;
    let (f, kc, kh, kw) = kernel.dims4()?;
    if kc != c {
        return Err(Error::Dimension(format!(
            "conv2d channel mismatch: input has {c} channels, kernel expects {kc}"
        )));
    }
    if stride == 0 {
        return Err(Error::Dimension("conv2d stride must be positive".into()));
    }
    if kh > h + 2 * pad || kw > w + 2 * pad {
        return Err(Error::Dimension(format!(
            "conv2d kernel {kh}x{kw} exceeds padded input {}x{}",
            h + 2 * pad,
            w + 2 * pad
        )));
    }
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;

    let (padded, _ph, pw) = pad_input(input, pad);
    let kdat = kernel.data();
    let mut out = vec![0.0; f * oh * ow];

    for fi in 0..f {
        let obase = fi * oh * ow;
        for ci in 0..c {
            let pbase = ci * (h + 2 * pad) * pw;
            for ky in 0..kh {
                for kx in 0..kw {
                    let kval = kdat[((fi * c + ci) * kh + ky) * kw + kx];
                    if kval == 0.0 {
                        continue;
                    }
                    for oy in 0..oh {
                        let irow = pbase + (oy * stride + ky) * pw + kx;
                        let orow = obase + oy * ow;
                        if stride == 1 {
                            let src = &padded[irow..irow + ow];
                            let dst = &mut out[orow..orow + ow];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += kval * s;
                            }
                        } else {
                            for ox in 0..ow {
                                out[orow + ox] += kval * padded[irow + ox * stride];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![f, oh, ow], out)
}

/// Gradients of [`conv2d`] w.r.t. its input and kernel.
pub fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    stride: usize,
    pad: usize,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let (c, h, w) = input.dims3()?;
    let (f, _kc, kh, kw) = kernel.dims4()?;
    let (gf, oh, ow) = grad_out.dims3()?;
    if gf != f {
        return Err(Error::Dimension(format!(
            "conv2d_backward: grad has {gf} channels, kernel has {f} filters"
        )));
    }

    let (padded, ph, pw) = pad_input(input, pad);
    let kdat = kernel.data();
    let gdat = grad_out.data();

    let mut dkernel = vec![0.0; kernel.len()];
    let mut dpadded = vec![0.0; padded.len()];

    for fi in 0..f {
        let gbase = fi * oh * ow;
        for ci in 0..c {
            let pbase = ci * ph * pw;
            for ky in 0..kh {
                for kx in 0..kw {
                    let kidx = ((fi * c + ci) * kh + ky) * kw + kx;
                    let kval = kdat[kidx];
                    let mut ksum = 0.0;
                    for oy in 0..oh {
                        let irow = pbase + (oy * stride + ky) * pw + kx;
                        let grow = gbase + oy * ow;
                        if stride == 1 {
                            let g = &gdat[grow..grow + ow];
                            let src = &padded[irow..irow + ow];
                            let dst = &mut dpadded[irow..irow + ow];
                            for ((gv, sv), dv) in g.iter().zip(src).zip(dst) {
                                ksum += gv * sv;
                                *dv += kval * gv;
                            }
                        } else {
                            for ox in 0..ow {
                                let gv = gdat[grow + ox];
                                ksum += gv * padded[irow + ox * stride];
                                dpadded[irow + ox * stride] += kval * gv;
                            }
                        }
                    }
                    dkernel[kidx] += ksum;
                }
            }
        }
    }

    // Strip padding back off the input gradient.
    let mut dinput = vec![0.0; c * h * w];
    for ci in 0..c {
        for y in 0..h {
            let srow = ci * ph * pw + (y + pad) * pw + pad;
            let drow = ci * h * w + y * w;
            dinput[drow..drow + w].copy_from_slice(&dpadded[srow..srow + w]);
        }
    }

    Ok((
        Tensor::new(vec![c, h, w], dinput)?,
        Tensor::new(kernel.shape().to_vec(), dkernel)?,
    ))
}

/// Argmax positions (flat input indices) recorded by [`max_pool`].
#[derive(Clone, Debug)]
pub struct PoolCache {
    pub argmax: Vec<usize>,
}

/// 2x2 max pooling. Requires even spatial dims. Ties route to the first
/// occurrence in row-major order.
pub fn max_pool(input: &Tensor) -> Result<(Tensor, PoolCache)> {
    let (c, h, w) = input.dims3()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Dimension(format!("max_pool requires even spatial dims, got {h}x{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let src = input.data();
    let mut out = vec![0.0; c * oh * ow];
    let mut argmax = vec![0usize; c * oh * ow];
    for ci in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let base = ci * h * w + (2 * oy) * w + 2 * ox;
                // Row-major scan keeps the first-max tie rule.
                let cand = [base, base + 1, base + w, base + w + 1];
                let mut best = cand[0];
                for &i in &cand[1..] {
                    if src[i] > src[best] {
                        best = i;
                    }
                }
                let oidx = ci * oh * ow + oy * ow + ox;
                out[oidx] = src[best];
                argmax[oidx] = best;
            }
        }
    }
    Ok((Tensor::new(vec![c, oh, ow], out)?, PoolCache { argmax }))
}

pub fn max_pool_backward(cache: &PoolCache, input_shape: &[usize], grad_out: &Tensor) -> Tensor {
    let mut dinput = Tensor::zeros(input_shape);
    let dst = dinput.data_mut();
    for (g, &i) in grad_out.data().iter().zip(&cache.argmax) {
        dst[i] += g;
    }
    dinput
}

/// W*x + b for x: [n], W: [m,n], b: [m].
pub fn fully_connected(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let n = x.len();
    let (m, wn) = match w.shape()[..] {
        [m, wn] => (m, wn),
        _ => return Err(Error::Dimension(format!("fully_connected W must be rank 2, got {:?}", w.shape()))),
    };
    if wn != n || b.len() != m {
        return Err(Error::Dimension(format!(
            "fully_connected shapes: x[{n}], W[{m},{wn}], b[{}]",
            b.len()
        )));
    }
    let xd = x.data();
    let wd = w.data();
    let mut out = b.data().to_vec();
    for (i, o) in out.iter_mut().enumerate() {
        let row = &wd[i * n..(i + 1) * n];
        let mut acc = 0.0;
        for (wv, xv) in row.iter().zip(xd) {
            acc += wv * xv;
        }
        *o += acc;
    }
    Tensor::new(vec![m], out)
}

/// Gradients of [`fully_connected`] w.r.t. x, W and b.
pub fn fully_connected_backward(
    x: &Tensor,
    w: &Tensor,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let n = x.len();
    let m = grad_out.len();
    let wd = w.data();
    let xd = x.data();
    let gd = grad_out.data();

    let mut dx = vec![0.0; n];
    let mut dw = vec![0.0; m * n];
    for i in 0..m {
        let g = gd[i];
        let wrow = &wd[i * n..(i + 1) * n];
        let dwrow = &mut dw[i * n..(i + 1) * n];
        for ((dxv, wv), (dwv, xv)) in dx.iter_mut().zip(wrow).zip(dwrow.iter_mut().zip(xd)) {
            *dxv += g * wv;
            *dwv += g * xv;
        }
    }
    Ok((
        Tensor::new(vec![n], dx)?,
        Tensor::new(w.shape().to_vec(), dw)?,
        Tensor::new(vec![m], gd.to_vec())?,
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        // Avoids overflow of exp for large negative inputs.
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn activation(x: &Tensor, kind: Activation) -> Tensor {
    let data = match kind {
        Activation::Relu => x.data().iter().map(|&v| v.max(0.0)).collect(),
        Activation::Sigmoid => x.data().iter().map(|&v| sigmoid_scalar(v)).collect(),
    };
    Tensor { shape: x.shape().to_vec(), data }
}

/// Backward pass given the forward *output* `y`.
pub fn activation_backward(y: &Tensor, kind: Activation, grad_out: &Tensor) -> Tensor {
    let data = match kind {
        Activation::Relu => y
            .data()
            .iter()
            .zip(grad_out.data())
            .map(|(&yv, &g)| if yv > 0.0 { g } else { 0.0 })
            .collect(),
        Activation::Sigmoid => y
            .data()
            .iter()
            .zip(grad_out.data())
            .map(|(&yv, &g)| g * yv * (1.0 - yv))
            .collect(),
    };
    Tensor { shape: y.shape().to_vec(), data }
}
