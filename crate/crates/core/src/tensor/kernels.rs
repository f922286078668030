//! Raw numeric kernels behind the graph operations.
//!
//! These are pure functions over flat row-major buffers. The three convolution
//! kernels form a closed family under differentiation: `conv2d` is bilinear in
//! (input, kernel), `conv2d_grad_input` is its adjoint in the input and
//! `conv2d_grad_kernel` its adjoint in the kernel, which the graph exploits to
//! express every convolution derivative (to any order) in terms of the trio.

use crate::error::{Error, Result};

/// Zero-padding policy for 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Output extent `ceil(in / stride)`; zeros split evenly, extra on the
    /// bottom/right.
    Same,
    /// No padding; output extent `(in - effective_kernel) / stride + 1`.
    Valid,
}

/// Resolved geometry for one convolution: shapes, strides and pad offsets.
#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub cout: usize,
    pub stride: usize,
    pub dilation: usize,
    pub oh: usize,
    pub ow: usize,
    /// Top/left zero-padding, subtracted when mapping output to input coords.
    pub pad_top: isize,
    pub pad_left: isize,
}

impl ConvGeom {
    pub fn resolve(
        in_shape: &[usize],
        k_shape: &[usize],
        stride: usize,
        dilation: usize,
        padding: Padding,
    ) -> Result<ConvGeom> {
        if in_shape.len() != 3 {
            return Err(Error::shape(format!("conv2d input must be [H, W, Cin], got {in_shape:?}")));
        }
        if k_shape.len() != 4 {
            return Err(Error::shape(format!(
                "conv2d kernel must be [KH, KW, Cin, Cout], got {k_shape:?}"
            )));
        }
        if stride == 0 || dilation == 0 {
            return Err(Error::invalid("conv2d stride and dilation must be >= 1".to_string()));
        }
        let (h, w, cin) = (in_shape[0], in_shape[1], in_shape[2]);
        let (kh, kw, kcin, cout) = (k_shape[0], k_shape[1], k_shape[2], k_shape[3]);
        if kcin != cin {
            return Err(Error::shape(format!(
                "conv2d kernel expects {kcin} input channels but input has {cin}"
            )));
        }
        let eff_h = (kh - 1) * dilation + 1;
        let eff_w = (kw - 1) * dilation + 1;
        let (oh, ow, pad_top, pad_left) = match padding {
            Padding::Valid => {
                if h < eff_h || w < eff_w {
                    return Err(Error::shape(format!(
                        "conv2d valid padding: input {h}x{w} smaller than effective kernel {eff_h}x{eff_w}"
                    )));
                }
                ((h - eff_h) / stride + 1, (w - eff_w) / stride + 1, 0isize, 0isize)
            }
            Padding::Same => {
                let oh = h.div_ceil(stride);
                let ow = w.div_ceil(stride);
                let total_h = ((oh - 1) * stride + eff_h).saturating_sub(h);
                let total_w = ((ow - 1) * stride + eff_w).saturating_sub(w);
                (oh, ow, (total_h / 2) as isize, (total_w / 2) as isize)
            }
        };
        Ok(ConvGeom { h, w, cin, kh, kw, cout, stride, dilation, oh, ow, pad_top, pad_left })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.oh, self.ow, self.cout]
    }
}

/// out[oh, ow, co] = sum over (kh, kw, ci) of x[oh*s + kh*d - pt, ow*s + kw*d - pl, ci] * k[kh, kw, ci, co]
pub fn conv2d(x: &[f64], k: &[f64], g: &ConvGeom) -> Vec<f64> {
    let mut out = vec![0.0; g.oh * g.ow * g.cout];
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let out_base = (oy * g.ow + ox) * g.cout;
            for ky in 0..g.kh {
                let iy = (oy * g.stride + ky * g.dilation) as isize - g.pad_top;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kx in 0..g.kw {
                    let ix = (ox * g.stride + kx * g.dilation) as isize - g.pad_left;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let in_base = (iy as usize * g.w + ix as usize) * g.cin;
                    let k_base = (ky * g.kw + kx) * g.cin * g.cout;
                    for ci in 0..g.cin {
                        let xv = x[in_base + ci];
                        if xv == 0.0 {
                            continue;
                        }
                        let krow = k_base + ci * g.cout;
                        for co in 0..g.cout {
                            out[out_base + co] += xv * k[krow + co];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`conv2d`] in the input: scatters `gout` (shaped like the conv
/// output) through the kernel back onto the input grid.
pub fn conv2d_grad_input(gout: &[f64], k: &[f64], g: &ConvGeom) -> Vec<f64> {
    let mut dx = vec![0.0; g.h * g.w * g.cin];
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let out_base = (oy * g.ow + ox) * g.cout;
            for ky in 0..g.kh {
                let iy = (oy * g.stride + ky * g.dilation) as isize - g.pad_top;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kx in 0..g.kw {
                    let ix = (ox * g.stride + kx * g.dilation) as isize - g.pad_left;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let in_base = (iy as usize * g.w + ix as usize) * g.cin;
                    let k_base = (ky * g.kw + kx) * g.cin * g.cout;
                    for ci in 0..g.cin {
                        let krow = k_base + ci * g.cout;
                        let mut acc = 0.0;
                        for co in 0..g.cout {
                            acc += gout[out_base + co] * k[krow + co];
                        }
                        dx[in_base + ci] += acc;
                    }
                }
            }
        }
    }
    dx
}

/// Adjoint of [`conv2d`] in the kernel.
pub fn conv2d_grad_kernel(x: &[f64], gout: &[f64], g: &ConvGeom) -> Vec<f64> {
    let mut dk = vec![0.0; g.kh * g.kw * g.cin * g.cout];
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let out_base = (oy * g.ow + ox) * g.cout;
            for ky in 0..g.kh {
                let iy = (oy * g.stride + ky * g.dilation) as isize - g.pad_top;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kx in 0..g.kw {
                    let ix = (ox * g.stride + kx * g.dilation) as isize - g.pad_left;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let in_base = (iy as usize * g.w + ix as usize) * g.cin;
                    let k_base = (ky * g.kw + kx) * g.cin * g.cout;
                    for ci in 0..g.cin {
                        let xv = x[in_base + ci];
                        if xv == 0.0 {
                            continue;
                        }
                        let krow = k_base + ci * g.cout;
                        for co in 0..g.cout {
                            dk[krow + co] += xv * gout[out_base + co];
                        }
                    }
                }
            }
        }
    }
    dk
}

/// `a [m, p] x b [p, n] -> [m, n]`
pub fn matmul(a: &[f64], b: &[f64], m: usize, p: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * p..(i + 1) * p];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

pub fn transpose2d(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Splits a shape at `axis` into (outer, len, inner) products for lane-wise
/// reductions and normalizations.
pub fn lanes(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

/// Shifted softmax along `axis`: exp(v - max) / sum(exp(v - max)).
pub fn softmax(x: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, len, inner) = lanes(shape, axis);
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * len + j) * inner + i;
            let mut mx = f64::NEG_INFINITY;
            for j in 0..len {
                mx = mx.max(x[at(j)]);
            }
            let mut sum = 0.0;
            for j in 0..len {
                let e = (x[at(j)] - mx).exp();
                out[at(j)] = e;
                sum += e;
            }
            for j in 0..len {
                out[at(j)] /= sum;
            }
        }
    }
    out
}

pub fn sum_axis(x: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, len, inner) = lanes(shape, axis);
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        for j in 0..len {
            let base = (o * len + j) * inner;
            let obase = o * inner;
            for i in 0..inner {
                out[obase + i] += x[base + i];
            }
        }
    }
    out
}

/// Expands `x` to `to`, aligning trailing axes; axes of extent 1 repeat.
pub fn broadcast_to(x: &[f64], from: &[usize], to: &[usize]) -> Vec<f64> {
    let numel: usize = to.iter().product();
    let mut out = vec![0.0; numel];
    let rank = to.len();
    let offset = rank - from.len();
    // Strides into the source, with broadcast axes pinned at stride 0.
    let mut src_strides = vec![0isize; rank];
    let mut acc = 1isize;
    for a in (0..from.len()).rev() {
        src_strides[offset + a] = if from[a] == 1 { 0 } else { acc };
        acc *= from[a] as isize;
    }
    let mut idx = vec![0usize; rank];
    for (flat, slot) in out.iter_mut().enumerate() {
        let mut src = 0isize;
        for a in 0..rank {
            src += idx[a] as isize * src_strides[a];
        }
        *slot = x[src as usize];
        // Advance the multi-index odometer-style.
        if flat + 1 < numel {
            for a in (0..rank).rev() {
                idx[a] += 1;
                if idx[a] < to[a] {
                    break;
                }
                idx[a] = 0;
            }
        }
    }
    out
}

/// Per-output-pixel source rows/cols and interpolation weights for bilinear
/// resampling with the half-pixel-center convention.
fn bilinear_taps(out_len: usize, in_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

pub fn upsample_bilinear(x: &[f64], h: usize, w: usize, c: usize, oh: usize, ow: usize) -> Vec<f64> {
    let ty = bilinear_taps(oh, h);
    let tx = bilinear_taps(ow, w);
    let mut out = vec![0.0; oh * ow * c];
    for oy in 0..oh {
        let (y0, y1, fy) = ty[oy];
        for ox in 0..ow {
            let (x0, x1, fx) = tx[ox];
            let b00 = (y0 * w + x0) * c;
            let b01 = (y0 * w + x1) * c;
            let b10 = (y1 * w + x0) * c;
            let b11 = (y1 * w + x1) * c;
            let obase = (oy * ow + ox) * c;
            for ch in 0..c {
                let top = x[b00 + ch] * (1.0 - fx) + x[b01 + ch] * fx;
                let bot = x[b10 + ch] * (1.0 - fx) + x[b11 + ch] * fx;
                out[obase + ch] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

/// Adjoint of [`upsample_bilinear`]: scatters output cotangents back with the
/// same interpolation weights.
pub fn upsample_bilinear_adjoint(
    gout: &[f64],
    h: usize,
    w: usize,
    c: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let ty = bilinear_taps(oh, h);
    let tx = bilinear_taps(ow, w);
    let mut dx = vec![0.0; h * w * c];
    for oy in 0..oh {
        let (y0, y1, fy) = ty[oy];
        for ox in 0..ow {
            let (x0, x1, fx) = tx[ox];
            let obase = (oy * ow + ox) * c;
            let w00 = (1.0 - fy) * (1.0 - fx);
            let w01 = (1.0 - fy) * fx;
            let w10 = fy * (1.0 - fx);
            let w11 = fy * fx;
            let b00 = (y0 * w + x0) * c;
            let b01 = (y0 * w + x1) * c;
            let b10 = (y1 * w + x0) * c;
            let b11 = (y1 * w + x1) * c;
            for ch in 0..c {
                let gv = gout[obase + ch];
                dx[b00 + ch] += gv * w00;
                dx[b01 + ch] += gv * w01;
                dx[b10 + ch] += gv * w10;
                dx[b11 + ch] += gv * w11;
            }
        }
    }
    dx
}

fn nearest_src(out_len: usize, in_len: usize, o: usize) -> usize {
    let scale = in_len as f64 / out_len as f64;
    (((o as f64 + 0.5) * scale) as usize).min(in_len - 1)
}

pub fn upsample_nearest(x: &[f64], h: usize, w: usize, c: usize, oh: usize, ow: usize) -> Vec<f64> {
    let mut out = vec![0.0; oh * ow * c];
    for oy in 0..oh {
        let sy = nearest_src(oh, h, oy);
        for ox in 0..ow {
            let sx = nearest_src(ow, w, ox);
            let sbase = (sy * w + sx) * c;
            let obase = (oy * ow + ox) * c;
            out[obase..obase + c].copy_from_slice(&x[sbase..sbase + c]);
        }
    }
    out
}

pub fn upsample_nearest_adjoint(
    gout: &[f64],
    h: usize,
    w: usize,
    c: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let mut dx = vec![0.0; h * w * c];
    for oy in 0..oh {
        let sy = nearest_src(oh, h, oy);
        for ox in 0..ow {
            let sx = nearest_src(ow, w, ox);
            let sbase = (sy * w + sx) * c;
            let obase = (oy * ow + ox) * c;
            for ch in 0..c {
                dx[sbase + ch] += gout[obase + ch];
            }
        }
    }
    dx
}
