//! Convolution and matrix kernels shared by the eager ops and the tape.
//!
//! Convolutions are lowered to im2col + GEMM. Column matrices are laid out as
//! `(in_ch * k * k, batch * out_h * out_w)`, row-major.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `c = alpha * op(a) * op(b) + beta * c` for row-major operands, where
/// `op(a)` is `m x k` and `op(b)` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, beta: f64, c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: strides describe exactly the m*k, k*n and m*n buffers checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a strided, zero-padded square-kernel convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    fn new(
        op: &'static str,
        batch: usize,
        in_ch: usize,
        in_h: usize,
        in_w: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if stride == 0 {
            return Err(Error::Invalid(format!("{op}: stride must be positive")));
        }
        if in_h + 2 * pad < k || in_w + 2 * pad < k {
            return Err(Error::shape(
                op,
                format!("kernel {k} larger than padded input {in_h}x{in_w} (padding {pad})"),
            ));
        }
        Ok(ConvGeom {
            batch,
            in_ch,
            in_h,
            in_w,
            k,
            stride,
            pad,
            out_h: (in_h + 2 * pad - k) / stride + 1,
            out_w: (in_w + 2 * pad - k) / stride + 1,
        })
    }

    fn col_rows(&self) -> usize {
        self.in_ch * self.k * self.k
    }

    fn col_cols(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }
}

fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (oh, ow) = (g.out_h, g.out_w);
    let ncols = g.col_cols();
    let mut cols = vec![0.0; g.col_rows() * ncols];
    for c in 0..g.in_ch {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for b in 0..g.batch {
                    let plane = &x[(b * g.in_ch + c) * g.in_h * g.in_w..][..g.in_h * g.in_w];
                    for oy in 0..oh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.in_h as isize {
                            continue;
                        }
                        let src_row = &plane[iy as usize * g.in_w..][..g.in_w];
                        let base = b * oh * ow + oy * ow;
                        for ox in 0..ow {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.in_w as isize {
                                dst[base + ox] = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-adds a column matrix back onto an input-shaped buffer (adjoint of im2col).
fn col2im(cols: &[f64], g: &ConvGeom, x: &mut [f64]) {
    let (oh, ow) = (g.out_h, g.out_w);
    let ncols = g.col_cols();
    for c in 0..g.in_ch {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for b in 0..g.batch {
                    let plane = &mut x[(b * g.in_ch + c) * g.in_h * g.in_w..][..g.in_h * g.in_w];
                    for oy in 0..oh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.in_h as isize {
                            continue;
                        }
                        let dst_row = &mut plane[iy as usize * g.in_w..][..g.in_w];
                        let base = b * oh * ow + oy * ow;
                        for ox in 0..ow {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.in_w as isize {
                                dst_row[ix as usize] += src[base + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `(ch, batch * plane)` channel-major matrix from `(batch, ch, plane)`.
fn to_channel_major(x: &[f64], batch: usize, ch: usize, plane: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for b in 0..batch {
        for c in 0..ch {
            out[c * batch * plane + b * plane..][..plane].copy_from_slice(&x[(b * ch + c) * plane..][..plane]);
        }
    }
    out
}

fn from_channel_major(m: &[f64], batch: usize, ch: usize, plane: usize) -> Vec<f64> {
    let mut out = vec![0.0; m.len()];
    for b in 0..batch {
        for c in 0..ch {
            out[(b * ch + c) * plane..][..plane].copy_from_slice(&m[c * batch * plane + b * plane..][..plane]);
        }
    }
    out
}

fn check_4d(op: &'static str, what: &str, t: &Tensor) -> Result<[usize; 4]> {
    match *t.shape() {
        [a, b, c, d] => Ok([a, b, c, d]),
        ref s => Err(Error::shape(op, format!("{what} must be 4-D, got {s:?}"))),
    }
}

fn check_bias(op: &'static str, bias: &Tensor, channels: usize) -> Result<()> {
    if bias.shape() != [channels] {
        return Err(Error::shape(
            op,
            format!("bias shape {:?} does not match out_channels {channels}", bias.shape()),
        ));
    }
    Ok(())
}

/// Validated geometry for `conv2d(input, weight)`; weight is `(out, in, k, k)`.
pub(crate) fn conv2d_geom(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<(ConvGeom, usize)> {
    const OP: &str = "conv2d";
    let [b, c, h, w] = check_4d(OP, "input", input)?;
    let [oc, ic, kh, kw] = check_4d(OP, "weight", weight)?;
    if ic != c {
        return Err(Error::shape(
            OP,
            format!("input channels {c} != weight in_channels {ic}"),
        ));
    }
    if kh != kw {
        return Err(Error::shape(OP, format!("kernel must be square, got {kh}x{kw}")));
    }
    check_bias(OP, bias, oc)?;
    Ok((ConvGeom::new(OP, b, c, h, w, kh, stride, pad)?, oc))
}

/// Validated geometry for `conv_transpose2d`; weight is `(in, out, k, k)`.
///
/// The returned geometry describes the *adjoint* convolution running from the
/// transposed conv's output back to its input.
pub(crate) fn conv_t_geom(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<(ConvGeom, usize)> {
    const OP: &str = "conv_transpose2d";
    let [b, c, h, w] = check_4d(OP, "input", input)?;
    let [ic, oc, kh, kw] = check_4d(OP, "weight", weight)?;
    if ic != c {
        return Err(Error::shape(
            OP,
            format!("input channels {c} != weight in_channels {ic}"),
        ));
    }
    if kh != kw {
        return Err(Error::shape(OP, format!("kernel must be square, got {kh}x{kw}")));
    }
    if stride == 0 {
        return Err(Error::Invalid(format!("{OP}: stride must be positive")));
    }
    check_bias(OP, bias, oc)?;
    let full_h = (h - 1) * stride + kh;
    let full_w = (w - 1) * stride + kw;
    if full_h <= 2 * pad || full_w <= 2 * pad {
        return Err(Error::shape(OP, format!("padding {pad} consumes the whole output")));
    }
    let (oh, ow) = (full_h - 2 * pad, full_w - 2 * pad);
    let g = ConvGeom::new(OP, b, oc, oh, ow, kh, stride, pad)?;
    if g.out_h != h || g.out_w != w {
        return Err(Error::shape(OP, "inconsistent transposed geometry"));
    }
    Ok((g, oc))
}

pub(crate) fn conv2d_forward(x: &[f64], w: &[f64], bias: &[f64], g: &ConvGeom, oc: usize) -> Vec<f64> {
    let cols = im2col(x, g);
    let plane = g.out_h * g.out_w;
    let mut out_cm = vec![0.0; oc * g.col_cols()];
    gemm(oc, g.col_rows(), g.col_cols(), w, false, &cols, false, 0.0, &mut out_cm);
    let mut out = from_channel_major(&out_cm, g.batch, oc, plane);
    add_channel_bias(&mut out, bias, g.batch, oc, plane);
    out
}

/// Returns `(d_input, d_weight, d_bias)`.
pub(crate) fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    dout: &[f64],
    g: &ConvGeom,
    oc: usize,
    need_input: bool,
) -> (Option<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let plane = g.out_h * g.out_w;
    let dout_cm = to_channel_major(dout, g.batch, oc, plane);
    let cols = im2col(x, g);
    let mut dw = vec![0.0; oc * g.col_rows()];
    gemm(
        oc,
        g.col_cols(),
        g.col_rows(),
        &dout_cm,
        false,
        &cols,
        true,
        0.0,
        &mut dw,
    );
    let db = channel_sums(dout, g.batch, oc, plane);
    let dx = need_input.then(|| {
        let mut dcols = vec![0.0; g.col_rows() * g.col_cols()];
        gemm(
            g.col_rows(),
            oc,
            g.col_cols(),
            w,
            true,
            &dout_cm,
            false,
            0.0,
            &mut dcols,
        );
        let mut dx = vec![0.0; g.batch * g.in_ch * g.in_h * g.in_w];
        col2im(&dcols, g, &mut dx);
        dx
    });
    (dx, dw, db)
}

/// `g` is the adjoint geometry from [`conv_t_geom`]; `x` has `g.out_h x g.out_w` planes.
pub(crate) fn conv_t_forward(x: &[f64], w: &[f64], bias: &[f64], g: &ConvGeom, ic: usize) -> Vec<f64> {
    let in_plane = g.out_h * g.out_w;
    let x_cm = to_channel_major(x, g.batch, ic, in_plane);
    let mut cols = vec![0.0; g.col_rows() * g.col_cols()];
    gemm(g.col_rows(), ic, g.col_cols(), w, true, &x_cm, false, 0.0, &mut cols);
    let mut out = vec![0.0; g.batch * g.in_ch * g.in_h * g.in_w];
    col2im(&cols, g, &mut out);
    add_channel_bias(&mut out, bias, g.batch, g.in_ch, g.in_h * g.in_w);
    out
}

pub(crate) fn conv_t_backward(
    x: &[f64],
    w: &[f64],
    dout: &[f64],
    g: &ConvGeom,
    ic: usize,
    need_input: bool,
) -> (Option<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let in_plane = g.out_h * g.out_w;
    let dcols = im2col(dout, g);
    let x_cm = to_channel_major(x, g.batch, ic, in_plane);
    let mut dw = vec![0.0; ic * g.col_rows()];
    gemm(ic, g.col_cols(), g.col_rows(), &x_cm, false, &dcols, true, 0.0, &mut dw);
    let db = channel_sums(dout, g.batch, g.in_ch, g.in_h * g.in_w);
    let dx = need_input.then(|| {
        let mut dx_cm = vec![0.0; ic * g.col_cols()];
        gemm(ic, g.col_rows(), g.col_cols(), w, false, &dcols, false, 0.0, &mut dx_cm);
        from_channel_major(&dx_cm, g.batch, ic, in_plane)
    });
    (dx, dw, db)
}

fn add_channel_bias(out: &mut [f64], bias: &[f64], batch: usize, ch: usize, plane: usize) {
    for b in 0..batch {
        for (c, &bv) in bias.iter().enumerate().take(ch) {
            for v in &mut out[(b * ch + c) * plane..][..plane] {
                *v += bv;
            }
        }
    }
}

fn channel_sums(x: &[f64], batch: usize, ch: usize, plane: usize) -> Vec<f64> {
    let mut s = vec![0.0; ch];
    for b in 0..batch {
        for (c, acc) in s.iter_mut().enumerate() {
            *acc += x[(b * ch + c) * plane..][..plane].iter().sum::<f64>();
        }
    }
    s
}

/// `(rows, in)` view of a batch and validation against a `(out, in)` weight.
pub(crate) fn dense_dims(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<(usize, usize, usize)> {
    const OP: &str = "dense";
    let rows = input.shape()[0];
    let inner = input.numel() / rows;
    let [out, w_in] = *weight.shape() else {
        return Err(Error::shape(
            OP,
            format!("weight must be 2-D, got {:?}", weight.shape()),
        ));
    };
    if w_in != inner {
        return Err(Error::shape(
            OP,
            format!("input has {inner} features per row, weight expects {w_in}"),
        ));
    }
    check_bias(OP, bias, out)?;
    Ok((rows, inner, out))
}

pub(crate) fn dense_forward(x: &[f64], w: &[f64], bias: &[f64], rows: usize, inner: usize, out: usize) -> Vec<f64> {
    let mut y = vec![0.0; rows * out];
    for r in 0..rows {
        y[r * out..(r + 1) * out].copy_from_slice(bias);
    }
    gemm(rows, inner, out, x, false, w, true, 1.0, &mut y);
    y
}

/// 2-D convolution (cross-correlation) with square kernels.
pub fn conv2d(input: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let (g, oc) = conv2d_geom(input, weight, bias, stride, padding)?;
    let data = conv2d_forward(input.data(), weight.data(), bias.data(), &g, oc);
    Tensor::new(vec![g.batch, oc, g.out_h, g.out_w], data)
}

/// Transposed convolution; the adjoint of [`conv2d`] with respect to its input.
pub fn conv_transpose2d(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let (g, oc) = conv_t_geom(input, weight, bias, stride, padding)?;
    let ic = input.shape()[1];
    let data = conv_t_forward(input.data(), weight.data(), bias.data(), &g, ic);
    Tensor::new(vec![g.batch, oc, g.in_h, g.in_w], data)
}

/// Affine map `x W^T + b` over rows of the flattened input; weight is `(out, in)`.
pub fn dense(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (rows, inner, out) = dense_dims(input, weight, bias)?;
    let data = dense_forward(input.data(), weight.data(), bias.data(), rows, inner, out);
    Tensor::new(vec![rows, out], data)
}
