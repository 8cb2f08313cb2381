//! Explicit forward/backward kernels for every primitive the synthesis
//! pipeline needs: 2D/3D convolution, pointwise activations, 2x resizing and
//! the 2D<->3D channel fold. There is no autodiff graph; each op exposes a
//! matching backward that is checked against finite differences.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `y += a * x` over contiguous rows; the hot loop of every convolution.
#[inline]
pub(crate) fn axpy<S: Scalar>(y: &mut [S], a: S, x: &[S]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Dot product with a fixed 8-lane accumulation order: vectorizes while
/// staying bit-deterministic regardless of call site.
#[inline]
pub(crate) fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    debug_assert_eq!(a.len(), b.len());
    const LANES: usize = 8;
    let mut lanes = [S::zero(); LANES];
    let chunks = a.len() / LANES;
    for c in 0..chunks {
        let off = c * LANES;
        for l in 0..LANES {
            lanes[l] = lanes[l] + a[off + l] * b[off + l];
        }
    }
    let mut acc = S::zero();
    for l in lanes {
        acc += l;
    }
    for i in chunks * LANES..a.len() {
        acc += a[i] * b[i];
    }
    acc
}

/// Valid output range along one axis: indices `o` with
/// `0 <= o*stride + k - pad < n_in`.
#[inline]
fn out_range(n_out: usize, n_in: usize, stride: usize, k: usize, pad: usize) -> (usize, usize) {
    let s = stride as i64;
    let shift = k as i64 - pad as i64;
    let lo = (-shift).div_euclid(s) + i64::from((-shift).rem_euclid(s) != 0);
    let hi = (n_in as i64 - shift - 1).div_euclid(s) + 1;
    let lo = lo.clamp(0, n_out as i64) as usize;
    let hi = hi.clamp(lo as i64, n_out as i64) as usize;
    (lo, hi)
}

fn check_stride(stride: &[usize]) -> Result<()> {
    if stride.iter().any(|&s| s == 0 || s > 2) {
        return Err(Error::invalid(format!("stride must be 1 or 2, got {stride:?}")));
    }
    Ok(())
}

fn conv_out_len(n: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let num = n + 2 * pad;
    if num < k {
        return Err(Error::invalid(format!(
            "kernel {k} larger than padded input {num}"
        )));
    }
    Ok((num - k) / stride + 1)
}


/// `out[m][n] = bias[m] + a[m][k] * b[k][n]`, processing four output rows
/// per pass so each `b` row is loaded once per block.
fn gemm_bias<S: Scalar>(out: &mut [S], a: &[S], b: &[S], bias: &[S], m: usize, k_rows: usize, n: usize) {
    for (mi, row) in out.chunks_mut(n).enumerate() {
        let v = bias[mi];
        row.iter_mut().for_each(|o| *o = v);
    }
    let mut m0 = 0;
    while m0 + 4 <= m {
        let block = &mut out[m0 * n..(m0 + 4) * n];
        let (r0, rest) = block.split_at_mut(n);
        let (r1, rest) = rest.split_at_mut(n);
        let (r2, r3) = rest.split_at_mut(n);
        for k in 0..k_rows {
            let bk = &b[k * n..k * n + n];
            let w0 = a[m0 * k_rows + k];
            let w1 = a[(m0 + 1) * k_rows + k];
            let w2 = a[(m0 + 2) * k_rows + k];
            let w3 = a[(m0 + 3) * k_rows + k];
            for (j, &x) in bk.iter().enumerate() {
                r0[j] += w0 * x;
                r1[j] += w1 * x;
                r2[j] += w2 * x;
                r3[j] += w3 * x;
            }
        }
        m0 += 4;
    }
    for mi in m0..m {
        let row = &mut out[mi * n..(mi + 1) * n];
        for k in 0..k_rows {
            axpy(row, a[mi * k_rows + k], &b[k * n..(k + 1) * n]);
        }
    }
}

/// Fused backward GEMM: `gw[m][k] = dot(g[m], col[k])`,
/// `gcol[k] += sum_m a[m][k] * g[m]`, `gb[m] = sum(g[m])`. Each `g` row is
/// read once per `k` for both products.
fn gemm_backward<S: Scalar>(
    g: &[S],
    col: &[S],
    a: &[S],
    gw: &mut [S],
    gcol: &mut [S],
    gb: &mut [S],
    m: usize,
    k_rows: usize,
    n: usize,
) {
    for mi in 0..m {
        gb[mi] = g[mi * n..(mi + 1) * n].iter().copied().sum();
    }
    const L: usize = 8;
    let chunks = n / L;
    for k in 0..k_rows {
        let col_k = &col[k * n..(k + 1) * n];
        let gcol_k = &mut gcol[k * n..(k + 1) * n];
        let mut mi = 0;
        while mi + 2 <= m {
            let g0 = &g[mi * n..(mi + 1) * n];
            let g1 = &g[(mi + 1) * n..(mi + 2) * n];
            let w0 = a[mi * k_rows + k];
            let w1 = a[(mi + 1) * k_rows + k];
            let mut d0 = [S::zero(); L];
            let mut d1 = [S::zero(); L];
            for c in 0..chunks {
                let off = c * L;
                for l in 0..L {
                    let x = col_k[off + l];
                    let y0 = g0[off + l];
                    let y1 = g1[off + l];
                    d0[l] = d0[l] + y0 * x;
                    d1[l] = d1[l] + y1 * x;
                    gcol_k[off + l] += w0 * y0 + w1 * y1;
                }
            }
            let (mut s0, mut s1) = (S::zero(), S::zero());
            for l in 0..L {
                s0 += d0[l];
                s1 += d1[l];
            }
            for j in chunks * L..n {
                s0 += g0[j] * col_k[j];
                s1 += g1[j] * col_k[j];
                gcol_k[j] += w0 * g0[j] + w1 * g1[j];
            }
            gw[mi * k_rows + k] = s0;
            gw[(mi + 1) * k_rows + k] = s1;
            mi += 2;
        }
        if mi < m {
            let g0 = &g[mi * n..(mi + 1) * n];
            let w0 = a[mi * k_rows + k];
            gw[mi * k_rows + k] = dot(g0, col_k);
            axpy(gcol_k, w0, g0);
        }
    }
}

/// Data-only backward GEMM: `gcol[k] = sum_m a[m][k] * g[m]`.
fn gemm_data<S: Scalar>(g: &[S], a: &[S], gcol: &mut [S], m: usize, k_rows: usize, n: usize) {
    for k in 0..k_rows {
        let gcol_k = &mut gcol[k * n..(k + 1) * n];
        for mi in 0..m {
            axpy(gcol_k, a[mi * k_rows + k], &g[mi * n..(mi + 1) * n]);
        }
    }
}

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------

/// 2D convolution. `input` is `[C_in, H, W]`, `weight` is
/// `[C_out, C_in, KH, KW]`, `bias` is `[C_out]`; zero padding.
pub fn conv2d<S: Scalar>(
    input: &Tensor<S>,
    weight: &Tensor<S>,
    bias: &Tensor<S>,
    stride: [usize; 2],
    pad: [usize; 2],
) -> Result<Tensor<S>> {
    check_stride(&stride)?;
    let (cin, h, w) = match *input.shape() {
        [c, h, w] => (c, h, w),
        _ => return Err(Error::shape("[C_in, H, W]", format!("{:?}", input.shape()))),
    };
    let (cout, wcin, kh, kw) = match *weight.shape() {
        [co, ci, kh, kw] => (co, ci, kh, kw),
        _ => {
            return Err(Error::shape(
                "[C_out, C_in, KH, KW]",
                format!("{:?}", weight.shape()),
            ))
        }
    };
    if wcin != cin {
        return Err(Error::shape(
            format!("weight C_in {cin} for input {:?}", input.shape()),
            format!("weight {:?}", weight.shape()),
        ));
    }
    if bias.shape() != [cout] {
        return Err(Error::shape(format!("[{cout}]"), format!("{:?}", bias.shape())));
    }
    let ho = conv_out_len(h, kh, stride[0], pad[0])?;
    let wo = conv_out_len(w, kw, stride[1], pad[1])?;

    let col = im2col_2d(input.data(), cin, h, w, kh, kw, stride, pad, ho, wo);
    let n = ho * wo;
    let k_rows = cin * kh * kw;
    let mut out = Tensor::zeros(&[cout, ho, wo]);
    gemm_bias(out.data_mut(), weight.data(), &col, bias.data(), cout, k_rows, n);
    Ok(out)
}

/// Patch matrix `[C_in*KH*KW, H_out*W_out]` with zero padding.
#[allow(clippy::too_many_arguments)]
fn im2col_2d<S: Scalar>(
    input: &[S],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: [usize; 2],
    pad: [usize; 2],
    ho: usize,
    wo: usize,
) -> Vec<S> {
    let n = ho * wo;
    let mut col = vec![S::zero(); cin * kh * kw * n];
    for ci in 0..cin {
        let plane = &input[ci * h * w..(ci + 1) * h * w];
        for ykh in 0..kh {
            let (oh_lo, oh_hi) = out_range(ho, h, stride[0], ykh, pad[0]);
            for ykw in 0..kw {
                let (ow_lo, ow_hi) = out_range(wo, w, stride[1], ykw, pad[1]);
                if ow_lo >= ow_hi {
                    continue;
                }
                let row = &mut col[((ci * kh + ykh) * kw + ykw) * n..((ci * kh + ykh) * kw + ykw + 1) * n];
                for oh in oh_lo..oh_hi {
                    let ih = oh * stride[0] + ykh - pad[0];
                    let iw0 = ow_lo * stride[1] + ykw - pad[1];
                    let dst = &mut row[oh * wo + ow_lo..oh * wo + ow_hi];
                    if stride[1] == 1 {
                        dst.copy_from_slice(&plane[ih * w + iw0..ih * w + iw0 + dst.len()]);
                    } else {
                        for (j, d) in dst.iter_mut().enumerate() {
                            *d = plane[ih * w + iw0 + j * stride[1]];
                        }
                    }
                }
            }
        }
    }
    col
}

/// Scatter-add the patch-matrix gradient back onto the input grid.
#[allow(clippy::too_many_arguments)]
fn col2im_2d<S: Scalar>(
    gcol: &[S],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: [usize; 2],
    pad: [usize; 2],
    ho: usize,
    wo: usize,
) -> Vec<S> {
    let n = ho * wo;
    let mut grad = vec![S::zero(); cin * h * w];
    for ci in 0..cin {
        let plane = &mut grad[ci * h * w..(ci + 1) * h * w];
        for ykh in 0..kh {
            let (oh_lo, oh_hi) = out_range(ho, h, stride[0], ykh, pad[0]);
            for ykw in 0..kw {
                let (ow_lo, ow_hi) = out_range(wo, w, stride[1], ykw, pad[1]);
                if ow_lo >= ow_hi {
                    continue;
                }
                let row = &gcol[((ci * kh + ykh) * kw + ykw) * n..((ci * kh + ykh) * kw + ykw + 1) * n];
                for oh in oh_lo..oh_hi {
                    let ih = oh * stride[0] + ykh - pad[0];
                    let iw0 = ow_lo * stride[1] + ykw - pad[1];
                    let src = &row[oh * wo + ow_lo..oh * wo + ow_hi];
                    if stride[1] == 1 {
                        axpy(&mut plane[ih * w + iw0..ih * w + iw0 + src.len()], S::one(), src);
                    } else {
                        for (j, &g) in src.iter().enumerate() {
                            plane[ih * w + iw0 + j * stride[1]] += g;
                        }
                    }
                }
            }
        }
    }
    grad
}

/// Gradients of `conv2d` w.r.t. input, weight and bias.
pub fn conv2d_backward<S: Scalar>(
    input: &Tensor<S>,
    weight: &Tensor<S>,
    grad_out: &Tensor<S>,
    stride: [usize; 2],
    pad: [usize; 2],
) -> Result<(Tensor<S>, Tensor<S>, Tensor<S>)> {
    let (cin, h, w) = match *input.shape() {
        [c, h, w] => (c, h, w),
        _ => return Err(Error::shape("[C_in, H, W]", format!("{:?}", input.shape()))),
    };
    let (cout, _, kh, kw) = match *weight.shape() {
        [co, ci, kh, kw] => (co, ci, kh, kw),
        _ => {
            return Err(Error::shape(
                "[C_out, C_in, KH, KW]",
                format!("{:?}", weight.shape()),
            ))
        }
    };
    let ho = conv_out_len(h, kh, stride[0], pad[0])?;
    let wo = conv_out_len(w, kw, stride[1], pad[1])?;
    if grad_out.shape() != [cout, ho, wo] {
        return Err(Error::shape(
            format!("[{cout}, {ho}, {wo}]"),
            format!("{:?}", grad_out.shape()),
        ));
    }
    let n = ho * wo;
    let k_rows = cin * kh * kw;
    let col = im2col_2d(input.data(), cin, h, w, kh, kw, stride, pad, ho, wo);
    let gd = grad_out.data();
    let wd = weight.data();

    let mut gb = Tensor::zeros(&[cout]);
    let mut gw = Tensor::zeros(weight.shape());
    let mut gcol = vec![S::zero(); k_rows * n];
    gemm_backward(
        gd,
        &col,
        wd,
        gw.data_mut(),
        &mut gcol,
        gb.data_mut(),
        cout,
        k_rows,
        n,
    );
    let gx = col2im_2d(&gcol, cin, h, w, kh, kw, stride, pad, ho, wo);
    Ok((Tensor::from_vec(input.shape(), gx)?, gw, gb))
}

/// Input gradient of `conv2d` only; cheaper when weights are frozen.
pub fn conv2d_backward_data<S: Scalar>(
    input_shape: &[usize],
    weight: &Tensor<S>,
    grad_out: &Tensor<S>,
    stride: [usize; 2],
    pad: [usize; 2],
) -> Result<Tensor<S>> {
    let (cin, h, w) = match *input_shape {
        [c, h, w] => (c, h, w),
        _ => return Err(Error::shape("[C_in, H, W]", format!("{input_shape:?}"))),
    };
    let (cout, _, kh, kw) = match *weight.shape() {
        [co, ci, kh, kw] => (co, ci, kh, kw),
        _ => {
            return Err(Error::shape(
                "[C_out, C_in, KH, KW]",
                format!("{:?}", weight.shape()),
            ))
        }
    };
    let ho = conv_out_len(h, kh, stride[0], pad[0])?;
    let wo = conv_out_len(w, kw, stride[1], pad[1])?;
    if grad_out.shape() != [cout, ho, wo] {
        return Err(Error::shape(
            format!("[{cout}, {ho}, {wo}]"),
            format!("{:?}", grad_out.shape()),
        ));
    }
    let n = ho * wo;
    let k_rows = cin * kh * kw;
    let mut gcol = vec![S::zero(); k_rows * n];
    gemm_data(grad_out.data(), weight.data(), &mut gcol, cout, k_rows, n);
    let gx = col2im_2d(&gcol, cin, h, w, kh, kw, stride, pad, ho, wo);
    Tensor::from_vec(input_shape, gx)
}

// ---------------------------------------------------------------------------
// conv3d
// ---------------------------------------------------------------------------

/// 3D convolution. `input` is `[C_in, D, H, W]`, `weight` is
/// `[C_out, C_in, KD, KH, KW]`; zero padding, per-axis stride.
pub fn conv3d<S: Scalar>(
    input: &Tensor<S>,
    weight: &Tensor<S>,
    bias: &Tensor<S>,
    stride: [usize; 3],
    pad: [usize; 3],
) -> Result<Tensor<S>> {
    check_stride(&stride)?;
    let (cin, d, h, w) = match *input.shape() {
        [c, d, h, w] => (c, d, h, w),
        _ => {
            return Err(Error::shape(
                "[C_in, D, H, W]",
                format!("{:?}", input.shape()),
            ))
        }
    };
    let (cout, wcin, kd, kh, kw) = match *weight.shape() {
        [co, ci, kd, kh, kw] => (co, ci, kd, kh, kw),
        _ => {
            return Err(Error::shape(
                "[C_out, C_in, KD, KH, KW]",
                format!("{:?}", weight.shape()),
            ))
        }
    };
    if wcin != cin {
        return Err(Error::shape(
            format!("weight C_in {cin} for input {:?}", input.shape()),
            format!("weight {:?}", weight.shape()),
        ));
    }
    if bias.shape() != [cout] {
        return Err(Error::shape(format!("[{cout}]"), format!("{:?}", bias.shape())));
    }
    let d_o = conv_out_len(d, kd, stride[0], pad[0])?;
    let ho = conv_out_len(h, kh, stride[1], pad[1])?;
    let wo = conv_out_len(w, kw, stride[2], pad[2])?;

    let col = im2col_3d(input.data(), cin, d, h, w, [kd, kh, kw], stride, pad, [d_o, ho, wo]);
    let n = d_o * ho * wo;
    let k_rows = cin * kd * kh * kw;
    let mut out = Tensor::zeros(&[cout, d_o, ho, wo]);
    gemm_bias(out.data_mut(), weight.data(), &col, bias.data(), cout, k_rows, n);
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn im2col_3d<S: Scalar>(
    input: &[S],
    cin: usize,
    d: usize,
    h: usize,
    w: usize,
    k: [usize; 3],
    stride: [usize; 3],
    pad: [usize; 3],
    out_dims: [usize; 3],
) -> Vec<S> {
    let [kd, kh, kw] = k;
    let [d_o, ho, wo] = out_dims;
    let n = d_o * ho * wo;
    let mut col = vec![S::zero(); cin * kd * kh * kw * n];
    for ci in 0..cin {
        let vol = &input[ci * d * h * w..(ci + 1) * d * h * w];
        for ykd in 0..kd {
            let (od_lo, od_hi) = out_range(d_o, d, stride[0], ykd, pad[0]);
            for ykh in 0..kh {
                let (oh_lo, oh_hi) = out_range(ho, h, stride[1], ykh, pad[1]);
                for ykw in 0..kw {
                    let (ow_lo, ow_hi) = out_range(wo, w, stride[2], ykw, pad[2]);
                    if ow_lo >= ow_hi {
                        continue;
                    }
                    let r = ((ci * kd + ykd) * kh + ykh) * kw + ykw;
                    let row = &mut col[r * n..(r + 1) * n];
                    for oz in od_lo..od_hi {
                        let id = oz * stride[0] + ykd - pad[0];
                        for oh in oh_lo..oh_hi {
                            let ih = oh * stride[1] + ykh - pad[1];
                            let iw0 = ow_lo * stride[2] + ykw - pad[2];
                            let base = (oz * ho + oh) * wo;
                            let dst = &mut row[base + ow_lo..base + ow_hi];
                            if stride[2] == 1 {
                                dst.copy_from_slice(
                                    &vol[(id * h + ih) * w + iw0..(id * h + ih) * w + iw0 + dst.len()],
                                );
                            } else {
                                for (j, dv) in dst.iter_mut().enumerate() {
                                    *dv = vol[(id * h + ih) * w + iw0 + j * stride[2]];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

#[allow(clippy::too_many_arguments)]
fn col2im_3d<S: Scalar>(
    gcol: &[S],
    cin: usize,
    d: usize,
    h: usize,
    w: usize,
    k: [usize; 3],
    stride: [usize; 3],
    pad: [usize; 3],
    out_dims: [usize; 3],
) -> Vec<S> {
    let [kd, kh, kw] = k;
    let [d_o, ho, wo] = out_dims;
    let n = d_o * ho * wo;
    let mut grad = vec![S::zero(); cin * d * h * w];
    for ci in 0..cin {
        let vol = &mut grad[ci * d * h * w..(ci + 1) * d * h * w];
        for ykd in 0..kd {
            let (od_lo, od_hi) = out_range(d_o, d, stride[0], ykd, pad[0]);
            for ykh in 0..kh {
                let (oh_lo, oh_hi) = out_range(ho, h, stride[1], ykh, pad[1]);
                for ykw in 0..kw {
                    let (ow_lo, ow_hi) = out_range(wo, w, stride[2], ykw, pad[2]);
                    if ow_lo >= ow_hi {
                        continue;
                    }
                    let r = ((ci * kd + ykd) * kh + ykh) * kw + ykw;
                    let row = &gcol[r * n..(r + 1) * n];
                    for oz in od_lo..od_hi {
                        let id = oz * stride[0] + ykd - pad[0];
                        for oh in oh_lo..oh_hi {
                            let ih = oh * stride[1] + ykh - pad[1];
                            let iw0 = ow_lo * stride[2] + ykw - pad[2];
                            let base = (oz * ho + oh) * wo;
                            let src = &row[base + ow_lo..base + ow_hi];
                            if stride[2] == 1 {
                                axpy(
                                    &mut vol[(id * h + ih) * w + iw0..(id * h + ih) * w + iw0 + src.len()],
                                    S::one(),
                                    src,
                                );
                            } else {
                                for (j, &g) in src.iter().enumerate() {
                                    vol[(id * h + ih) * w + iw0 + j * stride[2]] += g;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    grad
}

/// Gradients of `conv3d` w.r.t. input, weight and bias.
pub fn conv3d_backward<S: Scalar>(
    input: &Tensor<S>,
    weight: &Tensor<S>,
    grad_out: &Tensor<S>,
    stride: [usize; 3],
    pad: [usize; 3],
) -> Result<(Tensor<S>, Tensor<S>, Tensor<S>)> {
    let (cin, d, h, w) = match *input.shape() {
        [c, d, h, w] => (c, d, h, w),
        _ => {
            return Err(Error::shape(
                "[C_in, D, H, W]",
                format!("{:?}", input.shape()),
            ))
        }
    };
    let (cout, _, kd, kh, kw) = match *weight.shape() {
        [co, ci, kd, kh, kw] => (co, ci, kd, kh, kw),
        _ => {
            return Err(Error::shape(
                "[C_out, C_in, KD, KH, KW]",
                format!("{:?}", weight.shape()),
            ))
        }
    };
    let d_o = conv_out_len(d, kd, stride[0], pad[0])?;
    let ho = conv_out_len(h, kh, stride[1], pad[1])?;
    let wo = conv_out_len(w, kw, stride[2], pad[2])?;
    if grad_out.shape() != [cout, d_o, ho, wo] {
        return Err(Error::shape(
            format!("[{cout}, {d_o}, {ho}, {wo}]"),
            format!("{:?}", grad_out.shape()),
        ));
    }
    let n = d_o * ho * wo;
    let k_rows = cin * kd * kh * kw;
    let col = im2col_3d(input.data(), cin, d, h, w, [kd, kh, kw], stride, pad, [d_o, ho, wo]);
    let gd = grad_out.data();
    let wd = weight.data();

    let mut gb = Tensor::zeros(&[cout]);
    let mut gw = Tensor::zeros(weight.shape());
    let mut gcol = vec![S::zero(); k_rows * n];
    gemm_backward(
        gd,
        &col,
        wd,
        gw.data_mut(),
        &mut gcol,
        gb.data_mut(),
        cout,
        k_rows,
        n,
    );
    let gx = col2im_3d(&gcol, cin, d, h, w, [kd, kh, kw], stride, pad, [d_o, ho, wo]);
    Ok((Tensor::from_vec(input.shape(), gx)?, gw, gb))
}

/// Input gradient of `conv3d` only; cheaper when weights are frozen.
pub fn conv3d_backward_data<S: Scalar>(
    input_shape: &[usize],
    weight: &Tensor<S>,
    grad_out: &Tensor<S>,
    stride: [usize; 3],
    pad: [usize; 3],
) -> Result<Tensor<S>> {
    let (cin, d, h, w) = match *input_shape {
        [c, d, h, w] => (c, d, h, w),
        _ => return Err(Error::shape("[C_in, D, H, W]", format!("{input_shape:?}"))),
    };
    let (cout, _, kd, kh, kw) = match *weight.shape() {
        [co, ci, kd, kh, kw] => (co, ci, kd, kh, kw),
        _ => {
            return Err(Error::shape(
                "[C_out, C_in, KD, KH, KW]",
                format!("{:?}", weight.shape()),
            ))
        }
    };
    let d_o = conv_out_len(d, kd, stride[0], pad[0])?;
    let ho = conv_out_len(h, kh, stride[1], pad[1])?;
    let wo = conv_out_len(w, kw, stride[2], pad[2])?;
    if grad_out.shape() != [cout, d_o, ho, wo] {
        return Err(Error::shape(
            format!("[{cout}, {d_o}, {ho}, {wo}]"),
            format!("{:?}", grad_out.shape()),
        ));
    }
    let n = d_o * ho * wo;
    let k_rows = cin * kd * kh * kw;
    let mut gcol = vec![S::zero(); k_rows * n];
    gemm_data(grad_out.data(), weight.data(), &mut gcol, cout, k_rows, n);
    let gx = col2im_3d(&gcol, cin, d, h, w, [kd, kh, kw], stride, pad, [d_o, ho, wo]);
    Tensor::from_vec(input_shape, gx)
}

// ---------------------------------------------------------------------------
// activations
// ---------------------------------------------------------------------------

/// Pointwise nonlinearity. Leaky slope is fixed at 0.2.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    LeakyRelu,
    Sigmoid,
    Tanh,
}

pub const LEAKY_SLOPE: f64 = 0.2;

impl Activation {
    pub fn apply<S: Scalar>(self, x: &Tensor<S>) -> Tensor<S> {
        let slope = S::from_f64_c(LEAKY_SLOPE);
        match self {
            Activation::LeakyRelu => x.map(|v| if v >= S::zero() { v } else { v * slope }),
            Activation::Sigmoid => x.map(|v| S::one() / (S::one() + (-v).exp())),
            Activation::Tanh => x.map(|v| v.tanh()),
        }
    }

    /// Chain rule through the activation given its forward *output*.
    pub fn backward<S: Scalar>(self, output: &Tensor<S>, grad_out: &Tensor<S>) -> Result<Tensor<S>> {
        if output.shape() != grad_out.shape() {
            return Err(Error::shape(
                format!("{:?}", output.shape()),
                format!("{:?}", grad_out.shape()),
            ));
        }
        let slope = S::from_f64_c(LEAKY_SLOPE);
        let data = output
            .data()
            .iter()
            .zip(grad_out.data())
            .map(|(&y, &g)| match self {
                Activation::LeakyRelu => {
                    if y >= S::zero() {
                        g
                    } else {
                        g * slope
                    }
                }
                Activation::Sigmoid => g * y * (S::one() - y),
                Activation::Tanh => g * (S::one() - y * y),
            })
            .collect();
        Tensor::from_vec(output.shape(), data)
    }
}

// ---------------------------------------------------------------------------
// resize (x2 up, x2 down) over the trailing 2 or 3 axes
// ---------------------------------------------------------------------------

fn split_spatial(shape: &[usize], spatial_rank: usize) -> Result<(usize, Vec<usize>)> {
    if shape.len() < spatial_rank {
        return Err(Error::shape(
            format!("rank >= {spatial_rank}"),
            format!("{shape:?}"),
        ));
    }
    let lead: usize = shape[..shape.len() - spatial_rank].iter().product();
    Ok((lead, shape[shape.len() - spatial_rank..].to_vec()))
}

/// Linear interpolation weights mapping a fine axis of length `2n` onto a
/// coarse axis of length `n` under the cell-center coordinate convention.
fn up_weights<S: Scalar>(n: usize) -> Vec<(usize, usize, S, S)> {
    let fine = 2 * n;
    (0..fine)
        .map(|j| {
            if n == 1 {
                return (0, 0, S::one(), S::zero());
            }
            let x = j as f64 * (n as f64 - 1.0) / (fine as f64 - 1.0);
            let i0 = (x.floor() as usize).min(n - 2);
            let t = x - i0 as f64;
            (i0, i0 + 1, S::from_f64_c(1.0 - t), S::from_f64_c(t))
        })
        .collect()
}

/// Resize one axis of `[outer, n, inner]` using a weight table.
fn apply_axis_up<S: Scalar>(data: &[S], outer: usize, n: usize, inner: usize, w: &[(usize, usize, S, S)]) -> Vec<S> {
    let n_out = w.len();
    let mut out = vec![S::zero(); outer * n_out * inner];
    for o in 0..outer {
        let src = &data[o * n * inner..(o + 1) * n * inner];
        for (j, &(i0, i1, w0, w1)) in w.iter().enumerate() {
            let dst = &mut out[(o * n_out + j) * inner..(o * n_out + j + 1) * inner];
            for (k, d) in dst.iter_mut().enumerate() {
                *d = w0 * src[i0 * inner + k] + w1 * src[i1 * inner + k];
            }
        }
    }
    out
}

fn apply_axis_up_t<S: Scalar>(grad: &[S], outer: usize, n: usize, inner: usize, w: &[(usize, usize, S, S)]) -> Vec<S> {
    let n_out = w.len();
    let mut out = vec![S::zero(); outer * n * inner];
    for o in 0..outer {
        let dst = &mut out[o * n * inner..(o + 1) * n * inner];
        for (j, &(i0, i1, w0, w1)) in w.iter().enumerate() {
            let src = &grad[(o * n_out + j) * inner..(o * n_out + j + 1) * inner];
            for (k, &g) in src.iter().enumerate() {
                dst[i0 * inner + k] += w0 * g;
                dst[i1 * inner + k] += w1 * g;
            }
        }
    }
    out
}

fn apply_axis_down<S: Scalar>(data: &[S], outer: usize, n: usize, inner: usize) -> Vec<S> {
    let half = S::from_f64_c(0.5);
    let n_out = n / 2;
    let mut out = vec![S::zero(); outer * n_out * inner];
    for o in 0..outer {
        let src = &data[o * n * inner..(o + 1) * n * inner];
        for j in 0..n_out {
            let dst = &mut out[(o * n_out + j) * inner..(o * n_out + j + 1) * inner];
            for (k, d) in dst.iter_mut().enumerate() {
                *d = half * (src[2 * j * inner + k] + src[(2 * j + 1) * inner + k]);
            }
        }
    }
    out
}

fn apply_axis_down_t<S: Scalar>(grad: &[S], outer: usize, n: usize, inner: usize) -> Vec<S> {
    let half = S::from_f64_c(0.5);
    let n_out = n / 2;
    let mut out = vec![S::zero(); outer * n * inner];
    for o in 0..outer {
        let dst = &mut out[o * n * inner..(o + 1) * n * inner];
        for j in 0..n_out {
            let src = &grad[(o * n_out + j) * inner..(o * n_out + j + 1) * inner];
            for (k, &g) in src.iter().enumerate() {
                let gh = half * g;
                dst[2 * j * inner + k] += gh;
                dst[(2 * j + 1) * inner + k] += gh;
            }
        }
    }
    out
}

/// Double the trailing `spatial_rank` extents by separable linear
/// interpolation (bilinear for rank 2, trilinear for rank 3).
pub fn upsample2x<S: Scalar>(t: &Tensor<S>, spatial_rank: usize) -> Result<Tensor<S>> {
    let (lead, spatial) = split_spatial(t.shape(), spatial_rank)?;
    let mut data = t.data().to_vec();
    let mut dims = spatial.clone();
    for ax in 0..spatial_rank {
        let outer = lead * dims[..ax].iter().product::<usize>();
        let inner: usize = dims[ax + 1..].iter().product();
        let w = up_weights::<S>(dims[ax]);
        data = apply_axis_up(&data, outer, dims[ax], inner, &w);
        dims[ax] *= 2;
    }
    let mut shape = t.shape()[..t.shape().len() - spatial_rank].to_vec();
    shape.extend_from_slice(&dims);
    Tensor::from_vec(&shape, data)
}

/// Transpose of `upsample2x`: routes fine-grid gradients back to the coarse grid.
pub fn upsample2x_backward<S: Scalar>(
    grad_out: &Tensor<S>,
    coarse_shape: &[usize],
    spatial_rank: usize,
) -> Result<Tensor<S>> {
    let (lead, spatial) = split_spatial(coarse_shape, spatial_rank)?;
    // undo axes in reverse order
    let mut dims: Vec<usize> = spatial.iter().map(|&n| 2 * n).collect();
    let mut data = grad_out.data().to_vec();
    for ax in (0..spatial_rank).rev() {
        let n = spatial[ax];
        dims[ax] = n;
        let outer = lead * dims[..ax].iter().product::<usize>();
        let inner: usize = dims[ax + 1..]
            .iter()
            .enumerate()
            .map(|(k, &v)| if k + ax + 1 > ax { v } else { v })
            .product();
        let w = up_weights::<S>(n);
        data = apply_axis_up_t(&data, outer, n, inner, &w);
    }
    Tensor::from_vec(coarse_shape, data)
}

/// Halve the trailing `spatial_rank` extents by 2-cell averaging. Rejects odd
/// extents.
pub fn downsample2x<S: Scalar>(t: &Tensor<S>, spatial_rank: usize) -> Result<Tensor<S>> {
    let (lead, spatial) = split_spatial(t.shape(), spatial_rank)?;
    if spatial.iter().any(|&n| n % 2 != 0) {
        return Err(Error::invalid(format!(
            "downsample2x needs even extents, got {:?}",
            t.shape()
        )));
    }
    let mut data = t.data().to_vec();
    let mut dims = spatial.clone();
    for ax in 0..spatial_rank {
        let outer = lead * dims[..ax].iter().product::<usize>();
        let inner: usize = dims[ax + 1..].iter().product();
        data = apply_axis_down(&data, outer, dims[ax], inner);
        dims[ax] /= 2;
    }
    let mut shape = t.shape()[..t.shape().len() - spatial_rank].to_vec();
    shape.extend_from_slice(&dims);
    Tensor::from_vec(&shape, data)
}

pub fn downsample2x_backward<S: Scalar>(
    grad_out: &Tensor<S>,
    fine_shape: &[usize],
    spatial_rank: usize,
) -> Result<Tensor<S>> {
    let (lead, spatial) = split_spatial(fine_shape, spatial_rank)?;
    let mut dims: Vec<usize> = spatial.iter().map(|&n| n / 2).collect();
    let mut data = grad_out.data().to_vec();
    for ax in (0..spatial_rank).rev() {
        let n = spatial[ax];
        dims[ax] = n;
        let outer = lead * dims[..ax].iter().product::<usize>();
        let inner: usize = dims[ax + 1..].iter().product();
        data = apply_axis_down_t(&data, outer, n, inner);
    }
    Tensor::from_vec(fine_shape, data)
}

// ---------------------------------------------------------------------------
// 2D <-> 3D channel fold
// ---------------------------------------------------------------------------

/// `[(C*D), H, W] -> [C, D, H, W]` with element `(c,d,h,w) = input(c*D+d, h, w)`.
/// Row-major layout makes this a pure reinterpretation.
pub fn fold_2d_to_3d<S: Scalar>(t: &Tensor<S>, depth: usize) -> Result<Tensor<S>> {
    let (cd, h, w) = match *t.shape() {
        [cd, h, w] => (cd, h, w),
        _ => return Err(Error::shape("[(C*D), H, W]", format!("{:?}", t.shape()))),
    };
    if depth == 0 || cd % depth != 0 {
        return Err(Error::invalid(format!(
            "channel count {cd} not divisible by depth {depth}"
        )));
    }
    t.reshape(&[cd / depth, depth, h, w])
}

/// Inverse of `fold_2d_to_3d`.
pub fn unfold_3d_to_2d<S: Scalar>(t: &Tensor<S>) -> Result<Tensor<S>> {
    let (c, d, h, w) = match *t.shape() {
        [c, d, h, w] => (c, d, h, w),
        _ => return Err(Error::shape("[C, D, H, W]", format!("{:?}", t.shape()))),
    };
    t.reshape(&[c * d, h, w])
}
