//! 3D convolution kernels: im2col + GEMM production path and a naive
//! reference used as the test oracle.
//!
//! Convention is cross-correlation (no kernel flip), zero padding,
//! `out = floor((in + 2p - k)/s) + 1` per axis. All reductions run in a fixed
//! serial order per output element, so results are bit-reproducible for any
//! thread count.

use rayon::prelude::*;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Validated geometry of one convolution.
#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub t_in: [usize; 3],
    pub k: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub t_out: [usize; 3],
}

impl ConvGeom {
    pub fn out_positions(&self) -> usize {
        self.t_out[0] * self.t_out[1] * self.t_out[2]
    }
    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.batch, self.cout, self.t_out[0], self.t_out[1], self.t_out[2]]
    }
    pub fn kernel_volume(&self) -> usize {
        self.k[0] * self.k[1] * self.k[2]
    }
    pub fn col_rows(&self) -> usize {
        self.cin * self.kernel_volume()
    }
}

pub fn conv_geometry(
    x_shape: &[usize],
    w_shape: &[usize],
    stride: [usize; 3],
    pad: [usize; 3],
) -> Result<ConvGeom> {
    if x_shape.len() != 5 || w_shape.len() != 5 {
        return Err(Error::shape(format!(
            "conv3d expects 5-axis input/weight, got {:?} and {:?}",
            x_shape, w_shape
        )));
    }
    let (batch, cin) = (x_shape[0], x_shape[1]);
    let t_in = [x_shape[2], x_shape[3], x_shape[4]];
    let (cout, w_cin) = (w_shape[0], w_shape[1]);
    let k = [w_shape[2], w_shape[3], w_shape[4]];
    if w_cin != cin {
        return Err(Error::shape(format!(
            "conv3d channel mismatch: input has {}, weight expects {}",
            cin, w_cin
        )));
    }
    if stride.iter().any(|&s| s == 0) {
        return Err(Error::param("conv3d stride must be >= 1"));
    }
    let mut t_out = [0usize; 3];
    for a in 0..3 {
        let padded = t_in[a] + 2 * pad[a];
        if padded < k[a] || k[a] == 0 {
            return Err(Error::shape(format!(
                "conv3d axis {}: kernel {} does not fit padded input {}",
                a, k[a], padded
            )));
        }
        t_out[a] = (padded - k[a]) / stride[a] + 1;
    }
    Ok(ConvGeom { batch, cin, cout, t_in, k, stride, pad, t_out })
}

/// Gather the padded input windows of one sample into a (cin*kt*kh*kw) x
/// (out positions) matrix. Out-of-range taps are zero.
fn im2col<F: Scalar>(x: &[F], g: &ConvGeom, col: &mut [F]) {
    let [it_d, ih_d, iw_d] = g.t_in;
    let [ot_d, oh_d, ow_d] = g.t_out;
    let [st, sh, sw] = g.stride;
    let [pt, ph, pw] = g.pad;
    let p_total = g.out_positions();
    debug_assert_eq!(col.len(), g.col_rows() * p_total);
    let mut row = 0usize;
    for ci in 0..g.cin {
        let x_c = &x[ci * it_d * ih_d * iw_d..(ci + 1) * it_d * ih_d * iw_d];
        for kt in 0..g.k[0] {
            for kh in 0..g.k[1] {
                for kw in 0..g.k[2] {
                    let dst_row = &mut col[row * p_total..(row + 1) * p_total];
                    row += 1;
                    for ot in 0..ot_d {
                        let it = (ot * st + kt) as isize - pt as isize;
                        let plane = &mut dst_row[ot * oh_d * ow_d..(ot + 1) * oh_d * ow_d];
                        if it < 0 || it as usize >= it_d {
                            plane.fill(F::zero());
                            continue;
                        }
                        let x_t = &x_c[it as usize * ih_d * iw_d..(it as usize + 1) * ih_d * iw_d];
                        for oh in 0..oh_d {
                            let ih = (oh * sh + kh) as isize - ph as isize;
                            let seg = &mut plane[oh * ow_d..(oh + 1) * ow_d];
                            if ih < 0 || ih as usize >= ih_d {
                                seg.fill(F::zero());
                                continue;
                            }
                            let x_row = &x_t[ih as usize * iw_d..(ih as usize + 1) * iw_d];
                            if sw == 1 {
                                // iw = ow + kw - pw; copy the in-range span, zero both tails
                                let shiftv = kw as isize - pw as isize;
                                let lo = (-shiftv).max(0) as usize;
                                let hi_excl =
                                    ((iw_d as isize - shiftv).clamp(0, ow_d as isize)) as usize;
                                let hi = hi_excl.max(lo);
                                seg[..lo].fill(F::zero());
                                seg[hi..].fill(F::zero());
                                if hi > lo {
                                    let src0 = (lo as isize + shiftv) as usize;
                                    seg[lo..hi].copy_from_slice(&x_row[src0..src0 + (hi - lo)]);
                                }
                            } else {
                                for (ow, dst) in seg.iter_mut().enumerate() {
                                    let iw = (ow * sw + kw) as isize - pw as isize;
                                    *dst = if iw < 0 || iw as usize >= iw_d {
                                        F::zero()
                                    } else {
                                        x_row[iw as usize]
                                    };
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add the column matrix back onto one sample (adjoint of `im2col`).
fn col2im_add<F: Scalar>(col: &[F], g: &ConvGeom, dx: &mut [F]) {
    let [it_d, ih_d, iw_d] = g.t_in;
    let [ot_d, oh_d, ow_d] = g.t_out;
    let [st, sh, sw] = g.stride;
    let [pt, ph, pw] = g.pad;
    let p_total = g.out_positions();
    let mut row = 0usize;
    for ci in 0..g.cin {
        let dx_c = &mut dx[ci * it_d * ih_d * iw_d..(ci + 1) * it_d * ih_d * iw_d];
        for kt in 0..g.k[0] {
            for kh in 0..g.k[1] {
                for kw in 0..g.k[2] {
                    let src_row = &col[row * p_total..(row + 1) * p_total];
                    row += 1;
                    for ot in 0..ot_d {
                        let it = (ot * st + kt) as isize - pt as isize;
                        if it < 0 || it as usize >= it_d {
                            continue;
                        }
                        let plane = &src_row[ot * oh_d * ow_d..(ot + 1) * oh_d * ow_d];
                        let dx_t =
                            &mut dx_c[it as usize * ih_d * iw_d..(it as usize + 1) * ih_d * iw_d];
                        for oh in 0..oh_d {
                            let ih = (oh * sh + kh) as isize - ph as isize;
                            if ih < 0 || ih as usize >= ih_d {
                                continue;
                            }
                            let seg = &plane[oh * ow_d..(oh + 1) * ow_d];
                            let dx_row =
                                &mut dx_t[ih as usize * iw_d..(ih as usize + 1) * iw_d];
                            if sw == 1 {
                                // iw = ow + kw - pw: one contiguous span
                                let shift = kw as isize - pw as isize;
                                let lo = (-shift).max(0) as usize;
                                let hi =
                                    ((iw_d as isize - shift).clamp(0, ow_d as isize)) as usize;
                                if hi > lo {
                                    let d0 = (lo as isize + shift) as usize;
                                    for (d, &v) in dx_row[d0..d0 + (hi - lo)]
                                        .iter_mut()
                                        .zip(&seg[lo..hi])
                                    {
                                        *d += v;
                                    }
                                }
                            } else {
                                for (ow, &v) in seg.iter().enumerate() {
                                    let iw = (ow * sw + kw) as isize - pw as isize;
                                    if iw >= 0 && (iw as usize) < iw_d {
                                        dx_row[iw as usize] += v;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// In-range output column span for one kernel tap on a stride-1 axis:
/// iw = ow + kw - pw must land in [0, n). Returns (ow_lo, ow_hi_exclusive, shift).
#[inline]
fn tap_span(n_in: usize, n_out: usize, k: usize, pad: usize) -> impl Fn(usize) -> (usize, usize, isize) {
    let _ = k;
    move |tap: usize| {
        let shift = tap as isize - pad as isize;
        let lo = (-shift).max(0) as usize;
        let hi = ((n_in as isize - shift).clamp(0, n_out as isize)) as usize;
        (lo, hi.max(lo), shift)
    }
}

/// Direct stride-1 forward: accumulate shifted-row SAXPYs per kernel tap.
/// Avoids materializing the column matrix, which dominates on
/// shallow-channel layers.
fn conv3d_forward_s1<F: Scalar>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    bias: Option<&Tensor<F>>,
    g: &ConvGeom,
) -> Tensor<F> {
    let [it_d, ih_d, iw_d] = g.t_in;
    let [ot_d, oh_d, ow_d] = g.t_out;
    let p = g.out_positions();
    let in_stride = g.cin * it_d * ih_d * iw_d;
    let mut out = Tensor::zeros(&[g.batch, g.cout, ot_d, oh_d, ow_d]);
    let xd = x.data();
    let wd = w.data();
    let w_span = tap_span(iw_d, ow_d, g.k[2], g.pad[2]);
    out.data_mut().par_chunks_mut(g.cout * p).enumerate().for_each(|(b, out_b)| {
        let x_b = &xd[b * in_stride..(b + 1) * in_stride];
        for co in 0..g.cout {
            let out_c = &mut out_b[co * p..(co + 1) * p];
            if let Some(bias) = bias {
                out_c.fill(bias.data()[co]);
            }
            for ci in 0..g.cin {
                let x_c = &x_b[ci * it_d * ih_d * iw_d..(ci + 1) * it_d * ih_d * iw_d];
                for kt in 0..g.k[0] {
                    for kh in 0..g.k[1] {
                        for kw in 0..g.k[2] {
                            let wv = wd[(((co * g.cin + ci) * g.k[0] + kt) * g.k[1] + kh)
                                * g.k[2]
                                + kw];
                            if wv == F::zero() {
                                continue;
                            }
                            let (w_lo, w_hi, w_shift) = w_span(kw);
                            if w_hi <= w_lo {
                                continue;
                            }
                            for ot in 0..ot_d {
                                let it = ot as isize + kt as isize - g.pad[0] as isize;
                                if it < 0 || it as usize >= it_d {
                                    continue;
                                }
                                let x_t = &x_c[it as usize * ih_d * iw_d
                                    ..(it as usize + 1) * ih_d * iw_d];
                                let out_t =
                                    &mut out_c[ot * oh_d * ow_d..(ot + 1) * oh_d * ow_d];
                                for oh in 0..oh_d {
                                    let ih = oh as isize + kh as isize - g.pad[1] as isize;
                                    if ih < 0 || ih as usize >= ih_d {
                                        continue;
                                    }
                                    let src0 = (ih as usize * iw_d) as isize
                                        + w_lo as isize
                                        + w_shift;
                                    let xs = &x_t[src0 as usize..src0 as usize + (w_hi - w_lo)];
                                    let os = &mut out_t[oh * ow_d + w_lo..oh * ow_d + w_hi];
                                    for (o, &xv) in os.iter_mut().zip(xs) {
                                        *o += wv * xv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

/// Production forward pass: direct shifted-row kernels at stride 1, im2col +
/// GEMM otherwise.
pub fn conv3d_forward<F: Scalar>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    bias: Option<&Tensor<F>>,
    stride: [usize; 3],
    pad: [usize; 3],
) -> Result<Tensor<F>> {
    let g = conv_geometry(x.shape(), w.shape(), stride, pad)?;
    if let Some(b) = bias {
        if b.shape() != [g.cout] {
            return Err(Error::shape(format!(
                "conv3d bias shape {:?}, expected [{}]",
                b.shape(),
                g.cout
            )));
        }
    }
    if use_direct(&g) {
        return Ok(conv3d_forward_s1(x, w, bias, &g));
    }
    Ok(conv3d_forward_im2col(x, w, bias, &g))
}

fn conv3d_forward_im2col<F: Scalar>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    bias: Option<&Tensor<F>>,
    g: &ConvGeom,
) -> Tensor<F> {
    let p = g.out_positions();
    let kdim = g.col_rows();
    let in_stride = g.cin * g.t_in.iter().product::<usize>();
    let mut out = Tensor::zeros(&g.out_shape());
    let xd = x.data();
    let wd = w.data();
    out.data_mut()
        .par_chunks_mut(g.cout * p)
        .enumerate()
        .for_each(|(b, out_b)| {
            let mut col = vec![F::zero(); kdim * p];
            im2col(&xd[b * in_stride..(b + 1) * in_stride], g, &mut col);
            F::gemm(
                g.cout,
                kdim,
                p,
                F::one(),
                wd,
                kdim as isize,
                1,
                &col,
                p as isize,
                1,
                F::zero(),
                out_b,
                p as isize,
                1,
            );
            if let Some(bias) = bias {
                for (co, row) in out_b.chunks_mut(p).enumerate() {
                    let bv = bias.data()[co];
                    for v in row {
                        *v += bv;
                    }
                }
            }
        });
    out
}

/// Stride-1 layers with a small per-position GEMM panel run faster through
/// the shifted-row kernels than through im2col (the column matrix costs more
/// than the math on shallow layers). Threshold set empirically.
fn use_direct(g: &ConvGeom) -> bool {
    g.stride == [1, 1, 1] && g.cout * g.cin * g.kernel_volume() <= DIRECT_PATH_MAX_PANEL
}

const DIRECT_PATH_MAX_PANEL: usize = 512;

/// Direct stride-1 input gradient: for every kernel tap, the adjoint adds a
/// shifted-row SAXPY of the upstream gradient into dx.
fn conv3d_backward_input_s1<F: Scalar>(grad_out: &Tensor<F>, w: &Tensor<F>, g: &ConvGeom) -> Tensor<F> {
    let [it_d, ih_d, iw_d] = g.t_in;
    let [ot_d, oh_d, ow_d] = g.t_out;
    let p = g.out_positions();
    let in_stride = g.cin * it_d * ih_d * iw_d;
    let mut dx = Tensor::zeros(&[g.batch, g.cin, it_d, ih_d, iw_d]);
    let gd = grad_out.data();
    let wd = w.data();
    let w_span = tap_span(iw_d, ow_d, g.k[2], g.pad[2]);
    dx.data_mut().par_chunks_mut(in_stride).enumerate().for_each(|(b, dx_b)| {
        let g_b = &gd[b * g.cout * p..(b + 1) * g.cout * p];
        for ci in 0..g.cin {
            let dx_c = &mut dx_b[ci * it_d * ih_d * iw_d..(ci + 1) * it_d * ih_d * iw_d];
            for co in 0..g.cout {
                let g_c = &g_b[co * p..(co + 1) * p];
                for kt in 0..g.k[0] {
                    for kh in 0..g.k[1] {
                        for kw in 0..g.k[2] {
                            let wv = wd[(((co * g.cin + ci) * g.k[0] + kt) * g.k[1] + kh)
                                * g.k[2]
                                + kw];
                            if wv == F::zero() {
                                continue;
                            }
                            let (w_lo, w_hi, w_shift) = w_span(kw);
                            if w_hi <= w_lo {
                                continue;
                            }
                            for ot in 0..ot_d {
                                let it = ot as isize + kt as isize - g.pad[0] as isize;
                                if it < 0 || it as usize >= it_d {
                                    continue;
                                }
                                let dx_t = &mut dx_c[it as usize * ih_d * iw_d
                                    ..(it as usize + 1) * ih_d * iw_d];
                                let g_t = &g_c[ot * oh_d * ow_d..(ot + 1) * oh_d * ow_d];
                                for oh in 0..oh_d {
                                    let ih = oh as isize + kh as isize - g.pad[1] as isize;
                                    if ih < 0 || ih as usize >= ih_d {
                                        continue;
                                    }
                                    let dst0 = ih as usize * iw_d;
                                    let dst_lo = (w_lo as isize + w_shift) as usize;
                                    let ds = &mut dx_t
                                        [dst0 + dst_lo..dst0 + dst_lo + (w_hi - w_lo)];
                                    let gs = &g_t[oh * ow_d + w_lo..oh * ow_d + w_hi];
                                    for (d, &gv) in ds.iter_mut().zip(gs) {
                                        *d += wv * gv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    dx
}

/// Direct stride-1 weight gradient: per-tap dot products of upstream gradient
/// rows against shifted input rows, batch accumulated in index order.
fn conv3d_backward_weight_s1<F: Scalar>(x: &Tensor<F>, grad_out: &Tensor<F>, g: &ConvGeom) -> Tensor<F> {
    let [it_d, ih_d, iw_d] = g.t_in;
    let [ot_d, oh_d, ow_d] = g.t_out;
    let p = g.out_positions();
    let in_stride = g.cin * it_d * ih_d * iw_d;
    let kvol = g.kernel_volume();
    let mut dw = Tensor::zeros(&[g.cout, g.cin, g.k[0], g.k[1], g.k[2]]);
    let xd = x.data();
    let gd = grad_out.data();
    let w_span = tap_span(iw_d, ow_d, g.k[2], g.pad[2]);
    dw.data_mut().par_chunks_mut(g.cin * kvol).enumerate().for_each(|(co, dw_c)| {
        for b in 0..g.batch {
            let g_c = &gd[(b * g.cout + co) * p..(b * g.cout + co + 1) * p];
            let x_b = &xd[b * in_stride..(b + 1) * in_stride];
            for ci in 0..g.cin {
                let x_c = &x_b[ci * it_d * ih_d * iw_d..(ci + 1) * it_d * ih_d * iw_d];
                for kt in 0..g.k[0] {
                    for kh in 0..g.k[1] {
                        for kw in 0..g.k[2] {
                            let (w_lo, w_hi, w_shift) = w_span(kw);
                            if w_hi <= w_lo {
                                continue;
                            }
                            let mut acc = F::zero();
                            for ot in 0..ot_d {
                                let it = ot as isize + kt as isize - g.pad[0] as isize;
                                if it < 0 || it as usize >= it_d {
                                    continue;
                                }
                                let x_t = &x_c[it as usize * ih_d * iw_d
                                    ..(it as usize + 1) * ih_d * iw_d];
                                let g_t = &g_c[ot * oh_d * ow_d..(ot + 1) * oh_d * ow_d];
                                for oh in 0..oh_d {
                                    let ih = oh as isize + kh as isize - g.pad[1] as isize;
                                    if ih < 0 || ih as usize >= ih_d {
                                        continue;
                                    }
                                    let src0 =
                                        ih as usize * iw_d + (w_lo as isize + w_shift) as usize;
                                    let xs = &x_t[src0..src0 + (w_hi - w_lo)];
                                    let gs = &g_t[oh * ow_d + w_lo..oh * ow_d + w_hi];
                                    for (&xv, &gv) in xs.iter().zip(gs) {
                                        acc += xv * gv;
                                    }
                                }
                            }
                            dw_c[(ci * g.k[0] + kt) * g.k[1] * g.k[2] + kh * g.k[2] + kw] += acc;
                        }
                    }
                }
            }
        }
    });
    dw
}

/// Gradient w.r.t. the input: dcol = w^T * g, then col2im scatter.
pub fn conv3d_backward_input<F: Scalar>(grad_out: &Tensor<F>, w: &Tensor<F>, g: &ConvGeom) -> Tensor<F> {
    if use_direct(g) {
        return conv3d_backward_input_s1(grad_out, w, g);
    }
    conv3d_backward_input_im2col(grad_out, w, g)
}

fn conv3d_backward_input_im2col<F: Scalar>(grad_out: &Tensor<F>, w: &Tensor<F>, g: &ConvGeom) -> Tensor<F> {
    let p = g.out_positions();
    let kdim = g.col_rows();
    let in_stride = g.cin * g.t_in.iter().product::<usize>();
    let mut dx =
        Tensor::zeros(&[g.batch, g.cin, g.t_in[0], g.t_in[1], g.t_in[2]]);
    let gd = grad_out.data();
    let wd = w.data();
    dx.data_mut()
        .par_chunks_mut(in_stride)
        .enumerate()
        .for_each(|(b, dx_b)| {
            let mut dcol = vec![F::zero(); kdim * p];
            F::gemm(
                kdim,
                g.cout,
                p,
                F::one(),
                wd,
                1,
                kdim as isize,
                &gd[b * g.cout * p..(b + 1) * g.cout * p],
                p as isize,
                1,
                F::zero(),
                &mut dcol,
                p as isize,
                1,
            );
            col2im_add(&dcol, g, dx_b);
        });
    dx
}

/// Gradient w.r.t. the weight, accumulated over the batch in index order.
pub fn conv3d_backward_weight<F: Scalar>(x: &Tensor<F>, grad_out: &Tensor<F>, g: &ConvGeom) -> Tensor<F> {
    if use_direct(g) {
        return conv3d_backward_weight_s1(x, grad_out, g);
    }
    conv3d_backward_weight_im2col(x, grad_out, g)
}

fn conv3d_backward_weight_im2col<F: Scalar>(x: &Tensor<F>, grad_out: &Tensor<F>, g: &ConvGeom) -> Tensor<F> {
    let p = g.out_positions();
    let kdim = g.col_rows();
    let in_stride = g.cin * g.t_in.iter().product::<usize>();
    let mut dw = Tensor::zeros(&[g.cout, g.cin, g.k[0], g.k[1], g.k[2]]);
    let mut col = vec![F::zero(); kdim * p];
    for b in 0..g.batch {
        im2col(&x.data()[b * in_stride..(b + 1) * in_stride], g, &mut col);
        F::gemm(
            g.cout,
            p,
            kdim,
            F::one(),
            &grad_out.data()[b * g.cout * p..(b + 1) * g.cout * p],
            p as isize,
            1,
            &col,
            1,
            p as isize,
            F::one(),
            dw.data_mut(),
            kdim as isize,
            1,
        );
    }
    dw
}

pub fn conv3d_backward_bias<F: Scalar>(grad_out: &Tensor<F>, g: &ConvGeom) -> Tensor<F> {
    let p = g.out_positions();
    let mut db = Tensor::zeros(&[g.cout]);
    for b in 0..g.batch {
        for co in 0..g.cout {
            let row = &grad_out.data()[(b * g.cout + co) * p..(b * g.cout + co + 1) * p];
            let mut acc = F::zero();
            for &v in row {
                acc += v;
            }
            db.data_mut()[co] += acc;
        }
    }
    db
}

/// Reference implementation: straight loops, no im2col. Test oracle for the
/// GEMM path; also exercised by the partial-conv equivalence suite.
pub fn conv3d_naive<F: Scalar>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    bias: Option<&Tensor<F>>,
    stride: [usize; 3],
    pad: [usize; 3],
) -> Result<Tensor<F>> {
    let g = conv_geometry(x.shape(), w.shape(), stride, pad)?;
    let [it_d, ih_d, iw_d] = g.t_in;
    let [ot_d, oh_d, ow_d] = g.t_out;
    let mut out = Tensor::zeros(&[g.batch, g.cout, ot_d, oh_d, ow_d]);
    let xd = x.data();
    let wd = w.data();
    let od = out.data_mut();
    for b in 0..g.batch {
        for co in 0..g.cout {
            for ot in 0..ot_d {
                for oh in 0..oh_d {
                    for ow in 0..ow_d {
                        let mut acc = match bias {
                            Some(bt) => bt.data()[co],
                            None => F::zero(),
                        };
                        for ci in 0..g.cin {
                            for kt in 0..g.k[0] {
                                let it = (ot * g.stride[0] + kt) as isize - g.pad[0] as isize;
                                if it < 0 || it as usize >= it_d {
                                    continue;
                                }
                                for kh in 0..g.k[1] {
                                    let ih = (oh * g.stride[1] + kh) as isize - g.pad[1] as isize;
                                    if ih < 0 || ih as usize >= ih_d {
                                        continue;
                                    }
                                    for kw in 0..g.k[2] {
                                        let iw =
                                            (ow * g.stride[2] + kw) as isize - g.pad[2] as isize;
                                        if iw < 0 || iw as usize >= iw_d {
                                            continue;
                                        }
                                        let xi = (((b * g.cin + ci) * it_d + it as usize) * ih_d
                                            + ih as usize)
                                            * iw_d
                                            + iw as usize;
                                        let wi = (((co * g.cin + ci) * g.k[0] + kt) * g.k[1] + kh)
                                            * g.k[2]
                                            + kw;
                                        acc += xd[xi] * wd[wi];
                                    }
                                }
                            }
                        }
                        od[(((b * g.cout + co) * ot_d + ot) * oh_d + oh) * ow_d + ow] = acc;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// 1D sliding window sum along the innermost axis of `rows` many length-`n`
/// rows: out[o] = sum over in-range taps of x[o*stride + k - pad].
fn window_sum_axis<F: Scalar>(
    x: &[F],
    rows: usize,
    n: usize,
    k: usize,
    stride: usize,
    pad: usize,
    out_n: usize,
    out: &mut Vec<F>,
) {
    out.clear();
    out.resize(rows * out_n, F::zero());
    for r in 0..rows {
        let src = &x[r * n..(r + 1) * n];
        let dst = &mut out[r * out_n..(r + 1) * out_n];
        for (o, dv) in dst.iter_mut().enumerate() {
            let lo_signed = (o * stride) as isize - pad as isize;
            let lo = lo_signed.max(0) as usize;
            let hi = ((lo_signed + k as isize).min(n as isize)) as usize;
            let mut acc = F::zero();
            for &v in &src[lo..hi] {
                acc += v;
            }
            *dv = acc;
        }
    }
}

/// Sliding-window sum of a mask over all channels and kernel taps: the
/// `sum(M)` of the partial-convolution renormalization. Output [B,1,oT,oH,oW].
/// Separable: channel sum, then one sliding pass per axis.
pub fn window_sum3d<F: Scalar>(
    mask: &Tensor<F>,
    k: [usize; 3],
    stride: [usize; 3],
    pad: [usize; 3],
) -> Result<Tensor<F>> {
    let d = mask.dims5()?;
    let g = conv_geometry(mask.shape(), &[1, d[1], k[0], k[1], k[2]], stride, pad)?;
    let [it_d, ih_d, iw_d] = g.t_in;
    let [ot_d, oh_d, ow_d] = g.t_out;
    let p = g.out_positions();
    let mut out = Tensor::zeros(&[g.batch, 1, ot_d, oh_d, ow_d]);
    let md = mask.data();
    let c_stride = it_d * ih_d * iw_d;
    out.data_mut().par_chunks_mut(p).enumerate().for_each(|(b, out_b)| {
        // channel sum
        let mut csum = vec![F::zero(); c_stride];
        for ci in 0..g.cin {
            let m_c = &md[(b * g.cin + ci) * c_stride..(b * g.cin + ci + 1) * c_stride];
            for (acc, &v) in csum.iter_mut().zip(m_c) {
                *acc += v;
            }
        }
        // W axis: [T,H,W] -> [T,H,OW]
        let mut w_pass = Vec::new();
        window_sum_axis(&csum, it_d * ih_d, iw_d, k[2], stride[2], pad[2], ow_d, &mut w_pass);
        // H axis: transpose H<->W per frame so H becomes innermost
        let mut trans = vec![F::zero(); it_d * ow_d * ih_d];
        for t in 0..it_d {
            let src = &w_pass[t * ih_d * ow_d..(t + 1) * ih_d * ow_d];
            let dst = &mut trans[t * ow_d * ih_d..(t + 1) * ow_d * ih_d];
            for h in 0..ih_d {
                for w in 0..ow_d {
                    dst[w * ih_d + h] = src[h * ow_d + w];
                }
            }
        }
        let mut h_pass = Vec::new();
        window_sum_axis(&trans, it_d * ow_d, ih_d, k[1], stride[1], pad[1], oh_d, &mut h_pass);
        // T axis: transpose to put T innermost per (w,h) column
        let mut trans_t = vec![F::zero(); ow_d * oh_d * it_d];
        for t in 0..it_d {
            for wh in 0..ow_d * oh_d {
                trans_t[wh * it_d + t] = h_pass[t * ow_d * oh_d + wh];
            }
        }
        let mut t_pass = Vec::new();
        window_sum_axis(&trans_t, ow_d * oh_d, it_d, k[0], stride[0], pad[0], ot_d, &mut t_pass);
        // t_pass layout is [OW, OH, OT]; restore [OT, OH, OW]
        for w in 0..ow_d {
            for h in 0..oh_d {
                for t in 0..ot_d {
                    out_b[(t * oh_d + h) * ow_d + w] = t_pass[(w * oh_d + h) * ot_d + t];
                }
            }
        }
    });
    Ok(out)
}


#[cfg(test)]
mod path_bench {
    use super::*;
    use std::time::Instant;

    #[test]
    #[ignore]
    fn direct_vs_gemm_per_decoder_layer() {
        let layers: Vec<(usize, usize, [usize; 3])> = vec![
            (128, 64, [1, 2, 2]),
            (128, 64, [3, 4, 4]),
            (96, 32, [3, 8, 8]),
            (48, 16, [3, 16, 16]),
            (24, 8, [3, 32, 32]),
            (10, 1, [3, 64, 64]),
        ];
        for (cin, cout, twh) in layers {
            let b = 16usize;
            let x = Tensor::<f32>::filled(&[b, cin, twh[0], twh[1], twh[2]], 1.0);
            let w = Tensor::<f32>::filled(&[cout, cin, 1, 3, 3], 0.5);
            let g = conv_geometry(x.shape(), w.shape(), [1, 1, 1], [0, 1, 1]).unwrap();
            let go = Tensor::<f32>::filled(g.out_shape().as_slice(), 1.0);
            let reps = 5;
            let time = |f: &dyn Fn()| {
                let t0 = Instant::now();
                for _ in 0..reps {
                    f();
                }
                t0.elapsed().as_secs_f64() * 1000.0 / reps as f64
            };
            let fwd_direct = time(&|| {
                let _ = conv3d_forward_s1(&x, &w, None, &g);
            });
            let fwd_gemm = time(&|| {
                let _ = conv3d_forward_im2col(&x, &w, None, &g);
            });
            let bwd_i_direct = time(&|| {
                let _ = conv3d_backward_input_s1(&go, &w, &g);
            });
            let bwd_i_gemm = time(&|| {
                let _ = conv3d_backward_input_im2col(&go, &w, &g);
            });
            let bwd_w_direct = time(&|| {
                let _ = conv3d_backward_weight_s1(&x, &go, &g);
            });
            let bwd_w_gemm = time(&|| {
                let _ = conv3d_backward_weight_im2col(&x, &go, &g);
            });
            println!(
                "cin {cin:4} cout {cout:3} twh {twh:?}: fwd {fwd_direct:7.2}/{fwd_gemm:7.2}  bwd_i {bwd_i_direct:7.2}/{bwd_i_gemm:7.2}  bwd_w {bwd_w_direct:7.2}/{bwd_w_gemm:7.2}  (direct/gemm ms)"
            );
        }
    }
}
