//! Reverse-mode automatic differentiation over a flat tape.
//!
//! Ops record their inputs by node index; `backward` walks the tape in exact
//! reverse execution order and accumulates gradients with fixed-order
//! reductions, so two executions of the same tape are bit-identical.

use super::conv::{
    conv3d_backward_bias, conv3d_backward_input, conv3d_backward_weight, conv3d_forward,
    conv_geometry, window_sum3d, ConvGeom,
};
use super::{same_shape, Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VarId(pub usize);

/// Per-channel binary mask stored as channel groups: a (count, single-channel
/// tensor) list. Groups arise naturally (all channels of one feature map
/// share a mask; concatenation appends groups), which keeps mask bookkeeping
/// O(voxels) instead of O(channels * voxels). Tensors are Arc-shared.
#[derive(Clone, Debug)]
pub struct GroupedMask<F: Scalar> {
    batch: usize,
    twh: [usize; 3],
    groups: Vec<(usize, std::sync::Arc<Tensor<F>>)>,
}

impl<F: Scalar> GroupedMask<F> {
    /// One group covering `channels` channels of a [B,1,T,H,W] mask.
    pub fn broadcast(mask: Tensor<F>, channels: usize) -> Result<Self> {
        let d = mask.dims5()?;
        if d[1] != 1 {
            return Err(Error::shape("grouped mask expects a single-channel tensor"));
        }
        if channels == 0 {
            return Err(Error::shape("grouped mask needs at least one channel"));
        }
        Ok(GroupedMask {
            batch: d[0],
            twh: [d[2], d[3], d[4]],
            groups: vec![(channels, std::sync::Arc::new(mask))],
        })
    }

    /// Split an arbitrary [B,C,T,H,W] mask into C single-channel groups.
    pub fn from_full(mask: &Tensor<F>) -> Result<Self> {
        let d = mask.dims5()?;
        let (b, c) = (d[0], d[1]);
        let spatial = d[2] * d[3] * d[4];
        let mut groups = Vec::with_capacity(c);
        for ci in 0..c {
            let mut data = Vec::with_capacity(b * spatial);
            for bi in 0..b {
                let base = (bi * c + ci) * spatial;
                data.extend_from_slice(&mask.data()[base..base + spatial]);
            }
            let t = Tensor::new(vec![b, 1, d[2], d[3], d[4]], data)?;
            groups.push((1, std::sync::Arc::new(t)));
        }
        Ok(GroupedMask { batch: b, twh: [d[2], d[3], d[4]], groups })
    }

    pub fn batch(&self) -> usize {
        self.batch
    }
    pub fn twh(&self) -> [usize; 3] {
        self.twh
    }
    pub fn channels(&self) -> usize {
        self.groups.iter().map(|(c, _)| c).sum()
    }

    pub fn any_valid(&self) -> bool {
        self.groups.iter().any(|(_, m)| m.data().iter().any(|&v| v != F::zero()))
    }

    /// Concatenate along channels (appends groups).
    pub fn concat(&self, other: &Self) -> Result<Self> {
        if self.batch != other.batch || self.twh != other.twh {
            return Err(Error::shape("grouped mask concat: shapes differ"));
        }
        let mut groups = self.groups.clone();
        groups.extend(other.groups.iter().cloned());
        Ok(GroupedMask { batch: self.batch, twh: self.twh, groups })
    }

    /// Nearest-neighbor resize of each group's mask.
    pub fn upsample_to(&self, target: [usize; 3]) -> Self {
        let s = self.twh;
        let src_sp = s[0] * s[1] * s[2];
        let dst_sp = target[0] * target[1] * target[2];
        let groups = self
            .groups
            .iter()
            .map(|(count, m)| {
                let mut out = Tensor::zeros(&[self.batch, 1, target[0], target[1], target[2]]);
                let md = m.data();
                let od = out.data_mut();
                for b in 0..self.batch {
                    for ot in 0..target[0] {
                        let it = ot * s[0] / target[0];
                        for oh in 0..target[1] {
                            let ih = oh * s[1] / target[1];
                            for ow in 0..target[2] {
                                let iw = ow * s[2] / target[2];
                                od[b * dst_sp + (ot * target[1] + oh) * target[2] + ow] =
                                    md[b * src_sp + (it * s[1] + ih) * s[2] + iw];
                            }
                        }
                    }
                }
                (*count, std::sync::Arc::new(out))
            })
            .collect();
        GroupedMask { batch: self.batch, twh: target, groups }
    }

    /// x .* M over the grouped channel ranges.
    pub fn apply_to(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let mut out = x.clone();
        self.apply_inplace(&mut out)?;
        Ok(out)
    }

    pub fn apply_inplace(&self, x: &mut Tensor<F>) -> Result<()> {
        let d = x.dims5()?;
        if d[0] != self.batch || [d[2], d[3], d[4]] != self.twh || d[1] != self.channels() {
            return Err(Error::shape(format!(
                "grouped mask {:?}x{} does not cover tensor {:?}",
                self.twh,
                self.channels(),
                d
            )));
        }
        let spatial = self.twh.iter().product::<usize>();
        let c_total = d[1];
        let xd = x.data_mut();
        for b in 0..self.batch {
            let mut c0 = 0usize;
            for (count, m) in &self.groups {
                let ms = &m.data()[b * spatial..(b + 1) * spatial];
                for ci in c0..c0 + count {
                    let xs = &mut xd[(b * c_total + ci) * spatial..(b * c_total + ci + 1) * spatial];
                    for (v, &mv) in xs.iter_mut().zip(ms) {
                        *v *= mv;
                    }
                }
                c0 += count;
            }
        }
        Ok(())
    }

    /// sum(M) over every window and all channels: group counts weight the
    /// per-group single-channel window sums.
    pub fn window_sum(&self, k: [usize; 3], stride: [usize; 3], pad: [usize; 3]) -> Result<Tensor<F>> {
        let mut acc: Option<Tensor<F>> = None;
        for (count, m) in &self.groups {
            let ws = window_sum3d(m, k, stride, pad)?;
            let cf = F::from_f64(*count as f64);
            match &mut acc {
                None => {
                    let mut first = ws;
                    for v in first.data_mut() {
                        *v *= cf;
                    }
                    acc = Some(first);
                }
                Some(a) => {
                    for (av, &wv) in a.data_mut().iter_mut().zip(ws.data()) {
                        *av += cf * wv;
                    }
                }
            }
        }
        Ok(acc.expect("grouped mask has at least one group"))
    }

    /// Materialize the full [B,C,T,H,W] mask (tests, diagnostics).
    pub fn to_full(&self) -> Tensor<F> {
        let spatial = self.twh.iter().product::<usize>();
        let c = self.channels();
        let mut out = Tensor::zeros(&[self.batch, c, self.twh[0], self.twh[1], self.twh[2]]);
        let od = out.data_mut();
        for b in 0..self.batch {
            let mut c0 = 0usize;
            for (count, m) in &self.groups {
                let ms = &m.data()[b * spatial..(b + 1) * spatial];
                for ci in c0..c0 + count {
                    od[(b * c + ci) * spatial..(b * c + ci + 1) * spatial].copy_from_slice(ms);
                }
                c0 += count;
            }
        }
        out
    }
}

enum Op<F: Scalar> {
    Leaf,
    Conv3d {
        x: usize,
        w: usize,
        bias: Option<usize>,
        geom: ConvGeom,
    },
    /// Mask-renormalized convolution. The mask path is constant data, not part
    /// of the differentiable graph: `masked_x` (input with holes zeroed),
    /// `ratio` (|W|/sum(M), zero where the window has no valid voxel, shape
    /// [B,1,out]) and `valid` (binary, same shape as `ratio`) are saved at
    /// forward time.
    PartialConv3d {
        x: usize,
        w: usize,
        bias: usize,
        geom: ConvGeom,
        mask: GroupedMask<F>,
        masked_x: Tensor<F>,
        ratio: Tensor<F>,
        valid: Tensor<F>,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Tensor<F>,
        inv_std: Vec<F>,
        train: bool,
        /// Optional fused activation: None, or Some(slope) for (leaky) relu
        /// with slope 0 = plain relu.
        act: Option<F>,
    },
    Relu {
        x: usize,
    },
    LeakyRelu {
        x: usize,
        slope: F,
    },
    UpsampleNearest {
        x: usize,
    },
    ConcatChannels {
        a: usize,
        b: usize,
        a_channels: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Sub {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        x: usize,
        c: F,
    },
    /// a + c*b (elementwise; used to combine loss terms).
    AddScaled {
        a: usize,
        b: usize,
        c: F,
    },
    Sum {
        x: usize,
    },
    Mean {
        x: usize,
    },
    /// inv_count * sum(weight .* |pred - target|) -> scalar.
    MaskedL1 {
        pred: usize,
        target: Tensor<F>,
        weight: Tensor<F>,
        inv_count: F,
    },
}

struct Node<F: Scalar> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Gradients keyed by tape position after a `backward` pass.
pub struct Gradients<F: Scalar> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, id: VarId) -> Option<&Tensor<F>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
    pub fn take(&mut self, id: VarId) -> Option<Tensor<F>> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

pub struct Graph<F: Scalar> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: VarId) -> &Tensor<F> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> VarId {
        self.nodes.push(Node { value, op, requires_grad });
        VarId(self.nodes.len() - 1)
    }

    fn req(&self, id: usize) -> bool {
        self.nodes[id].requires_grad
    }

    /// Insert a leaf value. `requires_grad` marks trainable tensors.
    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> VarId {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn conv3d(
        &mut self,
        x: VarId,
        w: VarId,
        bias: Option<VarId>,
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Result<VarId> {
        let geom = conv_geometry(self.value(x).shape(), self.value(w).shape(), stride, pad)?;
        let out = conv3d_forward(
            self.value(x),
            self.value(w),
            bias.map(|b| self.value(b)),
            stride,
            pad,
        )?;
        let rg = self.req(x.0) || self.req(w.0) || bias.map(|b| self.req(b.0)).unwrap_or(false);
        Ok(self.push(out, Op::Conv3d { x: x.0, w: w.0, bias: bias.map(|b| b.0), geom }, rg))
    }

    /// Partial convolution: output renormalized by |W|/sum(M) over each
    /// window, zero where the window holds no valid voxel. |W| counts the
    /// in-range taps of the window (zero-padding taps are not part of the
    /// visible window; for interior positions |W| = kt*kh*kw*Cin exactly), so
    /// an all-ones mask reproduces the plain convolution bit-for-bit at the
    /// borders too. Returns the output node and the updated mask (binary,
    /// broadcast to `cout` channels).
    pub fn partial_conv3d(
        &mut self,
        x: VarId,
        mask: &GroupedMask<F>,
        w: VarId,
        bias: VarId,
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Result<(VarId, GroupedMask<F>)> {
        {
            let d = self.value(x).dims5()?;
            if d[0] != mask.batch() || [d[2], d[3], d[4]] != mask.twh() || d[1] != mask.channels() {
                return Err(Error::shape("partial_conv3d: input/mask shapes differ"));
            }
        }
        let geom = conv_geometry(self.value(x).shape(), self.value(w).shape(), stride, pad)?;
        let msum = mask.window_sum(geom.k, stride, pad)?;
        // per-axis in-range tap counts per output index
        let axis_counts = |axis: usize| -> Vec<usize> {
            (0..geom.t_out[axis])
                .map(|o| {
                    (0..geom.k[axis])
                        .filter(|&kk| {
                            let i = (o * geom.stride[axis] + kk) as isize - geom.pad[axis] as isize;
                            i >= 0 && (i as usize) < geom.t_in[axis]
                        })
                        .count()
                })
                .collect()
        };
        let (ct, ch, cw) = (axis_counts(0), axis_counts(1), axis_counts(2));
        let p_out = geom.out_positions();
        let mut window = vec![F::zero(); p_out];
        {
            let mut idx = 0;
            for &a in &ct {
                for &b in &ch {
                    for &c in &cw {
                        window[idx] = F::from_f64((a * b * c * geom.cin) as f64);
                        idx += 1;
                    }
                }
            }
        }
        let mut ratio = Tensor::zeros(msum.shape());
        let mut valid = Tensor::zeros(msum.shape());
        for (i, ((r, v), &s)) in ratio
            .data_mut()
            .iter_mut()
            .zip(valid.data_mut().iter_mut())
            .zip(msum.data())
            .enumerate()
        {
            if s > F::zero() {
                *r = window[i % p_out] / s;
                *v = F::one();
            }
        }
        let masked_x = mask.apply_to(self.value(x))?;
        let raw = conv3d_forward(&masked_x, self.value(w), None, stride, pad)?;
        let p = geom.out_positions();
        let mut out = raw;
        {
            let bias_v = self.value(bias).data().to_vec();
            let od = out.data_mut();
            for b in 0..geom.batch {
                let rv = &ratio.data()[b * p..(b + 1) * p];
                let vv = &valid.data()[b * p..(b + 1) * p];
                for co in 0..geom.cout {
                    let row = &mut od[(b * geom.cout + co) * p..(b * geom.cout + co + 1) * p];
                    let bv = bias_v[co];
                    for ((o, &r), &v) in row.iter_mut().zip(rv).zip(vv) {
                        *o = *o * r + bv * v;
                    }
                }
            }
        }
        // updated mask: one group of `valid` shared by all output channels
        let new_mask = GroupedMask::broadcast(valid.clone(), geom.cout)?;
        let rg = self.req(x.0) || self.req(w.0) || self.req(bias.0);
        let id = self.push(
            out,
            Op::PartialConv3d {
                x: x.0,
                w: w.0,
                bias: bias.0,
                geom,
                mask: mask.clone(),
                masked_x,
                ratio,
                valid,
            },
            rg,
        );
        Ok((id, new_mask))
    }

    /// Batch normalization over (B,T,H,W) per channel. In train mode the batch
    /// statistics are returned for the caller's running-stat update; in eval
    /// mode `running` supplies them.
    pub fn batch_norm(
        &mut self,
        x: VarId,
        gamma: VarId,
        beta: VarId,
        eps: f64,
        running: Option<(&[F], &[F])>,
    ) -> Result<(VarId, Option<(Vec<F>, Vec<F>)>)> {
        self.batch_norm_act(x, gamma, beta, eps, running, None)
    }

    /// Batch norm with an optionally fused (leaky) relu on the output.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm_act(
        &mut self,
        x: VarId,
        gamma: VarId,
        beta: VarId,
        eps: f64,
        running: Option<(&[F], &[F])>,
        act: Option<f64>,
    ) -> Result<(VarId, Option<(Vec<F>, Vec<F>)>)> {
        let d = self.value(x).dims5()?;
        let (b, c) = (d[0], d[1]);
        let spatial = d[2] * d[3] * d[4];
        let n = b * spatial;
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(Error::shape("batch_norm: gamma/beta must have one value per channel"));
        }
        let train = running.is_none();
        let (mean, var): (Vec<F>, Vec<F>) = match running {
            Some((m, v)) => (m.to_vec(), v.to_vec()),
            None => {
                let xd = self.value(x).data();
                let mut mean = vec![F::zero(); c];
                let mut var = vec![F::zero(); c];
                for ci in 0..c {
                    let mut acc = F::zero();
                    for bi in 0..b {
                        let base = (bi * c + ci) * spatial;
                        for &v in &xd[base..base + spatial] {
                            acc += v;
                        }
                    }
                    mean[ci] = acc / F::from_f64(n as f64);
                }
                for ci in 0..c {
                    let mut acc = F::zero();
                    for bi in 0..b {
                        let base = (bi * c + ci) * spatial;
                        for &v in &xd[base..base + spatial] {
                            let dvi = v - mean[ci];
                            acc += dvi * dvi;
                        }
                    }
                    var[ci] = acc / F::from_f64(n as f64);
                }
                (mean, var)
            }
        };
        let epsf = F::from_f64(eps);
        let inv_std: Vec<F> = var.iter().map(|&v| (v + epsf).sqrt().recip()).collect();
        let mut xhat = Tensor::zeros(self.value(x).shape());
        let mut out = Tensor::zeros(self.value(x).shape());
        {
            let xd = self.value(x).data();
            let g = self.value(gamma).data().to_vec();
            let be = self.value(beta).data().to_vec();
            let hd = xhat.data_mut();
            let od = out.data_mut();
            for bi in 0..b {
                for ci in 0..c {
                    let base = (bi * c + ci) * spatial;
                    let (m, sdi) = (mean[ci], inv_std[ci]);
                    let (gv, bv) = (g[ci], be[ci]);
                    match act {
                        None => {
                            for ((h, o), &xv) in hd[base..base + spatial]
                                .iter_mut()
                                .zip(od[base..base + spatial].iter_mut())
                                .zip(&xd[base..base + spatial])
                            {
                                let hh = (xv - m) * sdi;
                                *h = hh;
                                *o = gv * hh + bv;
                            }
                        }
                        Some(slope) => {
                            let sl = F::from_f64(slope);
                            for ((h, o), &xv) in hd[base..base + spatial]
                                .iter_mut()
                                .zip(od[base..base + spatial].iter_mut())
                                .zip(&xd[base..base + spatial])
                            {
                                let hh = (xv - m) * sdi;
                                *h = hh;
                                let pre = gv * hh + bv;
                                *o = if pre > F::zero() { pre } else { pre * sl };
                            }
                        }
                    }
                }
            }
        }
        let stats = if train { Some((mean, var)) } else { None };
        let rg = self.req(x.0) || self.req(gamma.0) || self.req(beta.0);
        let id = self.push(
            out,
            Op::BatchNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                inv_std,
                train,
                act: act.map(F::from_f64),
            },
            rg,
        );
        Ok((id, stats))
    }

    pub fn relu(&mut self, x: VarId) -> VarId {
        let out = self.value(x).map(|v| if v > F::zero() { v } else { F::zero() });
        let rg = self.req(x.0);
        self.push(out, Op::Relu { x: x.0 }, rg)
    }

    pub fn leaky_relu(&mut self, x: VarId, slope: f64) -> VarId {
        let s = F::from_f64(slope);
        let out = self.value(x).map(|v| if v > F::zero() { v } else { v * s });
        let rg = self.req(x.0);
        self.push(out, Op::LeakyRelu { x: x.0, slope: s }, rg)
    }

    /// Nearest-neighbor resize of the (t,h,w) axes:
    /// `src_idx = floor(dst_idx * src_dim / dst_dim)`.
    pub fn upsample_nearest_to(&mut self, x: VarId, target: [usize; 3]) -> Result<VarId> {
        if target.iter().any(|&d| d == 0) {
            return Err(Error::param("upsample target dims must be >= 1"));
        }
        let d = self.value(x).dims5()?;
        let (b, c) = (d[0], d[1]);
        let src = [d[2], d[3], d[4]];
        let out_shape = [b, c, target[0], target[1], target[2]];
        let mut out = Tensor::zeros(&out_shape);
        {
            let xd = self.value(x).data();
            let od = out.data_mut();
            let src_spatial = src[0] * src[1] * src[2];
            let dst_spatial = target[0] * target[1] * target[2];
            for bc in 0..b * c {
                let xs = &xd[bc * src_spatial..(bc + 1) * src_spatial];
                let os = &mut od[bc * dst_spatial..(bc + 1) * dst_spatial];
                for ot in 0..target[0] {
                    let it = ot * src[0] / target[0];
                    for oh in 0..target[1] {
                        let ih = oh * src[1] / target[1];
                        for ow in 0..target[2] {
                            let iw = ow * src[2] / target[2];
                            os[(ot * target[1] + oh) * target[2] + ow] =
                                xs[(it * src[1] + ih) * src[2] + iw];
                        }
                    }
                }
            }
        }
        let rg = self.req(x.0);
        Ok(self.push(out, Op::UpsampleNearest { x: x.0 }, rg))
    }

    pub fn concat_channels(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let da = self.value(a).dims5()?;
        let db = self.value(b).dims5()?;
        if da[0] != db[0] || da[2..] != db[2..] {
            return Err(Error::shape(format!(
                "concat_channels: shapes {:?} and {:?} differ outside the channel axis",
                da, db
            )));
        }
        let spatial = da[2] * da[3] * da[4];
        let (ca, cb) = (da[1], db[1]);
        let mut out = Tensor::zeros(&[da[0], ca + cb, da[2], da[3], da[4]]);
        {
            let ad = self.value(a).data();
            let bd = self.value(b).data();
            let od = out.data_mut();
            for bi in 0..da[0] {
                let dst = &mut od[bi * (ca + cb) * spatial..(bi + 1) * (ca + cb) * spatial];
                dst[..ca * spatial]
                    .copy_from_slice(&ad[bi * ca * spatial..(bi + 1) * ca * spatial]);
                dst[ca * spatial..]
                    .copy_from_slice(&bd[bi * cb * spatial..(bi + 1) * cb * spatial]);
            }
        }
        let rg = self.req(a.0) || self.req(b.0);
        Ok(self.push(out, Op::ConcatChannels { a: a.0, b: b.0, a_channels: ca }, rg))
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        same_shape(self.value(a), self.value(b), "add")?;
        let out = Tensor::new(
            self.value(a).shape().to_vec(),
            self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x + y).collect(),
        )?;
        let rg = self.req(a.0) || self.req(b.0);
        Ok(self.push(out, Op::Add { a: a.0, b: b.0 }, rg))
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        same_shape(self.value(a), self.value(b), "sub")?;
        let out = Tensor::new(
            self.value(a).shape().to_vec(),
            self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x - y).collect(),
        )?;
        let rg = self.req(a.0) || self.req(b.0);
        Ok(self.push(out, Op::Sub { a: a.0, b: b.0 }, rg))
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        same_shape(self.value(a), self.value(b), "mul")?;
        let out = Tensor::new(
            self.value(a).shape().to_vec(),
            self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect(),
        )?;
        let rg = self.req(a.0) || self.req(b.0);
        Ok(self.push(out, Op::Mul { a: a.0, b: b.0 }, rg))
    }

    pub fn scale(&mut self, x: VarId, c: F) -> VarId {
        let out = self.value(x).map(|v| v * c);
        let rg = self.req(x.0);
        self.push(out, Op::Scale { x: x.0, c }, rg)
    }

    pub fn add_scaled(&mut self, a: VarId, b: VarId, c: F) -> Result<VarId> {
        same_shape(self.value(a), self.value(b), "add_scaled")?;
        let out = Tensor::new(
            self.value(a).shape().to_vec(),
            self.value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(&x, &y)| x + c * y)
                .collect(),
        )?;
        let rg = self.req(a.0) || self.req(b.0);
        Ok(self.push(out, Op::AddScaled { a: a.0, b: b.0, c }, rg))
    }

    pub fn sum(&mut self, x: VarId) -> VarId {
        let mut acc = F::zero();
        for &v in self.value(x).data() {
            acc += v;
        }
        let rg = self.req(x.0);
        self.push(Tensor::scalar(acc), Op::Sum { x: x.0 }, rg)
    }

    pub fn mean(&mut self, x: VarId) -> VarId {
        let n = self.value(x).numel();
        let mut acc = F::zero();
        for &v in self.value(x).data() {
            acc += v;
        }
        let rg = self.req(x.0);
        self.push(Tensor::scalar(acc / F::from_f64(n as f64)), Op::Mean { x: x.0 }, rg)
    }

    /// `inv_count * sum(weight .* |pred - target|)`; `weight` and `target` are
    /// constants. The scalar result is differentiable w.r.t. `pred`.
    pub fn masked_l1(
        &mut self,
        pred: VarId,
        target: &Tensor<F>,
        weight: &Tensor<F>,
        inv_count: F,
    ) -> Result<VarId> {
        same_shape(self.value(pred), target, "masked_l1 pred/target")?;
        same_shape(self.value(pred), weight, "masked_l1 pred/weight")?;
        let mut acc = F::zero();
        for ((&p, &t), &w) in self.value(pred).data().iter().zip(target.data()).zip(weight.data())
        {
            acc += w * (p - t).abs();
        }
        let rg = self.req(pred.0);
        Ok(self.push(
            Tensor::scalar(acc * inv_count),
            Op::MaskedL1 { pred: pred.0, target: target.clone(), weight: weight.clone(), inv_count },
            rg,
        ))
    }

    /// Reverse pass from `root` (typically a scalar loss).
    pub fn backward(&self, root: VarId) -> Result<Gradients<F>> {
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::filled(self.value(root).shape(), F::one()));
        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(grads: &mut [Option<Tensor<F>>], id: usize, delta: Tensor<F>) {
        match &mut grads[id] {
            Some(existing) => {
                for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                    *e += *d;
                }
            }
            slot => *slot = Some(delta),
        }
    }

    fn propagate(
        &self,
        idx: usize,
        g: &Tensor<F>,
        grads: &mut [Option<Tensor<F>>],
    ) -> Result<()> {
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Conv3d { x, w, bias, geom } => {
                if self.req(*x) {
                    let dx = conv3d_backward_input(g, &self.nodes[*w].value, geom);
                    Self::accumulate(grads, *x, dx);
                }
                if self.req(*w) {
                    let dw = conv3d_backward_weight(&self.nodes[*x].value, g, geom);
                    Self::accumulate(grads, *w, dw);
                }
                if let Some(b) = bias {
                    if self.req(*b) {
                        Self::accumulate(grads, *b, conv3d_backward_bias(g, geom));
                    }
                }
            }
            Op::PartialConv3d { x, w, bias, geom, mask, masked_x, ratio, valid } => {
                // effective upstream for the raw convolution: g .* ratio
                let p = geom.out_positions();
                let mut geff = g.clone();
                {
                    let gd = geff.data_mut();
                    for b in 0..geom.batch {
                        let rv = &ratio.data()[b * p..(b + 1) * p];
                        for co in 0..geom.cout {
                            let row =
                                &mut gd[(b * geom.cout + co) * p..(b * geom.cout + co + 1) * p];
                            for (o, &r) in row.iter_mut().zip(rv) {
                                *o *= r;
                            }
                        }
                    }
                }
                if self.req(*x) {
                    let mut dx = conv3d_backward_input(&geff, &self.nodes[*w].value, geom);
                    mask.apply_inplace(&mut dx)?;
                    Self::accumulate(grads, *x, dx);
                }
                if self.req(*w) {
                    let dw = conv3d_backward_weight(masked_x, &geff, geom);
                    Self::accumulate(grads, *w, dw);
                }
                if self.req(*bias) {
                    // bias only reaches valid output positions
                    let mut db = Tensor::zeros(&[geom.cout]);
                    for b in 0..geom.batch {
                        let vv = &valid.data()[b * p..(b + 1) * p];
                        for co in 0..geom.cout {
                            let row =
                                &g.data()[(b * geom.cout + co) * p..(b * geom.cout + co + 1) * p];
                            let mut acc = F::zero();
                            for (&gv, &v) in row.iter().zip(vv) {
                                acc += gv * v;
                            }
                            db.data_mut()[co] += acc;
                        }
                    }
                    Self::accumulate(grads, *bias, db);
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train, act } => {
                let d = self.nodes[*x].value.dims5()?;
                let (b, c) = (d[0], d[1]);
                let spatial = d[2] * d[3] * d[4];
                let n = b * spatial;
                let gamma_v = self.nodes[*gamma].value.data();
                // fused activation: pre-scale the upstream gradient by the
                // activation derivative (node value > 0 means the positive branch)
                let act_g: Option<Tensor<F>> = act.map(|slope| {
                    let own = self.nodes[idx].value.data();
                    Tensor::new(
                        g.shape().to_vec(),
                        g.data()
                            .iter()
                            .zip(own)
                            .map(|(&gv, &ov)| if ov > F::zero() { gv } else { gv * slope })
                            .collect(),
                    )
                    .expect("shapes match")
                });
                let g = act_g.as_ref().unwrap_or(g);
                // per-channel reductions
                let mut sum_g = vec![F::zero(); c];
                let mut sum_gx = vec![F::zero(); c];
                for bi in 0..b {
                    for ci in 0..c {
                        let base = (bi * c + ci) * spatial;
                        let mut sg = F::zero();
                        let mut sgx = F::zero();
                        for (&gv, &hv) in
                            g.data()[base..base + spatial].iter().zip(&xhat.data()[base..base + spatial])
                        {
                            sg += gv;
                            sgx += gv * hv;
                        }
                        sum_g[ci] += sg;
                        sum_gx[ci] += sgx;
                    }
                }
                if self.req(*x) {
                    let mut dx = Tensor::zeros(self.nodes[*x].value.shape());
                    let nf = F::from_f64(n as f64);
                    let dxd = dx.data_mut();
                    for bi in 0..b {
                        for ci in 0..c {
                            let base = (bi * c + ci) * spatial;
                            let k = gamma_v[ci] * inv_std[ci];
                            let gs = &g.data()[base..base + spatial];
                            let hs = &xhat.data()[base..base + spatial];
                            let ds = &mut dxd[base..base + spatial];
                            if *train {
                                let (sg, sgx) = (sum_g[ci], sum_gx[ci]);
                                for ((d, &gv), &hv) in ds.iter_mut().zip(gs).zip(hs) {
                                    *d = k * (gv - (sg + hv * sgx) / nf);
                                }
                            } else {
                                for (d, &gv) in ds.iter_mut().zip(gs) {
                                    *d = k * gv;
                                }
                            }
                        }
                    }
                    Self::accumulate(grads, *x, dx);
                }
                if self.req(*gamma) {
                    Self::accumulate(grads, *gamma, Tensor::new(vec![c], sum_gx.clone())?);
                }
                if self.req(*beta) {
                    Self::accumulate(grads, *beta, Tensor::new(vec![c], sum_g.clone())?);
                }
            }
            Op::Relu { x } => {
                if self.req(*x) {
                    let xv = self.nodes[*x].value.data();
                    let dx = Tensor::new(
                        self.nodes[*x].value.shape().to_vec(),
                        g.data()
                            .iter()
                            .zip(xv)
                            .map(|(&gv, &v)| if v > F::zero() { gv } else { F::zero() })
                            .collect(),
                    )?;
                    Self::accumulate(grads, *x, dx);
                }
            }
            Op::LeakyRelu { x, slope } => {
                if self.req(*x) {
                    let xv = self.nodes[*x].value.data();
                    let dx = Tensor::new(
                        self.nodes[*x].value.shape().to_vec(),
                        g.data()
                            .iter()
                            .zip(xv)
                            .map(|(&gv, &v)| if v > F::zero() { gv } else { gv * *slope })
                            .collect(),
                    )?;
                    Self::accumulate(grads, *x, dx);
                }
            }
            Op::UpsampleNearest { x } => {
                if self.req(*x) {
                    let src = self.nodes[*x].value.dims5()?;
                    let dst = self.nodes[idx].value.dims5()?;
                    let (b, c) = (src[0], src[1]);
                    let s = [src[2], src[3], src[4]];
                    let t = [dst[2], dst[3], dst[4]];
                    let mut dx = Tensor::zeros(self.nodes[*x].value.shape());
                    let src_spatial = s[0] * s[1] * s[2];
                    let dst_spatial = t[0] * t[1] * t[2];
                    let dxd = dx.data_mut();
                    for bc in 0..b * c {
                        let gs = &g.data()[bc * dst_spatial..(bc + 1) * dst_spatial];
                        let xs = &mut dxd[bc * src_spatial..(bc + 1) * src_spatial];
                        for ot in 0..t[0] {
                            let it = ot * s[0] / t[0];
                            for oh in 0..t[1] {
                                let ih = oh * s[1] / t[1];
                                for ow in 0..t[2] {
                                    let iw = ow * s[2] / t[2];
                                    xs[(it * s[1] + ih) * s[2] + iw] +=
                                        gs[(ot * t[1] + oh) * t[2] + ow];
                                }
                            }
                        }
                    }
                    Self::accumulate(grads, *x, dx);
                }
            }
            Op::ConcatChannels { a, b, a_channels } => {
                let da = self.nodes[*a].value.dims5()?;
                let db = self.nodes[*b].value.dims5()?;
                let spatial = da[2] * da[3] * da[4];
                let (ca, cb) = (*a_channels, db[1]);
                if self.req(*a) {
                    let mut dga = Tensor::zeros(self.nodes[*a].value.shape());
                    for bi in 0..da[0] {
                        let src = &g.data()
                            [bi * (ca + cb) * spatial..bi * (ca + cb) * spatial + ca * spatial];
                        dga.data_mut()[bi * ca * spatial..(bi + 1) * ca * spatial]
                            .copy_from_slice(src);
                    }
                    Self::accumulate(grads, *a, dga);
                }
                if self.req(*b) {
                    let mut dgb = Tensor::zeros(self.nodes[*b].value.shape());
                    for bi in 0..da[0] {
                        let start = bi * (ca + cb) * spatial + ca * spatial;
                        dgb.data_mut()[bi * cb * spatial..(bi + 1) * cb * spatial]
                            .copy_from_slice(&g.data()[start..start + cb * spatial]);
                    }
                    Self::accumulate(grads, *b, dgb);
                }
            }
            Op::Add { a, b } => {
                if self.req(*a) {
                    Self::accumulate(grads, *a, g.clone());
                }
                if self.req(*b) {
                    Self::accumulate(grads, *b, g.clone());
                }
            }
            Op::Sub { a, b } => {
                if self.req(*a) {
                    Self::accumulate(grads, *a, g.clone());
                }
                if self.req(*b) {
                    Self::accumulate(grads, *b, g.map(|v| -v));
                }
            }
            Op::Mul { a, b } => {
                if self.req(*a) {
                    let other = self.nodes[*b].value.data();
                    let dx = Tensor::new(
                        g.shape().to_vec(),
                        g.data().iter().zip(other).map(|(&gv, &o)| gv * o).collect(),
                    )?;
                    Self::accumulate(grads, *a, dx);
                }
                if self.req(*b) {
                    let other = self.nodes[*a].value.data();
                    let dx = Tensor::new(
                        g.shape().to_vec(),
                        g.data().iter().zip(other).map(|(&gv, &o)| gv * o).collect(),
                    )?;
                    Self::accumulate(grads, *b, dx);
                }
            }
            Op::Scale { x, c } => {
                if self.req(*x) {
                    Self::accumulate(grads, *x, g.map(|v| v * *c));
                }
            }
            Op::AddScaled { a, b, c } => {
                if self.req(*a) {
                    Self::accumulate(grads, *a, g.clone());
                }
                if self.req(*b) {
                    Self::accumulate(grads, *b, g.map(|v| v * *c));
                }
            }
            Op::Sum { x } => {
                if self.req(*x) {
                    let gv = g.item();
                    Self::accumulate(grads, *x, Tensor::filled(self.nodes[*x].value.shape(), gv));
                }
            }
            Op::Mean { x } => {
                if self.req(*x) {
                    let n = self.nodes[*x].value.numel();
                    let gv = g.item() / F::from_f64(n as f64);
                    Self::accumulate(grads, *x, Tensor::filled(self.nodes[*x].value.shape(), gv));
                }
            }
            Op::MaskedL1 { pred, target, weight, inv_count } => {
                if self.req(*pred) {
                    let gv = g.item() * *inv_count;
                    let pv = self.nodes[*pred].value.data();
                    let dx = Tensor::new(
                        self.nodes[*pred].value.shape().to_vec(),
                        pv.iter()
                            .zip(target.data())
                            .zip(weight.data())
                            .map(|((&p, &t), &w)| {
                                let r = p - t;
                                if r > F::zero() {
                                    gv * w
                                } else if r < F::zero() {
                                    -(gv * w)
                                } else {
                                    F::zero()
                                }
                            })
                            .collect(),
                    )?;
                    Self::accumulate(grads, *pred, dx);
                }
            }
        }
        Ok(())
    }
}
