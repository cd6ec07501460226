//! The 3D partial-convolution U-Net: layer table for arbitrary temporal
//! depth, mask propagation through the encoder/decoder stacks, the
//! hole/valid-separated L1 loss, and composite inference output.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::GridBlock;
use crate::error::{Error, Result};
use crate::io::uckp::{self, Entries, Entry};
use crate::masking::MaskBlock;
use crate::tensor::{Graph, GroupedMask, ParamStore, Scalar, Tensor, VarId};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Relu,
    Leaky(f64),
    Linear,
}

/// One partial-convolution layer of the Table-1 stack.
#[derive(Clone, Debug)]
pub struct LayerCfg {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub k: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub has_bn: bool,
    pub activation: Activation,
}

/// Temporal depth plus a rational width multiplier on the channel counts.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UNetConfig {
    pub t: usize,
    pub width_num: u32,
    pub width_den: u32,
}

const ENC_CHANNELS: [usize; 6] = [64, 128, 256, 512, 512, 512];
const DEC_CHANNELS: [usize; 5] = [512, 512, 256, 128, 64];

impl UNetConfig {
    pub fn new(t: usize) -> Result<Self> {
        Self::with_width(t, 1, 1)
    }

    pub fn with_width(t: usize, width_num: u32, width_den: u32) -> Result<Self> {
        if t == 0 {
            return Err(Error::Config("temporal dimension T must be >= 1".into()));
        }
        if width_num == 0 || width_den == 0 {
            return Err(Error::Config("width scale must be a positive rational".into()));
        }
        let cfg = UNetConfig { t, width_num, width_den };
        cfg.plan()?;
        Ok(cfg)
    }

    pub fn scaled(&self, c: usize) -> usize {
        ((c * self.width_num as usize) / self.width_den as usize).max(1)
    }

    /// Temporal padding of encoders 5/6: 2*((T-1) div 4).
    pub fn temporal_pad(&self) -> usize {
        2 * ((self.t - 1) / 4)
    }

    /// The twelve-layer table. Encoder 5/6 temporal geometry follows the
    /// padding formula; a layer whose temporal input collapses to 1 clamps to
    /// kernel 1 / stride 1 / pad 0 so shallow-T configs still build.
    pub fn plan(&self) -> Result<Vec<LayerCfg>> {
        let mut layers = Vec::with_capacity(12);
        let mut cur_t = self.t;
        let mut cin = 1usize;
        let mut enc_out = Vec::with_capacity(6);
        for i in 0..6 {
            let name = format!("enc{}", i + 1);
            let cout = self.scaled(ENC_CHANNELS[i]);
            let (k, stride, pad) = if i < 4 {
                ([1, 3, 3], [1, 2, 2], [0, 1, 1])
            } else if cur_t == 1 {
                ([1, 3, 3], [1, 2, 2], [0, 1, 1])
            } else {
                ([self.t, 3, 3], [2, 2, 2], [self.temporal_pad(), 1, 1])
            };
            let padded = cur_t + 2 * pad[0];
            if padded < k[0] || (padded - k[0]) / stride[0] + 1 == 0 {
                return Err(Error::Config(format!(
                    "{name}: nonpositive temporal output for T={} (input {}, kernel {}, pad {})",
                    self.t, cur_t, k[0], pad[0]
                )));
            }
            cur_t = (padded - k[0]) / stride[0] + 1;
            layers.push(LayerCfg {
                name,
                cin,
                cout,
                k,
                stride,
                pad,
                has_bn: i != 0,
                activation: Activation::Relu,
            });
            enc_out.push(cout);
            cin = cout;
        }
        for i in 0..6 {
            let name = format!("dec{}", i + 1);
            // skip features: encoder outputs h5..h1, then the raw input+mask
            let skip_c = if i < 5 { enc_out[4 - i] } else { 2 };
            let cout = if i < 5 { self.scaled(DEC_CHANNELS[i]) } else { 1 };
            layers.push(LayerCfg {
                name,
                cin: cin + skip_c,
                cout,
                k: [1, 3, 3],
                stride: [1, 1, 1],
                pad: [0, 1, 1],
                has_bn: i != 5,
                activation: if i < 5 { Activation::Leaky(LEAKY_SLOPE) } else { Activation::Linear },
            });
            cin = cout;
        }
        Ok(layers)
    }
}

#[derive(Clone, Debug)]
pub struct BnStats<F> {
    pub mean: Vec<F>,
    pub var: Vec<F>,
}

/// Per-batch loss weighting of the hole term.
#[derive(Clone, Copy, Debug)]
pub struct LossWeights {
    pub lambda_hole: f64,
}

impl LossWeights {
    pub fn new(lambda_hole: f64) -> Result<Self> {
        if lambda_hole < 0.0 || !lambda_hole.is_finite() {
            return Err(Error::param("lambda_hole must be finite and >= 0"));
        }
        Ok(LossWeights { lambda_hole })
    }
}

pub struct UNetModel<F: Scalar> {
    pub cfg: UNetConfig,
    pub layers: Vec<LayerCfg>,
    pub params: ParamStore<F>,
    pub bn_running: BTreeMap<String, BnStats<F>>,
}

/// Handles into the graph after a forward pass.
pub struct UNetForward {
    pub output: VarId,
    pub param_ids: BTreeMap<String, VarId>,
}

/// Assemble the Table-1 model with Kaiming-uniform (fan-in) weights drawn
/// from the given seed. Bias starts at zero, BN at gamma 1 / beta 0 with
/// running mean 0 / var 1.
pub fn build_unet<F: Scalar>(cfg: &UNetConfig, init_seed: u64) -> Result<UNetModel<F>> {
    let layers = cfg.plan()?;
    let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
    let mut params = ParamStore::new();
    let mut bn_running = BTreeMap::new();
    for layer in &layers {
        let fan_in = layer.cin * layer.k[0] * layer.k[1] * layer.k[2];
        let bound = (6.0 / fan_in as f64).sqrt();
        let w = Tensor::uniform(
            &[layer.cout, layer.cin, layer.k[0], layer.k[1], layer.k[2]],
            bound,
            &mut rng,
        );
        params.insert(format!("{}.weight", layer.name), w)?;
        params.insert(format!("{}.bias", layer.name), Tensor::zeros(&[layer.cout]))?;
        if layer.has_bn {
            params.insert(format!("{}.gamma", layer.name), Tensor::filled(&[layer.cout], F::one()))?;
            params.insert(format!("{}.beta", layer.name), Tensor::zeros(&[layer.cout]))?;
            bn_running.insert(
                layer.name.clone(),
                BnStats { mean: vec![F::zero(); layer.cout], var: vec![F::one(); layer.cout] },
            );
        }
    }
    Ok(UNetModel { cfg: *cfg, layers, params, bn_running })
}

struct ForwardOutcome {
    output: VarId,
    param_ids: BTreeMap<String, VarId>,
    bn_batch: Vec<(String, Vec<f64>, Vec<f64>)>,
    bottleneck_mask: Tensor<f64>,
}

impl<F: Scalar> UNetModel<F> {
    pub fn temporal_dim(&self) -> usize {
        self.cfg.t
    }

    fn leaf_params(&self, g: &mut Graph<F>, trainable: bool) -> BTreeMap<String, VarId> {
        let mut ids = BTreeMap::new();
        for (name, entry) in self.params.iter() {
            ids.insert(name.clone(), g.leaf(entry.value.clone(), trainable));
        }
        ids
    }

    fn forward_inner(
        &self,
        g: &mut Graph<F>,
        image: &Tensor<F>,
        mask: &Tensor<F>,
        train: bool,
    ) -> Result<ForwardOutcome> {
        let d = image.dims5()?;
        if d[1] != 1 {
            return Err(Error::shape("unet input must have one channel"));
        }
        if image.shape() != mask.shape() {
            return Err(Error::shape("unet image/mask shapes differ"));
        }
        if mask.data().iter().all(|&v| v == F::zero()) {
            return Err(Error::Contract("unet mask has no valid voxel".into()));
        }
        let param_ids = self.leaf_params(g, train);
        let m0 = GroupedMask::broadcast(mask.clone(), 1)?;
        // network input: image with holes zeroed
        let x0 = g.leaf(m0.apply_to(image)?, false);

        let mut bn_batch = Vec::new();
        let mut enc_in_shapes: Vec<[usize; 3]> = Vec::with_capacity(6);
        let mut enc_feats: Vec<VarId> = Vec::with_capacity(6);
        let mut enc_masks: Vec<GroupedMask<F>> = Vec::with_capacity(6);
        let mut h = x0;
        let mut hm = m0.clone();
        for layer in &self.layers[..6] {
            let din = g.value(h).dims5()?;
            enc_in_shapes.push([din[2], din[3], din[4]]);
            let (nh, nm) = self.apply_layer(g, layer, &param_ids, h, &hm, train, &mut bn_batch)?;
            h = nh;
            hm = nm;
            enc_feats.push(h);
            enc_masks.push(hm.clone());
        }
        let bottleneck_mask = hm.to_full().to_f64();
        for (i, layer) in self.layers[6..].iter().enumerate() {
            let target = enc_in_shapes[5 - i];
            h = g.upsample_nearest_to(h, target)?;
            hm = hm.upsample_to(target);
            let (skip_f, skip_m) = if i < 5 {
                (enc_feats[4 - i], enc_masks[4 - i].clone())
            } else {
                // last skip: the network input and its mask as features; the
                // mask channel itself is fully observed
                let mask_feat = g.leaf(mask.clone(), false);
                let skip = g.concat_channels(x0, mask_feat)?;
                let ones = GroupedMask::broadcast(Tensor::filled(mask.shape(), F::one()), 1)?;
                (skip, m0.concat(&ones)?)
            };
            h = g.concat_channels(h, skip_f)?;
            hm = hm.concat(&skip_m)?;
            let (nh, nm) = self.apply_layer(g, layer, &param_ids, h, &hm, train, &mut bn_batch)?;
            h = nh;
            hm = nm;
        }
        Ok(ForwardOutcome { output: h, param_ids, bn_batch, bottleneck_mask })
    }

    #[allow(clippy::too_many_arguments)]
    fn apply_layer(
        &self,
        g: &mut Graph<F>,
        layer: &LayerCfg,
        param_ids: &BTreeMap<String, VarId>,
        x: VarId,
        mask: &GroupedMask<F>,
        train: bool,
        bn_batch: &mut Vec<(String, Vec<f64>, Vec<f64>)>,
    ) -> Result<(VarId, GroupedMask<F>)> {
        let w = param_ids[&format!("{}.weight", layer.name)];
        let b = param_ids[&format!("{}.bias", layer.name)];
        let (mut y, new_mask) = g
            .partial_conv3d(x, mask, w, b, layer.stride, layer.pad)
            .map_err(|e| Error::shape(format!("{}: {e}", layer.name)))?;
        let fused_act = match layer.activation {
            Activation::Relu => Some(0.0),
            Activation::Leaky(s) => Some(s),
            Activation::Linear => None,
        };
        if layer.has_bn {
            let gamma = param_ids[&format!("{}.gamma", layer.name)];
            let beta = param_ids[&format!("{}.beta", layer.name)];
            let running = self.bn_running.get(&layer.name).expect("bn stats exist");
            let (yy, stats) = if train {
                g.batch_norm_act(y, gamma, beta, BN_EPS, None, fused_act)?
            } else {
                g.batch_norm_act(
                    y,
                    gamma,
                    beta,
                    BN_EPS,
                    Some((&running.mean, &running.var)),
                    fused_act,
                )?
            };
            y = yy;
            if let Some((mean, var)) = stats {
                bn_batch.push((
                    layer.name.clone(),
                    mean.iter().map(|v| v.as_f64()).collect(),
                    var.iter().map(|v| v.as_f64()).collect(),
                ));
            }
            return Ok((y, new_mask));
        }
        let y = match layer.activation {
            Activation::Relu => g.relu(y),
            Activation::Leaky(s) => g.leaky_relu(y, s),
            Activation::Linear => y,
        };
        Ok((y, new_mask))
    }

    /// Training forward: batch-stat BN, running statistics updated in place.
    pub fn forward_train(
        &mut self,
        g: &mut Graph<F>,
        image: &Tensor<F>,
        mask: &Tensor<F>,
    ) -> Result<UNetForward> {
        let out = self.forward_inner(g, image, mask, true)?;
        let momentum = F::from_f64(BN_MOMENTUM);
        let keep = F::one() - momentum;
        for (name, mean, var) in out.bn_batch {
            let stats = self.bn_running.get_mut(&name).expect("bn stats exist");
            for (r, m) in stats.mean.iter_mut().zip(mean) {
                *r = keep * *r + momentum * F::from_f64(m);
            }
            for (r, v) in stats.var.iter_mut().zip(var) {
                *r = keep * *r + momentum * F::from_f64(v);
            }
        }
        Ok(UNetForward { output: out.output, param_ids: out.param_ids })
    }

    /// Inference forward: running-stat BN, no state mutation.
    pub fn forward_eval(&self, g: &mut Graph<F>, image: &Tensor<F>, mask: &Tensor<F>) -> Result<VarId> {
        Ok(self.forward_inner(g, image, mask, false)?.output)
    }

    /// Mask after the full encoder stack (for the fixpoint property).
    pub fn bottleneck_mask(&self, image: &Tensor<F>, mask: &Tensor<F>) -> Result<Tensor<f64>> {
        let mut g = Graph::new();
        Ok(self.forward_inner(&mut g, image, mask, false)?.bottleneck_mask)
    }

    /// Raw dense prediction for one block (eval mode, batch 1).
    pub fn predict(&self, image: &GridBlock, mask: &MaskBlock) -> Result<GridBlock> {
        if image.dims() != mask.dims() {
            return Err(Error::shape("predict: image/mask dims differ"));
        }
        let x = block_to_tensor::<F>(image);
        let m = mask_to_tensor::<F>(mask);
        let mut g = Graph::new();
        let y = self.forward_eval(&mut g, &x, &m)?;
        let out = g.value(y);
        let (t, h, w) = image.dims();
        let data: Vec<f32> = out.data().iter().map(|v| v.as_f64() as f32).collect();
        GridBlock::new(t, h, w, data)
    }

    /// Serialize weights, optimizer state, BN running stats and config.
    pub fn to_entries(&self) -> Entries {
        let mut entries = Entries::new();
        let tensor_entry = |t: &Tensor<F>| Entry {
            dims: t.shape().iter().map(|&d| d as u32).collect(),
            data: t.data().iter().map(|v| v.as_f64() as f32).collect(),
        };
        for (name, e) in self.params.iter() {
            entries.insert(name.clone(), tensor_entry(&e.value));
            entries.insert(format!("{}m.{}", uckp::PREFIX_OPT, name), tensor_entry(&e.m));
            entries.insert(format!("{}v.{}", uckp::PREFIX_OPT, name), tensor_entry(&e.v));
        }
        entries.insert(format!("{}step", uckp::PREFIX_OPT), Entry::scalar(self.params.step() as f32));
        for (name, stats) in &self.bn_running {
            entries.insert(
                format!("{}mean.{}", uckp::PREFIX_BN, name),
                Entry {
                    dims: vec![stats.mean.len() as u32],
                    data: stats.mean.iter().map(|v| v.as_f64() as f32).collect(),
                },
            );
            entries.insert(
                format!("{}var.{}", uckp::PREFIX_BN, name),
                Entry {
                    dims: vec![stats.var.len() as u32],
                    data: stats.var.iter().map(|v| v.as_f64() as f32).collect(),
                },
            );
        }
        entries.insert(format!("{}t", uckp::PREFIX_CFG), Entry::scalar(self.cfg.t as f32));
        entries
            .insert(format!("{}width_num", uckp::PREFIX_CFG), Entry::scalar(self.cfg.width_num as f32));
        entries
            .insert(format!("{}width_den", uckp::PREFIX_CFG), Entry::scalar(self.cfg.width_den as f32));
        entries
    }

    pub fn from_entries(entries: &Entries) -> Result<UNetModel<F>> {
        let scalar = |key: &str| -> Result<f32> {
            entries
                .get(key)
                .filter(|e| e.data.len() == 1)
                .map(|e| e.data[0])
                .ok_or_else(|| Error::format(format!("checkpoint missing scalar entry {key}")))
        };
        let t = scalar("cfg.t")? as usize;
        let width_num = scalar("cfg.width_num")? as u32;
        let width_den = scalar("cfg.width_den")? as u32;
        let cfg = UNetConfig::with_width(t, width_num, width_den)?;
        let mut model: UNetModel<F> = build_unet(&cfg, 0)?;
        let load_tensor = |key: &str, expected: &[usize]| -> Result<Tensor<F>> {
            let e = entries
                .get(key)
                .ok_or_else(|| Error::format(format!("checkpoint missing entry {key}")))?;
            let dims: Vec<usize> = e.dims.iter().map(|&d| d as usize).collect();
            if dims != expected {
                return Err(Error::shape(format!(
                    "checkpoint entry {key}: dims {:?}, expected {:?}",
                    dims, expected
                )));
            }
            Tensor::new(dims, e.data.iter().map(|&v| F::from_f64(v as f64)).collect())
        };
        let names: Vec<String> = model.params.names().cloned().collect();
        for name in names {
            let shape = model.params.get(&name).unwrap().shape().to_vec();
            let value = load_tensor(&name, &shape)?;
            let m = load_tensor(&format!("opt.m.{name}"), &shape)?;
            let v = load_tensor(&format!("opt.v.{name}"), &shape)?;
            let entry = model.params.entry_mut(&name).unwrap();
            entry.value = value;
            entry.m = m;
            entry.v = v;
        }
        model.params.set_step(scalar("opt.step")? as u64);
        let bn_names: Vec<String> = model.bn_running.keys().cloned().collect();
        for name in bn_names {
            let c = model.bn_running[&name].mean.len();
            let mean = load_tensor(&format!("bn.mean.{name}"), &[c])?;
            let var = load_tensor(&format!("bn.var.{name}"), &[c])?;
            let stats = model.bn_running.get_mut(&name).unwrap();
            stats.mean = mean.into_data();
            stats.var = var.into_data();
        }
        Ok(model)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        uckp::write(path, &self.to_entries())
    }

    pub fn load(path: &std::path::Path) -> Result<UNetModel<F>> {
        Self::from_entries(&uckp::read(path)?)
    }
}

pub fn block_to_tensor<F: Scalar>(block: &GridBlock) -> Tensor<F> {
    let (t, h, w) = block.dims();
    Tensor::new(
        vec![1, 1, t, h, w],
        block.data().iter().map(|&v| F::from_f64(v as f64)).collect(),
    )
    .expect("block dims are consistent")
}

pub fn mask_to_tensor<F: Scalar>(mask: &MaskBlock) -> Tensor<F> {
    let (t, h, w) = mask.dims();
    Tensor::new(
        vec![1, 1, t, h, w],
        mask.data().iter().map(|&v| F::from_f64(v as f64)).collect(),
    )
    .expect("mask dims are consistent")
}

/// Stack blocks (and their masks) into a training batch [B,1,T,H,W].
pub fn batch_to_tensors<F: Scalar>(
    blocks: &[&GridBlock],
    masks: &[MaskBlock],
) -> Result<(Tensor<F>, Tensor<F>)> {
    if blocks.is_empty() || blocks.len() != masks.len() {
        return Err(Error::Contract("batch blocks/masks mismatch".into()));
    }
    let (t, h, w) = blocks[0].dims();
    let mut img = Vec::with_capacity(blocks.len() * t * h * w);
    let mut msk = Vec::with_capacity(blocks.len() * t * h * w);
    for (b, m) in blocks.iter().zip(masks) {
        if b.dims() != (t, h, w) || m.dims() != (t, h, w) {
            return Err(Error::shape("batch blocks must share one shape"));
        }
        img.extend(b.data().iter().map(|&v| F::from_f64(v as f64)));
        msk.extend(m.data().iter().map(|&v| F::from_f64(v as f64)));
    }
    Ok((
        Tensor::new(vec![blocks.len(), 1, t, h, w], img)?,
        Tensor::new(vec![blocks.len(), 1, t, h, w], msk)?,
    ))
}

/// Standalone partial convolution on plain tensors (the graph op behind it is
/// the training path).
pub fn partial_conv3d<F: Scalar>(
    x: &Tensor<F>,
    mask: &Tensor<F>,
    w: &Tensor<F>,
    bias: &Tensor<F>,
    stride: [usize; 3],
    pad: [usize; 3],
) -> Result<(Tensor<F>, Tensor<F>)> {
    let mut g = Graph::new();
    let xi = g.leaf(x.clone(), false);
    let wi = g.leaf(w.clone(), false);
    let bi = g.leaf(bias.clone(), false);
    let gm = GroupedMask::from_full(mask)?;
    let (y, m) = g.partial_conv3d(xi, &gm, wi, bi, stride, pad)?;
    Ok((g.value(y).clone(), m.to_full()))
}

/// Loss nodes on the graph: total = valid + lambda * hole.
pub struct LossNodes {
    pub total: VarId,
    pub hole: VarId,
    pub valid: VarId,
}

pub fn loss_graph<F: Scalar>(
    g: &mut Graph<F>,
    pred: VarId,
    gt: &Tensor<F>,
    mask: &Tensor<F>,
    weights: &LossWeights,
) -> Result<LossNodes> {
    if g.value(pred).shape() != gt.shape() || gt.shape() != mask.shape() {
        return Err(Error::shape("loss: pred/gt/mask shapes differ"));
    }
    let n_valid = mask.data().iter().filter(|&&v| v == F::one()).count();
    let n_hole = mask.numel() - n_valid;
    if n_valid == 0 {
        return Err(Error::Contract("loss: N_valid = 0".into()));
    }
    let valid = g.masked_l1(pred, gt, mask, F::from_f64(1.0 / n_valid as f64))?;
    let hole = if n_hole == 0 {
        g.leaf(Tensor::scalar(F::zero()), false)
    } else {
        let hole_w = mask.map(|m| F::one() - m);
        g.masked_l1(pred, gt, &hole_w, F::from_f64(1.0 / n_hole as f64))?
    };
    let total = g.add_scaled(valid, hole, F::from_f64(weights.lambda_hole))?;
    Ok(LossNodes { total, hole, valid })
}

/// Loss values on plain blocks (independent of the graph path; used for
/// validation and as a cross-check in tests). Returns (total, hole, valid).
pub fn loss_values(
    pred: &GridBlock,
    gt: &GridBlock,
    mask: &MaskBlock,
    weights: &LossWeights,
) -> Result<(f64, f64, f64)> {
    if pred.dims() != gt.dims() || gt.dims() != mask.dims() {
        return Err(Error::shape("loss: pred/gt/mask dims differ"));
    }
    let mut hole_sum = 0.0f64;
    let mut valid_sum = 0.0f64;
    let mut n_hole = 0usize;
    let mut n_valid = 0usize;
    for ((&p, &t), &m) in pred.data().iter().zip(gt.data()).zip(mask.data()) {
        let d = (p as f64 - t as f64).abs();
        if m == 1 {
            valid_sum += d;
            n_valid += 1;
        } else {
            hole_sum += d;
            n_hole += 1;
        }
    }
    if n_valid == 0 {
        return Err(Error::Contract("loss: N_valid = 0".into()));
    }
    let l_valid = valid_sum / n_valid as f64;
    let l_hole = if n_hole == 0 { 0.0 } else { hole_sum / n_hole as f64 };
    Ok((l_valid + weights.lambda_hole * l_hole, l_hole, l_valid))
}

/// Inference-time assembly: observed voxels pass through, holes take the
/// prediction clamped at zero (demand counts are nonnegative).
pub fn composite(image: &GridBlock, mask: &MaskBlock, prediction: &GridBlock) -> Result<GridBlock> {
    if image.dims() != mask.dims() || mask.dims() != prediction.dims() {
        return Err(Error::shape("composite: shapes differ"));
    }
    let (t, h, w) = image.dims();
    let data = image
        .data()
        .iter()
        .zip(mask.data())
        .zip(prediction.data())
        .map(|((&img, &m), &p)| if m == 1 { img } else { p.max(0.0) })
        .collect();
    GridBlock::new(t, h, w, data)
}
