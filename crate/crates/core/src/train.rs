//! Self-supervised training loop: fresh mask per sample per iteration,
//! hole/valid L1 objective, Adam with stepwise-decayed learning rate,
//! frozen validation mask suites, deterministic resume.

use std::collections::BTreeMap;
use std::io::Write;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::GridBlock;
use crate::error::{Error, Result};
use crate::eval::l1_hole;
use crate::masking::{biased_mask_block, random_mask_block, MaskBlock, MaskGenConfig};
use crate::nn::{
    batch_to_tensors, build_unet, composite, loss_graph, LossWeights, UNetConfig, UNetModel,
};
use crate::tensor::{adam_step, AdamHyper, Graph, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskMode {
    Random,
    Biased,
}

impl FromStr for MaskMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(MaskMode::Random),
            "biased" => Ok(MaskMode::Biased),
            other => Err(Error::param(format!("unknown mask mode '{other}'"))),
        }
    }
}

impl std::fmt::Display for MaskMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MaskMode::Random => "random",
            MaskMode::Biased => "biased",
        })
    }
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub t: usize,
    pub mask_mode: MaskMode,
    pub lambda: f64,
    pub batch_size: usize,
    pub lr0: f64,
    pub decay: f64,
    pub decay_every: u64,
    pub max_iters: u64,
    /// 0 = validate/checkpoint only at the end.
    pub validate_every: u64,
    pub seed: u64,
    pub width_num: u32,
    pub width_den: u32,
    pub mask_cfg: MaskGenConfig,
}

impl TrainConfig {
    pub fn new(t: usize, max_iters: u64) -> Self {
        TrainConfig {
            t,
            mask_mode: MaskMode::Biased,
            lambda: 12.0,
            batch_size: 16,
            lr0: 0.01,
            decay: 0.9,
            decay_every: 500,
            max_iters,
            validate_every: 0,
            seed: 0,
            width_num: 1,
            width_den: 1,
            mask_cfg: MaskGenConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::param("batch_size must be >= 1"));
        }
        if self.lr0 <= 0.0 {
            return Err(Error::param("lr0 must be > 0"));
        }
        if self.decay_every == 0 {
            return Err(Error::param("decay_every must be >= 1"));
        }
        LossWeights::new(self.lambda)?;
        self.mask_cfg.validate()?;
        Ok(())
    }

    pub fn unet_config(&self) -> Result<UNetConfig> {
        UNetConfig::with_width(self.t, self.width_num, self.width_den)
    }
}

/// lr0 * decay^floor(iter / decay_every).
pub fn lr_at(iter: u64, cfg: &TrainConfig) -> f64 {
    cfg.lr0 * cfg.decay.powi((iter / cfg.decay_every) as i32)
}

#[derive(Clone, Debug)]
pub struct IterRecord {
    pub iter: u64,
    pub lr: f64,
    pub l_total: f64,
    pub l_hole: f64,
    pub l_valid: f64,
}

#[derive(Clone, Debug)]
pub struct ValRecord {
    pub iter: u64,
    pub scenario: String,
    pub l1_hole: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainLog {
    pub iters: Vec<IterRecord>,
    pub vals: Vec<ValRecord>,
}

impl TrainLog {
    pub fn write_iter_csv(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "iter,lr,l_total,l_hole,l_valid")?;
        for r in &self.iters {
            writeln!(out, "{},{},{},{},{}", r.iter, r.lr, r.l_total, r.l_hole, r.l_valid)?;
        }
        Ok(())
    }
    pub fn write_val_csv(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "iter,scenario,val_l1_hole")?;
        for r in &self.vals {
            writeln!(out, "{},{},{}", r.iter, r.scenario, r.l1_hole)?;
        }
        Ok(())
    }
}

/// Named mask suites frozen for a whole run; `masks[s][i]` pairs val block i.
#[derive(Clone, Debug)]
pub struct ValSuite {
    pub scenarios: Vec<(String, Vec<MaskBlock>)>,
}

const TAG_MASK: u64 = 0x6d61_736b; // "mask"
const TAG_EPOCH: u64 = 0x6570_6f63; // "epoc"
const TAG_INIT: u64 = 0x696e_6974; // "init"
const TAG_VAL: u64 = 0x7661_6c6d; // "valm"

/// Independent generator for (seed, tag, a, b): the 32-byte ChaCha key is the
/// four little-endian words, so streams never collide.
pub fn derived_rng(seed: u64, tag: u64, a: u64, b: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&tag.to_le_bytes());
    key[16..24].copy_from_slice(&a.to_le_bytes());
    key[24..32].copy_from_slice(&b.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

fn init_seed(seed: u64) -> u64 {
    use rand::RngCore;
    derived_rng(seed, TAG_INIT, 0, 0).next_u64()
}

/// The per-iteration training mask for (seed, iter, sample slot).
pub fn training_mask(
    block: &GridBlock,
    cfg: &TrainConfig,
    iter: u64,
    slot: u64,
) -> Result<MaskBlock> {
    let mut rng = derived_rng(cfg.seed, TAG_MASK, iter, slot);
    let (t, h, w) = block.dims();
    match cfg.mask_mode {
        MaskMode::Random => Ok(random_mask_block(t, h, w, &cfg.mask_cfg, &mut rng)),
        MaskMode::Biased => biased_mask_block(block, &cfg.mask_cfg, &mut rng),
    }
}

/// Frozen validation suite: one random-walk and one biased mask per block.
pub fn build_val_suite(
    val_blocks: &[GridBlock],
    mask_cfg: &MaskGenConfig,
    seed: u64,
) -> Result<ValSuite> {
    let mut random = Vec::with_capacity(val_blocks.len());
    let mut biased = Vec::with_capacity(val_blocks.len());
    for (i, b) in val_blocks.iter().enumerate() {
        let (t, h, w) = b.dims();
        let mut rng = derived_rng(seed, TAG_VAL, i as u64, 0);
        random.push(random_mask_block(t, h, w, mask_cfg, &mut rng));
        let mut rng = derived_rng(seed, TAG_VAL, i as u64, 1);
        biased.push(biased_mask_block(b, mask_cfg, &mut rng)?);
    }
    Ok(ValSuite {
        scenarios: vec![("random".to_string(), random), ("biased".to_string(), biased)],
    })
}

/// Composite the model output over each frozen mask and report per-scenario
/// mean l1 over holes.
pub fn validate(
    model: &UNetModel<f32>,
    val_blocks: &[GridBlock],
    suite: &ValSuite,
) -> Result<Vec<(String, f64)>> {
    let mut out = Vec::with_capacity(suite.scenarios.len());
    for (name, masks) in &suite.scenarios {
        if masks.len() != val_blocks.len() {
            return Err(Error::Contract(format!(
                "suite '{name}' has {} masks for {} blocks",
                masks.len(),
                val_blocks.len()
            )));
        }
        let mut total = 0.0;
        for (block, mask) in val_blocks.iter().zip(masks) {
            let pred = model.predict(block, mask)?;
            let imputed = composite(block, mask, &pred)?;
            total += l1_hole(&imputed, block, mask)?;
        }
        out.push((name.clone(), total / val_blocks.len() as f64));
    }
    Ok(out)
}

pub struct TrainRun {
    pub model: UNetModel<f32>,
    pub log: TrainLog,
}

/// NaN abort carries the state for a diagnostic checkpoint.
pub struct TrainAbort {
    pub reason: String,
    pub iter: u64,
    pub model: UNetModel<f32>,
    pub log: TrainLog,
}

pub enum TrainFailure {
    Numeric(Box<TrainAbort>),
    Other(Error),
}

impl From<Error> for TrainFailure {
    fn from(e: Error) -> Self {
        TrainFailure::Other(e)
    }
}

pub type CheckpointHook<'a> = &'a mut dyn FnMut(u64, &UNetModel<f32>, &TrainLog) -> Result<()>;

/// Train a fresh model. Fully deterministic given `cfg.seed`: weight init,
/// sample order, and per-iteration masks all derive from it.
pub fn train(
    train_blocks: &[GridBlock],
    val_blocks: &[GridBlock],
    suite: &ValSuite,
    cfg: &TrainConfig,
    on_checkpoint: CheckpointHook,
) -> std::result::Result<TrainRun, TrainFailure> {
    cfg.validate()?;
    let model = build_unet::<f32>(&cfg.unet_config()?, init_seed(cfg.seed))
        .map_err(TrainFailure::Other)?;
    train_from(model, 0, TrainLog::default(), train_blocks, val_blocks, suite, cfg, on_checkpoint)
}

/// Continue a run from `start_iter`; with the checkpointed model and log this
/// reproduces the uninterrupted trace bit-for-bit.
#[allow(clippy::too_many_arguments)]
pub fn train_from(
    mut model: UNetModel<f32>,
    start_iter: u64,
    mut log: TrainLog,
    train_blocks: &[GridBlock],
    val_blocks: &[GridBlock],
    suite: &ValSuite,
    cfg: &TrainConfig,
    on_checkpoint: CheckpointHook,
) -> std::result::Result<TrainRun, TrainFailure> {
    cfg.validate()?;
    if train_blocks.is_empty() {
        return Err(TrainFailure::Other(Error::Contract("empty training set".into())));
    }
    let dims = train_blocks[0].dims();
    if dims.0 != cfg.t {
        return Err(TrainFailure::Other(Error::shape(format!(
            "blocks have T={}, config says {}",
            dims.0, cfg.t
        ))));
    }
    if train_blocks.iter().any(|b| b.dims() != dims) {
        return Err(TrainFailure::Other(Error::shape("training blocks must share one shape")));
    }
    let n = train_blocks.len() as u64;
    let mut epoch_cache: Option<(u64, Vec<usize>)> = None;
    let weights = LossWeights::new(cfg.lambda)?;
    let hyper = AdamHyper::default();

    for iter in start_iter..cfg.max_iters {
        // seeded shuffle with epoch wraparound, stateless in iter
        let mut batch_refs: Vec<&GridBlock> = Vec::with_capacity(cfg.batch_size);
        let mut masks: Vec<MaskBlock> = Vec::with_capacity(cfg.batch_size);
        for j in 0..cfg.batch_size as u64 {
            let cursor = iter * cfg.batch_size as u64 + j;
            let epoch = cursor / n;
            if epoch_cache.as_ref().map(|(e, _)| *e) != Some(epoch) {
                let mut perm: Vec<usize> = (0..n as usize).collect();
                perm.shuffle(&mut derived_rng(cfg.seed, TAG_EPOCH, epoch, 0));
                epoch_cache = Some((epoch, perm));
            }
            let idx = epoch_cache.as_ref().unwrap().1[(cursor % n) as usize];
            let block = &train_blocks[idx];
            masks.push(training_mask(block, cfg, iter, j)?);
            batch_refs.push(block);
        }
        let (img, msk) = batch_to_tensors::<f32>(&batch_refs, &masks)?;

        let mut g = Graph::new();
        let fwd = model.forward_train(&mut g, &img, &msk)?;
        let nodes = loss_graph(&mut g, fwd.output, &img, &msk, &weights)?;
        let l_total = g.value(nodes.total).item() as f64;
        let l_hole = g.value(nodes.hole).item() as f64;
        let l_valid = g.value(nodes.valid).item() as f64;
        if !l_total.is_finite() {
            return Err(TrainFailure::Numeric(Box::new(TrainAbort {
                reason: format!("non-finite loss {l_total} at iteration {iter}"),
                iter,
                model,
                log,
            })));
        }
        let mut grads = g.backward(nodes.total)?;
        let mut grad_map = BTreeMap::new();
        for (name, id) in &fwd.param_ids {
            let grad: Tensor<f32> = grads
                .take(*id)
                .ok_or_else(|| Error::Contract(format!("no gradient for parameter {name}")))?;
            grad_map.insert(name.clone(), grad);
        }
        let lr = lr_at(iter, cfg);
        adam_step(&mut model.params, &grad_map, lr, &hyper)?;
        log.iters.push(IterRecord { iter, lr, l_total, l_hole, l_valid });

        let done = iter + 1;
        let at_interval = cfg.validate_every > 0 && done % cfg.validate_every == 0;
        if at_interval && done != cfg.max_iters {
            run_validation(&model, val_blocks, suite, done, &mut log)?;
            on_checkpoint(done, &model, &log)?;
        }
    }
    run_validation(&model, val_blocks, suite, cfg.max_iters, &mut log)?;
    on_checkpoint(cfg.max_iters, &model, &log)?;
    Ok(TrainRun { model, log })
}

fn run_validation(
    model: &UNetModel<f32>,
    val_blocks: &[GridBlock],
    suite: &ValSuite,
    iter: u64,
    log: &mut TrainLog,
) -> Result<()> {
    if val_blocks.is_empty() {
        return Ok(());
    }
    for (name, value) in validate(model, val_blocks, suite)? {
        log.vals.push(ValRecord { iter, scenario: name, l1_hole: value });
    }
    Ok(())
}

#[cfg(test)]
mod bench {
    use super::*;
    use crate::data::SyntheticCitySpec;
    use std::time::Instant;

    #[test]
    #[ignore]
    fn bench_full_iterations() {
        let spec = SyntheticCitySpec::default_city();
        let series = spec.generate(3).unwrap();
        let blocks = crate::data::chunk_series(&series, 3).unwrap();
        let mut cfg = TrainConfig::new(3, 6);
        cfg.width_num = 1;
        cfg.width_den = 8;
        cfg.seed = 1;
        let suite = ValSuite { scenarios: vec![] };
        let mut noop = |_: u64, _: &UNetModel<f32>, _: &TrainLog| Ok(());
        let start = Instant::now();
        let run = match train(&blocks, &[], &suite, &cfg, &mut noop) {
            Ok(r) => r,
            Err(TrainFailure::Numeric(a)) => panic!("NaN: {}", a.reason),
            Err(TrainFailure::Other(e)) => panic!("{e}"),
        };
        let elapsed = start.elapsed().as_secs_f64();
        println!(
            "6 iters in {:.2}s -> {:.3}s/iter; losses {:.3} -> {:.3}",
            elapsed,
            elapsed / 6.0,
            run.log.iters[0].l_total,
            run.log.iters.last().unwrap().l_total
        );
        println!("projected 2000-iter run: {:.1} min", elapsed / 6.0 * 2000.0 / 60.0);
        println!("projected criteria 6-8 budget: {:.1} min", elapsed / 6.0 * 2000.0 * 12.3 / 60.0);
    }

    #[test]
    #[ignore]
    fn bench_phases() {
        let spec = SyntheticCitySpec::default_city();
        let series = spec.generate(3).unwrap();
        let blocks = crate::data::chunk_series(&series, 3).unwrap();
        let mut cfg = TrainConfig::new(3, 2);
        cfg.width_num = 1;
        cfg.width_den = 8;
        cfg.seed = 1;
        let mut model =
            build_unet::<f32>(&cfg.unet_config().unwrap(), init_seed(cfg.seed)).unwrap();
        let weights = LossWeights::new(cfg.lambda).unwrap();

        // phase 1: mask generation for a batch
        let t0 = Instant::now();
        let mut masks = Vec::new();
        for j in 0..16u64 {
            masks.push(training_mask(&blocks[j as usize % blocks.len()], &cfg, 0, j).unwrap());
        }
        println!("masks: {:?}", t0.elapsed());

        let refs: Vec<&GridBlock> = (0..16).map(|j| &blocks[j % blocks.len()]).collect();
        let t0 = Instant::now();
        let (img, msk) = batch_to_tensors::<f32>(&refs, &masks).unwrap();
        println!("batch assembly: {:?}", t0.elapsed());

        // phase 2: forward only
        let t0 = Instant::now();
        let mut g = Graph::new();
        let fwd = model.forward_train(&mut g, &img, &msk).unwrap();
        println!("forward: {:?}", t0.elapsed());

        // phase 3: loss + backward
        let t0 = Instant::now();
        let nodes = loss_graph(&mut g, fwd.output, &img, &msk, &weights).unwrap();
        let mut grads = g.backward(nodes.total).unwrap();
        println!("backward: {:?}", t0.elapsed());

        // phase 4: adam
        let t0 = Instant::now();
        let mut grad_map = BTreeMap::new();
        for (name, id) in &fwd.param_ids {
            grad_map.insert(name.clone(), grads.take(*id).unwrap());
        }
        adam_step(&mut model.params, &grad_map, 0.01, &AdamHyper::default()).unwrap();
        println!("adam: {:?}", t0.elapsed());
    }
}

#[cfg(test)]
mod bench_gemm {
    use crate::tensor::{Scalar, Tensor};
    use std::time::Instant;

    #[test]
    #[ignore]
    fn raw_gemm_throughput() {
        // dec5-like: M=8 K=216 N=3072; dec3-like: M=32 K=864 N=192; enc5-like: M=64 K=1728 N=4
        for (m, k, n) in [(8usize, 216usize, 3072usize), (32, 864, 192), (64, 1728, 4), (64, 576, 48), (256, 1024, 1024)] {
            let a = vec![1.0f32; m * k];
            let b = vec![1.0f32; k * n];
            let mut c = vec![0.0f32; m * n];
            let reps = (2e9 / (2.0 * (m * k * n) as f64)).max(1.0) as usize;
            let t0 = Instant::now();
            for _ in 0..reps {
                f32::gemm(m, k, n, 1.0, &a, k as isize, 1, &b, n as isize, 1, 0.0, &mut c, n as isize, 1);
            }
            let secs = t0.elapsed().as_secs_f64();
            let gflops = 2.0 * (m * k * n) as f64 * reps as f64 / secs / 1e9;
            println!("gemm {m}x{k}x{n}: {gflops:.1} GFLOP/s ({reps} reps)");
        }
        let t = Tensor::<f32>::zeros(&[1]);
        let _ = t;
    }
}

#[cfg(test)]
mod bench_layers {
    use crate::tensor::{conv3d_forward, window_sum3d, Tensor};
    use std::time::Instant;

    #[test]
    #[ignore]
    fn per_layer_conv_cost() {
        // width 1/8, T=3, 64x64, batch 16: (cin, cout, k, s, p, in_twh)
        let layers: Vec<(usize, usize, [usize; 3], [usize; 3], [usize; 3], [usize; 3])> = vec![
            (1, 8, [1, 3, 3], [1, 2, 2], [0, 1, 1], [3, 64, 64]),
            (8, 16, [1, 3, 3], [1, 2, 2], [0, 1, 1], [3, 32, 32]),
            (16, 32, [1, 3, 3], [1, 2, 2], [0, 1, 1], [3, 16, 16]),
            (32, 64, [1, 3, 3], [1, 2, 2], [0, 1, 1], [3, 8, 8]),
            (64, 64, [3, 3, 3], [2, 2, 2], [0, 1, 1], [3, 4, 4]),
            (64, 64, [1, 3, 3], [1, 2, 2], [0, 1, 1], [1, 2, 2]),
            (128, 64, [1, 3, 3], [1, 1, 1], [0, 1, 1], [1, 2, 2]),
            (128, 64, [1, 3, 3], [1, 1, 1], [0, 1, 1], [3, 4, 4]),
            (96, 32, [1, 3, 3], [1, 1, 1], [0, 1, 1], [3, 8, 8]),
            (48, 16, [1, 3, 3], [1, 1, 1], [0, 1, 1], [3, 16, 16]),
            (24, 8, [1, 3, 3], [1, 1, 1], [0, 1, 1], [3, 32, 32]),
            (10, 1, [1, 3, 3], [1, 1, 1], [0, 1, 1], [3, 64, 64]),
        ];
        let b = 16usize;
        let mut total_conv = 0.0;
        let mut total_ws = 0.0;
        for (i, &(cin, cout, k, s, p, twh)) in layers.iter().enumerate() {
            let x = Tensor::<f32>::filled(&[b, cin, twh[0], twh[1], twh[2]], 1.0);
            let w = Tensor::<f32>::filled(&[cout, cin, k[0], k[1], k[2]], 0.5);
            let bias = Tensor::<f32>::zeros(&[cout]);
            let reps = 5;
            let t0 = Instant::now();
            for _ in 0..reps {
                let _ = conv3d_forward(&x, &w, Some(&bias), s, p).unwrap();
            }
            let conv_ms = t0.elapsed().as_secs_f64() * 1000.0 / reps as f64;
            let t0 = Instant::now();
            for _ in 0..reps {
                let _ = window_sum3d(&x, k, s, p).unwrap();
            }
            let ws_ms = t0.elapsed().as_secs_f64() * 1000.0 / reps as f64;
            total_conv += conv_ms;
            total_ws += ws_ms;
            println!("layer {i}: conv {conv_ms:.2} ms, window_sum {ws_ms:.2} ms");
        }
        println!("total conv {total_conv:.1} ms, total window_sum {total_ws:.1} ms");
    }
}
