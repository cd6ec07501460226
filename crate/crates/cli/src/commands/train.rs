use std::path::PathBuf;
use std::str::FromStr;
use std::time::Instant;

use clap::Args as ClapArgs;
use gridmend_core::train::{self, MaskMode, TrainConfig, TrainFailure};
use gridmend_core::{Error, Result};

use crate::manifest::Manifest;

#[derive(ClapArgs)]
pub struct Args {
    /// Directory of block .ugb files, or a series file (chunked at --t)
    #[arg(long)]
    pub data: PathBuf,
    /// Temporal depth of the training blocks
    #[arg(long)]
    pub t: usize,
    /// random | biased
    #[arg(long, default_value = "biased")]
    pub mask_mode: String,
    #[arg(long, default_value_t = 12.0)]
    pub lambda: f64,
    #[arg(long)]
    pub iters: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Channel width multiplier, e.g. 1 or 1/8
    #[arg(long, default_value = "1")]
    pub width_scale: String,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.01)]
    pub lr0: f64,
    /// Validate + checkpoint every N iterations (0 = only at the end)
    #[arg(long, default_value_t = 0)]
    pub validate_every: u64,
    /// Fraction of trailing blocks held out for validation
    #[arg(long, default_value_t = 0.05)]
    pub val_frac: f64,
    /// Output checkpoint (UCKP)
    #[arg(short, long)]
    pub out: PathBuf,
    /// Iteration log CSV; validation log lands next to it as .val.csv
    #[arg(long)]
    pub log: PathBuf,
}

pub fn run(args: &Args, argv: &[String], started: Instant) -> Result<()> {
    let (width_num, width_den) = super::parse_width(&args.width_scale)?;
    let blocks = super::load_blocks(&args.data, args.t)?;
    if !(0.0..1.0).contains(&args.val_frac) {
        return Err(Error::Param("val_frac must lie in [0, 1)".into()));
    }
    let n_val = if blocks.len() > 1 {
        ((blocks.len() as f64 * args.val_frac).ceil() as usize).min(blocks.len() - 1)
    } else {
        0
    };
    let n_train = blocks.len() - n_val;
    let (train_blocks, val_blocks) = blocks.split_at(n_train);

    let mut cfg = TrainConfig::new(args.t, args.iters);
    cfg.mask_mode = MaskMode::from_str(&args.mask_mode)?;
    cfg.lambda = args.lambda;
    cfg.batch_size = args.batch_size;
    cfg.lr0 = args.lr0;
    cfg.validate_every = args.validate_every;
    cfg.seed = args.seed;
    cfg.width_num = width_num;
    cfg.width_den = width_den;

    let suite = train::build_val_suite(val_blocks, &cfg.mask_cfg, cfg.seed)?;
    println!(
        "train: {} train / {} val blocks, T={}, {} mode, lambda {}, {} iters",
        n_train, n_val, args.t, cfg.mask_mode, cfg.lambda, cfg.max_iters
    );

    let ckpt_path = args.out.clone();
    let mut wrote_intermediate = Vec::new();
    let mut hook = |iter: u64, model: &gridmend_core::nn::UNetModel<f32>, _log: &train::TrainLog| {
        if iter == cfg.max_iters {
            model.save(&ckpt_path)
        } else {
            let mut p = ckpt_path.as_os_str().to_owned();
            p.push(format!(".iter{iter}"));
            let p = PathBuf::from(p);
            model.save(&p)?;
            wrote_intermediate.push(p);
            Ok(())
        }
    };
    let outcome = train::train(train_blocks, val_blocks, &suite, &cfg, &mut hook);
    let run = match outcome {
        Ok(run) => run,
        Err(TrainFailure::Numeric(abort)) => {
            let mut p = args.out.as_os_str().to_owned();
            p.push(".diag");
            let p = PathBuf::from(p);
            abort.model.save(&p)?;
            eprintln!(
                "train aborted at iteration {}: {} (diagnostic checkpoint at {})",
                abort.iter,
                abort.reason,
                p.display()
            );
            return Err(Error::Numeric(abort.reason));
        }
        Err(TrainFailure::Other(e)) => return Err(e),
    };
    let iter_csv = std::fs::File::create(&args.log)?;
    run.log.write_iter_csv(iter_csv)?;
    let mut val_path = args.log.as_os_str().to_owned();
    val_path.push(".val.csv");
    let val_path = PathBuf::from(val_path);
    run.log.write_val_csv(std::fs::File::create(&val_path)?)?;
    if let Some(last) = run.log.iters.last() {
        println!(
            "train: done, final loss {:.4} (hole {:.4}, valid {:.4})",
            last.l_total, last.l_hole, last.l_valid
        );
    }
    for v in run.log.vals.iter().filter(|v| v.iter == cfg.max_iters) {
        println!("val[{}] l1_hole {:.4}", v.scenario, v.l1_hole);
    }
    let mut m = Manifest::new("train", argv, started);
    m.seed(args.seed).input(&args.data).output(&args.out).output(&args.log).output(&val_path);
    for p in &wrote_intermediate {
        m.output(p);
    }
    m.write()
}
