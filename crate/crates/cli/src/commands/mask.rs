use std::path::PathBuf;
use std::time::Instant;

use clap::Args as ClapArgs;
use gridmend_core::io::ugb;
use gridmend_core::masking;
use gridmend_core::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::manifest::Manifest;

#[derive(ClapArgs)]
pub struct Args {
    /// random | biased | scenario
    #[arg(long)]
    pub mode: String,
    /// Data block the mask pairs with (shape source; biased seeds from its values)
    #[arg(long)]
    pub input: PathBuf,
    /// Mask config (key=value; scenario mode reads mask_file=... here)
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(short, long)]
    pub out: PathBuf,
}

pub fn run(args: &Args, argv: &[String], started: Instant) -> Result<()> {
    let block = ugb::read_grid_block(&args.input)?;
    let (cfg, mask_file) = super::load_mask_cfg(args.config.as_deref())?;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let (t, h, w) = block.dims();
    let mut scenario_input: Option<PathBuf> = None;
    let mask = match args.mode.as_str() {
        "random" => masking::random_mask_block(t, h, w, &cfg, &mut rng),
        "biased" => masking::biased_mask_block(&block, &cfg, &mut rng)?,
        "scenario" => {
            let file = mask_file.ok_or_else(|| {
                Error::Param("scenario mode needs mask_file=... in --config".into())
            })?;
            let path = PathBuf::from(file);
            let (mask, ratio) = masking::load_scenario_mask(&path, t)?;
            println!("scenario mask hole ratio: {:.6}", ratio);
            scenario_input = Some(path);
            mask
        }
        other => return Err(Error::Param(format!("unknown mask mode '{other}'"))),
    };
    ugb::write_mask_block(&args.out, &mask)?;
    println!(
        "mask: {} mode, {} holes / {} voxels -> {}",
        args.mode,
        mask.hole_count(),
        t * h * w,
        args.out.display()
    );
    let mut m = Manifest::new("mask", argv, started);
    m.seed(args.seed).input(&args.input);
    if let Some(cfgp) = &args.config {
        m.input(cfgp);
    }
    if let Some(scn) = &scenario_input {
        m.input(scn);
    }
    m.output(&args.out).write()
}
