use std::path::PathBuf;
use std::time::Instant;

use clap::Args as ClapArgs;
use gridmend_core::io::ugb;
use gridmend_core::nn::{composite, UNetModel};
use gridmend_core::Result;

use crate::manifest::Manifest;

#[derive(ClapArgs)]
pub struct Args {
    /// Trained checkpoint (UCKP)
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Block to impute (ground truth or corrupted data)
    #[arg(long)]
    pub input: PathBuf,
    /// Hole mask (1 = keep, 0 = reconstruct) — any region works, including
    /// hand-drawn masks over known-bad data
    #[arg(long)]
    pub mask: PathBuf,
    #[arg(short, long)]
    pub out: PathBuf,
    /// Also write per-frame grayscale heatmaps as PREFIX_NN.pgm
    #[arg(long)]
    pub pgm_prefix: Option<String>,
}

pub fn run(args: &Args, argv: &[String], started: Instant) -> Result<()> {
    let model: UNetModel<f32> = UNetModel::load(&args.ckpt)?;
    let block = ugb::read_grid_block(&args.input)?;
    let mask = ugb::read_mask_block(&args.mask)?;
    let pred = model.predict(&block, &mask)?;
    let out = composite(&block, &mask, &pred)?;
    ugb::write_grid_block(&args.out, &out)?;
    let mut pgm_paths = Vec::new();
    if let Some(prefix) = &args.pgm_prefix {
        for k in 0..out.t() {
            let path = PathBuf::from(format!("{prefix}_{k:02}.pgm"));
            gridmend_core::io::img::write_pgm(&path, out.frame(k), out.h(), out.w())?;
            pgm_paths.push(path);
        }
    }
    println!(
        "impute: {} holes filled over {}x{}x{} -> {}",
        mask.hole_count(),
        block.t(),
        block.h(),
        block.w(),
        args.out.display()
    );
    let mut m = Manifest::new("impute", argv, started);
    m.input(&args.ckpt).input(&args.input).input(&args.mask).output(&args.out);
    for p in &pgm_paths {
        m.output(p);
    }
    m.write()
}
