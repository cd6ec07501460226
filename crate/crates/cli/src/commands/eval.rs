use std::path::PathBuf;
use std::time::Instant;

use clap::Args as ClapArgs;
use gridmend_core::eval::{data_peak, evaluate_blocks};
use gridmend_core::io::ugb;
use gridmend_core::Result;

use crate::manifest::Manifest;

#[derive(ClapArgs)]
pub struct Args {
    /// Prediction blocks (repeatable, aligned with --gt/--mask)
    #[arg(long, required = true)]
    pub pred: Vec<PathBuf>,
    #[arg(long, required = true)]
    pub gt: Vec<PathBuf>,
    #[arg(long, required = true)]
    pub mask: Vec<PathBuf>,
    /// PSNR/SSIM data range; default = max ground-truth value
    #[arg(long)]
    pub peak: Option<f64>,
    #[arg(short, long)]
    pub out: PathBuf,
}

pub fn run(args: &Args, argv: &[String], started: Instant) -> Result<()> {
    let preds: Vec<_> =
        args.pred.iter().map(|p| ugb::read_grid_block(p)).collect::<Result<_>>()?;
    let gts: Vec<_> = args.gt.iter().map(|p| ugb::read_grid_block(p)).collect::<Result<_>>()?;
    let masks: Vec<_> =
        args.mask.iter().map(|p| ugb::read_mask_block(p)).collect::<Result<_>>()?;
    let peak = args.peak.unwrap_or_else(|| data_peak(&gts));
    let report = evaluate_blocks(&preds, &gts, &masks, peak)?;
    report.write_csv(std::fs::File::create(&args.out)?)?;
    println!(
        "eval: {} blocks, mean l1_hole {:.4}, l2_hole {:.4}, ssim {:.4}, psnr {:.2} dB (peak {})",
        report.blocks.len(),
        report.mean_l1_hole(),
        report.mean_l2_hole(),
        report.mean_ssim(),
        report.mean_psnr(),
        peak
    );
    let mut m = Manifest::new("eval", argv, started);
    for p in args.pred.iter().chain(&args.gt).chain(&args.mask) {
        m.input(p);
    }
    m.output(&args.out).write()
}
