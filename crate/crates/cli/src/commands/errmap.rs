use std::path::PathBuf;
use std::time::Instant;

use clap::Args as ClapArgs;
use gridmend_core::eval::spatial_error_map;
use gridmend_core::io::ugb;
use gridmend_core::{Error, Result};

use crate::manifest::Manifest;

#[derive(ClapArgs)]
pub struct Args {
    #[arg(long, required = true)]
    pub preds: Vec<PathBuf>,
    #[arg(long, required = true)]
    pub gts: Vec<PathBuf>,
    #[arg(long, required = true)]
    pub masks: Vec<PathBuf>,
    /// `map.ugb,map.ppm`, or a single base path that gets .ugb/.ppm appended
    #[arg(short, long)]
    pub out: String,
}

pub fn run(args: &Args, argv: &[String], started: Instant) -> Result<()> {
    let preds: Vec<_> =
        args.preds.iter().map(|p| ugb::read_grid_block(p)).collect::<Result<_>>()?;
    let gts: Vec<_> = args.gts.iter().map(|p| ugb::read_grid_block(p)).collect::<Result<_>>()?;
    let masks: Vec<_> =
        args.masks.iter().map(|p| ugb::read_mask_block(p)).collect::<Result<_>>()?;
    let map = spatial_error_map(&preds, &gts, &masks)?;
    let (ugb_path, ppm_path) = match args.out.split_once(',') {
        Some((a, b)) => (PathBuf::from(a), PathBuf::from(b)),
        None => (
            PathBuf::from(format!("{}.ugb", args.out)),
            PathBuf::from(format!("{}.ppm", args.out)),
        ),
    };
    map.save_ugb(&ugb_path)?;
    map.save_ppm(&ppm_path)?;
    let max_abs = map.value.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let evaluated = map.count.iter().filter(|&&c| c > 0).count();
    println!(
        "errmap: {} evaluated cells, symmetric range {:.4} -> {} / {}",
        evaluated,
        max_abs,
        ugb_path.display(),
        ppm_path.display()
    );
    if evaluated == 0 {
        return Err(Error::Numeric("error map has no evaluated cells".into()));
    }
    let mut m = Manifest::new("errmap", argv, started);
    for p in args.preds.iter().chain(&args.gts).chain(&args.masks) {
        m.input(p);
    }
    m.output(&ugb_path).output(&ppm_path).write()
}
