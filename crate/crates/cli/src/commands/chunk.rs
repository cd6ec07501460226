use std::path::PathBuf;
use std::time::Instant;

use clap::Args as ClapArgs;
use gridmend_core::io::ugb;
use gridmend_core::{data, Result};

use crate::manifest::Manifest;

#[derive(ClapArgs)]
pub struct Args {
    /// Input series (UGB + .meta)
    #[arg(long)]
    pub input: PathBuf,
    /// Frames per block
    #[arg(long)]
    pub t: usize,
    /// Output directory for block_NNNNN.ugb files
    #[arg(short, long)]
    pub out: PathBuf,
}

pub fn run(args: &Args, argv: &[String], started: Instant) -> Result<()> {
    let series = ugb::read_series(&args.input)?;
    let blocks = data::chunk_series(&series, args.t)?;
    std::fs::create_dir_all(&args.out)?;
    let mut m = Manifest::new("chunk", argv, started);
    m.input(&args.input);
    let mut first = None;
    for (i, block) in blocks.iter().enumerate() {
        let path = args.out.join(format!("block_{:05}.ugb", i));
        ugb::write_grid_block(&path, block)?;
        if first.is_none() {
            first = Some(path.clone());
        }
        m.output(&path);
    }
    println!(
        "chunk: {} blocks of T={} ({} trailing frames dropped) -> {}",
        blocks.len(),
        args.t,
        series.n_frames() - blocks.len() * args.t,
        args.out.display()
    );
    if first.is_some() {
        m.write()?;
    }
    Ok(())
}
