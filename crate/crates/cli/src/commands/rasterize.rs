use std::fs::File;
use std::io::BufReader;
use std::path::PathBuf;
use std::time::Instant;

use clap::Args as ClapArgs;
use gridmend_core::data;
use gridmend_core::io::ugb;
use gridmend_core::Result;

use crate::manifest::Manifest;

#[derive(ClapArgs)]
pub struct Args {
    /// Event CSV with header timestamp,lon,lat
    #[arg(long)]
    pub events: PathBuf,
    /// Region spec (key=value: lon_min, lon_max, lat_min, lat_max, grid_w, grid_h, bin_hours)
    #[arg(long)]
    pub region: PathBuf,
    /// Window start (ISO-8601, local wall clock)
    #[arg(long)]
    pub start: String,
    /// Number of frames
    #[arg(long)]
    pub frames: usize,
    #[arg(short, long)]
    pub out: PathBuf,
}

pub fn run(args: &Args, argv: &[String], started: Instant) -> Result<()> {
    let region = super::load_region(&args.region)?;
    let start = super::parse_timestamp(&args.start)?;
    let reader = BufReader::new(File::open(&args.events)?);
    let parsed = data::parse_events(reader)?;
    let (series, dropped) = data::rasterize(&parsed.events, &region, start, args.frames)?;
    ugb::write_series(&args.out, &series)?;
    println!(
        "rasterize: {} events ({} malformed rows skipped), {} outside region/window, {} frames -> {}",
        parsed.events.len(),
        parsed.skipped,
        dropped,
        series.n_frames(),
        args.out.display()
    );
    Manifest::new("rasterize", argv, started)
        .input(&args.events)
        .input(&args.region)
        .output(&args.out)
        .output(&ugb::series_meta_path(&args.out))
        .write()
}
