use std::path::PathBuf;
use std::time::Instant;

use clap::Args as ClapArgs;
use gridmend_core::io::ugb;
use gridmend_core::Result;

use crate::manifest::Manifest;

#[derive(ClapArgs)]
pub struct Args {
    /// Synthetic city spec (key=value); omitted = built-in default city
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Days of hourly frames to generate
    #[arg(long)]
    pub days: usize,
    #[arg(long)]
    pub seed: u64,
    /// Output series (UGB + .meta sidecar)
    #[arg(short, long)]
    pub out: PathBuf,
}

pub fn run(args: &Args, argv: &[String], started: Instant) -> Result<()> {
    let spec = super::load_synth_spec(args.spec.as_deref(), args.seed)?;
    let series = spec.generate(args.days)?;
    ugb::write_series(&args.out, &series)?;
    println!(
        "synth: {} frames of {}x{} -> {}",
        series.n_frames(),
        series.h(),
        series.w(),
        args.out.display()
    );
    let mut m = Manifest::new("synth", argv, started);
    m.seed(args.seed);
    if let Some(spec_path) = &args.spec {
        m.input(spec_path);
    }
    m.output(&args.out).output(&ugb::series_meta_path(&args.out));
    m.write()
}
