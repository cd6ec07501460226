mod commands;
mod manifest;

use clap::{Parser, Subcommand};
use gridmend_core::Error as CoreError;

#[derive(Parser)]
#[command(
    name = "gridmend",
    about = "Impute missing regions in gridded urban event histograms",
    version
)]
struct Cli {
    /// Worker threads for internal data parallelism (results are
    /// bit-identical for any value).
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic skewed-city series
    Synth(commands::synth::Args),
    /// Rasterize point events into an hourly histogram series
    Rasterize(commands::rasterize::Args),
    /// Chunk a series into T-frame blocks
    Chunk(commands::chunk::Args),
    /// Generate a hole mask for a block
    Mask(commands::mask::Args),
    /// Train the partial-convolution U-Net
    Train(commands::train::Args),
    /// Impute holes in one block with a trained model (composite output)
    Impute(commands::impute::Args),
    /// Hole-restricted metrics for prediction/ground-truth/mask triples
    Eval(commands::eval::Args),
    /// Evaluate an imputer over a static scenario mask and period
    Scenario(commands::scenario::Args),
    /// Aggregated spatial error map
    Errmap(commands::errmap::Args),
    /// Run the gradient-check suite
    Gradcheck,
}

const EXIT_USAGE: i32 = 1;
const EXIT_DATA: i32 = 2;
const EXIT_NUMERIC: i32 = 3;

fn exit_code_for(err: &CoreError) -> i32 {
    match err {
        CoreError::Param(_) | CoreError::Config(_) => EXIT_USAGE,
        CoreError::Numeric(_) => EXIT_NUMERIC,
        _ => EXIT_DATA,
    }
}

fn main() {
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap routes help/version through the error path too
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    let threads = cli.threads.max(1);
    let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    let started = std::time::Instant::now();
    let result = match &cli.command {
        Command::Synth(args) => commands::synth::run(args, &argv, started),
        Command::Rasterize(args) => commands::rasterize::run(args, &argv, started),
        Command::Chunk(args) => commands::chunk::run(args, &argv, started),
        Command::Mask(args) => commands::mask::run(args, &argv, started),
        Command::Train(args) => commands::train::run(args, &argv, started),
        Command::Impute(args) => commands::impute::run(args, &argv, started),
        Command::Eval(args) => commands::eval::run(args, &argv, started),
        Command::Scenario(args) => commands::scenario::run(args, &argv, started),
        Command::Errmap(args) => commands::errmap::run(args, &argv, started),
        Command::Gradcheck => commands::gradcheck::run(),
    };
    match result {
        Ok(()) => {}
        Err(e) => {
            eprintln!("gridmend: {e}");
            std::process::exit(exit_code_for(&e));
        }
    }
}
