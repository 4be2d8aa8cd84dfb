//! Single-binary pipeline: generate synthetic sequences, train, fit
//! observations, fuse depth, refine bodies, extract meshes, evaluate, and
//! report. File in, file out; every command is reproducible under a fixed
//! seed.

mod commands;
mod progress;

use clap::Parser;

#[derive(Parser)]
#[command(
    name = "local4d",
    version,
    about = "Part-based 4D implicit surfaces: fit, reconstruct and evaluate dynamic body sequences"
)]
struct Cli {
    /// Global seed override (takes precedence over --config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for parallel inner loops (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Emit machine-readable JSON progress lines.
    #[arg(long, global = true)]
    json: bool,
    /// Validate inputs, print the resolved plan, and exit without computing.
    #[arg(long, global = true)]
    dry_run: bool,
    /// JSON run-config file; explicit flags override its values.
    #[arg(long, global = true)]
    config: Option<std::path::PathBuf>,
    #[command(subcommand)]
    command: commands::Command,
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            // --help / --version print to stdout and exit 0; any usage
            // problem prints the synopsis to stderr and exits 1
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                std::process::exit(0);
            }
            eprint!("{e}");
            std::process::exit(1);
        }
    };
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .expect("rayon pool initialized once");
    }
    let ctx = commands::Context {
        seed: cli.seed,
        json: cli.json,
        dry_run: cli.dry_run,
        config_path: cli.config,
    };
    match commands::dispatch(cli.command, &ctx) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::exit(2);
        }
    }
}
