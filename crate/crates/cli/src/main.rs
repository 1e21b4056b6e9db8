use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use tapfuse::StreamFormat;
use tapfuse_cli::commands::{self, TrackInputs, BENCH_FILE, GT_FILE, TRACKS_FILE};
use tapfuse_cli::{load_config, CliError, RunConfig};

#[derive(Parser)]
#[command(name = "tapfuse", version, about = "Frame/event fusion point tracking")]
struct Cli {
    /// Flat `key = value` run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// Event stream format for written and extension-less streams.
    #[arg(long, global = true, value_enum)]
    format: Option<Format>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Evbin,
}

#[derive(Subcommand)]
enum Command {
    /// Render a scene, simulate its events and write ground truth.
    Simulate,
    /// Track the configured queries through a stream and video.
    Track {
        /// Event stream (default: the simulate output in --out).
        #[arg(long)]
        events: Option<PathBuf>,
        /// TNS1 video (default: the simulate output in --out).
        #[arg(long)]
        frames: Option<PathBuf>,
        /// TFW1 weights; seeded init from the config when absent.
        #[arg(long)]
        weights: Option<PathBuf>,
    },
    /// Score predicted tracks against a reference.
    Eval {
        #[arg(long)]
        pred: Option<PathBuf>,
        #[arg(long = "ref")]
        reference: Option<PathBuf>,
    },
    /// Throughput of parsing, binning, representations and state updates.
    Bench {
        /// Number of synthetic events (overrides `bench.events`).
        #[arg(long)]
        events: Option<usize>,
    },
    /// Dump the event tensor of one query step.
    Repr {
        #[arg(long)]
        events: Option<PathBuf>,
        /// Query step index (overrides `repr.step`).
        #[arg(long)]
        step: Option<usize>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg: RunConfig = load_config(cli.config.as_deref(), cli.seed)?;
    if let Some(f) = cli.format {
        cfg.format = match f {
            Format::Csv => StreamFormat::Csv,
            Format::Evbin => StreamFormat::Evbin,
        };
    }
    let out = &cli.out;
    let default_events = || out.join(commands::events_file(cfg.format));
    match cli.command {
        Command::Simulate => println!("{}", commands::simulate(&cfg, out)?),
        Command::Track {
            events,
            frames,
            weights,
        } => {
            let defaults = TrackInputs::from_dir(out, cfg.format);
            let inputs = TrackInputs {
                events: events.unwrap_or(defaults.events),
                frames: frames.unwrap_or(defaults.frames),
                weights,
            };
            let (tracks, stats) = commands::track(&cfg, &inputs, out)?;
            println!(
                "{} queries x {} steps ({} init, {} update) -> {}",
                tracks.num_queries(),
                tracks.num_steps(),
                stats.init_calls,
                stats.update_calls,
                out.join(TRACKS_FILE).display()
            );
        }
        Command::Eval { pred, reference } => {
            let pred = pred.unwrap_or_else(|| out.join(TRACKS_FILE));
            let reference = reference.unwrap_or_else(|| out.join(GT_FILE));
            print!("{}", commands::eval(&cfg, &pred, &reference, out)?.to_csv());
        }
        Command::Bench { events } => {
            if let Some(n) = events {
                cfg.bench_events = n;
            }
            let json = commands::bench(&cfg)?.to_json();
            std::fs::create_dir_all(out).map_err(|e| CliError::Io {
                path: out.clone(),
                source: e,
            })?;
            let path = out.join(BENCH_FILE);
            std::fs::write(&path, &json).map_err(|e| CliError::Io { path, source: e })?;
            println!("{json}");
        }
        Command::Repr { events, step } => {
            let events = events.unwrap_or_else(default_events);
            let (tensor, path) = commands::repr(&cfg, &events, step.unwrap_or(cfg.repr_step), out)?;
            let (h, w, b) = tensor.data.dim();
            println!("{} {h}x{w}x{b} -> {}", tensor.kind.name(), path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    if let Err(e) = commands::configure_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(CliError::CONFIG as u8);
    }
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
