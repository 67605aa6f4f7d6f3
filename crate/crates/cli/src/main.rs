use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use radseq::inference::BeamConfig;
use radseq::synthcorpus::GenConfig;
use radseq_cli::commands::{self, GenArgs, RecognitionJson};
use radseq_cli::config::{RunConfig, CHECKPOINT_ENV};
use radseq_cli::service::{serve, AppState};
use radseq_cli::CliError;

#[derive(Parser)]
#[command(
    name = "radseq",
    version,
    about = "Online trajectory to radical-caption recognition"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "train")]
        stem: String,
        #[arg(long, default_value_t = 20)]
        radicals: usize,
        #[arg(long, default_value = "a,d,stl,s")]
        structures: String,
        #[arg(long, default_value_t = 150)]
        classes: usize,
        #[arg(long, default_value_t = 20)]
        samples: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 0.5)]
        strength: f64,
        #[arg(long, default_value_t = 0)]
        writer_offset: u64,
    },
    /// Train from a run config.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Score a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        config: PathBuf,
        /// Dataset file; defaults to the config's test then train file.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Decode one points file.
    Recognize {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        points: PathBuf,
        #[arg(long, default_value_t = 10)]
        beam: usize,
        #[arg(long, default_value_t = 64)]
        max_len: usize,
    },
    /// Render per-step attention as SVG and PNG.
    Visualize {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        points: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        beam: usize,
        #[arg(long, default_value_t = 64)]
        max_len: usize,
    },
    /// Serve the HTTP recognition endpoints.
    Serve {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
    },
}

fn checkpoint_arg(flag: Option<PathBuf>) -> Result<PathBuf, CliError> {
    std::env::var_os(CHECKPOINT_ENV)
        .map(PathBuf::from)
        .or(flag)
        .ok_or_else(|| CliError::Usage(format!("--checkpoint or {CHECKPOINT_ENV} required")))
}

fn beam(beam: usize, max_len: usize) -> BeamConfig {
    BeamConfig {
        beam,
        max_len,
        length_normalize: false,
    }
}

fn print_json<T: serde::Serialize>(v: &T) {
    println!("{}", serde_json::to_string(v).expect("serializable"));
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData {
            out,
            stem,
            radicals,
            structures,
            classes,
            samples,
            seed,
            strength,
            writer_offset,
        } => {
            let args = GenArgs {
                out,
                stem,
                config: GenConfig {
                    n_radicals: radicals,
                    structures: commands::parse_structures(&structures)?,
                    n_classes: classes,
                    samples_per_class: samples,
                    seed,
                    strength,
                    writer_offset,
                },
            };
            let n = commands::gen_data(&args)?;
            eprintln!("wrote {n} samples to {}", args.out.display());
        }
        Command::Train { config } => {
            let cfg = RunConfig::load(&config)?;
            print_json(&commands::train(&cfg)?);
        }
        Command::Eval { config, data } => {
            let cfg = RunConfig::load(&config)?;
            print_json(&commands::eval(&cfg, data.as_deref())?);
        }
        Command::Recognize {
            checkpoint,
            points,
            beam: b,
            max_len,
        } => {
            let loaded = commands::load_model(&checkpoint_arg(checkpoint)?)?;
            let pts = commands::read_points(&points)?;
            let r = commands::recognize_points(&loaded.model, &pts, &beam(b, max_len))?;
            print_json(&RecognitionJson::from(&r));
        }
        Command::Visualize {
            checkpoint,
            points,
            out,
            beam: b,
            max_len,
        } => {
            let loaded = commands::load_model(&checkpoint_arg(checkpoint)?)?;
            let pts = commands::read_points(&points)?;
            let n = commands::visualize(&loaded.model, &pts, &beam(b, max_len), &out)?;
            eprintln!("wrote {n} steps to {}", out.display());
        }
        Command::Serve {
            config,
            checkpoint,
            addr,
        } => {
            let (path, beam_cfg) = match config {
                Some(c) => {
                    let cfg = RunConfig::load(&c)?;
                    (Some(checkpoint.unwrap_or(cfg.checkpoint)), cfg.beam)
                }
                None => (
                    std::env::var_os(CHECKPOINT_ENV)
                        .map(PathBuf::from)
                        .or(checkpoint),
                    BeamConfig::default(),
                ),
            };
            let model = match path {
                Some(p) => Some(Arc::new(commands::load_model(&p)?)),
                None => {
                    eprintln!("no checkpoint given; /recognize will answer 503");
                    None
                }
            };
            let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::Other(e.to_string()))?;
            rt.block_on(serve(
                AppState {
                    model,
                    beam: beam_cfg,
                },
                &addr,
            ))
            .map_err(|e| CliError::Other(e.to_string()))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
