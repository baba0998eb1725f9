//! `golomb`: synthesize data, train, evaluate, track and inspect.
//!
//! Every subcommand reads an optional JSON run config (`--config`), applies
//! dotted overrides such as `--train.learning_rate 1e-3`, and echoes the
//! effective config next to its outputs.
//!
//! Exit codes: 0 success, 1 usage or config error, 2 data error.

mod commands;
mod repl;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use golomb::config::RunConfig;

const SECTIONS: [&str; 6] = ["assembly", "encoder", "train", "decoding", "synth", "paths"];

#[derive(Parser, Debug)]
#[command(
    name = "golomb",
    version,
    about = "Schema-guided dialogue state tracking",
    after_help = "Config values can be overridden with dotted flags, e.g. --train.learning_rate 1e-3 \
                  or --assembly.categorical_head=cls. Sections: assembly, encoder, train, decoding, synth, paths.\n\
                  GOLOMB_THREADS sets the default worker thread count."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// JSON run config; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (default: GOLOMB_THREADS, else all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset (train/ and dev/ split directories).
    Synth {
        /// Output directory (default: paths.output_dir).
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Train a model and write it to the model directory.
    Train {
        /// Training split directory (default: paths.train_dir).
        #[arg(long)]
        train_dir: Option<PathBuf>,
        /// Dev split for per-epoch scoring and the best checkpoint (default: paths.dev_dir).
        #[arg(long)]
        dev_dir: Option<PathBuf>,
        /// Model directory (default: paths.model_dir).
        #[arg(long)]
        model_dir: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Predict states for a split and print the metric report.
    Eval {
        /// Split directory with gold dialogues (default: paths.dev_dir).
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long)]
        model_dir: Option<PathBuf>,
        /// Checkpoint inside the model directory.
        #[arg(long, default_value = "final")]
        checkpoint: String,
        /// Score an existing prediction dump instead of running a model.
        #[arg(long)]
        predictions: Option<PathBuf>,
        /// Use exact string matching for non-categorical values in joint accuracy.
        #[arg(long)]
        strict: bool,
        /// Write the JSON report here (default: <output_dir>/report.json when paths.output_dir is set).
        #[arg(long)]
        report: Option<PathBuf>,
        /// Number of slots listed in the error table.
        #[arg(long, default_value_t = 10)]
        top_slots: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Write predicted dialogue states for a split as a dialogue JSON file.
    Track {
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long)]
        model_dir: Option<PathBuf>,
        #[arg(long, default_value = "final")]
        checkpoint: String,
        /// Output file for the predicted dialogues.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Type alternating system/user utterances and inspect the model's view.
    Repl {
        #[arg(long)]
        model_dir: Option<PathBuf>,
        #[arg(long, default_value = "final")]
        checkpoint: String,
        /// Schema file or split directory holding the service.
        #[arg(long)]
        schemas: PathBuf,
        /// Service to track.
        #[arg(long)]
        service: String,
    },
}

/// Failure classes mapped to exit codes.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Data(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
        }
    }
}

impl From<golomb::Error> for Failure {
    fn from(e: golomb::Error) -> Self {
        match e {
            golomb::Error::Config(_) => Failure::Usage(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(m) | Failure::Data(m) => f.write_str(m),
        }
    }
}

pub type Outcome<T = ()> = Result<T, Failure>;

/// Dotted `section.key` overrides with their raw values.
type Overrides = Vec<(String, String)>;

/// Splits `--section.key value` / `--section.key=value` overrides out of argv.
fn split_overrides(args: Vec<String>) -> Outcome<(Vec<String>, Overrides)> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let dotted = a.strip_prefix("--").filter(|s| s.split_once('.').is_some_and(|(sec, _)| SECTIONS.contains(&sec)));
        match dotted {
            Some(body) => {
                let (key, value) = match body.split_once('=') {
                    Some((k, v)) => (k.to_string(), v.to_string()),
                    None => {
                        let v = it.next().ok_or_else(|| Failure::Usage(format!("--{body} needs a value")))?;
                        (body.to_string(), v)
                    }
                };
                overrides.push((key, value));
            }
            None => rest.push(a),
        }
    }
    Ok((rest, overrides))
}

fn effective_config(common: &Common, overrides: &[(String, String)]) -> Outcome<RunConfig> {
    let base = match &common.config {
        Some(p) => {
            if !p.exists() {
                return Err(Failure::Usage(format!("config file {} does not exist", p.display())));
            }
            RunConfig::load(p).map_err(|e| Failure::Usage(e.to_string()))?
        }
        None => RunConfig::default(),
    };
    let cfg = base.with_overrides(overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

fn init_threads(common: &Common) -> Outcome {
    let from_env = match std::env::var("GOLOMB_THREADS") {
        Ok(v) => Some(
            v.parse::<usize>()
                .map_err(|_| Failure::Usage(format!("GOLOMB_THREADS must be a positive integer, got `{v}`")))?,
        ),
        Err(_) => None,
    };
    if let Some(n) = common.threads.or(from_env) {
        if n == 0 {
            return Err(Failure::Usage("thread count must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Usage(format!("cannot configure threads: {e}")))?;
    }
    Ok(())
}

fn run(args: Vec<String>) -> Outcome {
    let (rest, overrides) = split_overrides(args)?;
    let cli = match Cli::try_parse_from(rest) {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            print!("{e}");
            return Ok(());
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            return Err(Failure::Usage(format!("{first} (see `golomb --help`)")));
        }
    };
    match cli.command {
        Command::Synth { out, common } => {
            init_threads(&common)?;
            let mut cfg = effective_config(&common, &overrides)?;
            if out.is_some() {
                cfg.paths.output_dir = out;
            }
            commands::synth(&cfg)
        }
        Command::Train { train_dir, dev_dir, model_dir, common } => {
            init_threads(&common)?;
            let mut cfg = effective_config(&common, &overrides)?;
            cfg.paths.train_dir = train_dir.or(cfg.paths.train_dir);
            cfg.paths.dev_dir = dev_dir.or(cfg.paths.dev_dir);
            cfg.paths.model_dir = model_dir.or(cfg.paths.model_dir);
            commands::train(&cfg)
        }
        Command::Eval { data_dir, model_dir, checkpoint, predictions, strict, report, top_slots, common } => {
            init_threads(&common)?;
            let mut cfg = effective_config(&common, &overrides)?;
            cfg.paths.dev_dir = data_dir.or(cfg.paths.dev_dir);
            cfg.paths.model_dir = model_dir.or(cfg.paths.model_dir);
            commands::eval(&cfg, &commands::EvalArgs { checkpoint, predictions, strict, report, top_slots })
        }
        Command::Track { data_dir, model_dir, checkpoint, out, common } => {
            init_threads(&common)?;
            let mut cfg = effective_config(&common, &overrides)?;
            cfg.paths.dev_dir = data_dir.or(cfg.paths.dev_dir);
            cfg.paths.model_dir = model_dir.or(cfg.paths.model_dir);
            commands::track(&cfg, &checkpoint, &out)
        }
        Command::Repl { model_dir, checkpoint, schemas, service } => {
            if !overrides.is_empty() {
                return Err(Failure::Usage("repl takes its configuration from the model directory".into()));
            }
            let model_dir = model_dir.ok_or_else(|| Failure::Usage("repl needs --model-dir".into()))?;
            repl::run(&model_dir, &checkpoint, &schemas, &service)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).format_target(false).init();
    match run(std::env::args().collect()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code())
        }
    }
}
