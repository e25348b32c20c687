use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use boq_cli::commands::{self, CliError};
use boq_cli::config::{RunConfig, KEYS};
use clap::{Parser, Subcommand};

/// Bag-of-Queries place recognition pipeline.
#[derive(Parser, Debug)]
#[command(name = "boq", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Flat `key = value` config file; unset keys keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the `seed` key.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory; must not exist or be empty.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Extra `KEY=VALUE` overrides applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic place dataset (images + manifest).
    Synth,
    /// Train a model on a manifest's training records.
    Train {
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Write descriptors for every manifest record.
    Embed {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Rank queries against references and report recall@k.
    Eval {
        #[arg(long)]
        queries: Option<PathBuf>,
        #[arg(long)]
        references: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Export cross-attention weights of selected queries.
    Attn {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        image: Option<PathBuf>,
    },
    /// Print every config key with its default and description.
    Defaults,
}

fn load_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Validation(format!("config {}: {e}", path.display())))?;
            RunConfig::parse(&text).map_err(|e| CliError::Validation(format!("config {}: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };
    for o in &cli.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| CliError::Validation(format!("--set `{o}`: expected KEY=VALUE")))?;
        cfg.set(k.trim(), v.trim())
            .map_err(|e| CliError::Validation(format!("--set: {e}")))?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let set = |slot: &mut Option<PathBuf>, value: &Option<PathBuf>| {
        if value.is_some() {
            slot.clone_from(value);
        }
    };
    match &cli.command {
        Command::Train { manifest } => set(&mut cfg.manifest, manifest),
        Command::Embed { checkpoint, manifest } => {
            set(&mut cfg.checkpoint, checkpoint);
            set(&mut cfg.manifest, manifest);
        }
        Command::Eval {
            queries,
            references,
            manifest,
        } => {
            set(&mut cfg.queries, queries);
            set(&mut cfg.references, references);
            set(&mut cfg.manifest, manifest);
        }
        Command::Attn { checkpoint, image } => {
            set(&mut cfg.checkpoint, checkpoint);
            set(&mut cfg.image, image);
        }
        Command::Synth | Command::Defaults => {}
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<String, CliError> {
    let cfg = load_config(cli)?;
    if let Command::Defaults = cli.command {
        let defaults = RunConfig::default();
        return Ok(KEYS
            .iter()
            .zip(defaults.entries())
            .map(|((_, doc), (k, v))| format!("# {doc}\n{k} = {v}\n"))
            .collect());
    }
    let out = cli
        .out
        .as_deref()
        .ok_or_else(|| CliError::Validation("--out is required".into()))?;
    match cli.command {
        Command::Synth => commands::synth(&cfg, out),
        Command::Train { .. } => commands::train_cmd(&cfg, out),
        Command::Embed { .. } => commands::embed(&cfg, out),
        Command::Eval { .. } => commands::eval(&cfg, out),
        Command::Attn { .. } => commands::attn(&cfg, out),
        Command::Defaults => unreachable!(),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(summary) => {
            print!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("boq: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
