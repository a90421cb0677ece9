use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use miqrec::commands;
use miqrec::config::KEYS;
use miqrec::{CliError, Result, RunConfig};
use miqrec_core::OpKind;

/// Sequential recommendation with multi-item-query attention.
#[derive(Parser)]
#[command(name = "miqrec", version)]
struct Cli {
    #[command(flatten)]
    opts: Overrides,
    #[command(subcommand)]
    command: Command,
}

/// Overrides applied on top of the config file, in this order.
#[derive(Args)]
struct Overrides {
    /// Config file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<String>,
    #[arg(long, global = true)]
    data: Option<String>,
    #[arg(long, global = true)]
    out: Option<String>,
    /// single or miq.
    #[arg(long, global = true)]
    attention: Option<String>,
    /// Query window size.
    #[arg(long, global = true)]
    m: Option<String>,
    /// Aggregator: context, last or full.
    #[arg(long, global = true)]
    agg: Option<String>,
    /// on or off.
    #[arg(long = "dummy-kv", global = true)]
    dummy_kv: Option<String>,
    #[arg(long, global = true)]
    kcore: Option<String>,
    /// umt, umrt or movielens.
    #[arg(long, global = true)]
    format: Option<String>,
    #[arg(long, global = true)]
    checkpoint: Option<String>,
    /// Any config key, as key=value. Repeatable; applied last.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Parse, k-core filter and cache an interaction file.
    Ingest { input: PathBuf },
    /// Train and keep the best checkpoint by validation NDCG@10.
    Train,
    /// Evaluate a checkpoint on the validation and test targets.
    Eval,
    /// Finite-difference gradient check on a small model.
    Gradcheck {
        /// Corrupt one op's pullback; the check must then fail.
        #[arg(long)]
        fault: Option<String>,
    },
    /// FLOP and parameter scaling grid.
    Bench,
    /// Suggest a query window from the cached dataset.
    SuggestM,
    /// Train one model per (m, d) cell.
    Sweep,
    /// Print the effective configuration.
    Config {
        /// List the accepted keys instead.
        #[arg(long)]
        keys: bool,
    },
}

impl Overrides {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        let flags = [
            ("seed", &self.seed),
            ("out", &self.out),
            ("data", &self.data),
            ("attention", &self.attention),
            ("m", &self.m),
            ("aggregator", &self.agg),
            ("dummy_kv", &self.dummy_kv),
            ("kcore", &self.kcore),
            ("format", &self.format),
            ("checkpoint", &self.checkpoint),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                cfg.set(key, v)?;
            }
        }
        for kv in &self.set {
            let (k, v) =
                kv.split_once('=').ok_or_else(|| CliError::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
            cfg.set(k.trim(), v)?;
        }
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = cli.opts.resolve()?;
    let mut out = io::stdout().lock();
    let log: &mut dyn Write = &mut out;
    if !matches!(cli.command, Command::Config { .. }) {
        std::fs::create_dir_all(&cfg.out).map_err(|e| CliError::io(&cfg.out, e))?;
    }
    match cli.command {
        Command::Ingest { input } => commands::ingest(&cfg, &input, log).map(drop),
        Command::Train => commands::train(&cfg, log).map(drop),
        Command::Eval => commands::eval(&cfg, log).map(drop),
        Command::Gradcheck { fault } => {
            let fault = fault
                .map(|f| OpKind::from_name(&f).ok_or_else(|| CliError::Config(format!("unknown op `{f}`"))))
                .transpose()?;
            commands::gradcheck(&cfg, fault, log).map(drop)
        }
        Command::Bench => commands::bench(&cfg, log).map(drop),
        Command::SuggestM => commands::suggest_m(&cfg, log).map(drop),
        Command::Sweep => commands::sweep(&cfg, log).map(drop),
        Command::Config { keys } => {
            let text = if keys { KEYS.iter().map(|(k, d)| format!("{k:<16} {d}\n")).collect() } else { cfg.to_text() };
            write!(log, "{text}").map_err(|e| CliError::io("<stdout>", e))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
