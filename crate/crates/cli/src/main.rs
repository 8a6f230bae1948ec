use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crscore_cli::commands;
use crscore_cli::config::RunConfig;

#[derive(Parser)]
#[command(name = "crscore", version, about = "Reference-free code review quality metrics")]
struct Cli {
    /// Flat TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override a config key (repeatable), e.g. `--set threshold=paper-gt`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    /// More logging (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate pseudo-references (LLM claims plus analyzer smells).
    GenRefs,
    /// Run the static analyzers only.
    Smells,
    /// Score every review: Con, Comp and Rel.
    Score,
    /// Calibrate the similarity threshold.
    Calibrate,
    /// Reference-based baselines and the LLM judge.
    Baselines,
    /// Instance-level correlation of metrics with human ratings.
    Correlate,
    /// System rankings and their agreement with human rankings.
    Rank,
    /// Correlation with human relevance across a threshold grid.
    Sweep,
    /// Precision/recall of the similarity threshold against human links.
    StsEval,
    /// Joined system-level and correlation report.
    Report,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result = RunConfig::load(cli.config.as_deref(), &cli.overrides).and_then(|cfg| match cli.command {
        Command::GenRefs => commands::gen_refs(&cfg),
        Command::Smells => commands::smells(&cfg),
        Command::Score => commands::score(&cfg),
        Command::Calibrate => commands::calibrate(&cfg),
        Command::Baselines => commands::baselines(&cfg),
        Command::Correlate => commands::correlate(&cfg),
        Command::Rank => commands::rank(&cfg),
        Command::Sweep => commands::sweep(&cfg),
        Command::StsEval => commands::sts_eval(&cfg),
        Command::Report => commands::report(&cfg),
    });
    match result {
        Ok(paths) => {
            let mut seen = std::collections::HashSet::new();
            for p in paths.iter().filter(|p| seen.insert(p.as_path())) {
                println!("{}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(crscore_cli::exit_code(&e) as u8)
        }
    }
}
