use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use halu_forge::pipeline::{self, Command, Overrides, RunConfig};
use halu_forge::prompt::PromptKind;

#[derive(Parser)]
#[command(name = "halu-forge", version, about = "Build, split and score vulnerability-report datasets")]
struct Cli {
    /// ingest, extract, prompt, generate, select, export-train, classify, evaluate, census or all
    command: Command,
    #[arg(long)]
    config: PathBuf,
    /// Use offline mock backends
    #[arg(long)]
    mock: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = parse_kind)]
    prompt: Option<PromptKind>,
    #[arg(long)]
    rounds: Option<usize>,
    /// Fraction of samples selected for fine-tuning in each round
    #[arg(long)]
    p: Option<f64>,
    /// Comma-separated generator names to export, classify and evaluate
    #[arg(long, value_delimiter = ',')]
    report_filter: Option<Vec<String>>,
    /// Keep both samples of a CVE on the same side of every split
    #[arg(long)]
    pair_lock: bool,
}

fn parse_kind(s: &str) -> Result<PromptKind, String> {
    s.parse().map_err(|e: halu_forge::prompt::PromptError| e.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let overrides = Overrides {
        mock: cli.mock,
        seed: cli.seed,
        prompt: cli.prompt,
        rounds: cli.rounds,
        p: cli.p,
        report_filter: cli.report_filter,
        pair_lock: cli.pair_lock,
    };
    let result = RunConfig::load(&cli.config, &overrides).and_then(|cfg| pipeline::run(cli.command, &cfg));
    match result {
        Ok(lines) => {
            for l in lines {
                println!("{l}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
