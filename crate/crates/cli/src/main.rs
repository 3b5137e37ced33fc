mod args;
mod commands;
mod config;
mod manifest;

use std::process::ExitCode;

use clap::Parser;
use serde_json::json;

use args::{Cli, Command};
use config::FileConfig;

const EXIT_VALIDATION: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

fn run(cli: Cli) -> anyhow::Result<()> {
    let file = FileConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Synth(a) => commands::synth(a, &file),
        Command::Ingest(a) => commands::ingest(a, &file),
        Command::Train(a) => commands::train(a, &file),
        Command::Experiment(a) => commands::experiment(a, &file),
        Command::Analyze(a) => commands::analyze_cmd(a, &file),
    }
}

fn classify(err: &anyhow::Error) -> (&'static str, u8) {
    match err.chain().find_map(|e| e.downcast_ref::<disagree_core::Error>()) {
        Some(e) if e.is_validation() => ("validation", EXIT_VALIDATION),
        Some(disagree_core::Error::Run { source, .. })
            if matches!(**source, disagree_core::Error::Diverged { .. }) =>
        {
            ("divergence", EXIT_RUNTIME)
        }
        Some(disagree_core::Error::Diverged { .. }) => ("divergence", EXIT_RUNTIME),
        _ => ("runtime", EXIT_RUNTIME),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let command = format!("{:?}", cli.command)
        .split(['(', ' '])
        .next()
        .unwrap_or_default()
        .to_lowercase();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let (kind, code) = classify(&err);
            let report = json!({
                "error": {
                    "command": command,
                    "kind": kind,
                    "message": err.to_string(),
                    "causes": err.chain().skip(1).map(|c| c.to_string()).collect::<Vec<_>>(),
                }
            });
            eprintln!("{report}");
            ExitCode::from(code)
        }
    }
}
