//! `mmssl` command-line entry point.

mod args;
mod commands;
mod error;
mod manifest;

use std::path::Path;

use clap::Parser;

use args::{Cli, Command, SUBCOMMANDS};
use error::{CliError, EXIT_OK};
use manifest::RunManifest;

/// Reads `key = value` lines into flags. `true` becomes a bare switch and
/// `false` is dropped.
fn config_flags(path: &Path) -> Result<Vec<String>, CliError> {
    let text = std::fs::read_to_string(path)?;
    let mut flags = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("{}:{}: expected `key = value`", path.display(), i + 1)))?;
        let flag = format!("--{}", key.trim().replace('_', "-"));
        match value.trim() {
            "true" => flags.push(flag),
            "false" => {}
            v => {
                flags.push(flag);
                flags.push(v.trim_matches('"').to_string());
            }
        }
    }
    Ok(flags)
}

/// Splices config-file flags in right after the subcommand so that flags
/// given on the command line, which come later, take precedence.
fn merge_config(argv: Vec<String>) -> Result<Vec<String>, CliError> {
    let mut config = None;
    for (i, a) in argv.iter().enumerate() {
        if a == "--config" {
            config = argv.get(i + 1).cloned();
        } else if let Some(p) = a.strip_prefix("--config=") {
            config = Some(p.to_string());
        }
    }
    let Some(config) = config else {
        return Ok(argv);
    };
    let Some(pos) = argv.iter().skip(1).position(|a| SUBCOMMANDS.contains(&a.as_str())) else {
        return Ok(argv);
    };
    let mut merged = argv[..pos + 2].to_vec();
    merged.extend(config_flags(Path::new(&config))?);
    merged.extend_from_slice(&argv[pos + 2..]);
    Ok(merged)
}

fn run(argv: Vec<String>) -> Result<(), CliError> {
    let cli = Cli::try_parse_from(merge_config(argv)?)?;
    match &cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Pretrain(a) => commands::pretrain(a),
        Command::Probe(a) => commands::probe(a),
        Command::Sweep(a) => commands::sweep(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Replay(a) => {
            let m = RunManifest::load(&a.manifest)?;
            if m.command == "replay" || !SUBCOMMANDS.contains(&m.command.as_str()) {
                return Err(CliError::Usage(format!("manifest names unknown command {:?}", m.command)));
            }
            run(m.to_argv(a.output_dir.as_deref())?)
        }
    }
}

fn main() {
    let code = match run(std::env::args().collect()) {
        Ok(()) => EXIT_OK,
        Err(CliError::Clap(e)) => {
            let _ = e.print();
            e.exit_code()
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    };
    std::process::exit(code);
}
