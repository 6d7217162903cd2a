//! `rshe run <config>`, `rshe validate <config>`, `rshe replay <manifest>`.
//!
//! Exit status: 0 on success, 2 when the configuration is invalid, 3 when
//! the computation fails (partial artifacts are kept).

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod config;
mod run;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use run::{execute, Failure, Manifest};

#[derive(Parser)]
#[command(name = "rshe", version, about = "Rearranged SHE and common-noise MFG experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a TOML configuration.
    Run { config: PathBuf },
    /// Check a configuration without running it.
    Validate { config: PathBuf },
    /// Re-run from a manifest and compare every artifact hash.
    Replay { manifest: PathBuf },
}

fn read_config(path: &Path) -> Result<(config::RunConfig, String), Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Invalid(format!("{}: {e}", path.display())))?;
    let cfg = config::parse(&text).map_err(|e| Failure::Invalid(format!("{}: {e}", path.display())))?;
    Ok((cfg, text))
}

fn report(result: Result<Manifest, (Failure, Option<Box<Manifest>>)>, dir: &Path) -> Result<Manifest, Failure> {
    match result {
        Ok(m) => {
            println!("{}: ok, {} artifacts in {}", m.experiment, m.artifacts.len(), dir.display());
            Ok(m)
        }
        Err((f, manifest)) => {
            if manifest.is_some() {
                eprintln!("partial artifacts kept in {}", dir.display());
            }
            Err(f)
        }
    }
}

fn run(path: &Path) -> Result<(), Failure> {
    let (cfg, text) = read_config(path)?;
    let dir = run::output_dir(&cfg);
    report(execute(&cfg, &text, &dir), &dir).map(|_| ())
}

fn validate(path: &Path) -> Result<(), Failure> {
    let (cfg, _) = read_config(path)?;
    cfg.validate()?;
    println!("{}: valid {} configuration", path.display(), cfg.experiment.name());
    Ok(())
}

/// Runs the echoed configuration into `<manifest dir>/replay` (or the
/// override directory) and compares the artifact hashes.
fn replay(path: &Path) -> Result<(), Failure> {
    let original: Manifest = rshe::io::read_json(path).map_err(|e| Failure::Invalid(format!("{}: {e}", path.display())))?;
    let cfg = config::parse(&original.config_text).map_err(|e| Failure::Invalid(format!("echoed config: {e}")))?;
    let dir = match std::env::var_os(run::OUTPUT_ENV).filter(|d| !d.is_empty()) {
        Some(d) => PathBuf::from(d),
        None => path.parent().unwrap_or(Path::new(".")).join("replay"),
    };
    let fresh = match execute(&cfg, &original.config_text, &dir) {
        Ok(m) => m,
        Err((_, Some(m))) => *m,
        Err((f, None)) => return Err(f),
    };
    let mut mismatches = Vec::new();
    if fresh.exit_code != original.exit_code {
        mismatches.push(format!("exit status {} instead of {}", fresh.exit_code, original.exit_code));
    }
    if fresh.artifacts.len() != original.artifacts.len() {
        mismatches.push(format!("{} artifacts instead of {}", fresh.artifacts.len(), original.artifacts.len()));
    }
    for a in &original.artifacts {
        match fresh.artifacts.iter().find(|b| b.file == a.file) {
            Some(b) if b.sha256 == a.sha256 => {}
            Some(_) => mismatches.push(format!("{} differs", a.file)),
            None => mismatches.push(format!("{} missing", a.file)),
        }
    }
    if mismatches.is_empty() {
        println!("replay reproduced {} artifacts bit-exactly in {}", fresh.artifacts.len(), dir.display());
        Ok(())
    } else {
        Err(Failure::Numerical(format!("replay differs: {}", mismatches.join("; "))))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run { config } => run(config),
        Command::Validate { config } => validate(config),
        Command::Replay { manifest } => replay(manifest),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.exit_code() as u8)
        }
    }
}
