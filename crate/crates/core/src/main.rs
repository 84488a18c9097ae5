use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use hierakey::cli::{self, CommandOutput, EXIT_PARSE};

#[derive(Parser)]
#[command(name = "hierakey", version, about = "Hierarchical key establishment simulator")]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario file.
    Run {
        file: PathBuf,
        /// RNG seed; HIERAKEY_SEED takes precedence when set.
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Directory for the transcript, report and keystore.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every bundled scenario.
    Demo {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value = "demo-out")]
        out: PathBuf,
    },
    /// Inspect keystore files.
    Keystore {
        #[command(subcommand)]
        command: KeystoreCommand,
    },
}

#[derive(Subcommand)]
enum KeystoreCommand {
    /// List entities and peer-key pairs.
    Show { file: PathBuf },
}

fn seed_override(flag: u64) -> Result<u64, String> {
    match std::env::var("HIERAKEY_SEED") {
        Ok(v) => v.trim().parse().map_err(|_| format!("HIERAKEY_SEED={v:?} is not an unsigned integer\n")),
        Err(_) => Ok(flag),
    }
}

fn execute(command: Command) -> CommandOutput {
    let seeded = |seed| {
        seed_override(seed).map_err(|msg| CommandOutput { stdout: String::new(), stderr: msg, code: EXIT_PARSE })
    };
    match command {
        Command::Run { file, seed, out } => match seeded(seed) {
            Ok(seed) => cli::run_file(&file, seed, out.as_deref()),
            Err(o) => o,
        },
        Command::Demo { seed, out } => match seeded(seed) {
            Ok(seed) => cli::demo(seed, &out),
            Err(o) => o,
        },
        Command::Keystore { command: KeystoreCommand::Show { file } } => cli::keystore_show(&file),
    }
}

fn main() -> ExitCode {
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_PARSE as u8 } else { 0 });
        }
    };
    let out = execute(args.command);
    let _ = std::io::stdout().write_all(out.stdout.as_bytes());
    let _ = std::io::stderr().write_all(out.stderr.as_bytes());
    ExitCode::from(out.code as u8)
}
