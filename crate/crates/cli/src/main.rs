use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gryphon::appcode::load_all;
use gryphon::harness::{self, check::check_text, render_trace, Scenario};

#[derive(Parser)]
#[command(name = "gryphon", version, about = "Run and check edge-storage simulations")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate a scenario and write its trace.
    Run {
        scenario: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Defaults to the scenario path with a `.trace` extension.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Check a trace against every invariant.
    Check { trace: PathBuf, scenario: PathBuf },
    /// Assemble and verify a program without running it.
    Asm { file: PathBuf },
    /// Write the built-in consistency programs into a directory.
    Builtins { dir: PathBuf },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.cmd) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn read(path: &Path) -> Result<String, String> {
    std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))
}

fn dispatch(cmd: Cmd) -> Result<ExitCode, String> {
    match cmd {
        Cmd::Run { scenario, seed, trace } => {
            let (_, out) = harness::run(&scenario, seed).map_err(|e| e.to_string())?;
            let path = trace.unwrap_or_else(|| scenario.with_extension("trace"));
            std::fs::write(&path, render_trace(&out.trace)).map_err(|e| format!("{}: {e}", path.display()))?;
            println!("trace: {}", path.display());
            println!("{}", out.summary);
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Check { trace, scenario } => {
            let sc = Scenario::load(&scenario).map_err(|e| e.to_string())?;
            let report = check_text(&read(&trace)?, &sc).map_err(|e| e.to_string())?;
            print!("{report}");
            Ok(if report.passed() { ExitCode::SUCCESS } else { ExitCode::from(1) })
        }
        Cmd::Asm { file } => {
            let progs = load_all(&read(&file)?).map_err(|e| format!("{}: {e}", file.display()))?;
            for p in &progs {
                let prog = p.program();
                println!("{}: {} instructions, hook {}, verified", prog.name, prog.instructions.len(), prog.hook_kind);
            }
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Builtins { dir } => {
            std::fs::create_dir_all(&dir).map_err(|e| format!("{}: {e}", dir.display()))?;
            harness::export_builtins(&dir).map_err(|e| e.to_string())?;
            Ok(ExitCode::SUCCESS)
        }
    }
}
