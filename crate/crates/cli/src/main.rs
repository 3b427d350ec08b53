use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rheoflow_cli::checks::{graph_checks, quadrature_checks, reference_models, tangent_checks};
use rheoflow_cli::{run, RunConfig, RunSettings};

#[derive(Parser)]
#[command(name = "rheoflow", version, about = "Mixed finite elements for implicitly constituted fluids")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a TOML config file.
    Run {
        config: PathBuf,
        /// Output directory (overrides `output.dir`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads for assembly.
        #[arg(long)]
        threads: Option<usize>,
        /// Also write each mesh as plain text.
        #[arg(long)]
        dump_mesh: bool,
    },
    /// Graph, quadrature and tangent self-tests.
    Check,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run {
            config,
            out,
            threads,
            dump_mesh,
        } => {
            if let Some(n) = threads {
                if let Err(e) = rheoflow_core::par::set_threads(n) {
                    eprintln!("configuration error: {e}");
                    return ExitCode::from(2);
                }
            }
            let cfg = match RunConfig::load(&config).and_then(|c| c.resolve()) {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("configuration error: {e}");
                    return ExitCode::from(2);
                }
            };
            match run(&cfg, &RunSettings { out, dump_mesh }) {
                Ok(outcome) => {
                    for f in &outcome.files {
                        println!("wrote {}", f.display());
                    }
                    println!("done in {:.1} s", outcome.report.wall_clock);
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("{e}");
                    ExitCode::from(e.exit_code() as u8)
                }
            }
        }
        Command::Check => {
            let mut results = quadrature_checks();
            results.extend(tangent_checks(200, 11));
            for model in reference_models() {
                results.extend(graph_checks(&model, 2000, 3, 50.0));
            }
            let mut failed = 0;
            for r in &results {
                println!("{} {}: {}", if r.passed { "ok  " } else { "FAIL" }, r.name, r.detail);
                failed += usize::from(!r.passed);
            }
            if failed == 0 {
                println!("all {} checks passed", results.len());
                ExitCode::SUCCESS
            } else {
                println!("{failed} of {} checks failed", results.len());
                ExitCode::from(1)
            }
        }
    }
}
