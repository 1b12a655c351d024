use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use metast::experiment::{compare_report, generate_dataset, run_experiment};
use metast::gradcheck::run_suite;
use metast::tasks::SyntheticSpec;

#[derive(Parser)]
#[command(name = "metast", version, about = "Meta-learning laboratory for speech-translation-like tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a TOML config.
    Run { config: PathBuf },
    /// Compare the dev curves of two or more finished runs.
    Compare {
        #[arg(required = true, num_args = 2..)]
        dirs: Vec<PathBuf>,
        /// Write the comparison CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every primitive and of the model loss.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write a synthetic ASR/MT/ST dataset as TSV files.
    GenData {
        spec: PathBuf,
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

const GRADCHECK_TOLERANCE: f64 = 1e-4;

fn main() -> ExitCode {
    match run(Cli::parse().command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> metast::Result<ExitCode> {
    match command {
        Command::Run { config } => {
            let summary = run_experiment(&config)?;
            for (strategy, seeds) in &summary {
                for (seed, s) in seeds {
                    println!(
                        "{strategy} seed {seed}: bleu {:.2} wer {:.4} dev loss {:.4} after {} steps",
                        s.bleu, s.wer, s.final_loss, s.steps
                    );
                }
            }
        }
        Command::Compare { dirs, out } => {
            let cmp = compare_report(&dirs)?;
            let csv = cmp.to_csv();
            match out {
                Some(p) => std::fs::write(&p, csv).map_err(|e| metast::Error::io(&p, e))?,
                None => print!("{csv}"),
            }
            for v in &cmp.verdicts {
                eprintln!("{v}");
            }
        }
        Command::Gradcheck { trials, seed } => {
            let start = Instant::now();
            let results = run_suite(trials, seed)?;
            let mut ok = true;
            for r in &results {
                let pass = r.passed(GRADCHECK_TOLERANCE);
                ok &= pass;
                println!("{} {:<30} max rel err {:.3e} over {} inputs", if pass { "PASS" } else { "FAIL" }, r.name, r.max_error, r.trials);
            }
            println!("{:.1}s", start.elapsed().as_secs_f64());
            if !ok {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::GenData { spec, out, seed } => {
            let text = std::fs::read_to_string(&spec).map_err(|e| metast::Error::io(&spec, e))?;
            let spec: SyntheticSpec =
                toml::from_str(&text).map_err(|e| metast::Error::config("spec", e.message().to_string()))?;
            for p in generate_dataset(&spec, &out, seed)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
