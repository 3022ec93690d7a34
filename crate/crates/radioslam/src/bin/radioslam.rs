use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use radioslam::harness::{
    metrics_summary, plotdata, read_series, run_preset, write_report, Preset,
};
use radioslam::scenario::ScenarioFile;

#[derive(Parser)]
#[command(name = "radioslam", about = "Cooperative radio SLAM simulation harness", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a scenario file; reports every violation, not only the first.
    Validate {
        /// Scenario file (TOML); omit to check the bundled default.
        #[arg(long)]
        scenario: Option<PathBuf>,
    },
    /// Run an experiment preset and write series/snapshot/config files.
    Run {
        /// One of: hybrid_fig5ab, crowd_fig5cd, sweep_fig6, beamtrack, custom.
        #[arg(long)]
        preset: String,
        /// Scenario file; omit to use the preset's bundled scenario.
        #[arg(long)]
        scenario: Option<PathBuf>,
        /// Override the scenario's seed count.
        #[arg(long)]
        seeds: Option<u64>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Print final-epoch aggregates from a run directory.
    Metrics {
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Print the tidy long-format plot table from a run directory.
    Plotdata {
        #[arg(long = "in")]
        input: PathBuf,
    },
}

fn load_text(path: &Option<PathBuf>, fallback: &str) -> Result<String, std::io::Error> {
    match path {
        Some(p) => std::fs::read_to_string(p),
        None => Ok(fallback.to_string()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(violations) => {
            for v in violations {
                eprintln!("violation,{v}");
            }
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<(), Vec<String>> {
    let fail = |e: radioslam::error::Error| -> Vec<String> {
        match e {
            radioslam::error::Error::Validation(list) => list,
            other => vec![other.to_string()],
        }
    };
    match cli.command {
        Command::Validate { scenario } => {
            let text = load_text(&scenario, Preset::Custom.bundled_scenario())
                .map_err(|e| vec![e.to_string()])?;
            let file = ScenarioFile::parse(&text).map_err(fail)?;
            let violations = file.violations();
            if violations.is_empty() {
                println!("ok");
                Ok(())
            } else {
                Err(violations)
            }
        }
        Command::Run { preset, scenario, seeds, out } => {
            let preset = Preset::from_name(&preset).map_err(fail)?;
            let text = load_text(&scenario, preset.bundled_scenario())
                .map_err(|e| vec![e.to_string()])?;
            let file = ScenarioFile::parse(&text).map_err(fail)?;
            let sc = file.build(&text).map_err(fail)?;
            let n_seeds = seeds.unwrap_or(sc.seeds);
            let report = run_preset(&sc, preset, n_seeds).map_err(fail)?;
            write_report(&report, &out).map_err(fail)?;
            println!(
                "{}: {} rows over {} seeds in {:.1}s -> {}",
                report.experiment,
                report.rows.len(),
                n_seeds,
                report.runtime_secs,
                out.display()
            );
            Ok(())
        }
        Command::Metrics { input } => {
            let rows = read_series(&input).map_err(fail)?;
            print!("{}", metrics_summary(&rows));
            Ok(())
        }
        Command::Plotdata { input } => {
            let rows = read_series(&input).map_err(fail)?;
            print!("{}", plotdata(&rows));
            Ok(())
        }
    }
}
