use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use maglev_harness::capability::{capability_map, write_csv, MapSpec};
use maglev_harness::config::load_or_default;
use maglev_harness::scenario::{run_scenario, ScenarioScript};
use maglev_harness::{bench, server, HarnessError};

#[derive(Parser)]
#[command(name = "maglev", version, about = "Maglev haptic device twin")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario file or built-in (hover, step, sine, tour, blackout, haptic).
    Run {
        scenario: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Overrides the seed in the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Serve telemetry and accept commands over WebSocket.
    Serve {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 8765)]
        port: u16,
    },
    /// Hover feasibility and force capability over the workspace, as CSV.
    Capability {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "capability.csv")]
        out: PathBuf,
        /// Lattice spacing in x and y, m.
        #[arg(long, default_value_t = 0.01)]
        step: f64,
        /// Comma-separated heights, m.
        #[arg(long, value_delimiter = ',', default_values_t = [0.01, 0.02, 0.03, 0.04])]
        heights: Vec<f64>,
    },
    /// Build the field grids and write them to the config's cache directory.
    BuildGrids {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Monte Carlo accuracy and iteration counts of the pose estimator.
    EstimateBench {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Image noise standard deviation, m.
        #[arg(long, default_value_t = 1e-5)]
        noise: f64,
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn print_json<T: serde::Serialize>(value: &T) {
    println!(
        "{}",
        serde_json::to_string_pretty(value).expect("report serializes")
    );
}

fn run(cli: Cli) -> Result<ExitCode, HarnessError> {
    match cli.command {
        Cmd::Run {
            scenario,
            config,
            out,
            seed,
        } => {
            let mut config = load_or_default(config.as_deref())?;
            if let Some(s) = seed {
                config.seed = s;
            }
            let script = ScenarioScript::resolve(&scenario)?;
            let summary = run_scenario(&config, &script, &out, None)?;
            print_json(&summary);
            eprintln!(
                "tick compute: mean {:.1} us, p99 {:.1} us over {} ticks",
                summary.timing.mean_us, summary.timing.p99_us, summary.timing.ticks
            );
            if !summary.ok() {
                eprintln!(
                    "safe-stop {} but the scenario {} it",
                    if summary.safe_stop {
                        "occurred"
                    } else {
                        "did not occur"
                    },
                    if summary.expected_safe_stop {
                        "expected"
                    } else {
                        "did not expect"
                    }
                );
                return Ok(ExitCode::from(1));
            }
        }
        Cmd::Serve { config, port } => {
            let config = load_or_default(config.as_deref())?;
            let rt = tokio::runtime::Runtime::new()
                .map_err(|e| HarnessError::io(std::path::Path::new("<runtime>"), e))?;
            rt.block_on(server::serve(&config, port))?;
        }
        Cmd::Capability {
            config,
            out,
            step,
            heights,
        } => {
            let config = load_or_default(config.as_deref())?;
            let array = config.twin.build_array()?;
            let spec = MapSpec {
                heights,
                step,
                ..MapSpec::default()
            };
            let rows = capability_map(&array, &config.twin, &spec)?;
            let file = std::fs::File::create(&out).map_err(|e| HarnessError::io(&out, e))?;
            write_csv(&rows, std::io::BufWriter::new(file))?;
            let feasible = rows.iter().filter(|r| r.hover_feasible).count();
            eprintln!(
                "{} points, {feasible} hover-feasible, written to {}",
                rows.len(),
                out.display()
            );
        }
        Cmd::BuildGrids { config } => {
            let mut config = load_or_default(config.as_deref())?;
            let dir = config
                .twin
                .grid_cache_dir
                .get_or_insert_with(|| PathBuf::from("grid-cache"))
                .clone();
            let started = std::time::Instant::now();
            config.twin.build_array()?;
            let mut files: Vec<_> = std::fs::read_dir(&dir)
                .map_err(|e| HarnessError::io(&dir, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "grid"))
                .collect();
            files.sort();
            for f in &files {
                println!("{}", f.display());
            }
            eprintln!("grids ready in {:.2} s", started.elapsed().as_secs_f64());
        }
        Cmd::EstimateBench {
            config,
            noise,
            trials,
            seed,
        } => {
            let config = load_or_default(config.as_deref())?;
            print_json(&bench::estimate_bench(&config.twin, noise, trials, seed)?);
        }
    }
    Ok(ExitCode::SUCCESS)
}
