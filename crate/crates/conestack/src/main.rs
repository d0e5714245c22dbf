//! Command-line front end: track generation, simulation, estimator replay,
//! evaluation, and raw stream export.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error. `CONESTACK_LOG=quiet`
//! silences progress output on stderr.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use conestack::config::ScenarioConfig;
use conestack::eval::{evaluate, report_to_csv, stream_to_csv};
use conestack::geom::Rng;
use conestack::log::{read_jsonl, write_jsonl};
use conestack::sim::{replay_estimators, run_simulation};
use conestack::track::{generate_track, TrackSpec};

#[derive(Parser)]
#[command(
    name = "conestack",
    version,
    about = "Synthetic cone-track perception and state-estimation stack"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a ground-truth track as JSON.
    GenTrack {
        /// Track seed; defaults to the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Scenario config supplying the track parameters.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output JSON path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the closed-loop scenario and write the JSONL log.
    Simulate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "out-log")]
        out_log: PathBuf,
        /// Also write the ground-truth track next to the log.
        #[arg(long = "out-track")]
        out_track: Option<PathBuf>,
    },
    /// Replay the estimators over a recorded log.
    Estimate {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "out-log")]
        out_log: PathBuf,
    },
    /// Evaluate a log against a ground-truth track; writes a CSV report.
    Eval {
        #[arg(long)]
        log: PathBuf,
        /// Ground-truth track JSON (from gen-track or simulate --out-track).
        #[arg(long)]
        truth: PathBuf,
        /// Scenario config supplying the injected failure script.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "out-csv")]
        out_csv: PathBuf,
    },
    /// Export one stream of a log as CSV.
    Export {
        #[arg(long)]
        log: PathBuf,
        /// Stream name, e.g. TRUTH, WHEELS, VEL_EST, SLAM_POSE, MAP.
        #[arg(long)]
        stream: String,
        #[arg(long = "out-csv")]
        out_csv: PathBuf,
    },
}

fn chatty() -> bool {
    !matches!(
        std::env::var("CONESTACK_LOG").as_deref(),
        Ok("quiet") | Ok("off")
    )
}

fn load_config(path: &Option<PathBuf>) -> conestack::Result<ScenarioConfig> {
    match path {
        Some(p) => ScenarioConfig::load(p),
        None => Ok(ScenarioConfig::default()),
    }
}

fn execute(command: Command) -> conestack::Result<()> {
    match command {
        Command::GenTrack { seed, config, out } => {
            let mut cfg = load_config(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            // Stream 1 of the scenario seed: the same track the simulator
            // builds for this config.
            let mut rng = Rng::derive(cfg.seed, 1);
            let track = generate_track(&mut rng, &cfg.track)?;
            track.save_json(&out)?;
            if chatty() {
                eprintln!(
                    "track seed {}: {} cones, {:.1} m lap",
                    cfg.seed,
                    track.all_cones().count(),
                    track.total_length()
                );
            }
        }
        Command::Simulate {
            config,
            out_log,
            out_track,
        } => {
            let cfg = load_config(&config)?;
            let out = run_simulation(&cfg)?;
            write_jsonl(&out_log, &out.events)?;
            if let Some(p) = out_track {
                out.track.save_json(&p)?;
            }
            if chatty() {
                eprintln!(
                    "simulated {:.1} s, {} events; estimator wall {:.3} s, real_time_factor={:.1}",
                    out.stats.sim_duration_s,
                    out.events.len(),
                    out.stats.estimator_wall_s,
                    out.stats.real_time_factor
                );
            }
        }
        Command::Estimate {
            log,
            config,
            out_log,
        } => {
            let cfg = load_config(&config)?;
            let events = read_jsonl(&log)?;
            let (out, stats) = replay_estimators(&events, &cfg)?;
            write_jsonl(&out_log, &out)?;
            if chatty() {
                eprintln!(
                    "replayed {} events; estimator wall {:.3} s, real_time_factor={:.1}",
                    out.len(),
                    stats.estimator_wall_s,
                    stats.real_time_factor
                );
            }
        }
        Command::Eval {
            log,
            truth,
            config,
            out_csv,
        } => {
            let events = read_jsonl(&log)?;
            let track = TrackSpec::load_json(&truth)?;
            let script = match &config {
                Some(_) => load_config(&config)?.failures,
                None => Default::default(),
            };
            let report = evaluate(&events, &track, &script, None)?;
            std::fs::write(&out_csv, report_to_csv(&report))?;
            if chatty() {
                eprintln!(
                    "map: {}/{} matched, rmse {:.3} m, color {:.3}; ate {:.3} m; vx rmse {:.3}",
                    report.map.matched,
                    report.map.matched + report.map.missed,
                    report.map.position_rmse,
                    report.map.color_accuracy,
                    report.trajectory.ate_rmse,
                    report.velocity.vx_rmse
                );
            }
        }
        Command::Export {
            log,
            stream,
            out_csv,
        } => {
            let events = read_jsonl(&log)?;
            let csv = stream_to_csv(&events, &stream)?;
            std::fs::write(&out_csv, csv)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
