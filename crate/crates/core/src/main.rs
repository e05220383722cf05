//! `hintnet` command line: synth, ingest, partition, train, predict,
//! evaluate, ablate, report.

use std::path::PathBuf;
use std::process::ExitCode;

use chrono::NaiveDate;
use clap::{Parser, Subcommand, ValueEnum};

use hintnet::config::Config;
use hintnet::pipeline;
use hintnet::synth;
use hintnet::HintError;

#[derive(Parser)]
#[command(name = "hintnet", version, about = "Risk-partitioned accident forecasting on a grid")]
struct Cli {
    /// Experiment config (flat key = value file); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "UPPER")]
enum LevelFormat {
    Csv,
    Geojson,
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "lower")]
enum OnOff {
    On,
    Off,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic world into <out>/data.
    Synth,
    /// Grid the input CSVs and build feature tensors.
    Ingest,
    /// Compute the level map.
    Partition {
        #[arg(long, value_enum, default_value = "CSV")]
        levels: LevelFormat,
    },
    /// Train one model per level.
    Train {
        #[arg(long, value_enum)]
        transfer: Option<OnOff>,
    },
    /// Predict counts for the test days or for the given dates.
    Predict {
        /// ISO dates; defaults to the test split.
        #[arg(long, value_delimiter = ',')]
        dates: Vec<NaiveDate>,
    },
    /// Score the pool on the test split and write metrics.json.
    Evaluate,
    /// Train with and without transfer over several seeds.
    Ablate,
    /// Print the metrics summary.
    Report,
}

fn run(cli: Cli) -> hintnet::Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(out) = &cli.out {
        cfg = cfg.with_override("out", &out.display().to_string())?;
    }
    if let Some(seed) = cli.seed {
        cfg = cfg.with_override("seed", &seed.to_string())?;
    }
    if let Command::Train { transfer: Some(t) } = &cli.command {
        let v = match t {
            OnOff::On => "on",
            OnOff::Off => "off",
        };
        cfg = cfg.with_override("train.transfer", v)?;
    }
    match cli.command {
        Command::Synth => {
            let world = synth::generate(&cfg.synth)?;
            let dir = cfg.accidents.parent().map(PathBuf::from).unwrap_or_else(|| cfg.out.join("data"));
            world.write(&dir)?;
            println!("wrote {} accidents, {} road segments, {} POIs, {} station readings to {}",
                world.events.len(), world.roads.len(), world.poi.len(), world.stations.len(), dir.display());
        }
        Command::Ingest => {
            let ing = pipeline::run_ingest(&cfg)?;
            println!(
                "ingested {} accidents on {} road cells; {} spatial, {} temporal, {} spatio-temporal channels",
                ing.counts.total(),
                ing.mask.count(),
                ing.features.n_spatial(),
                ing.features.n_temporal(),
                ing.features.n_st()
            );
        }
        Command::Partition { levels } => {
            let (_, record) = pipeline::run_partition(&cfg, matches!(levels, LevelFormat::Geojson))?;
            println!("level map {}", record.levelmap_hash);
            for (level, cells) in &record.road_cells_per_level {
                println!("level {level}: {cells} road cells");
            }
        }
        Command::Train { .. } => {
            let pool = pipeline::run_train(&cfg)?;
            for level in &pool.order {
                let r = &pool.reports[level];
                println!("level {level}: {} epochs, validation mse {:.5}", r.epochs_run, r.best_val_loss);
            }
        }
        Command::Predict { dates } => {
            let days = if dates.is_empty() {
                None
            } else {
                Some(
                    dates
                        .iter()
                        .map(|d| {
                            cfg.grid
                                .day_index(*d)
                                .ok_or_else(|| HintError::InvalidInput(format!("date {d} is outside the study period")))
                        })
                        .collect::<hintnet::Result<Vec<_>>>()?,
                )
            };
            let (days, _) = pipeline::run_predict(&cfg, days)?;
            println!("wrote predictions for {} days to {}", days.len(), cfg.out.join(pipeline::PREDICTIONS_FILE).display());
        }
        Command::Evaluate => {
            let m = pipeline::run_evaluate(&cfg)?;
            println!("masked test mse {:.5} (historical average {:.5})", m.overall_mse, m.ha_overall_mse);
        }
        Command::Ablate => {
            let a = pipeline::run_ablate(&cfg)?;
            println!(
                "median epochs-to-target: transfer {:.1}, scratch {:.1}; test mse variance: transfer {:.3e}, scratch {:.3e}",
                a.with_transfer.epochs_summary.median,
                a.without_transfer.epochs_summary.median,
                a.with_transfer.test_mse_summary.variance,
                a.without_transfer.test_mse_summary.variance
            );
        }
        Command::Report => print!("{}", pipeline::run_report(&cfg)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let hint = match &e {
                HintError::Stale(_) => " (rerun the earlier stages with the current config)",
                _ => "",
            };
            eprintln!("error: {e}{hint}");
            ExitCode::FAILURE
        }
    }
}
