//! Command-line front end: training, radio-map export, benchmarking, and the
//! network-awareness comparison.

use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use netmapf::bench::{
    compare_network_awareness, coverage_hole_factory, run_benchmark, write_report_csv,
    write_report_json,
};
use netmapf::gridworld::MapKind;
use netmapf::io::{load_config, parse_map, parse_scen, RunConfig};
use netmapf::neural::load_checkpoint;
use netmapf::orchestrator::{run_training, StageConfig, TrainOptions};
use netmapf::radio::build_radio_map;

#[derive(Parser)]
#[command(name = "netmapf", about = "Network-aware multi-agent path finding trainer and benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run curriculum training.
    Train {
        /// TOML run configuration; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Start at this curriculum stage index.
        #[arg(long)]
        stage: Option<usize>,
        /// Override the number of actor workers.
        #[arg(long)]
        actors: Option<usize>,
        /// Override the training seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Resume from a checkpoint file.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Final checkpoint path (default: <checkpoint_dir>/final.ckpt).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Per-episode stats CSV (appended).
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Compute a radio map for a grid map and dump it as CSV.
    RadioMap {
        /// MovingAI .map file; omitted = bundled warehouse map.
        #[arg(long)]
        map: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output CSV path (x, y, sinr_db, sinr_norm, serving_sector, blackout).
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a trained policy over MovingAI scenarios.
    Bench {
        #[arg(long)]
        map: PathBuf,
        #[arg(long)]
        scen: PathBuf,
        /// Agent counts, e.g. --agents 2 --agents 4.
        #[arg(long, required = true)]
        agents: Vec<usize>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 50)]
        runs: usize,
        #[arg(long, default_value_t = 1000)]
        max_steps: u32,
        #[arg(long)]
        seed: Option<u64>,
        /// Output prefix; writes <out>.csv and <out>.json.
        #[arg(long)]
        out: PathBuf,
    },
    /// Paired comparison of a network-aware and a network-blind policy on
    /// the synthetic coverage-hole map.
    Compare {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        aware: PathBuf,
        #[arg(long)]
        unaware: PathBuf,
        #[arg(long, default_value_t = 200)]
        episodes: usize,
        #[arg(long, default_value_t = 2)]
        agents: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// JSON report path.
        #[arg(long)]
        out: PathBuf,
    },
}

fn read_config(path: &Option<PathBuf>) -> Result<RunConfig> {
    Ok(match path {
        Some(p) => load_config(p).with_context(|| format!("loading config {}", p.display()))?,
        None => RunConfig::default(),
    })
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Train {
            config,
            stage,
            actors,
            seed,
            resume,
            out,
            metrics,
        } => {
            let mut cfg = read_config(&config)?;
            if let Some(a) = actors {
                cfg.train.n_actors = a;
            }
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            let opts = TrainOptions {
                metrics_path: metrics,
                checkpoint_path: out,
                resume_from: resume,
                stage_override: stage,
                world_factory: None,
            };
            let summary = run_training(&cfg, &opts)?;
            println!(
                "training finished: {} episodes, {} env steps, {} learn steps, stage {}{}",
                summary.episodes,
                summary.env_steps,
                summary.learn_steps,
                summary.final_stage,
                if summary.completed { " (curriculum complete)" } else { "" }
            );
            if let Some(m) = summary.last_eval {
                println!(
                    "last eval: success {:.3}, makespan {:.1}, reward {:.2}",
                    m.success_rate, m.mean_makespan, m.mean_reward
                );
            }
            if let Some(p) = summary.checkpoint_path {
                println!("checkpoint: {}", p.display());
            }
        }
        Command::RadioMap { map, config, seed, out } => {
            let cfg = read_config(&config)?;
            let grid = match map {
                Some(p) => parse_map(&std::fs::read_to_string(&p)?)
                    .with_context(|| format!("parsing {}", p.display()))?,
                None => netmapf::gridworld::generate_map(MapKind::Warehouse, 161, 63, 0, 0.0)?,
            };
            let radio = build_radio_map(&grid, &cfg.radio, seed.unwrap_or(cfg.train.seed));
            let mut w = csv::Writer::from_path(&out)?;
            w.write_record(["x", "y", "sinr_db", "sinr_norm", "serving_sector", "blackout"])?;
            for (x, y, db, norm, sector, blackout) in radio.csv_rows() {
                w.write_record([
                    x.to_string(),
                    y.to_string(),
                    format!("{db:.4}"),
                    format!("{norm:.6}"),
                    sector.to_string(),
                    blackout.to_string(),
                ])?;
            }
            w.flush()?;
            println!("radio map written to {}", out.display());
        }
        Command::Bench {
            map,
            scen,
            agents,
            config,
            checkpoint,
            runs,
            max_steps,
            seed,
            out,
        } => {
            let cfg = read_config(&config)?;
            let grid = Arc::new(parse_map(&std::fs::read_to_string(&map)?)?);
            let scenarios = parse_scen(&std::fs::read_to_string(&scen)?)?;
            let ck = load_checkpoint(&checkpoint)?;
            let radio = Arc::new(build_radio_map(&grid, &cfg.radio, seed.unwrap_or(cfg.train.seed)));
            let report = run_benchmark(
                &cfg, grid, radio, &scenarios, &agents, &ck.params, runs, max_steps,
            )?;
            write_report_csv(&report, &out.with_extension("csv"))?;
            write_report_json(&report, &out.with_extension("json"))?;
            for a in &report.aggregates {
                println!(
                    "{} agents: success {:.3}, makespan {:.1} ± {:.1}, SINR {:.1} dB, blackouts {:.1}",
                    a.n_agents, a.success_rate, a.mean_makespan, a.ci95_makespan, a.mean_sinr_db,
                    a.mean_blackout_steps
                );
            }
        }
        Command::Compare {
            config,
            aware,
            unaware,
            episodes,
            agents,
            seed,
            out,
        } => {
            let cfg = read_config(&config)?;
            let aware_ck = load_checkpoint(&aware)?;
            let unaware_ck = load_checkpoint(&unaware)?;
            if agents == 0 || episodes == 0 {
                bail!("--agents and --episodes must be positive");
            }
            let stage = StageConfig {
                name: "coverage-hole-24x24".into(),
                width: 24,
                height: 24,
                n_agents: agents,
                max_steps: 200,
                ..StageConfig::default()
            };
            let factory = coverage_hole_factory(-20.0, 30.0);
            let report = compare_network_awareness(
                &cfg,
                &stage,
                &factory,
                &aware_ck.params,
                &unaware_ck.params,
                false,
                episodes,
                seed,
            )?;
            std::fs::write(&out, serde_json::to_string_pretty(&report)?)?;
            println!(
                "aware:   success {:.3}, makespan {:.1}, SINR {:.1} dB, blackouts {:.1}",
                report.aware.success_rate,
                report.aware.mean_makespan,
                report.aware.mean_sinr_db,
                report.aware.mean_blackout_steps
            );
            println!(
                "unaware: success {:.3}, makespan {:.1}, SINR {:.1} dB, blackouts {:.1}",
                report.unaware.success_rate,
                report.unaware.mean_makespan,
                report.unaware.mean_sinr_db,
                report.unaware.mean_blackout_steps
            );
            println!(
                "delta: makespan {:+.1}, SINR {:+.2} dB, blackouts {:+.1}",
                report.delta_makespan, report.delta_mean_sinr_db, report.delta_blackout_steps
            );
        }
    }
    Ok(())
}
