//! Command-line entry point: argument parsing, config handling and
//! dispatch into the library. Exit codes: 0 success, 1 usage error,
//! 2 runtime error (printed as `error[<module>]: ...`).

use std::ffi::OsString;
use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use crate::config::{self, TrainConfig};
use crate::error::{Error, Result};
use crate::intention;
use crate::metrics::{score_csv_row, score_rollout, ScoreParams, SCORE_CSV_HEADER};
use crate::model::TrainedModel;
use crate::parallel;
use crate::scene;
use crate::sim::{
    rollout_closed_loop, IdmPlanner, LogReplayPlanner, ModelPlanner, Planner, Rollout, SimConfig,
    SimMode,
};
use crate::synthetic::{gen_synthetic, ScenarioKind};
use crate::training;

#[derive(Parser)]
#[command(
    name = "int2plan",
    about = "Intention-based integrated prediction and planning with a closed-loop simulation harness",
    version,
    disable_help_subcommand = true
)]
struct Cli {
    /// JSON config file (profile + field overrides)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed for all randomness
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker thread cap for data-parallel sections
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model on a directory of scenario files
    Train(TrainArgs),
    /// Evaluate a checkpoint: plan ADE/FDE, prediction minADE6/minFDE6
    Eval(EvalArgs),
    /// Run one scenario through the closed-loop (or open-loop) simulator
    Simulate(SimulateArgs),
    /// Print route-sampled ego intention points for a scenario as CSV
    SampleIntentions(SampleIntentionsArgs),
    /// Cluster trajectory endpoints into intention anchors and print CSV
    ClusterIntentions(ClusterIntentionsArgs),
    /// Generate synthetic scenario files
    GenSynthetic(GenSyntheticArgs),
    /// Score rollout files and export per-scenario score cards as CSV
    MetricsExport(MetricsExportArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Optional validation scenario directory
    #[arg(long)]
    val: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    csv: PathBuf,
    /// Read outputs of this decoder iteration instead of the final one
    #[arg(long)]
    iteration: Option<usize>,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long, value_parser = ["open", "nonreactive", "reactive"])]
    mode: String,
    #[arg(long, value_parser = ["model", "idm", "logreplay"])]
    planner: String,
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_parser = ["on", "off"], default_value = "off")]
    postprocess: String,
    #[arg(long, default_value_t = 15.0)]
    horizon: f64,
    #[arg(long, default_value_t = 1.0)]
    replan_period: f64,
}

#[derive(Args)]
struct SampleIntentionsArgs {
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long, default_value_t = 4.0)]
    dr: f64,
    #[arg(long, default_value_t = 64)]
    nq: usize,
}

#[derive(Args)]
struct ClusterIntentionsArgs {
    /// CSV file of endpoints, one `x,y` pair per line (header allowed)
    #[arg(long)]
    endpoints: PathBuf,
    #[arg(long, default_value_t = 64)]
    nq: usize,
}

#[derive(Args)]
struct GenSyntheticArgs {
    #[arg(long, value_parser = ["straight", "stop-behind-lead", "lane-change", "unprotected-left"])]
    kind: String,
    #[arg(long, default_value_t = 1)]
    count: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 15)]
    th: usize,
    #[arg(long, default_value_t = 50)]
    tf: usize,
}

#[derive(Args)]
struct MetricsExportArgs {
    /// Rollout JSON files produced by `simulate`
    #[arg(long, required = true, num_args = 1..)]
    rollout: Vec<PathBuf>,
    /// Directory holding the source scenario files
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    csv: PathBuf,
}

/// Parses and runs a full command line (element 0 is the program name).
pub fn run(argv: Vec<OsString>) -> i32 {
    let _ = env_logger::Builder::from_env(
        env_logger::Env::new().filter_or("INT2PLAN_LOG", "warn"),
    )
    .try_init();
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    parallel::configure_jobs(cli.jobs);
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error[{}]: {}", e.module, e);
            2
        }
    }
}

fn load_train_config(cli_config: &Option<PathBuf>, cli_seed: Option<u64>) -> Result<TrainConfig> {
    let mut cfg = match cli_config {
        Some(path) => config::load_config(path)?,
        None => config::profile_private(),
    };
    if let Some(seed) = cli_seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Train(args) => {
            let cfg = load_train_config(&cli.config, cli.seed)?;
            let scenarios = scene::load_scenario_dir(&args.data)?;
            let val = match &args.val {
                Some(dir) => Some(scene::load_scenario_dir(dir)?),
                None => None,
            };
            let (_, result) = training::train(&scenarios, val.as_deref(), &cfg, &args.out)?;
            println!(
                "trained {} epochs, final loss {:.6}, checkpoint {}",
                cfg.epochs,
                result.per_epoch_loss.last().copied().unwrap_or(f64::NAN),
                args.out.display()
            );
            Ok(())
        }
        Cmd::Eval(args) => {
            let model = TrainedModel::load(&args.ckpt)?;
            let scenarios = scene::load_scenario_dir(&args.data)?;
            let (rows, aggregate) = training::evaluate(&model, &scenarios, args.iteration)?;
            training::write_eval_csv(&args.csv, &rows, &aggregate)?;
            // record the evaluated configuration next to the metrics
            let meta = serde_json::json!({
                "config": model.cfg,
                "iteration": args.iteration,
                "scenarios": scenarios.len(),
            });
            let meta_path = args.csv.with_extension("meta.json");
            std::fs::write(&meta_path, serde_json::to_vec_pretty(&meta).unwrap())
                .map_err(|e| Error::io("cli_io", &meta_path, e))?;
            println!("plan_ade {} plan_fde {}", aggregate.plan_ade, aggregate.plan_fde);
            Ok(())
        }
        Cmd::Simulate(args) => {
            let scenario = scene::load_scenario_file(&args.scenario)?;
            let mode = SimMode::parse(&args.mode).expect("clap-validated");
            let postprocess = args.postprocess == "on";
            let cfg = SimConfig {
                horizon_s: args.horizon,
                replan_period_s: args.replan_period,
                ..SimConfig::default()
            };
            let model;
            let mut planner: Box<dyn Planner> = match args.planner.as_str() {
                "logreplay" => Box::new(LogReplayPlanner),
                "idm" => Box::new(IdmPlanner::new(scenario.t_f().max(50))),
                "model" => {
                    let ckpt = args.ckpt.as_ref().ok_or_else(|| {
                        Error::simulator("planner 'model' requires --ckpt".to_string())
                    })?;
                    model = TrainedModel::load(ckpt)
                        .map_err(|e| Error::simulator(format!("checkpoint: {e}")))?;
                    Box::new(ModelPlanner::new(&model, postprocess))
                }
                _ => unreachable!("clap-validated"),
            };
            let rollout = rollout_closed_loop(&scenario, planner.as_mut(), mode, &cfg)?;
            rollout.save(&args.out)?;
            println!(
                "rollout {} steps, {} replans{} -> {}",
                rollout.ego.len() - 1,
                rollout.replans.len(),
                if rollout.partial { " (partial)" } else { "" },
                args.out.display()
            );
            Ok(())
        }
        Cmd::SampleIntentions(args) => {
            let scenario = scene::load_scenario_file(&args.scenario)?;
            let row = intention::sample_route_intentions(&scenario.routes, args.dr, args.nq)?;
            println!("index,x,y,source,valid");
            for (i, p) in row.iter().enumerate() {
                println!("{i},{},{},{:?},{}", p.x, p.y, p.source, p.valid as u8);
            }
            Ok(())
        }
        Cmd::ClusterIntentions(args) => {
            let text = std::fs::read_to_string(&args.endpoints)
                .map_err(|e| Error::io("cli_io", &args.endpoints, e))?;
            let mut endpoints = Vec::new();
            for (lineno, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() {
                    continue;
                }
                let parts: Vec<&str> = line.split(',').map(str::trim).collect();
                if parts.len() != 2 {
                    return Err(Error::cli(format!(
                        "{}:{}: expected `x,y`",
                        args.endpoints.display(),
                        lineno + 1
                    )));
                }
                match (parts[0].parse::<f64>(), parts[1].parse::<f64>()) {
                    (Ok(x), Ok(y)) => endpoints.push([x, y]),
                    _ if lineno == 0 => continue, // header line
                    _ => {
                        return Err(Error::cli(format!(
                            "{}:{}: not numeric",
                            args.endpoints.display(),
                            lineno + 1
                        )))
                    }
                }
            }
            if endpoints.is_empty() {
                return Err(Error::cli("no endpoints in input".to_string()));
            }
            let seed = cli.seed.unwrap_or(7);
            let centers = intention::cluster_intentions(&endpoints, args.nq, seed);
            println!("index,x,y,valid");
            for (i, c) in centers.iter().enumerate() {
                println!("{i},{},{},{}", c.x, c.y, c.valid as u8);
            }
            Ok(())
        }
        Cmd::GenSynthetic(args) => {
            let kind = ScenarioKind::parse(&args.kind).expect("clap-validated");
            std::fs::create_dir_all(&args.out).map_err(|e| Error::io("cli_io", &args.out, e))?;
            let seed = cli.seed.unwrap_or(7);
            for i in 0..args.count {
                let scenario = gen_synthetic(kind, seed.wrapping_add(i as u64), args.th, args.tf);
                let path = args.out.join(format!("{}_{:03}.json", kind.name(), i));
                std::fs::write(&path, scene::save_scenario(&scenario))
                    .map_err(|e| Error::io("cli_io", &path, e))?;
            }
            println!("wrote {} {} scenario(s) to {}", args.count, kind.name(), args.out.display());
            Ok(())
        }
        Cmd::MetricsExport(args) => {
            let scenarios = scene::load_scenario_dir(&args.data)?;
            let params = ScoreParams::default();
            let mut csv = String::from(SCORE_CSV_HEADER);
            csv.push('\n');
            let mut cards = Vec::new();
            for path in &args.rollout {
                let rollout = Rollout::load(path)?;
                let scenario = scenarios
                    .iter()
                    .find(|s| s.id == rollout.scenario_id)
                    .ok_or_else(|| {
                        Error::metrics(format!(
                            "no scenario with id {:?} under {}",
                            rollout.scenario_id,
                            args.data.display()
                        ))
                    })?;
                let card = score_rollout(&rollout, scenario, &params)?;
                let mode = format!("{:?}", rollout.mode);
                csv.push_str(&score_csv_row(&rollout.scenario_id, &mode, &card));
                csv.push('\n');
                cards.push(card);
            }
            let n = cards.len() as f64;
            let mean =
                |f: fn(&crate::metrics::ScoreCard) -> f64| cards.iter().map(f).sum::<f64>() / n;
            csv.push_str(&format!(
                "mean,-,{},{},{},{},{},{}\n",
                mean(|c| c.collision as u8 as f64),
                mean(|c| c.drivable_violation as u8 as f64),
                mean(|c| c.progress_ratio),
                mean(|c| c.comfort),
                mean(|c| c.speed_compliance),
                mean(|c| c.composite),
            ));
            std::fs::write(&args.csv, csv).map_err(|e| Error::io("cli_io", &args.csv, e))?;
            println!("scored {} rollout(s) -> {}", cards.len(), args.csv.display());
            Ok(())
        }
    }
}
