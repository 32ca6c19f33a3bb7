//! `trajectron` command-line tool: train, evaluate, predict, serve, synth
//! and plot.

mod config;
mod plot;
mod serve;

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;
use serde_json::json;

use trajectron::data::checkpoint::load_checkpoint;
use trajectron::data::raster::write_map_raster;
use trajectron::data::synth::{generate_synthetic, Scenario, SyntheticSpec};
use trajectron::data::text::{write_trajectory_text, TextFormat};
use trajectron::evaluate::evaluate_run;
use trajectron::model::{enumerate_gmms, predict, Model, OutputScheme};
use trajectron::scene::{all_instances, plan_from_positions, slice_instances, State};
use trajectron::training::train;

use crate::config::{load_scenes, RunConfig, SceneSource};

#[derive(Parser)]
#[command(
    name = "trajectron",
    version,
    about = "Graph-structured multi-agent trajectory forecasting"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a run configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a checkpoint on the configured evaluation scenes.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        /// Defaults to `output.checkpoint` of the configuration.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Forecast agents of one scene file as line-delimited JSON.
    Predict(PredictArgs),
    /// Answer line-delimited JSON prediction requests.
    Serve(ServeArgs),
    /// Write a synthetic scene (and its map) in the external formats.
    Synth(SynthArgs),
    /// Convert prediction or metric records to CSV and SVG.
    Plot(plot::PlotArgs),
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Trajectory text file.
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    dt: f64,
    #[arg(long, default_value = "auto", value_parser = parse_format)]
    format: TextFormat,
    #[arg(long)]
    map: Option<PathBuf>,
    /// Id of the ego agent, whose future conditions the forecasts.
    #[arg(long)]
    ego: Option<String>,
    /// Prediction timestep; every timestep when omitted.
    #[arg(long)]
    t: Option<usize>,
    /// Only forecast this agent.
    #[arg(long)]
    node: Option<String>,
    #[arg(long, default_value = "Full")]
    scheme: OutputScheme,
    #[arg(long, default_value_t = 20)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// JSON file with a replacement ego plan: `[[x, y], ...]` positions or
    /// `[[x, y, vx, vy, ax, ay], ...]` states over the horizon.
    #[arg(long)]
    ego_plan: Option<PathBuf>,
    /// Include the mode-fed mixture sequence of every latent class.
    #[arg(long)]
    gmms: bool,
    /// Defaults to standard output.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Listen on this TCP port instead of standard input.
    #[arg(long)]
    port: Option<u16>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, value_parser = parse_scenario)]
    scenario: Scenario,
    #[arg(long)]
    agents: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

fn parse_format(s: &str) -> Result<TextFormat, String> {
    match s {
        "auto" => Ok(TextFormat::Auto),
        "canonical" => Ok(TextFormat::Canonical),
        "classic" => Ok(TextFormat::Classic),
        _ => Err(format!("unknown format `{s}` (auto, canonical, classic)")),
    }
}

fn parse_scenario(s: &str) -> Result<Scenario, String> {
    s.parse().map_err(|e: trajectron::Error| e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.kind().to_string();
            let detail = e.to_string();
            let first = detail.lines().next().unwrap_or(&msg).trim_start_matches("error: ");
            emit_error("usage", first);
            return ExitCode::from(2);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = match e.downcast_ref::<trajectron::Error>() {
                Some(trajectron::Error::ConfigMismatch { .. }) => "config_mismatch",
                Some(trajectron::Error::Diverged { .. }) => "diverged",
                Some(trajectron::Error::Parse { .. }) => "parse",
                Some(_) => "library",
                None if e.downcast_ref::<io::Error>().is_some() => "io",
                None => "error",
            };
            emit_error(kind, &format!("{e:#}"));
            ExitCode::FAILURE
        }
    }
}

/// One JSON line on stderr.
fn emit_error(kind: &str, message: &str) {
    let line = json!({ "error": { "kind": kind, "message": message.replace('\n', " ") } });
    eprintln!("{line}");
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train { config } => cmd_train(&config),
        Command::Evaluate { config, checkpoint } => cmd_evaluate(&config, checkpoint.as_deref()),
        Command::Predict(args) => cmd_predict(&args),
        Command::Serve(args) => serve::run(&args.checkpoint, args.port),
        Command::Synth(args) => cmd_synth(&args),
        Command::Plot(args) => plot::run(&args),
    }
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn cmd_train(path: &Path) -> Result<()> {
    let cfg = RunConfig::load(path)?;
    let scenes = load_scenes(&cfg.data.train, "training")?;
    let opts = cfg.slice_options(&cfg.model, true);
    let mut instances = Vec::new();
    for s in &scenes {
        instances.extend(all_instances(s, &opts)?);
    }
    if instances.is_empty() {
        bail!("the training scenes yield no instance with enough history and a full ground-truth future");
    }
    create_parent(&cfg.output.checkpoint)?;
    create_parent(&cfg.output.log)?;
    let out = train(&instances, cfg.model.clone(), &cfg.train, Some(&cfg.output.checkpoint))?;

    let mut log = BufWriter::new(File::create(&cfg.output.log)?);
    if let Some(pre) = &out.pretrain {
        for (class, losses) in &pre.losses {
            for (i, nll) in losses.iter().enumerate() {
                writeln!(
                    log,
                    "{}",
                    json!({ "phase": "pretrain", "class": class, "iteration": i, "nll": nll })
                )?;
            }
        }
    }
    for rec in &out.log {
        let mut v = serde_json::to_value(rec)?;
        v["phase"] = json!("train");
        writeln!(log, "{v}")?;
    }
    log.flush()?;
    let last = out.log.last().map(|r| r.report);
    println!(
        "{}",
        json!({
            "checkpoint": cfg.output.checkpoint,
            "log": cfg.output.log,
            "instances": instances.len(),
            "iterations": out.checkpoint.iteration,
            "final": last,
        })
    );
    Ok(())
}

fn cmd_evaluate(path: &Path, checkpoint: Option<&Path>) -> Result<()> {
    let cfg = RunConfig::load(path)?;
    let ckpt_path = checkpoint.unwrap_or(&cfg.output.checkpoint);
    let ckpt = load_checkpoint(ckpt_path).with_context(|| format!("loading {}", ckpt_path.display()))?;
    // node classes and edge types are taken from the training data
    let mut expected = cfg.model.clone();
    expected.node_classes = ckpt.config.node_classes.clone();
    expected.edge_types = ckpt.config.edge_types.clone();
    let scenes = load_scenes(&cfg.data.eval, "evaluation")?;
    let report = evaluate_run(&ckpt, &scenes, &cfg.eval, Some(&expected))?;
    create_parent(&cfg.output.metrics)?;
    fs::write(&cfg.output.metrics, report.to_json()? + "\n")?;
    print!("{}", report.table());
    Ok(())
}

#[derive(Deserialize)]
#[serde(untagged)]
enum PlanFile {
    States(Vec<State>),
    Positions(Vec<[f64; 2]>),
}

fn cmd_predict(args: &PredictArgs) -> Result<()> {
    let ckpt = load_checkpoint(&args.checkpoint).with_context(|| format!("loading {}", args.checkpoint.display()))?;
    let model = Model::from_checkpoint(&ckpt)?;
    let scene = config::load_scene(&SceneSource {
        path: args.scene.clone(),
        dt: args.dt,
        format: args.format,
        map: args.map.clone(),
        ego: args.ego.clone(),
    })?;
    let plan = match &args.ego_plan {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Some(serde_json::from_str::<PlanFile>(&text).with_context(|| format!("parsing {}", p.display()))?)
        }
        None => None,
    };
    if plan.is_some() && scene.ego.is_none() {
        bail!("--ego-plan needs --ego");
    }
    let mut opts = trajectron::scene::SliceOptions::new(model.config.classes.clone());
    opts.min_history = model.config.min_history;
    if model.config.use_map {
        opts.map = Some(model.config.map.crop);
    }
    let instances = match args.t {
        Some(t) => slice_instances(&scene, t, &opts)?,
        None => all_instances(&scene, &opts)?,
    };
    let mut out: Box<dyn Write> = match &args.out {
        Some(p) => {
            create_parent(p)?;
            Box::new(BufWriter::new(File::create(p)?))
        }
        None => Box::new(BufWriter::new(io::stdout().lock())),
    };
    let mut written = 0;
    for mut inst in instances {
        if args.node.as_deref().is_some_and(|n| n != inst.node.0) || !model.nodes.contains_key(&inst.class) {
            continue;
        }
        if let Some(plan) = &plan {
            inst.ego_future = Some(match plan {
                PlanFile::States(s) => s.clone(),
                PlanFile::Positions(p) => {
                    let ego = scene.agent(scene.ego.as_ref().expect("checked")).expect("validated");
                    let now = ego
                        .position_at(inst.t)
                        .with_context(|| format!("ego is not present at t = {}", inst.t))?;
                    plan_from_positions(now, p, scene.dt)?
                }
            });
            inst.ego_class = scene.ego.as_ref().and_then(|e| scene.agent(e)).map(|a| a.class);
        }
        if model.config.use_robot && inst.ego_future.is_none() {
            continue;
        }
        let mut pred = predict(&model, &inst, args.scheme, args.samples, args.seed)?;
        if args.gmms {
            pred.gmms = Some(enumerate_gmms(&model, &inst)?);
        }
        writeln!(out, "{}", serde_json::to_string(&pred)?)?;
        written += 1;
    }
    out.flush()?;
    if written == 0 {
        bail!("no agent in the scene matched the selection");
    }
    Ok(())
}

fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let scene = generate_synthetic(
        &SyntheticSpec {
            scenario: args.scenario,
            agents: args.agents,
        },
        args.seed,
    )?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let stem = format!("{}-{}", args.scenario, args.seed);
    let traj = args.out.join(format!("{stem}.txt"));
    write_trajectory_text(&traj, &scene)?;
    let map = match &scene.map {
        Some(m) => {
            let p = args.out.join(format!("{stem}.grid"));
            write_map_raster(&p, m)?;
            Some(p)
        }
        None => None,
    };
    println!(
        "{}",
        json!({
            "path": traj,
            "dt": scene.dt,
            "format": "canonical",
            "map": map,
            "ego": scene.ego.as_ref().map(|e| e.0.clone()),
            "agents": scene.agents.len(),
        })
    );
    Ok(())
}
