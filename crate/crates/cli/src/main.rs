//! Command-line front end: scenario generation, training (two-level or
//! single stage), placement evaluation, and SVG rendering.
//!
//! Verbosity is controlled by the `ABSCOVER_LOG` environment variable
//! (`error`, `warn`, `info`, `debug`).

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use abscover::agent::{
    run_stage, run_two_level, AgentConfig, Algorithm, EpsilonSchedule, LogRow, MoveRules,
    StageResult, TargetSchedule, TrainLog, TrainReport,
};
use abscover::baselines::{dqn_variant_config, kmeans_place};
use abscover::env::{ActionMode, InitialPlacement, TraceRecord};
use abscover::qnet::{NetworkSpec, QNetwork};
use abscover::scenario::{coverage_report, GenParams};
use abscover::{ChannelModel, Point2D, Scenario};

#[derive(Parser)]
#[command(name = "abscover", version, about = "Aerial base station placement optimizer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a random scenario file.
    Generate(GenerateArgs),
    /// Train a placement (or compute the K-means baseline).
    Train(TrainArgs),
    /// Evaluate a placement: coverage rate and per-GU metrics.
    Evaluate(EvaluateArgs),
    /// Render a placement as SVG.
    Render(RenderArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModelArg {
    Disk,
    Terrain,
}

impl From<ModelArg> for ChannelModel {
    fn from(m: ModelArg) -> Self {
        match m {
            ModelArg::Disk => ChannelModel::Disk,
            ModelArg::Terrain => ChannelModel::Terrain,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum AlgoArg {
    Pddqn,
    Dqn,
    Kmeans,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum StageArg {
    TwoLevel,
    Disk,
    Terrain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum NetArg {
    Default,
    Compact,
}

#[derive(Args)]
struct GenerateArgs {
    /// Output scenario path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Use the experiment defaults (3 km region, 30 buildings, 80 GUs,
    /// 10 ABSs, K=20, -93 dB gain threshold); rejects other overrides.
    #[arg(long, conflicts_with_all = ["region_side", "gus", "abs", "buildings",
        "footprint", "height_min", "height_max", "grid_k", "fc_hz", "altitude",
        "tx_power", "noise", "gamma_db", "nlos_db"])]
    paper_defaults: bool,
    #[arg(long)]
    region_side: Option<f64>,
    /// Number of ground users.
    #[arg(long)]
    gus: Option<usize>,
    /// Number of aerial base stations.
    #[arg(long)]
    abs: Option<usize>,
    #[arg(long)]
    buildings: Option<usize>,
    /// Building footprint side, meters.
    #[arg(long)]
    footprint: Option<f64>,
    #[arg(long)]
    height_min: Option<f64>,
    #[arg(long)]
    height_max: Option<f64>,
    /// Bitmap grid resolution K.
    #[arg(long)]
    grid_k: Option<usize>,
    /// Carrier frequency, Hz.
    #[arg(long)]
    fc_hz: Option<f64>,
    /// Flight altitude, meters.
    #[arg(long)]
    altitude: Option<f64>,
    /// Transmit power, watts.
    #[arg(long)]
    tx_power: Option<f64>,
    /// Noise power, watts.
    #[arg(long)]
    noise: Option<f64>,
    /// SNR coverage threshold, dB.
    #[arg(long)]
    gamma_db: Option<f64>,
    /// Extra NLoS attenuation, dB.
    #[arg(long)]
    nlos_db: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long, value_enum, default_value_t = AlgoArg::Pddqn)]
    algo: AlgoArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for placements, reports, logs, checkpoints.
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, value_enum, default_value_t = StageArg::TwoLevel)]
    stage: StageArg,
    /// Episode budget per phase.
    #[arg(long, default_value_t = 900)]
    episodes: usize,
    /// Steps per episode.
    #[arg(long, default_value_t = 100)]
    steps: usize,
    #[arg(long, default_value_t = 64)]
    batch: usize,
    /// Replay memory size.
    #[arg(long, default_value_t = 40_000)]
    capacity: usize,
    #[arg(long, default_value_t = 0.95)]
    discount: f64,
    /// Adam learning rate.
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    /// Target-network sync period (training steps).
    #[arg(long, default_value_t = 200)]
    sync: u64,
    #[arg(long, default_value_t = 0.70)]
    target_start: f64,
    #[arg(long, default_value_t = 0.05)]
    target_increment: f64,
    /// Consecutive trained episodes without success before a phase stalls.
    #[arg(long, default_value_t = 60)]
    patience: usize,
    #[arg(long, default_value_t = 1.0)]
    eps_start: f64,
    #[arg(long, default_value_t = 0.05)]
    eps_end: f64,
    /// Steps over which epsilon decays; defaults to half the phase budget.
    #[arg(long)]
    eps_decay: Option<usize>,
    /// ABS displacement per move, meters.
    #[arg(long, default_value_t = 10.0)]
    step_size: f64,
    /// Scale of the intermediate shaping reward.
    #[arg(long, default_value_t = 1.0)]
    reward_scale: f64,
    /// Joint action head (4^M actions) instead of one move per step.
    #[arg(long)]
    joint: bool,
    #[arg(long, value_enum, default_value_t = NetArg::Default)]
    net: NetArg,
    /// Also write per-step episode traces (JSON lines).
    #[arg(long)]
    trace: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    scenario: PathBuf,
    /// Placement file overriding the scenario's station positions.
    #[arg(long)]
    placement: Option<PathBuf>,
    #[arg(long, value_enum)]
    model: ModelArg,
    /// Per-GU metrics CSV path (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long)]
    placement: Option<PathBuf>,
    #[arg(long, value_enum)]
    model: ModelArg,
    /// Output SVG path.
    #[arg(long)]
    out: PathBuf,
}

/// Placement document: the scenario's `abss` field on its own.
#[derive(Serialize, Deserialize)]
struct PlacementFile {
    abss: Vec<Point2D>,
}

fn read_placement(path: &Path) -> Result<Vec<Point2D>> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading placement {}", path.display()))?;
    let file: PlacementFile = serde_json::from_str(&text)
        .with_context(|| format!("parsing placement {}", path.display()))?;
    Ok(file.abss)
}

fn write_placement(path: &Path, abss: &[Point2D]) -> Result<()> {
    let file = PlacementFile {
        abss: abss.to_vec(),
    };
    let mut text = serde_json::to_string_pretty(&file)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn read_scenario(path: &Path) -> Result<Scenario> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading scenario {}", path.display()))?;
    Scenario::from_json_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("ABSCOVER_LOG", "warn"))
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(args) => cmd_generate(args),
        Command::Train(args) => cmd_train(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Render(args) => cmd_render(args),
    };
    if let Err(err) = result {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}

fn cmd_generate(args: GenerateArgs) -> Result<()> {
    let mut params = GenParams::default();
    if !args.paper_defaults {
        if let Some(v) = args.region_side {
            params.region_side = v;
        }
        if let Some(v) = args.gus {
            params.n_gus = v;
        }
        if let Some(v) = args.abs {
            params.n_abs = v;
        }
        if let Some(v) = args.buildings {
            params.n_buildings = v;
        }
        if let Some(v) = args.footprint {
            params.footprint = v;
        }
        if let Some(v) = args.height_min {
            params.height_range.0 = v;
        }
        if let Some(v) = args.height_max {
            params.height_range.1 = v;
        }
        if let Some(v) = args.grid_k {
            params.grid_k = v;
        }
        let r = &mut params.radio;
        if let Some(v) = args.fc_hz {
            r.carrier_freq_hz = v;
        }
        if let Some(v) = args.altitude {
            r.altitude_m = v;
        }
        if let Some(v) = args.tx_power {
            r.tx_power_w = v;
        }
        if let Some(v) = args.noise {
            r.noise_power_w = v;
        }
        if let Some(v) = args.gamma_db {
            r.snr_threshold = abscover::radio::db_to_linear(v);
        }
        if let Some(v) = args.nlos_db {
            r.nlos_excess_db = v;
        }
    }
    let scenario = Scenario::generate(&params, args.seed)?;
    fs::write(&args.out, scenario.to_json_string()?)
        .with_context(|| format!("writing {}", args.out.display()))?;
    log::info!(
        "scenario: {} GUs, {} ABSs, {} buildings, K={}",
        scenario.n_gus(),
        scenario.n_abs(),
        scenario.terrain.buildings().len(),
        scenario.grid_k
    );
    println!("wrote {}", args.out.display());
    Ok(())
}

/// Streams per-step CSV rows, per-stage, plus optional traces and
/// per-phase network checkpoints.
struct FileLog {
    out_dir: PathBuf,
    stage: String,
    csv: Option<BufWriter<fs::File>>,
    trace: Option<BufWriter<fs::File>>,
    want_trace: bool,
    episodes_seen: usize,
}

impl FileLog {
    fn new(out_dir: &Path, want_trace: bool) -> Self {
        Self {
            out_dir: out_dir.to_path_buf(),
            stage: String::new(),
            csv: None,
            trace: None,
            want_trace,
            episodes_seen: 0,
        }
    }

    fn open_stage(&mut self, stage: &str) {
        self.stage = stage.to_string();
        let path = self.out_dir.join(format!("train_log_{stage}.csv"));
        let file = fs::File::create(&path).expect("create train log");
        let mut w = BufWriter::new(file);
        let _ = writeln!(w, "phase,episode,step,epsilon,loss,coverage,reward");
        self.csv = Some(w);
        if self.want_trace {
            let path = self.out_dir.join(format!("trace_{stage}.jsonl"));
            self.trace = Some(BufWriter::new(
                fs::File::create(&path).expect("create trace file"),
            ));
        }
    }
}

impl TrainLog for FileLog {
    fn record(&mut self, row: &LogRow) {
        if let Some(w) = &mut self.csv {
            let loss = row.loss.map(|l| l.to_string()).unwrap_or_default();
            let _ = writeln!(
                w,
                "{},{},{},{},{},{},{}",
                row.phase_target,
                row.episode,
                row.step,
                row.epsilon,
                loss,
                row.coverage_rate,
                row.reward
            );
        }
        if row.step == 1 {
            self.episodes_seen += 1;
            if self.episodes_seen % 50 == 0 {
                log::info!(
                    "stage {} phase {:.2}: episode {}, coverage {:.3}",
                    self.stage,
                    row.phase_target,
                    row.episode,
                    row.coverage_rate
                );
            }
        }
    }

    fn on_stage_start(&mut self, stage: &str) {
        self.open_stage(stage);
    }

    fn on_phase_complete(&mut self, target: f64, achieved: bool, network: &QNetwork) {
        let name = format!(
            "checkpoint_{}_p{:03}.bin",
            self.stage,
            (target * 100.0).round() as u32
        );
        let _ = network.save(&self.out_dir.join(name));
        log::info!(
            "stage {}: phase {:.2} {}",
            self.stage,
            target,
            if achieved { "achieved" } else { "stalled" }
        );
    }

    fn trace(&mut self, record: &TraceRecord) {
        if let Some(w) = &mut self.trace {
            let _ = w.write_all(record.to_json_line().as_bytes());
        }
    }

    fn wants_trace(&self) -> bool {
        self.want_trace
    }
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let scenario = read_scenario(&args.scenario)?;
    fs::create_dir_all(&args.out_dir)
        .with_context(|| format!("creating {}", args.out_dir.display()))?;

    if args.algo == AlgoArg::Kmeans {
        // Distance-based placement; no training involved.
        let result = kmeans_place(&scenario.gus, scenario.n_abs(), args.seed)?;
        let path = args.out_dir.join("placement_kmeans.json");
        write_placement(&path, &result.centroids)?;
        let disk = placement_rate(&scenario, &result.centroids, ChannelModel::Disk)?;
        let terrain = placement_rate(&scenario, &result.centroids, ChannelModel::Terrain)?;
        println!(
            "kmeans placement ({} iterations): disk coverage {disk:.4}, terrain coverage {terrain:.4}",
            result.iterations
        );
        println!("wrote {}", path.display());
        return Ok(());
    }

    let n_actions = abscover::env::enumerate_actions(
        scenario.n_abs(),
        if args.joint {
            ActionMode::Joint
        } else {
            ActionMode::Factored
        },
    )?;
    let network = match args.net {
        NetArg::Default => None,
        NetArg::Compact => Some(NetworkSpec::compact_for(scenario.grid_k, n_actions)),
    };
    let mut cfg = AgentConfig {
        algorithm: Algorithm::PrioritizedDdqn,
        discount: args.discount,
        batch_size: args.batch,
        replay_capacity: args.capacity,
        episodes_per_phase: args.episodes,
        steps_per_episode: args.steps,
        epsilon: EpsilonSchedule {
            start: args.eps_start,
            end: args.eps_end,
            decay_steps: args
                .eps_decay
                .unwrap_or(args.episodes * args.steps / 2),
        },
        target_sync_period: args.sync,
        adam: abscover::qnet::AdamConfig::with_learning_rate(args.lr),
        targets: TargetSchedule {
            start: args.target_start,
            increment: args.target_increment,
            patience: args.patience,
        },
        network,
        seed: args.seed,
        ..AgentConfig::default()
    };
    if args.algo == AlgoArg::Dqn {
        cfg = dqn_variant_config(cfg);
    }
    let rules = MoveRules {
        step_size_m: args.step_size,
        reward_scale: args.reward_scale,
        action_mode: if args.joint {
            ActionMode::Joint
        } else {
            ActionMode::Factored
        },
    };

    let mut log = FileLog::new(&args.out_dir, args.trace);
    match args.stage {
        StageArg::TwoLevel => {
            let result = run_two_level(&scenario, &cfg, &rules, &mut log)?;
            write_stage(&args.out_dir, "preliminary", &result.preliminary)?;
            write_stage(&args.out_dir, "advanced", &result.advanced)?;
            println!(
                "preliminary: disk coverage {:.4} (on terrain: {:.4})",
                result.preliminary.coverage, result.preliminary_on_terrain
            );
            println!("advanced: terrain coverage {:.4}", result.advanced.coverage);
        }
        StageArg::Disk => {
            log.on_stage_start("disk");
            let stage = run_stage(
                &scenario,
                ChannelModel::Disk,
                InitialPlacement::RandomUniform,
                &cfg,
                &rules,
                cfg.seed,
                &mut log,
            )?;
            write_stage(&args.out_dir, "disk", &stage)?;
            println!("disk stage: coverage {:.4}", stage.coverage);
        }
        StageArg::Terrain => {
            log.on_stage_start("terrain");
            let stage = run_stage(
                &scenario,
                ChannelModel::Terrain,
                InitialPlacement::Fixed(scenario.abss.clone()),
                &cfg,
                &rules,
                cfg.seed,
                &mut log,
            )?;
            write_stage(&args.out_dir, "terrain", &stage)?;
            println!("terrain stage: coverage {:.4}", stage.coverage);
        }
    }
    Ok(())
}

fn placement_rate(scenario: &Scenario, abss: &[Point2D], model: ChannelModel) -> Result<f64> {
    let report = coverage_report(scenario, abss, model)?;
    let covered = report.iter().filter(|g| g.covered).count();
    Ok(covered as f64 / scenario.n_gus() as f64)
}

fn write_stage(out_dir: &Path, name: &str, stage: &StageResult) -> Result<()> {
    write_placement(
        &out_dir.join(format!("placement_{name}.json")),
        &stage.placement,
    )?;
    write_report(&out_dir.join(format!("report_{name}.csv")), &stage.report)?;
    Ok(())
}

fn write_report(path: &Path, report: &TrainReport) -> Result<()> {
    fs::write(path, report.to_csv()).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    let scenario = read_scenario(&args.scenario)?;
    let placement = match &args.placement {
        Some(path) => read_placement(path)?,
        None => scenario.abss.clone(),
    };
    let model: ChannelModel = args.model.into();
    let report = coverage_report(&scenario, &placement, model)?;
    let covered = report.iter().filter(|g| g.covered).count();
    let rate = covered as f64 / scenario.n_gus() as f64;

    let mut csv = String::from("gu,x,y,covered,best_gain_db\n");
    for (n, (gu, row)) in scenario.gus.iter().zip(&report).enumerate() {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            n,
            gu.x,
            gu.y,
            row.covered as u8,
            abscover::radio::linear_to_db(row.best_gain)
        ));
    }
    match &args.out {
        Some(path) => {
            fs::write(path, &csv).with_context(|| format!("writing {}", path.display()))?
        }
        None => print!("{csv}"),
    }
    println!(
        "coverage_rate {rate} ({covered}/{} covered)",
        scenario.n_gus()
    );
    Ok(())
}

fn cmd_render(args: RenderArgs) -> Result<()> {
    let scenario = read_scenario(&args.scenario)?;
    let placement = match &args.placement {
        Some(path) => Some(read_placement(path)?),
        None => None,
    };
    if let Some(p) = &placement {
        if p.is_empty() {
            bail!("placement file has no stations");
        }
    }
    let svg = abscover::render::render_svg(&scenario, placement.as_deref(), args.model.into())?;
    fs::write(&args.out, svg).with_context(|| format!("writing {}", args.out.display()))?;
    println!("wrote {}", args.out.display());
    Ok(())
}
