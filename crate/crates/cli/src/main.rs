//! `mimu`: simulate gaits, run the filters on sensor logs and score the
//! resulting trajectories.
//!
//! Exit codes: 0 on success, 1 on runtime errors, 2 on invalid input.

mod compare;

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use mimu_core::estimator::{LinkState, NoiseConfig};
use mimu_core::io::{self, SensorLogReader, SensorLogWriter, TrajectoryWriter, TruthLog};
use mimu_core::metrics::evaluate;
use mimu_core::robot::{default_biped, KinematicChain, RobotDescription};
use mimu_core::run::{FilterKind, InitPolicy, RunConfig, Runner};
use mimu_core::sim::{generate_gait, synthesize_sensors, GaitSpec};
use mimu_core::Error;

#[derive(Parser)]
#[command(name = "mimu", version, about = "Multi-IMU state estimation for legged robots")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a gait and write a sensor log and its ground truth.
    Simulate {
        /// Gait spec (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Output directory; receives sensors.csv and truth.csv.
        #[arg(long)]
        out: PathBuf,
        /// Sensor noise seed, overriding the spec.
        #[arg(long)]
        seed: Option<u64>,
        /// Robot description (JSON); the built-in biped by default.
        #[arg(long)]
        robot: Option<PathBuf>,
        /// Sensor noise (JSON); defaults when absent.
        #[arg(long)]
        noise: Option<PathBuf>,
        /// Leave out the tilt columns.
        #[arg(long)]
        no_tilts: bool,
    },
    /// Run a filter over a sensor log and write its trajectory.
    Estimate {
        /// Run config (JSON); defaults with standing initialization when
        /// absent.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        log: PathBuf,
        /// Ground truth, required by truth initialization.
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Overrides the filter of the config.
        #[arg(long)]
        filter: Option<FilterKind>,
        /// Trajectory CSV; the config's output path when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score an estimated trajectory against ground truth.
    Evaluate {
        /// Trajectory CSV written by `estimate`.
        #[arg(long)]
        estimate: PathBuf,
        /// Ground truth CSV; its contact columns give the step count.
        #[arg(long)]
        truth: PathBuf,
        /// IMU to score; the first one in the trajectory by default.
        #[arg(long)]
        imu: Option<String>,
        /// Metrics JSON; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Simulate one gait and compare filters on the same sensor log.
    Compare {
        /// Run configs, one per filter.
        #[arg(long = "config")]
        configs: Vec<PathBuf>,
        /// Filters run with default settings, in addition to the configs.
        #[arg(long = "filter")]
        filters: Vec<FilterKind>,
        /// Gait spec (JSON); a 40 s straight walk by default.
        #[arg(long)]
        gait: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Sensor noise of the simulated log (JSON).
        #[arg(long)]
        noise: Option<PathBuf>,
        /// Output directory; receives table.txt, table.json and errors.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Marks errors caused by the user's input.
#[derive(Debug)]
struct BadInput(String);

impl std::fmt::Display for BadInput {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

fn is_input_error(e: &Error) -> bool {
    matches!(
        e,
        Error::Schema { .. }
            | Error::SchemaVersion { .. }
            | Error::Config(_)
            | Error::InfeasibleGait(_)
            | Error::Json(_)
            | Error::Csv(_)
            | Error::InvalidChain(_)
            | Error::UnknownLink(_)
            | Error::JointStateMismatch(_)
            | Error::NonMonotoneTime { .. }
            | Error::NonFinite(_)
    )
}

fn exit_code(e: &anyhow::Error) -> u8 {
    let input = e.downcast_ref::<BadInput>().is_some()
        || e.chain().any(|c| c.downcast_ref::<Error>().is_some_and(is_input_error));
    if input {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate { config, out, seed, robot, noise, no_tilts } => {
            simulate(&config, &out, seed, robot.as_deref(), noise.as_deref(), !no_tilts)
        }
        Command::Estimate { config, log, truth, filter, out } => {
            estimate(config.as_deref(), &log, truth.as_deref(), filter, out)
        }
        Command::Evaluate { estimate, truth, imu, out } => evaluate_cmd(&estimate, &truth, imu.as_deref(), out.as_deref()),
        Command::Compare { configs, filters, gait, seed, noise, out } => {
            compare::run(&configs, &filters, gait.as_deref(), seed, noise.as_deref(), out.as_deref())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

pub(crate) fn open_input(path: &Path) -> anyhow::Result<BufReader<File>> {
    let file = File::open(path).with_context(|| BadInput(format!("cannot open {}", path.display())))?;
    Ok(BufReader::new(file))
}

pub(crate) fn read_input(path: &Path) -> anyhow::Result<String> {
    std::fs::read_to_string(path).with_context(|| BadInput(format!("cannot read {}", path.display())))
}

pub(crate) fn create_output(path: &Path) -> anyhow::Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }
    let file = File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
    Ok(BufWriter::new(file))
}

pub(crate) fn load_gait(path: Option<&Path>) -> anyhow::Result<GaitSpec> {
    let spec = match path {
        Some(p) => serde_json::from_str(&read_input(p)?)
            .map_err(Error::from)
            .with_context(|| format!("gait spec {}", p.display()))?,
        None => GaitSpec { deformation_amplitude: 0.035, ..GaitSpec::straight(0.15, 40.0) },
    };
    Ok(spec)
}

pub(crate) fn load_noise(path: Option<&Path>) -> anyhow::Result<NoiseConfig> {
    match path {
        Some(p) => Ok(serde_json::from_str(&read_input(p)?)
            .map_err(Error::from)
            .with_context(|| format!("noise config {}", p.display()))?),
        None => Ok(NoiseConfig::default()),
    }
}

fn load_robot(path: Option<&Path>) -> anyhow::Result<KinematicChain> {
    match path {
        None => Ok(default_biped()),
        Some(p) => Ok(RobotDescription::from_json(&read_input(p)?)
            .and_then(|d| d.build())
            .with_context(|| format!("robot description {}", p.display()))?),
    }
}

fn simulate(
    spec_path: &Path,
    out: &Path,
    seed: Option<u64>,
    robot: Option<&Path>,
    noise: Option<&Path>,
    tilts: bool,
) -> anyhow::Result<()> {
    let spec = load_gait(Some(spec_path))?;
    let chain = load_robot(robot)?;
    let noise = load_noise(noise)?;
    let truth = generate_gait(&spec, &chain)?;
    let frames = synthesize_sensors(&truth, &noise, seed.unwrap_or(spec.seed))?;
    let mut log = SensorLogWriter::new(create_output(&out.join("sensors.csv"))?, &chain, tilts)?;
    for f in &frames {
        log.write(f)?;
    }
    log.finish()?.flush()?;
    io::write_truth(create_output(&out.join("truth.csv"))?, &chain, &truth)?.flush()?;
    eprintln!("{} samples, {} steps written to {}", frames.len(), truth.steps, out.display());
    Ok(())
}

/// First truth row, reordered to the chain's IMUs.
pub(crate) fn truth_links(log: &TruthLog, chain: &KinematicChain) -> anyhow::Result<Vec<LinkState>> {
    let Some(first) = log.links.first() else { bail!(BadInput("ground truth has no rows".into())) };
    chain.imus().iter().map(|m| Ok(first[log.imu(&m.name)?].clone())).collect()
}

fn estimate(
    config: Option<&Path>,
    log: &Path,
    truth: Option<&Path>,
    filter: Option<FilterKind>,
    out: Option<PathBuf>,
) -> anyhow::Result<()> {
    let mut config = match config {
        Some(p) => RunConfig::load(p).with_context(|| format!("run config {}", p.display()))?,
        None => RunConfig::new(FilterKind::MultiImu),
    };
    if let Some(f) = filter {
        config.filter = f;
    }
    let Some(out) = out.or_else(|| config.out.clone()) else {
        bail!(BadInput("no output path: pass --out or set `out` in the config".into()))
    };
    let chain = config.chain()?;
    let truth_init = match (config.init, truth) {
        (InitPolicy::Truth, Some(t)) => Some(truth_links(&io::read_truth(open_input(t)?)?, &chain)?),
        (InitPolicy::Truth, None) => bail!(BadInput("truth initialization needs --truth".into())),
        (InitPolicy::Standing, _) => None,
    };
    let imus = config.estimated_imus(&chain)?;
    let reader = SensorLogReader::new(open_input(log)?, &chain)?;
    if !reader.has_tilts() {
        eprintln!("no tilt columns: using the built-in tilt filter");
    }
    let mut writer = TrajectoryWriter::new(create_output(&out)?, &chain, &imus)?;
    let mut runner = Runner::new(config.clone(), chain, truth_init)?;
    let start = Instant::now();
    let mut rows = 0usize;
    for frame in reader {
        for tick in runner.push(frame?)? {
            writer.write(tick.t, &tick.estimates)?;
            rows += 1;
        }
    }
    for tick in runner.finish()? {
        writer.write(tick.t, &tick.estimates)?;
        rows += 1;
    }
    writer.finish()?.flush()?;
    let timing = runner.timing();
    eprintln!(
        "{}: {rows} ticks in {:.2} s wall clock; filter {:.1} µs/tick mean, {:.1} µs max",
        config.filter,
        start.elapsed().as_secs_f64(),
        timing.mean().as_secs_f64() * 1e6,
        timing.max.as_secs_f64() * 1e6
    );
    Ok(())
}

fn evaluate_cmd(estimate: &Path, truth: &Path, imu: Option<&str>, out: Option<&Path>) -> anyhow::Result<()> {
    let (name, est) = io::read_trajectory(open_input(estimate)?, imu)
        .with_context(|| format!("trajectory {}", estimate.display()))?;
    let truth_log = io::read_truth(open_input(truth)?).with_context(|| format!("ground truth {}", truth.display()))?;
    let truth_traj = truth_log.trajectory(truth_log.imu(&name)?);
    let report = evaluate(&est, &truth_traj, truth_log.steps())?;
    let json = serde_json::to_string_pretty(&report)?;
    match out {
        Some(p) => {
            let mut w = create_output(p)?;
            writeln!(w, "{json}")?;
            w.flush()?;
        }
        None => println!("{json}"),
    }
    Ok(())
}
