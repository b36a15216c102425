//! Run configuration and a common driver for the filters.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{Duration, Instant};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::baseline::{BaselineConfig, BaselineFilter, KinematicVariant};
use crate::contact::{ContactMode, ContactThresholds};
use crate::error::{Error, Result};
use crate::estimator::{Estimator, EstimatorConfig, InitialCovariance, InitialState, LinkState, NoiseConfig, SensorFrame};
use crate::io::LinkEstimate;
use crate::robot::{default_biped, KinematicChain, RobotDescription};

pub const RUN_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FilterKind {
    #[serde(rename = "5-imu-ekm")]
    MultiImu,
    #[serde(rename = "1-imu")]
    SingleImu,
    #[serde(rename = "1-imu-ekm")]
    SingleImuEkm,
}

impl FilterKind {
    pub const ALL: [FilterKind; 3] = [FilterKind::SingleImu, FilterKind::SingleImuEkm, FilterKind::MultiImu];

    pub fn name(self) -> &'static str {
        match self {
            FilterKind::MultiImu => "5-imu-ekm",
            FilterKind::SingleImu => "1-imu",
            FilterKind::SingleImuEkm => "1-imu-ekm",
        }
    }
}

impl fmt::Display for FilterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FilterKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FilterKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown filter `{s}` (expected 5-imu-ekm, 1-imu or 1-imu-ekm)")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitPolicy {
    /// Every link from the first row of a ground-truth log.
    Truth,
    /// Level base at the origin with zero yaw, from the mean base
    /// accelerometer reading over the standing window.
    #[default]
    Standing,
}

fn default_foothold_noise() -> f64 {
    BaselineConfig::default().foothold_noise
}

fn default_standing_window() -> f64 {
    1.0
}

fn default_contact_mode() -> ContactMode {
    ContactMode::AnySensor
}

/// Everything needed to run one filter over a sensor log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub filter: FilterKind,
    /// Robot description; the built-in biped when absent. Relative paths
    /// are resolved against the config file.
    #[serde(default)]
    pub robot: Option<PathBuf>,
    #[serde(default)]
    pub noise: NoiseConfig,
    #[serde(default)]
    pub contact: ContactThresholds,
    /// Contact criterion of the multi-IMU filter. The baselines always use
    /// flat-only contact.
    #[serde(default = "default_contact_mode")]
    pub contact_mode: ContactMode,
    #[serde(default)]
    pub initial_covariance: InitialCovariance,
    #[serde(default = "default_foothold_noise")]
    pub foothold_noise: f64,
    #[serde(default)]
    pub init: InitPolicy,
    /// Length (s) of the accelerometer average for standing initialization.
    #[serde(default = "default_standing_window")]
    pub standing_window: f64,
    /// Sensor noise seed for simulated runs; overrides the gait spec.
    #[serde(default)]
    pub seed: Option<u64>,
    /// Output path.
    #[serde(default)]
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn new(filter: FilterKind) -> Self {
        RunConfig {
            schema_version: RUN_SCHEMA_VERSION,
            filter,
            robot: None,
            noise: NoiseConfig::default(),
            contact: ContactThresholds::default(),
            contact_mode: default_contact_mode(),
            initial_covariance: InitialCovariance::default(),
            foothold_noise: default_foothold_noise(),
            init: InitPolicy::default(),
            standing_window: default_standing_window(),
            seed: None,
            out: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let config: RunConfig = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    /// Reads a config and resolves its robot path against the file's
    /// directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut config = RunConfig::from_json(&std::fs::read_to_string(path)?)?;
        if let (Some(robot), Some(dir)) = (&config.robot, path.parent()) {
            if robot.is_relative() {
                config.robot = Some(dir.join(robot));
            }
        }
        if let Some(robot) = &config.robot {
            if !robot.is_file() {
                return Err(Error::Config(format!("robot description {} not found", robot.display())));
            }
        }
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != RUN_SCHEMA_VERSION {
            return Err(Error::SchemaVersion { found: self.schema_version, expected: RUN_SCHEMA_VERSION });
        }
        let n = &self.noise;
        let values = [
            n.imu.gyro,
            n.imu.accel,
            n.imu.gyro_bias_walk,
            n.imu.accel_bias_walk,
            n.imu.slip,
            n.encoder,
            n.deformation,
            n.force,
            n.mounting,
            self.foothold_noise,
        ];
        if values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config("noise parameters must be finite and non-negative".into()));
        }
        if !(self.standing_window >= 0.0 && self.standing_window.is_finite()) {
            return Err(Error::Config(format!("standing window {} s", self.standing_window)));
        }
        let c = &self.contact;
        if !(c.on >= c.off && c.off >= 0.0 && c.min_dwell >= 0.0) {
            return Err(Error::Config("contact thresholds need on >= off >= 0 and a non-negative dwell".into()));
        }
        Ok(())
    }

    pub fn chain(&self) -> Result<KinematicChain> {
        match &self.robot {
            None => Ok(default_biped()),
            Some(path) => RobotDescription::from_json(&std::fs::read_to_string(path)?)?.build(),
        }
    }

    pub fn estimator_config(&self) -> EstimatorConfig {
        EstimatorConfig {
            noise: self.noise,
            contact: self.contact,
            contact_mode: self.contact_mode,
            initial_covariance: self.initial_covariance,
            extended_kinematics: true,
        }
    }

    pub fn baseline_config(&self, variant: KinematicVariant) -> BaselineConfig {
        BaselineConfig {
            noise: self.noise,
            contact: self.contact,
            initial_covariance: self.initial_covariance,
            foothold_noise: self.foothold_noise,
            variant,
        }
    }

    /// IMUs whose state the selected filter estimates.
    pub fn estimated_imus(&self, chain: &KinematicChain) -> Result<Vec<usize>> {
        match self.filter {
            FilterKind::MultiImu => Ok((0..chain.n_imus()).collect()),
            _ => Ok(vec![chain.base_imu().ok_or_else(|| Error::InvalidChain("the baseline needs a base IMU".into()))?]),
        }
    }

    pub fn build(&self, chain: KinematicChain, init: InitialState) -> Result<Box<dyn TrajectoryFilter + Send>> {
        Ok(match self.filter {
            FilterKind::MultiImu => Box::new(Estimator::new(chain, self.estimator_config(), init)?),
            FilterKind::SingleImu => {
                Box::new(BaselineFilter::new(chain, self.baseline_config(KinematicVariant::Rigid), init)?)
            }
            FilterKind::SingleImuEkm => {
                Box::new(BaselineFilter::new(chain, self.baseline_config(KinematicVariant::Extended), init)?)
            }
        })
    }
}

/// A filter producing link estimates tick by tick.
pub trait TrajectoryFilter {
    fn advance(&mut self, frame: &SensorFrame) -> Result<()>;
    /// Current estimates of the estimated IMUs; empty before the first frame.
    fn estimates(&self) -> Vec<LinkEstimate>;
}

impl TrajectoryFilter for Estimator {
    fn advance(&mut self, frame: &SensorFrame) -> Result<()> {
        self.step(frame).map(|_| ())
    }

    fn estimates(&self) -> Vec<LinkEstimate> {
        let Some(b) = self.belief() else { return Vec::new() };
        b.links()
            .iter()
            .enumerate()
            .map(|(imu, state)| {
                let s = b.link_std(imu);
                LinkEstimate { imu, state: state.clone(), std: std::array::from_fn(|k| s[k]) }
            })
            .collect()
    }
}

impl TrajectoryFilter for BaselineFilter {
    fn advance(&mut self, frame: &SensorFrame) -> Result<()> {
        self.step(frame).map(|_| ())
    }

    fn estimates(&self) -> Vec<LinkEstimate> {
        let Some(b) = self.belief() else { return Vec::new() };
        let std = std::array::from_fn(|k| b.covariance[(k, k)].max(0.0).sqrt());
        vec![LinkEstimate { imu: self.base_imu(), state: b.mean.base.clone(), std }]
    }
}

/// Estimates after one tick.
#[derive(Clone, Debug, PartialEq)]
pub struct Tick {
    pub t: f64,
    pub estimates: Vec<LinkEstimate>,
}

/// Per-tick filter timing.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Timing {
    pub ticks: usize,
    pub total: Duration,
    pub max: Duration,
}

impl Timing {
    pub fn mean(&self) -> Duration {
        if self.ticks == 0 {
            Duration::ZERO
        } else {
            self.total / self.ticks as u32
        }
    }
}

/// Streams frames through a filter. With standing initialization the frames
/// of the standing window are held back until their mean accelerometer
/// reading is known, then replayed.
pub struct Runner {
    config: RunConfig,
    chain: Option<KinematicChain>,
    truth_init: Option<Vec<LinkState>>,
    pending: Vec<SensorFrame>,
    filter: Option<Box<dyn TrajectoryFilter + Send>>,
    timing: Timing,
}

impl fmt::Debug for Runner {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Runner")
            .field("filter", &self.config.filter)
            .field("pending", &self.pending.len())
            .field("timing", &self.timing)
            .finish()
    }
}

impl Runner {
    /// `truth_init` is required by [`InitPolicy::Truth`] and ignored otherwise.
    pub fn new(config: RunConfig, chain: KinematicChain, truth_init: Option<Vec<LinkState>>) -> Result<Self> {
        config.validate()?;
        if config.init == InitPolicy::Truth && truth_init.is_none() {
            return Err(Error::Config("truth initialization needs a ground-truth log".into()));
        }
        Ok(Runner { config, chain: Some(chain), truth_init, pending: Vec::new(), filter: None, timing: Timing::default() })
    }

    pub fn timing(&self) -> Timing {
        self.timing
    }

    /// Feeds one frame and returns the ticks it completes, in order.
    pub fn push(&mut self, frame: SensorFrame) -> Result<Vec<Tick>> {
        if self.filter.is_some() {
            return Ok(vec![self.run(&frame)?]);
        }
        if let Some(chain) = &self.chain {
            frame.check(chain)?;
        }
        if let Some(last) = self.pending.last() {
            if !(frame.t > last.t) {
                return Err(Error::NonMonotoneTime { previous: last.t, current: frame.t });
            }
        }
        let start = self.pending.first().map_or(frame.t, |f| f.t);
        let ready = match self.config.init {
            InitPolicy::Truth => true,
            InitPolicy::Standing => frame.t - start >= self.config.standing_window,
        };
        self.pending.push(frame);
        if ready {
            self.flush()
        } else {
            Ok(Vec::new())
        }
    }

    /// Processes frames still held back by a log shorter than the standing
    /// window.
    pub fn finish(&mut self) -> Result<Vec<Tick>> {
        if self.filter.is_none() && !self.pending.is_empty() {
            self.flush()
        } else {
            Ok(Vec::new())
        }
    }

    fn flush(&mut self) -> Result<Vec<Tick>> {
        let chain = self.chain.take().expect("flushed once");
        let init = match self.config.init {
            InitPolicy::Truth => InitialState::Links(self.truth_init.clone().expect("checked in new")),
            InitPolicy::Standing => {
                let base = chain.base_imu().ok_or_else(|| Error::InvalidChain("standing init needs a base IMU".into()))?;
                let sum: Vector3<f64> = self.pending.iter().map(|f| f.imu[base].accel).sum();
                InitialState::Standing {
                    base_accel: sum / self.pending.len() as f64,
                    base_position: Vector3::zeros(),
                }
            }
        };
        self.filter = Some(self.config.build(chain, init)?);
        let frames = std::mem::take(&mut self.pending);
        frames.iter().map(|f| self.run(f)).collect()
    }

    fn run(&mut self, frame: &SensorFrame) -> Result<Tick> {
        let filter = self.filter.as_mut().expect("built");
        let start = Instant::now();
        filter.advance(frame)?;
        let elapsed = start.elapsed();
        self.timing.ticks += 1;
        self.timing.total += elapsed;
        self.timing.max = self.timing.max.max(elapsed);
        Ok(Tick { t: frame.t, estimates: filter.estimates() })
    }
}

/// Runs a whole frame sequence.
pub fn run_frames(
    config: &RunConfig,
    chain: &KinematicChain,
    truth_init: Option<Vec<LinkState>>,
    frames: &[SensorFrame],
) -> Result<Vec<Tick>> {
    let mut runner = Runner::new(config.clone(), chain.clone(), truth_init)?;
    let mut out = Vec::with_capacity(frames.len());
    for f in frames {
        out.extend(runner.push(f.clone())?);
    }
    out.extend(runner.finish()?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{generate_gait, synthesize_sensors, GaitSpec};

    #[test]
    fn filter_names_round_trip() {
        for k in FilterKind::ALL {
            assert_eq!(k.name().parse::<FilterKind>().unwrap(), k);
            assert_eq!(serde_json::to_string(&k).unwrap(), format!("\"{}\"", k.name()));
        }
        assert!("2-imu".parse::<FilterKind>().is_err());
    }

    #[test]
    fn config_rejects_unknown_keys_and_versions() {
        let ok = r#"{"schema_version": 1, "filter": "1-imu"}"#;
        let c = RunConfig::from_json(ok).unwrap();
        assert_eq!(c, RunConfig::new(FilterKind::SingleImu));
        assert!(RunConfig::from_json(r#"{"schema_version": 1, "filter": "1-imu", "fliter": 1}"#).is_err());
        assert!(matches!(
            RunConfig::from_json(r#"{"schema_version": 2, "filter": "1-imu"}"#),
            Err(Error::SchemaVersion { found: 2, .. })
        ));
        let negative = r#"{"schema_version": 1, "filter": "1-imu", "foothold_noise": -1.0}"#;
        assert!(matches!(RunConfig::from_json(negative), Err(Error::Config(_))));
    }

    #[test]
    fn config_round_trips_through_json() {
        let mut c = RunConfig::new(FilterKind::MultiImu);
        c.init = InitPolicy::Truth;
        c.seed = Some(4);
        let back = RunConfig::from_json(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn standing_init_replays_the_window() {
        let chain = default_biped();
        let truth = generate_gait(&GaitSpec::standing(1.5), &chain).unwrap();
        let frames = synthesize_sensors(&truth, &NoiseConfig::default(), 1).unwrap();
        let mut config = RunConfig::new(FilterKind::MultiImu);
        config.standing_window = 0.5;
        let mut runner = Runner::new(config, chain.clone(), None).unwrap();
        let mut ticks = Vec::new();
        for (k, f) in frames.iter().enumerate() {
            let out = runner.push(f.clone()).unwrap();
            if k < 500 {
                assert!(out.is_empty(), "tick {k}");
            }
            ticks.extend(out);
        }
        assert_eq!(ticks.len(), frames.len());
        assert!(ticks.iter().zip(&frames).all(|(t, f)| t.t == f.t));
        let base = &ticks.last().unwrap().estimates[0].state;
        assert!(base.rotation.angle() < 0.01, "{}", base.rotation.angle());
        assert_eq!(runner.timing().ticks, frames.len());
    }

    #[test]
    fn short_logs_are_flushed_on_finish() {
        let chain = default_biped();
        let truth = generate_gait(&GaitSpec::standing(0.2), &chain).unwrap();
        let frames = synthesize_sensors(&truth, &NoiseConfig::default(), 1).unwrap();
        let mut runner = Runner::new(RunConfig::new(FilterKind::SingleImu), chain, None).unwrap();
        for f in &frames {
            assert!(runner.push(f.clone()).unwrap().is_empty());
        }
        let ticks = runner.finish().unwrap();
        assert_eq!(ticks.len(), frames.len());
        assert_eq!(ticks[0].estimates.len(), 1);
    }

    #[test]
    fn truth_init_requires_links_and_starts_on_truth() {
        let chain = default_biped();
        let mut config = RunConfig::new(FilterKind::SingleImuEkm);
        config.init = InitPolicy::Truth;
        assert!(Runner::new(config.clone(), chain.clone(), None).is_err());
        let truth = generate_gait(&GaitSpec::straight(0.15, 0.5), &chain).unwrap();
        let frames = synthesize_sensors(&truth, &NoiseConfig::default(), 2).unwrap();
        let ticks = run_frames(&config, &chain, Some(truth.initial_links()), &frames).unwrap();
        assert_eq!(ticks.len(), frames.len());
        assert_eq!(ticks[0].estimates[0].state.position, truth.samples[0].imus[0].pose.translation);
    }

    #[test]
    fn out_of_order_frames_are_rejected_while_buffering() {
        let chain = default_biped();
        let truth = generate_gait(&GaitSpec::standing(0.1), &chain).unwrap();
        let frames = synthesize_sensors(&truth, &NoiseConfig::default(), 1).unwrap();
        let mut runner = Runner::new(RunConfig::new(FilterKind::MultiImu), chain, None).unwrap();
        runner.push(frames[1].clone()).unwrap();
        assert!(matches!(runner.push(frames[0].clone()), Err(Error::NonMonotoneTime { .. })));
    }
}
