//! Multi-IMU error-state filter.
//!
//! Every instrumented link carries its own inertial state. Links are
//! predicted independently, with the floating model or, for feet in contact,
//! the model that rotates the foot about its center of pressure. The joint
//! covariance is then corrected with the tilts of the contact links and with
//! kinematic relative poses between each contact link and each floating link.

pub mod correct;
pub mod predict;

pub use correct::{
    relative_pose, relpose_blocks, relpose_measurement, tilt_basis, tilt_jacobians, tilt_measurement,
    PairMeasurement, RelposeBlocks,
};
pub use predict::{
    assemble_and_predict, contact_jacobians, floating_jacobians, predict_contact, predict_floating,
    LinkPrediction, MAX_DT,
};

use nalgebra::{DMatrix, DVector, Matrix2, Unit, Vector3};
use serde::{Deserialize, Serialize};

use crate::contact::{center_of_pressure, mount_lever_arm, ContactDetector, ContactMode, ContactThresholds, FootForces};
use crate::error::{Error, Result};
use crate::filter::{correct, CorrectionOutcome, ErrorState, GaussianBelief};
use crate::manifold::{keep_orthonormal, oplus_so3, rot_between, Rotation, UnitVector};
use crate::robot::{
    estimate_deformations, ComplementaryTilt, DeformationReport, JointState, KinematicChain, Pose,
    DEFAULT_FD_STEP,
};

/// Tangent dimension of one link: `(δθ, δp, δv, δbg, δba)`.
pub const LINK_DIM: usize = 15;
pub const THETA: usize = 0;
pub const P: usize = 3;
pub const V: usize = 6;
pub const BG: usize = 9;
pub const BA: usize = 12;

#[derive(Clone, Debug, PartialEq)]
pub struct LinkState {
    pub rotation: Rotation,
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
    pub gyro_bias: Vector3<f64>,
    pub accel_bias: Vector3<f64>,
}

impl LinkState {
    pub fn at_rest(rotation: Rotation, position: Vector3<f64>) -> Self {
        LinkState {
            rotation,
            position,
            velocity: Vector3::zeros(),
            gyro_bias: Vector3::zeros(),
            accel_bias: Vector3::zeros(),
        }
    }

    pub fn pose(&self) -> Pose {
        Pose::new(self.rotation, self.position)
    }

    pub fn is_finite(&self) -> bool {
        self.rotation.matrix().iter().all(|v| v.is_finite())
            && [self.position, self.velocity, self.gyro_bias, self.accel_bias]
                .iter()
                .all(|v| v.iter().all(|x| x.is_finite()))
    }

    /// `x ⊕ δ` for a 15-vector `δ`.
    pub fn oplus(&self, delta: &[f64]) -> LinkState {
        let v3 = |k: usize| Vector3::new(delta[k], delta[k + 1], delta[k + 2]);
        LinkState {
            rotation: keep_orthonormal(oplus_so3(&self.rotation, &v3(THETA))),
            position: self.position + v3(P),
            velocity: self.velocity + v3(V),
            gyro_bias: self.gyro_bias + v3(BG),
            accel_bias: self.accel_bias + v3(BA),
        }
    }
}

/// Means of all links, in IMU order.
#[derive(Clone, Debug, PartialEq)]
pub struct LinkStates(pub Vec<LinkState>);

impl ErrorState for LinkStates {
    fn tangent_dim(&self) -> usize {
        self.0.len() * LINK_DIM
    }

    fn inject(&mut self, delta: &DVector<f64>) {
        for (k, link) in self.0.iter_mut().enumerate() {
            *link = link.oplus(&delta.as_slice()[k * LINK_DIM..(k + 1) * LINK_DIM]);
        }
    }
}

/// Per-foot contact flag and center of pressure (foot-link frame).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContactStatus {
    pub in_contact: bool,
    pub cop: Option<Vector3<f64>>,
}

#[derive(Clone, Debug)]
pub struct FilterBelief {
    pub gaussian: GaussianBelief<LinkStates>,
    pub contacts: Vec<ContactStatus>,
    pub time: f64,
}

impl FilterBelief {
    pub fn links(&self) -> &[LinkState] {
        &self.gaussian.mean.0
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.gaussian.covariance
    }

    /// Marginal standard deviations of the link's error state.
    pub fn link_std(&self, link: usize) -> [f64; LINK_DIM] {
        std::array::from_fn(|k| {
            let i = link * LINK_DIM + k;
            self.gaussian.covariance[(i, i)].max(0.0).sqrt()
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImuSample {
    pub gyro: Vector3<f64>,
    pub accel: Vector3<f64>,
}

/// Continuous-time noise densities of the inertial models.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImuNoise {
    /// Gyroscope white noise, rad/s/√Hz.
    pub gyro: f64,
    /// Accelerometer white noise, m/s²/√Hz.
    pub accel: f64,
    /// Gyroscope bias random walk, rad/s²/√Hz.
    pub gyro_bias_walk: f64,
    /// Accelerometer bias random walk, m/s³/√Hz.
    pub accel_bias_walk: f64,
    /// Center-of-pressure slippage velocity, m/s/√Hz.
    pub slip: f64,
}

impl Default for ImuNoise {
    fn default() -> Self {
        ImuNoise { gyro: 5e-4, accel: 2e-3, gyro_bias_walk: 1e-5, accel_bias_walk: 1e-4, slip: 1e-3 }
    }
}

impl ImuNoise {
    /// Diagonal of `H` for `[η_g, η_a, η_bg, η_ba]`.
    pub fn floating_psd(&self) -> DVector<f64> {
        Self::diag(&[self.gyro, self.accel, self.gyro_bias_walk, self.accel_bias_walk])
    }

    /// Diagonal of `H` for `[η_g, η_bg, η_ba, η_s]`.
    pub fn contact_psd(&self) -> DVector<f64> {
        Self::diag(&[self.gyro, self.gyro_bias_walk, self.accel_bias_walk, self.slip])
    }

    fn diag(sigmas: &[f64; 4]) -> DVector<f64> {
        DVector::from_iterator(12, sigmas.iter().flat_map(|s| [s * s; 3]))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    pub imu: ImuNoise,
    /// Covariance of the tilt noise, rad².
    pub tilt_covariance: [[f64; 2]; 2],
    /// Joint encoder noise, rad.
    pub encoder: f64,
    /// Noise of each deformation-rotation component, rad.
    pub deformation: f64,
    /// Force-sensor noise, N. Only the simulator uses it.
    #[serde(default = "default_force_noise")]
    pub force: f64,
    /// Mounting and link-length uncertainty added to every relative-pose
    /// row, rad and m. Without it a leg with fewer joints than measured
    /// rows yields exact constraints.
    #[serde(default = "default_mounting_noise")]
    pub mounting: f64,
}

fn default_force_noise() -> f64 {
    1.0
}

fn default_mounting_noise() -> f64 {
    1e-3
}

impl Default for NoiseConfig {
    fn default() -> Self {
        let tilt = 5e-4f64;
        NoiseConfig {
            imu: ImuNoise::default(),
            tilt_covariance: [[tilt * tilt, 0.0], [0.0, tilt * tilt]],
            encoder: 1e-4,
            deformation: 1e-3,
            force: default_force_noise(),
            mounting: default_mounting_noise(),
        }
    }
}

impl NoiseConfig {
    pub fn tilt_matrix(&self) -> Matrix2<f64> {
        let t = self.tilt_covariance;
        Matrix2::new(t[0][0], t[0][1], t[1][0], t[1][1])
    }

    /// Covariance of the joint-noise vector: encoders first, then three
    /// components per deformation frame when `deformations` is set.
    pub fn joint_covariance(&self, n_joints: usize, n_deformations: usize, deformations: bool) -> DMatrix<f64> {
        let nd = if deformations { 3 * n_deformations } else { 0 };
        let diag = DVector::from_iterator(
            n_joints + nd,
            std::iter::repeat_n(self.encoder.powi(2), n_joints).chain(std::iter::repeat_n(self.deformation.powi(2), nd)),
        );
        DMatrix::from_diagonal(&diag)
    }
}

/// Initial marginal variances.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialCovariance {
    pub orientation: f64,
    pub position: f64,
    pub velocity: f64,
    pub gyro_bias: f64,
    pub accel_bias: f64,
}

impl Default for InitialCovariance {
    fn default() -> Self {
        InitialCovariance { orientation: 1e-4, position: 1e-4, velocity: 1e-2, gyro_bias: 1e-4, accel_bias: 1e-4 }
    }
}

impl InitialCovariance {
    pub fn link_block(&self) -> DMatrix<f64> {
        let d = [self.orientation, self.position, self.velocity, self.gyro_bias, self.accel_bias];
        DMatrix::from_diagonal(&DVector::from_iterator(LINK_DIM, d.iter().flat_map(|&s| [s; 3])))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorConfig {
    pub noise: NoiseConfig,
    pub contact: ContactThresholds,
    pub contact_mode: ContactMode,
    pub initial_covariance: InitialCovariance,
    /// Use estimated deformations in the kinematic model.
    pub extended_kinematics: bool,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            noise: NoiseConfig::default(),
            contact: ContactThresholds::default(),
            contact_mode: ContactMode::AnySensor,
            initial_covariance: InitialCovariance::default(),
            extended_kinematics: true,
        }
    }
}

/// One tick of every sensor channel.
#[derive(Clone, Debug, PartialEq)]
pub struct SensorFrame {
    pub t: f64,
    /// One sample per IMU, in chain order.
    pub imu: Vec<ImuSample>,
    /// Encoder angles, one per joint.
    pub joints: Vec<f64>,
    /// Four force readings per foot.
    pub forces: Vec<FootForces>,
    /// Per-IMU tilt estimates; `None` switches to the built-in tilt filter.
    pub tilts: Option<Vec<UnitVector>>,
}

impl SensorFrame {
    pub fn check(&self, chain: &KinematicChain) -> Result<()> {
        let bad = |what: &str, got: usize, want: usize| {
            Err(Error::Config(format!("sensor frame at t={} has {got} {what}, expected {want}", self.t)))
        };
        if self.imu.len() != chain.n_imus() {
            return bad("IMU samples", self.imu.len(), chain.n_imus());
        }
        if self.joints.len() != chain.n_joints() {
            return bad("joint angles", self.joints.len(), chain.n_joints());
        }
        if self.forces.len() != chain.feet().len() {
            return bad("force groups", self.forces.len(), chain.feet().len());
        }
        if let Some(t) = &self.tilts {
            if t.len() != chain.n_imus() {
                return bad("tilts", t.len(), chain.n_imus());
            }
        }
        if !self.t.is_finite() {
            return Err(Error::NonFinite("timestamp"));
        }
        Ok(())
    }
}

/// How the first frame sets the mean.
#[derive(Clone, Debug, PartialEq)]
pub enum InitialState {
    /// Every link state given (e.g. from ground truth).
    Links(Vec<LinkState>),
    /// Base orientation from an averaged base accelerometer reading with zero
    /// yaw, base position as given, other links placed by kinematics; zero
    /// velocities and biases.
    Standing { base_accel: Vector3<f64>, base_position: Vector3<f64> },
}

/// Rotation with tilt along `up` (body-frame up direction) and zero yaw in
/// the sense of the minimal rotation.
pub fn rotation_from_up(up: &Vector3<f64>) -> Result<Rotation> {
    let n = up.norm();
    if !(n > 1e-9) {
        return Err(Error::NoLoad);
    }
    rot_between(&Unit::new_unchecked(up / n), &Vector3::z_axis())
}

/// What a step did, for logging and tests.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub t: f64,
    /// Per-foot contact flags after this frame.
    pub contacts: Vec<bool>,
    pub tilt: Option<CorrectionOutcome>,
    pub relpose: Option<CorrectionOutcome>,
    /// Number of relative-pose pairs used.
    pub pairs: usize,
    pub deformations: Option<DeformationReport>,
    /// Links whose tilt innovation was undefined and was skipped.
    pub skipped_tilts: Vec<usize>,
}

impl StepReport {
    pub fn corrected(&self) -> bool {
        self.tilt.is_some_and(|o| o.applied()) || self.relpose.is_some_and(|o| o.applied())
    }
}

#[derive(Clone, Debug)]
struct Held {
    t: f64,
    imu: Vec<ImuSample>,
    /// Lever arm of each IMU in contact.
    levers: Vec<Option<Vector3<f64>>>,
}

/// The multi-IMU filter.
#[derive(Clone, Debug)]
pub struct Estimator {
    chain: KinematicChain,
    config: EstimatorConfig,
    init: Option<InitialState>,
    belief: Option<FilterBelief>,
    detectors: Vec<ContactDetector>,
    held: Option<Held>,
    joint_state: JointState,
    fallback_tilts: Option<Vec<ComplementaryTilt>>,
}

impl Estimator {
    pub fn new(chain: KinematicChain, config: EstimatorConfig, init: InitialState) -> Result<Self> {
        if let InitialState::Links(links) = &init {
            if links.len() != chain.n_imus() {
                return Err(Error::Config(format!("{} initial links for {} IMUs", links.len(), chain.n_imus())));
            }
        }
        let detectors = chain.feet().iter().map(|_| ContactDetector::new(config.contact_mode, config.contact)).collect();
        let joint_state = chain.zero_state();
        Ok(Estimator {
            chain,
            config,
            init: Some(init),
            belief: None,
            detectors,
            held: None,
            joint_state,
            fallback_tilts: None,
        })
    }

    pub fn chain(&self) -> &KinematicChain {
        &self.chain
    }

    pub fn config(&self) -> &EstimatorConfig {
        &self.config
    }

    /// `None` until the first frame has been processed.
    pub fn belief(&self) -> Option<&FilterBelief> {
        self.belief.as_ref()
    }

    pub fn belief_mut(&mut self) -> Option<&mut FilterBelief> {
        self.belief.as_mut()
    }

    /// Latest joint state used by the kinematic model.
    pub fn joint_state(&self) -> &JointState {
        &self.joint_state
    }

    pub fn step(&mut self, frame: &SensorFrame) -> Result<StepReport> {
        frame.check(&self.chain)?;
        let dt = match &self.held {
            Some(h) if frame.t <= h.t => {
                return Err(Error::NonMonotoneTime { previous: h.t, current: frame.t });
            }
            Some(h) => Some(frame.t - h.t),
            None => None,
        };

        let tilts = self.tilts(frame, dt);
        let contacts: Vec<ContactStatus> = self
            .detectors
            .iter_mut()
            .zip(&frame.forces)
            .zip(self.chain.feet())
            .map(|((det, f), foot)| {
                let in_contact = det.update(frame.t, f);
                let cop = if in_contact { center_of_pressure(f, &foot.sensors).ok() } else { None };
                ContactStatus { in_contact: in_contact && cop.is_some(), cop }
            })
            .collect();
        let stance = self.stance_imu(frame);
        let (q, def_report) = self.kinematic_state(frame, &tilts, stance)?;
        self.joint_state = q.clone();

        let mut report = StepReport {
            t: frame.t,
            contacts: contacts.iter().map(|c| c.in_contact).collect(),
            tilt: None,
            relpose: None,
            pairs: 0,
            deformations: def_report,
            skipped_tilts: Vec::new(),
        };
        let levers = self.levers(&contacts);

        match dt {
            None => self.initialize(frame, &q, contacts)?,
            Some(dt) => {
                self.predict(dt)?;
                let belief = self.belief.as_mut().expect("initialized");
                belief.contacts = contacts;
                belief.time = frame.t;
                self.correct(&q, &tilts, stance, &mut report)?;
            }
        }
        self.held = Some(Held { t: frame.t, imu: frame.imu.clone(), levers });
        Ok(report)
    }

    fn tilts(&mut self, frame: &SensorFrame, dt: Option<f64>) -> Vec<UnitVector> {
        if let Some(t) = &frame.tilts {
            return t.clone();
        }
        match (&mut self.fallback_tilts, dt) {
            (Some(filters), Some(dt)) => {
                filters.iter_mut().zip(&frame.imu).map(|(f, s)| f.update(&s.gyro, &s.accel, dt)).collect()
            }
            _ => {
                let filters: Vec<ComplementaryTilt> = frame
                    .imu
                    .iter()
                    .map(|s| ComplementaryTilt::new(Unit::try_new(s.accel, 1e-9).unwrap_or(Vector3::z_axis())))
                    .collect();
                let out = filters.iter().map(|f| f.tilt()).collect();
                self.fallback_tilts = Some(filters);
                out
            }
        }
    }

    /// Foot IMU carrying the most load, used to anchor deformation estimates.
    fn stance_imu(&self, frame: &SensorFrame) -> usize {
        let load = |f: &FootForces| f.iter().map(|x| x.max(0.0)).sum::<f64>();
        let (k, _) = frame
            .forces
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (k, f)| if load(f) > best.1 { (k, load(f)) } else { best });
        self.chain.feet()[k].imu
    }

    fn kinematic_state(
        &self,
        frame: &SensorFrame,
        tilts: &[UnitVector],
        stance: usize,
    ) -> Result<(JointState, Option<DeformationReport>)> {
        let prior = JointState { angles: frame.joints.clone(), deformations: self.joint_state.deformations.clone() };
        if !self.config.extended_kinematics {
            return Ok((prior.without_deformations(), None));
        }
        let (q, report) = estimate_deformations(&self.chain, &prior, tilts, stance)?;
        Ok((q, Some(report)))
    }

    fn levers(&self, contacts: &[ContactStatus]) -> Vec<Option<Vector3<f64>>> {
        let mut levers = vec![None; self.chain.n_imus()];
        for (foot, status) in self.chain.feet().iter().zip(contacts) {
            if let (true, Some(cop)) = (status.in_contact, status.cop) {
                levers[foot.imu] = Some(mount_lever_arm(&self.chain.imus()[foot.imu].mount, &cop));
            }
        }
        levers
    }

    fn initialize(&mut self, frame: &SensorFrame, q: &JointState, contacts: Vec<ContactStatus>) -> Result<()> {
        let links = match self.init.take().expect("initialized once") {
            InitialState::Links(links) => links,
            InitialState::Standing { base_accel, base_position } => {
                let base = self
                    .chain
                    .base_imu()
                    .ok_or_else(|| Error::InvalidChain("standing initialization needs a base IMU".into()))?;
                let base_pose = Pose::new(rotation_from_up(&base_accel)?, base_position);
                let poses = self.chain.imu_poses(q)?;
                let to_world = base_pose.compose(&poses[base].inverse());
                poses.iter().map(|p| {
                    let w = to_world.compose(p);
                    LinkState::at_rest(w.rotation, w.translation)
                }).collect()
            }
        };
        let n = links.len();
        let mut p = DMatrix::zeros(n * LINK_DIM, n * LINK_DIM);
        let block = self.config.initial_covariance.link_block();
        for i in 0..n {
            p.view_mut((i * LINK_DIM, i * LINK_DIM), (LINK_DIM, LINK_DIM)).copy_from(&block);
        }
        self.belief = Some(FilterBelief {
            gaussian: GaussianBelief::new(LinkStates(links), p)?,
            contacts,
            time: frame.t,
        });
        Ok(())
    }

    fn predict(&mut self, dt: f64) -> Result<()> {
        let held = self.held.as_ref().expect("held inputs exist after the first frame");
        let belief = self.belief.as_mut().expect("initialized");
        let noise = &self.config.noise.imu;
        let mut predictions = Vec::with_capacity(held.imu.len());
        for (k, x) in belief.gaussian.mean.0.iter().enumerate() {
            let pred = match held.levers[k] {
                Some(r) => predict_contact(x, &held.imu[k], &r, noise, dt)?,
                None => predict_floating(x, &held.imu[k], noise, dt)?,
            };
            predictions.push(pred);
        }
        let blocks: Vec<_> = predictions.iter().map(|p| (&p.a, &p.q)).collect();
        assemble_and_predict(&mut belief.gaussian.covariance, &blocks);
        for (x, p) in belief.gaussian.mean.0.iter_mut().zip(predictions) {
            *x = p.state;
        }
        Ok(())
    }

    fn correct(&mut self, q: &JointState, tilts: &[UnitVector], stance: usize, report: &mut StepReport) -> Result<()> {
        let belief = self.belief.as_mut().expect("initialized");
        let contact_imus: Vec<usize> = self
            .chain
            .feet()
            .iter()
            .zip(&belief.contacts)
            .filter(|(_, c)| c.in_contact)
            .map(|(f, _)| f.imu)
            .collect();
        if contact_imus.is_empty() {
            return Ok(());
        }

        let targets: Vec<(usize, UnitVector)> = contact_imus.iter().map(|&i| (i, tilts[i])).collect();
        let (meas, skipped) = tilt_measurement(&belief.gaussian.mean.0, &targets, &self.config.noise.tilt_matrix())?;
        report.skipped_tilts = skipped;
        report.tilt = Some(correct(&mut belief.gaussian, &meas)?);

        let pairs = relpose_pairs(self.chain.n_imus(), &contact_imus, stance);
        if pairs.is_empty() {
            return Ok(());
        }
        let meas = kinematic_pairs(&self.chain, q, &pairs, self.config.extended_kinematics)?;
        let noise = self.config.noise.joint_covariance(
            self.chain.n_joints(),
            self.chain.n_deformations(),
            self.config.extended_kinematics,
        );
        let lin = relpose_measurement(&belief.gaussian.mean.0, &meas, &noise)?.with_row_noise(self.config.noise.mounting.powi(2));
        report.relpose = Some(correct(&mut belief.gaussian, &lin)?);
        report.pairs = pairs.len();
        Ok(())
    }
}

/// IMU pairs for the relative-pose correction. With one contact link these
/// are the (contact, floating) pairs. With several, every (contact, floating)
/// pair set contains kinematic loops whose rows are linear combinations of
/// other rows, which makes the innovation covariance singular; the same
/// information is carried by the tree of pairs from one anchor contact link
/// (`stance` when it is in contact) to every other link.
pub fn relpose_pairs(n_imus: usize, contact_imus: &[usize], stance: usize) -> Vec<(usize, usize)> {
    let anchor = match contact_imus {
        [] => return Vec::new(),
        [only] => *only,
        many if many.contains(&stance) => stance,
        many => many[0],
    };
    (0..n_imus).filter(|&j| j != anchor).map(|j| (anchor, j)).collect()
}

/// Kinematic relative poses and their Jacobians for IMU pairs. Without
/// `deformations`, only the joint-angle columns of the Jacobians are kept.
pub fn kinematic_pairs(
    chain: &KinematicChain,
    q: &JointState,
    pairs: &[(usize, usize)],
    deformations: bool,
) -> Result<Vec<PairMeasurement>> {
    let poses = chain.imu_poses(q)?;
    let jac = chain.pair_jacobians(q, pairs, DEFAULT_FD_STEP)?;
    let cols = if deformations { chain.q_dim() } else { chain.n_joints() };
    Ok(pairs
        .iter()
        .zip(jac)
        .map(|(&(i, j), (jr, jp))| PairMeasurement {
            i,
            j,
            measured: poses[i].relative_to(&poses[j]),
            jr: jr.columns(0, cols).into_owned(),
            jp: jp.columns(0, cols).into_owned(),
        })
        .collect())
}
