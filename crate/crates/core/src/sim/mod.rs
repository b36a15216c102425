//! Synthetic biped walking with ground truth and sensor synthesis.
//!
//! A gait is specified in task space (pelvis and foot trajectories with heel
//! and toe rolls), turned into joint angles and load-dependent deformations
//! by inverse kinematics, and differentiated into exact IMU readings.

mod gait;
mod ik;
mod sensors;

use std::f64::consts::PI;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

pub use gait::{smooth, Gait, Phase};
pub use sensors::synthesize_sensors;

use crate::contact::FootForces;
use crate::error::{Error, Result};
use crate::estimator::LinkState;
use crate::manifold::so3_log;
use crate::robot::{JointState, KinematicChain, Pose};
use crate::GRAVITY;

pub const GAIT_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum PathSpec {
    Straight,
    /// Counter-clockwise circle of the given radius (m).
    Circular { radius: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GaitSpec {
    pub schema_version: u32,
    /// Forward speed (m/s). Zero means standing still.
    pub speed: f64,
    /// Distance between successive footholds of alternate feet (m).
    pub step_length: f64,
    /// Time between successive heel strikes (s).
    pub step_duration: f64,
    /// Fraction of a step spent in double support.
    pub double_support: f64,
    /// Foot pitch at heel strike and toe-off (rad).
    pub roll_amplitude: f64,
    pub path: PathSpec,
    /// Length of the run (s).
    pub duration: f64,
    /// Sample rate (Hz).
    pub rate: f64,
    /// Seed for sensor noise.
    pub seed: u64,
    /// Peak structural deformation at full load (rad).
    pub deformation_amplitude: f64,
    pub pelvis_height: f64,
    /// Lateral pelvis sway amplitude (m).
    pub sway: f64,
    /// Pelvis roll amplitude (rad).
    pub pelvis_roll: f64,
    /// Swing-foot clearance (m).
    pub step_height: f64,
    /// Body mass (kg) for the foot loads.
    pub body_mass: f64,
    /// Load (N) a foot carries as soon as it touches the ground.
    pub preload: f64,
}

impl Default for GaitSpec {
    fn default() -> Self {
        GaitSpec {
            schema_version: GAIT_SCHEMA_VERSION,
            speed: 0.15,
            step_length: 0.3,
            step_duration: 2.0,
            double_support: 0.2,
            roll_amplitude: 0.2,
            path: PathSpec::Straight,
            duration: 20.0,
            rate: 1000.0,
            seed: 0,
            deformation_amplitude: 0.0,
            pelvis_height: 0.88,
            sway: 0.02,
            pelvis_roll: 0.01,
            step_height: 0.05,
            body_mass: 80.0,
            preload: 60.0,
        }
    }
}

impl GaitSpec {
    /// Straight walk with 0.3 m steps, or standing when `speed` is zero.
    pub fn straight(speed: f64, duration: f64) -> Self {
        let mut spec = GaitSpec { speed, duration, ..GaitSpec::default() };
        if speed > 0.0 {
            spec.step_duration = spec.step_length / speed;
        }
        spec
    }

    pub fn circular(radius: f64, speed: f64, duration: f64) -> Self {
        GaitSpec { path: PathSpec::Circular { radius }, ..GaitSpec::straight(speed, duration) }
    }

    pub fn standing(duration: f64) -> Self {
        GaitSpec::straight(0.0, duration)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != GAIT_SCHEMA_VERSION {
            return Err(Error::SchemaVersion { found: self.schema_version, expected: GAIT_SCHEMA_VERSION });
        }
        let bad = |what: &str| Err(Error::InfeasibleGait(what.to_string()));
        let finite = [
            self.speed,
            self.step_length,
            self.step_duration,
            self.double_support,
            self.roll_amplitude,
            self.duration,
            self.rate,
            self.deformation_amplitude,
            self.pelvis_height,
            self.sway,
            self.pelvis_roll,
            self.step_height,
            self.body_mass,
            self.preload,
        ];
        if finite.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("gait parameter"));
        }
        if self.speed < 0.0 {
            return bad("negative speed");
        }
        if self.speed > 0.0 {
            if self.step_length <= 0.0 || self.step_duration <= 0.0 {
                return bad("step length and duration must be positive");
            }
            if (self.speed * self.step_duration - self.step_length).abs() > 1e-9 * self.step_length {
                return bad("speed must equal step_length / step_duration");
            }
        }
        if !(self.double_support > 0.0 && self.double_support < 0.5) {
            return bad("double_support must lie in (0, 0.5)");
        }
        if !(0.0..=0.5).contains(&self.roll_amplitude) {
            return bad("roll_amplitude must lie in [0, 0.5]");
        }
        if self.duration <= 0.0 || self.rate < 10.0 {
            return bad("duration must be positive and rate at least 10 Hz");
        }
        if self.deformation_amplitude.abs() > 0.2 {
            return bad("deformation_amplitude above 0.2 rad");
        }
        if let PathSpec::Circular { radius } = self.path {
            if !(radius >= 0.3) {
                return bad("circle radius below 0.3 m");
            }
        }
        if self.body_mass <= 0.0 || self.preload < 0.0 || 2.0 * self.preload >= self.body_mass * -GRAVITY.z {
            return bad("foot loads");
        }
        Ok(())
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.rate
    }

    pub fn samples(&self) -> usize {
        (self.duration * self.rate).round() as usize + 1
    }
}

/// Exact kinematic quantities of one IMU at one tick.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImuTruth {
    /// World pose of the IMU frame.
    pub pose: Pose,
    pub velocity: Vector3<f64>,
    /// Body-frame angular rate over the following sample interval.
    pub omega: Vector3<f64>,
    /// Body-frame specific force over the following sample interval.
    pub specific_force: Vector3<f64>,
}

#[derive(Clone, Debug)]
pub struct TruthSample {
    pub t: f64,
    pub imus: Vec<ImuTruth>,
    /// Joint angles and the injected deformations.
    pub joints: JointState,
    /// Noise-free sensor forces per foot.
    pub forces: Vec<FootForces>,
    pub contacts: Vec<bool>,
    /// Whether each foot is flat on the ground.
    pub flat: Vec<bool>,
    /// Center of pressure per foot in the foot-link frame.
    pub cops: Vec<Option<Vector3<f64>>>,
    /// Share of body weight per foot.
    pub loads: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct GroundTruth {
    pub spec: GaitSpec,
    pub samples: Vec<TruthSample>,
    /// Heel strikes during the run.
    pub steps: usize,
}

impl GroundTruth {
    pub fn dt(&self) -> f64 {
        self.spec.dt()
    }

    /// True state of every IMU at the first tick, zero biases.
    pub fn initial_links(&self) -> Vec<LinkState> {
        self.links_at(0)
    }

    pub fn links_at(&self, k: usize) -> Vec<LinkState> {
        self.samples[k]
            .imus
            .iter()
            .map(|s| LinkState { velocity: s.velocity, ..LinkState::at_rest(s.pose.rotation, s.pose.translation) })
            .collect()
    }

    /// World pose of IMU `imu` at every tick.
    pub fn trajectory(&self, imu: usize) -> Vec<(f64, Pose)> {
        self.samples.iter().map(|s| (s.t, s.imus[imu].pose)).collect()
    }
}

/// World poses of all IMUs and the joint state at one grid time.
struct GridPoint {
    imus: Vec<Pose>,
    joints: JointState,
}

/// Simulates the gait on `chain` (a biped with two six-joint legs).
pub fn generate_gait(spec: &GaitSpec, chain: &KinematicChain) -> Result<GroundTruth> {
    spec.validate()?;
    if chain.feet().len() != 2 {
        return Err(Error::InfeasibleGait(format!("the simulator needs two feet, chain has {}", chain.feet().len())));
    }
    let gait = Gait::new(spec, chain);
    let solver = ik::LegSolver::new(chain)?;
    let dt = spec.dt();
    let n = spec.samples();

    // Grid from one tick before the first sample to two after the last, for differences.
    let mut grid: Vec<GridPoint> = Vec::with_capacity(n + 3);
    let mut q = None;
    for k in -1..=(n as i64 + 1) {
        let t = k as f64 * dt;
        let pelvis = gait.pelvis_pose(t);
        let feet = [gait.foot_pose(0, t), gait.foot_pose(1, t)];
        let loads = [gait.load_share(0, t), gait.load_share(1, t)];
        let def_axes = deformation_axes(&gait, t, spec.deformation_amplitude, &loads);
        let joints = solver.solve(&pelvis, &feet, &def_axes, q.as_ref())?;
        let imus = chain.imu_poses(&joints)?.iter().map(|p| pelvis.compose(p)).collect();
        q = Some(joints.clone());
        grid.push(GridPoint { imus, joints });
    }

    let n_imus = chain.n_imus();
    let velocity = |g: usize, i: usize| (grid[g + 1].imus[i].translation - grid[g - 1].imus[i].translation) / (2.0 * dt);
    let weight = spec.body_mass * -GRAVITY.z;
    let mut samples = Vec::with_capacity(n);
    for k in 0..n {
        let g = k + 1;
        let t = k as f64 * dt;
        let mut imus = Vec::with_capacity(n_imus);
        for i in 0..n_imus {
            let r0 = grid[g].imus[i].rotation;
            let r1 = grid[g + 1].imus[i].rotation;
            let omega = so3_log(&(r0.inverse() * r1))? / dt;
            let v0 = velocity(g, i);
            let v1 = velocity(g + 1, i);
            let specific_force = r0.inverse() * ((v1 - v0) / dt - GRAVITY);
            imus.push(ImuTruth { pose: grid[g].imus[i], velocity: v0, omega, specific_force });
        }
        let mut forces = Vec::with_capacity(2);
        let mut contacts = Vec::with_capacity(2);
        let mut flat = Vec::with_capacity(2);
        let mut cops = Vec::with_capacity(2);
        let mut loads = Vec::with_capacity(2);
        for f in 0..2 {
            let (_, phase) = gait.phase(f, t);
            let share = gait.load_share(f, t);
            let sensors = &chain.feet()[f].sensors;
            match gait.front_fraction(f, t) {
                Some(phi) => {
                    let total = spec.preload + (weight - 2.0 * spec.preload) * share;
                    let front = total * phi / 2.0;
                    let rear = total * (1.0 - phi) / 2.0;
                    forces.push([front, front, rear, rear]);
                    let heel = (sensors[2] + sensors[3]) / 2.0;
                    let toe = (sensors[0] + sensors[1]) / 2.0;
                    cops.push(Some(heel * (1.0 - phi) + toe * phi));
                }
                None => {
                    forces.push([0.0; 4]);
                    cops.push(None);
                }
            }
            contacts.push(phase.in_contact());
            flat.push(matches!(phase, Phase::Flat(_)));
            loads.push(share);
        }
        samples.push(TruthSample { t, imus, joints: grid[g].joints.clone(), forces, contacts, flat, cops, loads });
    }
    Ok(GroundTruth { spec: spec.clone(), samples, steps: gait.steps(spec.duration) })
}

/// Deformation rotation vector per deformation frame, world frame. Each leg
/// bends about the walking direction at the hip and about the lateral axis
/// at the ankle, by its load times a half sine over the contact interval, so
/// the bend keeps changing while the foot is flat.
fn deformation_axes(gait: &Gait, t: f64, amplitude: f64, loads: &[f64; 2]) -> [[Vector3<f64>; 2]; 2] {
    let heading = gait.pelvis_heading(t);
    let forward = Vector3::new(heading.cos(), heading.sin(), 0.0);
    let lateral = Vector3::new(-heading.sin(), heading.cos(), 0.0);
    [0, 1].map(|f| {
        let shape = gait.stance_progress(f, t).map_or(0.0, |s| (PI * s).sin());
        let a = amplitude * loads[f] * shape;
        [forward * (gait.foot_side(f) * a), lateral * a]
    })
}
