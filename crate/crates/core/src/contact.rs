//! Foot contact detection and center of pressure from four force sensors.
//!
//! Sensors are ordered front-left, front-right, rear-left, rear-right, so
//! the diagonal pairs are (0, 3) and (1, 2).

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::robot::{KinematicChain, Pose};

pub type FootForces = [f64; 4];

const DIAGONALS: [(usize, usize); 2] = [(0, 3), (1, 2)];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContactMode {
    /// In contact as soon as one sensor exceeds the threshold.
    AnySensor,
    /// In contact only when both sensors of a diagonal exceed the threshold,
    /// which indicates a flat foot.
    FlatOnly,
}

pub fn detect_contact(forces: &FootForces, mode: ContactMode, threshold: f64) -> bool {
    match mode {
        ContactMode::AnySensor => forces.iter().any(|&f| f > threshold),
        ContactMode::FlatOnly => DIAGONALS.iter().any(|&(a, b)| forces[a] > threshold && forces[b] > threshold),
    }
}

/// Force-weighted mean of the sensor positions. Negative readings are
/// treated as zero.
pub fn center_of_pressure(forces: &FootForces, sensors: &[Vector3<f64>; 4]) -> Result<Vector3<f64>> {
    let total: f64 = forces.iter().map(|f| f.max(0.0)).sum();
    if !(total > 1e-9) {
        return Err(Error::NoLoad);
    }
    let weighted = forces.iter().zip(sensors).fold(Vector3::zeros(), |acc, (f, s)| acc + s * f.max(0.0));
    Ok(weighted / total)
}

/// Position of the foot IMU relative to the center of pressure, in the IMU
/// frame. `cop` is in the foot-link frame.
pub fn lever_arm(chain: &KinematicChain, foot: usize, cop: &Vector3<f64>) -> Result<Vector3<f64>> {
    let foot = chain.feet().get(foot).ok_or_else(|| Error::UnknownLink(format!("foot #{foot}")))?;
    Ok(mount_lever_arm(&chain.imus()[foot.imu].mount, cop))
}

/// As [`lever_arm`], for an IMU mounted on the foot link by `mount`.
pub fn mount_lever_arm(mount: &Pose, cop: &Vector3<f64>) -> Vector3<f64> {
    mount.rotation.inverse() * (mount.translation - cop)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContactThresholds {
    /// Force (N) above which contact starts.
    pub on: f64,
    /// Force (N) below which contact ends.
    pub off: f64,
    /// Minimum time (s) a state is held before it may change.
    pub min_dwell: f64,
}

impl Default for ContactThresholds {
    fn default() -> Self {
        ContactThresholds { on: 25.0, off: 15.0, min_dwell: 0.01 }
    }
}

/// Contact state machine with hysteresis and a minimum dwell time.
#[derive(Clone, Debug)]
pub struct ContactDetector {
    mode: ContactMode,
    thresholds: ContactThresholds,
    in_contact: bool,
    last_change: Option<f64>,
}

impl ContactDetector {
    pub fn new(mode: ContactMode, thresholds: ContactThresholds) -> Self {
        ContactDetector { mode, thresholds, in_contact: false, last_change: None }
    }

    pub fn in_contact(&self) -> bool {
        self.in_contact
    }

    pub fn update(&mut self, t: f64, forces: &FootForces) -> bool {
        let raw = if self.in_contact {
            detect_contact(forces, self.mode, self.thresholds.off)
        } else {
            detect_contact(forces, self.mode, self.thresholds.on)
        };
        if raw != self.in_contact {
            let held = self.last_change.map_or(f64::INFINITY, |t0| t - t0);
            // Small slack so a dwell of exactly N samples is not lost to rounding.
            if held >= self.thresholds.min_dwell - 1e-9 {
                self.in_contact = raw;
                self.last_change = Some(t);
            }
        }
        self.in_contact
    }
}
