use nalgebra::{Unit, Vector3};

use crate::manifold::UnitVector;

/// Complementary tilt filter for IMUs without an onboard tilt output.
///
/// Propagates with the gyro and pulls toward the accelerometer direction,
/// which at rest points along the body-frame up vector. The gain follows
/// `1/(n+1)` after `n` accelerometer readings until it reaches its final
/// value, so the first updates average the accelerometer.
#[derive(Clone, Debug)]
pub struct ComplementaryTilt {
    tilt: UnitVector,
    gain: f64,
    updates: u64,
}

impl ComplementaryTilt {
    /// Per-update gain; a 2 s time constant at 1 kHz.
    pub const DEFAULT_GAIN: f64 = 5e-4;

    pub fn new(initial: UnitVector) -> Self {
        Self::with_gain(initial, Self::DEFAULT_GAIN)
    }

    pub fn with_gain(initial: UnitVector, gain: f64) -> Self {
        ComplementaryTilt { tilt: initial, gain, updates: 0 }
    }

    pub fn tilt(&self) -> UnitVector {
        self.tilt
    }

    pub fn update(&mut self, gyro: &Vector3<f64>, accel: &Vector3<f64>, dt: f64) -> UnitVector {
        let t = self.tilt.into_inner();
        let mut next = t + t.cross(gyro) * dt;
        let n = accel.norm();
        if n > 1e-9 {
            self.updates += 1;
            let gain = self.gain.max(1.0 / (self.updates + 1) as f64);
            next += (accel / n - t) * gain;
        }
        if next.norm() > 1e-12 {
            self.tilt = Unit::new_normalize(next);
        }
        self.tilt
    }
}
