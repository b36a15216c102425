//! Noisy sensor readings from ground truth.

use nalgebra::{Cholesky, Vector2, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::GroundTruth;
use crate::error::{Error, Result};
use crate::estimator::correct::tilt_basis;
use crate::estimator::{ImuSample, NoiseConfig, SensorFrame};
use crate::manifold::{oplus_s2_with, tilt_of};

struct Gauss(ChaCha8Rng);

impl Gauss {
    fn scalar(&mut self) -> f64 {
        StandardNormal.sample(&mut self.0)
    }

    fn vec3(&mut self) -> Vector3<f64> {
        Vector3::new(self.scalar(), self.scalar(), self.scalar())
    }
}

/// Sensor frames for every truth sample. IMU white noise uses the discrete
/// standard deviation `density / √Δt`; biases start at zero and random-walk.
/// Tilts, encoders and forces get independent Gaussian noise, and forces are
/// clipped at zero. Tilt noise is drawn in the tangent basis of the world x
/// and y axes, the basis the filter uses.
pub fn synthesize_sensors(truth: &GroundTruth, noise: &NoiseConfig, seed: u64) -> Result<Vec<SensorFrame>> {
    let dt = truth.dt();
    let mut rng = Gauss(ChaCha8Rng::seed_from_u64(seed));
    let imu = &noise.imu;
    let (gyro_std, accel_std) = (imu.gyro / dt.sqrt(), imu.accel / dt.sqrt());
    let (gyro_walk, accel_walk) = (imu.gyro_bias_walk * dt.sqrt(), imu.accel_bias_walk * dt.sqrt());
    let tilt = noise.tilt_matrix();
    let tilt_chol = if tilt.norm() == 0.0 {
        None
    } else {
        Some(
            Cholesky::new(tilt)
                .ok_or_else(|| Error::Config("tilt covariance is not positive definite".into()))?
                .l(),
        )
    };
    let n_imus = truth.samples.first().map_or(0, |s| s.imus.len());
    let mut gyro_bias = vec![Vector3::zeros(); n_imus];
    let mut accel_bias = vec![Vector3::zeros(); n_imus];
    let mut frames = Vec::with_capacity(truth.samples.len());
    for s in &truth.samples {
        let mut imus = Vec::with_capacity(n_imus);
        let mut tilts = Vec::with_capacity(n_imus);
        for (i, m) in s.imus.iter().enumerate() {
            imus.push(ImuSample {
                gyro: m.omega + gyro_bias[i] + rng.vec3() * gyro_std,
                accel: m.specific_force + accel_bias[i] + rng.vec3() * accel_std,
            });
            gyro_bias[i] += rng.vec3() * gyro_walk;
            accel_bias[i] += rng.vec3() * accel_walk;
            let t = tilt_of(&m.pose.rotation);
            tilts.push(match &tilt_chol {
                Some(l) => {
                    let e = l * Vector2::new(rng.scalar(), rng.scalar());
                    oplus_s2_with(&t, &tilt_basis(&m.pose.rotation), &e)
                }
                None => t,
            });
        }
        let joints = s.joints.angles.iter().map(|a| a + rng.scalar() * noise.encoder).collect();
        let forces = s
            .forces
            .iter()
            .map(|f| f.map(|x| (x + rng.scalar() * noise.force).max(0.0)))
            .collect();
        frames.push(SensorFrame { t: s.t, imu: imus, joints, forces, tilts: Some(tilts) });
    }
    Ok(frames)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimator::ImuNoise;
    use crate::robot::default_biped;
    use crate::sim::{generate_gait, GaitSpec};

    fn quiet() -> NoiseConfig {
        NoiseConfig {
            imu: ImuNoise { gyro: 0.0, accel: 0.0, gyro_bias_walk: 0.0, accel_bias_walk: 0.0, slip: 0.0 },
            tilt_covariance: [[0.0; 2]; 2],
            encoder: 0.0,
            deformation: 0.0,
            force: 0.0,
            mounting: 0.0,
        }
    }

    #[test]
    fn zero_noise_reproduces_truth() {
        let truth = generate_gait(&GaitSpec::straight(0.15, 1.0), &default_biped()).unwrap();
        let frames = synthesize_sensors(&truth, &quiet(), 3).unwrap();
        for (f, s) in frames.iter().zip(&truth.samples) {
            assert_eq!(f.t, s.t);
            assert_eq!(f.joints, s.joints.angles);
            assert_eq!(f.forces, s.forces);
            for (i, m) in s.imus.iter().enumerate() {
                assert_eq!(f.imu[i].gyro, m.omega);
                assert_eq!(f.imu[i].accel, m.specific_force);
                assert_eq!(f.tilts.as_ref().unwrap()[i], tilt_of(&m.pose.rotation));
            }
        }
    }

    #[test]
    fn standing_accelerometer_reads_gravity() {
        let truth = generate_gait(&GaitSpec::standing(1.0), &default_biped()).unwrap();
        let frames = synthesize_sensors(&truth, &quiet(), 0).unwrap();
        for f in &frames {
            assert!((f.imu[0].accel - Vector3::new(0.0, 0.0, 9.81)).norm() < 1e-6);
            assert!(f.imu[0].gyro.norm() < 1e-9);
        }
    }

    #[test]
    fn seeded_noise_is_deterministic_with_expected_spread() {
        let truth = generate_gait(&GaitSpec::standing(2.0), &default_biped()).unwrap();
        let noise = NoiseConfig::default();
        let a = synthesize_sensors(&truth, &noise, 11).unwrap();
        let b = synthesize_sensors(&truth, &noise, 11).unwrap();
        let c = synthesize_sensors(&truth, &noise, 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let dt = truth.dt();
        let n = a.len() as f64;
        let var = a.iter().map(|f| f.imu[0].gyro.x.powi(2)).sum::<f64>() / n;
        let expected = noise.imu.gyro.powi(2) / dt;
        assert!((var / expected - 1.0).abs() < 0.1, "{var} vs {expected}");
        assert!(a.iter().all(|f| f.forces.iter().flatten().all(|&x| x >= 0.0)));
    }
}
