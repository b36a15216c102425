//! Single-IMU comparison filter: the base IMU with the inertial model plus
//! one constant pose per flat stance foot, corrected with the kinematic pose
//! of each stance foot relative to the base.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::contact::{ContactDetector, ContactMode, ContactThresholds};
use crate::error::{Error, Result};
use crate::estimator::correct::relpose_measurement;
use crate::estimator::predict::predict_floating;
use crate::estimator::{
    kinematic_pairs, rotation_from_up, ImuSample, InitialCovariance, InitialState, LinkState, NoiseConfig,
    SensorFrame, LINK_DIM, P, THETA,
};
use crate::filter::{correct, predict_covariance, CorrectionOutcome, ErrorState, GaussianBelief};
use crate::manifold::{hat, keep_orthonormal, oplus_so3};
use crate::robot::{estimate_deformations, JointState, KinematicChain, Pose};

const FOOTHOLD_DIM: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KinematicVariant {
    /// Encoders only.
    Rigid,
    /// Encoders plus deformations estimated from the IMU tilts.
    Extended,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineConfig {
    pub noise: NoiseConfig,
    pub contact: ContactThresholds,
    pub initial_covariance: InitialCovariance,
    /// Random walk of the stored foot poses, (m² or rad²)/s.
    pub foothold_noise: f64,
    pub variant: KinematicVariant,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            noise: NoiseConfig::default(),
            contact: ContactThresholds::default(),
            initial_covariance: InitialCovariance::default(),
            foothold_noise: 1e-6,
            variant: KinematicVariant::Rigid,
        }
    }
}

/// Stored pose of the foot IMU of a flat stance foot.
#[derive(Clone, Debug, PartialEq)]
pub struct Foothold {
    pub foot: usize,
    pub pose: Pose,
}

/// Base link followed by the footholds; tangent `[δx_b(15), (δθ_f, δp_f)…]`.
#[derive(Clone, Debug, PartialEq)]
pub struct BaselineState {
    pub base: LinkState,
    pub footholds: Vec<Foothold>,
}

impl BaselineState {
    fn offset(k: usize) -> usize {
        LINK_DIM + FOOTHOLD_DIM * k
    }
}

impl ErrorState for BaselineState {
    fn tangent_dim(&self) -> usize {
        Self::offset(self.footholds.len())
    }

    fn inject(&mut self, delta: &DVector<f64>) {
        let d = delta.as_slice();
        self.base = self.base.oplus(&d[..LINK_DIM]);
        for (k, f) in self.footholds.iter_mut().enumerate() {
            let o = Self::offset(k);
            f.pose.rotation = keep_orthonormal(oplus_so3(&f.pose.rotation, &Vector3::from_column_slice(&d[o..o + 3])));
            f.pose.translation += Vector3::from_column_slice(&d[o + 3..o + 6]);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaselineReport {
    pub t: f64,
    pub contacts: Vec<bool>,
    pub correction: Option<CorrectionOutcome>,
    /// Feet whose foothold was created this tick.
    pub created: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct BaselineFilter {
    chain: KinematicChain,
    config: BaselineConfig,
    base_imu: usize,
    init: Option<InitialState>,
    belief: Option<GaussianBelief<BaselineState>>,
    detectors: Vec<ContactDetector>,
    held: Option<(f64, ImuSample)>,
    deformations: JointState,
}

impl BaselineFilter {
    /// `init` uses the same policies as the multi-IMU filter; with
    /// `InitialState::Links` only the base entry is read.
    pub fn new(chain: KinematicChain, config: BaselineConfig, init: InitialState) -> Result<Self> {
        let base_imu = chain.base_imu().ok_or_else(|| Error::InvalidChain("the baseline needs a base IMU".into()))?;
        if let InitialState::Links(links) = &init {
            if links.len() != chain.n_imus() {
                return Err(Error::Config(format!("{} initial links for {} IMUs", links.len(), chain.n_imus())));
            }
        }
        let detectors =
            chain.feet().iter().map(|_| ContactDetector::new(ContactMode::FlatOnly, config.contact)).collect();
        let deformations = chain.zero_state();
        Ok(BaselineFilter { chain, config, base_imu, init: Some(init), belief: None, detectors, held: None, deformations })
    }

    pub fn belief(&self) -> Option<&GaussianBelief<BaselineState>> {
        self.belief.as_ref()
    }

    pub fn base(&self) -> Option<&LinkState> {
        self.belief.as_ref().map(|b| &b.mean.base)
    }

    pub fn base_imu(&self) -> usize {
        self.base_imu
    }

    pub fn step(&mut self, frame: &SensorFrame) -> Result<BaselineReport> {
        frame.check(&self.chain)?;
        let dt = match &self.held {
            Some((t, _)) if frame.t <= *t => return Err(Error::NonMonotoneTime { previous: *t, current: frame.t }),
            Some((t, _)) => Some(frame.t - t),
            None => None,
        };
        let contacts: Vec<bool> =
            self.detectors.iter_mut().zip(&frame.forces).map(|(d, f)| d.update(frame.t, f)).collect();
        let q = self.kinematic_state(frame)?;

        let mut report = BaselineReport { t: frame.t, contacts: contacts.clone(), correction: None, created: Vec::new() };
        match dt {
            None => self.initialize()?,
            Some(dt) => {
                self.predict(dt)?;
                self.drop_lifted(&contacts);
                report.correction = self.correct(&q)?;
            }
        }
        report.created = self.create_footholds(&contacts, &q)?;
        self.held = Some((frame.t, frame.imu[self.base_imu]));
        Ok(report)
    }

    fn kinematic_state(&mut self, frame: &SensorFrame) -> Result<JointState> {
        let prior = JointState { angles: frame.joints.clone(), deformations: self.deformations.deformations.clone() };
        match self.config.variant {
            KinematicVariant::Rigid => Ok(prior.without_deformations()),
            KinematicVariant::Extended => {
                let tilts = frame
                    .tilts
                    .as_ref()
                    .ok_or_else(|| Error::Config("the extended kinematic model needs tilt readings".into()))?;
                let load = |f: &[f64; 4]| f.iter().map(|x| x.max(0.0)).sum::<f64>();
                let stance = (0..frame.forces.len())
                    .max_by(|&a, &b| load(&frame.forces[a]).total_cmp(&load(&frame.forces[b])))
                    .map(|k| self.chain.feet()[k].imu)
                    .ok_or(Error::NoLoad)?;
                let (q, _) = estimate_deformations(&self.chain, &prior, tilts, stance)?;
                self.deformations = q.clone();
                Ok(q)
            }
        }
    }

    fn initialize(&mut self) -> Result<()> {
        let base = match self.init.take().expect("initialized once") {
            InitialState::Links(links) => links[self.base_imu].clone(),
            InitialState::Standing { base_accel, base_position } => {
                LinkState::at_rest(rotation_from_up(&base_accel)?, base_position)
            }
        };
        let covariance = self.config.initial_covariance.link_block();
        self.belief = Some(GaussianBelief::new(BaselineState { base, footholds: Vec::new() }, covariance)?);
        Ok(())
    }

    fn predict(&mut self, dt: f64) -> Result<()> {
        let (_, imu) = self.held.as_ref().expect("held after the first frame");
        let belief = self.belief.as_mut().expect("initialized");
        let pred = predict_floating(&belief.mean.base, imu, &self.config.noise.imu, dt)?;
        let n = belief.covariance.nrows();
        let mut a = DMatrix::identity(n, n);
        let mut q = DMatrix::zeros(n, n);
        a.view_mut((0, 0), (LINK_DIM, LINK_DIM)).copy_from(&pred.a);
        q.view_mut((0, 0), (LINK_DIM, LINK_DIM)).copy_from(&pred.q);
        for k in LINK_DIM..n {
            q[(k, k)] = self.config.foothold_noise * dt;
        }
        belief.covariance = predict_covariance(&belief.covariance, &a, &q);
        belief.mean.base = pred.state;
        Ok(())
    }

    /// Marginalizes the footholds of feet no longer flat on the ground.
    fn drop_lifted(&mut self, contacts: &[bool]) {
        let belief = self.belief.as_mut().expect("initialized");
        let keep: Vec<bool> = belief.mean.footholds.iter().map(|f| contacts[f.foot]).collect();
        if keep.iter().all(|&k| k) {
            return;
        }
        let mut idx: Vec<usize> = (0..LINK_DIM).collect();
        for (k, &kept) in keep.iter().enumerate() {
            if kept {
                idx.extend(BaselineState::offset(k)..BaselineState::offset(k) + FOOTHOLD_DIM);
            }
        }
        belief.covariance = belief.covariance.select_rows(&idx).select_columns(&idx);
        let mut it = keep.iter();
        belief.mean.footholds.retain(|_| *it.next().expect("one flag per foothold"));
    }

    fn correct(&mut self, q: &JointState) -> Result<Option<CorrectionOutcome>> {
        let belief = self.belief.as_mut().expect("initialized");
        if belief.mean.footholds.is_empty() {
            return Ok(None);
        }
        // Relative-pose machinery on a two-link layout per pair: the base is
        // link 0, each foothold is a pseudo link with only (δθ, δp) columns.
        let pairs: Vec<(usize, usize)> = belief
            .mean
            .footholds
            .iter()
            .map(|f| (self.base_imu, self.chain.feet()[f.foot].imu))
            .collect();
        let meas = kinematic_pairs(&self.chain, q, &pairs, false)?;
        let noise = self.config.noise.joint_covariance(self.chain.n_joints(), 0, false);
        let n = belief.covariance.nrows();
        let m = 6 * pairs.len();
        let mut c = DMatrix::zeros(m, n);
        let mut d = DMatrix::zeros(m, noise.nrows());
        let mut innovation = DVector::zeros(m);
        for (k, (pair, f)) in meas.into_iter().zip(&belief.mean.footholds).enumerate() {
            let foot = LinkState::at_rest(f.pose.rotation, f.pose.translation);
            let links = [belief.mean.base.clone(), foot];
            let single = crate::estimator::correct::PairMeasurement { i: 0, j: 1, ..pair };
            let lin = relpose_measurement(&links, std::slice::from_ref(&single), &noise)?;
            let o = BaselineState::offset(k);
            for r in 0..6 {
                for col in 0..LINK_DIM {
                    c[(6 * k + r, col)] = lin.c[(r, col)];
                }
                for col in 0..3 {
                    c[(6 * k + r, o + col)] = lin.c[(r, LINK_DIM + THETA + col)];
                    c[(6 * k + r, o + 3 + col)] = lin.c[(r, LINK_DIM + P + col)];
                }
            }
            d.rows_mut(6 * k, 6).copy_from(&lin.d);
            innovation.rows_mut(6 * k, 6).copy_from(&lin.innovation);
        }
        let lin = crate::filter::LinearizedMeasurement { c, d, r: noise, innovation }
            .with_row_noise(self.config.noise.mounting.powi(2));
        Ok(Some(correct(belief, &lin)?))
    }

    /// Adds a foothold for every flat foot without one, placed by the base
    /// estimate and the kinematics, with covariance propagated from both.
    fn create_footholds(&mut self, contacts: &[bool], q: &JointState) -> Result<Vec<usize>> {
        let belief = self.belief.as_mut().expect("initialized");
        let new: Vec<usize> = (0..contacts.len())
            .filter(|&f| contacts[f] && !belief.mean.footholds.iter().any(|h| h.foot == f))
            .collect();
        if new.is_empty() {
            return Ok(new);
        }
        let pairs: Vec<(usize, usize)> = new.iter().map(|&f| (self.base_imu, self.chain.feet()[f].imu)).collect();
        let meas = kinematic_pairs(&self.chain, q, &pairs, false)?;
        let noise = self.config.noise.joint_covariance(self.chain.n_joints(), 0, false);
        for (foot, kin) in new.iter().zip(meas) {
            let base = &belief.mean.base;
            let n = belief.covariance.nrows();
            // δθ_f = R_kinᵀ δθ_b + J^R ν ; δp_f = δp_b − R_b hat(p_kin) δθ_b + R_b J^p ν
            let mut jx = DMatrix::zeros(FOOTHOLD_DIM, n);
            let r_kin_t: Matrix3<f64> = kin.measured.rotation.inverse().into_inner();
            jx.fixed_view_mut::<3, 3>(0, THETA).copy_from(&r_kin_t);
            jx.fixed_view_mut::<3, 3>(3, THETA).copy_from(&(-(base.rotation * hat(&kin.measured.translation))));
            jx.fixed_view_mut::<3, 3>(3, P).copy_from(&Matrix3::identity());
            let mut jn = DMatrix::zeros(FOOTHOLD_DIM, noise.nrows());
            jn.rows_mut(0, 3).copy_from(&kin.jr);
            jn.rows_mut(3, 3).copy_from(&(base.rotation.matrix() * &kin.jp));

            let pjt = &belief.covariance * jx.transpose();
            let mut grown = DMatrix::zeros(n + FOOTHOLD_DIM, n + FOOTHOLD_DIM);
            grown.view_mut((0, 0), (n, n)).copy_from(&belief.covariance);
            grown.view_mut((0, n), (n, FOOTHOLD_DIM)).copy_from(&pjt);
            grown.view_mut((n, 0), (FOOTHOLD_DIM, n)).copy_from(&pjt.transpose());
            let mounting = DMatrix::<f64>::identity(FOOTHOLD_DIM, FOOTHOLD_DIM) * self.config.noise.mounting.powi(2);
            let block = &jx * &pjt + &jn * &noise * jn.transpose() + mounting;
            grown.view_mut((n, n), (FOOTHOLD_DIM, FOOTHOLD_DIM)).copy_from(&block);
            crate::filter::symmetrize(&mut grown);

            let pose = base.pose().compose(&kin.measured);
            belief.mean.footholds.push(Foothold { foot: *foot, pose });
            belief.covariance = grown;
        }
        Ok(new)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimator::predict::predict_floating;
    use crate::estimator::{ImuNoise, SensorFrame};
    use crate::robot::default_biped;

    fn standing_frame(chain: &KinematicChain, t: f64, q: &[f64]) -> SensorFrame {
        SensorFrame {
            t,
            imu: vec![ImuSample { gyro: Vector3::zeros(), accel: Vector3::new(0.0, 0.0, 9.81) }; chain.n_imus()],
            joints: q.to_vec(),
            forces: vec![[200.0; 4]; 2],
            tilts: Some(vec![Vector3::z_axis(); chain.n_imus()]),
        }
    }

    fn bent() -> Vec<f64> {
        let leg = [0.0, 0.0, -0.3, 0.6, -0.3, 0.0];
        leg.iter().chain(leg.iter()).copied().collect()
    }

    fn filter(variant: KinematicVariant) -> BaselineFilter {
        let chain = default_biped();
        let init = InitialState::Standing { base_accel: Vector3::new(0.0, 0.0, 9.81), base_position: Vector3::new(0.0, 0.0, 0.9) };
        BaselineFilter::new(chain, BaselineConfig { variant, ..BaselineConfig::default() }, init).unwrap()
    }

    #[test]
    fn standing_creates_consistent_footholds() {
        let mut f = filter(KinematicVariant::Rigid);
        let chain = default_biped();
        let r = f.step(&standing_frame(&chain, 0.0, &bent())).unwrap();
        assert_eq!(r.created, vec![0, 1]);
        let b = f.belief().unwrap();
        assert_eq!(b.covariance.nrows(), LINK_DIM + 12);
        let kin = chain.forward_kinematics(&chain.rigid_state(bent()), 0, 3).unwrap();
        let expected = b.mean.base.pose().compose(&kin);
        assert!((b.mean.footholds[0].pose.translation - expected.translation).norm() < 1e-15);
        // Consistent state: zero innovation, state unchanged by the correction.
        let before = f.belief().unwrap().mean.clone();
        for k in 1..100 {
            let r = f.step(&standing_frame(&chain, k as f64 * 1e-3, &bent())).unwrap();
            assert!(r.correction.unwrap().applied());
        }
        let after = &f.belief().unwrap().mean;
        assert!((after.base.position - before.base.position).norm() < 1e-9);
        assert!((after.footholds[1].pose.translation - before.footholds[1].pose.translation).norm() < 1e-9);
    }

    #[test]
    fn foothold_covariance_grows_with_process_noise() {
        let mut f = filter(KinematicVariant::Rigid);
        let chain = default_biped();
        f.step(&standing_frame(&chain, 0.0, &bent())).unwrap();
        let o = BaselineState::offset(0);
        let p0 = f.belief().unwrap().covariance[(o + 3, o + 3)];
        f.predict(0.01).unwrap();
        let p1 = f.belief().unwrap().covariance[(o + 3, o + 3)];
        assert!((p1 - p0 - 1e-6 * 0.01).abs() < 1e-18);
    }

    #[test]
    fn base_prediction_matches_multi_imu_model() {
        let mut f = filter(KinematicVariant::Rigid);
        let chain = default_biped();
        f.step(&standing_frame(&chain, 0.0, &bent())).unwrap();
        let before = f.belief().unwrap().clone();
        let imu = f.held.unwrap().1;
        f.predict(1e-3).unwrap();
        let pred = predict_floating(&before.mean.base, &imu, &ImuNoise::default(), 1e-3).unwrap();
        let after = f.belief().unwrap();
        assert_eq!(after.mean.base, pred.state);
        let pb = before.covariance.view((0, 0), (LINK_DIM, LINK_DIM)).into_owned();
        let expected = &pred.a * pb * pred.a.transpose() + &pred.q;
        assert!((after.covariance.view((0, 0), (LINK_DIM, LINK_DIM)) - expected).amax() < 1e-15);
    }

    #[test]
    fn base_offset_is_pulled_back() {
        let mut f = filter(KinematicVariant::Rigid);
        let chain = default_biped();
        f.step(&standing_frame(&chain, 0.0, &bent())).unwrap();
        let truth = f.base().unwrap().position;
        f.belief.as_mut().unwrap().mean.base.position.x += 0.01;
        f.step(&standing_frame(&chain, 1e-3, &bent())).unwrap();
        let err = (f.base().unwrap().position - truth).norm();
        assert!(err < 0.01, "{err}");
    }

    #[test]
    fn lifted_feet_are_marginalized() {
        let mut f = filter(KinematicVariant::Rigid);
        let chain = default_biped();
        f.step(&standing_frame(&chain, 0.0, &bent())).unwrap();
        let mut frame = standing_frame(&chain, 0.1, &bent());
        frame.forces[0] = [0.0; 4];
        let r = f.step(&frame).unwrap();
        assert_eq!(r.contacts, vec![false, true]);
        let b = f.belief().unwrap();
        assert_eq!(b.mean.footholds.len(), 1);
        assert_eq!(b.mean.footholds[0].foot, 1);
        assert_eq!(b.covariance.nrows(), LINK_DIM + 6);
        // Heel-only loading does not count as flat contact.
        let mut frame = standing_frame(&chain, 0.2, &bent());
        frame.forces[0] = [0.0, 0.0, 300.0, 300.0];
        assert_eq!(f.step(&frame).unwrap().contacts, vec![false, true]);
    }

    #[test]
    fn variants_agree_without_deformation() {
        let chain = default_biped();
        let mut a = filter(KinematicVariant::Rigid);
        let mut b = filter(KinematicVariant::Extended);
        for k in 0..50 {
            let mut frame = standing_frame(&chain, k as f64 * 1e-3, &bent());
            frame.imu[0].accel.x = 0.01 * (k as f64).sin();
            let tilts = chain.imu_poses(&chain.rigid_state(bent())).unwrap();
            frame.tilts = Some(tilts.iter().map(|p| crate::manifold::tilt_of(&p.rotation)).collect());
            a.step(&frame).unwrap();
            b.step(&frame).unwrap();
        }
        let (x, y) = (a.base().unwrap(), b.base().unwrap());
        assert!((x.position - y.position).norm() < 1e-12);
    }
}
