//! Kinematic chain with IMU mounts and deformation frames.
//!
//! A chain is a tree of links rooted at the floating base. Every non-root
//! link hangs off its parent through a fixed offset, an optional deformation
//! (a rotation about a known anchor point) and a revolute joint:
//!
//! ```text
//! T(parent → link) = Offset · [Trans(a) · D · Trans(−a)] · Rot(axis, q)
//! ```
//!
//! The bodies the filter tracks are IMU frames, so every kinematic query is
//! indexed by IMU.

pub mod biped;
mod deformation;
mod schema;
mod tilt;

pub use biped::{default_biped, default_biped_description};
pub use deformation::{estimate_deformations, DeformationReport, DeformationStatus};
pub use schema::{
    DeformationDesc, FootDesc, ImuDesc, JointDesc, LinkDesc, RobotDescription, SCHEMA_VERSION,
};
pub use tilt::ComplementaryTilt;


use nalgebra::{DMatrix, Vector3};

use crate::error::{Error, Result};
use crate::manifold::{oplus_so3, so3_exp, so3_log, Rotation};

/// Rigid transform; maps child-frame points into the parent frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub rotation: Rotation,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Pose { rotation: Rotation::identity(), translation: Vector3::zeros() }
    }

    pub fn new(rotation: Rotation, translation: Vector3<f64>) -> Self {
        Pose { rotation, translation }
    }

    #[inline]
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.translation + self.rotation * other.translation,
        }
    }

    #[inline]
    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.inverse();
        Pose { rotation: rt, translation: -(rt * self.translation) }
    }

    #[inline]
    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Pose of `other` expressed in `self`: `(Rᵢᵀ Rⱼ, Rᵢᵀ(pⱼ − pᵢ))`.
    #[inline]
    pub fn relative_to(&self, other: &Pose) -> Pose {
        let rt = self.rotation.inverse();
        Pose {
            rotation: rt * other.rotation,
            translation: rt * (other.translation - self.translation),
        }
    }
}

/// Joint angles plus one rotation per deformation frame.
#[derive(Clone, Debug, PartialEq)]
pub struct JointState {
    pub angles: Vec<f64>,
    pub deformations: Vec<Rotation>,
}

impl JointState {
    pub fn rigid(angles: Vec<f64>, n_deformations: usize) -> Self {
        JointState { angles, deformations: vec![Rotation::identity(); n_deformations] }
    }

    /// Dimension of the `⊕` parametrization: angles, then 3 per deformation.
    pub fn tangent_dim(&self) -> usize {
        self.angles.len() + 3 * self.deformations.len()
    }

    /// Angles are perturbed additively, deformations through SO(3) `⊕`.
    pub fn oplus(&self, delta: &[f64]) -> JointState {
        let n = self.angles.len();
        let angles = self.angles.iter().zip(delta).map(|(a, d)| a + d).collect();
        let deformations = self
            .deformations
            .iter()
            .enumerate()
            .map(|(k, r)| {
                let d = Vector3::new(delta[n + 3 * k], delta[n + 3 * k + 1], delta[n + 3 * k + 2]);
                oplus_so3(r, &d)
            })
            .collect();
        JointState { angles, deformations }
    }

    pub fn without_deformations(&self) -> JointState {
        JointState::rigid(self.angles.clone(), self.deformations.len())
    }
}

#[derive(Clone, Debug)]
struct Link {
    name: String,
    parent: Option<usize>,
    offset: Pose,
    joint: Option<(usize, Vector3<f64>)>,
    deformation: Option<(usize, Vector3<f64>)>,
}

#[derive(Clone, Debug)]
pub struct Imu {
    pub name: String,
    pub link: usize,
    pub mount: Pose,
}

#[derive(Clone, Debug)]
pub struct Foot {
    pub name: String,
    pub link: usize,
    pub imu: usize,
    pub sole: Vec<Vector3<f64>>,
    /// Front-left, front-right, rear-left, rear-right; foot-link frame.
    pub sensors: [Vector3<f64>; 4],
}

#[derive(Clone, Debug)]
pub struct Deformation {
    pub name: String,
    pub link: usize,
    pub anchor: Vector3<f64>,
}

/// Immutable description of the robot's kinematic tree.
#[derive(Clone, Debug)]
pub struct KinematicChain {
    links: Vec<Link>,
    joint_names: Vec<String>,
    imus: Vec<Imu>,
    feet: Vec<Foot>,
    deformations: Vec<Deformation>,
}

impl KinematicChain {
    pub fn from_description(desc: &RobotDescription) -> Result<Self> {
        desc.build()
    }

    pub fn n_joints(&self) -> usize {
        self.joint_names.len()
    }

    pub fn n_deformations(&self) -> usize {
        self.deformations.len()
    }

    pub fn n_imus(&self) -> usize {
        self.imus.len()
    }

    pub fn q_dim(&self) -> usize {
        self.n_joints() + 3 * self.n_deformations()
    }

    pub fn joint_names(&self) -> &[String] {
        &self.joint_names
    }

    pub fn imus(&self) -> &[Imu] {
        &self.imus
    }

    pub fn feet(&self) -> &[Foot] {
        &self.feet
    }

    pub fn deformations(&self) -> &[Deformation] {
        &self.deformations
    }

    pub fn link_name(&self, link: usize) -> &str {
        &self.links[link].name
    }

    pub fn n_links(&self) -> usize {
        self.links.len()
    }

    pub fn link_index(&self, name: &str) -> Result<usize> {
        self.links
            .iter()
            .position(|l| l.name == name)
            .ok_or_else(|| Error::UnknownLink(name.to_string()))
    }

    pub fn imu_index(&self, name: &str) -> Result<usize> {
        self.imus
            .iter()
            .position(|l| l.name == name)
            .ok_or_else(|| Error::UnknownLink(name.to_string()))
    }

    /// IMU index of the root link's IMU, if the root is instrumented.
    pub fn base_imu(&self) -> Option<usize> {
        self.imus.iter().position(|imu| imu.link == 0)
    }

    /// Foot index whose IMU is `imu`.
    pub fn foot_of_imu(&self, imu: usize) -> Option<usize> {
        self.feet.iter().position(|f| f.imu == imu)
    }

    pub fn rigid_state(&self, angles: Vec<f64>) -> JointState {
        JointState::rigid(angles, self.n_deformations())
    }

    pub fn zero_state(&self) -> JointState {
        self.rigid_state(vec![0.0; self.n_joints()])
    }

    fn check_state(&self, q: &JointState) -> Result<()> {
        if q.angles.len() != self.n_joints() || q.deformations.len() != self.n_deformations() {
            return Err(Error::JointStateMismatch(format!(
                "{} angles / {} deformations for a chain with {} joints / {} deformation frames",
                q.angles.len(),
                q.deformations.len(),
                self.n_joints(),
                self.n_deformations()
            )));
        }
        Ok(())
    }

    /// Transform from a link's parent frame into the link frame.
    fn joint_transform(&self, link: &Link, q: &JointState) -> Pose {
        let mut t = link.offset;
        if let Some((k, anchor)) = link.deformation {
            let d = q.deformations[k];
            let shift = anchor - d * anchor;
            t = t.compose(&Pose::new(d, shift));
        }
        if let Some((j, axis)) = link.joint {
            t = t.compose(&Pose::new(so3_exp(&(axis * q.angles[j])), Vector3::zeros()));
        }
        t
    }

    /// Pose of every link in the root frame.
    pub fn link_poses(&self, q: &JointState) -> Result<Vec<Pose>> {
        self.check_state(q)?;
        Ok(self.link_poses_unchecked(q))
    }

    fn link_poses_unchecked(&self, q: &JointState) -> Vec<Pose> {
        let mut poses: Vec<Pose> = Vec::with_capacity(self.links.len());
        for link in &self.links {
            let pose = match link.parent {
                None => Pose::identity(),
                Some(p) => poses[p].compose(&self.joint_transform(link, q)),
            };
            poses.push(pose);
        }
        poses
    }

    /// Pose of every IMU frame in the root frame.
    pub fn imu_poses(&self, q: &JointState) -> Result<Vec<Pose>> {
        self.check_state(q)?;
        Ok(self.imu_poses_unchecked(q))
    }

    fn imu_poses_unchecked(&self, q: &JointState) -> Vec<Pose> {
        let links = self.link_poses_unchecked(q);
        self.imus.iter().map(|imu| links[imu.link].compose(&imu.mount)).collect()
    }

    /// Orientation of a deformation frame (before its rotation) in the root frame.
    pub fn deformation_frame(&self, k: usize, links: &[Pose]) -> Rotation {
        let link = &self.links[self.deformations[k].link];
        let parent = link.parent.expect("deformation frames sit on non-root links");
        links[parent].rotation * link.offset.rotation
    }

    /// Joints between the root and `link`, ordered from `link` upward.
    pub fn joints_above(&self, link: usize) -> Vec<usize> {
        self.ancestors(link).iter().filter_map(|&l| self.links[l].joint.map(|(j, _)| j)).collect()
    }

    /// Root-frame geometric Jacobian of `link`'s origin for the given link
    /// poses: angular rows then linear rows, one column per joint.
    pub fn geometric_jacobian(&self, poses: &[Pose], link: usize) -> DMatrix<f64> {
        let mut jac = DMatrix::zeros(6, self.n_joints());
        let target = poses[link].translation;
        for l in self.ancestors(link) {
            if let Some((j, axis)) = self.links[l].joint {
                let a = poses[l].rotation * axis;
                let lin = a.cross(&(target - poses[l].translation));
                jac.fixed_view_mut::<3, 1>(0, j).copy_from(&a);
                jac.fixed_view_mut::<3, 1>(3, j).copy_from(&lin);
            }
        }
        jac
    }

    /// `link` and every link above it, ending at the root.
    pub fn ancestors(&self, mut link: usize) -> Vec<usize> {
        let mut out = vec![link];
        while let Some(p) = self.links[link].parent {
            out.push(p);
            link = p;
        }
        out
    }

    /// Relative pose `kin_ij = (Rᵢᵀ Rⱼ, Rᵢᵀ(pⱼ − pᵢ))` between IMU frames.
    pub fn forward_kinematics(&self, q: &JointState, i: usize, j: usize) -> Result<Pose> {
        self.check_imu(i)?;
        self.check_imu(j)?;
        let poses = self.imu_poses(q)?;
        Ok(poses[i].relative_to(&poses[j]))
    }

    fn check_imu(&self, i: usize) -> Result<()> {
        if i >= self.imus.len() {
            return Err(Error::UnknownLink(format!("imu #{i}")));
        }
        Ok(())
    }

    /// Jacobians of the orientation and position parts of `kin_ij` with
    /// respect to `q` in its `⊕` parametrization (central differences).
    pub fn kinematic_jacobians(
        &self,
        q: &JointState,
        i: usize,
        j: usize,
    ) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        self.kinematic_jacobians_with_step(q, i, j, DEFAULT_FD_STEP)
    }

    pub fn kinematic_jacobians_with_step(
        &self,
        q: &JointState,
        i: usize,
        j: usize,
        step: f64,
    ) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let mut all = self.pair_jacobians(q, &[(i, j)], step)?;
        Ok(all.pop().expect("one pair requested"))
    }

    /// Jacobians for many IMU pairs from one set of perturbed evaluations.
    pub fn pair_jacobians(
        &self,
        q: &JointState,
        pairs: &[(usize, usize)],
        step: f64,
    ) -> Result<Vec<(DMatrix<f64>, DMatrix<f64>)>> {
        self.check_state(q)?;
        for &(i, j) in pairs {
            self.check_imu(i)?;
            self.check_imu(j)?;
        }
        let n = q.tangent_dim();
        let base = self.imu_poses_unchecked(q);
        let nominal: Vec<Pose> = pairs.iter().map(|&(i, j)| base[i].relative_to(&base[j])).collect();
        let mut out: Vec<_> =
            pairs.iter().map(|_| (DMatrix::zeros(3, n), DMatrix::zeros(3, n))).collect();
        let mut delta = vec![0.0; n];
        for c in 0..n {
            delta[c] = step;
            let plus = self.imu_poses_unchecked(&q.oplus(&delta));
            delta[c] = -step;
            let minus = self.imu_poses_unchecked(&q.oplus(&delta));
            delta[c] = 0.0;
            for (k, &(i, j)) in pairs.iter().enumerate() {
                let kp = plus[i].relative_to(&plus[j]);
                let km = minus[i].relative_to(&minus[j]);
                let rt = nominal[k].rotation.inverse();
                let dr = (so3_log(&(rt * kp.rotation)).unwrap_or_default()
                    - so3_log(&(rt * km.rotation)).unwrap_or_default())
                    / (2.0 * step);
                let dp = (kp.translation - km.translation) / (2.0 * step);
                out[k].0.set_column(c, &dr);
                out[k].1.set_column(c, &dp);
            }
        }
        Ok(out)
    }
}

/// Central-difference step for kinematic Jacobians.
pub const DEFAULT_FD_STEP: f64 = 1e-6;
