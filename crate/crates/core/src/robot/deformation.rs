use std::collections::VecDeque;

use super::{JointState, KinematicChain};
use crate::error::{Error, Result};
use crate::manifold::{rot_between, Rotation, UnitVector};
use nalgebra::Unit;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DeformationStatus {
    Estimated,
    /// No IMU pair encloses the frame; reset to identity.
    Unobserved,
    /// Several frames share one IMU pair; reset to identity.
    Ambiguous,
    /// Tilts were antipodal in the frame; the previous value was kept.
    KeptPrevious,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeformationReport {
    pub status: Vec<DeformationStatus>,
}

/// Recomputes every deformation rotation from per-IMU tilt measurements.
///
/// Starting at `stance_imu`, the tree is walked IMU to IMU. When exactly
/// one deformation frame separates two consecutive IMUs, its rotation is set
/// to the smallest rotation that makes the tilt predicted through the
/// kinematics agree with the measured one, both expressed in the
/// deformation frame. Rotation about the local gravity direction is
/// unobservable from tilts and is left at zero.
pub fn estimate_deformations(
    chain: &KinematicChain,
    q: &JointState,
    tilts: &[UnitVector],
    stance_imu: usize,
) -> Result<(JointState, DeformationReport)> {
    chain.check_state(q)?;
    chain.check_imu(stance_imu)?;
    if tilts.len() != chain.n_imus() {
        return Err(Error::JointStateMismatch(format!(
            "{} tilts for {} IMUs",
            tilts.len(),
            chain.n_imus()
        )));
    }
    let n_links = chain.links.len();
    let mut children = vec![Vec::new(); n_links];
    for (k, link) in chain.links.iter().enumerate() {
        if let Some(p) = link.parent {
            children[p].push(k);
        }
    }
    let imu_on_link = |l: usize| chain.imus.iter().position(|imu| imu.link == l);

    let mut out = q.clone();
    let mut status = vec![DeformationStatus::Unobserved; chain.n_deformations()];

    // (link, last IMU seen, deformations crossed since that IMU)
    let mut queue = VecDeque::new();
    let mut visited = vec![false; n_links];
    let start = chain.imus[stance_imu].link;
    visited[start] = true;
    queue.push_back((start, stance_imu, Vec::<usize>::new()));
    while let Some((link, last_imu, crossed)) = queue.pop_front() {
        let mut next: Vec<(usize, Option<usize>)> =
            children[link].iter().map(|&c| (c, chain.links[c].deformation.map(|d| d.0))).collect();
        if let Some(p) = chain.links[link].parent {
            next.push((p, chain.links[link].deformation.map(|d| d.0)));
        }
        for (w, def) in next {
            if visited[w] {
                continue;
            }
            visited[w] = true;
            let mut crossed_w = crossed.clone();
            crossed_w.extend(def);
            match imu_on_link(w) {
                Some(imu_w) => {
                    match crossed_w.as_slice() {
                        [] => {}
                        [k] => {
                            let (d, st) = estimate_one(chain, &out, tilts, last_imu, imu_w, *k)?;
                            out.deformations[*k] = d;
                            status[*k] = st;
                        }
                        many => {
                            for &k in many {
                                status[k] = DeformationStatus::Ambiguous;
                            }
                        }
                    }
                    queue.push_back((w, imu_w, Vec::new()));
                }
                None => queue.push_back((w, last_imu, crossed_w)),
            }
        }
    }
    for (k, st) in status.iter().enumerate() {
        if matches!(st, DeformationStatus::Unobserved | DeformationStatus::Ambiguous) {
            out.deformations[k] = Rotation::identity();
        }
    }
    Ok((out, DeformationReport { status }))
}

fn estimate_one(
    chain: &KinematicChain,
    q: &JointState,
    tilts: &[UnitVector],
    a: usize,
    b: usize,
    k: usize,
) -> Result<(Rotation, DeformationStatus)> {
    let mut rigid = q.clone();
    rigid.deformations[k] = Rotation::identity();
    let links = chain.link_poses_unchecked(&rigid);
    let imu_rot = |i: usize| links[chain.imus[i].link].rotation * chain.imus[i].mount.rotation;
    let frame = chain.deformation_frame(k, &links);
    let def_link = chain.deformations[k].link;
    // The IMU below the deformation frame is the one whose link has the
    // deformed link among its ancestors.
    let a_below = chain.ancestors(chain.imus[a].link).contains(&def_link);
    let (below, above) = if a_below { (a, b) } else { (b, a) };
    let to_frame = |i: usize| frame.inverse() * (imu_rot(i) * tilts[i].as_ref());
    let g_below = Unit::new_normalize(to_frame(below));
    let g_above = Unit::new_normalize(to_frame(above));
    match rot_between(&g_below, &g_above) {
        Ok(d) => Ok((d, DeformationStatus::Estimated)),
        Err(Error::Antipodal) => Ok((q.deformations[k], DeformationStatus::KeptPrevious)),
        Err(e) => Err(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifold::{so3_exp, so3_log, tilt_of};
    use crate::robot::default_biped;
    use nalgebra::Vector3;

    fn tilts_for(chain: &KinematicChain, q: &JointState, base: &Rotation) -> Vec<UnitVector> {
        chain.imu_poses(q).unwrap().iter().map(|p| tilt_of(&(base * p.rotation))).collect()
    }

    fn standing() -> JointState {
        let chain = default_biped();
        let mut angles = vec![0.0; chain.n_joints()];
        for leg in [0, 6] {
            angles[leg + 2] = -0.3;
            angles[leg + 3] = 0.6;
            angles[leg + 4] = -0.3;
        }
        chain.rigid_state(angles)
    }

    #[test]
    fn rigid_tilts_give_identity() {
        let chain = default_biped();
        let q = standing();
        let base = so3_exp(&Vector3::new(0.05, -0.02, 0.7));
        let tilts = tilts_for(&chain, &q, &base);
        let (est, report) = estimate_deformations(&chain, &q, &tilts, 3).unwrap();
        assert!(report.status.iter().all(|s| *s == DeformationStatus::Estimated));
        for d in &est.deformations {
            assert!(so3_log(d).unwrap().norm() < 1e-12);
        }
    }

    #[test]
    fn recovers_injected_horizontal_deformation() {
        let chain = default_biped();
        let q0 = standing();
        let base = Rotation::identity();
        // Gravity in the right-ankle deformation frame, computed on the rigid chain.
        let links = chain.link_poses(&q0).unwrap();
        let frame = chain.deformation_frame(3, &links);
        let up = frame.inverse() * Vector3::z();
        let axis = up.cross(&Vector3::x()).normalize();
        let mut truth = q0.clone();
        truth.deformations[3] = so3_exp(&(axis * 0.01));
        let tilts = tilts_for(&chain, &truth, &base);
        for stance in [3, 4] {
            let (est, _) = estimate_deformations(&chain, &q0, &tilts, stance).unwrap();
            let err = so3_log(&(truth.deformations[3].inverse() * est.deformations[3])).unwrap();
            assert!(err.norm() < 1e-9, "stance {stance}: {err}");
            assert!((so3_log(&est.deformations[3]).unwrap().norm() - 0.01).abs() < 1e-6);
        }
    }

    #[test]
    fn rotation_about_gravity_is_unobservable() {
        let chain = default_biped();
        let q0 = standing();
        let links = chain.link_poses(&q0).unwrap();
        let frame = chain.deformation_frame(0, &links);
        let up = frame.inverse() * Vector3::z();
        let mut truth = q0.clone();
        truth.deformations[0] = so3_exp(&(up * 0.02));
        let tilts = tilts_for(&chain, &truth, &Rotation::identity());
        let (est, _) = estimate_deformations(&chain, &q0, &tilts, 3).unwrap();
        assert!(so3_log(&est.deformations[0]).unwrap().norm() < 1e-12);
    }

    #[test]
    fn mixed_deformation_keeps_only_observable_part() {
        let chain = default_biped();
        let q0 = standing();
        let links = chain.link_poses(&q0).unwrap();
        let frame = chain.deformation_frame(1, &links);
        let up = frame.inverse() * Vector3::z();
        let mut truth = q0.clone();
        truth.deformations[1] = so3_exp(&(up * 0.03 + Vector3::y() * 0.01));
        let tilts = tilts_for(&chain, &truth, &Rotation::identity());
        let (est, _) = estimate_deformations(&chain, &q0, &tilts, 4).unwrap();
        // No rotation about the gravity direction is ever introduced.
        let w = so3_log(&est.deformations[1]).unwrap();
        assert!(w.dot(&up).abs() < 1e-12);
    }

    #[test]
    fn antipodal_tilt_keeps_previous() {
        let chain = default_biped();
        let mut q0 = standing();
        q0.deformations[1] = so3_exp(&Vector3::new(0.0, 0.004, 0.0));
        let mut tilts = tilts_for(&chain, &q0.without_deformations(), &Rotation::identity());
        tilts[1] = -tilts[1];
        let (est, report) = estimate_deformations(&chain, &q0, &tilts, 3).unwrap();
        assert_eq!(report.status[1], DeformationStatus::KeptPrevious);
        assert_eq!(est.deformations[1], q0.deformations[1]);
    }
}
