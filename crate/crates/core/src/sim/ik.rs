//! Leg inverse kinematics with load-dependent deformations.

use nalgebra::{Matrix6, Vector3, Vector6};

use crate::error::{Error, Result};
use crate::manifold::{so3_exp, so3_log, Rotation};
use crate::robot::{JointState, KinematicChain, Pose};

const MAX_ITERATIONS: usize = 60;
const TOLERANCE: f64 = 1e-12;
/// Residual still accepted when round-off prevents reaching `TOLERANCE`.
const ACCEPT: f64 = 1e-9;
const MAX_STEP: f64 = 0.3;

struct Leg {
    foot_link: usize,
    /// Joint indices from hip to ankle.
    joints: [usize; 6],
    /// Deformation frames from hip to ankle.
    deformations: Vec<usize>,
    hip: Vector3<f64>,
    thigh: f64,
    shin: f64,
}

pub(super) struct LegSolver<'a> {
    chain: &'a KinematicChain,
    legs: Vec<Leg>,
}

impl<'a> LegSolver<'a> {
    pub fn new(chain: &'a KinematicChain) -> Result<Self> {
        let zero = chain.link_poses(&chain.zero_state())?;
        let mut legs = Vec::new();
        for foot in chain.feet() {
            let mut joints = chain.joints_above(foot.link);
            joints.reverse();
            let joints: [usize; 6] = joints
                .try_into()
                .map_err(|_| Error::InfeasibleGait(format!("{} is not on a six-joint leg", foot.name)))?;
            // Links from just below the root down to the foot.
            let mut links = chain.ancestors(foot.link);
            links.reverse();
            let links = &links[1..];
            if links.len() != 6 {
                return Err(Error::InfeasibleGait(format!("{} is not on a six-link leg", foot.name)));
            }
            let hip = zero[links[0]].translation;
            let knee = zero[links[3]].translation;
            let ankle = zero[foot.link].translation;
            let deformations = chain
                .deformations()
                .iter()
                .enumerate()
                .filter(|(_, d)| links.contains(&d.link))
                .map(|(k, _)| k)
                .collect::<Vec<_>>();
            legs.push(Leg {
                foot_link: foot.link,
                joints,
                deformations,
                hip,
                thigh: (knee - hip).norm(),
                shin: (ankle - knee).norm(),
            });
        }
        Ok(LegSolver { chain, legs })
    }

    /// Joint angles that put the feet at `feet` (world poses) for the given
    /// pelvis pose, with deformations `axes[leg][i]` (world rotation vectors,
    /// hip to ankle) expressed in the solved configuration.
    pub fn solve(
        &self,
        pelvis: &Pose,
        feet: &[Pose; 2],
        axes: &[[Vector3<f64>; 2]; 2],
        warm: Option<&JointState>,
    ) -> Result<JointState> {
        let targets: Vec<Pose> = feet.iter().map(|f| pelvis.relative_to(f)).collect();
        let mut q = match warm {
            Some(q) => q.clone(),
            None => {
                let mut q = self.chain.zero_state();
                for (leg, target) in self.legs.iter().zip(&targets) {
                    for (j, a) in leg.joints.iter().zip(planar_seed(leg, target)) {
                        q.angles[*j] = a;
                    }
                }
                q
            }
        };
        let pelvis_t = pelvis.rotation.inverse();
        let mut residual = f64::INFINITY;
        for _ in 0..MAX_ITERATIONS {
            let poses = self.chain.link_poses(&q)?;
            // Refresh the deformations for the current configuration, then re-evaluate.
            for (leg, leg_axes) in self.legs.iter().zip(axes) {
                for (&k, axis) in leg.deformations.iter().zip(leg_axes) {
                    let frame = self.chain.deformation_frame(k, &poses);
                    q.deformations[k] = so3_exp(&(frame.inverse() * (pelvis_t * axis)));
                }
            }
            let poses = self.chain.link_poses(&q)?;
            residual = 0.0;
            let mut steps = Vec::with_capacity(self.legs.len());
            for (leg, target) in self.legs.iter().zip(&targets) {
                let cur = poses[leg.foot_link];
                let rot_err = cur.rotation * so3_log(&(cur.rotation.inverse() * target.rotation))?;
                let err = Vector6::from_iterator(rot_err.iter().chain((target.translation - cur.translation).iter()).copied());
                residual = residual.max(err.norm());
                let full = self.chain.geometric_jacobian(&poses, leg.foot_link);
                let jac = Matrix6::from_fn(|r, c| full[(r, leg.joints[c])]);
                let dq = jac.lu().solve(&err).ok_or_else(|| Error::InfeasibleGait("singular leg configuration".into()))?;
                steps.push(dq);
            }
            if residual < TOLERANCE {
                break;
            }
            for (leg, dq) in self.legs.iter().zip(steps) {
                let scale = (MAX_STEP / dq.amax()).min(1.0);
                for (c, &j) in leg.joints.iter().enumerate() {
                    q.angles[j] += dq[c] * scale;
                }
            }
        }
        if !(residual < ACCEPT) {
            return Err(Error::InfeasibleGait(format!("inverse kinematics residual {residual:.2e}")));
        }
        // A straight or hyperextended knee means the target was out of reach.
        for leg in &self.legs {
            if q.angles[leg.joints[3]] < 1e-3 {
                return Err(Error::InfeasibleGait("knee at or past full extension".into()));
            }
        }
        Ok(q)
    }
}

fn rotation_yaw(r: &Rotation) -> f64 {
    let m = r.matrix();
    m[(1, 0)].atan2(m[(0, 0)])
}

/// Closed-form angles for a yaw-roll-pitch hip, pitch knee and pitch-roll
/// ankle, ignoring deformations.
fn planar_seed(leg: &Leg, target: &Pose) -> [f64; 6] {
    let yaw = rotation_yaw(&target.rotation);
    let rz = so3_exp(&Vector3::new(0.0, 0.0, yaw));
    let d = rz.inverse() * (target.translation - leg.hip);
    let roll = d.y.atan2(-d.z);
    let rx = so3_exp(&Vector3::new(roll, 0.0, 0.0));
    let dp = rx.inverse() * d;
    let (l1, l2) = (leg.thigh, leg.shin);
    let reach = dp.norm().min(l1 + l2 - 1e-6);
    let cos_knee = ((l1 * l1 + l2 * l2 - reach * reach) / (2.0 * l1 * l2)).clamp(-1.0, 1.0);
    let knee = std::f64::consts::PI - cos_knee.acos();
    let lean = dp.x.atan2(-dp.z);
    let cos_beta = ((l1 * l1 + reach * reach - l2 * l2) / (2.0 * l1 * reach)).clamp(-1.0, 1.0);
    let pitch = -(lean + cos_beta.acos());
    let rel = ((rz * rx).inverse() * target.rotation).into_inner();
    let total_pitch = (-rel[(2, 0)]).atan2(rel[(0, 0)]);
    let ankle_roll = (-rel[(1, 2)]).atan2(rel[(1, 1)]);
    [yaw, roll, pitch, knee, total_pitch - pitch - knee, ankle_roll]
}
