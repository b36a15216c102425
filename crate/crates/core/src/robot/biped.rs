use super::schema::{DeformationDesc, FootDesc, ImuDesc, JointDesc, LinkDesc, RobotDescription, SCHEMA_VERSION};
use super::KinematicChain;

pub const HIP_HALF_WIDTH: f64 = 0.1;
pub const HIP_DROP: f64 = 0.1;
pub const THIGH_LENGTH: f64 = 0.4;
pub const SHIN_LENGTH: f64 = 0.4;
/// Ankle center height above the sole.
pub const ANKLE_HEIGHT: f64 = 0.08;
pub const TOE_X: f64 = 0.17;
pub const HEEL_X: f64 = -0.08;
pub const SOLE_HALF_WIDTH: f64 = 0.05;

fn joint(name: &str, axis: [f64; 3], xyz: [f64; 3]) -> Option<JointDesc> {
    Some(JointDesc { name: name.into(), axis, origin_xyz: xyz, origin_rpy: [0.0; 3] })
}

/// Twelve-joint biped with five IMUs (pelvis, both tibias, both feet) and
/// deformation frames at both hips and ankles. The dimensions are
/// representative of an adult-sized exoskeleton; they are not measured.
pub fn default_biped_description() -> RobotDescription {
    let mut links = vec![LinkDesc { name: "pelvis".into(), parent: None, joint: None }];
    let mut deformations = Vec::new();
    let mut feet = Vec::new();
    let x = [1.0, 0.0, 0.0];
    let y = [0.0, 1.0, 0.0];
    let z = [0.0, 0.0, 1.0];
    for (side, s) in [("l", 1.0), ("r", -1.0)] {
        let n = |base: &str| format!("{base}_{side}");
        let chain = [
            ("hip_yaw", "pelvis".to_string(), z, [0.0, s * HIP_HALF_WIDTH, -HIP_DROP]),
            ("hip_roll", n("hip_yaw"), x, [0.0; 3]),
            ("thigh", n("hip_roll"), y, [0.0; 3]),
            ("tibia", n("thigh"), y, [0.0, 0.0, -THIGH_LENGTH]),
            ("ankle", n("tibia"), y, [0.0, 0.0, -SHIN_LENGTH]),
            ("foot", n("ankle"), x, [0.0; 3]),
        ];
        let joint_names = ["hip_yaw", "hip_roll", "hip_pitch", "knee", "ankle_pitch", "ankle_roll"];
        for ((link, parent, axis, xyz), jn) in chain.into_iter().zip(joint_names) {
            links.push(LinkDesc { name: n(link), parent: Some(parent), joint: joint(&n(jn), axis, xyz) });
        }
        deformations.push(DeformationDesc { name: n("hip"), link: n("hip_yaw"), anchor: [0.0; 3] });
        deformations.push(DeformationDesc { name: n("ankle"), link: n("ankle"), anchor: [0.0; 3] });
        let zs = -ANKLE_HEIGHT;
        feet.push(FootDesc {
            name: n("foot"),
            link: n("foot"),
            imu: n("foot"),
            sole: vec![
                [TOE_X, SOLE_HALF_WIDTH, zs],
                [TOE_X, -SOLE_HALF_WIDTH, zs],
                [HEEL_X, -SOLE_HALF_WIDTH, zs],
                [HEEL_X, SOLE_HALF_WIDTH, zs],
            ],
            sensors: [
                [TOE_X, SOLE_HALF_WIDTH, zs],
                [TOE_X, -SOLE_HALF_WIDTH, zs],
                [HEEL_X, SOLE_HALF_WIDTH, zs],
                [HEEL_X, -SOLE_HALF_WIDTH, zs],
            ],
        });
    }
    let imu = |name: &str, xyz: [f64; 3]| ImuDesc { name: name.into(), link: name.into(), xyz, rpy: [0.0; 3] };
    RobotDescription {
        schema_version: SCHEMA_VERSION,
        links,
        imus: vec![
            imu("pelvis", [0.0; 3]),
            imu("tibia_l", [0.05, 0.0, -0.2]),
            imu("tibia_r", [0.05, 0.0, -0.2]),
            imu("foot_l", [0.05, 0.0, -0.04]),
            imu("foot_r", [0.05, 0.0, -0.04]),
        ],
        deformations,
        feet,
    }
}

pub fn default_biped() -> KinematicChain {
    default_biped_description().build().expect("built-in description is valid")
}
