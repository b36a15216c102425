//! JSON robot description.
//!
//! ```json
//! {
//!   "schema_version": 1,
//!   "links": [
//!     { "name": "pelvis" },
//!     { "name": "hip_yaw_l", "parent": "pelvis",
//!       "joint": { "name": "hip_yaw_l", "axis": [0,0,1],
//!                  "origin_xyz": [0,0.1,-0.1], "origin_rpy": [0,0,0] } }
//!   ],
//!   "imus": [ { "name": "pelvis", "link": "pelvis", "xyz": [0,0,0], "rpy": [0,0,0] } ],
//!   "deformations": [ { "name": "hip_l", "link": "hip_yaw_l", "anchor": [0,0,0] } ],
//!   "feet": [ { "name": "foot_l", "link": "foot_l", "imu": "foot_l",
//!               "sole": [[...]], "sensors": [[fl],[fr],[rl],[rr]] } ]
//! }
//! ```
//!
//! Links are listed parents first; the first link is the root. Joint angles
//! are indexed in link order. A deformation frame on link `L` rotates `L`'s
//! subtree about `anchor` (joint frame of `L`, before the joint rotation).
//! Force sensors are ordered front-left, front-right, rear-left, rear-right,
//! so the diagonal pairs are (0, 3) and (1, 2). Angles in radians, lengths
//! in meters. Unknown keys are rejected.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::{Deformation, Foot, Imu, KinematicChain, Link, Pose};
use crate::error::{Error, Result};
use crate::manifold::Rotation;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobotDescription {
    pub schema_version: u32,
    pub links: Vec<LinkDesc>,
    pub imus: Vec<ImuDesc>,
    #[serde(default)]
    pub deformations: Vec<DeformationDesc>,
    pub feet: Vec<FootDesc>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkDesc {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub joint: Option<JointDesc>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointDesc {
    pub name: String,
    pub axis: [f64; 3],
    pub origin_xyz: [f64; 3],
    pub origin_rpy: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImuDesc {
    pub name: String,
    pub link: String,
    pub xyz: [f64; 3],
    pub rpy: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeformationDesc {
    pub name: String,
    pub link: String,
    pub anchor: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FootDesc {
    pub name: String,
    pub link: String,
    pub imu: String,
    pub sole: Vec<[f64; 3]>,
    pub sensors: [[f64; 3]; 4],
}

fn rpy(r: &[f64; 3]) -> Rotation {
    Rotation::from_euler_angles(r[0], r[1], r[2])
}

impl RobotDescription {
    pub fn from_json(text: &str) -> Result<Self> {
        let desc: RobotDescription = serde_json::from_str(text)?;
        if desc.schema_version != SCHEMA_VERSION {
            return Err(Error::SchemaVersion { found: desc.schema_version, expected: SCHEMA_VERSION });
        }
        Ok(desc)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("description serializes")
    }

    /// Builds and checks the legged-robot requirements: at least two feet,
    /// each carrying an IMU on the foot link.
    pub fn build(&self) -> Result<KinematicChain> {
        let chain = self.build_unvalidated()?;
        if chain.feet.len() < 2 {
            return Err(Error::InvalidChain("both feet must be described".into()));
        }
        for foot in &chain.feet {
            if chain.imus[foot.imu].link != foot.link {
                return Err(Error::InvalidChain(format!(
                    "foot `{}` must carry its own IMU",
                    foot.name
                )));
            }
        }
        Ok(chain)
    }

    /// Structural checks only (tree, name references, one IMU per link).
    pub fn build_unvalidated(&self) -> Result<KinematicChain> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::SchemaVersion { found: self.schema_version, expected: SCHEMA_VERSION });
        }
        let mut links: Vec<Link> = Vec::with_capacity(self.links.len());
        let mut joint_names = Vec::new();
        let find = |links: &[Link], name: &str| -> Result<usize> {
            links
                .iter()
                .position(|l| l.name == name)
                .ok_or_else(|| Error::UnknownLink(name.to_string()))
        };
        for (k, desc) in self.links.iter().enumerate() {
            if links.iter().any(|l| l.name == desc.name) {
                return Err(Error::InvalidChain(format!("duplicate link `{}`", desc.name)));
            }
            let parent = match (&desc.parent, k) {
                (None, 0) => None,
                (None, _) => {
                    return Err(Error::InvalidChain(format!("link `{}` has no parent", desc.name)))
                }
                (Some(_), 0) => {
                    return Err(Error::InvalidChain("the first link is the root".into()))
                }
                // Parents must already be declared, which rules out cycles.
                (Some(p), _) => Some(find(&links, p).map_err(|_| {
                    Error::InvalidChain(format!("parent `{p}` of `{}` not declared before it", desc.name))
                })?),
            };
            let (offset, joint) = match &desc.joint {
                Some(j) => {
                    let axis = Vector3::from(j.axis);
                    if (axis.norm() - 1.0).abs() > 1e-9 {
                        return Err(Error::InvalidChain(format!("joint `{}` axis is not unit", j.name)));
                    }
                    joint_names.push(j.name.clone());
                    (
                        Pose::new(rpy(&j.origin_rpy), Vector3::from(j.origin_xyz)),
                        Some((joint_names.len() - 1, axis)),
                    )
                }
                None => (Pose::identity(), None),
            };
            links.push(Link { name: desc.name.clone(), parent, offset, joint, deformation: None });
        }
        if links.is_empty() {
            return Err(Error::InvalidChain("no links".into()));
        }

        let mut imus: Vec<Imu> = Vec::new();
        for desc in &self.imus {
            let link = find(&links, &desc.link)?;
            if imus.iter().any(|i| i.link == link) {
                return Err(Error::InvalidChain(format!("link `{}` carries two IMUs", desc.link)));
            }
            if imus.iter().any(|i| i.name == desc.name) {
                return Err(Error::InvalidChain(format!("duplicate IMU `{}`", desc.name)));
            }
            imus.push(Imu {
                name: desc.name.clone(),
                link,
                mount: Pose::new(rpy(&desc.rpy), Vector3::from(desc.xyz)),
            });
        }

        let mut deformations = Vec::new();
        for (k, desc) in self.deformations.iter().enumerate() {
            let link = find(&links, &desc.link)?;
            if links[link].parent.is_none() {
                return Err(Error::InvalidChain("deformation on the root link".into()));
            }
            if links[link].deformation.is_some() {
                return Err(Error::InvalidChain(format!("link `{}` has two deformations", desc.link)));
            }
            let anchor = Vector3::from(desc.anchor);
            links[link].deformation = Some((k, anchor));
            deformations.push(Deformation { name: desc.name.clone(), link, anchor });
        }

        let mut feet = Vec::new();
        for desc in &self.feet {
            let link = find(&links, &desc.link)?;
            let imu = imus
                .iter()
                .position(|i| i.name == desc.imu)
                .ok_or_else(|| Error::UnknownLink(desc.imu.clone()))?;
            feet.push(Foot {
                name: desc.name.clone(),
                link,
                imu,
                sole: desc.sole.iter().map(|p| Vector3::from(*p)).collect(),
                sensors: desc.sensors.map(Vector3::from),
            });
        }

        Ok(KinematicChain { links, joint_names, imus, feet, deformations })
    }
}
