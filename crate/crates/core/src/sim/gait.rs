//! Task-space gait: foot and pelvis poses, loads and centers of pressure as
//! functions of time.

use std::f64::consts::PI;

use nalgebra::Vector3;

use super::{GaitSpec, PathSpec};
use crate::manifold::{so3_exp, Rotation};
use crate::robot::{KinematicChain, Pose};

/// Quintic smoothstep: zero first and second derivatives at both ends.
pub fn smooth(u: f64) -> f64 {
    let u = u.clamp(0.0, 1.0);
    u * u * u * (10.0 - 15.0 * u + 6.0 * u * u)
}

/// Bump with zero value, slope and curvature at both ends and peak 1 at 0.5.
fn bump(u: f64) -> f64 {
    let u = u.clamp(0.0, 1.0);
    64.0 * (u * (1.0 - u)).powi(3)
}

fn rot_z(a: f64) -> Rotation {
    so3_exp(&Vector3::new(0.0, 0.0, a))
}

fn rot_y(a: f64) -> Rotation {
    so3_exp(&Vector3::new(0.0, a, 0.0))
}

fn rot_x(a: f64) -> Rotation {
    so3_exp(&Vector3::new(a, 0.0, 0.0))
}

/// Rotation `r` about the point `c`.
fn about(c: &Vector3<f64>, r: Rotation) -> Pose {
    Pose::new(r, c - r * c)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Phase {
    /// Landing on the heel edge; progress in [0, 1).
    HeelRoll(f64),
    /// Flat foot, center of pressure moving heel to toe.
    Flat(f64),
    /// Pivot about the toe edge before lift-off.
    ToeRoll(f64),
    Swing(f64),
}

impl Phase {
    pub fn in_contact(&self) -> bool {
        !matches!(self, Phase::Swing(_))
    }
}

/// Foot-frame geometry the gait needs: roll-edge midpoints on the sole.
#[derive(Clone, Copy, Debug)]
struct FootGeometry {
    heel: Vector3<f64>,
    toe: Vector3<f64>,
}

#[derive(Clone, Debug)]
pub struct Gait {
    spec: GaitSpec,
    /// Time between successive heel strikes of alternate feet.
    period: f64,
    /// Double-support duration, also the duration of each roll.
    roll: f64,
    first_strike: [f64; 2],
    /// Lateral side of each foot (+1 left).
    side: [f64; 2],
    half_width: f64,
    feet: [FootGeometry; 2],
    standing: bool,
}

impl Gait {
    pub fn new(spec: &GaitSpec, chain: &KinematicChain) -> Self {
        let standing = spec.speed == 0.0;
        let period = spec.step_duration;
        let roll = spec.double_support * period;
        let geometry = |k: usize| {
            let s = &chain.feet()[k].sensors;
            FootGeometry { heel: (s[2] + s[3]) / 2.0, toe: (s[0] + s[1]) / 2.0 }
        };
        // Lateral offset of each foot from the hip-yaw joint positions at zero configuration.
        let zero = chain.link_poses(&chain.zero_state()).expect("zero state matches");
        let lateral: Vec<f64> = chain.feet().iter().map(|f| zero[f.link].translation.y).collect();
        let left_first = -(period + roll) / 2.0;
        Gait {
            spec: spec.clone(),
            period,
            roll,
            first_strike: [left_first, left_first + period],
            side: [lateral[0].signum(), lateral[1].signum()],
            half_width: lateral[0].abs(),
            feet: [geometry(0), geometry(1)],
            standing,
        }
    }

    /// Point and heading of the path at arc length `s`.
    pub fn path(&self, s: f64) -> (Vector3<f64>, f64) {
        match self.spec.path {
            PathSpec::Straight => (Vector3::new(s, 0.0, 0.0), 0.0),
            PathSpec::Circular { radius } => {
                let a = s / radius;
                (Vector3::new(radius * a.sin(), radius * (1.0 - a.cos()), 0.0), a)
            }
        }
    }

    fn left_normal(heading: f64) -> Vector3<f64> {
        Vector3::new(-heading.sin(), heading.cos(), 0.0)
    }

    /// Cycle index and phase of `foot` at time `t`.
    pub fn phase(&self, foot: usize, t: f64) -> (i64, Phase) {
        if self.standing {
            return (0, Phase::Flat(0.5));
        }
        let (tp, d) = (self.period, self.roll);
        let rel = t - self.first_strike[foot];
        let n = (rel / (2.0 * tp)).floor();
        let tau = rel - n * 2.0 * tp;
        let phase = if tau < d {
            Phase::HeelRoll(tau / d)
        } else if tau < tp {
            Phase::Flat((tau - d) / (tp - d))
        } else if tau < tp + d {
            Phase::ToeRoll((tau - tp) / d)
        } else {
            Phase::Swing((tau - tp - d) / (tp - d))
        };
        (n as i64, phase)
    }

    /// Flat pose of the foot link on foothold `n`.
    fn foothold(&self, foot: usize, n: i64) -> Pose {
        let center_time = self.first_strike[foot] + 2.0 * n as f64 * self.period + (self.period + self.roll) / 2.0;
        let s = if self.standing { 0.0 } else { self.spec.speed * center_time };
        let (p, heading) = self.path(s);
        let sole_height = -self.feet[foot].heel.z;
        let pos = p + Self::left_normal(heading) * (self.side[foot] * self.half_width) + Vector3::new(0.0, 0.0, sole_height);
        Pose::new(rot_z(heading), pos)
    }

    fn heel_pose(&self, foot: usize, n: i64, pitch: f64) -> Pose {
        self.foothold(foot, n).compose(&about(&self.feet[foot].heel, rot_y(-pitch)))
    }

    fn toe_pose(&self, foot: usize, n: i64, pitch: f64) -> Pose {
        self.foothold(foot, n).compose(&about(&self.feet[foot].toe, rot_y(pitch)))
    }

    /// World pose of the foot link.
    pub fn foot_pose(&self, foot: usize, t: f64) -> Pose {
        let alpha = self.spec.roll_amplitude;
        let (n, phase) = self.phase(foot, t);
        match phase {
            Phase::HeelRoll(u) => self.heel_pose(foot, n, alpha * (1.0 - smooth(u))),
            Phase::Flat(_) => self.foothold(foot, n),
            Phase::ToeRoll(u) => self.toe_pose(foot, n, alpha * smooth(u)),
            Phase::Swing(u) => {
                let start = self.toe_pose(foot, n, alpha);
                let end = self.heel_pose(foot, n + 1, alpha);
                let k = smooth(u);
                let (_, h0) = self.path_heading(foot, n);
                let (_, h1) = self.path_heading(foot, n + 1);
                let pos = start.translation
                    + (end.translation - start.translation) * k
                    + Vector3::new(0.0, 0.0, self.spec.step_height * bump(u));
                let rot = rot_z(h0 + (h1 - h0) * k) * rot_y(alpha * (1.0 - 2.0 * k));
                Pose::new(rot, pos)
            }
        }
    }

    fn path_heading(&self, foot: usize, n: i64) -> (Vector3<f64>, f64) {
        let center_time = self.first_strike[foot] + 2.0 * n as f64 * self.period + (self.period + self.roll) / 2.0;
        self.path(self.spec.speed * center_time)
    }

    /// Share of the body weight carried by `foot`, in [0, 1].
    pub fn load_share(&self, foot: usize, t: f64) -> f64 {
        if self.standing {
            return 0.5;
        }
        match self.phase(foot, t).1 {
            Phase::HeelRoll(u) => smooth(u),
            Phase::Flat(_) => 1.0,
            Phase::ToeRoll(u) => 1.0 - smooth(u),
            Phase::Swing(_) => 0.0,
        }
    }

    /// Progress through the contact interval, heel strike to toe off.
    pub fn stance_progress(&self, foot: usize, t: f64) -> Option<f64> {
        if self.standing {
            return Some(0.5);
        }
        let (tp, d) = (self.period, self.roll);
        let tau = match self.phase(foot, t).1 {
            Phase::HeelRoll(u) => u * d,
            Phase::Flat(u) => d + u * (tp - d),
            Phase::ToeRoll(u) => tp + u * d,
            Phase::Swing(_) => return None,
        };
        Some(tau / (tp + d))
    }

    /// Fraction of the foot load on the front sensors.
    pub fn front_fraction(&self, foot: usize, t: f64) -> Option<f64> {
        match self.phase(foot, t).1 {
            Phase::HeelRoll(_) => Some(0.0),
            Phase::Flat(u) => Some(if self.standing { 0.5 } else { u }),
            Phase::ToeRoll(_) => Some(1.0),
            Phase::Swing(_) => None,
        }
    }

    pub fn pelvis_pose(&self, t: f64) -> Pose {
        let s = self.spec.speed * t;
        let (p, heading) = self.path(s);
        let wave = if self.standing { 0.0 } else { (PI * t / self.period).cos() };
        let sway = self.spec.sway * wave;
        let pos = p + Self::left_normal(heading) * sway + Vector3::new(0.0, 0.0, self.spec.pelvis_height);
        Pose::new(rot_z(heading) * rot_x(-self.spec.pelvis_roll * wave), pos)
    }

    pub fn pelvis_heading(&self, t: f64) -> f64 {
        self.path(self.spec.speed * t).1
    }

    /// Heel strikes in `(0, until]`, over both feet.
    pub fn steps(&self, until: f64) -> usize {
        if self.standing {
            return 0;
        }
        (0..2)
            .map(|f| {
                let first = self.first_strike[f];
                let last = ((until - first) / (2.0 * self.period)).floor() as i64;
                (0..=last).filter(|&n| first + 2.0 * n as f64 * self.period > 0.0).count()
            })
            .sum()
    }

    pub fn foot_side(&self, foot: usize) -> f64 {
        self.side[foot]
    }
}
