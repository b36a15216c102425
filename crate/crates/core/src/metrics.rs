//! Trajectory error metrics: ATE, RPE, average vertical drift per step and
//! yaw drift. Trajectories are compared in a shared frame without alignment.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifold::{so3_log, yaw_of, Rotation};

/// Estimate and truth samples closer than this are paired.
pub const ALIGN_TOLERANCE: f64 = 2e-3;
pub const DEFAULT_RPE_WINDOW: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrajectoryPoint {
    pub t: f64,
    pub position: Vector3<f64>,
    pub orientation: Rotation,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trajectory(pub Vec<TrajectoryPoint>);

impl Trajectory {
    pub fn check(&self) -> Result<()> {
        for w in self.0.windows(2) {
            if !(w[1].t > w[0].t) {
                return Err(Error::NonMonotoneTime { previous: w[0].t, current: w[1].t });
            }
        }
        Ok(())
    }
}

/// Time-aligned `(estimate, truth)` pairs.
#[derive(Clone, Debug)]
pub struct Aligned {
    pub t: Vec<f64>,
    pub est: Vec<TrajectoryPoint>,
    pub truth: Vec<TrajectoryPoint>,
}

/// Pairs every estimate sample with the nearest truth sample within
/// [`ALIGN_TOLERANCE`]; unmatched samples are dropped.
pub fn align(est: &Trajectory, truth: &Trajectory) -> Result<Aligned> {
    est.check()?;
    truth.check()?;
    let tt: Vec<f64> = truth.0.iter().map(|p| p.t).collect();
    let mut out = Aligned { t: Vec::new(), est: Vec::new(), truth: Vec::new() };
    for e in &est.0 {
        if let Some(k) = nearest(&tt, e.t, ALIGN_TOLERANCE) {
            out.t.push(e.t);
            out.est.push(*e);
            out.truth.push(truth.0[k]);
        }
    }
    if out.t.is_empty() {
        return Err(Error::Metrics("estimate and truth do not overlap in time".into()));
    }
    Ok(out)
}

/// Index of the entry of sorted `ts` nearest to `t`, if within `tol`.
fn nearest(ts: &[f64], t: f64, tol: f64) -> Option<usize> {
    let i = ts.partition_point(|&x| x < t);
    let candidates = [i.checked_sub(1), (i < ts.len()).then_some(i)];
    candidates
        .into_iter()
        .flatten()
        .min_by(|&a, &b| (ts[a] - t).abs().total_cmp(&(ts[b] - t).abs()))
        .filter(|&k| (ts[k] - t).abs() <= tol)
}

/// RMS of the position errors (m).
pub fn ate(a: &Aligned) -> f64 {
    let sum: f64 = a.est.iter().zip(&a.truth).map(|(e, g)| (e.position - g.position).norm_squared()).sum();
    (sum / a.t.len() as f64).sqrt()
}

/// Median over start times of the translation error accumulated over
/// `window` seconds (m).
pub fn rpe(a: &Aligned, window: f64) -> Result<f64> {
    let span = a.t.last().expect("aligned is non-empty") - a.t[0];
    if !(window > 0.0) || span + ALIGN_TOLERANCE < window {
        return Err(Error::Metrics(format!("trajectory spans {span:.3} s, shorter than the {window} s window")));
    }
    let mut errors = Vec::new();
    for (i, &t) in a.t.iter().enumerate() {
        if let Some(j) = nearest(&a.t, t + window, ALIGN_TOLERANCE) {
            let de = a.est[j].position - a.est[i].position;
            let dg = a.truth[j].position - a.truth[i].position;
            errors.push((de - dg).norm());
        }
    }
    if errors.is_empty() {
        return Err(Error::Metrics("no sample pairs one window apart".into()));
    }
    Ok(median(&mut errors))
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Net vertical drift per step: `|Δz_est − Δz_truth| / steps` (mm).
pub fn avds(a: &Aligned, steps: usize) -> Result<f64> {
    if steps == 0 {
        return Err(Error::Metrics("no steps taken".into()));
    }
    let n = a.t.len() - 1;
    let ez = |k: usize| a.est[k].position.z - a.truth[k].position.z;
    Ok((ez(n) - ez(0)).abs() / steps as f64 * 1e3)
}

fn wrap(a: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    a - two_pi * ((a + std::f64::consts::PI) / two_pi).floor()
}

/// Change of the heading error between the first and last samples (deg).
pub fn yaw_drift(a: &Aligned) -> f64 {
    let n = a.t.len() - 1;
    let err = |k: usize| wrap(yaw_of(&a.est[k].orientation) - yaw_of(&a.truth[k].orientation));
    wrap(err(n) - err(0)).abs().to_degrees()
}

/// Geodesic orientation errors over time (deg).
pub fn orientation_errors(a: &Aligned) -> Vec<f64> {
    // Through the log rather than `angle_to`, whose acos loses angles below ~1e-8.
    a.est
        .iter()
        .zip(&a.truth)
        .map(|(e, g)| so3_log(&(e.orientation.inverse() * g.orientation)).map_or(f64::NAN, |v| v.norm().to_degrees()))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub ate_cm: f64,
    pub rpe_cm: f64,
    pub avds_mm: f64,
    pub yaw_drift_deg: f64,
    pub steps: usize,
}

pub fn evaluate(est: &Trajectory, truth: &Trajectory, steps: usize) -> Result<MetricsReport> {
    let a = align(est, truth)?;
    Ok(MetricsReport {
        ate_cm: ate(&a) * 100.0,
        rpe_cm: rpe(&a, DEFAULT_RPE_WINDOW)? * 100.0,
        avds_mm: avds(&a, steps)?,
        yaw_drift_deg: yaw_drift(&a),
        steps,
    })
}
