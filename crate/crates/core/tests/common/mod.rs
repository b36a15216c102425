//! Test oracles written independently of the crate's manifold code:
//! rotations use nalgebra's axis-angle constructor and a quaternion log, Jacobians use central
//! finite differences.
#![allow(dead_code)]

use mimu_core::estimator::{ImuSample, LinkState};
use mimu_core::manifold::Rotation;
use nalgebra::{DMatrix, DVector, Matrix3x2, UnitQuaternion, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Step of every finite-difference oracle.
pub const H: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn exp(v: &Vector3<f64>) -> Rotation {
    Rotation::new(*v)
}

/// Via the quaternion and `atan2`, which stays accurate for tiny angles.
pub fn log(r: &Rotation) -> Vector3<f64> {
    let q = UnitQuaternion::from_rotation_matrix(r);
    let (w, v) = if q.w < 0.0 { (-q.w, -q.imag()) } else { (q.w, q.imag()) };
    let s = v.norm();
    if s < 1e-300 {
        return v * 2.0;
    }
    v * (2.0 * s.atan2(w) / s)
}

pub fn vec3(rng: &mut impl Rng, scale: f64) -> Vector3<f64> {
    Vector3::new(rng.random_range(-scale..scale), rng.random_range(-scale..scale), rng.random_range(-scale..scale))
}

/// Uniform in the ball of radius `r`.
pub fn ball(rng: &mut impl Rng, r: f64) -> Vector3<f64> {
    loop {
        let v = vec3(rng, r);
        if v.norm() < r {
            return v;
        }
    }
}

pub fn rotation(rng: &mut impl Rng) -> Rotation {
    exp(&ball(rng, 3.0))
}

pub fn link_state(rng: &mut impl Rng) -> LinkState {
    LinkState {
        rotation: rotation(rng),
        position: vec3(rng, 1.0),
        velocity: vec3(rng, 1.0),
        gyro_bias: vec3(rng, 0.05),
        accel_bias: vec3(rng, 0.2),
    }
}

pub fn imu_sample(rng: &mut impl Rng) -> ImuSample {
    ImuSample { gyro: vec3(rng, 2.0), accel: vec3(rng, 5.0) + Vector3::new(0.0, 0.0, 9.81) }
}

/// Central-difference Jacobian of `f` at zero.
pub fn jacobian(n: usize, f: impl Fn(&DVector<f64>) -> DVector<f64>) -> DMatrix<f64> {
    let m = f(&DVector::zeros(n)).len();
    let mut j = DMatrix::zeros(m, n);
    for c in 0..n {
        let mut d = DVector::zeros(n);
        d[c] = H;
        let plus = f(&d);
        d[c] = -H;
        let minus = f(&d);
        j.set_column(c, &((plus - minus) / (2.0 * H)));
    }
    j
}

/// `|a − b| ≤ tol · max(1, max|b|)` entrywise.
pub fn close(a: &DMatrix<f64>, b: &DMatrix<f64>, tol: f64) -> Result<(), String> {
    if a.shape() != b.shape() {
        return Err(format!("shape {:?} vs {:?}", a.shape(), b.shape()));
    }
    let scale = b.amax().max(1.0);
    let err = (a - b).amax();
    if err <= tol * scale {
        Ok(())
    } else {
        let bad: Vec<String> = (0..a.nrows())
            .flat_map(|r| (0..a.ncols()).map(move |c| (r, c)))
            .filter(|&(r, c)| (a[(r, c)] - b[(r, c)]).abs() > tol * scale)
            .take(8)
            .map(|(r, c)| format!("({r},{c}): {:.6} vs {:.6}", a[(r, c)], b[(r, c)]))
            .collect();
        Err(format!("max deviation {err:.3e} (scale {scale:.3e}) at {}", bad.join(", ")))
    }
}

fn v3(d: &DVector<f64>, k: usize) -> Vector3<f64> {
    Vector3::new(d[k], d[k + 1], d[k + 2])
}

fn boxplus(x: &LinkState, d: &DVector<f64>) -> LinkState {
    LinkState {
        rotation: x.rotation * exp(&v3(d, 0)),
        position: x.position + v3(d, 3),
        velocity: x.velocity + v3(d, 6),
        gyro_bias: x.gyro_bias + v3(d, 9),
        accel_bias: x.accel_bias + v3(d, 12),
    }
}

fn boxminus(a: &LinkState, b: &LinkState) -> DVector<f64> {
    let mut d = DVector::zeros(15);
    d.fixed_rows_mut::<3>(0).copy_from(&log(&(b.rotation.inverse() * a.rotation)));
    d.fixed_rows_mut::<3>(3).copy_from(&(a.position - b.position));
    d.fixed_rows_mut::<3>(6).copy_from(&(a.velocity - b.velocity));
    d.fixed_rows_mut::<3>(9).copy_from(&(a.gyro_bias - b.gyro_bias));
    d.fixed_rows_mut::<3>(12).copy_from(&(a.accel_bias - b.accel_bias));
    d
}

const GRAVITY: Vector3<f64> = Vector3::new(0.0, 0.0, -9.81);

/// Free-link motion over `h` with constant white-noise samples
/// `[η_g, η_a, η_bg, η_ba]`.
fn floating_flow(x: &LinkState, imu: &ImuSample, eta: &DVector<f64>, h: f64) -> LinkState {
    let w = imu.gyro - x.gyro_bias - v3(eta, 0);
    let a = x.rotation * (imu.accel - x.accel_bias - v3(eta, 3)) + GRAVITY;
    LinkState {
        rotation: x.rotation * exp(&(w * h)),
        position: x.position + x.velocity * h + a * (0.5 * h * h),
        velocity: x.velocity + a * h,
        gyro_bias: x.gyro_bias + v3(eta, 6) * h,
        accel_bias: x.accel_bias + v3(eta, 9) * h,
    }
}

/// Contact-link motion: rotation about a fixed point at `-lever` in the
/// link frame, noise `[η_g, η_bg, η_ba, η_s]`.
fn contact_flow(x: &LinkState, imu: &ImuSample, lever: &Vector3<f64>, eta: &DVector<f64>, h: f64) -> LinkState {
    let w = imu.gyro - x.gyro_bias - v3(eta, 0);
    LinkState {
        rotation: x.rotation * exp(&(w * h)),
        position: x.position + (x.rotation * w.cross(lever) + v3(eta, 9)) * h,
        velocity: x.velocity,
        gyro_bias: x.gyro_bias + v3(eta, 3) * h,
        accel_bias: x.accel_bias + v3(eta, 6) * h,
    }
}

/// Error-state rate `δẋ` for error `δ` and noise `η`, by a symmetric
/// difference over a short horizon.
fn error_rate(
    x: &LinkState,
    delta: &DVector<f64>,
    eta: &DVector<f64>,
    flow: &impl Fn(&LinkState, &DVector<f64>, f64) -> LinkState,
) -> DVector<f64> {
    let zero = DVector::zeros(eta.len());
    let xp = boxplus(x, delta);
    let fwd = boxminus(&flow(&xp, eta, H), &flow(x, &zero, H));
    let bwd = boxminus(&flow(&xp, eta, -H), &flow(x, &zero, -H));
    (fwd - bwd) / (2.0 * H)
}

/// `F` (15×15) and `G` (15×12) of a free link.
pub fn floating_oracle(x: &LinkState, imu: &ImuSample) -> (DMatrix<f64>, DMatrix<f64>) {
    let flow = |s: &LinkState, e: &DVector<f64>, h: f64| floating_flow(s, imu, e, h);
    let f = jacobian(15, |d| error_rate(x, d, &DVector::zeros(12), &flow));
    let g = jacobian(12, |e| error_rate(x, &DVector::zeros(15), e, &flow));
    (f, g)
}

/// Reduced `F` and `G` (12×12) of a contact link over `(δθ, δp, δbg, δba)`.
pub fn contact_oracle(x: &LinkState, imu: &ImuSample, lever: &Vector3<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let flow = |s: &LinkState, e: &DVector<f64>, h: f64| contact_flow(s, imu, lever, e, h);
    let reduce = |d: DVector<f64>| -> DVector<f64> {
        DVector::from_iterator(12, [0, 3, 9, 12].iter().flat_map(|&k| [d[k], d[k + 1], d[k + 2]]))
    };
    let expand = |r: &DVector<f64>| -> DVector<f64> {
        let mut d = DVector::zeros(15);
        for (b, &k) in [0, 3, 9, 12].iter().enumerate() {
            d.fixed_rows_mut::<3>(k).copy_from(&v3(r, 3 * b));
        }
        d
    };
    let f = jacobian(12, |d| reduce(error_rate(x, &expand(d), &DVector::zeros(12), &flow)));
    let g = jacobian(12, |e| reduce(error_rate(x, &DVector::zeros(15), e, &flow)));
    (f, g)
}

/// Tangent basis of the tilt at `R`: the first two rows of `R`.
pub fn tilt_basis(r: &Rotation) -> Matrix3x2<f64> {
    let m = r.matrix();
    Matrix3x2::from_columns(&[m.row(0).transpose(), m.row(1).transpose()])
}

pub fn tilt(r: &Rotation) -> Vector3<f64> {
    r.inverse() * Vector3::z()
}

/// `v ⊖ u` in basis `b`: coordinates of the minimal rotation from `u` to `v`.
pub fn s2_minus(v: &Vector3<f64>, u: &Vector3<f64>, b: &Matrix3x2<f64>) -> Vector2<f64> {
    let axis = u.cross(v);
    let s = axis.norm();
    if s < 1e-15 {
        return Vector2::zeros();
    }
    let angle = s.atan2(u.dot(v));
    b.transpose() * (axis / s * angle)
}

pub fn s2_plus(u: &Vector3<f64>, b: &Matrix3x2<f64>, d: &Vector2<f64>) -> Vector3<f64> {
    exp(&(b * d)) * u
}

/// Tilt `C` (2×3 on `δθ`) and `D` (2×2) for a measurement `y = t(R) ⊕ n`.
pub fn tilt_oracle(r: &Rotation) -> (DMatrix<f64>, DMatrix<f64>) {
    let b = tilt_basis(r);
    let t = tilt(r);
    let c = jacobian(3, |d| {
        let v = s2_minus(&tilt(&(r * exp(&v3(d, 0)))), &t, &b);
        DVector::from_column_slice(v.as_slice())
    });
    let d = jacobian(2, |n| {
        let v = s2_minus(&s2_plus(&t, &b, &Vector2::new(n[0], n[1])), &t, &b);
        DVector::from_column_slice(v.as_slice())
    });
    (c, d)
}

/// Relative-pose `C` (6×30) for links `(xi, xj)` stacked as `[xi, xj]`.
pub fn relpose_oracle(xi: &LinkState, xj: &LinkState) -> DMatrix<f64> {
    let rel = |a: &LinkState, b: &LinkState| (a.rotation.inverse() * b.rotation, a.rotation.inverse() * (b.position - a.position));
    let (r0, p0) = rel(xi, xj);
    jacobian(30, |d| {
        let a = boxplus(xi, &d.rows(0, 15).into_owned());
        let b = boxplus(xj, &d.rows(15, 15).into_owned());
        let (r, p) = rel(&a, &b);
        let mut out = DVector::zeros(6);
        out.fixed_rows_mut::<3>(0).copy_from(&log(&(r0.inverse() * r)));
        out.fixed_rows_mut::<3>(3).copy_from(&(p - p0));
        out
    })
}
