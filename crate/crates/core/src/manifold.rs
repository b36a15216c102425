//! Perturbation calculus on SO(3), S² and Euclidean factors.
//!
//! Orientations are stored as 3×3 rotation matrices and perturbed on the
//! right: `R ⊕ δ = R·Exp(δ)`. Unit vectors are perturbed through a
//! two-dimensional tangent basis: `u ⊕ δ = Exp(B(u)·δ)·u`.

use nalgebra::{Matrix3, Matrix3x2, Rotation3, Unit, Vector2, Vector3};

use crate::error::{Error, Result};

pub type Rotation = Rotation3<f64>;
pub type UnitVector = Unit<Vector3<f64>>;

/// Below this angle the Rodrigues coefficients switch to Taylor expansions.
pub const SMALL_ANGLE: f64 = 1e-6;
/// Rotations within this margin of π are outside the principal log branch.
pub const LOG_PI_MARGIN: f64 = 1e-6;
/// Tolerance on `1 + u·v` below which two unit vectors count as antipodal.
pub const ANTIPODAL_TOL: f64 = 1e-8;
/// Orthonormality defect above which a rotation is re-projected.
pub const ORTHO_TOL: f64 = 1e-9;
const SKEW_TOL: f64 = 1e-9;
const UNIT_TOL: f64 = 1e-9;

/// Cross-product matrix: `hat(v) * w == v × w`.
#[inline]
pub fn hat(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Inverse of [`hat`]. Rejects matrices whose asymmetric part is not skew.
pub fn vee(m: &Matrix3<f64>) -> Result<Vector3<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    if sym.amax() > SKEW_TOL {
        return Err(Error::NotSkewSymmetric(sym.amax()));
    }
    Ok(vee_unchecked(m))
}

#[inline]
fn vee_unchecked(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(
        0.5 * (m[(2, 1)] - m[(1, 2)]),
        0.5 * (m[(0, 2)] - m[(2, 0)]),
        0.5 * (m[(1, 0)] - m[(0, 1)]),
    )
}

/// Rodrigues exponential of a rotation vector (radians).
pub fn so3_exp(delta: &Vector3<f64>) -> Rotation {
    let theta2 = delta.norm_squared();
    let theta = theta2.sqrt();
    let (a, b) = if theta < SMALL_ANGLE {
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    let k = hat(delta);
    Rotation::from_matrix_unchecked(Matrix3::identity() + k * a + k * k * b)
}

/// Principal logarithm. Fails within [`LOG_PI_MARGIN`] of a half turn.
pub fn so3_log(r: &Rotation) -> Result<Vector3<f64>> {
    let m = r.matrix();
    let axis = vee_unchecked(m);
    let s = axis.norm();
    let c = 0.5 * (m.trace() - 1.0);
    let theta = s.atan2(c);
    if theta > std::f64::consts::PI - LOG_PI_MARGIN {
        return Err(Error::LogOutOfDomain(theta));
    }
    let scale = if theta < SMALL_ANGLE {
        1.0 + theta * theta / 6.0
    } else {
        theta / s
    };
    Ok(axis * scale)
}

/// Rotation angle in `[0, π]`.
pub fn rotation_angle(r: &Rotation) -> f64 {
    let m = r.matrix();
    vee_unchecked(m).norm().atan2(0.5 * (m.trace() - 1.0))
}

#[inline]
pub fn oplus_so3(r: &Rotation, delta: &Vector3<f64>) -> Rotation {
    r * so3_exp(delta)
}

/// `R1 ⊖ R2 = Log(R2ᵀ R1)`.
#[inline]
pub fn ominus_so3(r1: &Rotation, r2: &Rotation) -> Result<Vector3<f64>> {
    so3_log(&(r2.inverse() * r1))
}

/// Max-abs entry of `RᵀR − I`.
pub fn orthonormality_defect(r: &Rotation) -> f64 {
    (r.matrix().transpose() * r.matrix() - Matrix3::identity()).amax()
}

/// Nearest rotation in the Frobenius sense (polar projection).
pub fn reorthonormalize(m: &Matrix3<f64>) -> Rotation {
    let svd = m.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    Rotation::from_matrix_unchecked(u * d * v_t)
}

/// Re-projects only when the defect exceeds [`ORTHO_TOL`].
pub fn keep_orthonormal(r: Rotation) -> Rotation {
    if orthonormality_defect(&r) > ORTHO_TOL {
        reorthonormalize(r.matrix())
    } else {
        r
    }
}

/// Builds a unit vector, rejecting inputs that are not already unit-norm.
pub fn unit_vector(v: Vector3<f64>) -> Result<UnitVector> {
    let n = v.norm();
    if (n - 1.0).abs() > UNIT_TOL {
        return Err(Error::NotUnit(n));
    }
    Ok(Unit::new_unchecked(v))
}

/// 3×2 matrix with orthonormal columns orthogonal to an anchor unit vector.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TangentBasis(Matrix3x2<f64>);

impl TangentBasis {
    /// Wraps columns that the caller guarantees are orthonormal and
    /// orthogonal to the intended anchor.
    pub fn from_columns_unchecked(m: Matrix3x2<f64>) -> Self {
        TangentBasis(m)
    }

    pub fn matrix(&self) -> &Matrix3x2<f64> {
        &self.0
    }
}

/// Deterministic tangent basis: the first column is the coordinate axis
/// least aligned with `u`, with its `u` component removed; the second
/// completes a right-handed frame.
pub fn tangent_basis(u: &Vector3<f64>) -> Result<TangentBasis> {
    let u = unit_vector(*u)?;
    let k = u.iamin();
    let mut e = Vector3::zeros();
    e[k] = 1.0;
    let b1 = (e - u.as_ref() * u.dot(&e)).normalize();
    let b2 = u.cross(&b1);
    Ok(TangentBasis(Matrix3x2::from_columns(&[b1, b2])))
}

/// Smallest rotation taking `u` onto `v`.
pub fn rot_between(u: &UnitVector, v: &UnitVector) -> Result<Rotation> {
    let c = u.dot(v);
    if 1.0 + c < ANTIPODAL_TOL {
        return Err(Error::Antipodal);
    }
    let k = hat(&u.cross(v));
    Ok(Rotation::from_matrix_unchecked(
        Matrix3::identity() + k + k * k * (1.0 / (1.0 + c)),
    ))
}

/// `u ⊕ δ = Exp(B δ) u` with an explicit basis.
pub fn oplus_s2_with(u: &UnitVector, basis: &TangentBasis, delta: &Vector2<f64>) -> UnitVector {
    let v = so3_exp(&(basis.matrix() * delta)) * u.as_ref();
    Unit::new_normalize(v)
}

/// `v ⊖ u = Bᵀ Log(Rot(u, v))` with an explicit basis.
pub fn ominus_s2_with(v: &UnitVector, u: &UnitVector, basis: &TangentBasis) -> Result<Vector2<f64>> {
    let r = rot_between(u, v)?;
    Ok(basis.matrix().transpose() * so3_log(&r)?)
}

pub fn oplus_s2(u: &UnitVector, delta: &Vector2<f64>) -> Result<UnitVector> {
    let basis = tangent_basis(u)?;
    Ok(oplus_s2_with(u, &basis, delta))
}

pub fn ominus_s2(v: &UnitVector, u: &UnitVector) -> Result<Vector2<f64>> {
    let basis = tangent_basis(u)?;
    ominus_s2_with(v, u, &basis)
}

/// Tilt of a body: gravity's upward direction `Rᵀ e_z` in the body frame.
#[inline]
pub fn tilt_of(r: &Rotation) -> UnitVector {
    Unit::new_normalize(r.matrix().row(2).transpose())
}

/// Heading of the body x axis about the world vertical, in (−π, π].
pub fn yaw_of(r: &Rotation) -> f64 {
    let x = r * Vector3::x();
    x.y.atan2(x.x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn rand_vec(max_norm: f64) -> impl Strategy<Value = Vector3<f64>> {
        (
            prop::array::uniform3(-1.0f64..1.0),
            0.0..max_norm,
        )
            .prop_filter_map("nonzero direction", move |(a, n)| {
                let v = Vector3::from(a);
                (v.norm() > 1e-3).then(|| v.normalize() * n)
            })
    }

    fn rand_unit() -> impl Strategy<Value = UnitVector> {
        prop::array::uniform3(-1.0f64..1.0)
            .prop_filter_map("nonzero", |a| {
                let v = Vector3::from(a);
                (v.norm() > 1e-3).then(|| Unit::new_normalize(v))
            })
    }

    #[test]
    fn hat_matches_definition() {
        let h = hat(&Vector3::z());
        assert_eq!(h, Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0));
        assert_eq!(hat(&Vector3::zeros()), Matrix3::zeros());
        let w = hat(&Vector3::new(1.0, 2.0, 3.0)) * Vector3::new(4.0, 5.0, 6.0);
        assert_eq!(w, Vector3::new(-3.0, 6.0, -3.0));
    }

    #[test]
    fn vee_inverts_hat_and_rejects_symmetric() {
        let v = Vector3::new(1.0, 2.0, 3.0);
        assert_eq!(vee(&hat(&v)).unwrap(), v);
        assert_eq!(vee(&Matrix3::zeros()).unwrap(), Vector3::zeros());
        let sym = Matrix3::new(1.0, 2.0, 0.0, 2.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        assert!(matches!(vee(&sym), Err(Error::NotSkewSymmetric(_))));
    }

    #[test]
    fn exp_known_values() {
        assert_eq!(so3_exp(&Vector3::zeros()), Rotation::identity());
        let r = so3_exp(&Vector3::new(0.0, 0.0, FRAC_PI_2));
        assert_abs_diff_eq!(r * Vector3::x(), Vector3::y(), epsilon = 1e-15);
        assert_abs_diff_eq!(r * Vector3::y(), -Vector3::x(), epsilon = 1e-15);
    }

    #[test]
    fn log_rejects_half_turn() {
        let r = so3_exp(&Vector3::new(PI, 0.0, 0.0));
        assert!(matches!(so3_log(&r), Err(Error::LogOutOfDomain(_))));
    }

    #[test]
    fn small_angle_branch_is_continuous() {
        for &t in &[1e-9, 5e-7, 9.99e-7, 1.01e-6, 1e-5] {
            let d = Vector3::new(t, -2.0 * t, 0.5 * t);
            let back = so3_log(&so3_exp(&d)).unwrap();
            assert_abs_diff_eq!(back, d, epsilon = 1e-15);
        }
    }

    #[test]
    fn tangent_basis_axis_aligned() {
        let b = tangent_basis(&Vector3::z()).unwrap();
        assert_abs_diff_eq!(b.matrix().transpose() * Vector3::z(), Vector2::zeros());
        assert_abs_diff_eq!(b.matrix()[(2, 0)], 0.0);
        assert_abs_diff_eq!(b.matrix()[(2, 1)], 0.0);
        let b = tangent_basis(&Vector3::x()).unwrap();
        assert_abs_diff_eq!(b.matrix().transpose() * Vector3::x(), Vector2::zeros());
        assert!(matches!(
            tangent_basis(&Vector3::new(1.0, 1.0, 0.0)),
            Err(Error::NotUnit(_))
        ));
    }

    #[test]
    fn rot_between_cases() {
        let ez = Vector3::z_axis();
        assert_eq!(rot_between(&ez, &ez).unwrap(), Rotation::identity());
        let r = rot_between(&Vector3::x_axis(), &Vector3::y_axis()).unwrap();
        assert_abs_diff_eq!(
            *r.matrix(),
            *so3_exp(&Vector3::new(0.0, 0.0, FRAC_PI_2)).matrix(),
            epsilon = 1e-15
        );
        let down = -Vector3::z_axis();
        assert!(matches!(rot_between(&ez, &down), Err(Error::Antipodal)));
    }

    #[test]
    fn s2_identities() {
        let u = Unit::new_normalize(Vector3::new(0.3, -0.2, 0.9));
        assert_abs_diff_eq!(oplus_s2(&u, &Vector2::zeros()).unwrap(), u);
        assert_eq!(ominus_s2(&u, &u).unwrap(), Vector2::zeros());
        assert!(ominus_s2(&u, &-u).is_err());
    }

    #[test]
    fn long_chain_stays_orthonormal() {
        let step = Vector3::new(1e-3, -2e-3, 7e-4);
        let mut r = Rotation::identity();
        let mut u = Vector3::z_axis();
        let basis_delta = Vector2::new(1e-3, 2e-3);
        for _ in 0..1_000_000 {
            r = keep_orthonormal(oplus_so3(&r, &step));
        }
        for _ in 0..100_000 {
            u = oplus_s2(&u, &basis_delta).unwrap();
        }
        assert!(orthonormality_defect(&r) <= ORTHO_TOL);
        assert!((r.matrix().determinant() - 1.0).abs() < 1e-9);
        assert!((u.norm() - 1.0).abs() < 1e-9);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn so3_exp_log_round_trip(d in rand_vec(3.0)) {
            let back = so3_log(&so3_exp(&d)).unwrap();
            prop_assert!((back - d).norm() < 1e-9);
        }

        #[test]
        fn so3_oplus_ominus_round_trip(r in rand_vec(3.0), d in rand_vec(1.0)) {
            let base = so3_exp(&r);
            let back = ominus_so3(&oplus_so3(&base, &d), &base).unwrap();
            prop_assert!((back - d).norm() < 1e-9);
            prop_assert_eq!(oplus_so3(&base, &Vector3::zeros()), base);
            prop_assert!(ominus_so3(&base, &base).unwrap().norm() < 1e-15);
        }

        #[test]
        fn so3_ominus_then_oplus(a in rand_vec(3.0), b in rand_vec(1.0)) {
            let x = so3_exp(&a);
            let y = x * so3_exp(&b);
            let back = oplus_so3(&x, &ominus_so3(&y, &x).unwrap());
            prop_assert!((back.matrix() - y.matrix()).amax() < 1e-9);
        }

        #[test]
        fn tangent_basis_orthonormal(u in rand_unit()) {
            let b = tangent_basis(&u).unwrap();
            let m = b.matrix();
            prop_assert!((m.transpose() * m - nalgebra::Matrix2::identity()).amax() < 1e-9);
            prop_assert!((m.transpose() * u.as_ref()).amax() < 1e-9);
            prop_assert_eq!(tangent_basis(&u).unwrap(), b);
        }

        #[test]
        fn s2_round_trips(u in rand_unit(), d in prop::array::uniform2(-0.7f64..0.7)) {
            let d = Vector2::from(d);
            let v = oplus_s2(&u, &d).unwrap();
            prop_assert!((v.norm() - 1.0).abs() < 1e-9);
            let back = ominus_s2(&v, &u).unwrap();
            prop_assert!((back - d).norm() < 1e-9);
            let again = oplus_s2(&u, &back).unwrap();
            prop_assert!((again.as_ref() - v.as_ref()).norm() < 1e-9);
        }

        #[test]
        fn rot_between_is_minimal(u in rand_unit(), v in rand_unit()) {
            prop_assume!(1.0 + u.dot(&v) > 1e-3);
            let r = rot_between(&u, &v).unwrap();
            prop_assert!((r * u.as_ref() - v.as_ref()).norm() < 1e-9);
            let expected = u.dot(&v).clamp(-1.0, 1.0).acos();
            prop_assert!((rotation_angle(&r) - expected).abs() < 1e-9);
            // Axis is orthogonal to both inputs.
            let axis = so3_log(&r).unwrap();
            prop_assert!(axis.dot(&u).abs() < 1e-9 && axis.dot(&v).abs() < 1e-9);
        }
    }
}
