//! Tilt and relative-pose measurement models.

use nalgebra::{DMatrix, DVector, Matrix2, Matrix2x3, Matrix3, Matrix3x2, Vector3};

use super::{LinkState, LINK_DIM, P, THETA};
use crate::error::{Error, Result};
use crate::filter::LinearizedMeasurement;
use crate::manifold::{hat, ominus_s2_with, ominus_so3, tilt_of, TangentBasis, UnitVector};
use crate::robot::Pose;

/// Basis of the tilt tangent plane at `R̂ᵀe_z`: the first two rows of `R̂`.
pub fn tilt_basis(rotation: &crate::manifold::Rotation) -> TangentBasis {
    let m = rotation.matrix();
    TangentBasis::from_columns_unchecked(Matrix3x2::from_columns(&[
        m.row(0).transpose(),
        m.row(1).transpose(),
    ]))
}

/// `C` block (on `δθᵢ`) and `D` of one tilt measurement.
pub fn tilt_jacobians(rotation: &crate::manifold::Rotation) -> (Matrix2x3<f64>, Matrix2<f64>) {
    let b = *tilt_basis(rotation).matrix();
    let t = tilt_of(rotation);
    let h2 = hat(&t) * hat(&t);
    let c = b.transpose() * h2;
    let d = -(c * b);
    (c, d)
}

/// Stacked tilt measurement of the given `(link, measured tilt)` targets.
/// Targets whose measured and predicted tilts are antipodal are dropped and
/// returned in the second element.
pub fn tilt_measurement(
    links: &[LinkState],
    targets: &[(usize, UnitVector)],
    covariance: &Matrix2<f64>,
) -> Result<(LinearizedMeasurement, Vec<usize>)> {
    let n = links.len() * LINK_DIM;
    let mut rows = Vec::new();
    let mut dropped = Vec::new();
    for &(i, y) in targets {
        let x = links.get(i).ok_or_else(|| Error::UnknownLink(format!("link #{i}")))?;
        let basis = tilt_basis(&x.rotation);
        match ominus_s2_with(&y, &tilt_of(&x.rotation), &basis) {
            Ok(innov) => rows.push((i, innov, tilt_jacobians(&x.rotation))),
            Err(Error::Antipodal) => dropped.push(i),
            Err(e) => return Err(e),
        }
    }
    let m = 2 * rows.len();
    let mut c = DMatrix::zeros(m, n);
    let mut d = DMatrix::zeros(m, m);
    let mut r = DMatrix::zeros(m, m);
    let mut innovation = DVector::zeros(m);
    for (k, (i, innov, (ck, dk))) in rows.into_iter().enumerate() {
        c.fixed_view_mut::<2, 3>(2 * k, i * LINK_DIM + THETA).copy_from(&ck);
        d.fixed_view_mut::<2, 2>(2 * k, 2 * k).copy_from(&dk);
        r.fixed_view_mut::<2, 2>(2 * k, 2 * k).copy_from(covariance);
        innovation.fixed_rows_mut::<2>(2 * k).copy_from(&innov);
    }
    Ok((LinearizedMeasurement { c, d, r, innovation }, dropped))
}

/// Nonzero blocks of the relative-pose `C` for the pair `(i, j)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RelposeBlocks {
    /// Rotation row, `δθᵢ` column: `−R̂ⱼᵀR̂ᵢ`.
    pub rot_theta_i: Matrix3<f64>,
    /// Position row, `δθᵢ` column: `hat(R̂ᵢᵀ(p̂ⱼ − p̂ᵢ))`.
    pub pos_theta_i: Matrix3<f64>,
    /// Position row, `δpᵢ` column: `−R̂ᵢᵀ`.
    pub pos_p_i: Matrix3<f64>,
    /// Position row, `δpⱼ` column: `R̂ᵢᵀ` (the rotation row has `I` on `δθⱼ`).
    pub pos_p_j: Matrix3<f64>,
}

pub fn relpose_blocks(xi: &LinkState, xj: &LinkState) -> RelposeBlocks {
    let ri_t = xi.rotation.inverse();
    RelposeBlocks {
        rot_theta_i: -(xj.rotation.inverse() * xi.rotation).into_inner(),
        pos_theta_i: hat(&(ri_t * (xj.position - xi.position))),
        pos_p_i: -ri_t.into_inner(),
        pos_p_j: ri_t.into_inner(),
    }
}

/// Relative pose `(RᵢᵀRⱼ, Rᵢᵀ(pⱼ − pᵢ))` of two link estimates.
pub fn relative_pose(xi: &LinkState, xj: &LinkState) -> Pose {
    Pose::new(xi.rotation, xi.position).relative_to(&Pose::new(xj.rotation, xj.position))
}

/// One kinematic relative-pose measurement between links `i` and `j`.
#[derive(Clone, Debug)]
pub struct PairMeasurement {
    pub i: usize,
    pub j: usize,
    pub measured: Pose,
    /// `J^R` and `J^p` with respect to the joint-noise vector.
    pub jr: DMatrix<f64>,
    pub jp: DMatrix<f64>,
}

/// All pairs stacked into one `6d`-row measurement sharing the joint-noise
/// vector with covariance `noise`.
pub fn relpose_measurement(
    links: &[LinkState],
    pairs: &[PairMeasurement],
    noise: &DMatrix<f64>,
) -> Result<LinearizedMeasurement> {
    let n = links.len() * LINK_DIM;
    let nq = noise.nrows();
    let m = 6 * pairs.len();
    let mut c = DMatrix::zeros(m, n);
    let mut d = DMatrix::zeros(m, nq);
    let mut innovation = DVector::zeros(m);
    for (k, pair) in pairs.iter().enumerate() {
        let (xi, xj) = match (links.get(pair.i), links.get(pair.j)) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(Error::UnknownLink(format!("pair ({}, {})", pair.i, pair.j))),
        };
        if pair.jr.ncols() != nq || pair.jp.ncols() != nq {
            return Err(Error::Config(format!(
                "kinematic Jacobian has {} columns, joint noise has {nq}",
                pair.jr.ncols()
            )));
        }
        let (row_r, row_p) = (6 * k, 6 * k + 3);
        let (ci, cj) = (pair.i * LINK_DIM, pair.j * LINK_DIM);
        let b = relpose_blocks(xi, xj);
        c.fixed_view_mut::<3, 3>(row_r, ci + THETA).copy_from(&b.rot_theta_i);
        c.fixed_view_mut::<3, 3>(row_r, cj + THETA).copy_from(&Matrix3::identity());
        c.fixed_view_mut::<3, 3>(row_p, ci + THETA).copy_from(&b.pos_theta_i);
        c.fixed_view_mut::<3, 3>(row_p, ci + P).copy_from(&b.pos_p_i);
        c.fixed_view_mut::<3, 3>(row_p, cj + P).copy_from(&b.pos_p_j);
        d.rows_mut(row_r, 3).copy_from(&pair.jr);
        d.rows_mut(row_p, 3).copy_from(&pair.jp);

        let expected = relative_pose(xi, xj);
        let dr: Vector3<f64> = ominus_so3(&pair.measured.rotation, &expected.rotation)?;
        innovation.fixed_rows_mut::<3>(row_r).copy_from(&dr);
        innovation
            .fixed_rows_mut::<3>(row_p)
            .copy_from(&(pair.measured.translation - expected.translation));
    }
    Ok(LinearizedMeasurement { c, d, r: noise.clone(), innovation })
}
