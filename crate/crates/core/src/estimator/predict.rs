//! Per-link prediction models and block-diagonal covariance propagation.

use nalgebra::{DMatrix, Matrix3, Vector3};

use super::{ImuNoise, ImuSample, LinkState, BA, BG, LINK_DIM, P, THETA, V};
use crate::error::{Error, Result};
use crate::filter::{discretize, symmetrize, LinearizedDynamics};
use crate::manifold::{hat, oplus_so3};
use crate::GRAVITY;

/// Predicted mean and discrete-time `(A, Q)` of one link.
#[derive(Clone, Debug)]
pub struct LinkPrediction {
    pub state: LinkState,
    pub a: DMatrix<f64>,
    pub q: DMatrix<f64>,
}

/// Largest accepted step; longer gaps mean a broken log, not a slow sensor.
pub const MAX_DT: f64 = 0.1;

fn check_inputs(x: &LinkState, imu: &ImuSample, dt: f64) -> Result<()> {
    if !(dt > 0.0 && dt <= MAX_DT) {
        return Err(Error::InvalidTimeStep(dt));
    }
    if !imu.gyro.iter().chain(imu.accel.iter()).all(|v| v.is_finite()) {
        return Err(Error::NonFinite("IMU sample"));
    }
    if !x.is_finite() {
        return Err(Error::NonFinite("link state"));
    }
    Ok(())
}

fn set_block(m: &mut DMatrix<f64>, r: usize, c: usize, b: &Matrix3<f64>) {
    m.fixed_view_mut::<3, 3>(r, c).copy_from(b);
}

/// Floating-link `F` (15×15) and `G` (15×12), noise order
/// `[η_g, η_a, η_bg, η_ba]`.
pub fn floating_jacobians(x: &LinkState, imu: &ImuSample) -> (DMatrix<f64>, DMatrix<f64>) {
    let w = imu.gyro - x.gyro_bias;
    let a = imu.accel - x.accel_bias;
    let r = x.rotation.matrix();
    let i3 = Matrix3::identity();
    let mut f = DMatrix::zeros(LINK_DIM, LINK_DIM);
    set_block(&mut f, THETA, THETA, &-hat(&w));
    set_block(&mut f, THETA, BG, &-i3);
    set_block(&mut f, P, V, &i3);
    set_block(&mut f, V, THETA, &(-r * hat(&a)));
    set_block(&mut f, V, BA, &-r);
    let mut g = DMatrix::zeros(LINK_DIM, 12);
    set_block(&mut g, THETA, 0, &-i3);
    set_block(&mut g, V, 3, &-r);
    set_block(&mut g, BG, 6, &i3);
    set_block(&mut g, BA, 9, &i3);
    (f, g)
}

/// Floating-link mean propagation under a zero-order hold of `imu` over
/// `dt`, with `F`/`G` evaluated at the predicted mean.
pub fn predict_floating(x: &LinkState, imu: &ImuSample, noise: &ImuNoise, dt: f64) -> Result<LinkPrediction> {
    check_inputs(x, imu, dt)?;
    let w = imu.gyro - x.gyro_bias;
    let acc = x.rotation * (imu.accel - x.accel_bias) + GRAVITY;
    let state = LinkState {
        rotation: oplus_so3(&x.rotation, &(w * dt)),
        position: x.position + x.velocity * dt + acc * (0.5 * dt * dt),
        velocity: x.velocity + acc * dt,
        gyro_bias: x.gyro_bias,
        accel_bias: x.accel_bias,
    };
    let (f, g) = floating_jacobians(&state, imu);
    let h = DMatrix::from_diagonal(&noise.floating_psd());
    let (a, q) = discretize(&LinearizedDynamics { f, g, h, dt })?;
    Ok(LinkPrediction { state, a, q })
}

/// Reduced contact-link `F` and `G` (12×12 each) over `(δθ, δp, δbg, δba)`,
/// noise order `[η_g, η_bg, η_ba, η_s]`.
pub fn contact_jacobians(x: &LinkState, imu: &ImuSample, lever: &Vector3<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let w = imu.gyro - x.gyro_bias;
    let r = x.rotation.matrix();
    let i3 = Matrix3::identity();
    let r_hat_lever = r * hat(lever);
    let mut f = DMatrix::zeros(12, 12);
    set_block(&mut f, 0, 0, &-hat(&w));
    set_block(&mut f, 0, 6, &-i3);
    set_block(&mut f, 3, 0, &(-r * hat(&w.cross(lever))));
    set_block(&mut f, 3, 6, &r_hat_lever);
    let mut g = DMatrix::zeros(12, 12);
    set_block(&mut g, 0, 0, &-i3);
    set_block(&mut g, 3, 0, &r_hat_lever);
    set_block(&mut g, 3, 9, &i3);
    set_block(&mut g, 6, 3, &i3);
    set_block(&mut g, 9, 6, &i3);
    (f, g)
}

/// Offsets of the reduced contact state inside the 15-dim link error state.
const REDUCED: [usize; 4] = [THETA, P, BG, BA];

/// Contact-link prediction: the link rotates about its center of pressure,
/// `lever` being the link origin relative to the CoP in the link frame.
///
/// The reduced 12-dim model is discretized as usual and then embedded in
/// the 15-dim error state. The velocity error is not propagated; it is
/// rebuilt from the position-error rate, so the velocity rows of `A` hold
/// the `δθ` and `δbg` coefficients of that rate and the velocity columns are
/// zero. Its noise is the interval-averaged rate noise, correlated with the
/// reduced-state noise of the same interval.
pub fn predict_contact(
    x: &LinkState,
    imu: &ImuSample,
    lever: &Vector3<f64>,
    noise: &ImuNoise,
    dt: f64,
) -> Result<LinkPrediction> {
    check_inputs(x, imu, dt)?;
    if !lever.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("lever arm"));
    }
    let w = imu.gyro - x.gyro_bias;
    let velocity = x.rotation * w.cross(lever);
    let state = LinkState {
        rotation: oplus_so3(&x.rotation, &(w * dt)),
        position: x.position + velocity * dt,
        velocity,
        gyro_bias: x.gyro_bias,
        accel_bias: x.accel_bias,
    };
    let (f, g) = contact_jacobians(&state, imu, lever);
    let h = DMatrix::from_diagonal(&noise.contact_psd());
    let (a_red, _) = discretize(&LinearizedDynamics { f: f.clone(), g: g.clone(), h: h.clone(), dt })?;

    let mut a = DMatrix::zeros(LINK_DIM, LINK_DIM);
    for (bi, &ri) in REDUCED.iter().enumerate() {
        for (bj, &rj) in REDUCED.iter().enumerate() {
            a.fixed_view_mut::<3, 3>(ri, rj).copy_from(&a_red.fixed_view::<3, 3>(3 * bi, 3 * bj));
        }
    }
    // δv = (δp rate) = F_pθ δθ + F_pbg δbg + G_p η
    a.fixed_view_mut::<3, 3>(V, THETA).copy_from(&f.fixed_view::<3, 3>(3, 0));
    a.fixed_view_mut::<3, 3>(V, BG).copy_from(&f.fixed_view::<3, 3>(3, 6));

    // Noise map M (15×12) applied to the interval mean of η, whose
    // covariance is H/Δt: reduced rows integrate (G Δt), δv rows do not.
    let mut m = DMatrix::zeros(LINK_DIM, 12);
    for (bi, &ri) in REDUCED.iter().enumerate() {
        m.rows_mut(ri, 3).copy_from(&(g.rows(3 * bi, 3) * dt));
    }
    m.rows_mut(V, 3).copy_from(&g.rows(3, 3));
    let mut q = &m * (h / dt) * m.transpose();
    symmetrize(&mut q);
    Ok(LinkPrediction { state, a, q })
}

/// `P ← A P Aᵀ + Q` for block-diagonal `A = diag(Aᵢ)` and `Q = diag(Qᵢ)`,
/// computed block by block.
pub fn assemble_and_predict(p: &mut DMatrix<f64>, blocks: &[(&DMatrix<f64>, &DMatrix<f64>)]) {
    let n = blocks.len();
    debug_assert_eq!(p.nrows(), n * LINK_DIM);
    let dim = p.nrows();
    for (i, (a, _)) in blocks.iter().enumerate() {
        let rows = *a * p.rows(i * LINK_DIM, LINK_DIM);
        p.rows_mut(i * LINK_DIM, LINK_DIM).copy_from(&rows);
    }
    for (j, (a, _)) in blocks.iter().enumerate() {
        let cols = p.columns(j * LINK_DIM, LINK_DIM) * a.transpose();
        p.columns_mut(j * LINK_DIM, LINK_DIM).copy_from(&cols);
    }
    for (i, (_, q)) in blocks.iter().enumerate() {
        let mut d = p.view_mut((i * LINK_DIM, i * LINK_DIM), (LINK_DIM, LINK_DIM));
        d += *q;
    }
    debug_assert_eq!(p.ncols(), dim);
    symmetrize(p);
}
