//! Generic error-state EKF machinery: first-order discretization of the
//! error dynamics, covariance prediction and the Kalman correction with mean
//! injection through `⊕`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Innovation covariances with a larger condition number are rejected.
pub const MAX_CONDITION: f64 = 1e12;

/// A mean on a product manifold that can absorb a tangent-space correction.
pub trait ErrorState {
    fn tangent_dim(&self) -> usize;
    /// Applies `x ← x ⊕ δ`.
    fn inject(&mut self, delta: &DVector<f64>);
}

impl ErrorState for DVector<f64> {
    fn tangent_dim(&self) -> usize {
        self.len()
    }

    fn inject(&mut self, delta: &DVector<f64>) {
        *self += delta;
    }
}

#[derive(Clone, Debug)]
pub struct GaussianBelief<S> {
    pub mean: S,
    pub covariance: DMatrix<f64>,
}

impl<S: ErrorState> GaussianBelief<S> {
    pub fn new(mean: S, covariance: DMatrix<f64>) -> Result<Self> {
        let n = mean.tangent_dim();
        if covariance.nrows() != n || covariance.ncols() != n {
            return Err(Error::Config(format!(
                "covariance is {}x{}, tangent dimension is {n}",
                covariance.nrows(),
                covariance.ncols()
            )));
        }
        Ok(GaussianBelief { mean, covariance })
    }
}

/// Continuous error dynamics `δẋ = F δx + G η`, `E[ηηᵀ] = H δ(t)`.
#[derive(Clone, Debug)]
pub struct LinearizedDynamics {
    pub f: DMatrix<f64>,
    pub g: DMatrix<f64>,
    pub h: DMatrix<f64>,
    pub dt: f64,
}

/// `y ⊖ ŷ ≈ C δx + D ν`, `E[ννᵀ] = R`.
#[derive(Clone, Debug)]
pub struct LinearizedMeasurement {
    pub c: DMatrix<f64>,
    pub d: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub innovation: DVector<f64>,
}

impl LinearizedMeasurement {
    /// Adds independent noise of the given variance to every row.
    pub fn with_row_noise(self, variance: f64) -> LinearizedMeasurement {
        if variance == 0.0 {
            return self;
        }
        let (m, nv) = (self.d.nrows(), self.d.ncols());
        let mut d = DMatrix::zeros(m, nv + m);
        d.columns_mut(0, nv).copy_from(&self.d);
        d.columns_mut(nv, m).fill_with_identity();
        let mut r = DMatrix::zeros(nv + m, nv + m);
        r.view_mut((0, 0), (nv, nv)).copy_from(&self.r);
        r.view_mut((nv, nv), (m, m)).fill_diagonal(variance);
        LinearizedMeasurement { d, r, ..self }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CorrectionOutcome {
    Applied,
    /// The innovation covariance was singular or too badly conditioned.
    Skipped { condition: f64 },
}

impl CorrectionOutcome {
    pub fn applied(&self) -> bool {
        matches!(self, CorrectionOutcome::Applied)
    }
}

/// Symmetric part `(M + Mᵀ)/2`, in place.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let s = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = s;
            m[(j, i)] = s;
        }
    }
}

/// `A = I + FΔt`, `Q = G H Gᵀ Δt`.
pub fn discretize(dynamics: &LinearizedDynamics) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let dt = dynamics.dt;
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::InvalidTimeStep(dt));
    }
    let n = dynamics.f.nrows();
    let a = DMatrix::identity(n, n) + &dynamics.f * dt;
    let mut q = &dynamics.g * &dynamics.h * dynamics.g.transpose() * dt;
    symmetrize(&mut q);
    Ok((a, q))
}

/// `P⁻ = A P Aᵀ + Q`.
pub fn predict_covariance(p: &DMatrix<f64>, a: &DMatrix<f64>, q: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = a * p * a.transpose() + q;
    symmetrize(&mut out);
    out
}

/// Hook run after the mean injection. The filter itself performs no reset;
/// this exists so callers can check that the output does not depend on it.
pub trait ErrorReset<S> {
    fn reset(&self, mean: &S, delta: &DVector<f64>, covariance: &mut DMatrix<f64>);
}

#[derive(Clone, Copy, Debug, Default)]
pub struct NoReset;

impl<S> ErrorReset<S> for NoReset {
    fn reset(&self, _: &S, _: &DVector<f64>, _: &mut DMatrix<f64>) {}
}

pub fn correct<S: ErrorState>(
    belief: &mut GaussianBelief<S>,
    meas: &LinearizedMeasurement,
) -> Result<CorrectionOutcome> {
    correct_with_reset(belief, meas, &NoReset)
}

/// Kalman correction:
/// `K = P Cᵀ (C P Cᵀ + D R Dᵀ)⁻¹`, `x ← x ⊕ K(y ⊖ ŷ)`, `P ← (I − KC) P`.
pub fn correct_with_reset<S: ErrorState, H: ErrorReset<S>>(
    belief: &mut GaussianBelief<S>,
    meas: &LinearizedMeasurement,
    hook: &H,
) -> Result<CorrectionOutcome> {
    let n = belief.covariance.nrows();
    let m = meas.innovation.len();
    if meas.c.nrows() != m || meas.c.ncols() != n || meas.d.nrows() != m {
        return Err(Error::Config(format!(
            "measurement shapes C {}x{}, D {}x{}, innovation {m} do not match state {n}",
            meas.c.nrows(),
            meas.c.ncols(),
            meas.d.nrows(),
            meas.d.ncols()
        )));
    }
    if m == 0 {
        return Ok(CorrectionOutcome::Applied);
    }
    let p = &belief.covariance;
    let pct = p * meas.c.transpose();
    let mut s = &meas.c * &pct + &meas.d * &meas.r * meas.d.transpose();
    symmetrize(&mut s);

    let eig = s.symmetric_eigen();
    let lmax = eig.eigenvalues.max();
    let lmin = eig.eigenvalues.min();
    let condition = if lmin > 0.0 { lmax / lmin } else { f64::INFINITY };
    if !(condition < MAX_CONDITION) {
        return Ok(CorrectionOutcome::Skipped { condition });
    }
    let inv_vals = eig.eigenvalues.map(|l| 1.0 / l);
    let s_inv = &eig.eigenvectors * DMatrix::from_diagonal(&inv_vals) * eig.eigenvectors.transpose();

    let k = &pct * s_inv;
    let delta = &k * &meas.innovation;
    let mut p_new = p - &k * pct.transpose();
    symmetrize(&mut p_new);

    belief.mean.inject(&delta);
    belief.covariance = p_new;
    hook.reset(&belief.mean, &delta, &mut belief.covariance);
    Ok(CorrectionOutcome::Applied)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Scaling-and-squaring Taylor exponential, used only as an oracle.
    fn expm(m: &DMatrix<f64>) -> DMatrix<f64> {
        let n = m.nrows();
        let norm = m.norm();
        let s = if norm > 0.5 { (norm / 0.5).log2().ceil() as i32 } else { 0 };
        let scaled = m / 2f64.powi(s);
        let mut term = DMatrix::identity(n, n);
        let mut sum = DMatrix::identity(n, n);
        for k in 1..30 {
            term = &term * &scaled / k as f64;
            sum += &term;
        }
        for _ in 0..s {
            sum = &sum * &sum;
        }
        sum
    }

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.random_range(-scale..scale))
    }

    fn random_psd(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
        let l = random_matrix(rng, n, n, 1.0);
        &l * l.transpose()
    }

    #[test]
    fn discretize_trivial_cases() {
        let n = 4;
        let dyn0 = LinearizedDynamics {
            f: DMatrix::zeros(n, n),
            g: DMatrix::zeros(n, n),
            h: DMatrix::identity(n, n),
            dt: 0.001,
        };
        let (a, q) = discretize(&dyn0).unwrap();
        assert_eq!(a, DMatrix::identity(n, n));
        assert_eq!(q, DMatrix::zeros(n, n));

        let dyn1 = LinearizedDynamics { g: DMatrix::identity(n, n), ..dyn0.clone() };
        let (a, q) = discretize(&dyn1).unwrap();
        assert_eq!(a, DMatrix::identity(n, n));
        assert_abs_diff_eq!(q, DMatrix::identity(n, n) * 0.001, epsilon = 1e-18);

        let bad = LinearizedDynamics { dt: 0.0, ..dyn0 };
        assert!(matches!(discretize(&bad), Err(Error::InvalidTimeStep(_))));
    }

    #[test]
    fn first_order_transition_within_bound_of_exponential() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let f = random_matrix(&mut rng, 15, 15, 3.0);
            for &dt in &[1e-3, 1e-2, 5e-2] {
                let dynamics = LinearizedDynamics {
                    f: f.clone(),
                    g: DMatrix::zeros(15, 1),
                    h: DMatrix::zeros(1, 1),
                    dt,
                };
                let (a, _) = discretize(&dynamics).unwrap();
                let exact = expm(&(&f * dt));
                let fnorm = f.norm();
                let bound = fnorm * fnorm * dt * dt * (fnorm * dt).exp();
                assert!((a - exact).norm() <= bound);
            }
        }
    }

    #[test]
    fn predict_covariance_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = random_psd(&mut rng, 6);
        let i = DMatrix::identity(6, 6);
        let z = DMatrix::zeros(6, 6);
        assert_abs_diff_eq!(predict_covariance(&p, &i, &z), p.clone(), epsilon = 1e-15);
        let q = random_psd(&mut rng, 6);
        assert_abs_diff_eq!(predict_covariance(&z, &random_matrix(&mut rng, 6, 6, 1.0), &q), q);
        for _ in 0..100 {
            let p = random_psd(&mut rng, 8);
            let a = random_matrix(&mut rng, 8, 8, 2.0);
            let q = random_psd(&mut rng, 8);
            let out = predict_covariance(&p, &a, &q);
            assert_eq!(out.clone(), out.transpose());
            assert!(out.symmetric_eigen().eigenvalues.min() >= -1e-10);
        }
    }

    #[test]
    fn scalar_correction_by_hand() {
        let mut b = GaussianBelief::new(DVector::from_element(1, 0.0), DMatrix::identity(1, 1)).unwrap();
        let meas = LinearizedMeasurement {
            c: DMatrix::identity(1, 1),
            d: DMatrix::identity(1, 1),
            r: DMatrix::identity(1, 1),
            innovation: DVector::from_element(1, 1.0),
        };
        assert!(correct(&mut b, &meas).unwrap().applied());
        assert_abs_diff_eq!(b.mean[0], 0.5);
        assert_abs_diff_eq!(b.covariance[(0, 0)], 0.5);
    }

    #[test]
    fn empty_or_zero_measurement_leaves_belief() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = random_psd(&mut rng, 5);
        let mean = DVector::from_fn(5, |i, _| i as f64);
        let mut b = GaussianBelief::new(mean.clone(), p.clone()).unwrap();
        let empty = LinearizedMeasurement {
            c: DMatrix::zeros(0, 5),
            d: DMatrix::zeros(0, 0),
            r: DMatrix::zeros(0, 0),
            innovation: DVector::zeros(0),
        };
        correct(&mut b, &empty).unwrap();
        assert_eq!(b.mean, mean);
        assert_eq!(b.covariance, p);

        let zero_rows = LinearizedMeasurement {
            c: DMatrix::zeros(2, 5),
            d: DMatrix::identity(2, 2),
            r: DMatrix::identity(2, 2),
            innovation: DVector::from_element(2, 3.0),
        };
        correct(&mut b, &zero_rows).unwrap();
        assert_eq!(b.mean, mean);
        assert_abs_diff_eq!(b.covariance, p, epsilon = 1e-15);
    }

    #[test]
    fn zero_innovation_contracts() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let p = random_psd(&mut rng, 6);
            let mean = DVector::from_element(6, 1.0);
            let mut b = GaussianBelief::new(mean.clone(), p.clone()).unwrap();
            let meas = LinearizedMeasurement {
                c: random_matrix(&mut rng, 3, 6, 1.0),
                d: random_matrix(&mut rng, 3, 4, 1.0),
                r: random_psd(&mut rng, 4),
                innovation: DVector::zeros(3),
            };
            correct(&mut b, &meas).unwrap();
            assert_eq!(b.mean, mean);
            assert!(b.covariance.trace() <= p.trace() + 1e-12);
            assert!(b.covariance.clone().symmetric_eigen().eigenvalues.min() >= -1e-10);
        }
    }

    #[test]
    fn exact_full_state_measurement_removes_error() {
        let truth = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let mut b = GaussianBelief::new(DVector::zeros(3), DMatrix::identity(3, 3)).unwrap();
        let meas = LinearizedMeasurement {
            c: DMatrix::identity(3, 3),
            d: DMatrix::identity(3, 3),
            r: DMatrix::zeros(3, 3),
            innovation: truth.clone(),
        };
        correct(&mut b, &meas).unwrap();
        assert_abs_diff_eq!(b.mean, truth, epsilon = 1e-15);
        assert!(b.covariance.amax() < 1e-15);
    }

    #[test]
    fn degenerate_geometry_is_skipped() {
        let mut b = GaussianBelief::new(DVector::zeros(2), DMatrix::identity(2, 2)).unwrap();
        // Two identical rows with no measurement noise: S is singular.
        let meas = LinearizedMeasurement {
            c: DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 1.0, 0.0]),
            d: DMatrix::identity(2, 2),
            r: DMatrix::zeros(2, 2),
            innovation: DVector::from_vec(vec![1.0, 1.0]),
        };
        let outcome = correct(&mut b, &meas).unwrap();
        assert!(matches!(outcome, CorrectionOutcome::Skipped { .. }));
        assert_eq!(b.mean, DVector::zeros(2));
    }

    #[test]
    fn identity_reset_hook_changes_nothing() {
        struct IdentityReset;
        impl ErrorReset<DVector<f64>> for IdentityReset {
            fn reset(&self, _: &DVector<f64>, delta: &DVector<f64>, cov: &mut DMatrix<f64>) {
                let g = DMatrix::identity(delta.len(), delta.len());
                *cov = &g * &*cov * g.transpose();
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = random_psd(&mut rng, 4);
        let meas = LinearizedMeasurement {
            c: random_matrix(&mut rng, 2, 4, 1.0),
            d: DMatrix::identity(2, 2),
            r: DMatrix::identity(2, 2) * 0.1,
            innovation: DVector::from_vec(vec![0.3, -0.2]),
        };
        let mut a = GaussianBelief::new(DVector::zeros(4), p.clone()).unwrap();
        let mut b = a.clone();
        correct(&mut a, &meas).unwrap();
        correct_with_reset(&mut b, &meas, &IdentityReset).unwrap();
        assert_abs_diff_eq!(a.mean, b.mean, epsilon = 1e-12);
        assert_abs_diff_eq!(a.covariance, b.covariance, epsilon = 1e-12);
    }

    #[test]
    fn interleaved_predict_correct_stays_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut b = GaussianBelief::new(DVector::zeros(6), DMatrix::identity(6, 6)).unwrap();
        for _ in 0..500 {
            let a = DMatrix::identity(6, 6) + random_matrix(&mut rng, 6, 6, 0.05);
            let q = random_psd(&mut rng, 6) * 1e-4;
            b.covariance = predict_covariance(&b.covariance, &a, &q);
            let meas = LinearizedMeasurement {
                c: random_matrix(&mut rng, 2, 6, 1.0),
                d: DMatrix::identity(2, 2),
                r: DMatrix::identity(2, 2) * 1e-3,
                innovation: DVector::from_fn(2, |_, _| rng.random_range(-0.1..0.1)),
            };
            correct(&mut b, &meas).unwrap();
            let sym = (&b.covariance - b.covariance.transpose()).amax();
            assert!(sym <= 1e-9);
            assert!(b.covariance.clone().symmetric_eigen().eigenvalues.min() >= -1e-10);
        }
    }
}
