//! Independent, non-SDP oracles that certify a design actually delivers
//! the claimed steady-state performance: Joseph fixed-point iteration,
//! Riccati solutions for the optimal filter, a dense Lyapunov solver, and
//! eigenvalue checks of the returned LMI blocks.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::design::{self, DesignSolution, DesignSpec, SolveStatus};
use crate::error::{Error, Result};
use crate::lmi::ConicProgram;
use crate::model::{self, Domain, LtiModel};

pub const FIXED_POINT_TOL: f64 = 1e-12;
pub const FIXED_POINT_MAX_ITER: usize = 100_000;
/// Default absolute slack allowed on the trace budget.
pub const TRACE_TOL: f64 = 1e-4;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlockResidual {
    pub name: String,
    pub min_eig: f64,
    pub block_norm: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerificationReport {
    /// Steady-state covariance from the fixed-point / Lyapunov oracle.
    #[serde(with = "crate::model::mat_rows")]
    pub oracle_sigma: DMatrix<f64>,
    /// Trace budget minus the oracle trace; negative means missed budget.
    pub trace_margin: f64,
    pub stable: bool,
    pub lmi_min_eig: Vec<BlockResidual>,
    /// Trace of the optimal-filter Riccati solution under the recovered
    /// noise covariances; lower bound for the designed gain's trace.
    pub riccati_trace: f64,
    pub passed: bool,
}

impl VerificationReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

// ---------------------------------------------------------------------------
// Discrete-time oracles
// ---------------------------------------------------------------------------

/// Fixed point of the posterior-covariance recursion
/// S <- (I-KC)(A S A' + B Q B')(I-KC)' + K R K', started from zero.
pub fn joseph_fixed_point(
    mdl: &LtiModel,
    k: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<DMatrix<f64>> {
    joseph_fixed_point_raw(&mdl.a, &mdl.b, &mdl.c, k, q, r, tol, max_iter)
}

#[allow(clippy::too_many_arguments)]
pub fn joseph_fixed_point_raw(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    c: &DMatrix<f64>,
    k: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let ikc = DMatrix::identity(n, n) - k * c;
    let closed = &ikc * a;
    let rho = model::spectral_radius(&closed);
    if rho >= 1.0 {
        return Err(Error::Unstable(format!(
            "spectral radius of (I-KC)A is {rho:.6} >= 1"
        )));
    }
    let bqb = b * q * b.transpose();
    let krk = k * r * k.transpose();
    let mut sigma = DMatrix::zeros(n, n);
    for _ in 0..max_iter {
        let next = &ikc * (a * &sigma * a.transpose() + &bqb) * ikc.transpose() + &krk;
        let delta = (&next - &sigma).norm();
        sigma = next;
        if delta < tol * (1.0 + sigma.norm()) {
            return Ok(0.5 * (&sigma + sigma.transpose()));
        }
    }
    Err(Error::IterationLimit {
        iterations: max_iter,
        context: "Joseph fixed-point iteration".into(),
    })
}

/// Steady-state optimal filter for given (Q, R): iterates the
/// predict/update recursion and returns the posterior covariance and the
/// associated gain. This is the minimum achievable posterior covariance.
pub fn dare_steady_state(
    mdl: &LtiModel,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    dare_steady_state_raw(&mdl.a, &mdl.b, &mdl.c, q, r)
}

pub fn dare_steady_state_raw(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    c: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let n = a.nrows();
    let bqb = b * q * b.transpose();
    let identity = DMatrix::identity(n, n);
    let mut posterior = DMatrix::zeros(n, n);
    for _ in 0..FIXED_POINT_MAX_ITER {
        let prior = a * &posterior * a.transpose() + &bqb;
        let innovation = c * &prior * c.transpose() + r;
        let k = innovation
            .clone()
            .cholesky()
            .map(|ch| {
                // K = P- C' S^-1 via solving S K' = C P-
                let kt = ch.solve(&(c * &prior));
                kt.transpose()
            })
            .ok_or_else(|| {
                Error::NumericalFailure("singular innovation covariance in Riccati".into())
            })?;
        let ikc = &identity - &k * c;
        let next = &ikc * &prior * ikc.transpose() + &k * r * k.transpose();
        let delta = (&next - &posterior).norm();
        posterior = next;
        if delta < FIXED_POINT_TOL * (1.0 + posterior.norm()) {
            return Ok((0.5 * (&posterior + posterior.transpose()), k));
        }
    }
    Err(Error::IterationLimit {
        iterations: FIXED_POINT_MAX_ITER,
        context: "Riccati fixed-point iteration".into(),
    })
}

// ---------------------------------------------------------------------------
// Continuous-time oracles
// ---------------------------------------------------------------------------

/// Solves F S + S F' + M = 0 by Kronecker vectorization. Requires F
/// Hurwitz; intended for the small dense systems this crate handles.
pub fn lyapunov_solve(f: &DMatrix<f64>, m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = f.nrows();
    let max_re = model::max_real_eig(f);
    if max_re >= 0.0 {
        return Err(Error::Unstable(format!(
            "Lyapunov operator not Hurwitz (max eigenvalue real part {max_re:.6e})"
        )));
    }
    // (I (x) F + F (x) I) vec(S) = -vec(M), column-major vec
    let mut op = DMatrix::zeros(n * n, n * n);
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                // I (x) F: row (j*n + i), col (j*n + k) += F[i,k]
                op[(j * n + i, j * n + k)] += f[(i, k)];
                // F (x) I: row (j*n + i), col (k*n + i) += F[j,k]
                op[(j * n + i, k * n + i)] += f[(j, k)];
            }
        }
    }
    let rhs = DVector::from_fn(n * n, |idx, _| -m[(idx % n, idx / n)]);
    let sol = op
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::NumericalFailure("Lyapunov operator is singular".into()))?;
    let sigma = DMatrix::from_fn(n, n, |i, j| sol[j * n + i]);
    Ok(0.5 * (&sigma + sigma.transpose()))
}

/// Steady-state error covariance of the continuous filter with a given
/// gain: solves (A-KC) S + S (A-KC)' + K R K' + B Q B' = 0.
pub fn care_lyapunov_steady_state(
    mdl: &LtiModel,
    k: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    care_lyapunov_steady_state_raw(&mdl.a, &mdl.b, &mdl.c, k, q, r)
}

pub fn care_lyapunov_steady_state_raw(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    c: &DMatrix<f64>,
    k: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let f = a - k * c;
    let m = k * r * k.transpose() + b * q * b.transpose();
    lyapunov_solve(&f, &m)
}

/// Optimal Kalman-Bucy steady-state covariance for given (Q, R) by
/// Newton iteration on the gain, seeded with a stabilizing gain.
pub fn care_optimal_steady_state_raw(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    c: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    k0: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let r_inv = r
        .clone()
        .cholesky()
        .map(|ch| ch.inverse())
        .ok_or_else(|| Error::NumericalFailure("R must be positive definite".into()))?;
    let mut k = k0.clone();
    let mut sigma = care_lyapunov_steady_state_raw(a, b, c, &k, q, r)?;
    for _ in 0..200 {
        let k_next = &sigma * c.transpose() * &r_inv;
        let sigma_next = care_lyapunov_steady_state_raw(a, b, c, &k_next, q, r)?;
        let delta = (&sigma_next - &sigma).norm();
        sigma = sigma_next;
        k = k_next;
        if delta < FIXED_POINT_TOL * (1.0 + sigma.norm()) {
            return Ok((sigma, k));
        }
    }
    Err(Error::IterationLimit {
        iterations: 200,
        context: "Kalman-Bucy Newton iteration".into(),
    })
}

// ---------------------------------------------------------------------------
// LMI residuals and the full report
// ---------------------------------------------------------------------------

/// Minimum eigenvalue of every PSD block at the given assignment,
/// independent of the solver's own residual bookkeeping.
pub fn check_lmi_residual(program: &ConicProgram, assignment: &[f64]) -> Vec<BlockResidual> {
    program
        .psd_blocks
        .iter()
        .map(|blk| {
            let m = blk.eval(assignment);
            let min_eig = m.symmetric_eigen().eigenvalues.min();
            BlockResidual {
                name: blk.name.clone(),
                min_eig,
                block_norm: blk.eval(assignment).norm(),
            }
        })
        .collect()
}

/// Runs the matching steady-state oracle on the recovered (K, Q, R),
/// compares against the spec's trace target, recomputes the LMI residuals,
/// and reports the optimal-filter Riccati trace for the same noise.
///
/// Inactive sensors (infinite covariance) are excluded from the oracle;
/// their gain columns are certified near zero by the design.
pub fn verify_solution(
    mdl: &LtiModel,
    solution: &DesignSolution,
    spec: &DesignSpec,
) -> Result<VerificationReport> {
    if !matches!(
        solution.solver_status,
        SolveStatus::Optimal | SolveStatus::NearOptimal
    ) {
        return Err(Error::InvalidArgument(
            "verification requires an Optimal or NearOptimal solution".into(),
        ));
    }
    let q = solution.q_matrix()?;
    let (_, c_a, k_a, r_a) = solution.active_measurement(mdl);

    let (oracle_sigma, stable) = match mdl.domain {
        Domain::Discrete => {
            let sigma = joseph_fixed_point_raw(
                &mdl.a,
                &mdl.b,
                &c_a,
                &k_a,
                &q,
                &r_a,
                FIXED_POINT_TOL,
                FIXED_POINT_MAX_ITER,
            )?;
            let closed = (DMatrix::identity(mdl.n(), mdl.n()) - &k_a * &c_a) * &mdl.a;
            (sigma, model::spectral_radius(&closed) < 1.0)
        }
        Domain::Continuous => {
            let sigma = care_lyapunov_steady_state_raw(&mdl.a, &mdl.b, &c_a, &k_a, &q, &r_a)?;
            let closed = &mdl.a - &k_a * &c_a;
            (sigma, model::is_hurwitz(&closed))
        }
    };

    let trace_margin = spec.trace_target() - oracle_sigma.trace();

    let riccati_trace = match mdl.domain {
        Domain::Discrete => dare_steady_state_raw(&mdl.a, &mdl.b, &c_a, &q, &r_a)?
            .0
            .trace(),
        Domain::Continuous => care_optimal_steady_state_raw(&mdl.a, &mdl.b, &c_a, &q, &r_a, &k_a)?
            .0
            .trace(),
    };

    let program = design::build_program(mdl, spec)?;
    let lmi_min_eig = check_lmi_residual(&program, &solution.assignment);
    let blocks_ok = lmi_min_eig
        .iter()
        .all(|b| b.min_eig >= -1e-7 * b.block_norm.max(1.0));

    let passed = stable && trace_margin >= -TRACE_TOL && blocks_ok;
    Ok(VerificationReport {
        oracle_sigma,
        trace_margin,
        stable,
        lmi_min_eig,
        riccati_trace,
        passed,
    })
}
