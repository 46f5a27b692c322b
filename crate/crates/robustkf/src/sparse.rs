//! Sparse sensing architectures: l1 precision minimization, iterative
//! reweighting, and sensor pruning with oracle re-verification.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::design::{design_robust_filter, DesignSolution, DesignSpec};
use crate::error::{Error, Result};
use crate::model::{Domain, LtiModel};
use crate::verify::{
    care_lyapunov_steady_state_raw, joseph_fixed_point_raw, FIXED_POINT_MAX_ITER, FIXED_POINT_TOL,
    TRACE_TOL,
};

/// The l1 path to exact zeros runs the interior-point solver tighter
/// than the general-purpose default, otherwise prunable precisions
/// stall a few orders of magnitude above the inactivity threshold.
pub const SPARSE_TOL: f64 = 1e-9;
pub const SPARSE_MAX_ITER: u32 = 500;

/// Gain columns of pruned sensors are zeroed exactly; this bound only
/// documents the invariant checked in tests.
pub const COL_ZERO_TOL: f64 = 0.0;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SparsityResult {
    pub active_sensors: Vec<usize>,
    pub inactive_sensors: Vec<usize>,
    /// Gain with the columns of inactive sensors zeroed.
    #[serde(with = "crate::model::mat_rows")]
    pub pruned_gain: DMatrix<f64>,
    /// Per-iteration zeta vectors (single entry for non-reweighted runs).
    pub zeta_history: Vec<Vec<f64>>,
    pub sparsity_level: usize,
    /// Steady-state error covariance of the pruned filter, recomputed by
    /// the fixed-point oracle on the active sensor subset.
    pub pruned_trace: f64,
}

/// One-shot l1 design. Requires `spec.lambda == 1`; runs the conic
/// solver at tightened tolerances so that prunable sensors land below
/// the inactivity threshold instead of hovering just above it.
pub fn sparse_design(mdl: &LtiModel, spec: &DesignSpec) -> Result<DesignSolution> {
    if spec.lambda != 1.0 {
        return Err(Error::InvalidArgument(format!(
            "sparse_design requires lambda = 1, got {}",
            spec.lambda
        )));
    }
    let mut spec = spec.clone();
    spec.solver.abs_tol = spec.solver.abs_tol.min(SPARSE_TOL);
    spec.solver.rel_tol = spec.solver.rel_tol.min(SPARSE_TOL);
    spec.solver.max_iter = spec.solver.max_iter.max(SPARSE_MAX_ITER);
    design_robust_filter(mdl, &spec)
}

/// Iteratively reweighted l1: after each solve the sensor weights are
/// updated to w_i = 1/(zeta_i + eps) (normalized to unit mean so the
/// eta/zeta trade-off keeps its scale), which pushes near-zero
/// precisions to exact zeros. Stops when the active set repeats.
pub fn reweighted_l1(
    mdl: &LtiModel,
    spec: &DesignSpec,
    max_iters: usize,
    eps_reweight: Option<f64>,
) -> Result<(DesignSolution, SparsityResult)> {
    if max_iters == 0 {
        return Err(Error::InvalidArgument("max_iters must be >= 1".into()));
    }
    let base_wr = match &spec.wr {
        Some(w) => DVector::from_vec(w.clone()),
        None => DVector::from_element(mdl.p(), 1.0),
    };

    let mut solution = sparse_design(mdl, spec)?;
    let mut history = vec![solution.zeta.clone()];
    let zeta_max = solution.zeta.iter().cloned().fold(0.0f64, f64::max);
    let eps = eps_reweight.unwrap_or(1e-6 * zeta_max);
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "eps_reweight must be positive, got {eps}"
        )));
    }

    for _ in 1..max_iters {
        let prev_active = solution.active_sensors();
        let mut w: Vec<f64> = solution.zeta.iter().map(|z| 1.0 / (z + eps)).collect();
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        for (wi, base) in w.iter_mut().zip(base_wr.iter()) {
            *wi = *wi / mean * base;
        }
        let mut next_spec = spec.clone();
        next_spec.wr = Some(w);
        let next = sparse_design(mdl, &next_spec)?;
        history.push(next.zeta.clone());
        let stabilized = next.active_sensors() == prev_active;
        solution = next;
        if stabilized {
            break;
        }
    }

    let result =
        prune_sensors(mdl, &solution, spec, inactivity_threshold(&solution)).map(|mut r| {
            r.zeta_history = history;
            r
        })?;
    Ok((solution, result))
}

/// Absolute zeta threshold corresponding to the relative inactivity rule.
pub fn inactivity_threshold(solution: &DesignSolution) -> f64 {
    let zeta_max = solution.zeta.iter().cloned().fold(0.0f64, f64::max);
    crate::design::INACTIVE_REL_TOL * zeta_max
}

/// Marks every sensor with `zeta < threshold` inactive, zeroes the
/// corresponding gain columns, and re-runs the steady-state oracle on
/// the reduced measurement set to confirm the trace budget still holds.
pub fn prune_sensors(
    mdl: &LtiModel,
    solution: &DesignSolution,
    spec: &DesignSpec,
    threshold: f64,
) -> Result<SparsityResult> {
    let p = mdl.p();
    if solution.zeta.len() != p {
        return Err(Error::DimensionMismatch {
            matrix: "zeta".into(),
            expected: format!("{p}"),
            actual: format!("{}", solution.zeta.len()),
        });
    }
    let inactive: Vec<usize> = (0..p).filter(|&j| solution.zeta[j] < threshold).collect();
    let active: Vec<usize> = (0..p).filter(|j| !inactive.contains(j)).collect();
    if active.is_empty() {
        return Err(Error::InvalidArgument(
            "pruning removed every sensor; threshold too aggressive".into(),
        ));
    }

    let mut pruned_gain = solution.k.clone();
    for &j in &inactive {
        pruned_gain.column_mut(j).fill(0.0);
    }

    let q = solution.q_matrix()?;
    let c_a = DMatrix::from_fn(active.len(), mdl.n(), |i, j| mdl.c[(active[i], j)]);
    let k_a = DMatrix::from_fn(mdl.n(), active.len(), |i, j| pruned_gain[(i, active[j])]);
    let r_a = DMatrix::from_diagonal(&DVector::from_fn(active.len(), |i, _| {
        1.0 / solution.zeta[active[i]]
    }));

    let sigma = match mdl.domain {
        Domain::Discrete => joseph_fixed_point_raw(
            &mdl.a,
            &mdl.b,
            &c_a,
            &k_a,
            &q,
            &r_a,
            FIXED_POINT_TOL,
            FIXED_POINT_MAX_ITER,
        )?,
        Domain::Continuous => care_lyapunov_steady_state_raw(&mdl.a, &mdl.b, &c_a, &k_a, &q, &r_a)?,
    };
    let trace = sigma.trace();
    let budget = spec.trace_target();
    if trace > budget + TRACE_TOL {
        // report the most recently pruned sensor as the offender
        let sensor = inactive.last().copied().unwrap_or(0);
        return Err(Error::PruningRejected {
            sensor,
            trace,
            budget,
        });
    }

    Ok(SparsityResult {
        sparsity_level: inactive.len(),
        active_sensors: active,
        inactive_sensors: inactive,
        pruned_gain,
        zeta_history: vec![solution.zeta.clone()],
        pruned_trace: trace,
    })
}
