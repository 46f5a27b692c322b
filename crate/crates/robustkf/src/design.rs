//! Solver contract and the end-to-end design dispatcher: picks the right
//! program for the model domain and performance target, lowers it to a
//! conic solver, and recovers gain, precisions, and covariances.

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettings, DefaultSolver, IPSolver, SolverStatus as ClarabelStatus, SupportedConeT,
};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lmi::{
    self, ConicProgram, CostOptions, GainRecovery, LinKind, Norm, PrecisionBounds, SigmaRecovery,
};
use crate::model::{self, Domain, LtiModel};

/// Precisions below `INACTIVE_REL_TOL * max(vector)` are reported as
/// inactive channels (infinite covariance).
pub const INACTIVE_REL_TOL: f64 = 1e-8;
/// Condition-number threshold above which Z inversion attaches a warning.
pub const Z_COND_WARN: f64 = 1e10;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    ExactCovariance(#[serde(with = "crate::model::mat_rows")] DMatrix<f64>),
    TraceBound(f64),
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub max_iter: u32,
    pub verbose: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            abs_tol: 1e-8,
            rel_tol: 1e-8,
            max_iter: 200,
            verbose: false,
        }
    }
}

/// Performance target plus objective shape for one design run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DesignSpec {
    pub target: Target,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    /// Diagonal of Wq; identity when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wq: Option<Vec<f64>>,
    /// Diagonal of Wr; identity when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wr: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bounds: Option<PrecisionBounds>,
    #[serde(default)]
    pub solver: SolverOptions,
}

fn default_gamma() -> f64 {
    1.0
}
fn default_lambda() -> f64 {
    2.0
}

impl DesignSpec {
    pub fn trace_bound(theta: f64) -> Self {
        DesignSpec {
            target: Target::TraceBound(theta),
            gamma: 1.0,
            lambda: 2.0,
            wq: None,
            wr: None,
            bounds: None,
            solver: SolverOptions::default(),
        }
    }

    pub fn exact_covariance(sigma: DMatrix<f64>) -> Self {
        DesignSpec {
            target: Target::ExactCovariance(sigma),
            gamma: 1.0,
            lambda: 2.0,
            wq: None,
            wr: None,
            bounds: None,
            solver: SolverOptions::default(),
        }
    }

    pub fn cost_options(&self, m: usize, p: usize) -> Result<CostOptions> {
        let norm = Norm::from_lambda(self.lambda)?;
        let wq = match &self.wq {
            Some(w) => DVector::from_vec(w.clone()),
            None => DVector::from_element(m, 1.0),
        };
        let wr = match &self.wr {
            Some(w) => DVector::from_vec(w.clone()),
            None => DVector::from_element(p, 1.0),
        };
        Ok(CostOptions {
            gamma: self.gamma,
            norm,
            wq,
            wr,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn from_path(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        match path.extension().and_then(|e| e.to_str()) {
            Some("toml") => toml::from_str(&text).map_err(|e| Error::Parse(e.to_string())),
            _ => Self::from_json(&text),
        }
    }

    /// Trace value the verification oracle is measured against.
    pub fn trace_target(&self) -> f64 {
        match &self.target {
            Target::TraceBound(theta) => *theta,
            Target::ExactCovariance(sigma) => sigma.trace(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolveStatus {
    Optimal,
    NearOptimal,
    Infeasible,
    IterationLimit,
    NumericalFailure,
}

/// Raw solver output: one value per declared scalar variable.
#[derive(Debug, Clone)]
pub struct RawSolution {
    pub status: SolveStatus,
    pub x: Vec<f64>,
    pub objective: f64,
    pub iterations: u32,
    pub solve_time: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DesignSolution {
    #[serde(with = "crate::model::mat_rows")]
    pub k: DMatrix<f64>,
    pub eta: Vec<f64>,
    pub zeta: Vec<f64>,
    /// Process noise variances; `None` marks an inactive channel
    /// (unbounded tolerable covariance).
    pub q_diag: Vec<Option<f64>>,
    /// Sensor noise variances; `None` marks an inactive sensor.
    pub r_diag: Vec<Option<f64>>,
    pub inactive_channels: Vec<usize>,
    pub inactive_sensors: Vec<usize>,
    #[serde(with = "crate::model::mat_rows")]
    pub sigma_inf: DMatrix<f64>,
    pub objective: f64,
    pub solver_status: SolveStatus,
    pub iterations: u32,
    pub solve_time: f64,
    pub warnings: Vec<String>,
    /// Flat solver assignment, kept so feasibility can be re-certified
    /// against the rebuilt program.
    pub assignment: Vec<f64>,
}

impl DesignSolution {
    /// Active-sensor index set (zeta above the inactivity threshold).
    pub fn active_sensors(&self) -> Vec<usize> {
        (0..self.zeta.len())
            .filter(|i| !self.inactive_sensors.contains(i))
            .collect()
    }

    /// Diagonal process covariance; errors if any channel is inactive.
    pub fn q_matrix(&self) -> Result<DMatrix<f64>> {
        let diag: Option<Vec<f64>> = self.q_diag.iter().copied().collect();
        match diag {
            Some(d) => Ok(DMatrix::from_diagonal(&DVector::from_vec(d))),
            None => Err(Error::NumericalFailure(
                "process channel with unbounded covariance; oracle undefined".into(),
            )),
        }
    }

    /// Diagonal sensor covariance restricted to active sensors, together
    /// with the reduced C and K.
    pub fn active_measurement(
        &self,
        mdl: &LtiModel,
    ) -> (Vec<usize>, DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
        let active = self.active_sensors();
        let c_a = DMatrix::from_fn(active.len(), mdl.n(), |i, j| mdl.c[(active[i], j)]);
        let k_a = DMatrix::from_fn(mdl.n(), active.len(), |i, j| self.k[(i, active[j])]);
        let r_a = DMatrix::from_diagonal(&DVector::from_fn(active.len(), |i, _| {
            self.r_diag[active[i]].expect("active sensor has finite covariance")
        }));
        (active, c_a, k_a, r_a)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("solution serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }
}

// ---------------------------------------------------------------------------
// Lowering to the conic solver
// ---------------------------------------------------------------------------

struct Triplets {
    nrows: usize,
    entries: Vec<(usize, usize, f64)>,
    b: Vec<f64>,
}

impl Triplets {
    fn new() -> Self {
        Triplets {
            nrows: 0,
            entries: vec![],
            b: vec![],
        }
    }

    /// Appends the row `s_row = expr` in `Ax + s = b` form, i.e.
    /// A[row, i] = -coeff_i and b[row] = constant.
    fn push_expr(&mut self, expr: &lmi::LinExpr, scale: f64) {
        let row = self.nrows;
        for &(i, c) in &expr.terms {
            self.entries.push((row, i, -c * scale));
        }
        self.b.push(expr.constant * scale);
        self.nrows += 1;
    }

    fn into_csc(self, ncols: usize) -> (CscMatrix<f64>, Vec<f64>) {
        let mut entries = self.entries;
        entries.sort_by_key(|&(r, c, _)| (c, r));
        let mut colptr = vec![0usize; ncols + 1];
        let mut rowval = Vec::with_capacity(entries.len());
        let mut nzval = Vec::with_capacity(entries.len());
        for &(r, c, v) in &entries {
            colptr[c + 1] += 1;
            rowval.push(r);
            nzval.push(v);
        }
        for c in 0..ncols {
            colptr[c + 1] += colptr[c];
        }
        (
            CscMatrix::new(self.nrows, ncols, colptr, rowval, nzval),
            self.b,
        )
    }
}

/// Solves a conic program with any-interior-point semantics: PSD blocks,
/// second-order cones, and linear constraints, linear objective.
pub fn solve(program: &ConicProgram, options: &SolverOptions) -> Result<RawSolution> {
    let ncols = program.num_scalars();
    let mut trip = Triplets::new();
    let mut cones: Vec<SupportedConeT<f64>> = vec![];

    let eqs: Vec<_> = program
        .linear_constraints
        .iter()
        .filter(|c| c.kind == LinKind::EqZero)
        .collect();
    if !eqs.is_empty() {
        for c in &eqs {
            trip.push_expr(&c.expr, 1.0);
        }
        cones.push(SupportedConeT::ZeroConeT(eqs.len()));
    }

    let ineqs: Vec<_> = program
        .linear_constraints
        .iter()
        .filter(|c| c.kind == LinKind::Nonneg)
        .collect();
    if !ineqs.is_empty() {
        for c in &ineqs {
            trip.push_expr(&c.expr, 1.0);
        }
        cones.push(SupportedConeT::NonnegativeConeT(ineqs.len()));
    }

    for soc in &program.soc_constraints {
        trip.push_expr(&soc.t, 1.0);
        for e in &soc.v {
            trip.push_expr(e, 1.0);
        }
        cones.push(SupportedConeT::SecondOrderConeT(1 + soc.v.len()));
    }

    let rt2 = std::f64::consts::SQRT_2;
    for blk in &program.psd_blocks {
        // svec: upper triangle, column-major, off-diagonal scaled by sqrt(2)
        for col in 0..blk.dim {
            for row in 0..=col {
                let scale = if row == col { 1.0 } else { rt2 };
                trip.push_expr(blk.entry(row, col), scale);
            }
        }
        cones.push(SupportedConeT::PSDTriangleConeT(blk.dim));
    }

    let (a, b) = trip.into_csc(ncols);
    let p = CscMatrix::zeros((ncols, ncols));
    let mut q = vec![0.0; ncols];
    for &(i, c) in &program.objective.terms {
        q[i] += c;
    }

    let settings = DefaultSettings {
        verbose: options.verbose,
        max_iter: options.max_iter,
        tol_gap_abs: options.abs_tol,
        tol_gap_rel: options.rel_tol,
        tol_feas: options.abs_tol,
        ..Default::default()
    };
    let mut solver = DefaultSolver::new(&p, &q, &a, &b, &cones, settings)
        .map_err(|e| Error::NumericalFailure(format!("solver setup: {e:?}")))?;
    solver.solve();

    let status = match solver.solution.status {
        ClarabelStatus::Solved => SolveStatus::Optimal,
        ClarabelStatus::AlmostSolved => SolveStatus::NearOptimal,
        ClarabelStatus::PrimalInfeasible
        | ClarabelStatus::DualInfeasible
        | ClarabelStatus::AlmostPrimalInfeasible
        | ClarabelStatus::AlmostDualInfeasible => SolveStatus::Infeasible,
        ClarabelStatus::MaxIterations | ClarabelStatus::MaxTime => SolveStatus::IterationLimit,
        _ => SolveStatus::NumericalFailure,
    };

    Ok(RawSolution {
        status,
        x: solver.solution.x.clone(),
        objective: solver.solution.obj_val + program.objective.constant,
        iterations: solver.solution.iterations,
        solve_time: solver.solution.solve_time,
    })
}

// ---------------------------------------------------------------------------
// Dispatcher and recovery
// ---------------------------------------------------------------------------

/// Selects the program matching the model domain and target type.
pub fn build_program(mdl: &LtiModel, spec: &DesignSpec) -> Result<ConicProgram> {
    let cost = spec.cost_options(mdl.m(), mdl.p())?;
    let bounds = spec.bounds.as_ref();
    match (&mdl.domain, &spec.target) {
        (Domain::Discrete, Target::ExactCovariance(sigma)) => {
            lmi::build_thm1(mdl, sigma, &cost, bounds)
        }
        (Domain::Discrete, Target::TraceBound(theta)) => {
            lmi::build_cor1(mdl, *theta, &cost, bounds)
        }
        (Domain::Continuous, Target::ExactCovariance(sigma)) => {
            lmi::build_thm2(mdl, sigma, &cost, bounds)
        }
        (Domain::Continuous, Target::TraceBound(theta)) => {
            lmi::build_cor2(mdl, *theta, &cost, bounds)
        }
    }
}

/// Flags entries below `INACTIVE_REL_TOL * max` as inactive and inverts
/// the rest into variances.
fn precisions_to_variances(v: &DVector<f64>) -> (Vec<Option<f64>>, Vec<usize>) {
    let max = v.iter().cloned().fold(0.0, f64::max);
    let eps = INACTIVE_REL_TOL * max;
    let mut diag = Vec::with_capacity(v.len());
    let mut inactive = vec![];
    for (i, &p) in v.iter().enumerate() {
        if p > eps && p > 0.0 {
            diag.push(Some(1.0 / p));
        } else {
            diag.push(None);
            inactive.push(i);
        }
    }
    (diag, inactive)
}

/// End-to-end design: validate, build, solve, recover.
pub fn design_robust_filter(mdl: &LtiModel, spec: &DesignSpec) -> Result<DesignSolution> {
    let report = model::validate_model(mdl)?;
    if !report.observable {
        return Err(Error::InvalidModel(format!(
            "(C, A) is not observable (rank {} < {})",
            report.observability_rank,
            mdl.n()
        )));
    }

    let program = build_program(mdl, spec)?;
    let raw = solve(&program, &spec.solver)?;
    match raw.status {
        SolveStatus::Optimal | SolveStatus::NearOptimal => {}
        SolveStatus::Infeasible => {
            let suggestion = match spec.target {
                Target::ExactCovariance(_) => Some(
                    "the exact-covariance target admits no feasible gain; \
                     consider a trace-bound target instead"
                        .to_string(),
                ),
                Target::TraceBound(_) => Some("relax theta or the precision bounds".to_string()),
            };
            return Err(Error::Infeasible { suggestion });
        }
        SolveStatus::IterationLimit => {
            return Err(Error::IterationLimit {
                iterations: raw.iterations as usize,
                context: "conic solve".into(),
            });
        }
        SolveStatus::NumericalFailure => {
            return Err(Error::NumericalFailure("conic solve stagnated".into()));
        }
    }

    let mut warnings = vec![];
    let recovery = &program.recovery;
    let (k, sigma_inf) = match (&recovery.gain, &recovery.sigma) {
        (GainRecovery::Direct(kref), SigmaRecovery::Fixed(sigma)) => {
            (program.extract(*kref, &raw.x), sigma.clone())
        }
        (GainRecovery::FromZ { w, z }, SigmaRecovery::InverseOfZ(_)) => {
            let w_val = program.extract(*w, &raw.x);
            let z_val = program.extract(*z, &raw.x);
            let eig = z_val.clone().symmetric_eigen();
            let lam_min = eig.eigenvalues.min();
            let lam_max = eig.eigenvalues.max();
            if lam_min <= 0.0 {
                return Err(Error::NumericalFailure(format!(
                    "recovered Z is singular (min eigenvalue {lam_min:.3e})"
                )));
            }
            let cond = lam_max / lam_min;
            if cond > Z_COND_WARN {
                warnings.push(format!(
                    "Z condition number {cond:.3e} exceeds {Z_COND_WARN:.0e}; \
                     recovered K and Sigma may lose accuracy"
                ));
            }
            let inv_vals = DVector::from_fn(eig.eigenvalues.len(), |i, _| 1.0 / eig.eigenvalues[i]);
            let z_inv = &eig.eigenvectors
                * DMatrix::from_diagonal(&inv_vals)
                * eig.eigenvectors.transpose();
            let z_inv = 0.5 * (&z_inv + z_inv.transpose());
            (&z_inv * &w_val, z_inv)
        }
        _ => unreachable!("recovery map pairs gain and sigma consistently"),
    };

    let eta = program.extract_vector(recovery.eta, &raw.x);
    let zeta = program.extract_vector(recovery.zeta, &raw.x);
    let (q_diag, inactive_channels) = precisions_to_variances(&eta);
    let (r_diag, inactive_sensors) = precisions_to_variances(&zeta);

    Ok(DesignSolution {
        k,
        eta: eta.iter().cloned().collect(),
        zeta: zeta.iter().cloned().collect(),
        q_diag,
        r_diag,
        inactive_channels,
        inactive_sensors,
        sigma_inf,
        objective: raw.objective,
        solver_status: raw.status,
        iterations: raw.iterations,
        solve_time: raw.solve_time,
        warnings,
        assignment: raw.x,
    })
}
