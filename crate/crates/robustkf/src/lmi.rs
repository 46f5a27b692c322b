//! Assembly of the four robustness-margin programs (exact-covariance and
//! trace-bound variants for discrete and continuous time) into a
//! solver-agnostic conic program: affine PSD blocks, second-order cones,
//! linear constraints, a linear objective, and a recovery map back to
//! engineering quantities.

use nalgebra::{DMatrix, DVector};
use serde_json::json;

use crate::error::{Error, Result};
use crate::model::{self, Domain, LtiModel};

/// Multiplier for the strict-feasibility margin on blocks whose solution
/// must be inverted during recovery (Z): margin = 1e-9 * (1 + ||A||_F).
pub const PSD_MARGIN_COEFF: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Norm {
    L1,
    L2,
}

impl Norm {
    pub fn from_lambda(lambda: f64) -> Result<Norm> {
        if lambda == 1.0 {
            Ok(Norm::L1)
        } else if lambda == 2.0 {
            Ok(Norm::L2)
        } else {
            Err(Error::UnsupportedNorm(lambda))
        }
    }

    pub fn lambda(&self) -> f64 {
        match self {
            Norm::L1 => 1.0,
            Norm::L2 => 2.0,
        }
    }
}

/// Objective parameters: J = ||Wq eta||_2 + gamma * ||Wr zeta||_lambda.
#[derive(Debug, Clone)]
pub struct CostOptions {
    pub gamma: f64,
    pub norm: Norm,
    /// Diagonal of Wq (length m).
    pub wq: DVector<f64>,
    /// Diagonal of Wr (length p).
    pub wr: DVector<f64>,
}

impl CostOptions {
    pub fn identity(m: usize, p: usize, gamma: f64, norm: Norm) -> Self {
        CostOptions {
            gamma,
            norm,
            wq: DVector::from_element(m, 1.0),
            wr: DVector::from_element(p, 1.0),
        }
    }

    fn check(&self, m: usize, p: usize) -> Result<()> {
        if self.gamma <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "gamma must be positive, got {}",
                self.gamma
            )));
        }
        if self.wq.len() != m || self.wr.len() != p {
            return Err(Error::InvalidArgument(format!(
                "weight lengths ({}, {}) do not match noise dimensions ({m}, {p})",
                self.wq.len(),
                self.wr.len()
            )));
        }
        if self.wq.iter().chain(self.wr.iter()).any(|&w| w <= 0.0) {
            return Err(Error::InvalidArgument(
                "weight diagonals must be strictly positive".into(),
            ));
        }
        Ok(())
    }
}

/// Optional per-entry upper bounds on the precisions.
#[derive(Debug, Clone, Default, serde::Serialize, serde::Deserialize)]
pub struct PrecisionBounds {
    pub eta_max: Option<Vec<f64>>,
    pub zeta_max: Option<Vec<f64>>,
}

// ---------------------------------------------------------------------------
// Expressions
// ---------------------------------------------------------------------------

/// Affine scalar expression over the program's flat variable vector.
#[derive(Debug, Clone, Default)]
pub struct LinExpr {
    pub constant: f64,
    /// (scalar index, coefficient), kept sorted and deduplicated.
    pub terms: Vec<(usize, f64)>,
}

impl LinExpr {
    pub fn constant(c: f64) -> Self {
        LinExpr {
            constant: c,
            terms: vec![],
        }
    }

    pub fn variable(idx: usize) -> Self {
        LinExpr {
            constant: 0.0,
            terms: vec![(idx, 1.0)],
        }
    }

    pub fn scale(&self, s: f64) -> Self {
        LinExpr {
            constant: self.constant * s,
            terms: self.terms.iter().map(|&(i, c)| (i, c * s)).collect(),
        }
    }

    pub fn add(&self, other: &LinExpr) -> Self {
        let mut out = self.clone();
        out.constant += other.constant;
        out.terms.extend_from_slice(&other.terms);
        out.normalize();
        out
    }

    pub fn add_scaled(&mut self, other: &LinExpr, s: f64) {
        self.constant += other.constant * s;
        self.terms
            .extend(other.terms.iter().map(|&(i, c)| (i, c * s)));
        self.normalize();
    }

    pub fn is_zero(&self) -> bool {
        self.constant == 0.0 && self.terms.is_empty()
    }

    fn normalize(&mut self) {
        self.terms.sort_by_key(|&(i, _)| i);
        let mut out: Vec<(usize, f64)> = Vec::with_capacity(self.terms.len());
        for &(i, c) in &self.terms {
            match out.last_mut() {
                Some(last) if last.0 == i => last.1 += c,
                _ => out.push((i, c)),
            }
        }
        out.retain(|&(_, c)| c != 0.0);
        self.terms = out;
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.constant + self.terms.iter().map(|&(i, c)| c * x[i]).sum::<f64>()
    }
}

/// Matrix of affine expressions, row-major.
#[derive(Debug, Clone)]
pub struct MatExpr {
    pub rows: usize,
    pub cols: usize,
    entries: Vec<LinExpr>,
}

impl MatExpr {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        MatExpr {
            rows,
            cols,
            entries: vec![LinExpr::default(); rows * cols],
        }
    }

    pub fn from_const(m: &DMatrix<f64>) -> Self {
        let mut e = MatExpr::zeros(m.nrows(), m.ncols());
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                e.entries[i * m.ncols() + j] = LinExpr::constant(m[(i, j)]);
            }
        }
        e
    }

    pub fn entry(&self, i: usize, j: usize) -> &LinExpr {
        &self.entries[i * self.cols + j]
    }

    pub fn entry_mut(&mut self, i: usize, j: usize) -> &mut LinExpr {
        &mut self.entries[i * self.cols + j]
    }

    /// C * E for a constant left factor.
    pub fn lmul(&self, c: &DMatrix<f64>) -> MatExpr {
        assert_eq!(c.ncols(), self.rows);
        let mut out = MatExpr::zeros(c.nrows(), self.cols);
        for i in 0..c.nrows() {
            for j in 0..self.cols {
                let mut acc = LinExpr::default();
                for k in 0..self.rows {
                    let w = c[(i, k)];
                    if w != 0.0 {
                        acc.add_scaled(self.entry(k, j), w);
                    }
                }
                *out.entry_mut(i, j) = acc;
            }
        }
        out
    }

    /// E * C for a constant right factor.
    pub fn rmul(&self, c: &DMatrix<f64>) -> MatExpr {
        assert_eq!(self.cols, c.nrows());
        let mut out = MatExpr::zeros(self.rows, c.ncols());
        for i in 0..self.rows {
            for j in 0..c.ncols() {
                let mut acc = LinExpr::default();
                for k in 0..self.cols {
                    let w = c[(k, j)];
                    if w != 0.0 {
                        acc.add_scaled(self.entry(i, k), w);
                    }
                }
                *out.entry_mut(i, j) = acc;
            }
        }
        out
    }

    pub fn add(&self, other: &MatExpr) -> MatExpr {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let mut out = self.clone();
        for (a, b) in out.entries.iter_mut().zip(&other.entries) {
            a.add_scaled(b, 1.0);
        }
        out
    }

    pub fn sub(&self, other: &MatExpr) -> MatExpr {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let mut out = self.clone();
        for (a, b) in out.entries.iter_mut().zip(&other.entries) {
            a.add_scaled(b, -1.0);
        }
        out
    }

    pub fn neg(&self) -> MatExpr {
        let mut out = self.clone();
        for e in &mut out.entries {
            *e = e.scale(-1.0);
        }
        out
    }

    pub fn transpose(&self) -> MatExpr {
        let mut out = MatExpr::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                *out.entry_mut(j, i) = self.entry(i, j).clone();
            }
        }
        out
    }

    /// E + E^T.
    pub fn sym(&self) -> MatExpr {
        assert_eq!(self.rows, self.cols);
        self.add(&self.transpose())
    }

    pub fn eval(&self, x: &[f64]) -> DMatrix<f64> {
        DMatrix::from_fn(self.rows, self.cols, |i, j| self.entry(i, j).eval(x))
    }

    /// Assembles a block matrix from a grid of expressions; row/column
    /// dimensions must be consistent across the grid.
    pub fn block(grid: &[Vec<MatExpr>]) -> MatExpr {
        let row_dims: Vec<usize> = grid.iter().map(|r| r[0].rows).collect();
        let col_dims: Vec<usize> = grid[0].iter().map(|e| e.cols).collect();
        let total_r: usize = row_dims.iter().sum();
        let total_c: usize = col_dims.iter().sum();
        let mut out = MatExpr::zeros(total_r, total_c);
        let mut r0 = 0;
        for (bi, row) in grid.iter().enumerate() {
            assert_eq!(row.len(), col_dims.len());
            let mut c0 = 0;
            for (bj, e) in row.iter().enumerate() {
                assert_eq!(e.rows, row_dims[bi], "block ({bi},{bj}) row dim");
                assert_eq!(e.cols, col_dims[bj], "block ({bi},{bj}) col dim");
                for i in 0..e.rows {
                    for j in 0..e.cols {
                        *out.entry_mut(r0 + i, c0 + j) = e.entry(i, j).clone();
                    }
                }
                c0 += col_dims[bj];
            }
            r0 += row_dims[bi];
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Program
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VarStructure {
    FullMatrix,
    Symmetric,
    NonnegVector,
    Scalar,
}

#[derive(Debug, Clone)]
pub struct Variable {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub structure: VarStructure,
    /// First index in the flat scalar vector.
    pub offset: usize,
}

impl Variable {
    pub fn len(&self) -> usize {
        match self.structure {
            VarStructure::Symmetric => self.rows * (self.rows + 1) / 2,
            _ => self.rows * self.cols,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat index of entry (i, j).
    pub fn index(&self, i: usize, j: usize) -> usize {
        match self.structure {
            VarStructure::Symmetric => {
                let (i, j) = if i <= j { (i, j) } else { (j, i) };
                // upper triangle, row-major
                self.offset + i * self.rows - i * (i + 1) / 2 + j
            }
            _ => self.offset + i * self.cols + j,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarRef(pub usize);

/// Symmetric affine matrix expression required to be PSD (after the
/// built-in margin shift).
#[derive(Debug, Clone)]
pub struct PsdBlock {
    pub name: String,
    pub dim: usize,
    /// Full dense entries, exactly symmetric by construction.
    pub entries: Vec<LinExpr>,
}

impl PsdBlock {
    pub fn entry(&self, i: usize, j: usize) -> &LinExpr {
        &self.entries[i * self.dim + j]
    }

    pub fn eval(&self, x: &[f64]) -> DMatrix<f64> {
        DMatrix::from_fn(self.dim, self.dim, |i, j| self.entry(i, j).eval(x))
    }
}

/// t >= ||v||_2 with affine t and v.
#[derive(Debug, Clone)]
pub struct SocConstraint {
    pub name: String,
    pub t: LinExpr,
    pub v: Vec<LinExpr>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LinKind {
    /// expr == 0
    EqZero,
    /// expr >= 0
    Nonneg,
}

#[derive(Debug, Clone)]
pub struct LinearConstraint {
    pub name: String,
    pub kind: LinKind,
    pub expr: LinExpr,
}

/// How engineering quantities are read back out of a raw solution.
#[derive(Debug, Clone)]
pub enum GainRecovery {
    /// K is a decision variable.
    Direct(VarRef),
    /// K = Z^-1 W (corollary programs).
    FromZ { w: VarRef, z: VarRef },
}

#[derive(Debug, Clone)]
pub enum SigmaRecovery {
    /// Steady-state covariance fixed by the user.
    Fixed(DMatrix<f64>),
    /// Sigma = Z^-1.
    InverseOfZ(VarRef),
}

#[derive(Debug, Clone)]
pub struct RecoveryMap {
    pub gain: GainRecovery,
    pub eta: VarRef,
    pub zeta: VarRef,
    pub sigma: SigmaRecovery,
    /// Trace-epigraph variable, present in the corollary programs.
    pub x: Option<VarRef>,
}

#[derive(Debug, Clone)]
pub struct ConicProgram {
    pub variables: Vec<Variable>,
    num_scalars: usize,
    pub psd_blocks: Vec<PsdBlock>,
    pub soc_constraints: Vec<SocConstraint>,
    pub linear_constraints: Vec<LinearConstraint>,
    pub objective: LinExpr,
    pub recovery: RecoveryMap,
}

/// Builder state; becomes a `ConicProgram` once the recovery map is known.
#[derive(Debug, Clone, Default)]
pub struct ProgramBuilder {
    variables: Vec<Variable>,
    num_scalars: usize,
    psd_blocks: Vec<PsdBlock>,
    soc_constraints: Vec<SocConstraint>,
    linear_constraints: Vec<LinearConstraint>,
    objective: LinExpr,
}

impl ProgramBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_var(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        structure: VarStructure,
    ) -> VarRef {
        assert!(
            !self.variables.iter().any(|v| v.name == name),
            "duplicate variable {name}"
        );
        let var = Variable {
            name: name.to_string(),
            rows,
            cols,
            structure,
            offset: self.num_scalars,
        };
        self.num_scalars += var.len();
        self.variables.push(var);
        VarRef(self.variables.len() - 1)
    }

    pub fn var(&self, r: VarRef) -> &Variable {
        &self.variables[r.0]
    }

    /// Matrix expression consisting of the variable's entries.
    pub fn var_expr(&self, r: VarRef) -> MatExpr {
        let v = self.var(r);
        let mut e = MatExpr::zeros(v.rows, v.cols);
        for i in 0..v.rows {
            for j in 0..v.cols {
                *e.entry_mut(i, j) = LinExpr::variable(v.index(i, j));
            }
        }
        e
    }

    /// diag(v) as a matrix expression for a vector variable.
    pub fn diag_expr(&self, r: VarRef) -> MatExpr {
        let v = self.var(r);
        assert_eq!(v.cols, 1, "diag_expr expects a vector variable");
        let mut e = MatExpr::zeros(v.rows, v.rows);
        for i in 0..v.rows {
            *e.entry_mut(i, i) = LinExpr::variable(v.index(i, 0));
        }
        e
    }

    /// Adds `expr - margin*I >= 0` (PSD). The upper triangle of `expr` is
    /// mirrored so the stored block is exactly symmetric.
    pub fn add_psd_block(&mut self, name: &str, expr: &MatExpr, margin: f64) {
        assert_eq!(expr.rows, expr.cols, "PSD block must be square");
        let d = expr.rows;
        let mut entries = vec![LinExpr::default(); d * d];
        for i in 0..d {
            for j in i..d {
                let mut e = expr.entry(i, j).clone();
                if i == j && margin != 0.0 {
                    e.constant -= margin;
                }
                entries[i * d + j] = e.clone();
                entries[j * d + i] = e;
            }
        }
        self.psd_blocks.push(PsdBlock {
            name: name.to_string(),
            dim: d,
            entries,
        });
    }

    pub fn add_soc(&mut self, name: &str, t: LinExpr, v: Vec<LinExpr>) {
        self.soc_constraints.push(SocConstraint {
            name: name.to_string(),
            t,
            v,
        });
    }

    pub fn add_eq_zero(&mut self, name: &str, expr: LinExpr) {
        self.linear_constraints.push(LinearConstraint {
            name: name.to_string(),
            kind: LinKind::EqZero,
            expr,
        });
    }

    pub fn add_nonneg(&mut self, name: &str, expr: LinExpr) {
        self.linear_constraints.push(LinearConstraint {
            name: name.to_string(),
            kind: LinKind::Nonneg,
            expr,
        });
    }

    /// Elementwise nonnegativity for a vector variable.
    pub fn require_nonneg(&mut self, r: VarRef) {
        let v = self.var(r).clone();
        for i in 0..v.rows {
            self.add_nonneg(
                &format!("{}[{i}] >= 0", v.name),
                LinExpr::variable(v.index(i, 0)),
            );
        }
    }

    /// Optional upper bounds on a precision vector.
    pub fn apply_upper_bounds(&mut self, r: VarRef, bounds: Option<&[f64]>) -> Result<()> {
        if let Some(ub) = bounds {
            let v = self.var(r).clone();
            if ub.len() != v.rows {
                return Err(Error::InvalidArgument(format!(
                    "bound vector for {} has length {}, expected {}",
                    v.name,
                    ub.len(),
                    v.rows
                )));
            }
            for (i, &b) in ub.iter().enumerate() {
                let mut e = LinExpr::constant(b);
                e.add_scaled(&LinExpr::variable(v.index(i, 0)), -1.0);
                self.add_nonneg(&format!("{}[{i}] <= {b}", v.name), e);
            }
        }
        Ok(())
    }

    pub fn add_objective_term(&mut self, term: &LinExpr, scale: f64) {
        self.objective.add_scaled(term, scale);
    }

    /// Cost contribution for ||diag(weight) v||_lambda with v >= 0
    /// elementwise. The 2-norm introduces an epigraph scalar with a
    /// second-order cone; the 1-norm is the exact weighted sum.
    pub fn norm_epigraph(&mut self, v: VarRef, norm: Norm, weight: &DVector<f64>) -> LinExpr {
        let var = self.var(v).clone();
        assert_eq!(weight.len(), var.rows, "weight length");
        match norm {
            Norm::L1 => {
                let mut cost = LinExpr::default();
                for i in 0..var.rows {
                    cost.add_scaled(&LinExpr::variable(var.index(i, 0)), weight[i]);
                }
                cost
            }
            Norm::L2 => {
                let t = self.add_var(&format!("t_{}", var.name), 1, 1, VarStructure::Scalar);
                let t_expr = LinExpr::variable(self.var(t).offset);
                let vec_exprs = (0..var.rows)
                    .map(|i| LinExpr::variable(var.index(i, 0)).scale(weight[i]))
                    .collect();
                self.add_soc(&format!("epigraph_{}", var.name), t_expr.clone(), vec_exprs);
                t_expr
            }
        }
    }

    pub fn finish(self, recovery: RecoveryMap) -> ConicProgram {
        ConicProgram {
            variables: self.variables,
            num_scalars: self.num_scalars,
            psd_blocks: self.psd_blocks,
            soc_constraints: self.soc_constraints,
            linear_constraints: self.linear_constraints,
            objective: self.objective,
            recovery,
        }
    }
}

impl ConicProgram {
    pub fn num_scalars(&self) -> usize {
        self.num_scalars
    }

    pub fn var(&self, r: VarRef) -> &Variable {
        &self.variables[r.0]
    }

    pub fn var_by_name(&self, name: &str) -> Option<&Variable> {
        self.variables.iter().find(|v| v.name == name)
    }

    /// Reads a variable's value out of a flat assignment.
    pub fn extract(&self, r: VarRef, x: &[f64]) -> DMatrix<f64> {
        let v = self.var(r);
        DMatrix::from_fn(v.rows, v.cols, |i, j| x[v.index(i, j)])
    }

    pub fn extract_vector(&self, r: VarRef, x: &[f64]) -> DVector<f64> {
        let v = self.var(r);
        assert_eq!(v.cols, 1);
        DVector::from_fn(v.rows, |i, _| x[v.index(i, 0)])
    }

    /// Writes a matrix value into a flat assignment.
    pub fn assign(&self, r: VarRef, value: &DMatrix<f64>, x: &mut [f64]) {
        let v = self.var(r);
        assert_eq!((v.rows, v.cols), (value.nrows(), value.ncols()));
        for i in 0..v.rows {
            for j in 0..v.cols {
                x[v.index(i, j)] = value[(i, j)];
            }
        }
    }

    /// JSON debug dump: variables, block sparsity patterns, objective.
    pub fn debug_json(&self) -> serde_json::Value {
        let vars: Vec<_> = self
            .variables
            .iter()
            .map(|v| {
                json!({
                    "name": v.name,
                    "rows": v.rows,
                    "cols": v.cols,
                    "structure": format!("{:?}", v.structure),
                    "offset": v.offset,
                    "len": v.len(),
                })
            })
            .collect();
        let blocks: Vec<_> = self
            .psd_blocks
            .iter()
            .map(|b| {
                let pattern: Vec<String> = (0..b.dim)
                    .map(|i| {
                        (0..b.dim)
                            .map(|j| {
                                let e = b.entry(i, j);
                                if !e.terms.is_empty() {
                                    'x'
                                } else if e.constant != 0.0 {
                                    'c'
                                } else {
                                    '.'
                                }
                            })
                            .collect()
                    })
                    .collect();
                json!({ "name": b.name, "dim": b.dim, "pattern": pattern })
            })
            .collect();
        json!({
            "num_scalars": self.num_scalars,
            "variables": vars,
            "psd_blocks": blocks,
            "soc_constraints": self.soc_constraints.iter().map(|s| &s.name).collect::<Vec<_>>(),
            "linear_constraints": self.linear_constraints.iter().map(|c| &c.name).collect::<Vec<_>>(),
            "objective_terms": self.objective.terms.len(),
        })
    }
}

// ---------------------------------------------------------------------------
// The four programs
// ---------------------------------------------------------------------------

fn check_spd(name: &str, m: &DMatrix<f64>) -> Result<()> {
    let sym = model::symmetrize_checked(m)?;
    let min_eig = sym.symmetric_eigen().eigenvalues.min();
    if min_eig <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "{name} must be symmetric positive definite (min eigenvalue {min_eig:.3e})"
        )));
    }
    Ok(())
}

fn require_domain(model: &LtiModel, expected: Domain) -> Result<()> {
    if model.domain != expected {
        return Err(Error::WrongDomain {
            expected,
            actual: model.domain,
        });
    }
    Ok(())
}

fn add_objective(builder: &mut ProgramBuilder, eta: VarRef, zeta: VarRef, cost: &CostOptions) {
    let tq = builder.norm_epigraph(eta, Norm::L2, &cost.wq);
    builder.add_objective_term(&tq, 1.0);
    let tr = builder.norm_epigraph(zeta, cost.norm, &cost.wr);
    builder.add_objective_term(&tr, cost.gamma);
}

/// Exact-covariance program for discrete time. One PSD block
/// [Sigma, (I-KC)A sqrt(Sigma), (I-KC)B, K; *, I, 0, 0;
///  *, 0, diag(eta), 0; *, *, *, diag(zeta)] >= 0
/// over variables K, eta, zeta, minimizing ||Wq eta||_2 + gamma ||Wr zeta||_lambda.
pub fn build_thm1(
    mdl: &LtiModel,
    sigma_inf: &DMatrix<f64>,
    cost: &CostOptions,
    bounds: Option<&PrecisionBounds>,
) -> Result<ConicProgram> {
    require_domain(mdl, Domain::Discrete)?;
    let (n, m, p) = (mdl.n(), mdl.m(), mdl.p());
    cost.check(m, p)?;
    if sigma_inf.nrows() != n || sigma_inf.ncols() != n {
        return Err(Error::DimensionMismatch {
            matrix: "sigma_inf".into(),
            expected: format!("{n}x{n}"),
            actual: format!("{}x{}", sigma_inf.nrows(), sigma_inf.ncols()),
        });
    }
    check_spd("sigma_inf", sigma_inf)?;
    let sqrt_sigma = model::psd_sqrt(sigma_inf)?;

    let mut b = ProgramBuilder::new();
    let k = b.add_var("K", n, p, VarStructure::FullMatrix);
    let eta = b.add_var("eta", m, 1, VarStructure::NonnegVector);
    let zeta = b.add_var("zeta", p, 1, VarStructure::NonnegVector);

    let k_expr = b.var_expr(k);
    let a_sqrt = &mdl.a * &sqrt_sigma;
    let ca_sqrt = &mdl.c * &a_sqrt;
    let cb = &mdl.c * &mdl.b;
    // (I - KC) A sqrt(Sigma) = A sqrt(Sigma) - K (C A sqrt(Sigma))
    let e12 = MatExpr::from_const(&a_sqrt).sub(&k_expr.rmul(&ca_sqrt));
    // (I - KC) B = B - K (C B)
    let e13 = MatExpr::from_const(&mdl.b).sub(&k_expr.rmul(&cb));

    let zeros = |r, c| MatExpr::zeros(r, c);
    let grid = vec![
        vec![
            MatExpr::from_const(sigma_inf),
            e12.clone(),
            e13.clone(),
            k_expr.clone(),
        ],
        vec![
            e12.transpose(),
            MatExpr::from_const(&DMatrix::identity(n, n)),
            zeros(n, m),
            zeros(n, p),
        ],
        vec![e13.transpose(), zeros(m, n), b.diag_expr(eta), zeros(m, p)],
        vec![
            k_expr.transpose(),
            zeros(p, n),
            zeros(p, m),
            b.diag_expr(zeta),
        ],
    ];
    let block = MatExpr::block(&grid);
    b.add_psd_block("thm1", &block, 0.0);

    b.require_nonneg(eta);
    b.require_nonneg(zeta);
    if let Some(pb) = bounds {
        b.apply_upper_bounds(eta, pb.eta_max.as_deref())?;
        b.apply_upper_bounds(zeta, pb.zeta_max.as_deref())?;
    }
    add_objective(&mut b, eta, zeta, cost);

    Ok(b.finish(RecoveryMap {
        gain: GainRecovery::Direct(k),
        eta,
        zeta,
        sigma: SigmaRecovery::Fixed(sigma_inf.clone()),
        x: None,
    }))
}

/// Trace-bound program for discrete time over W, eta, zeta, Z, X with
/// K = Z^-1 W and Sigma = Z^-1 on recovery.
pub fn build_cor1(
    mdl: &LtiModel,
    theta: f64,
    cost: &CostOptions,
    bounds: Option<&PrecisionBounds>,
) -> Result<ConicProgram> {
    require_domain(mdl, Domain::Discrete)?;
    let (n, m, p) = (mdl.n(), mdl.m(), mdl.p());
    cost.check(m, p)?;
    if theta <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "theta must be positive, got {theta}"
        )));
    }

    let mut b = ProgramBuilder::new();
    let w = b.add_var("W", n, p, VarStructure::FullMatrix);
    let eta = b.add_var("eta", m, 1, VarStructure::NonnegVector);
    let zeta = b.add_var("zeta", p, 1, VarStructure::NonnegVector);
    let z = b.add_var("Z", n, n, VarStructure::Symmetric);
    let x = b.add_var("X", n, n, VarStructure::Symmetric);

    let w_expr = b.var_expr(w);
    let z_expr = b.var_expr(z);
    let ca = &mdl.c * &mdl.a;
    let cb = &mdl.c * &mdl.b;
    // (Z - WC) A = Z A - W (C A)
    let e12 = z_expr.rmul(&mdl.a).sub(&w_expr.rmul(&ca));
    // (Z - WC) B = Z B - W (C B)
    let e13 = z_expr.rmul(&mdl.b).sub(&w_expr.rmul(&cb));

    let zeros = |r, c| MatExpr::zeros(r, c);
    let grid = vec![
        vec![z_expr.clone(), e12.clone(), e13.clone(), w_expr.clone()],
        vec![e12.transpose(), z_expr.clone(), zeros(n, m), zeros(n, p)],
        vec![e13.transpose(), zeros(m, n), b.diag_expr(eta), zeros(m, p)],
        vec![
            w_expr.transpose(),
            zeros(p, n),
            zeros(p, m),
            b.diag_expr(zeta),
        ],
    ];
    b.add_psd_block("cor1_main", &MatExpr::block(&grid), 0.0);

    // trace epigraph [X, I; I, Z] >= 0
    let trace_grid = vec![
        vec![b.var_expr(x), MatExpr::from_const(&DMatrix::identity(n, n))],
        vec![
            MatExpr::from_const(&DMatrix::identity(n, n)),
            z_expr.clone(),
        ],
    ];
    b.add_psd_block("cor1_trace", &MatExpr::block(&trace_grid), 0.0);

    // Z must stay invertible for recovery
    let margin = PSD_MARGIN_COEFF * (1.0 + mdl.a.norm());
    b.add_psd_block("Z_pd", &z_expr, margin);

    // tr(X) <= theta
    let mut tr_x = LinExpr::constant(theta);
    for i in 0..n {
        tr_x.add_scaled(&LinExpr::variable(b.var(x).index(i, i)), -1.0);
    }
    b.add_nonneg("tr(X) <= theta", tr_x);

    b.require_nonneg(eta);
    b.require_nonneg(zeta);
    if let Some(pb) = bounds {
        b.apply_upper_bounds(eta, pb.eta_max.as_deref())?;
        b.apply_upper_bounds(zeta, pb.zeta_max.as_deref())?;
    }
    add_objective(&mut b, eta, zeta, cost);

    Ok(b.finish(RecoveryMap {
        gain: GainRecovery::FromZ { w, z },
        eta,
        zeta,
        sigma: SigmaRecovery::InverseOfZ(z),
        x: Some(x),
    }))
}

/// Exact-covariance program for continuous time. The sign-flipped block
/// [sym((A-KC)Sigma), B, K; *, -diag(eta), 0; *, *, -diag(zeta)] <= 0
/// is stored negated as a PSD block.
pub fn build_thm2(
    mdl: &LtiModel,
    sigma_inf: &DMatrix<f64>,
    cost: &CostOptions,
    bounds: Option<&PrecisionBounds>,
) -> Result<ConicProgram> {
    require_domain(mdl, Domain::Continuous)?;
    let (n, m, p) = (mdl.n(), mdl.m(), mdl.p());
    cost.check(m, p)?;
    if sigma_inf.nrows() != n || sigma_inf.ncols() != n {
        return Err(Error::DimensionMismatch {
            matrix: "sigma_inf".into(),
            expected: format!("{n}x{n}"),
            actual: format!("{}x{}", sigma_inf.nrows(), sigma_inf.ncols()),
        });
    }
    check_spd("sigma_inf", sigma_inf)?;

    let mut b = ProgramBuilder::new();
    let k = b.add_var("K", n, p, VarStructure::FullMatrix);
    let eta = b.add_var("eta", m, 1, VarStructure::NonnegVector);
    let zeta = b.add_var("zeta", p, 1, VarStructure::NonnegVector);

    let k_expr = b.var_expr(k);
    let a_sigma = &mdl.a * sigma_inf;
    let c_sigma = &mdl.c * sigma_inf;
    // -sym((A - KC) Sigma) = sym(K (C Sigma) - A Sigma)
    let m11 = k_expr
        .rmul(&c_sigma)
        .sub(&MatExpr::from_const(&a_sigma))
        .sym();

    let zeros = |r, c| MatExpr::zeros(r, c);
    let grid = vec![
        vec![m11, MatExpr::from_const(&(-&mdl.b)), k_expr.neg()],
        vec![
            MatExpr::from_const(&(-mdl.b.transpose())),
            b.diag_expr(eta),
            zeros(m, p),
        ],
        vec![k_expr.neg().transpose(), zeros(p, m), b.diag_expr(zeta)],
    ];
    b.add_psd_block("thm2", &MatExpr::block(&grid), 0.0);

    b.require_nonneg(eta);
    b.require_nonneg(zeta);
    if let Some(pb) = bounds {
        b.apply_upper_bounds(eta, pb.eta_max.as_deref())?;
        b.apply_upper_bounds(zeta, pb.zeta_max.as_deref())?;
    }
    add_objective(&mut b, eta, zeta, cost);

    Ok(b.finish(RecoveryMap {
        gain: GainRecovery::Direct(k),
        eta,
        zeta,
        sigma: SigmaRecovery::Fixed(sigma_inf.clone()),
        x: None,
    }))
}

/// Trace-bound program for continuous time; negated main block
/// [-sym(ZA - WC), -ZB, -W; *, diag(eta), 0; *, *, diag(zeta)] >= 0
/// plus the trace epigraph on Z^-1.
pub fn build_cor2(
    mdl: &LtiModel,
    theta: f64,
    cost: &CostOptions,
    bounds: Option<&PrecisionBounds>,
) -> Result<ConicProgram> {
    require_domain(mdl, Domain::Continuous)?;
    let (n, m, p) = (mdl.n(), mdl.m(), mdl.p());
    cost.check(m, p)?;
    if theta <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "theta must be positive, got {theta}"
        )));
    }

    let mut b = ProgramBuilder::new();
    let w = b.add_var("W", n, p, VarStructure::FullMatrix);
    let eta = b.add_var("eta", m, 1, VarStructure::NonnegVector);
    let zeta = b.add_var("zeta", p, 1, VarStructure::NonnegVector);
    let z = b.add_var("Z", n, n, VarStructure::Symmetric);
    let x = b.add_var("X", n, n, VarStructure::Symmetric);

    let w_expr = b.var_expr(w);
    let z_expr = b.var_expr(z);
    // -sym(ZA - WC) = sym(WC - ZA)
    let m11 = w_expr.rmul(&mdl.c).sub(&z_expr.rmul(&mdl.a)).sym();
    let zb = z_expr.rmul(&mdl.b);

    let zeros = |r, c| MatExpr::zeros(r, c);
    let grid = vec![
        vec![m11, zb.neg(), w_expr.neg()],
        vec![zb.neg().transpose(), b.diag_expr(eta), zeros(m, p)],
        vec![w_expr.neg().transpose(), zeros(p, m), b.diag_expr(zeta)],
    ];
    b.add_psd_block("cor2_main", &MatExpr::block(&grid), 0.0);

    let trace_grid = vec![
        vec![b.var_expr(x), MatExpr::from_const(&DMatrix::identity(n, n))],
        vec![
            MatExpr::from_const(&DMatrix::identity(n, n)),
            z_expr.clone(),
        ],
    ];
    b.add_psd_block("cor2_trace", &MatExpr::block(&trace_grid), 0.0);

    let margin = PSD_MARGIN_COEFF * (1.0 + mdl.a.norm());
    b.add_psd_block("Z_pd", &z_expr, margin);

    let mut tr_x = LinExpr::constant(theta);
    for i in 0..n {
        tr_x.add_scaled(&LinExpr::variable(b.var(x).index(i, i)), -1.0);
    }
    b.add_nonneg("tr(X) <= theta", tr_x);

    b.require_nonneg(eta);
    b.require_nonneg(zeta);
    if let Some(pb) = bounds {
        b.apply_upper_bounds(eta, pb.eta_max.as_deref())?;
        b.apply_upper_bounds(zeta, pb.zeta_max.as_deref())?;
    }
    add_objective(&mut b, eta, zeta, cost);

    Ok(b.finish(RecoveryMap {
        gain: GainRecovery::FromZ { w, z },
        eta,
        zeta,
        sigma: SigmaRecovery::InverseOfZ(z),
        x: Some(x),
    }))
}
