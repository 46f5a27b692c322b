//! Linear time-invariant model representation, validation, Tustin
//! discretization, and the small matrix utilities shared by the rest of
//! the crate.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative singular-value cutoff for numerical rank decisions.
pub const RANK_TOL: f64 = 1e-9;
/// Relative symmetry tolerance applied before eigendecompositions.
pub const SYM_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Continuous,
    Discrete,
}

/// LTI system x' = Ax + Bw, y = Cx + n with diagonal noise channels to be
/// sized by the design problem.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LtiModel {
    pub domain: Domain,
    #[serde(with = "mat_rows")]
    pub a: DMatrix<f64>,
    #[serde(with = "mat_rows")]
    pub b: DMatrix<f64>,
    #[serde(with = "mat_rows")]
    pub c: DMatrix<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_time: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state_labels: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_labels: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sensor_labels: Option<Vec<String>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValidationReport {
    pub controllable: bool,
    pub observable: bool,
    pub controllability_rank: usize,
    pub observability_rank: usize,
}

impl LtiModel {
    pub fn new(domain: Domain, a: DMatrix<f64>, b: DMatrix<f64>, c: DMatrix<f64>) -> Result<Self> {
        let model = LtiModel {
            domain,
            a,
            b,
            c,
            sample_time: None,
            state_labels: None,
            noise_labels: None,
            sensor_labels: None,
        };
        model.check_dims()?;
        Ok(model)
    }

    pub fn new_discrete(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        c: DMatrix<f64>,
        sample_time: f64,
    ) -> Result<Self> {
        if sample_time <= 0.0 {
            return Err(Error::InvalidModel(format!(
                "sample_time must be positive, got {sample_time}"
            )));
        }
        let model = LtiModel {
            domain: Domain::Discrete,
            a,
            b,
            c,
            sample_time: Some(sample_time),
            state_labels: None,
            noise_labels: None,
            sensor_labels: None,
        };
        model.check_dims()?;
        Ok(model)
    }

    /// State dimension.
    pub fn n(&self) -> usize {
        self.a.nrows()
    }
    /// Process-noise dimension.
    pub fn m(&self) -> usize {
        self.b.ncols()
    }
    /// Sensor dimension.
    pub fn p(&self) -> usize {
        self.c.nrows()
    }

    pub fn check_dims(&self) -> Result<()> {
        let n = self.a.nrows();
        if self.a.ncols() != n {
            return Err(Error::DimensionMismatch {
                matrix: "A".into(),
                expected: format!("{n}x{n}"),
                actual: format!("{}x{}", self.a.nrows(), self.a.ncols()),
            });
        }
        if self.b.nrows() != n {
            return Err(Error::DimensionMismatch {
                matrix: "B".into(),
                expected: format!("{n} rows"),
                actual: format!("{} rows", self.b.nrows()),
            });
        }
        if self.c.ncols() != n {
            return Err(Error::DimensionMismatch {
                matrix: "C".into(),
                expected: format!("{n} columns"),
                actual: format!("{} columns", self.c.ncols()),
            });
        }
        match self.domain {
            Domain::Discrete => {
                if !matches!(self.sample_time, Some(ts) if ts > 0.0) {
                    return Err(Error::InvalidModel(
                        "discrete model requires sample_time > 0".into(),
                    ));
                }
            }
            Domain::Continuous => {
                if self.sample_time.is_some() {
                    return Err(Error::InvalidModel(
                        "continuous model must not carry a sample_time".into(),
                    ));
                }
            }
        }
        for (labels, len, name) in [
            (&self.state_labels, self.n(), "state_labels"),
            (&self.noise_labels, self.m(), "noise_labels"),
            (&self.sensor_labels, self.p(), "sensor_labels"),
        ] {
            if let Some(l) = labels {
                if l.len() != len {
                    return Err(Error::InvalidModel(format!(
                        "{name} has {} entries, expected {len}",
                        l.len()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let model: LtiModel =
            serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        model.check_dims()?;
        Ok(model)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let model: LtiModel = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        model.check_dims()?;
        Ok(model)
    }

    /// Loads a model file, selecting JSON or TOML by extension.
    pub fn from_path(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        match path.extension().and_then(|e| e.to_str()) {
            Some("toml") => Self::from_toml(&text),
            _ => Self::from_json(&text),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serializes")
    }
}

/// Row-major nested-array (de)serialization for matrices; rejects ragged input.
pub mod mat_rows {
    use super::*;
    use serde::de::Error as _;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(
        m: &DMatrix<f64>,
        s: S,
    ) -> std::result::Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = (0..m.nrows())
            .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
            .collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        d: D,
    ) -> std::result::Result<DMatrix<f64>, D::Error> {
        let rows: Vec<Vec<f64>> = Vec::deserialize(d)?;
        rows_to_matrix(&rows).map_err(D::Error::custom)
    }
}

pub fn rows_to_matrix(rows: &[Vec<f64>]) -> std::result::Result<DMatrix<f64>, String> {
    if rows.is_empty() {
        return Err("matrix has no rows".into());
    }
    let ncols = rows[0].len();
    if ncols == 0 {
        return Err("matrix has empty rows".into());
    }
    if rows.iter().any(|r| r.len() != ncols) {
        return Err("ragged matrix: rows have differing lengths".into());
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

pub fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

/// Ranks of the controllability matrix of (A, B) and the observability
/// matrix of (C, A), with singular values below `RANK_TOL * sigma_max`
/// counted as zero.
pub fn validate_model(model: &LtiModel) -> Result<ValidationReport> {
    model.check_dims()?;
    let n = model.n();

    let mut ctrb = DMatrix::zeros(n, n * model.m());
    let mut power = model.b.clone();
    for k in 0..n {
        ctrb.view_mut((0, k * model.m()), (n, model.m()))
            .copy_from(&power);
        power = &model.a * power;
    }
    let mut obsv = DMatrix::zeros(n * model.p(), n);
    let mut block = model.c.clone();
    for k in 0..n {
        obsv.view_mut((k * model.p(), 0), (model.p(), n))
            .copy_from(&block);
        block = &block * &model.a;
    }

    let controllability_rank = numerical_rank(&ctrb);
    let observability_rank = numerical_rank(&obsv);
    Ok(ValidationReport {
        controllable: controllability_rank == n,
        observable: observability_rank == n,
        controllability_rank,
        observability_rank,
    })
}

pub fn numerical_rank(m: &DMatrix<f64>) -> usize {
    let sv = m.clone().singular_values();
    let sigma_max = sv.max();
    if sigma_max == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > RANK_TOL * sigma_max).count()
}

/// Bilinear (Tustin) discretization with sampling time `ts`:
/// A_d = (I - Ts/2 A)^-1 (I + Ts/2 A), B_d = (I - Ts/2 A)^-1 B Ts, C_d = C.
pub fn tustin_discretize(model: &LtiModel, ts: f64) -> Result<LtiModel> {
    if model.domain != Domain::Continuous {
        return Err(Error::WrongDomain {
            expected: Domain::Continuous,
            actual: model.domain,
        });
    }
    if ts <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "sampling time must be positive, got {ts}"
        )));
    }
    let n = model.n();
    let half = 0.5 * ts;
    let minus = DMatrix::identity(n, n) - half * &model.a;
    let sv = minus.clone().singular_values();
    let sigma_min = sv.min();
    let lu = minus.lu();
    let a_d = match lu.solve(&(DMatrix::identity(n, n) + half * &model.a)) {
        Some(x) => x,
        None => return Err(Error::SingularDiscretization { sigma_min }),
    };
    let b_d = lu
        .solve(&(&model.b * ts))
        .ok_or(Error::SingularDiscretization { sigma_min })?;

    let mut out = LtiModel::new_discrete(a_d, b_d, model.c.clone(), ts)?;
    out.state_labels = model.state_labels.clone();
    out.noise_labels = model.noise_labels.clone();
    out.sensor_labels = model.sensor_labels.clone();
    Ok(out)
}

/// Symmetric PSD square root via eigendecomposition. Inputs asymmetric
/// beyond `SYM_TOL * ||M||_F` or with an eigenvalue below the same
/// tolerance are rejected; small negative eigenvalues are clipped to zero.
pub fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = symmetrize_checked(m)?;
    let scale = sym.norm();
    let eps = SYM_TOL * scale.max(1.0);
    let eig = sym.symmetric_eigen();
    if let Some(&lambda) = eig.eigenvalues.iter().find(|&&l| l < -eps) {
        return Err(Error::NotPsd {
            eigenvalue: lambda,
            tolerance: eps,
        });
    }
    let sqrt_vals: DVector<f64> = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let v = &eig.eigenvectors;
    Ok(v * DMatrix::from_diagonal(&sqrt_vals) * v.transpose())
}

/// Symmetrizes (M + M^T)/2, failing when the asymmetry exceeds tolerance.
pub fn symmetrize_checked(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if m.nrows() != m.ncols() {
        return Err(Error::DimensionMismatch {
            matrix: "M".into(),
            expected: "square".into(),
            actual: format!("{}x{}", m.nrows(), m.ncols()),
        });
    }
    let asym = (m - m.transpose()).norm();
    let tol = SYM_TOL * m.norm().max(1.0);
    if asym > 2.0 * tol {
        return Err(Error::NotSymmetric {
            asymmetry: asym,
            tolerance: 2.0 * tol,
        });
    }
    Ok(0.5 * (m + m.transpose()))
}

/// Eigenvalues via an iteration-bounded Schur decomposition. The
/// unbounded nalgebra path can spin on degenerate inputs (e.g. the zero
/// matrix), so failures fall back to a tiny diagonal perturbation.
pub fn complex_eigs(m: &DMatrix<f64>) -> Vec<nalgebra::Complex<f64>> {
    use nalgebra::linalg::Schur;
    let n = m.nrows();
    if m.norm() == 0.0 {
        return vec![nalgebra::Complex::new(0.0, 0.0); n];
    }
    if let Some(s) = Schur::try_new(m.clone(), 1e-13, 100_000) {
        return s.complex_eigenvalues().iter().cloned().collect();
    }
    let eps = 1e-12 * (1.0 + m.norm());
    let shifted = m + eps * DMatrix::identity(n, n);
    let s = Schur::try_new(shifted, 1e-13, 100_000)
        .expect("Schur iteration failed even after diagonal perturbation");
    s.complex_eigenvalues()
        .iter()
        .map(|l| l - nalgebra::Complex::new(eps, 0.0))
        .collect()
}

/// Largest eigenvalue magnitude.
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    complex_eigs(m).iter().map(|l| l.norm()).fold(0.0, f64::max)
}

/// Largest eigenvalue real part.
pub fn max_real_eig(m: &DMatrix<f64>) -> f64 {
    complex_eigs(m)
        .iter()
        .map(|l| l.re)
        .fold(f64::NEG_INFINITY, f64::max)
}

pub fn is_hurwitz(m: &DMatrix<f64>) -> bool {
    max_real_eig(m) < 0.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn dm(rows: &[&[f64]]) -> DMatrix<f64> {
        DMatrix::from_fn(rows.len(), rows[0].len(), |i, j| rows[i][j])
    }

    #[test]
    fn double_integrator_is_controllable_and_observable() {
        let model = LtiModel::new(
            Domain::Continuous,
            dm(&[&[0., 1.], &[0., 0.]]),
            dm(&[&[0.], &[1.]]),
            dm(&[&[1., 0.]]),
        )
        .unwrap();
        let report = validate_model(&model).unwrap();
        assert!(report.controllable);
        assert!(report.observable);
        assert_eq!(report.controllability_rank, 2);
        assert_eq!(report.observability_rank, 2);
    }

    #[test]
    fn identity_dynamics_decouple_states() {
        let model = LtiModel::new(
            Domain::Continuous,
            DMatrix::identity(2, 2),
            dm(&[&[1.], &[0.]]),
            dm(&[&[1., 0.]]),
        )
        .unwrap();
        let report = validate_model(&model).unwrap();
        assert!(!report.controllable);
        assert!(!report.observable);
        assert_eq!(report.controllability_rank, 1);
        assert_eq!(report.observability_rank, 1);
    }

    #[test]
    fn dimension_mismatch_names_matrix() {
        let err = LtiModel::new(
            Domain::Continuous,
            DMatrix::identity(2, 2),
            dm(&[&[1.]]),
            dm(&[&[1., 0.]]),
        )
        .unwrap_err();
        assert!(err.to_string().contains('B'), "{err}");
    }

    #[test]
    fn tustin_scalar_integrator() {
        let model =
            LtiModel::new(Domain::Continuous, dm(&[&[0.]]), dm(&[&[1.]]), dm(&[&[1.]])).unwrap();
        let d = tustin_discretize(&model, 0.01).unwrap();
        assert_relative_eq!(d.a[(0, 0)], 1.0);
        assert_relative_eq!(d.b[(0, 0)], 0.01);
        assert_relative_eq!(d.c[(0, 0)], 1.0);
        assert_eq!(d.sample_time, Some(0.01));
    }

    #[test]
    fn tustin_scalar_bilinear_formula() {
        let model = LtiModel::new(
            Domain::Continuous,
            dm(&[&[-2.]]),
            dm(&[&[1.]]),
            dm(&[&[1.]]),
        )
        .unwrap();
        let d = tustin_discretize(&model, 0.1).unwrap();
        assert_relative_eq!(d.a[(0, 0)], 0.9 / 1.1, epsilon = 1e-15);
    }

    #[test]
    fn tustin_rejects_singular_transform() {
        // a = 2/Ts makes (I - Ts/2 A) singular
        let model = LtiModel::new(
            Domain::Continuous,
            dm(&[&[200.]]),
            dm(&[&[1.]]),
            dm(&[&[1.]]),
        )
        .unwrap();
        assert!(matches!(
            tustin_discretize(&model, 0.01),
            Err(Error::SingularDiscretization { .. })
        ));
    }

    #[test]
    fn psd_sqrt_identity_and_diagonal() {
        let s = psd_sqrt(&DMatrix::identity(3, 3)).unwrap();
        assert_relative_eq!((s - DMatrix::identity(3, 3)).norm(), 0.0, epsilon = 1e-12);

        let s = psd_sqrt(&dm(&[&[4., 0.], &[0., 9.]])).unwrap();
        assert_relative_eq!(s[(0, 0)], 2.0, epsilon = 1e-12);
        assert_relative_eq!(s[(1, 1)], 3.0, epsilon = 1e-12);
    }

    #[test]
    fn psd_sqrt_rejects_indefinite() {
        let err = psd_sqrt(&dm(&[&[1., 0.], &[0., -1.]])).unwrap_err();
        assert!(matches!(err, Error::NotPsd { .. }));
    }

    #[test]
    fn model_json_roundtrip_and_ragged_rejection() {
        let model = LtiModel::new_discrete(
            DMatrix::identity(2, 2),
            dm(&[&[1.], &[0.]]),
            dm(&[&[1., 0.]]),
            0.5,
        )
        .unwrap();
        let text = model.to_json();
        let back = LtiModel::from_json(&text).unwrap();
        assert_eq!(back.a, model.a);
        assert_eq!(back.sample_time, Some(0.5));

        let ragged = r#"{"domain":"discrete","sample_time":1.0,
            "A":[[1,0],[0,1]],"B":[[1],[0,2]],"C":[[1,0]]}"#;
        assert!(LtiModel::from_json(ragged).is_err());
    }

    proptest::proptest! {
        #[test]
        fn psd_sqrt_reconstructs_random_spd(seed in 0u64..64) {
            use rand::prelude::*;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let n = 4;
            let g = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
            let m = &g * g.transpose() + 0.1 * DMatrix::identity(n, n);
            let s = psd_sqrt(&m).unwrap();
            let resid = (&s * &s - &m).norm() / m.norm();
            proptest::prop_assert!(resid < 1e-12, "residual {resid}");
            // square root commutes with its square
            let comm = (&s * &m - &m * &s).norm();
            proptest::prop_assert!(comm < 1e-10 * m.norm());
        }

        #[test]
        fn hurwitz_maps_inside_unit_circle(seed in 0u64..64, ts in 0.001f64..1.0) {
            use rand::prelude::*;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let n = 3;
            // A = -G G^T - I is Hurwitz
            let g = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
            let a = -(&g * g.transpose()) - DMatrix::identity(n, n);
            let model = LtiModel::new(
                Domain::Continuous,
                a,
                DMatrix::identity(n, n).columns(0, 1).into_owned(),
                DMatrix::identity(n, n).rows(0, 1).into_owned(),
            ).unwrap();
            let d = tustin_discretize(&model, ts).unwrap();
            proptest::prop_assert_eq!((d.n(), d.m(), d.p()), (model.n(), model.m(), model.p()));
            proptest::prop_assert!(spectral_radius(&d.a) < 1.0);
        }

        #[test]
        fn validation_ranks_similarity_invariant(seed in 0u64..32) {
            use rand::prelude::*;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let n = 3;
            let a = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
            let b = DMatrix::from_fn(n, 1, |_, _| rng.gen_range(-1.0..1.0));
            let c = DMatrix::from_fn(1, n, |_, _| rng.gen_range(-1.0..1.0));
            // well-conditioned similarity transform
            let t = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-0.3..0.3))
                + DMatrix::identity(n, n);
            let t_inv = t.clone().try_inverse().unwrap();

            let m1 = LtiModel::new(Domain::Continuous, a.clone(), b.clone(), c.clone()).unwrap();
            let m2 = LtiModel::new(
                Domain::Continuous,
                &t * &a * &t_inv,
                &t * &b,
                &c * &t_inv,
            ).unwrap();
            let r1 = validate_model(&m1).unwrap();
            let r2 = validate_model(&m2).unwrap();
            proptest::prop_assert_eq!(r1.controllability_rank, r2.controllability_rank);
            proptest::prop_assert_eq!(r1.observability_rank, r2.observability_rank);
        }
    }
}
