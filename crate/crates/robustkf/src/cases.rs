//! Built-in benchmark models and case definitions: relative orbital
//! motion of a chaser spacecraft (CWH equations) and linearized F-16
//! longitudinal dynamics, each with the weighted and unweighted cost
//! variants exercised by the toolkit.

use nalgebra::DMatrix;

use crate::design::{DesignSpec, Target};
use crate::error::{Error, Result};
use crate::model::{tustin_discretize, Domain, LtiModel};

/// Angular rate of the reference circular orbit (LEO), rad/s.
pub const OMEGA_REF: f64 = 0.00113;
/// Sampling time for the discrete CWH variants, seconds.
pub const CWH_TS: f64 = 0.01;
/// Steady-state trace budget shared by all cases.
pub const THETA: f64 = 0.1;

/// F-16 trim state [V, alpha, theta, q]; metadata only, the design
/// operates on the linearized model.
pub const F16_TRIM_STATE: [f64; 4] = [1000.0, -3.02e-3, -3.02e-3, 0.0];
/// F-16 trim input; metadata only.
pub const F16_TRIM_INPUT: [f64; 2] = [6041.2, -1.38];

pub const CASE_NAMES: [&str; 7] = [
    "cwh-cont-c1",
    "cwh-cont-c2",
    "cwh-disc-c1",
    "cwh-disc-c2",
    "f16-c1",
    "f16-c2",
    "f16-sparse",
];

#[derive(Debug, Clone)]
pub struct BenchmarkCase {
    pub name: String,
    pub model: LtiModel,
    pub spec: DesignSpec,
}

/// Clohessy-Wiltshire-Hill relative-motion model with thrust
/// perturbations as process noise and full-state measurement.
pub fn cwh_model(omega_ref: f64) -> Result<LtiModel> {
    if omega_ref <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "omega_ref must be positive, got {omega_ref}"
        )));
    }
    let w = omega_ref;
    let mut a = DMatrix::zeros(6, 6);
    a[(0, 3)] = 1.0;
    a[(1, 4)] = 1.0;
    a[(2, 5)] = 1.0;
    a[(3, 0)] = 3.0 * w * w;
    a[(3, 4)] = 2.0 * w;
    a[(4, 3)] = -2.0 * w;
    a[(5, 2)] = -w * w;
    // noise enters through the velocity rows
    let mut b = DMatrix::zeros(6, 3);
    b[(3, 0)] = 1.0;
    b[(4, 1)] = 1.0;
    b[(5, 2)] = 1.0;
    let c = DMatrix::identity(6, 6);

    let mut model = LtiModel::new(Domain::Continuous, a, b, c)?;
    model.state_labels = Some(
        ["x", "y", "z", "xdot", "ydot", "zdot"]
            .map(String::from)
            .to_vec(),
    );
    model.noise_labels = Some(["w_Fx", "w_Fy", "w_Fz"].map(String::from).to_vec());
    model.sensor_labels = Some(
        ["n_x", "n_y", "n_z", "n_xdot", "n_ydot", "n_zdot"]
            .map(String::from)
            .to_vec(),
    );
    Ok(model)
}

/// Linearized F-16 longitudinal dynamics about steady flight, with
/// accelerometer, vane, rate, and dynamic-pressure measurements.
pub fn f16_model() -> LtiModel {
    let a = DMatrix::from_row_slice(
        4,
        4,
        &[
            -1.8969e-2, -0.4052, -32.17, 0.8915, //
            -6.4397e-5, -1.6176, 0.0, 0.9325, //
            0.0, 0.0, 0.0, 1.0, //
            0.0, -2.3683, 0.0, -1.9696,
        ],
    );
    // noise drives V, alpha, and q
    let b = DMatrix::from_row_slice(
        4,
        3,
        &[
            1.0, 0.0, 0.0, //
            0.0, 1.0, 0.0, //
            0.0, 0.0, 0.0, //
            0.0, 0.0, 1.0,
        ],
    );
    let c = DMatrix::from_row_slice(
        5,
        4,
        &[
            -0.0191, -5.2893, -32.17, 3.7071, //
            -0.0643, -1.6176, 0.0971, 932.5332, //
            0.0, 1.0, 0.0, 0.0, //
            0.0, 0.0, 0.0, 1.0, //
            1.7578, 0.0, 0.0, 0.0,
        ],
    );
    let mut model =
        LtiModel::new(Domain::Continuous, a, b, c).expect("F-16 model dimensions are fixed");
    model.state_labels = Some(["V", "alpha", "theta", "q"].map(String::from).to_vec());
    model.noise_labels = Some(["w_V", "w_alpha", "w_q"].map(String::from).to_vec());
    model.sensor_labels = Some(
        ["n_udot", "n_wdot", "n_alpha", "n_q", "n_qbar"]
            .map(String::from)
            .to_vec(),
    );
    model
}

/// Looks up one of the built-in cases by name.
pub fn benchmark_case(name: &str) -> Result<BenchmarkCase> {
    let mut spec = DesignSpec {
        target: Target::TraceBound(THETA),
        gamma: 1.0,
        lambda: 2.0,
        wq: None,
        wr: None,
        bounds: None,
        solver: Default::default(),
    };
    let model = match name {
        "cwh-cont-c1" => cwh_model(OMEGA_REF)?,
        "cwh-cont-c2" => {
            spec.wq = Some(vec![1.0, 100.0, 10.0]);
            spec.wr = Some(vec![100.0, 10.0, 1.0, 100.0, 10.0, 1.0]);
            cwh_model(OMEGA_REF)?
        }
        "cwh-disc-c1" => tustin_discretize(&cwh_model(OMEGA_REF)?, CWH_TS)?,
        "cwh-disc-c2" => {
            spec.wq = Some(vec![1.0, 100.0, 10.0]);
            spec.wr = Some(vec![100.0, 10.0, 1.0, 100.0, 10.0, 1.0]);
            tustin_discretize(&cwh_model(OMEGA_REF)?, CWH_TS)?
        }
        "f16-c1" => f16_model(),
        "f16-c2" => {
            spec.wq = Some(vec![1.0, 10.0, 1.0]);
            spec.wr = Some(vec![1.0, 1.0, 0.1, 1.0, 1.0]);
            f16_model()
        }
        "f16-sparse" => {
            spec.lambda = 1.0;
            f16_model()
        }
        other => return Err(Error::UnknownCase(other.to_string(), CASE_NAMES.join(", "))),
    };
    Ok(BenchmarkCase {
        name: name.to_string(),
        model,
        spec,
    })
}

pub fn all_cases() -> Result<Vec<BenchmarkCase>> {
    CASE_NAMES.iter().map(|n| benchmark_case(n)).collect()
}
