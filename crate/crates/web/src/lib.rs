//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Three operations, each a thin wrapper over a plain Rust function so the
//! logic can be tested natively:
//! - [`simulate`]: integrate a built-in system and return its trajectory;
//! - [`hankel_spectrum`]: singular values of the delay embedding of one
//!   component;
//! - [`fit_sindy`]: sparse regression on the full state, returned as text.

use nalgebra::DMatrix;
use wasm_bindgen::prelude::*;

use delay_sindy::dynsys::{builtin_system, measure, simulate as integrate, SystemKind, Trajectory};
use delay_sindy::hankel::{build_hankel, estimate_derivatives, truncated_svd_of};
use delay_sindy::sindy::{build_library, default_var_names, format_equations, stlsq, SindyModel, StlsqOptions};

/// Guard against freezing the tab.
pub const MAX_STEPS: usize = 200_000;

fn trajectory(system: &str, params: &[f64], dt: f64, steps: usize) -> Result<Trajectory, String> {
    if steps == 0 || steps > MAX_STEPS {
        return Err(format!("steps must be in 1..={MAX_STEPS}"));
    }
    let kind = SystemKind::parse(system).map_err(|e| e.to_string())?;
    let params = if params.is_empty() { kind.default_params() } else { params.to_vec() };
    let sys = builtin_system(system, &params).map_err(|e| e.to_string())?;
    integrate(&sys, &kind.default_x0(), dt, steps, 1000).map_err(|e| e.to_string())
}

/// Row-major `steps × dim` states.
pub fn simulate_flat(system: &str, params: &[f64], dt: f64, steps: usize) -> Result<Vec<f64>, String> {
    let traj = trajectory(system, params, dt, steps)?;
    Ok(traj.states.transpose().as_slice().to_vec())
}

/// Full singular spectrum of the `n`-row Hankel matrix of one component.
pub fn spectrum(system: &str, dt: f64, steps: usize, component: usize, n: usize) -> Result<Vec<f64>, String> {
    let traj = trajectory(system, &[], dt, steps)?;
    let y = measure(&traj, component).map_err(|e| e.to_string())?;
    let emb = build_hankel(&y, n).map_err(|e| e.to_string())?;
    let basis = truncated_svd_of(&emb.h, 1).map_err(|e| e.to_string())?;
    Ok(basis.spectrum)
}

/// STLSQ on the simulated full state with finite-difference derivatives.
pub fn fit(system: &str, params: &[f64], dt: f64, steps: usize, degree: u32, threshold: f64) -> Result<String, String> {
    let traj = trajectory(system, params, dt, steps)?;
    let x: DMatrix<f64> = traj.states.transpose();
    let dx = estimate_derivatives(&x, dt).map_err(|e| e.to_string())?;
    let lib = build_library(x.nrows(), degree, false).map_err(|e| e.to_string())?;
    let theta = lib.evaluate(&x.transpose()).map_err(|e| e.to_string())?;
    let opts = StlsqOptions {
        threshold,
        ..StlsqOptions::default()
    };
    let fitted = stlsq(&theta, &dx.transpose(), &opts).map_err(|e| e.to_string())?;
    let model = SindyModel::from_coefficients(lib, fitted.xi).map_err(|e| e.to_string())?;
    let vars = default_var_names(x.nrows());
    Ok(format_equations(&model, &vars, 3))
}

#[wasm_bindgen]
pub fn simulate(system: &str, params: Vec<f64>, dt: f64, steps: usize) -> Result<Vec<f64>, JsError> {
    simulate_flat(system, &params, dt, steps).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn system_dim(system: &str) -> Result<usize, JsError> {
    SystemKind::parse(system).map(SystemKind::dim).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen]
pub fn hankel_spectrum(system: &str, dt: f64, steps: usize, component: usize, n: usize) -> Result<Vec<f64>, JsError> {
    spectrum(system, dt, steps, component, n).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn fit_sindy(system: &str, params: Vec<f64>, dt: f64, steps: usize, degree: u32, threshold: f64) -> Result<String, JsError> {
    fit(system, &params, dt, steps, degree, threshold).map_err(|e| JsError::new(&e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn simulate_is_row_major() {
        let flat = simulate_flat("lorenz", &[], 0.01, 50).unwrap();
        let traj = trajectory("lorenz", &[], 0.01, 50).unwrap();
        assert_eq!(flat.len(), 150);
        assert_eq!(&flat[3..6], traj.states.row(1).iter().copied().collect::<Vec<_>>().as_slice());
        assert!(simulate_flat("lorenz", &[], 0.01, 0).is_err());
        assert!(simulate_flat("pendulum", &[], 0.01, 10).is_err());
    }

    #[test]
    fn spectrum_is_nonincreasing() {
        let s = spectrum("rossler", 0.01, 2000, 0, 32).unwrap();
        assert_eq!(s.len(), 32);
        assert!(s.windows(2).all(|w| w[0] >= w[1]));
        assert!(spectrum("rossler", 0.01, 10, 0, 32).is_err());
    }

    #[test]
    fn fit_recovers_lorenz_structure() {
        let text = fit("lorenz", &[], 0.001, 10_000, 2, 0.1).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].contains("10.000 z2"), "{text}");
        assert!(lines[2].contains("z1 z2"), "{text}");
    }
}
