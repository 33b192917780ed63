//! Post-training diagnostics.

use nalgebra::DMatrix;

use super::rollout::{Tape, ROLLOUT_CAP};
use super::DelayModel;
use crate::error::{Error, Result};
use crate::hankel::HankelEmbedding;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    /// Steps per prediction window.
    pub horizon: usize,
    /// Number of evenly spaced prediction windows.
    pub windows: usize,
    /// Length of the free rollout used for the boundedness and lobe checks.
    pub long_rollout: usize,
    /// A free rollout counts as bounded while every latent coordinate stays
    /// within this multiple of the largest encoded data magnitude.
    pub bound_factor: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            horizon: 128,
            windows: 20,
            long_rollout: 50_000,
            bound_factor: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalMetrics {
    pub recon_mse: f64,
    pub z1_mse: f64,
    pub active_terms: usize,
    /// Mean squared error of the rolled-out `z₁` against the measurement
    /// over the prediction windows.
    pub prediction_error: f64,
    /// Mean squared deviation of the measurement from its window mean, the
    /// error of the best constant predictor.
    pub prediction_variance: f64,
    /// Mean squared error of a single RK4 step over all columns.
    pub one_step_error: f64,
    pub series_variance: f64,
    /// Whether the free rollout stayed bounded for its full length.
    pub bounded: bool,
    pub rollout_steps_completed: usize,
    /// Sign changes of the mean-centered second latent coordinate (first
    /// when m = 1) along the free rollout.
    pub lobe_sign_changes: usize,
    /// Free rollout from the first column (rows are states).
    pub rollout: DMatrix<f64>,
}

/// Recovers the scalar series from a Hankel matrix.
pub fn series_of(embedding: &HankelEmbedding) -> Vec<f64> {
    let (n, q) = embedding.h.shape();
    let mut y: Vec<f64> = embedding.h.row(0).iter().copied().collect();
    y.extend((1..n).map(|i| embedding.h[(i, q - 1)]));
    y
}

/// Count of sign changes of `x − mean(x)`; exact zeros are skipped.
pub fn sign_changes(x: &[f64]) -> usize {
    if x.is_empty() {
        return 0;
    }
    let mean = x.iter().sum::<f64>() / x.len() as f64;
    let mut prev = 0.0f64;
    let mut count = 0;
    for v in x {
        let d = v - mean;
        if d == 0.0 {
            continue;
        }
        if prev != 0.0 && d.signum() != prev.signum() {
            count += 1;
        }
        prev = d;
    }
    count
}

/// Non-excess kurtosis `E[(x−μ)⁴] / σ⁴` (3 for a Gaussian).
pub fn kurtosis(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let m2 = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let m4 = x.iter().map(|v| (v - mean).powi(4)).sum::<f64>() / n;
    m4 / (m2 * m2)
}

/// Closest return of a trajectory (rows are states) to its first state,
/// relative to the largest excursion from it. Returns are only considered
/// after the trajectory first moves past half of that excursion; `None` if it
/// never does.
pub fn orbit_return_error(traj: &DMatrix<f64>) -> Option<f64> {
    let z0 = traj.row(0);
    let dist: Vec<f64> = traj.row_iter().map(|r| (r - z0).norm()).collect();
    let reach = dist.iter().copied().fold(0.0, f64::max);
    if reach == 0.0 {
        return None;
    }
    let depart = dist.iter().position(|d| *d > 0.5 * reach)?;
    let closest = dist[depart..].iter().copied().fold(f64::INFINITY, f64::min);
    Some(closest / reach)
}

pub fn evaluate(model: &DelayModel, embedding: &HankelEmbedding, opts: &EvalOptions) -> Result<EvalMetrics> {
    if embedding.n() != model.n {
        return Err(Error::dim("embedding does not match the model"));
    }
    let q = embedding.q();
    let m = model.latent_dim();
    let z = model.encode(&embedding.h)?;
    let recon = model.decode(&z)?;
    let recon_mse = (recon - &embedding.h).norm_squared() / embedding.h.len() as f64;
    let z1_mse = (0..q).map(|i| (z[(0, i)] - embedding.h[(0, i)]).powi(2)).sum::<f64>() / q as f64;
    let y = series_of(embedding);
    let (_, ystd) = crate::dynsys::mean_std(&y);
    let lib = &model.sindy.library;
    let xi = &model.sindy.xi;
    let tau = model.tau;

    // one step from every column that has a successor sample
    let mut tape = Tape::new(lib, 1);
    let mut one_step = 0.0;
    for i in 0..q {
        let z0: Vec<f64> = z.column(i).iter().copied().collect();
        one_step += if tape.forward(xi, &z0, 1, tau) == 1 {
            (tape.state(1)[0] - y[i + 1]).powi(2)
        } else {
            f64::INFINITY
        };
    }
    let one_step_error = one_step / q as f64;

    // prediction windows
    let horizon = opts.horizon.max(1);
    let last_start = y.len().saturating_sub(horizon + 1).min(q - 1);
    let windows = opts.windows.max(1);
    let mut tape = Tape::new(lib, horizon);
    let (mut err, mut var) = (0.0, 0.0);
    for w in 0..windows {
        let start = if windows == 1 { 0 } else { w * last_start / (windows - 1) };
        let z0: Vec<f64> = z.column(start).iter().copied().collect();
        let done = tape.forward(xi, &z0, horizon, tau);
        let target = &y[start + 1..(start + horizon + 1).min(y.len())];
        let mean = target.iter().sum::<f64>() / target.len() as f64;
        for (j, t) in target.iter().enumerate() {
            err += if j < done { (tape.state(j + 1)[0] - t).powi(2) } else { f64::INFINITY };
            var += (t - mean).powi(2);
        }
    }
    let count = (windows * horizon.min(y.len() - 1)) as f64;

    // free rollout from the first column
    let data_max = z.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let limit = (opts.bound_factor * data_max).min(ROLLOUT_CAP);
    let steps = opts.long_rollout;
    let z0: Vec<f64> = z.column(0).iter().copied().collect();
    let mut tape = Tape::new(lib, steps);
    let done = tape.forward(xi, &z0, steps, tau);
    let mut completed = done;
    for j in 1..=done {
        if tape.state(j).iter().any(|v| v.abs() > limit) {
            completed = j - 1;
            break;
        }
    }
    let rollout = DMatrix::from_row_slice(completed + 1, m, &tape.states[..(completed + 1) * m]);
    let coord = if m >= 2 { 1 } else { 0 };
    let track: Vec<f64> = rollout.column(coord).iter().copied().collect();
    Ok(EvalMetrics {
        recon_mse,
        z1_mse,
        active_terms: model.sindy.active_terms(),
        prediction_error: err / count,
        prediction_variance: var / count,
        one_step_error,
        series_variance: ystd * ystd,
        bounded: completed == steps,
        rollout_steps_completed: completed,
        lobe_sign_changes: sign_changes(&track),
        rollout,
    })
}
