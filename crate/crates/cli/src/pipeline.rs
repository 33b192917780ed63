//! Data preparation and the in-memory train/evaluate pipeline shared by the
//! commands and the sweep.

use nalgebra::DMatrix;

use delay_sindy::delaymodel::{
    assemble_model, evaluate, standardize_rows, train, DelayModel, EvalMetrics, EvalOptions, InitMode, LibrarySpec,
    ModelSpec, TrainConfig, TrainData, TrainReport,
};
use delay_sindy::dynsys::{add_noise, builtin_system, measure, simulate, MeasurementSeries, SystemDef, Trajectory};
use delay_sindy::hankel::{build_hankel, suggest_delay_window, HankelEmbedding, MAX_DELAYS, MIN_DELAYS, UNFOLDING_WINDOW};
use delay_sindy::sindy::{build_library_with, SindyModel};

use crate::config::RunConfig;
use crate::CliError;

/// Delay count implied by the unfolding rule `n·τ ≈ 0.1`.
pub fn unfolding_delays(dt: f64) -> usize {
    ((UNFOLDING_WINDOW / dt).round() as usize).clamp(MIN_DELAYS, MAX_DELAYS)
}

pub fn system_of(cfg: &RunConfig) -> Result<Option<SystemDef>, CliError> {
    let Some(name) = &cfg.system else { return Ok(None) };
    let kind = delay_sindy::dynsys::SystemKind::parse(name).map_err(|e| CliError::Usage(e.to_string()))?;
    let params = if cfg.params.is_empty() { kind.default_params() } else { cfg.params.clone() };
    builtin_system(name, &params).map(Some).map_err(|e| CliError::Usage(e.to_string()))
}

/// Simulates `steps` samples of the configured system.
pub fn simulate_system(cfg: &RunConfig, sys: &SystemDef, steps: usize) -> Result<Trajectory, CliError> {
    let x0 = if cfg.x0.is_empty() { sys.kind.default_x0() } else { cfg.x0.clone() };
    if x0.len() != sys.kind.dim() {
        return Err(CliError::Usage(format!("x0 needs {} entries for {}", sys.kind.dim(), sys.name())));
    }
    Ok(simulate(sys, &x0, cfg.dt, steps, cfg.burn_in)?)
}

/// Everything the model needs, in the coordinates it is trained in.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub n: usize,
    /// Training measurement, standardized when configured.
    pub series: MeasurementSeries,
    pub train: HankelEmbedding,
    pub holdout: Option<HankelEmbedding>,
    pub y_shift: f64,
    pub y_scale: f64,
    pub system: Option<SystemDef>,
    /// Full state over the training columns, measured component first, each
    /// row standardized (the first with the measurement statistics).
    pub states: Option<DMatrix<f64>>,
    /// Reference dynamics in those same coordinates, when the system is known
    /// and the library spans it.
    pub true_xi: Option<SindyModel>,
}

/// The reference vector field with the measured component moved first.
fn permuted_field(sys: &SystemDef, first: usize) -> (usize, impl Fn(&[f64], &mut [f64]) + '_) {
    let dim = sys.kind.dim();
    let perm: Vec<usize> = std::iter::once(first).chain((0..dim).filter(move |&k| k != first)).collect();
    (dim, move |z: &[f64], dz: &mut [f64]| {
        let mut x = vec![0.0; dim];
        for (i, &k) in perm.iter().enumerate() {
            x[k] = z[i];
        }
        let fx = sys.rhs(&x);
        for (i, &k) in perm.iter().enumerate() {
            dz[i] = fx[k];
        }
    })
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared, CliError> {
    prepare_scaled(cfg, None)
}

/// Like [`prepare`], but with fixed measurement statistics `(shift, scale)`
/// instead of ones computed from the training window.
pub fn prepare_scaled(cfg: &RunConfig, scaling: Option<(f64, f64)>) -> Result<Prepared, CliError> {
    cfg.validate()?;
    let system = system_of(cfg)?;
    let (raw, traj) = match (&system, &cfg.input) {
        (Some(sys), _) => {
            if cfg.component >= sys.kind.dim() {
                return Err(CliError::Usage(format!("component {} out of range for {}", cfg.component, sys.name())));
            }
            let n = cfg.n.unwrap_or_else(|| unfolding_delays(cfg.dt));
            let traj = simulate_system(cfg, sys, cfg.samples + n - 1 + cfg.holdout)?;
            (measure(&traj, cfg.component)?, Some(traj))
        }
        (None, Some(path)) => (MeasurementSeries::read_csv(path)?, None),
        (None, None) => unreachable!("validated"),
    };
    let raw = if cfg.noise > 0.0 { add_noise(&raw, cfg.noise, cfg.seed) } else { raw };
    let dt = raw.check_uniform()?;
    let n = match cfg.n {
        Some(n) => n,
        None if traj.is_some() => unfolding_delays(dt),
        None => suggest_delay_window(&raw)?.n,
    };
    if raw.len() < n + cfg.holdout {
        return Err(delay_sindy::Error::TooShort {
            required: n + cfg.holdout,
            got: raw.len(),
        }
        .into());
    }
    let q = cfg.samples.min(raw.len() - cfg.holdout - n + 1);
    let train_len = q + n - 1;
    let (y_shift, y_scale) = if let Some(fixed) = scaling {
        fixed
    } else if cfg.standardize {
        let (mu, sd) = delay_sindy::dynsys::mean_std(&raw.values[..train_len]);
        (mu, if sd > 0.0 { sd } else { 1.0 })
    } else {
        (0.0, 1.0)
    };
    let scaled: Vec<f64> = raw.values.iter().map(|v| (v - y_shift) / y_scale).collect();
    let series = MeasurementSeries::from_values(scaled[..train_len].to_vec(), dt);
    let train = build_hankel(&series, n)?;
    let holdout = if cfg.holdout > 0 {
        let tail = MeasurementSeries::from_values(scaled[q..].to_vec(), dt);
        Some(build_hankel(&tail, n)?)
    } else {
        None
    };

    let (mut states, mut true_xi) = (None, None);
    if let (Some(sys), Some(traj)) = (&system, &traj) {
        let dim = sys.kind.dim();
        let order: Vec<usize> = std::iter::once(cfg.component).chain((0..dim).filter(|&k| k != cfg.component)).collect();
        let x = DMatrix::from_fn(dim, q, |i, j| traj.states[(j, order[i])]);
        let (mut xs, mut shift, mut scale) = if cfg.standardize {
            standardize_rows(&x)
        } else {
            (x.clone(), vec![0.0; dim], vec![1.0; dim])
        };
        shift[0] = y_shift;
        scale[0] = y_scale;
        for j in 0..q {
            xs[(0, j)] = (x[(0, j)] - y_shift) / y_scale;
        }
        states = Some(xs);
        if let Ok(lib) = build_library_with(dim, cfg.degree, cfg.trig, cfg.constant) {
            let field = permuted_field(sys, cfg.component);
            let center = vec![0.0; dim];
            let radius = vec![1.0; dim];
            true_xi = SindyModel::fit_vector_field(lib, &field, &center, &radius)
                .and_then(|m| m.reparameterize(&shift, &scale))
                .ok();
        }
    }
    Ok(Prepared {
        n,
        series,
        train,
        holdout,
        y_shift,
        y_scale,
        system,
        states,
        true_xi,
    })
}

pub fn model_spec(cfg: &RunConfig) -> ModelSpec {
    let mut spec = ModelSpec::new(cfg.p, cfg.m);
    spec.hidden = cfg.hidden.clone();
    spec.activation = cfg.activation;
    spec.library = LibrarySpec {
        degree: cfg.degree,
        trig: cfg.trig,
        include_constant: cfg.constant,
    };
    spec.weights = cfg.weights;
    spec.seed = cfg.seed;
    spec
}

pub fn train_config(cfg: &RunConfig) -> TrainConfig {
    TrainConfig {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        learning_rate: cfg.learning_rate,
        final_learning_rate: cfg.final_learning_rate,
        refit_period: cfg.refit_period,
        stlsq_threshold: cfg.threshold,
        relative_threshold: cfg.relative_threshold,
        rollout_steps: cfg.rollout_steps,
        init_mode: cfg.mode,
        perturb_sigma: cfg.sigma,
        pretrain_epochs: cfg.pretrain_epochs,
        seed: cfg.seed,
        grad_clip: cfg.grad_clip,
        sup_weight: cfg.sup_weight,
    }
}

pub fn eval_options(cfg: &RunConfig) -> EvalOptions {
    EvalOptions {
        horizon: cfg.horizon,
        windows: cfg.windows,
        long_rollout: cfg.long_rollout,
        ..EvalOptions::default()
    }
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub prepared: Prepared,
    pub model: DelayModel,
    pub report: TrainReport,
    /// Metrics on the held-out window, or on the training window without one.
    pub metrics: EvalMetrics,
}

impl Outcome {
    /// Normalized MSE of the latent coordinates against the reference state,
    /// averaged over coordinates.
    pub fn latent_nmse(&self) -> Option<f64> {
        let x = self.prepared.states.as_ref()?;
        if x.nrows() != self.model.latent_dim() {
            return None;
        }
        let z = self.model.encode(&self.prepared.train.h).ok()?;
        let m = x.nrows();
        Some((0..m).map(|k| (z.row(k) - x.row(k)).norm_squared() / x.row(k).norm_squared()).sum::<f64>() / m as f64)
    }
}

/// Builds, trains and evaluates a model without touching the filesystem.
pub fn run(cfg: &RunConfig) -> Result<Outcome, CliError> {
    let prepared = prepare(cfg)?;
    let mut model = assemble_model(&prepared.train, &model_spec(cfg))?;
    model.y_shift = prepared.y_shift;
    model.y_scale = prepared.y_scale;
    let mut data = TrainData::new(&model, &prepared.train)?;
    if cfg.mode == InitMode::Supervised {
        let states = prepared
            .states
            .clone()
            .ok_or_else(|| CliError::Usage("supervised mode needs a simulated system".into()))?;
        if states.nrows() != cfg.m {
            return Err(CliError::Usage(format!("supervised mode needs m = {} for this system", states.nrows())));
        }
        data = data.with_targets(states)?;
    }
    let reference = match cfg.mode {
        InitMode::KnownEquation | InitMode::Perturbed => {
            let xi = prepared.true_xi.as_ref().ok_or_else(|| {
                CliError::Usage(format!(
                    "mode {} needs a simulated system whose dynamics the library spans",
                    cfg.mode.name()
                ))
            })?;
            if xi.dim() != cfg.m {
                return Err(CliError::Usage(format!("mode {} needs m = {}", cfg.mode.name(), xi.dim())));
            }
            Some(xi.xi.clone())
        }
        _ => None,
    };
    let report = train(&mut model, &data, &train_config(cfg), reference.as_ref())?;
    let target = prepared.holdout.as_ref().unwrap_or(&prepared.train);
    let metrics = evaluate(&model, target, &eval_options(cfg))?;
    Ok(Outcome {
        prepared,
        model,
        report,
        metrics,
    })
}
