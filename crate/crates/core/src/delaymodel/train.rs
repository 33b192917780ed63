//! Coefficient initialization, SVD-mode pretraining and the main training
//! loop (minibatch Adam with periodic sparse refits).

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::{debug, info, warn};
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::losses::{loss_and_gradient, LossBreakdown, LossConfig};
use super::{DelayModel, TrainData};
use crate::csvio::fmt_f64;
use crate::error::{Error, Result};
use crate::neural::{adam_update, AdamConfig, AdamState};
use crate::sindy::{stlsq, StlsqOptions};

/// How Ξ is initialized and whether it trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitMode {
    /// Random Ξ plus a loss pulling the latent state onto the true state.
    Supervised,
    /// Ξ fixed to a reference model and never updated.
    KnownEquation,
    /// Ξ drawn around a reference model, then trained.
    Perturbed,
    /// Ξ drawn around zero, then trained.
    Random,
}

impl InitMode {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "supervised" => Ok(Self::Supervised),
            "known_equation" | "known" => Ok(Self::KnownEquation),
            "perturbed" => Ok(Self::Perturbed),
            "random" => Ok(Self::Random),
            other => Err(Error::Invalid(format!("unknown init mode `{other}`"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Supervised => "supervised",
            Self::KnownEquation => "known_equation",
            Self::Perturbed => "perturbed",
            Self::Random => "random",
        }
    }
}

/// Standard deviation of the random-mode coefficient draw.
pub const RANDOM_INIT_STD: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Learning rate reached at the last epoch by geometric decay; `None`
    /// keeps the rate constant.
    pub final_learning_rate: Option<f64>,
    /// Epochs between sparse refits of Ξ.
    pub refit_period: usize,
    pub stlsq_threshold: f64,
    /// Apply the threshold to each term's relative contribution rather than
    /// to the raw coefficient (see [`StlsqOptions::relative`]).
    pub relative_threshold: bool,
    /// Consistency rollout length; `None` uses n − 1.
    pub rollout_steps: Option<usize>,
    pub init_mode: InitMode,
    pub perturb_sigma: f64,
    pub pretrain_epochs: usize,
    pub seed: u64,
    /// Global gradient-norm clip.
    pub grad_clip: f64,
    /// Weight of the supervised term (supervised mode only).
    pub sup_weight: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1000,
            batch_size: 128,
            learning_rate: 1e-3,
            final_learning_rate: None,
            refit_period: 25,
            stlsq_threshold: 0.1,
            relative_threshold: false,
            rollout_steps: None,
            init_mode: InitMode::Random,
            perturb_sigma: 20.0,
            pretrain_epochs: 0,
            seed: 0,
            grad_clip: 10.0,
            sup_weight: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn rollout_steps_for(&self, n: usize) -> usize {
        self.rollout_steps.unwrap_or(n.saturating_sub(1))
    }

    /// Learning rate used during `epoch`.
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        match self.final_learning_rate {
            Some(end) if self.epochs > 1 => {
                let frac = epoch.min(self.epochs - 1) as f64 / (self.epochs - 1) as f64;
                self.learning_rate * (end / self.learning_rate).powf(frac)
            }
            _ => self.learning_rate,
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        let steps = self.rollout_steps_for(n);
        let bad = |msg: String| Err(Error::Invalid(msg));
        if self.refit_period == 0 {
            return bad("refit_period must be at least 1".into());
        }
        if steps == 0 || steps >= n {
            return bad(format!("rollout_steps={steps} must be in 1..={}", n - 1));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if let Some(lr) = self.final_learning_rate {
            if !(lr > 0.0 && lr.is_finite()) {
                return bad(format!("final_learning_rate must be positive, got {lr}"));
            }
        }
        if !(self.perturb_sigma >= 0.0) || !(self.stlsq_threshold >= 0.0) || !(self.grad_clip > 0.0) {
            return bad("sigma and threshold must be nonnegative, grad_clip positive".into());
        }
        Ok(())
    }
}

/// Sets Ξ according to `mode`. Modes built on a reference model need
/// `true_xi` (r × m, in latent coordinates).
pub fn initialize_xi(
    model: &mut DelayModel,
    mode: InitMode,
    true_xi: Option<&DMatrix<f64>>,
    sigma: f64,
    seed: u64,
) -> Result<()> {
    let shape = model.sindy.xi.shape();
    let reference = match mode {
        InitMode::KnownEquation | InitMode::Perturbed => {
            let xi = true_xi.ok_or_else(|| Error::MissingTrueXi(mode.name().into()))?;
            if xi.shape() != shape {
                return Err(Error::dim(format!(
                    "reference Xi is {}x{}, model needs {}x{}",
                    xi.nrows(),
                    xi.ncols(),
                    shape.0,
                    shape.1
                )));
            }
            Some(xi)
        }
        _ => None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_c0ef);
    let draw = |mean: f64, sd: f64, rng: &mut ChaCha8Rng| -> Result<f64> {
        if sd == 0.0 {
            return Ok(mean);
        }
        let d = Normal::new(mean, sd).map_err(|e| Error::Invalid(e.to_string()))?;
        Ok(d.sample(rng))
    };
    model.xi_frozen = false;
    match mode {
        InitMode::KnownEquation => {
            let xi = reference.unwrap();
            model.sindy.xi = xi.clone();
            model.sindy.mask = xi.map(|v| v != 0.0);
            model.xi_frozen = true;
        }
        InitMode::Perturbed => {
            let xi = reference.unwrap();
            let mut out = xi.clone();
            for v in out.iter_mut() {
                *v = draw(*v, sigma, &mut rng)?;
            }
            model.sindy.xi = out;
            model.sindy.mask = DMatrix::from_element(shape.0, shape.1, true);
        }
        InitMode::Random | InitMode::Supervised => {
            let mut out = DMatrix::zeros(shape.0, shape.1);
            for v in out.iter_mut() {
                *v = draw(0.0, RANDOM_INIT_STD, &mut rng)?;
            }
            model.sindy.xi = out;
            model.sindy.mask = DMatrix::from_element(shape.0, shape.1, true);
        }
    }
    Ok(())
}

/// Fit quality after [`pretrain_to_svd_modes`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PretrainReport {
    /// `‖φ(a) − v‖² / ‖v − v̄‖²` over all columns.
    pub encoder_nmse: f64,
    /// `‖ψ(v) lift − h‖² / ‖h‖²` over all columns.
    pub decoder_rel_error: f64,
}

fn shuffled(len: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..len).collect();
    idx.shuffle(rng);
    idx
}

/// Fits the encoder to the leading `m` SVD coordinates `Σ_m V_mᵀ` of the
/// data and the decoder to invert them. The latent model plays no part.
pub fn pretrain_to_svd_modes(
    model: &mut DelayModel,
    data: &TrainData,
    epochs: usize,
    learning_rate: f64,
    batch_size: usize,
    seed: u64,
) -> Result<PretrainReport> {
    let m = model.latent_dim();
    let p = match &model.basis {
        Some(b) => b.p(),
        None => return Err(Error::Invalid("pretraining to SVD modes needs an SVD basis".into())),
    };
    if p < m {
        return Err(Error::Invalid(format!("SVD rank p={p} is below latent dimension m={m}")));
    }
    if data.is_empty() || batch_size == 0 {
        return Err(Error::Invalid("pretraining needs data and a positive batch size".into()));
    }
    let targets = data.a.rows(0, m).into_owned();
    let cfg = AdamConfig {
        lr: learning_rate,
        ..Default::default()
    };
    let mut enc_state = AdamState::new(model.encoder.num_params(), cfg);
    let mut dec_state = AdamState::new(model.decoder.num_params(), cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let n = data.h.nrows();
    for _ in 0..epochs {
        for chunk in shuffled(data.len(), &mut rng).chunks(batch_size) {
            let a = data.a.select_columns(chunk.iter());
            let v = targets.select_columns(chunk.iter());
            let h = data.h.select_columns(chunk.iter());
            let bsz = chunk.len() as f64;

            let (z, cache) = model.encoder.forward_batch(&a)?;
            let adj = (z - &v) * (2.0 / (m as f64 * bsz));
            let mut g = vec![0.0; model.encoder.num_params()];
            model.encoder.backward_batch(&cache, &adj, None, &mut g)?;
            adam_update(model.encoder.params_mut(), &g, &mut enc_state)?;

            let (out, cache) = model.decoder.forward_batch(&v)?;
            let res = model.lift(&out)? - &h;
            let adj = model.project(&res)? * (2.0 / (n as f64 * bsz));
            let mut g = vec![0.0; model.decoder.num_params()];
            model.decoder.backward_batch(&cache, &adj, None, &mut g)?;
            adam_update(model.decoder.params_mut(), &g, &mut dec_state)?;
        }
    }
    let z = model.encoder.forward_batch(&data.a)?.0;
    let mut centered = targets.clone();
    for mut row in centered.row_iter_mut() {
        let mean = row.mean();
        row.add_scalar_mut(-mean);
    }
    let encoder_nmse = (z - &targets).norm_squared() / centered.norm_squared();
    let recon = model.decode(&targets)?;
    let decoder_rel_error = (recon - &data.h).norm_squared() / data.h.norm_squared();
    Ok(PretrainReport {
        encoder_nmse,
        decoder_rel_error,
    })
}

/// One row of the training history.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub active_terms: usize,
    /// Ξ at the end of the epoch, column-major.
    pub xi: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub records: Vec<EpochRecord>,
    pub pretrain: Option<PretrainReport>,
    /// Epoch at which a non-finite loss stopped training; the model is then
    /// restored to the end of the previous epoch.
    pub aborted: Option<usize>,
    pub term_names: Vec<String>,
    pub latent_dim: usize,
}

impl TrainReport {
    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    /// Loss history, one row per epoch.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,recon,hdot,zdot,z1,cons,reg,total,active_terms,sup\n");
        for r in &self.records {
            let l = &r.loss;
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{}",
                r.epoch,
                fmt_f64(l.recon),
                fmt_f64(l.hdot),
                fmt_f64(l.zdot),
                fmt_f64(l.z1),
                fmt_f64(l.cons),
                fmt_f64(l.reg),
                fmt_f64(l.total),
                r.active_terms,
                fmt_f64(l.sup)
            );
        }
        s
    }

    /// Coefficient history, one column per (equation, term) pair.
    pub fn coefficients_csv(&self) -> String {
        let mut header = vec!["epoch".to_string()];
        for k in 0..self.latent_dim {
            for t in &self.term_names {
                header.push(format!("dz{}:{}", k + 1, t));
            }
        }
        let mut s = header.join(",");
        s.push('\n');
        for r in &self.records {
            let vals: Vec<String> = r.xi.iter().map(|v| fmt_f64(*v)).collect();
            let _ = writeln!(s, "{},{}", r.epoch, vals.join(","));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn write_coefficients_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.coefficients_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Replaces Ξ and its mask by a sparse regression of the encoder's latent
/// derivatives on the library.
fn refit(model: &mut DelayModel, data: &TrainData, threshold: f64, relative: bool) -> Result<()> {
    let (z, zdot, _) = model.encoder.forward_tangent_batch(&data.a, &data.adot)?;
    let theta = model.sindy.library.evaluate(&z.transpose())?;
    let fit = stlsq(
        &theta,
        &zdot.transpose(),
        &StlsqOptions {
            threshold,
            relative,
            ..Default::default()
        },
    )?;
    if fit.xi.iter().all(|v| v.is_finite()) {
        model.sindy.xi = fit.xi;
        model.sindy.mask = fit.mask;
    } else {
        warn!("refit produced non-finite coefficients; keeping previous model");
    }
    Ok(())
}

/// Runs the configured initialization, optional pretraining, then minibatch
/// Adam on the composite objective. Ξ is re-fitted by STLSQ every
/// `refit_period` epochs; coefficients outside the resulting mask stay at
/// zero until the next refit.
pub fn train(
    model: &mut DelayModel,
    data: &TrainData,
    config: &TrainConfig,
    true_xi: Option<&DMatrix<f64>>,
) -> Result<TrainReport> {
    config.validate(model.n)?;
    model.check_consistent()?;
    if data.is_empty() {
        return Err(Error::Invalid("no training columns".into()));
    }
    let supervised = config.init_mode == InitMode::Supervised;
    if supervised && data.targets.is_none() {
        return Err(Error::Invalid("supervised mode needs full-state targets".into()));
    }
    initialize_xi(model, config.init_mode, true_xi, config.perturb_sigma, config.seed)?;
    let pretrain = if config.pretrain_epochs > 0 {
        let rep = pretrain_to_svd_modes(
            model,
            data,
            config.pretrain_epochs,
            config.learning_rate,
            config.batch_size,
            config.seed,
        )?;
        info!(
            "pretrain: encoder nmse {:.3e}, decoder rel error {:.3e}",
            rep.encoder_nmse, rep.decoder_rel_error
        );
        Some(rep)
    } else {
        None
    };
    let loss_cfg = LossConfig {
        rollout_steps: config.rollout_steps_for(model.n),
        sup_weight: if supervised { config.sup_weight } else { 0.0 },
    };
    let adam = AdamConfig {
        lr: config.learning_rate,
        ..Default::default()
    };
    let mut enc_state = AdamState::new(model.encoder.num_params(), adam);
    let mut dec_state = AdamState::new(model.decoder.num_params(), adam);
    let mut xi_state = AdamState::new(model.sindy.xi.len(), adam);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut report = TrainReport {
        records: Vec::with_capacity(config.epochs),
        pretrain,
        aborted: None,
        term_names: model.sindy.library.names(&crate::sindy::default_var_names(model.latent_dim())),
        latent_dim: model.latent_dim(),
    };
    let mut last_good = model.clone();
    'epochs: for epoch in 0..config.epochs {
        let lr = config.learning_rate_at(epoch);
        enc_state.config.lr = lr;
        dec_state.config.lr = lr;
        xi_state.config.lr = lr;
        let mut parts = Vec::new();
        for chunk in shuffled(data.len(), &mut rng).chunks(config.batch_size) {
            let batch = data.select(chunk);
            let (loss, mut g) = loss_and_gradient(model, &batch, &loss_cfg)?;
            let norm = g.norm(!model.xi_frozen);
            if !loss.is_finite() || !norm.is_finite() {
                warn!("non-finite loss at epoch {epoch}; restoring previous epoch");
                *model = last_good.clone();
                report.aborted = Some(epoch);
                break 'epochs;
            }
            if norm > config.grad_clip {
                g.scale(config.grad_clip / norm);
            }
            adam_update(model.encoder.params_mut(), &g.encoder, &mut enc_state)?;
            adam_update(model.decoder.params_mut(), &g.decoder, &mut dec_state)?;
            if !model.xi_frozen {
                adam_update(model.sindy.xi.as_mut_slice(), g.xi.as_slice(), &mut xi_state)?;
                model.sindy.apply_mask();
            }
            parts.push((loss, chunk.len() as f64));
        }
        let loss = LossBreakdown::weighted_mean(&parts);
        if !model.xi_frozen && (epoch + 1) % config.refit_period == 0 {
            refit(model, data, config.stlsq_threshold, config.relative_threshold)?;
            xi_state = AdamState::new(model.sindy.xi.len(), adam);
        }
        debug!(
            "epoch {epoch}: total {:.4e} recon {:.3e} z1 {:.3e} cons {:.3e} active {}",
            loss.total,
            loss.recon,
            loss.z1,
            loss.cons,
            model.sindy.active_terms()
        );
        report.records.push(EpochRecord {
            epoch,
            loss,
            active_terms: model.sindy.active_terms(),
            xi: model.sindy.xi.as_slice().to_vec(),
        });
        last_good = model.clone();
    }
    Ok(report)
}
