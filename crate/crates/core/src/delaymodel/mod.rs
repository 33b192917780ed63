//! The delay autoencoder: an encoder from delay coordinates (optionally
//! pre-projected onto an SVD basis) to a latent state, a decoder back, and a
//! sparse latent model tying the two together.

mod checkpoint;
mod eval;
mod losses;
mod rollout;
mod train;

use log::warn;
use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::hankel::{self, HankelEmbedding, SvdBasis};
use crate::neural::{Activation, Network};
use crate::sindy::{build_library_with, FeatureLibrary, SindyModel};

pub use eval::{evaluate, kurtosis, orbit_return_error, series_of, sign_changes, EvalMetrics, EvalOptions};
pub use losses::{compute_losses, loss_and_gradient, Gradients, LossBreakdown, LossConfig};
pub use rollout::{rollout_latent, ROLLOUT_CAP};
pub use train::{
    initialize_xi, pretrain_to_svd_modes, train, EpochRecord, InitMode, PretrainReport, TrainConfig,
    TrainReport,
};

/// Weights of the auxiliary loss terms relative to the reconstruction loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    /// λ₁, derivative reconstruction in delay space.
    pub hdot: f64,
    /// λ₂, latent derivative consistency.
    pub zdot: f64,
    /// λ₃, first latent coordinate pinned to the measurement.
    pub z1: f64,
    /// λ₄, multi-step rollout consistency.
    pub cons: f64,
    /// λ₅, L1 penalty on active coefficients.
    pub reg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::for_scale(1.0)
    }
}

impl LossWeights {
    /// Defaults for data whose mean squared delay-vector entry is
    /// `recon_scale` (1 for standardized input).
    pub fn for_scale(recon_scale: f64) -> Self {
        Self {
            hdot: 1e-4 * recon_scale,
            zdot: 1e-4 * recon_scale,
            z1: 1.0,
            cons: 1e-2,
            reg: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.hdot, self.zdot, self.z1, self.cons, self.reg];
        if all.iter().all(|w| w.is_finite() && *w >= 0.0) {
            Ok(())
        } else {
            Err(Error::Invalid(format!("loss weights must be finite and nonnegative: {self:?}")))
        }
    }
}

/// Candidate-function library description.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LibrarySpec {
    pub degree: u32,
    pub trig: bool,
    pub include_constant: bool,
}

impl Default for LibrarySpec {
    fn default() -> Self {
        Self {
            degree: 2,
            trig: false,
            include_constant: true,
        }
    }
}

/// Architecture choices for [`assemble_model`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    /// SVD rank; `None` feeds raw delay vectors to the encoder.
    pub p: Option<usize>,
    pub m: usize,
    /// Encoder hidden widths; the decoder mirrors them.
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub library: LibrarySpec,
    pub weights: LossWeights,
    pub seed: u64,
}

impl ModelSpec {
    pub fn new(p: Option<usize>, m: usize) -> Self {
        Self {
            p,
            m,
            hidden: vec![64, 32, 16],
            activation: Activation::Sigmoid,
            library: LibrarySpec::default(),
            weights: LossWeights::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DelayModel {
    pub encoder: Network,
    pub decoder: Network,
    pub sindy: SindyModel,
    pub basis: Option<SvdBasis>,
    pub weights: LossWeights,
    /// Delay-vector length.
    pub n: usize,
    /// Sample interval, also the rollout step.
    pub tau: f64,
    /// When set, Ξ is excluded from optimization and refits.
    pub xi_frozen: bool,
    /// Affine map from the first latent coordinate to measurement units:
    /// `y = y_shift + y_scale · z₁`.
    pub y_shift: f64,
    pub y_scale: f64,
}

pub fn assemble_model(embedding: &HankelEmbedding, spec: &ModelSpec) -> Result<DelayModel> {
    let n = embedding.n();
    if spec.m == 0 {
        return Err(Error::Invalid("latent dimension m must be at least 1".into()));
    }
    spec.weights.validate()?;
    if n <= 2 * spec.m {
        warn!("delay dimension n={n} does not exceed 2m={}; the embedding may not unfold", 2 * spec.m);
    }
    let basis = match spec.p {
        Some(p) => Some(hankel::truncated_svd(embedding, p)?),
        None => None,
    };
    let input = spec.p.unwrap_or(n);
    let mut enc_dims = vec![input];
    enc_dims.extend(&spec.hidden);
    enc_dims.push(spec.m);
    let dec_dims: Vec<usize> = enc_dims.iter().rev().copied().collect();
    let encoder = Network::new(&enc_dims, spec.activation, spec.seed)?;
    let decoder = Network::new(&dec_dims, spec.activation, spec.seed.wrapping_add(0x9e37_79b9))?;
    let library = build_library_with(spec.m, spec.library.degree, spec.library.trig, spec.library.include_constant)?;
    Ok(DelayModel {
        encoder,
        decoder,
        sindy: SindyModel::zeros(library),
        basis,
        weights: spec.weights,
        n,
        tau: embedding.tau,
        xi_frozen: false,
        y_shift: 0.0,
        y_scale: 1.0,
    })
}

impl DelayModel {
    pub fn latent_dim(&self) -> usize {
        self.encoder.output_dim()
    }

    /// Encoder input width (p with a basis, n without).
    pub fn input_dim(&self) -> usize {
        self.encoder.input_dim()
    }

    pub fn library(&self) -> &FeatureLibrary {
        &self.sindy.library
    }

    /// Maps delay vectors (columns) to encoder inputs.
    pub fn project(&self, h: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        match &self.basis {
            Some(b) => b.project(h),
            None if h.nrows() == self.n => Ok(h.clone()),
            None => Err(Error::dim(format!("expected {} rows, got {}", self.n, h.nrows()))),
        }
    }

    /// Maps decoder outputs back to delay space.
    pub fn lift(&self, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        match &self.basis {
            Some(basis) => basis.lift(b),
            None => Ok(b.clone()),
        }
    }

    /// Latent states (m × columns) of the given delay vectors.
    pub fn encode(&self, h: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(self.encoder.forward_batch(&self.project(h)?)?.0)
    }

    /// Delay vectors reconstructed from latent states.
    pub fn decode(&self, z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.lift(&self.decoder.forward_batch(z)?.0)
    }

    /// The latent model rewritten with `z₁` in measurement units.
    pub fn descaled_sindy(&self) -> Result<SindyModel> {
        let m = self.latent_dim();
        let mut shift = vec![0.0; m];
        let mut scale = vec![1.0; m];
        shift[0] = self.y_shift;
        scale[0] = self.y_scale;
        // z = (x - shift) / scale, so x = shift + scale z is the inverse map
        let inv_shift: Vec<f64> = (0..m).map(|k| -shift[k] / scale[k]).collect();
        let inv_scale: Vec<f64> = scale.iter().map(|s| 1.0 / s).collect();
        self.sindy.reparameterize(&inv_shift, &inv_scale)
    }

    pub fn check_consistent(&self) -> Result<()> {
        let m = self.latent_dim();
        let expected_in = self.basis.as_ref().map_or(self.n, |b| b.p());
        if self.encoder.input_dim() != expected_in || self.decoder.output_dim() != expected_in {
            return Err(Error::dim("encoder/decoder widths disagree with the basis"));
        }
        if self.decoder.input_dim() != m || self.sindy.dim() != m {
            return Err(Error::dim("latent dimensions of encoder, decoder and library disagree"));
        }
        if let Some(b) = &self.basis {
            if b.n() != self.n {
                return Err(Error::dim("basis rows differ from delay dimension"));
            }
        }
        Ok(())
    }
}

/// Embedding columns prepared for training: delay vectors, their time
/// derivatives, encoder inputs and optional full-state targets.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainData {
    pub h: DMatrix<f64>,
    pub hdot: DMatrix<f64>,
    pub a: DMatrix<f64>,
    pub adot: DMatrix<f64>,
    /// m × q standardized full state aligned with the columns, used by the
    /// supervised mode.
    pub targets: Option<DMatrix<f64>>,
}

impl TrainData {
    pub fn new(model: &DelayModel, embedding: &HankelEmbedding) -> Result<Self> {
        if embedding.n() != model.n {
            return Err(Error::dim(format!(
                "embedding has n={}, model expects {}",
                embedding.n(),
                model.n
            )));
        }
        Ok(Self {
            a: model.project(&embedding.h)?,
            adot: model.project(&embedding.hdot)?,
            h: embedding.h.clone(),
            hdot: embedding.hdot.clone(),
            targets: None,
        })
    }

    /// Attaches full-state targets (m × q).
    pub fn with_targets(mut self, targets: DMatrix<f64>) -> Result<Self> {
        if targets.ncols() != self.len() {
            return Err(Error::dim(format!(
                "targets have {} columns, data has {}",
                targets.ncols(),
                self.len()
            )));
        }
        self.targets = Some(targets);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.h.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.h.ncols() == 0
    }

    /// Column subset, in the given order.
    pub fn select(&self, cols: &[usize]) -> Self {
        let pick = |m: &DMatrix<f64>| m.select_columns(cols.iter());
        Self {
            h: pick(&self.h),
            hdot: pick(&self.hdot),
            a: pick(&self.a),
            adot: pick(&self.adot),
            targets: self.targets.as_ref().map(pick),
        }
    }
}

/// Standardizes each row of a (dims × samples) matrix; returns the
/// standardized matrix with the row means and standard deviations.
pub fn standardize_rows(x: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>, Vec<f64>) {
    let mut out = x.clone();
    let mut means = Vec::with_capacity(x.nrows());
    let mut stds = Vec::with_capacity(x.nrows());
    for i in 0..x.nrows() {
        let row: Vec<f64> = x.row(i).iter().copied().collect();
        let (mu, sd) = crate::dynsys::mean_std(&row);
        let sd = if sd > 0.0 { sd } else { 1.0 };
        for v in out.row_mut(i).iter_mut() {
            *v = (*v - mu) / sd;
        }
        means.push(mu);
        stds.push(sd);
    }
    (out, means, stds)
}

#[cfg(test)]
mod tests;
