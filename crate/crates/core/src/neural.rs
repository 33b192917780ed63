//! Dense feed-forward networks with fused tangent (Jacobian-vector product)
//! propagation and a reverse pass that differentiates through both the value
//! and the tangent path.
//!
//! Parameters live in one flat buffer (per layer: column-major `W` then `b`)
//! so optimizers and finite-difference checks can treat them uniformly.
//! Batches are matrices with one sample per column.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DMatrixView, DMatrixViewMut, DVectorView};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Smooth hidden-layer nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Tanh,
    Elu,
}

impl Activation {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "sigmoid" => Ok(Self::Sigmoid),
            "tanh" => Ok(Self::Tanh),
            "elu" => Ok(Self::Elu),
            other => Err(Error::Invalid(format!("unknown activation `{other}`"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Sigmoid => "sigmoid",
            Self::Tanh => "tanh",
            Self::Elu => "elu",
        }
    }

    #[inline]
    pub fn value(self, x: f64) -> f64 {
        match self {
            Self::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            Self::Tanh => x.tanh(),
            Self::Elu => {
                if x > 0.0 {
                    x
                } else {
                    x.exp_m1()
                }
            }
        }
    }

    /// (σ(x), σ′(x), σ″(x))
    #[inline]
    pub fn derivs(self, x: f64) -> (f64, f64, f64) {
        match self {
            Self::Sigmoid => {
                let s = 1.0 / (1.0 + (-x).exp());
                let d1 = s * (1.0 - s);
                (s, d1, d1 * (1.0 - 2.0 * s))
            }
            Self::Tanh => {
                let t = x.tanh();
                let d1 = 1.0 - t * t;
                (t, d1, -2.0 * t * d1)
            }
            Self::Elu => {
                if x > 0.0 {
                    (x, 1.0, 0.0)
                } else {
                    let e = x.exp();
                    (e - 1.0, e, e)
                }
            }
        }
    }
}

/// `x ↦ W_L σ(… σ(W_1 x + b_1) …) + b_L`
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    dims: Vec<usize>,
    activation: Activation,
    seed: u64,
    params: Vec<f64>,
}

/// Value and directional derivative carried together.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentPair {
    pub value: Vec<f64>,
    pub tangent: Vec<f64>,
}

impl TangentPair {
    pub fn new(value: Vec<f64>, tangent: Vec<f64>) -> Result<Self> {
        if value.len() != tangent.len() {
            return Err(Error::dim("value and tangent lengths differ"));
        }
        Ok(Self { value, tangent })
    }
}

/// Intermediate values saved by a forward pass for [`Network::backward`].
#[derive(Debug, Clone)]
pub struct Cache {
    inputs: Vec<DMatrix<f64>>,
    pre: Vec<DMatrix<f64>>,
    tangent_inputs: Option<Vec<DMatrix<f64>>>,
    tangent_pre: Option<Vec<DMatrix<f64>>>,
}

impl Cache {
    pub fn batch_size(&self) -> usize {
        self.inputs.first().map_or(0, |m| m.ncols())
    }
}

pub fn init_network(dims: &[usize], activation: Activation, seed: u64) -> Result<Network> {
    Network::new(dims, activation, seed)
}

impl Network {
    /// Xavier-uniform weights, zero biases.
    pub fn new(dims: &[usize], activation: Activation, seed: u64) -> Result<Self> {
        if dims.len() < 2 || dims.iter().any(|d| *d == 0) {
            return Err(Error::Invalid(format!("invalid layer dims {dims:?}")));
        }
        let mut net = Self {
            dims: dims.to_vec(),
            activation,
            seed,
            params: vec![0.0; param_count(dims)],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut off = 0;
        for l in 0..net.layers() {
            let (fan_in, fan_out) = (dims[l], dims[l + 1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for w in &mut net.params[off..off + fan_in * fan_out] {
                *w = rng.random_range(-limit..limit);
            }
            off += fan_in * fan_out + fan_out;
        }
        Ok(net)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    fn offset(&self, layer: usize) -> usize {
        (0..layer).map(|l| self.dims[l] * self.dims[l + 1] + self.dims[l + 1]).sum()
    }

    pub fn weight(&self, layer: usize) -> DMatrixView<'_, f64> {
        let (i, o) = (self.dims[layer], self.dims[layer + 1]);
        let off = self.offset(layer);
        DMatrixView::from_slice(&self.params[off..off + i * o], o, i)
    }

    pub fn bias(&self, layer: usize) -> DVectorView<'_, f64> {
        let (i, o) = (self.dims[layer], self.dims[layer + 1]);
        let off = self.offset(layer) + i * o;
        DVectorView::from_slice(&self.params[off..off + o], o)
    }

    pub fn weight_mut(&mut self, layer: usize) -> DMatrixViewMut<'_, f64> {
        let (i, o) = (self.dims[layer], self.dims[layer + 1]);
        let off = self.offset(layer);
        DMatrixViewMut::from_slice(&mut self.params[off..off + i * o], o, i)
    }

    pub fn bias_mut(&mut self, layer: usize) -> &mut [f64] {
        let (i, o) = (self.dims[layer], self.dims[layer + 1]);
        let off = self.offset(layer) + i * o;
        &mut self.params[off..off + o]
    }

    fn affine(&self, layer: usize, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut a = self.weight(layer) * x;
        let b = self.bias(layer);
        for mut col in a.column_iter_mut() {
            col += &b;
        }
        a
    }

    /// Batched forward pass (one sample per column).
    pub fn forward_batch(&self, x: &DMatrix<f64>) -> Result<(DMatrix<f64>, Cache)> {
        self.check_input(x)?;
        let last = self.layers() - 1;
        let mut inputs = Vec::with_capacity(self.layers());
        let mut pre = Vec::with_capacity(self.layers());
        let mut v = x.clone();
        for l in 0..self.layers() {
            let a = self.affine(l, &v);
            let next = if l == last { a.clone() } else { a.map(|z| self.activation.value(z)) };
            if next.iter().any(|z| !z.is_finite()) {
                return Err(Error::NonFinite { layer: l });
            }
            inputs.push(std::mem::replace(&mut v, next));
            pre.push(a);
        }
        Ok((
            v,
            Cache {
                inputs,
                pre,
                tangent_inputs: None,
                tangent_pre: None,
            },
        ))
    }

    /// Batched forward pass that also pushes the tangent directions `xdot`
    /// through the network, returning `(f(x), J_f(x) ẋ)`.
    pub fn forward_tangent_batch(
        &self,
        x: &DMatrix<f64>,
        xdot: &DMatrix<f64>,
    ) -> Result<(DMatrix<f64>, DMatrix<f64>, Cache)> {
        self.check_input(x)?;
        if xdot.shape() != x.shape() {
            return Err(Error::dim("tangent batch shape differs from value batch"));
        }
        let last = self.layers() - 1;
        let n = self.layers();
        let (mut inputs, mut pre) = (Vec::with_capacity(n), Vec::with_capacity(n));
        let (mut tin, mut tpre) = (Vec::with_capacity(n), Vec::with_capacity(n));
        let mut v = x.clone();
        let mut vd = xdot.clone();
        for l in 0..n {
            let a = self.affine(l, &v);
            let ad = self.weight(l) * &vd;
            let (next, next_d) = if l == last {
                (a.clone(), ad.clone())
            } else {
                let mut nv = a.clone();
                let mut nd = ad.clone();
                for (val, tan) in nv.iter_mut().zip(nd.iter_mut()) {
                    let (s, d1, _) = self.activation.derivs(*val);
                    *val = s;
                    *tan *= d1;
                }
                (nv, nd)
            };
            if next.iter().chain(next_d.iter()).any(|z| !z.is_finite()) {
                return Err(Error::NonFinite { layer: l });
            }
            inputs.push(std::mem::replace(&mut v, next));
            tin.push(std::mem::replace(&mut vd, next_d));
            pre.push(a);
            tpre.push(ad);
        }
        Ok((
            v,
            vd,
            Cache {
                inputs,
                pre,
                tangent_inputs: Some(tin),
                tangent_pre: Some(tpre),
            },
        ))
    }

    /// Reverse pass. Accumulates parameter gradients into `grad` (same layout
    /// as [`params`](Self::params)) and returns the adjoints of the input and,
    /// for tangent caches, of the input tangent.
    ///
    /// With a tangent adjoint the weight gradients include the second-order
    /// terms through σ″.
    pub fn backward_batch(
        &self,
        cache: &Cache,
        out_adj: &DMatrix<f64>,
        tangent_adj: Option<&DMatrix<f64>>,
        grad: &mut [f64],
    ) -> Result<(DMatrix<f64>, Option<DMatrix<f64>>)> {
        if grad.len() != self.params.len() {
            return Err(Error::dim("gradient buffer length differs from parameter count"));
        }
        let batch = cache.batch_size();
        if out_adj.shape() != (self.output_dim(), batch) {
            return Err(Error::dim("output adjoint shape mismatch"));
        }
        let tangents = match (&cache.tangent_inputs, &cache.tangent_pre) {
            (Some(ti), Some(tp)) => Some((ti, tp)),
            _ => None,
        };
        if tangent_adj.is_some() && tangents.is_none() {
            return Err(Error::dim("tangent adjoint given for a value-only cache"));
        }
        if let Some(t) = tangent_adj {
            if t.shape() != out_adj.shape() {
                return Err(Error::dim("tangent adjoint shape mismatch"));
            }
        }
        let last = self.layers() - 1;
        let mut vbar = out_adj.clone();
        let mut tbar: Option<DMatrix<f64>> = match (tangents.is_some(), tangent_adj) {
            (true, Some(t)) => Some(t.clone()),
            (true, None) => Some(DMatrix::zeros(out_adj.nrows(), batch)),
            _ => None,
        };
        for l in (0..self.layers()).rev() {
            let a = &cache.pre[l];
            // adjoints of the pre-activation value and tangent
            let (abar, adbar) = if l == last {
                (vbar, tbar.take())
            } else {
                let mut abar = vbar;
                match (tbar.take(), tangents) {
                    (Some(mut tb), Some((_, tpre))) => {
                        let ad = &tpre[l];
                        for idx in 0..abar.len() {
                            let (_, d1, d2) = self.activation.derivs(a[idx]);
                            abar[idx] = abar[idx] * d1 + tb[idx] * d2 * ad[idx];
                            tb[idx] *= d1;
                        }
                        (abar, Some(tb))
                    }
                    _ => {
                        for idx in 0..abar.len() {
                            abar[idx] *= self.activation.derivs(a[idx]).1;
                        }
                        (abar, None)
                    }
                }
            };
            let (i, o) = (self.dims[l], self.dims[l + 1]);
            let off = self.offset(l);
            {
                let (gw, gb) = grad[off..off + i * o + o].split_at_mut(i * o);
                let mut gw = DMatrixViewMut::from_slice(gw, o, i);
                gw.gemm(1.0, &abar, &cache.inputs[l].transpose(), 1.0);
                if let (Some(adb), Some((tin, _))) = (&adbar, tangents) {
                    gw.gemm(1.0, adb, &tin[l].transpose(), 1.0);
                }
                for (k, g) in gb.iter_mut().enumerate() {
                    *g += abar.row(k).sum();
                }
            }
            let w = self.weight(l);
            vbar = w.tr_mul(&abar);
            tbar = adbar.map(|adb| w.tr_mul(&adb));
        }
        Ok((vbar, tbar))
    }

    fn check_input(&self, x: &DMatrix<f64>) -> Result<()> {
        if x.nrows() != self.input_dim() {
            return Err(Error::dim(format!(
                "network expects {} inputs, got {}",
                self.input_dim(),
                x.nrows()
            )));
        }
        Ok(())
    }

    /// Single-sample forward pass.
    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, Cache)> {
        let (out, cache) = self.forward_batch(&DMatrix::from_column_slice(x.len(), 1, x))?;
        Ok((out.as_slice().to_vec(), cache))
    }

    /// Single-sample value + tangent pass.
    pub fn forward_with_tangent(&self, pair: &TangentPair) -> Result<(TangentPair, Cache)> {
        let d = pair.value.len();
        if pair.tangent.len() != d {
            return Err(Error::dim("value and tangent lengths differ"));
        }
        let (v, t, cache) = self.forward_tangent_batch(
            &DMatrix::from_column_slice(d, 1, &pair.value),
            &DMatrix::from_column_slice(d, 1, &pair.tangent),
        )?;
        Ok((
            TangentPair {
                value: v.as_slice().to_vec(),
                tangent: t.as_slice().to_vec(),
            },
            cache,
        ))
    }

    /// Single-sample reverse pass; returns (input adjoint, input tangent
    /// adjoint, parameter gradient).
    pub fn backward(
        &self,
        cache: &Cache,
        out_adj: &[f64],
        tangent_adj: Option<&[f64]>,
    ) -> Result<(Vec<f64>, Option<Vec<f64>>, Vec<f64>)> {
        let mut grad = vec![0.0; self.num_params()];
        let oa = DMatrix::from_column_slice(out_adj.len(), 1, out_adj);
        let ta = tangent_adj.map(|t| DMatrix::from_column_slice(t.len(), 1, t));
        let (ia, ita) = self.backward_batch(cache, &oa, ta.as_ref(), &mut grad)?;
        Ok((ia.as_slice().to_vec(), ita.map(|m| m.as_slice().to_vec()), grad))
    }

    /// Writes `<stem>.bin` (little-endian f64 parameters) and `<stem>.txt`
    /// (layer dims, activation, seed).
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        let mut manifest = String::new();
        let dims: Vec<String> = self.dims.iter().map(|d| d.to_string()).collect();
        let _ = writeln!(manifest, "layer_dims={}", dims.join(","));
        let _ = writeln!(manifest, "activation={}", self.activation.name());
        let _ = writeln!(manifest, "seed={}", self.seed);
        let _ = writeln!(manifest, "params={}", self.params.len());
        let mpath = dir.join(format!("{stem}.txt"));
        fs::write(&mpath, manifest).map_err(|e| Error::io(&mpath, e))?;
        let bytes: Vec<u8> = self.params.iter().flat_map(|v| v.to_le_bytes()).collect();
        let bpath = dir.join(format!("{stem}.bin"));
        fs::write(&bpath, bytes).map_err(|e| Error::io(&bpath, e))
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let mpath = dir.join(format!("{stem}.txt"));
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let mut dims = None;
        let mut activation = None;
        let mut seed = 0u64;
        for (lineno, line) in text.lines().enumerate() {
            let Some((k, v)) = line.split_once('=') else { continue };
            let bad = || Error::parse(&mpath, lineno + 1, format!("invalid `{k}`"));
            match k.trim() {
                "layer_dims" => {
                    dims = Some(
                        v.split(',')
                            .map(|d| d.trim().parse::<usize>())
                            .collect::<std::result::Result<Vec<_>, _>>()
                            .map_err(|_| bad())?,
                    )
                }
                "activation" => activation = Some(Activation::parse(v.trim())?),
                "seed" => seed = v.trim().parse().map_err(|_| bad())?,
                _ => {}
            }
        }
        let dims = dims.ok_or_else(|| Error::parse(&mpath, 0, "missing layer_dims"))?;
        let activation = activation.ok_or_else(|| Error::parse(&mpath, 0, "missing activation"))?;
        let mut net = Self::new(&dims, activation, seed)?;
        let bpath = dir.join(format!("{stem}.bin"));
        let bytes = fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
        if bytes.len() != net.params.len() * 8 {
            return Err(Error::parse(&bpath, 0, "parameter count does not match manifest"));
        }
        for (p, chunk) in net.params.iter_mut().zip(bytes.chunks_exact(8)) {
            *p = f64::from_le_bytes(chunk.try_into().unwrap());
        }
        Ok(net)
    }
}

fn param_count(dims: &[usize]) -> usize {
    dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    pub fn new(len: usize, config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// Clears the moment estimates of one parameter (used when a coefficient
    /// is forced to zero and must not drift back through stale momentum).
    pub fn reset_entry(&mut self, i: usize) {
        self.m[i] = 0.0;
        self.v[i] = 0.0;
    }
}

/// One bias-corrected Adam step.
pub fn adam_update(params: &mut [f64], grads: &[f64], state: &mut AdamState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.len() {
        return Err(Error::dim("params, grads and optimizer state must have equal length"));
    }
    state.step += 1;
    let AdamConfig { lr, beta1, beta2, eps } = state.config;
    let c1 = 1.0 - beta1.powi(state.step as i32);
    let c2 = 1.0 - beta2.powi(state.step as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g;
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g;
        let mhat = state.m[i] / c1;
        let vhat = state.v[i] / c2;
        params[i] -= lr * mhat / (vhat.sqrt() + eps);
    }
    Ok(())
}

/// Rescales `grads` in place so its Euclidean norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| *g *= s);
    }
    norm
}
