//! The composite training objective and its exact gradient.

use nalgebra::DMatrix;

use super::rollout::Tape;
use super::{DelayModel, TrainData};
use crate::error::{Error, Result};

/// Per-step squared rollout error is clamped here (with zero gradient) so a
/// diverging latent model cannot swamp the objective.
pub const CONS_CAP: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    /// Rollout length for the consistency term; 0 disables the term.
    pub rollout_steps: usize,
    /// Weight of the full-state supervision term (used only when the data
    /// carries targets).
    pub sup_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            rollout_steps: 1,
            sup_weight: 1.0,
        }
    }
}

/// Individual loss values. Every term is a mean over samples and vector
/// components.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub recon: f64,
    pub hdot: f64,
    pub zdot: f64,
    pub z1: f64,
    pub cons: f64,
    pub reg: f64,
    /// `recon + λ₁ hdot + λ₂ zdot + λ₃ z1 + λ₄ cons + λ₅ reg`.
    pub total: f64,
    /// Full-state supervision loss (outside `total`).
    pub sup: f64,
    /// Samples whose rollout left the admissible range.
    pub cons_diverged: usize,
}

impl LossBreakdown {
    /// The quantity actually minimized: `total + sup_weight · sup`.
    pub fn objective(&self, sup_weight: f64) -> f64 {
        self.total + sup_weight * self.sup
    }

    pub fn is_finite(&self) -> bool {
        [self.recon, self.hdot, self.zdot, self.z1, self.cons, self.reg, self.total, self.sup]
            .iter()
            .all(|v| v.is_finite())
    }

    /// Weighted combination of several breakdowns (e.g. minibatches).
    pub fn weighted_mean(parts: &[(LossBreakdown, f64)]) -> LossBreakdown {
        let wsum: f64 = parts.iter().map(|(_, w)| w).sum();
        let mut out = LossBreakdown::default();
        for (b, w) in parts {
            let f = w / wsum;
            out.recon += f * b.recon;
            out.hdot += f * b.hdot;
            out.zdot += f * b.zdot;
            out.z1 += f * b.z1;
            out.cons += f * b.cons;
            out.reg += f * b.reg;
            out.total += f * b.total;
            out.sup += f * b.sup;
            out.cons_diverged += b.cons_diverged;
        }
        out
    }
}

/// Gradient of the objective with respect to every trainable block.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub encoder: Vec<f64>,
    pub decoder: Vec<f64>,
    pub xi: DMatrix<f64>,
}

impl Gradients {
    pub fn zeros(model: &DelayModel) -> Self {
        Self {
            encoder: vec![0.0; model.encoder.num_params()],
            decoder: vec![0.0; model.decoder.num_params()],
            xi: DMatrix::zeros(model.sindy.xi.nrows(), model.sindy.xi.ncols()),
        }
    }

    pub fn norm(&self, include_xi: bool) -> f64 {
        let mut s: f64 = self.encoder.iter().chain(&self.decoder).map(|g| g * g).sum();
        if include_xi {
            s += self.xi.norm_squared();
        }
        s.sqrt()
    }

    pub fn scale(&mut self, f: f64) {
        self.encoder.iter_mut().chain(self.decoder.iter_mut()).for_each(|g| *g *= f);
        self.xi *= f;
    }
}

pub fn compute_losses(model: &DelayModel, batch: &TrainData, cfg: &LossConfig) -> Result<LossBreakdown> {
    evaluate_objective(model, batch, cfg, None)
}

pub fn loss_and_gradient(model: &DelayModel, batch: &TrainData, cfg: &LossConfig) -> Result<(LossBreakdown, Gradients)> {
    let mut g = Gradients::zeros(model);
    let loss = evaluate_objective(model, batch, cfg, Some(&mut g))?;
    Ok((loss, g))
}

fn column(m: &DMatrix<f64>, i: usize) -> &[f64] {
    let r = m.nrows();
    &m.as_slice()[i * r..(i + 1) * r]
}

fn evaluate_objective(
    model: &DelayModel,
    batch: &TrainData,
    cfg: &LossConfig,
    mut grads: Option<&mut Gradients>,
) -> Result<LossBreakdown> {
    let bsz = batch.len();
    if bsz == 0 {
        return Err(Error::Invalid("empty batch".into()));
    }
    let n = batch.h.nrows();
    if n != model.n || batch.a.nrows() != model.input_dim() {
        return Err(Error::dim("batch does not match the model"));
    }
    if cfg.rollout_steps >= n {
        return Err(Error::Invalid(format!(
            "rollout_steps={} must be below the delay dimension {n}",
            cfg.rollout_steps
        )));
    }
    let w = model.weights;
    let m = model.latent_dim();
    let lib = &model.sindy.library;
    let xi = &model.sindy.xi;
    let r = lib.len();
    let nb = (n * bsz) as f64;
    let mb = (m * bsz) as f64;
    let b = bsz as f64;

    // encoder with tangent: z = φ(a), ż_e = ∇φ ȧ
    let (z, ze_dot, enc_cache) = model.encoder.forward_tangent_batch(&batch.a, &batch.adot)?;
    let mut theta = DMatrix::zeros(r, bsz);
    for i in 0..bsz {
        let start = i * r;
        lib.eval_into(column(&z, i), &mut theta.as_mut_slice()[start..start + r]);
    }
    let zs_dot = xi.tr_mul(&theta);
    let (dec_out, dec_dot, dec_cache) = model.decoder.forward_tangent_batch(&z, &zs_dot)?;
    let hbar = model.lift(&dec_out)?;
    let hbar_dot = model.lift(&dec_dot)?;

    let r_h = &hbar - &batch.h;
    let r_hd = &hbar_dot - &batch.hdot;
    let r_z = &ze_dot - &zs_dot;
    let mut out = LossBreakdown {
        recon: r_h.norm_squared() / nb,
        hdot: r_hd.norm_squared() / nb,
        zdot: r_z.norm_squared() / mb,
        ..Default::default()
    };
    let z1_res: Vec<f64> = (0..bsz).map(|i| z[(0, i)] - batch.h[(0, i)]).collect();
    out.z1 = z1_res.iter().map(|e| e * e).sum::<f64>() / b;
    out.reg = xi
        .iter()
        .zip(model.sindy.mask.iter())
        .filter(|(_, keep)| **keep)
        .map(|(v, _)| v.abs())
        .sum();
    if batch.targets.as_ref().is_some_and(|t| t.shape() != z.shape()) {
        return Err(Error::dim("supervision targets must be m x batch"));
    }
    let sup_res = batch.targets.as_ref().map(|t| &z - t);
    if let Some(res) = &sup_res {
        out.sup = res.norm_squared() / mb;
    }

    let mut g_z = DMatrix::zeros(m, bsz);
    let mut xi_bar = DMatrix::zeros(r, m);

    // consistency rollout, with its reverse sweep when gradients are needed
    let steps = cfg.rollout_steps;
    if steps > 0 {
        let mut tape = Tape::new(lib, steps);
        let mut sum = 0.0;
        let scale = 2.0 * w.cons / (b * steps as f64);
        for i in 0..bsz {
            let done = tape.forward(xi, column(&z, i), steps, model.tau);
            if done < steps {
                out.cons_diverged += 1;
            }
            let mut err = vec![0.0; steps + 1];
            for j in 1..=steps {
                if j <= done {
                    let e = tape.state(j)[0] - batch.h[(j, i)];
                    if e * e < CONS_CAP {
                        sum += e * e;
                        err[j] = e;
                        continue;
                    }
                }
                sum += CONS_CAP;
            }
            if grads.is_some() {
                if done == 0 {
                    continue;
                }
                let z0_bar = tape.backward(xi, done, model.tau, |j, buf| buf[0] += scale * err[j], &mut xi_bar);
                for k in 0..m {
                    g_z[(k, i)] += z0_bar[k];
                }
            }
        }
        out.cons = sum / (b * steps as f64);
    }
    out.total = out.recon + w.hdot * out.hdot + w.zdot * out.zdot + w.z1 * out.z1 + w.cons * out.cons + w.reg * out.reg;

    let Some(g) = grads.as_deref_mut() else {
        return Ok(out);
    };

    // decoder: adjoints of its value and tangent outputs
    let g_hbar = r_h * (2.0 / nb);
    let g_hbar_dot = r_hd * (2.0 * w.hdot / nb);
    let (g_out, g_out_dot) = match &model.basis {
        Some(basis) => (basis.u.tr_mul(&g_hbar), basis.u.tr_mul(&g_hbar_dot)),
        None => (g_hbar, g_hbar_dot),
    };
    let (g_z_dec, g_zs_dot) = model.decoder.backward_batch(&dec_cache, &g_out, Some(&g_out_dot), &mut g.decoder)?;
    g_z += g_z_dec;
    let g_zdot_term = &r_z * (2.0 * w.zdot / mb);
    let g_zs_dot = g_zs_dot.expect("tangent cache yields a tangent adjoint") - &g_zdot_term;
    let g_ze_dot = g_zdot_term;

    // ż_s = Ξᵀθ(z)
    xi_bar += &theta * g_zs_dot.transpose();
    let mut jac = vec![0.0; r * m];
    let mut wv = vec![0.0; r];
    for i in 0..bsz {
        lib.jacobian_into(column(&z, i), &mut jac);
        for (j, wj) in wv.iter_mut().enumerate() {
            *wj = (0..m).map(|k| xi[(j, k)] * g_zs_dot[(k, i)]).sum();
        }
        for l in 0..m {
            g_z[(l, i)] += (0..r).map(|j| jac[j * m + l] * wv[j]).sum::<f64>();
        }
    }
    for (i, e) in z1_res.iter().enumerate() {
        g_z[(0, i)] += 2.0 * w.z1 * e / b;
    }
    if let Some(res) = sup_res {
        g_z += res * (2.0 * cfg.sup_weight / mb);
    }

    for ((gx, v), keep) in xi_bar.iter_mut().zip(xi.iter()).zip(model.sindy.mask.iter()) {
        if *keep {
            if *v != 0.0 {
                *gx += w.reg * v.signum();
            }
        } else {
            *gx = 0.0;
        }
    }
    g.xi += xi_bar;
    model.encoder.backward_batch(&enc_cache, &g_z, Some(&g_ze_dot), &mut g.encoder)?;
    Ok(out)
}
