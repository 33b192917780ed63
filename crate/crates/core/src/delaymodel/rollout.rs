//! RK4 integration of the latent model with a reverse (adjoint) sweep.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::sindy::{CompiledLibrary, FeatureLibrary, SindyModel};

/// Latent magnitude beyond which a rollout counts as diverged.
pub const ROLLOUT_CAP: f64 = 1e6;

/// Integrates `ż = Θ(z)Ξ` for `steps` RK4 steps of `dt`. Row 0 of the result
/// is `z0`, row `j` the state after `j` steps.
pub fn rollout_latent(sindy: &SindyModel, z0: &[f64], steps: usize, dt: f64) -> Result<DMatrix<f64>> {
    let m = sindy.dim();
    if z0.len() != m {
        return Err(Error::dim(format!("z0 has {} entries, model has {m}", z0.len())));
    }
    if !(dt > 0.0) {
        return Err(Error::Invalid(format!("dt must be positive, got {dt}")));
    }
    let mut tape = Tape::new(&sindy.library, steps);
    let done = tape.forward(&sindy.xi, z0, steps, dt);
    if done < steps {
        return Err(Error::Diverged { step: done });
    }
    Ok(DMatrix::from_row_slice(steps + 1, m, &tape.states[..(steps + 1) * m]))
}

/// Forward record of one rollout: states, stage inputs and stage features
/// needed by the reverse sweep.
pub(crate) struct Tape {
    m: usize,
    r: usize,
    lib: CompiledLibrary,
    pub(crate) states: Vec<f64>,
    /// Per step: stage inputs u₂, u₃, u₄.
    stages: Vec<f64>,
    /// Per step: θ at the four stage inputs.
    thetas: Vec<f64>,
    w: Vec<f64>,
    k: [Vec<f64>; 4],
}

impl Tape {
    pub(crate) fn new(lib: &FeatureLibrary, steps: usize) -> Self {
        let m = lib.dim;
        let r = lib.len();
        Self {
            m,
            r,
            lib: CompiledLibrary::new(lib),
            states: vec![0.0; (steps + 1) * m],
            stages: vec![0.0; steps * 3 * m],
            thetas: vec![0.0; steps * 4 * r],
            w: vec![0.0; r],
            k: [vec![0.0; m], vec![0.0; m], vec![0.0; m], vec![0.0; m]],
        }
    }

    pub(crate) fn state(&self, j: usize) -> &[f64] {
        &self.states[j * self.m..(j + 1) * self.m]
    }

    /// `out = Ξᵀ θ(u)`, leaving θ in `theta`.
    #[inline]
    fn rhs(lib: &CompiledLibrary, xi: &[f64], theta: &mut [f64], u: &[f64], out: &mut [f64]) {
        lib.eval(u, theta);
        let r = theta.len();
        for (k, o) in out.iter_mut().enumerate() {
            let col = &xi[k * r..(k + 1) * r];
            let mut acc = 0.0;
            for (t, c) in theta.iter().zip(col) {
                acc += t * c;
            }
            *o = acc;
        }
    }

    /// Runs up to `steps` steps from `z0`; returns the number completed
    /// before divergence.
    pub(crate) fn forward(&mut self, xi: &DMatrix<f64>, z0: &[f64], steps: usize, dt: f64) -> usize {
        let (m, r) = (self.m, self.r);
        if self.states.len() < (steps + 1) * m {
            self.states.resize((steps + 1) * m, 0.0);
            self.stages.resize(steps * 3 * m, 0.0);
            self.thetas.resize(steps * 4 * r, 0.0);
        }
        let xi = xi.as_slice();
        self.states[..m].copy_from_slice(z0);
        let [k1, k2, k3, k4] = &mut self.k;
        let lib = &self.lib;
        let mut u = vec![0.0; m];
        for s in 0..steps {
            let (head, tail) = self.states.split_at_mut((s + 1) * m);
            let cur = &head[s * m..];
            let st = &mut self.stages[s * 3 * m..(s + 1) * 3 * m];
            let th = &mut self.thetas[s * 4 * r..(s + 1) * 4 * r];
            Self::rhs(lib, xi, &mut th[..r], cur, k1);
            for i in 0..m {
                u[i] = cur[i] + 0.5 * dt * k1[i];
            }
            st[..m].copy_from_slice(&u);
            Self::rhs(lib, xi, &mut th[r..2 * r], &u, k2);
            for i in 0..m {
                u[i] = cur[i] + 0.5 * dt * k2[i];
            }
            st[m..2 * m].copy_from_slice(&u);
            Self::rhs(lib, xi, &mut th[2 * r..3 * r], &u, k3);
            for i in 0..m {
                u[i] = cur[i] + dt * k3[i];
            }
            st[2 * m..].copy_from_slice(&u);
            Self::rhs(lib, xi, &mut th[3 * r..], &u, k4);
            let next = &mut tail[..m];
            let mut ok = true;
            for i in 0..m {
                next[i] = cur[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
                ok &= next[i].is_finite() && next[i].abs() <= ROLLOUT_CAP;
            }
            if !ok {
                return s;
            }
        }
        steps
    }

    /// Adds `J_f(u)ᵀ kbar` to `ubar` and `θ(u) kbarᵀ` to `xi_bar`, where
    /// `theta = θ(u)`.
    #[inline]
    #[allow(clippy::too_many_arguments)]
    fn stage_adjoint(
        lib: &CompiledLibrary,
        w: &mut [f64],
        xi: &[f64],
        u: &[f64],
        theta: &[f64],
        kbar: &[f64],
        ubar: &mut [f64],
        xi_bar: &mut [f64],
    ) {
        let r = theta.len();
        w.fill(0.0);
        for (k, kb) in kbar.iter().enumerate() {
            let col = &xi[k * r..(k + 1) * r];
            let gcol = &mut xi_bar[k * r..(k + 1) * r];
            for j in 0..r {
                w[j] += col[j] * kb;
                gcol[j] += theta[j] * kb;
            }
        }
        lib.vjp(u, w, ubar);
    }

    /// Reverse sweep over the first `steps` steps. `state_adj(j, buf)` adds
    /// the loss adjoint of state `j` (j ≥ 1) into `buf`. Returns the adjoint
    /// of `z0` and accumulates into `xi_bar`.
    pub(crate) fn backward(
        &mut self,
        xi: &DMatrix<f64>,
        steps: usize,
        dt: f64,
        mut state_adj: impl FnMut(usize, &mut [f64]),
        xi_bar: &mut DMatrix<f64>,
    ) -> Vec<f64> {
        let (m, r) = (self.m, self.r);
        let xi = xi.as_slice();
        let xi_bar = xi_bar.as_mut_slice();
        let lib = &self.lib;
        let w = &mut self.w;
        let mut ubar = vec![0.0; m];
        let mut kb = [vec![0.0; m], vec![0.0; m], vec![0.0; m], vec![0.0; m]];
        let mut sbar = vec![0.0; m];
        for s in (0..steps).rev() {
            state_adj(s + 1, &mut ubar);
            // ubar is the adjoint of u_{s+1}; split it over the stages
            for i in 0..m {
                kb[0][i] = dt / 6.0 * ubar[i];
                kb[1][i] = dt / 3.0 * ubar[i];
                kb[2][i] = dt / 3.0 * ubar[i];
                kb[3][i] = dt / 6.0 * ubar[i];
            }
            let st = &self.stages[s * 3 * m..(s + 1) * 3 * m];
            let th = &self.thetas[s * 4 * r..(s + 1) * 4 * r];
            // stage 4: k4 = f(u + dt k3)
            sbar.fill(0.0);
            Self::stage_adjoint(lib, w, xi, &st[2 * m..], &th[3 * r..], &kb[3], &mut sbar, xi_bar);
            for i in 0..m {
                ubar[i] += sbar[i];
                kb[2][i] += dt * sbar[i];
            }
            // stage 3: k3 = f(u + dt/2 k2)
            sbar.fill(0.0);
            Self::stage_adjoint(lib, w, xi, &st[m..2 * m], &th[2 * r..3 * r], &kb[2], &mut sbar, xi_bar);
            for i in 0..m {
                ubar[i] += sbar[i];
                kb[1][i] += 0.5 * dt * sbar[i];
            }
            // stage 2: k2 = f(u + dt/2 k1)
            sbar.fill(0.0);
            Self::stage_adjoint(lib, w, xi, &st[..m], &th[r..2 * r], &kb[1], &mut sbar, xi_bar);
            for i in 0..m {
                ubar[i] += sbar[i];
                kb[0][i] += 0.5 * dt * sbar[i];
            }
            // stage 1: k1 = f(u)
            let u = &self.states[s * m..(s + 1) * m];
            Self::stage_adjoint(lib, w, xi, u, &th[..r], &kb[0], &mut ubar, xi_bar);
        }
        ubar
    }
}
