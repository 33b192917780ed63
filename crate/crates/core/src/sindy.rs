//! Candidate-function libraries, sequentially thresholded least squares and
//! the resulting sparse polynomial models `ż = Θ(z) Ξ`.

use std::fmt;
use std::path::Path;

use log::warn;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::csvio;
use crate::dynsys::{self, Trajectory, VectorField};
use crate::error::{Error, Result};
use crate::linalg;

/// One library column.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Term {
    /// `∏ z_i^{e_i}`; all-zero exponents is the constant term.
    Monomial(Vec<u32>),
    Sin(usize),
    Cos(usize),
}

impl Term {
    pub fn degree(&self) -> u32 {
        match self {
            Term::Monomial(e) => e.iter().sum(),
            _ => 0,
        }
    }

    fn eval(&self, z: &[f64]) -> f64 {
        match self {
            Term::Monomial(e) => e
                .iter()
                .zip(z)
                .filter(|(p, _)| **p > 0)
                .map(|(p, v)| v.powi(*p as i32))
                .product(),
            Term::Sin(i) => z[*i].sin(),
            Term::Cos(i) => z[*i].cos(),
        }
    }

    fn partial(&self, z: &[f64], j: usize) -> f64 {
        match self {
            Term::Monomial(e) => {
                if e[j] == 0 {
                    return 0.0;
                }
                let mut acc = e[j] as f64 * z[j].powi(e[j] as i32 - 1);
                for (i, (p, v)) in e.iter().zip(z).enumerate() {
                    if i != j && *p > 0 {
                        acc *= v.powi(*p as i32);
                    }
                }
                acc
            }
            Term::Sin(i) if *i == j => z[j].cos(),
            Term::Cos(i) if *i == j => -z[j].sin(),
            _ => 0.0,
        }
    }

    /// Display name using `*` between factors, e.g. `z1^2*z3`.
    pub fn name(&self, vars: &[String]) -> String {
        self.render(vars, "*")
    }

    fn render(&self, vars: &[String], sep: &str) -> String {
        match self {
            Term::Monomial(e) => {
                let factors: Vec<String> = e
                    .iter()
                    .enumerate()
                    .filter(|(_, p)| **p > 0)
                    .map(|(i, p)| {
                        if *p == 1 {
                            vars[i].clone()
                        } else {
                            format!("{}^{}", vars[i], p)
                        }
                    })
                    .collect();
                if factors.is_empty() {
                    "1".to_string()
                } else {
                    factors.join(sep)
                }
            }
            Term::Sin(i) => format!("sin({})", vars[*i]),
            Term::Cos(i) => format!("cos({})", vars[*i]),
        }
    }

    fn parse(name: &str, vars: &[String]) -> Option<Term> {
        let dim = vars.len();
        let index_of = |v: &str| vars.iter().position(|x| x == v);
        if name == "1" {
            return Some(Term::Monomial(vec![0; dim]));
        }
        if let Some(inner) = name.strip_prefix("sin(").and_then(|s| s.strip_suffix(')')) {
            return index_of(inner).map(Term::Sin);
        }
        if let Some(inner) = name.strip_prefix("cos(").and_then(|s| s.strip_suffix(')')) {
            return index_of(inner).map(Term::Cos);
        }
        let mut e = vec![0u32; dim];
        for factor in name.split('*') {
            let (var, pow) = match factor.split_once('^') {
                Some((v, p)) => (v, p.parse::<u32>().ok()?),
                None => (factor, 1),
            };
            e[index_of(var)?] += pow;
        }
        Some(Term::Monomial(e))
    }
}

pub fn default_var_names(dim: usize) -> Vec<String> {
    (1..=dim).map(|i| format!("z{i}")).collect()
}

/// Ordered candidate functions over `dim` variables.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureLibrary {
    pub dim: usize,
    pub terms: Vec<Term>,
}

pub fn build_library(dim: usize, max_degree: u32, trig: bool) -> Result<FeatureLibrary> {
    build_library_with(dim, max_degree, trig, true)
}

/// Constant (optional), then monomials of degree 1..=max_degree in graded
/// lexicographic order, then `sin(z_i)` and `cos(z_i)`.
pub fn build_library_with(dim: usize, max_degree: u32, trig: bool, include_constant: bool) -> Result<FeatureLibrary> {
    if dim == 0 || max_degree == 0 {
        return Err(Error::Invalid("library needs dim >= 1 and max_degree >= 1".into()));
    }
    let mut terms = Vec::new();
    if include_constant {
        terms.push(Term::Monomial(vec![0; dim]));
    }
    for degree in 1..=max_degree {
        // nondecreasing index tuples in lexicographic order
        let mut idx = vec![0usize; degree as usize];
        loop {
            let mut e = vec![0u32; dim];
            for &i in &idx {
                e[i] += 1;
            }
            terms.push(Term::Monomial(e));
            let Some(pos) = (0..idx.len()).rev().find(|&k| idx[k] + 1 < dim) else {
                break;
            };
            let next = idx[pos] + 1;
            for slot in &mut idx[pos..] {
                *slot = next;
            }
        }
    }
    if trig {
        terms.extend((0..dim).map(Term::Sin));
        terms.extend((0..dim).map(Term::Cos));
    }
    Ok(FeatureLibrary { dim, terms })
}

impl FeatureLibrary {
    pub fn from_terms(dim: usize, terms: Vec<Term>) -> Result<Self> {
        for (k, t) in terms.iter().enumerate() {
            let ok = match t {
                Term::Monomial(e) => e.len() == dim,
                Term::Sin(i) | Term::Cos(i) => *i < dim,
            };
            if !ok {
                return Err(Error::dim(format!("term {k} does not match dimension {dim}")));
            }
            if terms[..k].contains(t) {
                return Err(Error::Invalid(format!("duplicate library term {k}")));
            }
        }
        Ok(Self { dim, terms })
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn max_degree(&self) -> u32 {
        self.terms.iter().map(Term::degree).max().unwrap_or(0)
    }

    pub fn has_trig(&self) -> bool {
        self.terms.iter().any(|t| !matches!(t, Term::Monomial(_)))
    }

    pub fn names(&self, vars: &[String]) -> Vec<String> {
        self.terms.iter().map(|t| t.name(vars)).collect()
    }

    /// Writes θ(z) into `out` (length r).
    pub fn eval_into(&self, z: &[f64], out: &mut [f64]) {
        for (o, t) in out.iter_mut().zip(&self.terms) {
            *o = t.eval(z);
        }
    }

    /// Writes the r × m Jacobian `∂θ_i/∂z_j` into `out`, row-major.
    pub fn jacobian_into(&self, z: &[f64], out: &mut [f64]) {
        let m = self.dim;
        for (i, t) in self.terms.iter().enumerate() {
            for j in 0..m {
                out[i * m + j] = t.partial(z, j);
            }
        }
    }

    pub fn evaluate(&self, z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if z.ncols() != self.dim {
            return Err(Error::dim(format!("Z has {} columns, library dimension is {}", z.ncols(), self.dim)));
        }
        let mut theta = DMatrix::zeros(z.nrows(), self.len());
        let mut row = vec![0.0; self.dim];
        let mut out = vec![0.0; self.len()];
        for i in 0..z.nrows() {
            for j in 0..self.dim {
                row[j] = z[(i, j)];
            }
            self.eval_into(&row, &mut out);
            for (k, v) in out.iter().enumerate() {
                theta[(i, k)] = *v;
            }
        }
        Ok(theta)
    }

    pub fn jacobian(&self, z: &[f64]) -> Result<DMatrix<f64>> {
        if z.len() != self.dim {
            return Err(Error::dim(format!("z has {} entries, library dimension is {}", z.len(), self.dim)));
        }
        let mut out = vec![0.0; self.len() * self.dim];
        self.jacobian_into(z, &mut out);
        Ok(DMatrix::from_row_slice(self.len(), self.dim, &out))
    }
}

/// Flattened library for tight inner loops: monomials become factor lists.
#[derive(Debug, Clone)]
pub(crate) struct CompiledLibrary {
    kinds: Vec<Compiled>,
    factors: Vec<usize>,
}

#[derive(Debug, Clone, Copy)]
enum Compiled {
    Poly { start: usize, len: usize },
    Sin(usize),
    Cos(usize),
}

impl CompiledLibrary {
    pub(crate) fn new(lib: &FeatureLibrary) -> Self {
        let mut kinds = Vec::with_capacity(lib.len());
        let mut factors = Vec::new();
        for t in &lib.terms {
            kinds.push(match t {
                Term::Monomial(e) => {
                    let start = factors.len();
                    for (i, p) in e.iter().enumerate() {
                        factors.extend(std::iter::repeat_n(i, *p as usize));
                    }
                    Compiled::Poly {
                        start,
                        len: factors.len() - start,
                    }
                }
                Term::Sin(i) => Compiled::Sin(*i),
                Term::Cos(i) => Compiled::Cos(*i),
            });
        }
        Self { kinds, factors }
    }

    #[inline]
    pub(crate) fn eval(&self, z: &[f64], out: &mut [f64]) {
        for (o, k) in out.iter_mut().zip(&self.kinds) {
            *o = match *k {
                Compiled::Poly { start, len } => {
                    let mut acc = 1.0;
                    for &f in &self.factors[start..start + len] {
                        acc *= z[f];
                    }
                    acc
                }
                Compiled::Sin(i) => z[i].sin(),
                Compiled::Cos(i) => z[i].cos(),
            };
        }
    }

    /// Adds `Σ_j w_j ∇θ_j(z)` to `grad`.
    #[inline]
    pub(crate) fn vjp(&self, z: &[f64], w: &[f64], grad: &mut [f64]) {
        for (wj, k) in w.iter().zip(&self.kinds) {
            match *k {
                Compiled::Poly { start, len } => {
                    let f = &self.factors[start..start + len];
                    for i in 0..len {
                        let mut acc = *wj;
                        for (l, &g) in f.iter().enumerate() {
                            if l != i {
                                acc *= z[g];
                            }
                        }
                        grad[f[i]] += acc;
                    }
                }
                Compiled::Sin(i) => grad[i] += wj * z[i].cos(),
                Compiled::Cos(i) => grad[i] -= wj * z[i].sin(),
            }
        }
    }
}

pub fn evaluate_library(lib: &FeatureLibrary, z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    lib.evaluate(z)
}

pub fn library_jacobian(lib: &FeatureLibrary, z: &[f64]) -> Result<DMatrix<f64>> {
    lib.jacobian(z)
}

/// Sparse model `ż = Θ(z) Ξ` with an explicit active set.
#[derive(Debug, Clone, PartialEq)]
pub struct SindyModel {
    pub library: FeatureLibrary,
    /// r × m coefficients; column k drives `ż_k`.
    pub xi: DMatrix<f64>,
    pub mask: DMatrix<bool>,
}

impl SindyModel {
    pub fn zeros(library: FeatureLibrary) -> Self {
        let (r, m) = (library.len(), library.dim);
        Self {
            library,
            xi: DMatrix::zeros(r, m),
            mask: DMatrix::from_element(r, m, true),
        }
    }

    /// Builds a model from coefficients; entries equal to zero are inactive.
    pub fn from_coefficients(library: FeatureLibrary, xi: DMatrix<f64>) -> Result<Self> {
        if xi.shape() != (library.len(), library.dim) {
            return Err(Error::dim(format!(
                "Xi is {}x{}, library needs {}x{}",
                xi.nrows(),
                xi.ncols(),
                library.len(),
                library.dim
            )));
        }
        let mask = xi.map(|v| v != 0.0);
        Ok(Self { library, xi, mask })
    }

    pub fn dim(&self) -> usize {
        self.library.dim
    }

    pub fn active_terms(&self) -> usize {
        self.mask.iter().filter(|b| **b).count()
    }

    /// Zeroes every coefficient outside the mask.
    pub fn apply_mask(&mut self) {
        for (x, keep) in self.xi.iter_mut().zip(self.mask.iter()) {
            if !keep {
                *x = 0.0;
            }
        }
    }

    pub fn rhs(&self, z: &[f64]) -> Vec<f64> {
        let mut dz = vec![0.0; self.dim()];
        self.eval(z, &mut dz);
        dz
    }

    /// Coefficient table, one row per equation, columns named after library terms.
    pub fn write_csv(&self, path: &Path, vars: &[String]) -> Result<()> {
        csvio::write_table(path, &self.library.names(vars), &self.xi.transpose())
    }

    pub fn write_mask_csv(&self, path: &Path, vars: &[String]) -> Result<()> {
        let m = self.mask.map(|b| if b { 1.0 } else { 0.0 });
        csvio::write_table(path, &self.library.names(vars), &m.transpose())
    }

    /// Reads a coefficient table written by [`write_csv`](Self::write_csv).
    /// An optional mask table restores the active set; without one, nonzero
    /// entries are active.
    pub fn read_csv(path: &Path, mask_path: Option<&Path>) -> Result<Self> {
        let (header, xt) = csvio::read_table(path)?;
        let dim = xt.nrows();
        let vars = default_var_names(dim);
        let terms = header
            .iter()
            .map(|h| Term::parse(h, &vars).ok_or_else(|| Error::parse(path, 1, format!("unknown term `{h}`"))))
            .collect::<Result<Vec<_>>>()?;
        let library = FeatureLibrary::from_terms(dim, terms)?;
        let mut model = Self::from_coefficients(library, xt.transpose())?;
        if let Some(mp) = mask_path {
            let (mh, mt) = csvio::read_table(mp)?;
            if mh != header || mt.shape() != xt.shape() {
                return Err(Error::parse(mp, 1, "mask table does not match coefficient table"));
            }
            model.mask = mt.transpose().map(|v| v != 0.0);
            model.apply_mask();
        }
        Ok(model)
    }

    /// Fits the library exactly to a vector field that lies in its span, by
    /// least squares on random probe points in `center ± radius`. Coefficients
    /// below `1e-9` relative to the largest are dropped.
    pub fn fit_vector_field<F: VectorField + ?Sized>(
        library: FeatureLibrary,
        field: &F,
        center: &[f64],
        radius: &[f64],
    ) -> Result<Self> {
        let m = library.dim;
        if field.dim() != m || center.len() != m || radius.len() != m {
            return Err(Error::dim("vector field, center and radius must match the library dimension"));
        }
        let r = library.len();
        let samples = 6 * r + 20;
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
        let mut z = DMatrix::zeros(samples, m);
        let mut dz = DMatrix::zeros(samples, m);
        let mut buf = vec![0.0; m];
        let mut out = vec![0.0; m];
        for i in 0..samples {
            for j in 0..m {
                buf[j] = center[j] + radius[j] * rng.random_range(-1.0..1.0);
                z[(i, j)] = buf[j];
            }
            field.eval(&buf, &mut out);
            for j in 0..m {
                dz[(i, j)] = out[j];
            }
        }
        let theta = library.evaluate(&z)?;
        let (mut xi, _) = linalg::ridge_solve(&theta, &dz, 0.0);
        let resid = (&theta * &xi - &dz).norm() / dz.norm().max(1e-300);
        if resid > 1e-8 {
            return Err(Error::Invalid(format!(
                "vector field is not in the span of the library (relative residual {resid:e})"
            )));
        }
        let scale = xi.amax().max(1.0);
        xi.apply(|v| {
            if v.abs() < 1e-9 * scale {
                *v = 0.0
            }
        });
        Self::from_coefficients(library, xi)
    }

    /// Re-expresses this model in coordinates `z` with `x = shift + scale ⊙ z`.
    pub fn reparameterize(&self, shift: &[f64], scale: &[f64]) -> Result<Self> {
        let m = self.dim();
        if shift.len() != m || scale.len() != m || scale.iter().any(|s| *s == 0.0) {
            return Err(Error::Invalid("shift/scale must have one nonzero entry per dimension".into()));
        }
        let field = (m, |z: &[f64], dz: &mut [f64]| {
            let x: Vec<f64> = (0..m).map(|k| shift[k] + scale[k] * z[k]).collect();
            self.eval(&x, dz);
            for k in 0..m {
                dz[k] /= scale[k];
            }
        });
        Self::fit_vector_field(self.library.clone(), &field, &vec![0.0; m], &vec![2.0; m])
    }
}

impl VectorField for SindyModel {
    fn dim(&self) -> usize {
        self.library.dim
    }

    fn eval(&self, z: &[f64], dz: &mut [f64]) {
        let mut theta = vec![0.0; self.library.len()];
        self.library.eval_into(z, &mut theta);
        for (k, d) in dz.iter_mut().enumerate() {
            *d = theta.iter().zip(self.xi.column(k).iter()).map(|(a, b)| a * b).sum();
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StlsqOptions {
    pub threshold: f64,
    pub ridge: f64,
    pub max_iters: usize,
    /// Scale library columns to unit norm before regressing (thresholds then
    /// apply to the rescaled coefficients).
    pub normalize_columns: bool,
    /// Threshold the relative contribution `|ξᵢₖ|·‖θᵢ‖/‖żₖ‖` instead of
    /// `|ξᵢₖ|`, which makes the cut invariant to rescaling either side.
    pub relative: bool,
}

impl Default for StlsqOptions {
    fn default() -> Self {
        Self {
            threshold: 0.1,
            ridge: 1e-6,
            max_iters: 20,
            normalize_columns: false,
            relative: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StlsqFit {
    pub xi: DMatrix<f64>,
    pub mask: DMatrix<bool>,
    pub iterations: usize,
    /// Active-term count after each iteration.
    pub active_history: Vec<usize>,
    pub used_fallback: bool,
}

pub fn stlsq(theta: &DMatrix<f64>, zdot: &DMatrix<f64>, opts: &StlsqOptions) -> Result<StlsqFit> {
    let r = theta.ncols();
    stlsq_from_mask(theta, zdot, opts, DMatrix::from_element(r, zdot.ncols(), true))
}

/// Sequentially thresholded least squares starting from a given active set.
pub fn stlsq_from_mask(
    theta: &DMatrix<f64>,
    zdot: &DMatrix<f64>,
    opts: &StlsqOptions,
    initial_mask: DMatrix<bool>,
) -> Result<StlsqFit> {
    let (q, r) = theta.shape();
    let m = zdot.ncols();
    if zdot.nrows() != q {
        return Err(Error::dim(format!("Theta has {q} rows, Zdot has {}", zdot.nrows())));
    }
    if initial_mask.shape() != (r, m) {
        return Err(Error::dim("initial mask shape must be r x m"));
    }
    if q < r {
        warn!("stlsq: fewer samples ({q}) than library terms ({r})");
    }
    let col_scale: Vec<f64> = if opts.normalize_columns {
        (0..r)
            .map(|j| {
                let n = theta.column(j).norm();
                if n > 0.0 { n } else { 1.0 }
            })
            .collect()
    } else {
        vec![1.0; r]
    };
    let mut gram = theta.tr_mul(theta);
    let mut rhs = theta.tr_mul(zdot);
    let theta_norm: Vec<f64> = (0..r).map(|i| gram[(i, i)].sqrt()).collect();
    let zdot_norm: Vec<f64> = (0..m).map(|k| zdot.column(k).norm().max(f64::MIN_POSITIVE)).collect();
    let size = |i: usize, k: usize, s: f64| {
        if opts.relative {
            (s / col_scale[i]).abs() * theta_norm[i] / zdot_norm[k]
        } else {
            s.abs()
        }
    };
    for i in 0..r {
        for j in 0..r {
            gram[(i, j)] /= col_scale[i] * col_scale[j];
        }
        for k in 0..m {
            rhs[(i, k)] /= col_scale[i];
        }
    }

    let mut xi = DMatrix::zeros(r, m);
    let mut mask = initial_mask;
    let mut used_fallback = false;
    let mut iterations = 0;
    let mut active_history = Vec::new();
    for it in 0..opts.max_iters.max(1) {
        iterations = it + 1;
        let mut changed = false;
        for k in 0..m {
            let active: Vec<usize> = (0..r).filter(|&i| mask[(i, k)]).collect();
            xi.column_mut(k).fill(0.0);
            if active.is_empty() {
                continue;
            }
            let sub = DMatrix::from_fn(active.len(), active.len(), |a, b| gram[(active[a], active[b])]);
            let sub_rhs = DMatrix::from_fn(active.len(), 1, |a, _| rhs[(active[a], k)]);
            let (sol, fallback) = linalg::solve_normal(sub, &sub_rhs, opts.ridge);
            used_fallback |= fallback;
            for (a, &i) in active.iter().enumerate() {
                xi[(i, k)] = sol[a];
                if size(i, k, sol[a]) < opts.threshold {
                    mask[(i, k)] = false;
                    changed = true;
                }
            }
        }
        for (x, keep) in xi.iter_mut().zip(mask.iter()) {
            if !keep {
                *x = 0.0;
            }
        }
        active_history.push(mask.iter().filter(|b| **b).count());
        if !changed {
            break;
        }
        if it + 1 == opts.max_iters.max(1) {
            break;
        }
    }
    if used_fallback {
        warn!("stlsq: rank-deficient active set, used minimum-norm solution");
    }
    for i in 0..r {
        for k in 0..m {
            xi[(i, k)] /= col_scale[i];
        }
    }
    Ok(StlsqFit {
        xi,
        mask,
        iterations,
        active_history,
        used_fallback,
    })
}

pub fn simulate_sindy(model: &SindyModel, z0: &[f64], dt: f64, steps: usize) -> Result<Trajectory> {
    dynsys::simulate(model, z0, dt, steps, 0)
}

/// Renders one `dz/dt = …` line per dimension.
pub fn format_equations(model: &SindyModel, vars: &[String], precision: usize) -> String {
    Equations { model, vars, precision }.to_string()
}

struct Equations<'a> {
    model: &'a SindyModel,
    vars: &'a [String],
    precision: usize,
}

impl fmt::Display for Equations<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let lib = &self.model.library;
        for k in 0..lib.dim {
            write!(f, "d{}/dt =", self.vars[k])?;
            let mut first = true;
            for (i, term) in lib.terms.iter().enumerate() {
                let c = self.model.xi[(i, k)];
                let text = format!("{:.*}", self.precision, c.abs());
                if !self.model.mask[(i, k)] || text.chars().all(|ch| ch == '0' || ch == '.') {
                    continue;
                }
                let neg = c < 0.0;
                match (first, neg) {
                    (true, true) => write!(f, " -{text}")?,
                    (true, false) => write!(f, " {text}")?,
                    (false, true) => write!(f, " - {text}")?,
                    (false, false) => write!(f, " + {text}")?,
                }
                if term.degree() > 0 || !matches!(term, Term::Monomial(_)) {
                    write!(f, " {}", term.render(self.vars, " "))?;
                }
                first = false;
            }
            if first {
                write!(f, " 0")?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynsys::{builtin_system, simulate, LORENZ_X0};
    use proptest::prelude::*;
    use rand::Rng;

    fn names(lib: &FeatureLibrary) -> Vec<String> {
        lib.names(&default_var_names(lib.dim))
    }

    #[test]
    fn compiled_library_agrees() {
        let lib = build_library(3, 3, true).unwrap();
        let c = CompiledLibrary::new(&lib);
        let z = [0.7, -1.3, 0.4];
        let mut a = vec![0.0; lib.len()];
        let mut b = vec![0.0; lib.len()];
        lib.eval_into(&z, &mut a);
        c.eval(&z, &mut b);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-15);
        }
        let w: Vec<f64> = (0..lib.len()).map(|i| (i as f64 * 0.37).sin()).collect();
        let jac = lib.jacobian(&z).unwrap();
        let expect = jac.transpose() * DMatrix::from_column_slice(lib.len(), 1, &w);
        let mut got = vec![0.0; 3];
        c.vjp(&z, &w, &mut got);
        for l in 0..3 {
            assert!((got[l] - expect[l]).abs() < 1e-13);
        }
    }

    #[test]
    fn library_order_and_size() {
        let lib = build_library(3, 2, false).unwrap();
        assert_eq!(
            names(&lib),
            ["1", "z1", "z2", "z3", "z1^2", "z1*z2", "z1*z3", "z2^2", "z2*z3", "z3^2"]
        );
        let lib3 = build_library(3, 3, false).unwrap();
        assert_eq!(lib3.len(), 20);
        assert_eq!(
            names(&lib3)[10..],
            ["z1^3", "z1^2*z2", "z1^2*z3", "z1*z2^2", "z1*z2*z3", "z1*z3^2", "z2^3", "z2^2*z3", "z2*z3^2", "z3^3"]
        );
        assert_eq!(names(&build_library(1, 1, false).unwrap()), ["1", "z1"]);
        let trig = build_library(2, 1, true).unwrap();
        assert_eq!(names(&trig), ["1", "z1", "z2", "sin(z1)", "sin(z2)", "cos(z1)", "cos(z2)"]);
        assert!(build_library(0, 2, false).is_err());
        // C(dim + d, d)
        assert_eq!(build_library(4, 3, false).unwrap().len(), 35);
        assert_eq!(build_library_with(2, 2, false, false).unwrap().len(), 5);
    }

    #[test]
    fn evaluate_rows() {
        let lib = build_library(3, 2, false).unwrap();
        let z = DMatrix::from_row_slice(2, 3, &[2.0, 3.0, 0.0, 0.0, 0.0, 0.0]);
        let theta = lib.evaluate(&z).unwrap();
        assert_eq!(theta.row(0).iter().copied().collect::<Vec<_>>(), [1., 2., 3., 0., 4., 6., 0., 9., 0., 0.]);
        assert_eq!(theta.row(1).iter().copied().collect::<Vec<_>>(), [1., 0., 0., 0., 0., 0., 0., 0., 0., 0.]);
        assert!(lib.evaluate(&DMatrix::zeros(1, 2)).is_err());
    }

    #[test]
    fn jacobian_by_hand() {
        let lib = build_library(3, 2, false).unwrap();
        let j = lib.jacobian(&[2.0, 3.0, 5.0]).unwrap();
        // z1*z2
        assert_eq!(j.row(5).iter().copied().collect::<Vec<_>>(), [3.0, 2.0, 0.0]);
        assert!(j.row(0).iter().all(|v| *v == 0.0));
        // z3^2
        assert_eq!(j.row(9).iter().copied().collect::<Vec<_>>(), [0.0, 0.0, 10.0]);
    }

    #[test]
    fn stlsq_on_linear_decay() {
        let lib = build_library(1, 2, false).unwrap();
        let z = DMatrix::from_fn(201, 1, |i, _| -1.0 + i as f64 * 0.01);
        let theta = lib.evaluate(&z).unwrap();
        let zdot = z.map(|v| -2.0 * v);
        let fit = stlsq(&theta, &zdot, &StlsqOptions { threshold: 0.5, ridge: 0.0, ..Default::default() }).unwrap();
        assert!((fit.xi[(1, 0)] + 2.0).abs() < 1e-8);
        assert_eq!(fit.xi[(0, 0)], 0.0);
        assert_eq!(fit.xi[(2, 0)], 0.0);
        assert_eq!(fit.mask.iter().filter(|b| **b).count(), 1);
    }

    #[test]
    fn zero_threshold_is_plain_least_squares() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let theta = DMatrix::from_fn(50, 4, |_, _| rng.random_range(-1.0..1.0));
        let zdot = DMatrix::from_fn(50, 2, |_, _| rng.random_range(-1.0..1.0));
        let fit = stlsq(&theta, &zdot, &StlsqOptions { threshold: 0.0, ridge: 0.0, ..Default::default() }).unwrap();
        assert!(fit.mask.iter().all(|b| *b));
        // independent route: QR least squares
        let qr = theta.clone().qr();
        let reference = qr.r().solve_upper_triangular(&(qr.q().transpose() * &zdot)).unwrap();
        assert!((fit.xi - reference).abs().max() < 1e-8);
    }

    #[test]
    fn normalized_columns_recover_same_sparse_model() {
        let lib = build_library(1, 2, false).unwrap();
        let z = DMatrix::from_fn(101, 1, |i, _| -1.0 + i as f64 * 0.02);
        let theta = lib.evaluate(&z).unwrap();
        let zdot = z.map(|v| 3.0 * v * v);
        let fit = stlsq(
            &theta,
            &zdot,
            &StlsqOptions { threshold: 0.1, ridge: 0.0, normalize_columns: true, ..Default::default() },
        )
        .unwrap();
        assert!((fit.xi[(2, 0)] - 3.0).abs() < 1e-8);
        assert_eq!(fit.mask.iter().filter(|b| **b).count(), 1);
    }

    #[test]
    fn relative_threshold_ignores_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let theta = DMatrix::from_fn(80, 4, |_, _| rng.random_range(-1.0..1.0));
        // a dominant term, a 3% term and noise-level leftovers
        let zdot = DMatrix::from_fn(80, 1, |i, _| 2.0 * theta[(i, 1)] + 0.06 * theta[(i, 3)] + 1e-4 * theta[(i, 0)]);
        let opts = StlsqOptions { threshold: 0.05, ridge: 0.0, relative: true, ..Default::default() };
        let base = stlsq(&theta, &zdot, &opts).unwrap();
        assert_eq!(base.mask.column(0).iter().copied().collect::<Vec<_>>(), [false, true, false, false]);
        for (a, b) in [(1e3, 1.0), (1e-3, 7.0), (1.0, 1e4)] {
            let scaled = stlsq(&(&theta * a), &(&zdot * b), &opts).unwrap();
            assert_eq!(scaled.mask, base.mask);
        }
        // the absolute cut keeps or drops everything depending on units
        let absolute = StlsqOptions { relative: false, ..opts };
        assert_eq!(stlsq(&theta, &(&zdot * 1e3), &absolute).unwrap().mask.iter().filter(|m| **m).count(), 3);
    }

    #[test]
    fn lorenz_full_state_recovery() {
        let sys = builtin_system("lorenz", &[10.0, 28.0, 8.0 / 3.0]).unwrap();
        let traj = simulate(&sys, &LORENZ_X0, 0.001, 10_000, 1000).unwrap();
        let zdot = DMatrix::from_fn(traj.len(), 3, |i, k| {
            let x: Vec<f64> = traj.states.row(i).iter().copied().collect();
            sys.rhs(&x)[k]
        });
        let lib = build_library(3, 2, false).unwrap();
        let theta = lib.evaluate(&traj.states).unwrap();
        let fit = stlsq(&theta, &zdot, &StlsqOptions::default()).unwrap();
        assert_eq!(fit.mask.iter().filter(|b| **b).count(), 7);
        assert!((fit.xi[(1, 0)] + 10.0).abs() < 1e-6);
        assert!((fit.xi[(6, 1)] + 1.0).abs() < 1e-6);
    }

    #[test]
    fn simulate_simple_models() {
        let lib = build_library(2, 1, false).unwrap();
        let still = SindyModel::zeros(lib.clone());
        let t = simulate_sindy(&still, &[0.3, -0.2], 0.1, 20).unwrap();
        assert!(t.states.row(19).iter().zip([0.3, -0.2]).all(|(a, b)| *a == b));
        let mut xi = DMatrix::zeros(3, 2);
        xi[(1, 0)] = -1.0;
        xi[(2, 1)] = -1.0;
        let decay = SindyModel::from_coefficients(lib, xi).unwrap();
        let t = simulate_sindy(&decay, &[1.0, 2.0], 0.01, 101).unwrap();
        assert!((t.states[(100, 0)] - (-1.0f64).exp()).abs() < 1e-9);
        assert!((t.states[(100, 1)] - 2.0 * (-1.0f64).exp()).abs() < 1e-9);
    }

    #[test]
    fn equation_text() {
        let lib = build_library(3, 2, false).unwrap();
        let mut xi = DMatrix::zeros(10, 3);
        xi[(1, 0)] = -16.0;
        xi[(8, 0)] = 2.5;
        xi[(2, 2)] = 8.0 / 3.0;
        let model = SindyModel::from_coefficients(lib, xi).unwrap();
        let text = format_equations(&model, &default_var_names(3), 1);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "dz1/dt = -16.0 z1 + 2.5 z2 z3");
        assert_eq!(lines[1], "dz2/dt = 0");
        let text = format_equations(&model, &default_var_names(3), 2);
        assert_eq!(text.lines().nth(2).unwrap(), "dz3/dt = 2.67 z2");
    }

    #[test]
    fn lorenz_from_vector_field_prints_textbook_equations() {
        let sys = builtin_system("lorenz", &[10.0, 28.0, 8.0 / 3.0]).unwrap();
        let lib = build_library(3, 2, false).unwrap();
        let m = SindyModel::fit_vector_field(lib, &sys, &[0.0, 0.0, 25.0], &[20.0, 20.0, 20.0]).unwrap();
        assert_eq!(m.active_terms(), 7);
        let vars: Vec<String> = ["x1", "x2", "x3"].iter().map(|s| s.to_string()).collect();
        assert_eq!(
            format_equations(&m, &vars, 3),
            "dx1/dt = -10.000 x1 + 10.000 x2\n\
             dx2/dt = 28.000 x1 - 1.000 x2 - 1.000 x1 x3\n\
             dx3/dt = -2.667 x3 + 1.000 x1 x2\n"
        );
    }

    #[test]
    fn reparameterized_model_matches_transformed_flow() {
        let sys = builtin_system("lorenz", &[10.0, 28.0, 8.0 / 3.0]).unwrap();
        let lib = build_library(3, 2, false).unwrap();
        let m = SindyModel::fit_vector_field(lib, &sys, &[0.0, 0.0, 25.0], &[20.0, 20.0, 20.0]).unwrap();
        let (shift, scale) = ([0.5, -0.2, 23.5], [7.9, 9.0, 8.5]);
        let zm = m.reparameterize(&shift, &scale).unwrap();
        let z = [0.3, -1.1, 0.7];
        let x: Vec<f64> = (0..3).map(|k| shift[k] + scale[k] * z[k]).collect();
        let fx = sys.rhs(&x);
        let fz = zm.rhs(&z);
        for k in 0..3 {
            assert!((fz[k] - fx[k] / scale[k]).abs() < 1e-9);
        }
    }

    #[test]
    fn csv_round_trip_with_mask() {
        let dir = std::env::temp_dir().join(format!("sindy-io-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let lib = build_library(3, 3, false).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut model = SindyModel::zeros(lib);
        model.xi = DMatrix::from_fn(20, 3, |_, _| rng.random_range(-1.0..1.0));
        model.mask[(4, 1)] = false;
        model.apply_mask();
        let vars = default_var_names(3);
        model.write_csv(&dir.join("xi.csv"), &vars).unwrap();
        model.write_mask_csv(&dir.join("mask.csv"), &vars).unwrap();
        let head = std::fs::read_to_string(dir.join("xi.csv")).unwrap();
        assert!(head.starts_with("1,z1,z2,z3,z1^2,z1*z2,z1*z3,z2^2,z2*z3,z3^2,z1^3,z1^2*z2"));
        let back = SindyModel::read_csv(&dir.join("xi.csv"), Some(&dir.join("mask.csv"))).unwrap();
        assert_eq!(back, model);
    }

    proptest! {
        #[test]
        fn jacobian_matches_finite_differences(z in proptest::collection::vec(-2.0f64..2.0, 3), trig in any::<bool>()) {
            let lib = build_library(3, 3, trig).unwrap();
            let jac = lib.jacobian(&z).unwrap();
            let eps = 1e-6;
            let mut plus = vec![0.0; lib.len()];
            let mut minus = vec![0.0; lib.len()];
            for j in 0..3 {
                let mut zp = z.clone();
                let mut zm = z.clone();
                zp[j] += eps;
                zm[j] -= eps;
                lib.eval_into(&zp, &mut plus);
                lib.eval_into(&zm, &mut minus);
                for i in 0..lib.len() {
                    let fd = (plus[i] - minus[i]) / (2.0 * eps);
                    let an = jac[(i, j)];
                    prop_assert!((fd - an).abs() <= 1e-6 * an.abs().max(1.0), "term {} var {}: {} vs {}", i, j, an, fd);
                }
            }
        }

        #[test]
        fn monomials_scale_with_degree(z in proptest::collection::vec(-2.0f64..2.0, 3)) {
            let lib = build_library(3, 3, false).unwrap();
            let mut a = vec![0.0; lib.len()];
            let mut b = vec![0.0; lib.len()];
            lib.eval_into(&z, &mut a);
            lib.eval_into(&z.iter().map(|v| 2.0 * v).collect::<Vec<_>>(), &mut b);
            for (i, t) in lib.terms.iter().enumerate() {
                let expect = a[i] * 2f64.powi(t.degree() as i32);
                prop_assert!((b[i] - expect).abs() <= 1e-12 * expect.abs().max(1.0));
            }
        }

        #[test]
        fn stlsq_idempotent_and_monotone(seed in 0u64..500, thr in 0.05f64..0.6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let lib = build_library(2, 2, false).unwrap();
            let z = DMatrix::from_fn(80, 2, |_, _| rng.random_range(-1.0..1.0));
            let theta = lib.evaluate(&z).unwrap();
            let true_xi = DMatrix::from_fn(6, 2, |_, _| if rng.random_bool(0.5) { rng.random_range(-2.0..2.0) } else { 0.0 });
            let noise = DMatrix::from_fn(80, 2, |_, _| 0.05 * rng.random_range(-1.0..1.0));
            let zdot = &theta * &true_xi + noise;
            let opts = StlsqOptions { threshold: thr, ..Default::default() };
            let fit = stlsq(&theta, &zdot, &opts).unwrap();
            for w in fit.active_history.windows(2) {
                prop_assert!(w[1] <= w[0]);
            }
            let again = stlsq_from_mask(&theta, &zdot, &opts, fit.mask.clone()).unwrap();
            prop_assert_eq!(&again.mask, &fit.mask);
            prop_assert!((&again.xi - &fit.xi).abs().max() < 1e-12);
            for (x, keep) in fit.xi.iter().zip(fit.mask.iter()) {
                if !keep { prop_assert_eq!(*x, 0.0); }
            }
        }
    }
}
