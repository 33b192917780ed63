//! Benchmark dynamical systems, a fixed-step RK4 integrator and the
//! trajectory / measurement containers the rest of the crate consumes.

use std::path::Path;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::csvio;
use crate::error::{Error, Result};

/// Any state magnitude above this aborts integration.
pub const DIVERGENCE_CAP: f64 = 1e6;

/// Default Lorenz starting point; a burn-in of [`DEFAULT_BURN_IN`] steps
/// lands it on the attractor.
pub const LORENZ_X0: [f64; 3] = [-8.0, 8.0, 27.0];
pub const DEFAULT_BURN_IN: usize = 1000;

/// Something that can be integrated: a fixed-dimension vector field.
pub trait VectorField {
    fn dim(&self) -> usize;
    fn eval(&self, x: &[f64], dx: &mut [f64]);
}

impl<F: Fn(&[f64], &mut [f64])> VectorField for (usize, F) {
    fn dim(&self) -> usize {
        self.0
    }
    fn eval(&self, x: &[f64], dx: &mut [f64]) {
        (self.1)(x, dx)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SystemKind {
    Lorenz,
    Rossler,
    LotkaVolterra,
}

impl SystemKind {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "lorenz" => Ok(Self::Lorenz),
            "rossler" => Ok(Self::Rossler),
            "lotka_volterra" => Ok(Self::LotkaVolterra),
            other => Err(Error::UnknownSystem(other.to_string())),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Lorenz => "lorenz",
            Self::Rossler => "rossler",
            Self::LotkaVolterra => "lotka_volterra",
        }
    }

    pub fn dim(self) -> usize {
        match self {
            Self::Lorenz | Self::Rossler => 3,
            Self::LotkaVolterra => 2,
        }
    }

    pub fn param_count(self) -> usize {
        match self {
            Self::Lorenz => 3,
            Self::Rossler => 2,
            Self::LotkaVolterra => 4,
        }
    }

    /// Parameters used when none are given.
    pub fn default_params(self) -> Vec<f64> {
        match self {
            Self::Lorenz => vec![10.0, 28.0, 8.0 / 3.0],
            Self::Rossler => vec![0.2, 5.7],
            Self::LotkaVolterra => vec![1.0, -1.0, -1.0, 1.0],
        }
    }

    /// A reasonable starting point near (or converging to) the attractor.
    pub fn default_x0(self) -> Vec<f64> {
        match self {
            Self::Lorenz => LORENZ_X0.to_vec(),
            Self::Rossler => vec![1.0, 1.0, 0.0],
            Self::LotkaVolterra => vec![2.0, 1.0],
        }
    }
}

/// A named vector field `dx/dt = f(x; params)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemDef {
    pub kind: SystemKind,
    pub params: Vec<f64>,
}

pub fn builtin_system(name: &str, params: &[f64]) -> Result<SystemDef> {
    let kind = SystemKind::parse(name)?;
    if params.len() != kind.param_count() {
        return Err(Error::ParamCount {
            name: name.to_string(),
            expected: kind.param_count(),
            got: params.len(),
        });
    }
    Ok(SystemDef {
        kind,
        params: params.to_vec(),
    })
}

impl SystemDef {
    pub fn name(&self) -> &'static str {
        self.kind.name()
    }

    pub fn rhs(&self, x: &[f64]) -> Vec<f64> {
        let mut dx = vec![0.0; self.dim()];
        self.eval(x, &mut dx);
        dx
    }
}

impl VectorField for SystemDef {
    fn dim(&self) -> usize {
        self.kind.dim()
    }

    fn eval(&self, x: &[f64], dx: &mut [f64]) {
        let p = &self.params;
        match self.kind {
            SystemKind::Lorenz => {
                let (sigma, rho, beta) = (p[0], p[1], p[2]);
                dx[0] = sigma * (x[1] - x[0]);
                dx[1] = x[0] * (rho - x[2]) - x[1];
                dx[2] = x[0] * x[1] - beta * x[2];
            }
            SystemKind::Rossler => {
                let (a, b) = (p[0], p[1]);
                dx[0] = -x[1] - x[2];
                // the `+x₁` coupling; with `-x₁` the origin is a saddle and
                // every orbit escapes
                dx[1] = x[0] + a * x[1];
                dx[2] = a + x[2] * (x[0] - b);
            }
            SystemKind::LotkaVolterra => {
                let (a, b, c, d) = (p[0], p[1], p[2], p[3]);
                dx[0] = a * x[0] + b * x[0] * x[1];
                dx[1] = c * x[1] + d * x[0] * x[1];
            }
        }
    }
}

/// Reusable stage buffers for the classical four-stage Runge-Kutta scheme.
#[derive(Debug, Clone)]
pub struct Rk4 {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl Rk4 {
    pub fn new(dim: usize) -> Self {
        Self {
            k1: vec![0.0; dim],
            k2: vec![0.0; dim],
            k3: vec![0.0; dim],
            k4: vec![0.0; dim],
            tmp: vec![0.0; dim],
        }
    }

    /// Advances `state` by one step in place. Returns `false` when a stage or
    /// the result is non-finite or exceeds [`DIVERGENCE_CAP`]; `state` is
    /// then unspecified.
    pub fn step<F: VectorField + ?Sized>(&mut self, f: &F, state: &mut [f64], dt: f64) -> bool {
        let n = state.len();
        f.eval(state, &mut self.k1);
        for i in 0..n {
            self.tmp[i] = state[i] + 0.5 * dt * self.k1[i];
        }
        f.eval(&self.tmp, &mut self.k2);
        for i in 0..n {
            self.tmp[i] = state[i] + 0.5 * dt * self.k2[i];
        }
        f.eval(&self.tmp, &mut self.k3);
        for i in 0..n {
            self.tmp[i] = state[i] + dt * self.k3[i];
        }
        f.eval(&self.tmp, &mut self.k4);
        let stages_ok = [&self.k1, &self.k2, &self.k3, &self.k4]
            .iter()
            .all(|k| k.iter().all(|v| v.is_finite()));
        for i in 0..n {
            state[i] += dt / 6.0 * (self.k1[i] + 2.0 * self.k2[i] + 2.0 * self.k3[i] + self.k4[i]);
        }
        stages_ok && state.iter().all(|v| v.is_finite() && v.abs() <= DIVERGENCE_CAP)
    }
}

/// One RK4 step of `rhs` from `state`.
pub fn rk4_step<F: VectorField + ?Sized>(rhs: &F, state: &[f64], dt: f64) -> Result<Vec<f64>> {
    if !(dt > 0.0) {
        return Err(Error::Invalid(format!("dt must be positive, got {dt}")));
    }
    let mut out = state.to_vec();
    if Rk4::new(state.len()).step(rhs, &mut out, dt) {
        Ok(out)
    } else {
        Err(Error::Diverged { step: 0 })
    }
}

/// Integrates `f` and returns the `steps` samples that follow `burn_in`
/// discarded steps. Row 0 is the state after burn-in.
pub fn simulate<F: VectorField + ?Sized>(
    f: &F,
    x0: &[f64],
    dt: f64,
    steps: usize,
    burn_in: usize,
) -> Result<Trajectory> {
    let m = f.dim();
    if x0.len() != m {
        return Err(Error::dim(format!("initial state has {} entries, system has {m}", x0.len())));
    }
    if steps == 0 {
        return Err(Error::Invalid("steps must be positive".into()));
    }
    if !(dt > 0.0) {
        return Err(Error::Invalid(format!("dt must be positive, got {dt}")));
    }
    let mut rk = Rk4::new(m);
    let mut x = x0.to_vec();
    for step in 0..burn_in {
        if !rk.step(f, &mut x, dt) {
            return Err(Error::Diverged { step });
        }
    }
    let mut states = DMatrix::zeros(steps, m);
    for i in 0..steps {
        if i > 0 && !rk.step(f, &mut x, dt) {
            return Err(Error::Diverged { step: burn_in + i - 1 });
        }
        for (j, v) in x.iter().enumerate() {
            states[(i, j)] = *v;
        }
    }
    let times = (0..steps).map(|i| i as f64 * dt).collect();
    Ok(Trajectory { times, states })
}

fn check_uniform(times: &[f64]) -> Result<f64> {
    if times.len() < 2 {
        return Ok(0.0);
    }
    let dt = times[1] - times[0];
    if !(dt > 0.0) {
        return Err(Error::NonUniform { index: 1 });
    }
    let tol = 1e-9 * dt;
    for (i, w) in times.windows(2).enumerate() {
        if ((w[1] - w[0]) - dt).abs() > tol.max(1e-12 * w[1].abs()) {
            return Err(Error::NonUniform { index: i + 1 });
        }
    }
    Ok(dt)
}

/// Uniformly sampled state history; row `i` is `x(t_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: DMatrix<f64>,
}

impl Trajectory {
    pub fn new(times: Vec<f64>, states: DMatrix<f64>) -> Result<Self> {
        if times.len() != states.nrows() {
            return Err(Error::dim(format!(
                "{} times for {} state rows",
                times.len(),
                states.nrows()
            )));
        }
        check_uniform(&times)?;
        Ok(Self { times, states })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.states.ncols()
    }

    pub fn dt(&self) -> f64 {
        if self.times.len() < 2 {
            0.0
        } else {
            self.times[1] - self.times[0]
        }
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut header = vec!["t".to_string()];
        header.extend((1..=self.dim()).map(|k| format!("x{k}")));
        let mut data = DMatrix::zeros(self.len(), self.dim() + 1);
        data.column_mut(0).copy_from_slice(&self.times);
        data.columns_mut(1, self.dim()).copy_from(&self.states);
        csvio::write_table(path, &header, &data)
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let (header, data) = csvio::read_table(path)?;
        if header.len() < 2 || header[0] != "t" {
            return Err(Error::parse(path, 1, "expected header `t,x1,...`"));
        }
        let times = data.column(0).iter().copied().collect();
        let states = data.columns(1, data.ncols() - 1).into_owned();
        Self::new(times, states)
    }
}

/// Scalar measurement `y(t_i)`, optionally tagged with the state component it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementSeries {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    pub source_component: Option<usize>,
}

impl MeasurementSeries {
    pub fn new(times: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if times.len() != values.len() {
            return Err(Error::dim(format!(
                "{} times for {} values",
                times.len(),
                values.len()
            )));
        }
        check_uniform(&times)?;
        Ok(Self {
            times,
            values,
            source_component: None,
        })
    }

    /// Builds a series on the grid `t_i = i * dt`.
    pub fn from_values(values: Vec<f64>, dt: f64) -> Self {
        let times = (0..values.len()).map(|i| i as f64 * dt).collect();
        Self {
            times,
            values,
            source_component: None,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn dt(&self) -> f64 {
        if self.times.len() < 2 {
            0.0
        } else {
            self.times[1] - self.times[0]
        }
    }

    pub fn check_uniform(&self) -> Result<f64> {
        check_uniform(&self.times)
    }

    pub fn mean_std(&self) -> (f64, f64) {
        mean_std(&self.values)
    }

    /// Centered, unit-variance copy plus the (mean, std) used.
    pub fn standardized(&self) -> (Self, f64, f64) {
        let (mean, std) = self.mean_std();
        let scale = if std > 0.0 { std } else { 1.0 };
        let values = self.values.iter().map(|v| (v - mean) / scale).collect();
        (
            Self {
                times: self.times.clone(),
                values,
                source_component: self.source_component,
            },
            mean,
            scale,
        )
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let header = vec!["t".to_string(), "y".to_string()];
        let mut data = DMatrix::zeros(self.len(), 2);
        data.column_mut(0).copy_from_slice(&self.times);
        data.column_mut(1).copy_from_slice(&self.values);
        csvio::write_table(path, &header, &data)
    }

    /// Reads `t,y` (or any two-column table whose first column is time).
    pub fn read_csv(path: &Path) -> Result<Self> {
        let (header, data) = csvio::read_table(path)?;
        if header.len() != 2 {
            return Err(Error::parse(path, 1, "expected two columns `t,y`"));
        }
        Self::new(
            data.column(0).iter().copied().collect(),
            data.column(1).iter().copied().collect(),
        )
    }
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn measure(traj: &Trajectory, component: usize) -> Result<MeasurementSeries> {
    if component >= traj.dim() {
        return Err(Error::OutOfRange {
            index: component,
            dim: traj.dim(),
        });
    }
    Ok(MeasurementSeries {
        times: traj.times.clone(),
        values: traj.states.column(component).iter().copied().collect(),
        source_component: Some(component),
    })
}

/// Adds i.i.d. zero-mean Gaussian noise of standard deviation `sigma`.
pub fn add_noise(series: &MeasurementSeries, sigma: f64, seed: u64) -> MeasurementSeries {
    let mut out = series.clone();
    if sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, sigma).expect("sigma is finite and positive");
        for v in &mut out.values {
            *v += normal.sample(&mut rng);
        }
    }
    out
}
