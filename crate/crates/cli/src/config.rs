//! Run configuration: a sectioned `key = value` text file whose entries can
//! be overridden from the command line.
//!
//! ```text
//! seed = 0
//!
//! [data]
//! system = lorenz
//! samples = 10000
//!
//! [train]
//! mode = random
//! epochs = 1000
//! ```
//!
//! Keys are unique across sections, so overrides may name them either bare
//! (`epochs=10`) or qualified (`train.epochs=10`).

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use delay_sindy::delaymodel::{InitMode, LossWeights};
use delay_sindy::neural::Activation;

use crate::CliError;

const SECTIONS: &[(&str, &[&str])] = &[
    ("", &["seed"]),
    (
        "data",
        &[
            "system", "params", "x0", "input", "dt", "burn_in", "component", "samples", "holdout", "noise",
            "standardize",
        ],
    ),
    ("embed", &["n", "p"]),
    (
        "model",
        &[
            "m", "hidden", "activation", "degree", "trig", "constant", "lambda_hdot", "lambda_zdot", "lambda_z1",
            "lambda_cons", "lambda_reg",
        ],
    ),
    (
        "train",
        &[
            "mode", "epochs", "batch_size", "learning_rate", "final_learning_rate", "refit_period", "threshold",
            "relative_threshold", "rollout_steps", "sigma", "pretrain_epochs", "grad_clip", "sup_weight",
        ],
    ),
    ("eval", &["horizon", "windows", "long_rollout"]),
    ("output", &["out", "plot"]),
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,

    /// Built-in system to simulate; mutually exclusive with `input`.
    pub system: Option<String>,
    /// System parameters; empty means the system defaults.
    pub params: Vec<f64>,
    /// Initial state; empty means the system default.
    pub x0: Vec<f64>,
    /// Measurement CSV (`t,y`) used instead of a simulation.
    pub input: Option<PathBuf>,
    /// Sampling interval τ of simulated data.
    pub dt: f64,
    pub burn_in: usize,
    /// State component that is measured.
    pub component: usize,
    /// Training columns of the Hankel matrix (simulation length for `simulate`).
    pub samples: usize,
    /// Extra samples after the training window kept for evaluation.
    pub holdout: usize,
    /// Standard deviation of additive measurement noise.
    pub noise: f64,
    /// Standardize the measurement with training-window statistics.
    pub standardize: bool,

    /// Delay count; `None` picks it from the unfolding rule.
    pub n: Option<usize>,
    /// SVD rank fed to the encoder; `None` feeds raw delay vectors.
    pub p: Option<usize>,

    pub m: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub degree: u32,
    pub trig: bool,
    pub constant: bool,
    pub weights: LossWeights,

    pub mode: InitMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub final_learning_rate: Option<f64>,
    pub refit_period: usize,
    pub threshold: f64,
    pub relative_threshold: bool,
    pub rollout_steps: Option<usize>,
    pub sigma: f64,
    pub pretrain_epochs: usize,
    pub grad_clip: f64,
    pub sup_weight: f64,

    pub horizon: usize,
    pub windows: usize,
    pub long_rollout: usize,

    pub out: PathBuf,
    pub plot: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = delay_sindy::delaymodel::TrainConfig::default();
        let eval = delay_sindy::delaymodel::EvalOptions::default();
        Self {
            seed: 0,
            system: Some("lorenz".into()),
            params: Vec::new(),
            x0: Vec::new(),
            input: None,
            dt: 0.1 / 128.0,
            burn_in: delay_sindy::dynsys::DEFAULT_BURN_IN,
            component: 0,
            samples: 10_000,
            holdout: 0,
            noise: 0.0,
            standardize: true,
            n: Some(128),
            p: Some(10),
            m: 3,
            hidden: vec![64, 32, 16],
            activation: Activation::Sigmoid,
            degree: 2,
            trig: false,
            constant: true,
            weights: LossWeights::default(),
            mode: train.init_mode,
            epochs: train.epochs,
            batch_size: train.batch_size,
            learning_rate: train.learning_rate,
            final_learning_rate: train.final_learning_rate,
            refit_period: train.refit_period,
            threshold: train.stlsq_threshold,
            relative_threshold: train.relative_threshold,
            rollout_steps: train.rollout_steps,
            sigma: train.perturb_sigma,
            pretrain_epochs: train.pretrain_epochs,
            grad_clip: train.grad_clip,
            sup_weight: train.sup_weight,
            horizon: eval.horizon,
            windows: eval.windows,
            long_rollout: eval.long_rollout,
            out: PathBuf::from("out"),
            plot: true,
        }
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, CliError> {
    v.parse().map_err(|_| usage(format!("bad value `{v}` for `{key}`")))
}

fn list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>, CliError> {
    if v.is_empty() || v == "default" {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| num(key, s.trim())).collect()
}

fn flag(key: &str, v: &str) -> Result<bool, CliError> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(usage(format!("bad boolean `{v}` for `{key}`"))),
    }
}

fn opt<T: std::str::FromStr>(key: &str, v: &str, none: &str) -> Result<Option<T>, CliError> {
    if v == none {
        Ok(None)
    } else {
        num(key, v).map(Some)
    }
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn show<T: ToString>(v: &Option<T>, none: &str) -> String {
    v.as_ref().map_or(none.to_string(), ToString::to_string)
}

/// Section of a bare key, if the key exists.
fn section_of(key: &str) -> Option<&'static str> {
    SECTIONS.iter().find(|(_, keys)| keys.contains(&key)).map(|(s, _)| *s)
}

impl RunConfig {
    /// All recognized keys, qualified by section.
    pub fn keys() -> Vec<String> {
        SECTIONS
            .iter()
            .flat_map(|(s, keys)| keys.iter().map(move |k| if s.is_empty() { k.to_string() } else { format!("{s}.{k}") }))
            .collect()
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let (sec, bare) = match key.split_once('.') {
            Some((s, k)) => (Some(s), k),
            None => (None, key),
        };
        let home = section_of(bare).ok_or_else(|| usage(format!("unknown config key `{key}`")))?;
        if let Some(s) = sec {
            if s != home {
                return Err(usage(format!("key `{bare}` belongs to section [{home}], not [{s}]")));
            }
        }
        let v = value.trim();
        let w = &mut self.weights;
        match bare {
            "seed" => self.seed = num(bare, v)?,
            "system" => {
                self.system = if v == "none" { None } else { Some(v.to_string()) };
                if self.system.is_some() {
                    self.input = None;
                }
            }
            "params" => self.params = list(bare, v)?,
            "x0" => self.x0 = list(bare, v)?,
            "input" => {
                self.input = if v == "none" { None } else { Some(PathBuf::from(v)) };
                if self.input.is_some() {
                    self.system = None;
                }
            }
            "dt" => self.dt = num(bare, v)?,
            "burn_in" => self.burn_in = num(bare, v)?,
            "component" => self.component = num(bare, v)?,
            "samples" => self.samples = num(bare, v)?,
            "holdout" => self.holdout = num(bare, v)?,
            "noise" => self.noise = num(bare, v)?,
            "standardize" => self.standardize = flag(bare, v)?,
            "n" => self.n = opt(bare, v, "auto")?,
            "p" => self.p = opt(bare, v, "none")?,
            "m" => self.m = num(bare, v)?,
            "hidden" => self.hidden = list(bare, v)?,
            "activation" => self.activation = Activation::parse(v).map_err(|e| usage(e.to_string()))?,
            "degree" => self.degree = num(bare, v)?,
            "trig" => self.trig = flag(bare, v)?,
            "constant" => self.constant = flag(bare, v)?,
            "lambda_hdot" => w.hdot = num(bare, v)?,
            "lambda_zdot" => w.zdot = num(bare, v)?,
            "lambda_z1" => w.z1 = num(bare, v)?,
            "lambda_cons" => w.cons = num(bare, v)?,
            "lambda_reg" => w.reg = num(bare, v)?,
            "mode" => self.mode = InitMode::parse(v).map_err(|e| usage(e.to_string()))?,
            "epochs" => self.epochs = num(bare, v)?,
            "batch_size" => self.batch_size = num(bare, v)?,
            "learning_rate" => self.learning_rate = num(bare, v)?,
            "final_learning_rate" => self.final_learning_rate = opt(bare, v, "none")?,
            "refit_period" => self.refit_period = num(bare, v)?,
            "threshold" => self.threshold = num(bare, v)?,
            "relative_threshold" => self.relative_threshold = flag(bare, v)?,
            "rollout_steps" => self.rollout_steps = opt(bare, v, "auto")?,
            "sigma" => self.sigma = num(bare, v)?,
            "pretrain_epochs" => self.pretrain_epochs = num(bare, v)?,
            "grad_clip" => self.grad_clip = num(bare, v)?,
            "sup_weight" => self.sup_weight = num(bare, v)?,
            "horizon" => self.horizon = num(bare, v)?,
            "windows" => self.windows = num(bare, v)?,
            "long_rollout" => self.long_rollout = num(bare, v)?,
            "out" => self.out = PathBuf::from(v),
            "plot" => self.plot = flag(bare, v)?,
            _ => unreachable!("key table and setter disagree on `{bare}`"),
        }
        Ok(())
    }

    /// Value of `key` in the same textual form [`set`](Self::set) accepts.
    pub fn get(&self, key: &str) -> Option<String> {
        let bare = key.rsplit('.').next()?;
        let w = &self.weights;
        Some(match bare {
            "seed" => self.seed.to_string(),
            "system" => show(&self.system, "none"),
            "params" => join(&self.params),
            "x0" => join(&self.x0),
            "input" => self.input.as_ref().map_or("none".into(), |p| p.display().to_string()),
            "dt" => self.dt.to_string(),
            "burn_in" => self.burn_in.to_string(),
            "component" => self.component.to_string(),
            "samples" => self.samples.to_string(),
            "holdout" => self.holdout.to_string(),
            "noise" => self.noise.to_string(),
            "standardize" => self.standardize.to_string(),
            "n" => show(&self.n, "auto"),
            "p" => show(&self.p, "none"),
            "m" => self.m.to_string(),
            "hidden" => join(&self.hidden),
            "activation" => self.activation.name().to_string(),
            "degree" => self.degree.to_string(),
            "trig" => self.trig.to_string(),
            "constant" => self.constant.to_string(),
            "lambda_hdot" => w.hdot.to_string(),
            "lambda_zdot" => w.zdot.to_string(),
            "lambda_z1" => w.z1.to_string(),
            "lambda_cons" => w.cons.to_string(),
            "lambda_reg" => w.reg.to_string(),
            "mode" => self.mode.name().to_string(),
            "epochs" => self.epochs.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "learning_rate" => self.learning_rate.to_string(),
            "final_learning_rate" => show(&self.final_learning_rate, "none"),
            "refit_period" => self.refit_period.to_string(),
            "threshold" => self.threshold.to_string(),
            "relative_threshold" => self.relative_threshold.to_string(),
            "rollout_steps" => show(&self.rollout_steps, "auto"),
            "sigma" => self.sigma.to_string(),
            "pretrain_epochs" => self.pretrain_epochs.to_string(),
            "grad_clip" => self.grad_clip.to_string(),
            "sup_weight" => self.sup_weight.to_string(),
            "horizon" => self.horizon.to_string(),
            "windows" => self.windows.to_string(),
            "long_rollout" => self.long_rollout.to_string(),
            "out" => self.out.display().to_string(),
            "plot" => self.plot.to_string(),
            _ => return None,
        })
    }

    /// Applies `key=value` pairs in order.
    pub fn apply<'a, I: IntoIterator<Item = (&'a str, &'a str)>>(&mut self, pairs: I) -> Result<(), CliError> {
        for (k, v) in pairs {
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut cfg = Self::default();
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                section = rest
                    .strip_suffix(']')
                    .ok_or_else(|| usage(format!("line {}: unterminated section header", i + 1)))?
                    .trim()
                    .to_string();
                if !SECTIONS.iter().any(|(s, _)| *s == section) {
                    return Err(usage(format!("line {}: unknown section [{section}]", i + 1)));
                }
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| usage(format!("line {}: expected `key = value`", i + 1)))?;
            let key = if section.is_empty() { k.trim().to_string() } else { format!("{section}.{}", k.trim()) };
            cfg.set(&key, v).map_err(|e| usage(format!("line {}: {e}", i + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text)
    }

    /// Full textual form; parsing it gives back an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (sec, keys) in SECTIONS {
            if !sec.is_empty() {
                let _ = writeln!(s, "\n[{sec}]");
            }
            for k in keys.iter() {
                let _ = writeln!(s, "{k} = {}", self.get(k).unwrap_or_default());
            }
        }
        s
    }

    pub fn validate(&self) -> Result<(), CliError> {
        match (&self.system, &self.input) {
            (Some(_), Some(_)) => return Err(usage("set either data.system or data.input, not both")),
            (None, None) => return Err(usage("one of data.system or data.input is required")),
            _ => {}
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(usage("dt must be positive"));
        }
        if self.samples == 0 {
            return Err(usage("samples must be positive"));
        }
        if self.m == 0 {
            return Err(usage("m must be positive"));
        }
        if self.noise < 0.0 {
            return Err(usage("noise must be nonnegative"));
        }
        self.weights.validate().map_err(|e| usage(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.apply([
            ("seed", "7"),
            ("params", "10,28,2.6667"),
            ("n", "auto"),
            ("p", "none"),
            ("final_learning_rate", "0.0001"),
            ("train.mode", "perturbed"),
            ("activation", "tanh"),
            ("dt", "0.000732421875"),
            ("hidden", "8,4"),
        ])
        .unwrap();
        let back = RunConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(RunConfig::parse(&RunConfig::default().to_text()).unwrap(), RunConfig::default());
    }

    #[test]
    fn sections_and_comments() {
        let cfg = RunConfig::parse("seed = 3 # comment\n\n[train]\nepochs = 12\n[model]\nm=2\n").unwrap();
        assert_eq!((cfg.seed, cfg.epochs, cfg.m), (3, 12, 2));
        assert!(RunConfig::parse("[train]\nm = 2\n").is_err());
        assert!(RunConfig::parse("[nowhere]\n").is_err());
        assert!(RunConfig::parse("epochs 3\n").is_err());
    }

    #[test]
    fn keys_cover_every_getter() {
        let cfg = RunConfig::default();
        let keys = RunConfig::keys();
        assert_eq!(keys.len(), 43);
        for k in keys {
            assert!(cfg.get(&k).is_some(), "{k}");
        }
    }

    #[test]
    fn source_switching() {
        let mut cfg = RunConfig::default();
        cfg.set("input", "series.csv").unwrap();
        assert_eq!(cfg.system, None);
        cfg.validate().unwrap();
        cfg.set("system", "rossler").unwrap();
        assert_eq!(cfg.input, None);
        cfg.system = None;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn bad_values_are_usage_errors() {
        let mut cfg = RunConfig::default();
        for (k, v) in [("epochs", "-1"), ("plot", "maybe"), ("nope", "1"), ("mode", "sideways"), ("data.epochs", "3")] {
            assert!(matches!(cfg.set(k, v), Err(CliError::Usage(_))), "{k}={v}");
        }
    }
}
