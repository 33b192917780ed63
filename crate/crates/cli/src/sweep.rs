//! Grid sweeps over config overrides, run on a bounded worker pool.
//!
//! A sweep file is an ordinary config file plus a `[sweep]` section:
//!
//! ```text
//! [sweep]
//! seeds = 0,1,2
//! workers = 4
//! grid.lambda_cons = 0.01 | 0.1
//! grid.threshold = 0.05 | 0.1
//! ```
//!
//! Grid values are separated by `|` because config values may contain commas.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::commands;
use crate::config::RunConfig;
use crate::{CliError, WORKERS_ENV};

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub base: RunConfig,
    /// `(key, values)` in declaration order; the grid is their product.
    pub grid: Vec<(String, Vec<String>)>,
    pub seeds: Vec<u64>,
    pub workers: usize,
}

impl SweepSpec {
    pub fn new(base: RunConfig) -> Self {
        let seeds = vec![base.seed];
        Self {
            base,
            grid: Vec::new(),
            seeds,
            workers: 1,
        }
    }

    /// Parses `key = a | b | c` into a grid axis.
    pub fn add_axis(&mut self, spec: &str) -> Result<(), CliError> {
        let (k, v) = spec
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("grid axis `{spec}` must look like key=a|b")))?;
        let key = k.trim().trim_start_matches("grid.").to_string();
        let values: Vec<String> = v.split('|').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
        if values.is_empty() {
            return Err(CliError::Usage(format!("grid axis `{key}` has no values")));
        }
        // reject unknown keys and bad values before anything runs
        let mut probe = self.base.clone();
        for value in &values {
            probe.set(&key, value)?;
        }
        self.grid.push((key, values));
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut base_text = String::new();
        let mut sweep_lines = Vec::new();
        let mut in_sweep = false;
        for line in text.lines() {
            let t = line.split('#').next().unwrap_or("").trim();
            if t.starts_with('[') {
                in_sweep = t == "[sweep]";
                if in_sweep {
                    continue;
                }
            }
            if in_sweep {
                if !t.is_empty() {
                    sweep_lines.push(t.to_string());
                }
            } else {
                base_text.push_str(line);
                base_text.push('\n');
            }
        }
        let mut spec = SweepSpec::new(RunConfig::parse(&base_text)?);
        for line in sweep_lines {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("[sweep]: expected `key = value`, got `{line}`")))?;
            match k.trim() {
                "seeds" => {
                    spec.seeds = v
                        .split(',')
                        .map(|s| s.trim().parse().map_err(|_| CliError::Usage(format!("bad seed `{s}`"))))
                        .collect::<Result<_, _>>()?
                }
                "workers" => {
                    spec.workers = v.trim().parse().map_err(|_| CliError::Usage(format!("bad worker count `{v}`")))?
                }
                key if key.starts_with("grid.") => spec.add_axis(&line)?,
                other => return Err(CliError::Usage(format!("[sweep]: unknown key `{other}`"))),
            }
        }
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.seeds.is_empty() {
            return Err(CliError::Usage("sweep needs at least one seed".into()));
        }
        if self.workers == 0 {
            return Err(CliError::Usage("workers must be at least 1".into()));
        }
        Ok(())
    }

    /// Every grid point, as override lists in axis order.
    pub fn cells(&self) -> Vec<Vec<(String, String)>> {
        let mut cells = vec![Vec::new()];
        for (key, values) in &self.grid {
            cells = cells
                .into_iter()
                .flat_map(|cell| {
                    values.iter().map(move |v| {
                        let mut c: Vec<(String, String)> = cell.clone();
                        c.push((key.clone(), v.clone()));
                        c
                    })
                })
                .collect();
        }
        cells
    }

    /// Worker count after applying the environment cap.
    pub fn effective_workers(&self) -> usize {
        let cap = std::env::var(WORKERS_ENV).ok().and_then(|v| v.parse::<usize>().ok()).filter(|c| *c > 0);
        cap.map_or(self.workers, |c| self.workers.min(c)).max(1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LeaderboardRow {
    /// Short digest of the full cell config (output directory excluded).
    pub hash: String,
    pub seed: u64,
    pub overrides: String,
    pub ok: bool,
    pub recon: f64,
    pub z1: f64,
    pub cons: f64,
    pub total: f64,
    pub active_terms: usize,
    pub prediction_error: f64,
    pub bounded: bool,
    pub error: String,
}

impl LeaderboardRow {
    fn failed(hash: String, seed: u64, overrides: String, error: String) -> Self {
        Self {
            hash,
            seed,
            overrides,
            ok: false,
            recon: f64::NAN,
            z1: f64::NAN,
            cons: f64::NAN,
            total: f64::NAN,
            active_terms: 0,
            prediction_error: f64::NAN,
            bounded: false,
            error,
        }
    }
}

pub const LEADERBOARD_HEADER: &str =
    "rank,hash,seed,overrides,status,recon,z1,cons,total,active_terms,prediction_error,bounded,error";

fn config_hash(cfg: &RunConfig) -> String {
    let mut c = cfg.clone();
    c.out = "".into();
    let digest = Sha256::digest(c.to_text().as_bytes());
    digest.iter().take(6).fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\"").replace('\n', " "))
    } else {
        s.to_string()
    }
}

fn run_cell(spec: &SweepSpec, overrides: &[(String, String)], seed: u64, dir: &Path) -> LeaderboardRow {
    let label = overrides.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(";");
    let mut cfg = spec.base.clone();
    cfg.seed = seed;
    for (k, v) in overrides {
        if let Err(e) = cfg.set(k, v) {
            return LeaderboardRow::failed(String::new(), seed, label, e.to_string());
        }
    }
    let hash = config_hash(&cfg);
    cfg.out = dir.join("cells").join(format!("{hash}-s{seed}"));
    match commands::train(&cfg) {
        Ok(o) => {
            let l = o.report.last().map(|r| r.loss.clone()).unwrap_or_default();
            LeaderboardRow {
                hash,
                seed,
                overrides: label,
                ok: true,
                recon: l.recon,
                z1: l.z1,
                cons: l.cons,
                total: l.total,
                active_terms: o.model.sindy.active_terms(),
                prediction_error: o.metrics.prediction_error,
                bounded: o.metrics.bounded,
                error: String::new(),
            }
        }
        Err(e) => LeaderboardRow::failed(hash, seed, label, e.to_string()),
    }
}

/// Successful rows first, then fewer active terms, then lower prediction
/// error; ties broken by hash and seed so the order never depends on
/// scheduling.
fn rank(rows: &mut [LeaderboardRow]) {
    rows.sort_by(|a, b| {
        (!a.ok)
            .cmp(&!b.ok)
            .then(a.active_terms.cmp(&b.active_terms))
            .then(a.prediction_error.total_cmp(&b.prediction_error))
            .then(a.hash.cmp(&b.hash))
            .then(a.seed.cmp(&b.seed))
    });
}

pub fn leaderboard_csv(rows: &[LeaderboardRow]) -> String {
    let mut s = format!("{LEADERBOARD_HEADER}\n");
    for (i, r) in rows.iter().enumerate() {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            i + 1,
            r.hash,
            r.seed,
            csv_field(&r.overrides),
            if r.ok { "ok" } else { "failed" },
            r.recon,
            r.z1,
            r.cons,
            r.total,
            r.active_terms,
            r.prediction_error,
            r.bounded,
            csv_field(&r.error)
        );
    }
    s
}

/// Runs every (cell, seed) pair and writes `leaderboard.csv` into the base
/// output directory. Cell failures become rows; the sweep itself only fails
/// on invalid specs or when the leaderboard cannot be written.
pub fn run_sweep(spec: &SweepSpec) -> Result<Vec<LeaderboardRow>, CliError> {
    spec.validate()?;
    let dir = spec.base.out.clone();
    fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    let jobs: Vec<(Vec<(String, String)>, u64)> =
        spec.cells().into_iter().flat_map(|c| spec.seeds.iter().map(move |s| (c.clone(), *s))).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(spec.effective_workers())
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start worker pool: {e}")))?;
    let mut rows: Vec<LeaderboardRow> =
        pool.install(|| jobs.par_iter().map(|(cell, seed)| run_cell(spec, cell, *seed, &dir)).collect());
    rank(&mut rows);
    let path = dir.join("leaderboard.csv");
    fs::write(&path, leaderboard_csv(&rows)).map_err(|e| CliError::io(&path, e))?;
    let mut manifest = spec.base.to_text();
    let _ = writeln!(manifest, "\n[sweep]");
    let _ = writeln!(manifest, "seeds = {}", spec.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(","));
    let _ = writeln!(manifest, "workers = {}", spec.workers);
    for (k, vs) in &spec.grid {
        let _ = writeln!(manifest, "grid.{k} = {}", vs.join(" | "));
    }
    let path = dir.join(commands::MANIFEST);
    fs::write(&path, format!("# delay-sindy sweep\n{manifest}")).map_err(|e| CliError::io(&path, e))?;
    Ok(rows)
}
