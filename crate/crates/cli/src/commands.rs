//! The five commands. Each writes into `cfg.out` and returns a summary.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;

use delay_sindy::delaymodel::{evaluate, DelayModel, EvalMetrics};
use delay_sindy::dynsys::{add_noise, measure};
use delay_sindy::hankel::{truncated_svd, HankelEmbedding};
use delay_sindy::sindy::{default_var_names, format_equations, simulate_sindy};

use crate::config::RunConfig;
use crate::pipeline::{self, Outcome, Prepared};
use crate::svg::{Plot, Series};
use crate::CliError;

pub const MANIFEST: &str = "manifest.txt";

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// Writes the full config (re-runnable with `--config`) into `dir`.
pub fn write_manifest(cfg: &RunConfig, dir: &Path, command: &str) -> Result<PathBuf, CliError> {
    let path = dir.join(MANIFEST);
    let text = format!("# delay-sindy {command}\n{}", cfg.to_text());
    write_text(&path, &text)?;
    Ok(path)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulateSummary {
    pub samples: usize,
    pub files: Vec<PathBuf>,
}

pub fn simulate(cfg: &RunConfig) -> Result<SimulateSummary, CliError> {
    cfg.validate()?;
    let sys = pipeline::system_of(cfg)?.ok_or_else(|| CliError::Usage("simulate needs data.system".into()))?;
    if cfg.component >= sys.kind.dim() {
        return Err(CliError::Usage(format!("component {} out of range for {}", cfg.component, sys.name())));
    }
    let traj = pipeline::simulate_system(cfg, &sys, cfg.samples)?;
    let mut y = measure(&traj, cfg.component)?;
    if cfg.noise > 0.0 {
        y = add_noise(&y, cfg.noise, cfg.seed);
    }
    ensure_dir(&cfg.out)?;
    let mut files = vec![cfg.out.join("trajectory.csv"), cfg.out.join("measurement.csv")];
    traj.write_csv(&files[0])?;
    y.write_csv(&files[1])?;
    if cfg.plot {
        let plot = Plot::new(format!("{} measurement", sys.name()), "t", "y")
            .with(Series::new(format!("x{}", cfg.component + 1), y.times.clone(), y.values.clone()));
        files.extend(plot.write(&cfg.out, "measurement")?);
        if sys.kind.dim() >= 2 {
            let col = |k: usize| traj.states.column(k).iter().copied().collect::<Vec<_>>();
            let phase = Plot::new(format!("{} phase portrait", sys.name()), "x1", "x2").with(Series::new("x1-x2", col(0), col(1)));
            files.extend(phase.write(&cfg.out, "phase")?);
        }
    }
    files.push(write_manifest(cfg, &cfg.out, "simulate")?);
    Ok(SimulateSummary {
        samples: traj.len(),
        files,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbedSummary {
    pub n: usize,
    pub q: usize,
    pub p: usize,
    pub variance_captured: f64,
    /// Cumulative captured variance for ranks 1, 2, ….
    pub cumulative_variance: Vec<f64>,
    pub diagnostics: String,
}

fn cumulative_variance(spectrum: &[f64]) -> Vec<f64> {
    let total: f64 = spectrum.iter().map(|s| s * s).sum();
    let mut acc = 0.0;
    spectrum
        .iter()
        .map(|s| {
            acc += s * s;
            if total > 0.0 { acc / total } else { 0.0 }
        })
        .collect()
}

pub fn embed(cfg: &RunConfig) -> Result<EmbedSummary, CliError> {
    let prep = pipeline::prepare(cfg)?;
    let emb = &prep.train;
    let (n, q) = (emb.n(), emb.q());
    let p = cfg.p.unwrap_or(10).min(n).min(q);
    let basis = truncated_svd(emb, p)?;
    let cumulative = cumulative_variance(&basis.spectrum);
    let mut d = String::new();
    let _ = writeln!(d, "n = {n}");
    let _ = writeln!(d, "tau = {}", emb.tau);
    let _ = writeln!(d, "window = {}", n as f64 * emb.tau);
    let _ = writeln!(d, "q = {q}");
    let _ = writeln!(d, "suggested_n = {}", pipeline::unfolding_delays(emb.tau));
    let acf = delay_sindy::hankel::suggest_delay_window(&prep.series).ok().and_then(|w| w.acf_zero_lag);
    let _ = writeln!(d, "acf_zero_lag = {}", acf.map_or("none".into(), |l| l.to_string()));
    let _ = writeln!(d, "p = {p}");
    let _ = writeln!(d, "variance_captured = {}", basis.variance_captured);
    let _ = writeln!(d, "\n[variance_by_rank]");
    for (k, v) in cumulative.iter().enumerate().take(n.min(50)) {
        let _ = writeln!(d, "{} = {v}", k + 1);
    }
    let _ = writeln!(d, "\n[singular_values]");
    for (k, s) in basis.spectrum.iter().enumerate() {
        let _ = writeln!(d, "{} = {s}", k + 1);
    }
    ensure_dir(&cfg.out)?;
    emb.write(&cfg.out, "hankel")?;
    basis.write(&cfg.out, "basis")?;
    write_text(&cfg.out.join("diagnostics.txt"), &d)?;
    if cfg.plot {
        let ranks: Vec<f64> = (1..=basis.spectrum.len()).map(|k| k as f64).collect();
        Plot::new("singular value spectrum", "rank", "singular value")
            .log_y()
            .with(Series::new("sigma", ranks.clone(), basis.spectrum.clone()))
            .write(&cfg.out, "spectrum")?;
        let pareto: Vec<f64> = cumulative.iter().map(|c| 1.0 - c).collect();
        Plot::new("variance left out by rank", "rank", "1 - captured")
            .log_y()
            .with(Series::new("residual variance", ranks, pareto))
            .write(&cfg.out, "variance")?;
    }
    write_manifest(cfg, &cfg.out, "embed")?;
    Ok(EmbedSummary {
        n,
        q,
        p,
        variance_captured: basis.variance_captured,
        cumulative_variance: cumulative,
        diagnostics: d,
    })
}

fn metrics_text(m: &EvalMetrics, extra: &[(&str, String)]) -> String {
    let mut s = String::new();
    let rows = [
        ("recon_mse", m.recon_mse.to_string()),
        ("z1_mse", m.z1_mse.to_string()),
        ("active_terms", m.active_terms.to_string()),
        ("prediction_error", m.prediction_error.to_string()),
        ("prediction_variance", m.prediction_variance.to_string()),
        ("one_step_error", m.one_step_error.to_string()),
        ("series_variance", m.series_variance.to_string()),
        ("bounded", m.bounded.to_string()),
        ("rollout_steps_completed", m.rollout_steps_completed.to_string()),
        ("lobe_sign_changes", m.lobe_sign_changes.to_string()),
    ];
    for (k, v) in rows.iter().chain(extra.iter().map(|(k, v)| (*k, v.clone())).collect::<Vec<_>>().iter()) {
        let _ = writeln!(s, "{k} = {v}");
    }
    s
}

fn equations_text(model: &DelayModel, prep: &Prepared) -> String {
    let vars = default_var_names(model.latent_dim());
    let mut s = String::from("# latent coordinates\n");
    s.push_str(&format_equations(&model.sindy, &vars, 4));
    if (model.y_shift, model.y_scale) != (0.0, 1.0) {
        if let Ok(d) = model.descaled_sindy() {
            s.push_str("\n# measurement units\n");
            s.push_str(&format_equations(&d, &vars, 4));
        }
    }
    if let Some(t) = &prep.true_xi {
        if t.dim() == model.latent_dim() {
            s.push_str("\n# reference system in latent coordinates\n");
            s.push_str(&format_equations(t, &vars, 4));
        }
    }
    s
}

fn row_vec(m: &DMatrix<f64>, r: usize) -> Vec<f64> {
    m.row(r).iter().copied().collect()
}

fn col_vec(m: &DMatrix<f64>, c: usize) -> Vec<f64> {
    m.column(c).iter().copied().collect()
}

fn training_plots(out: &Path, o: &Outcome) -> Result<(), CliError> {
    let epochs: Vec<f64> = o.report.records.iter().map(|r| r.epoch as f64).collect();
    let pick = |f: fn(&delay_sindy::delaymodel::LossBreakdown) -> f64| o.report.records.iter().map(|r| f(&r.loss)).collect::<Vec<_>>();
    Plot::new("losses", "epoch", "loss")
        .log_y()
        .with(Series::new("recon", epochs.clone(), pick(|l| l.recon)))
        .with(Series::new("z1", epochs.clone(), pick(|l| l.z1)))
        .with(Series::new("cons", epochs.clone(), pick(|l| l.cons)))
        .with(Series::new("zdot", epochs.clone(), pick(|l| l.zdot)))
        .with(Series::new("total", epochs.clone(), pick(|l| l.total)).dashed())
        .write(out, "loss")?;

    let names = &o.report.term_names;
    let r = names.len();
    let mut coef = Plot::new("coefficients", "epoch", "value");
    for k in 0..o.report.latent_dim {
        for (i, name) in names.iter().enumerate() {
            let trace: Vec<f64> = o.report.records.iter().map(|rec| rec.xi[k * r + i]).collect();
            if trace.iter().any(|v| *v != 0.0) {
                coef.series.push(Series::new(format!("dz{}:{name}", k + 1), epochs.clone(), trace));
            }
        }
    }
    if let Some(t) = &o.prepared.true_xi {
        if t.dim() == o.report.latent_dim && t.library.len() == r {
            for k in 0..t.dim() {
                for i in 0..r {
                    let v = t.xi[(i, k)];
                    if v != 0.0 {
                        let label = format!("ref dz{}:{}", k + 1, names[i]);
                        let ends = vec![epochs.first().copied().unwrap_or(0.0), epochs.last().copied().unwrap_or(0.0)];
                        coef.series.push(Series::new(label, ends, vec![v, v]).dashed());
                    }
                }
            }
        }
    }
    coef.write(out, "coefficients")?;

    let m = o.model.latent_dim();
    if m >= 2 {
        let z = o.model.encode(&o.prepared.train.h)?;
        let roll = &o.metrics.rollout;
        Plot::new("latent attractor", "z1", "z2")
            .with(Series::new("encoded data", row_vec(&z, 0), row_vec(&z, 1)).dashed())
            .with(Series::new("model rollout", col_vec(roll, 0), col_vec(roll, 1)))
            .write(out, "attractor")?;
        let b = truncated_svd(&o.prepared.train, 2)?;
        Plot::new("embedding modes", "v1", "v2")
            .with(Series::new("delay embedding", col_vec(&b.v, 0), col_vec(&b.v, 1)))
            .write(out, "modes")?;
    }
    Ok(())
}

/// Trains end to end and writes the checkpoint, reports and plots. A
/// non-finite loss still writes everything, then reports divergence.
pub fn train(cfg: &RunConfig) -> Result<Outcome, CliError> {
    let o = pipeline::run(cfg)?;
    let out = &cfg.out;
    ensure_dir(out)?;
    o.model.save(&out.join("model"))?;
    o.report.write_csv(&out.join("report.csv"))?;
    o.report.write_coefficients_csv(&out.join("coefficients.csv"))?;
    write_text(&out.join("equations.txt"), &equations_text(&o.model, &o.prepared))?;
    let mut extra = Vec::new();
    if let Some(last) = o.report.last() {
        let l = &last.loss;
        for (k, v) in [("final_recon", l.recon), ("final_z1", l.z1), ("final_cons", l.cons), ("final_total", l.total)] {
            extra.push((k, v.to_string()));
        }
    }
    if let Some(nmse) = o.latent_nmse() {
        extra.push(("latent_nmse", nmse.to_string()));
    }
    extra.push(("aborted_epoch", o.report.aborted.map_or("none".into(), |e| e.to_string())));
    write_text(&out.join("metrics.txt"), &metrics_text(&o.metrics, &extra))?;
    if cfg.plot {
        training_plots(out, &o)?;
    }
    write_manifest(cfg, out, "train")?;
    if let Some(epoch) = o.report.aborted {
        return Err(CliError::Divergence(format!("training loss became non-finite at epoch {epoch}")));
    }
    Ok(o)
}

#[derive(Debug, Clone)]
pub struct EvalSummary {
    pub metrics: EvalMetrics,
    pub text: String,
}

/// Evaluates a saved model on the data described by `cfg`, standardized with
/// the statistics stored in the checkpoint.
pub fn eval(cfg: &RunConfig, checkpoint: &Path) -> Result<EvalSummary, CliError> {
    if !checkpoint.join("model.txt").is_file() {
        return Err(CliError::io(
            &checkpoint.join("model.txt"),
            std::io::Error::new(std::io::ErrorKind::NotFound, "checkpoint not found"),
        ));
    }
    let model = DelayModel::load(checkpoint)?;
    let mut cfg = cfg.clone();
    cfg.n = Some(model.n);
    let prep = pipeline::prepare_scaled(&cfg, Some((model.y_shift, model.y_scale)))?;
    let target: &HankelEmbedding = prep.holdout.as_ref().unwrap_or(&prep.train);
    let metrics = evaluate(&model, target, &pipeline::eval_options(&cfg))?;
    let text = metrics_text(&metrics, &[]);
    ensure_dir(&cfg.out)?;
    write_text(&cfg.out.join("metrics.txt"), &text)?;
    if cfg.plot {
        let z = model.encode(&target.h.columns(0, 1).into_owned())?;
        let z0: Vec<f64> = z.column(0).iter().copied().collect();
        let steps = cfg.horizon.min(target.q() + target.n() - 2).max(1);
        let y = delay_sindy::delaymodel::series_of(target);
        let t: Vec<f64> = (0..=steps).map(|j| j as f64 * model.tau).collect();
        let mut plot = Plot::new("prediction from the first window", "t", "y")
            .with(Series::new("measurement", t.clone(), y[..=steps].to_vec()).dashed());
        if let Ok(traj) = simulate_sindy(&model.sindy, &z0, model.tau, steps) {
            plot = plot.with(Series::new("model z1", t, col_vec(&traj.states, 0)));
        }
        plot.write(&cfg.out, "prediction")?;
    }
    write_manifest(&cfg, &cfg.out, "eval")?;
    Ok(EvalSummary { metrics, text })
}
