//! Delay embedding of a scalar series: Hankel matrix, its time derivative,
//! truncated SVD basis and window-selection diagnostics.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;

use crate::csvio;
use crate::dynsys::MeasurementSeries;
use crate::error::{Error, Result};
use crate::linalg;

/// Target delay window `n * tau` in time units.
pub const UNFOLDING_WINDOW: f64 = 0.1;
pub const MIN_DELAYS: usize = 8;
pub const MAX_DELAYS: usize = 512;

/// `n × q` Hankel matrix of delay vectors; column `j` holds
/// `y(t_j), …, y(t_{j+n-1})` (0-based), with matching derivative estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct HankelEmbedding {
    pub h: DMatrix<f64>,
    pub hdot: DMatrix<f64>,
    pub tau: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EmbedOptions {
    /// Apply a 5-point moving average to the series before differencing.
    pub smooth_derivatives: bool,
}

impl HankelEmbedding {
    pub fn n(&self) -> usize {
        self.h.nrows()
    }

    pub fn q(&self) -> usize {
        self.h.ncols()
    }

    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        csvio::write_matrix(&dir.join(format!("{stem}_H.csv")), &self.h)?;
        csvio::write_matrix(&dir.join(format!("{stem}_Hdot.csv")), &self.hdot)?;
        let meta = format!("n={}\nq={}\ntau={}\n", self.n(), self.q(), csvio::fmt_f64(self.tau));
        let path = dir.join(format!("{stem}_meta.txt"));
        fs::write(&path, meta).map_err(|e| Error::io(&path, e))
    }

    pub fn read(dir: &Path, stem: &str) -> Result<Self> {
        let h = csvio::read_matrix(&dir.join(format!("{stem}_H.csv")))?;
        let hdot = csvio::read_matrix(&dir.join(format!("{stem}_Hdot.csv")))?;
        let meta = read_meta(&dir.join(format!("{stem}_meta.txt")))?;
        let tau = meta_value(&meta, "tau", &dir.join(format!("{stem}_meta.txt")))?;
        if h.shape() != hdot.shape() {
            return Err(Error::dim("H and Hdot shapes differ"));
        }
        Ok(Self { h, hdot, tau })
    }
}

pub fn build_hankel(series: &MeasurementSeries, n: usize) -> Result<HankelEmbedding> {
    build_hankel_with(series, n, EmbedOptions::default())
}

pub fn build_hankel_with(series: &MeasurementSeries, n: usize, opts: EmbedOptions) -> Result<HankelEmbedding> {
    if n < 2 {
        return Err(Error::Invalid(format!("need at least 2 delays, got {n}")));
    }
    let len = series.len();
    if len < n + 2 {
        return Err(Error::TooShort {
            required: n + 2,
            got: len,
        });
    }
    let tau = series.check_uniform()?;
    let h = hankel_from(&series.values, n);
    let hdot = if opts.smooth_derivatives {
        let smoothed = moving_average5(&series.values);
        estimate_derivatives(&hankel_from(&smoothed, n), tau)?
    } else {
        estimate_derivatives(&h, tau)?
    };
    Ok(HankelEmbedding { h, hdot, tau })
}

fn hankel_from(values: &[f64], n: usize) -> DMatrix<f64> {
    let q = values.len() - n + 1;
    DMatrix::from_fn(n, q, |i, j| values[i + j])
}

fn moving_average5(values: &[f64]) -> Vec<f64> {
    let len = values.len();
    (0..len)
        .map(|i| {
            let lo = i.saturating_sub(2);
            let hi = (i + 2).min(len - 1);
            // symmetric window shrinks near the ends
            let half = (i - lo).min(hi - i);
            let window = &values[i - half..=i + half];
            window.iter().sum::<f64>() / window.len() as f64
        })
        .collect()
}

/// Second-order finite differences along the time (column) axis.
pub fn estimate_derivatives(h: &DMatrix<f64>, tau: f64) -> Result<DMatrix<f64>> {
    let (n, q) = h.shape();
    if q < 3 {
        return Err(Error::TooShort { required: 3, got: q });
    }
    let inv = 1.0 / (2.0 * tau);
    let mut d = DMatrix::zeros(n, q);
    for i in 0..n {
        d[(i, 0)] = (-3.0 * h[(i, 0)] + 4.0 * h[(i, 1)] - h[(i, 2)]) * inv;
        for j in 1..q - 1 {
            d[(i, j)] = (h[(i, j + 1)] - h[(i, j - 1)]) * inv;
        }
        d[(i, q - 1)] = (3.0 * h[(i, q - 1)] - 4.0 * h[(i, q - 2)] + h[(i, q - 3)]) * inv;
    }
    Ok(d)
}

/// Rank-`p` factorization `H ≈ U_p diag(S_p) V_pᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdBasis {
    pub u: DMatrix<f64>,
    pub s: Vec<f64>,
    pub v: DMatrix<f64>,
    pub variance_captured: f64,
    /// Full singular spectrum of `H`, nonincreasing.
    pub spectrum: Vec<f64>,
}

impl SvdBasis {
    pub fn p(&self) -> usize {
        self.s.len()
    }

    pub fn n(&self) -> usize {
        self.u.nrows()
    }

    /// `U_pᵀ h` for a vector or for each column of a matrix.
    pub fn project(&self, h: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if h.nrows() != self.n() {
            return Err(Error::dim(format!("expected {} rows, got {}", self.n(), h.nrows())));
        }
        Ok(self.u.tr_mul(h))
    }

    /// `U_p b`, the adjoint of [`project`](Self::project).
    pub fn lift(&self, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if b.nrows() != self.p() {
            return Err(Error::dim(format!("expected {} rows, got {}", self.p(), b.nrows())));
        }
        Ok(&self.u * b)
    }

    /// Fraction of `‖H‖_F²` captured by the leading `k` modes.
    pub fn variance_at(&self, k: usize) -> f64 {
        let total: f64 = self.spectrum.iter().map(|s| s * s).sum();
        if total == 0.0 {
            return 0.0;
        }
        self.spectrum.iter().take(k).map(|s| s * s).sum::<f64>() / total
    }

    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        csvio::write_matrix(&dir.join(format!("{stem}_U.csv")), &self.u)?;
        csvio::write_matrix(&dir.join(format!("{stem}_V.csv")), &self.v)?;
        let spectrum = DMatrix::from_column_slice(self.spectrum.len(), 1, &self.spectrum);
        csvio::write_table(&dir.join(format!("{stem}_spectrum.csv")), &["sigma".to_string()], &spectrum)?;
        let mut meta = format!(
            "n={}\nq={}\np={}\nvariance_captured={}\n",
            self.n(),
            self.v.nrows(),
            self.p(),
            csvio::fmt_f64(self.variance_captured)
        );
        for (i, s) in self.s.iter().enumerate() {
            let _ = writeln!(meta, "s{}={}", i + 1, csvio::fmt_f64(*s));
        }
        let path = dir.join(format!("{stem}_meta.txt"));
        fs::write(&path, meta).map_err(|e| Error::io(&path, e))
    }

    pub fn read(dir: &Path, stem: &str) -> Result<Self> {
        let u = csvio::read_matrix(&dir.join(format!("{stem}_U.csv")))?;
        let v = csvio::read_matrix(&dir.join(format!("{stem}_V.csv")))?;
        let spectrum: Vec<f64> = csvio::read_matrix(&dir.join(format!("{stem}_spectrum.csv")))?
            .iter()
            .copied()
            .collect();
        let meta_path = dir.join(format!("{stem}_meta.txt"));
        let meta = read_meta(&meta_path)?;
        let p = meta_value(&meta, "p", &meta_path)? as usize;
        let variance_captured = meta_value(&meta, "variance_captured", &meta_path)?;
        let s = (1..=p)
            .map(|i| meta_value(&meta, &format!("s{i}"), &meta_path))
            .collect::<Result<Vec<_>>>()?;
        if u.ncols() != p || v.ncols() != p {
            return Err(Error::dim("basis factor widths disagree with p"));
        }
        Ok(Self {
            u,
            s,
            v,
            variance_captured,
            spectrum,
        })
    }
}

pub fn truncated_svd(embedding: &HankelEmbedding, p: usize) -> Result<SvdBasis> {
    truncated_svd_of(&embedding.h, p)
}

pub fn truncated_svd_of(h: &DMatrix<f64>, p: usize) -> Result<SvdBasis> {
    let (n, q) = h.shape();
    if p == 0 || p > n.min(q) {
        return Err(Error::Invalid(format!("rank p={p} must be in 1..={}", n.min(q))));
    }
    let svd = linalg::thin_svd(h)?;
    let smax = svd.s.first().copied().unwrap_or(0.0);
    if !(svd.s[p - 1] > smax * 1e-14) {
        return Err(Error::Invalid(format!(
            "matrix has numerical rank below p={p} (s_p = {:e})",
            svd.s[p - 1]
        )));
    }
    let mut u = svd.u.columns(0, p).into_owned();
    let mut v = svd.v.columns(0, p).into_owned();
    for k in 0..p {
        let col = u.column(k);
        let mut best = 0;
        for i in 1..n {
            if col[i].abs() > col[best].abs() {
                best = i;
            }
        }
        if col[best] < 0.0 {
            u.column_mut(k).neg_mut();
            v.column_mut(k).neg_mut();
        }
    }
    let total = h.norm_squared();
    let captured: f64 = svd.s.iter().take(p).map(|s| s * s).sum();
    let variance_captured = if total > 0.0 { (captured / total).min(1.0) } else { 0.0 };
    Ok(SvdBasis {
        u,
        s: svd.s[..p].to_vec(),
        v,
        variance_captured,
        spectrum: svd.s,
    })
}

/// Delay-window recommendation for a uniformly sampled series.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DelayWindow {
    pub n: usize,
    pub tau: f64,
    /// Lag (in samples) of the first zero crossing of the autocorrelation.
    pub acf_zero_lag: Option<usize>,
}

pub fn suggest_delay_window(series: &MeasurementSeries) -> Result<DelayWindow> {
    if series.len() < 256 {
        return Err(Error::TooShort {
            required: 256,
            got: series.len(),
        });
    }
    let tau = series.check_uniform()?;
    let n = ((UNFOLDING_WINDOW / tau).round() as usize).clamp(MIN_DELAYS, MAX_DELAYS);
    Ok(DelayWindow {
        n,
        tau,
        acf_zero_lag: first_acf_zero(&series.values),
    })
}

fn first_acf_zero(values: &[f64]) -> Option<usize> {
    let len = values.len();
    let mean = values.iter().sum::<f64>() / len as f64;
    let centered: Vec<f64> = values.iter().map(|v| v - mean).collect();
    let var: f64 = centered.iter().map(|v| v * v).sum();
    if var == 0.0 {
        return None;
    }
    (1..len / 2).find(|&lag| {
        let c: f64 = centered[..len - lag]
            .iter()
            .zip(&centered[lag..])
            .map(|(a, b)| a * b)
            .sum();
        c <= 0.0
    })
}

pub(crate) fn read_meta(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect())
}

pub(crate) fn meta_value(meta: &[(String, String)], key: &str, path: &Path) -> Result<f64> {
    meta.iter()
        .find(|(k, _)| k == key)
        .and_then(|(_, v)| v.parse().ok())
        .ok_or_else(|| Error::parse(path, 0, format!("missing or invalid `{key}`")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn series(values: Vec<f64>, dt: f64) -> MeasurementSeries {
        MeasurementSeries::from_values(values, dt)
    }

    #[test]
    fn small_hankel_layout() {
        let e = build_hankel(&series(vec![1.0, 2.0, 3.0, 4.0, 5.0], 1.0), 3).unwrap();
        assert_eq!(e.q(), 3);
        assert_eq!(e.h, DMatrix::from_row_slice(3, 3, &[1., 2., 3., 2., 3., 4., 3., 4., 5.]));
        assert_eq!(e.h[(2, 0)], e.h[(1, 1)]);
        assert_eq!(e.h[(1, 1)], e.h[(0, 2)]);
    }

    #[test]
    fn too_short_and_non_uniform() {
        assert!(matches!(
            build_hankel(&series(vec![1.0; 4], 0.1), 3),
            Err(Error::TooShort { required: 5, got: 4 })
        ));
        let bad = MeasurementSeries {
            times: vec![0.0, 0.1, 0.2, 0.35, 0.4, 0.5],
            values: vec![0.0; 6],
            source_component: None,
        };
        assert!(matches!(build_hankel(&bad, 2), Err(Error::NonUniform { .. })));
    }

    #[test]
    fn derivative_exact_on_ramp_and_constant() {
        let ramp = build_hankel(&series((0..50).map(|i| i as f64 * 0.25).collect(), 0.25), 6).unwrap();
        assert!(ramp.hdot.iter().all(|&v| v == 1.0));
        let ramp = build_hankel(&series((0..50).map(|i| i as f64 * 0.01).collect(), 0.01), 6).unwrap();
        assert!(ramp.hdot.iter().all(|&v| (v - 1.0).abs() <= 1e-12));
        let flat = build_hankel(&series(vec![3.7; 40], 0.01), 5).unwrap();
        assert!(flat.hdot.iter().all(|&v| v.abs() <= 1e-12));
    }

    #[test]
    fn derivative_of_sine() {
        let tau = 0.01;
        let y: Vec<f64> = (0..700).map(|i| (i as f64 * tau).sin()).collect();
        let e = build_hankel(&series(y, tau), 10).unwrap();
        let mut worst: f64 = 0.0;
        for j in 0..e.q() {
            for i in 0..e.n() {
                let t = (i + j) as f64 * tau;
                worst = worst.max((e.hdot[(i, j)] - t.cos()).abs());
            }
        }
        assert!(worst < 1e-4, "{worst}");
    }

    #[test]
    fn derivative_needs_three_columns() {
        let h = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 3.0]);
        assert!(estimate_derivatives(&h, 0.1).is_err());
    }

    #[test]
    fn smoothing_reduces_noise_in_derivative() {
        let tau = 0.01;
        let clean: Vec<f64> = (0..600).map(|i| (i as f64 * tau).sin()).collect();
        let noisy = crate::dynsys::add_noise(&series(clean, tau), 1e-3, 3);
        let raw = build_hankel(&noisy, 8).unwrap();
        let smooth = build_hankel_with(&noisy, 8, EmbedOptions { smooth_derivatives: true }).unwrap();
        let err = |e: &HankelEmbedding| {
            let mut s = 0.0;
            for j in 2..e.q() - 2 {
                s += (e.hdot[(0, j)] - (j as f64 * tau).cos()).powi(2);
            }
            s
        };
        assert!(err(&smooth) < err(&raw));
        assert_eq!(smooth.h, raw.h);
    }

    #[test]
    fn identity_svd() {
        let h = DMatrix::<f64>::identity(3, 3);
        let b = truncated_svd_of(&h, 2).unwrap();
        assert_eq!(b.p(), 2);
        assert!((b.s[0] - 1.0).abs() < 1e-14 && (b.s[1] - 1.0).abs() < 1e-14);
        assert!((b.variance_captured - 2.0 / 3.0).abs() < 1e-14);
    }

    #[test]
    fn rank_one_svd() {
        let u = DMatrix::from_column_slice(4, 1, &[1.0, -2.0, 0.5, 3.0]);
        let v = DMatrix::from_column_slice(5, 1, &[0.3, 1.0, -1.0, 2.0, 0.1]);
        let h = &u * v.transpose();
        let b = truncated_svd_of(&h, 1).unwrap();
        assert!((b.variance_captured - 1.0).abs() < 1e-12);
        // largest-magnitude entry positive
        assert!(b.u[(3, 0)] > 0.0);
        assert!(matches!(truncated_svd_of(&h, 2), Err(Error::Invalid(_))));
        assert!(truncated_svd_of(&h, 5).is_err());
    }

    #[test]
    fn projection_properties() {
        let y: Vec<f64> = (0..300).map(|i| (i as f64 * 0.05).sin() + 0.3 * (i as f64 * 0.17).cos()).collect();
        let e = build_hankel(&series(y, 0.05), 12).unwrap();
        let b = truncated_svd(&e, 4).unwrap();
        let e0 = b.project(&b.u.columns(0, 1).into_owned()).unwrap();
        assert!((e0[0] - 1.0).abs() < 1e-12);
        assert!(e0.iter().skip(1).all(|v| v.abs() < 1e-12));
        let coeffs = DMatrix::from_column_slice(4, 1, &[0.5, -1.0, 2.0, 0.25]);
        let h = b.lift(&coeffs).unwrap();
        let back = b.lift(&b.project(&h).unwrap()).unwrap();
        assert!((back - h).abs().max() < 1e-10);
        assert!(b.project(&DMatrix::zeros(5, 1)).is_err());
    }

    #[test]
    fn delay_window_rule() {
        let mk = |dt: f64| series((0..300).map(|i| (i as f64).sin()).collect(), dt);
        assert_eq!(suggest_delay_window(&mk(0.001)).unwrap().n, 100);
        assert_eq!(suggest_delay_window(&mk(0.0008)).unwrap().n, 125);
        assert_eq!(suggest_delay_window(&mk(0.1)).unwrap().n, 8);
        assert!(suggest_delay_window(&series(vec![0.0; 100], 0.01)).is_err());
        let w = suggest_delay_window(&series((0..1000).map(|i| (i as f64 * 0.01).cos()).collect(), 0.01)).unwrap();
        // cos autocorrelation first crosses zero near a quarter period (157 samples);
        // the finite-sample estimate crosses slightly earlier
        let lag = w.acf_zero_lag.unwrap();
        assert!((140..=165).contains(&lag), "{lag}");
    }

    #[test]
    fn files_round_trip() {
        let dir = std::env::temp_dir().join(format!("hankel-io-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let y: Vec<f64> = (0..80).map(|i| (i as f64 * 0.1).sin() + (i as f64 * 0.37).cos().powi(3)).collect();
        let e = build_hankel(&series(y, 0.1), 6).unwrap();
        e.write(&dir, "emb").unwrap();
        assert_eq!(HankelEmbedding::read(&dir, "emb").unwrap(), e);
        let b = truncated_svd(&e, 3).unwrap();
        b.write(&dir, "basis").unwrap();
        assert_eq!(SvdBasis::read(&dir, "basis").unwrap(), b);
    }

    proptest! {
        #[test]
        fn first_row_reproduces_series(values in proptest::collection::vec(-10.0f64..10.0, 8..60), n in 2usize..6) {
            prop_assume!(values.len() >= n + 2);
            let e = build_hankel(&series(values.clone(), 0.1), n).unwrap();
            let row: Vec<f64> = e.h.row(0).iter().copied().collect();
            prop_assert_eq!(&row[..], &values[..e.q()]);
            for i in 1..e.n() {
                for j in 0..e.q() - 1 {
                    prop_assert_eq!(e.h[(i, j)], e.h[(i - 1, j + 1)]);
                }
            }
        }

        #[test]
        fn projection_contracts(seed in 0u64..1000) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let y: Vec<f64> = (0..120).map(|_| rng.random_range(-1.0..1.0)).collect();
            let e = build_hankel(&series(y, 0.1), 10).unwrap();
            let b = truncated_svd(&e, 5).unwrap();
            let h = DMatrix::from_fn(10, 1, |_, _| rng.random_range(-3.0..3.0));
            let p = b.project(&h).unwrap();
            prop_assert!(p.norm() <= h.norm() + 1e-12);
            let k = b.p();
            prop_assert!((b.u.transpose() * &b.u - DMatrix::identity(k, k)).abs().max() < 1e-10);
            prop_assert!((b.v.transpose() * &b.v - DMatrix::identity(k, k)).abs().max() < 1e-10);
            let approx = &b.u * DMatrix::from_diagonal(&nalgebra::DVector::from_vec(b.s.clone())) * b.v.transpose();
            let resid = (&e.h - approx).norm_squared() / e.h.norm_squared();
            prop_assert!((resid - (1.0 - b.variance_captured)).abs() < 1e-8);
            let mut prev = f64::INFINITY;
            for p in 1..=10 {
                let err = 1.0 - b.variance_at(p);
                prop_assert!(err <= prev + 1e-15);
                prev = err;
            }
        }
    }
}
