//! Minimal line plots written straight to SVG, each paired with a CSV of the
//! plotted points.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::CliError;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const MARGIN_L: f64 = 72.0;
const MARGIN_R: f64 = 20.0;
const MARGIN_T: f64 = 36.0;
const MARGIN_B: f64 = 52.0;
const MAX_POINTS: usize = 4000;
const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub dashed: bool,
}

impl Series {
    pub fn new(label: impl Into<String>, x: Vec<f64>, y: Vec<f64>) -> Self {
        Self {
            label: label.into(),
            x,
            y,
            dashed: false,
        }
    }

    pub fn dashed(mut self) -> Self {
        self.dashed = true;
        self
    }

    /// Points that will be drawn: finite, positive on a log axis, and thinned
    /// to at most `MAX_POINTS` by a fixed stride.
    fn points(&self, log_y: bool) -> Vec<(f64, f64)> {
        let stride = self.x.len().div_ceil(MAX_POINTS).max(1);
        self.x
            .iter()
            .zip(&self.y)
            .step_by(stride)
            .filter(|(x, y)| x.is_finite() && y.is_finite() && (!log_y || **y > 0.0))
            .map(|(x, y)| (*x, if log_y { y.log10() } else { *y }))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Plot {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub log_y: bool,
    pub series: Vec<Series>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn ticks(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    (0..=count).map(|i| lo + (hi - lo) * i as f64 / count as f64).collect()
}

fn label(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else if v.abs() >= 1e4 || v.abs() < 1e-2 {
        format!("{v:.1e}")
    } else {
        format!("{v:.3}").trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

impl Plot {
    pub fn new(title: impl Into<String>, x_label: impl Into<String>, y_label: impl Into<String>) -> Self {
        Self {
            title: title.into(),
            x_label: x_label.into(),
            y_label: y_label.into(),
            ..Default::default()
        }
    }

    pub fn log_y(mut self) -> Self {
        self.log_y = true;
        self
    }

    pub fn with(mut self, s: Series) -> Self {
        self.series.push(s);
        self
    }

    fn bounds(&self) -> (f64, f64, f64, f64) {
        let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for s in &self.series {
            for (x, y) in s.points(self.log_y) {
                x0 = x0.min(x);
                x1 = x1.max(x);
                y0 = y0.min(y);
                y1 = y1.max(y);
            }
        }
        if !x0.is_finite() {
            return (0.0, 1.0, 0.0, 1.0);
        }
        let pad = |a: f64, b: f64| if b > a { (a, b) } else { (a - 0.5, b + 0.5) };
        let (x0, x1) = pad(x0, x1);
        let (y0, y1) = pad(y0, y1);
        let dy = 0.04 * (y1 - y0);
        (x0, x1, y0 - dy, y1 + dy)
    }

    pub fn to_svg(&self) -> String {
        let (x0, x1, y0, y1) = self.bounds();
        let pw = WIDTH - MARGIN_L - MARGIN_R;
        let ph = HEIGHT - MARGIN_T - MARGIN_B;
        let sx = |x: f64| MARGIN_L + (x - x0) / (x1 - x0) * pw;
        let sy = |y: f64| MARGIN_T + (1.0 - (y - y0) / (y1 - y0)) * ph;
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">"#
        );
        let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
            WIDTH / 2.0,
            escape(&self.title)
        );
        let _ = writeln!(
            s,
            r##"<rect x="{MARGIN_L}" y="{MARGIN_T}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>"##
        );
        for t in ticks(x0, x1, 5) {
            let x = sx(t);
            let _ = writeln!(
                s,
                r##"<line x1="{x:.2}" y1="{:.2}" x2="{x:.2}" y2="{:.2}" stroke="#444"/><text x="{x:.2}" y="{:.2}" text-anchor="middle">{}</text>"##,
                MARGIN_T + ph,
                MARGIN_T + ph + 5.0,
                MARGIN_T + ph + 18.0,
                label(t)
            );
        }
        for t in ticks(y0, y1, 5) {
            let y = sy(t);
            let text = if self.log_y { format!("1e{t:.1}") } else { label(t) };
            let _ = writeln!(
                s,
                r##"<line x1="{:.2}" y1="{y:.2}" x2="{MARGIN_L}" y2="{y:.2}" stroke="#444"/><text x="{:.2}" y="{:.2}" text-anchor="end">{text}</text>"##,
                MARGIN_L - 5.0,
                MARGIN_L - 8.0,
                y + 4.0
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            MARGIN_L + pw / 2.0,
            HEIGHT - 12.0,
            escape(&self.x_label)
        );
        let _ = writeln!(
            s,
            r#"<text x="16" y="{0}" text-anchor="middle" transform="rotate(-90 16 {0})">{1}</text>"#,
            MARGIN_T + ph / 2.0,
            escape(&self.y_label)
        );
        for (k, series) in self.series.iter().enumerate() {
            let color = PALETTE[k % PALETTE.len()];
            let pts = series.points(self.log_y);
            let mut path = String::with_capacity(pts.len() * 16);
            for (x, y) in &pts {
                let _ = write!(path, "{:.2},{:.2} ", sx(*x), sy(*y));
            }
            let dash = if series.dashed { r#" stroke-dasharray="5,3""# } else { "" };
            let _ = writeln!(
                s,
                r#"<polyline fill="none" stroke="{color}" stroke-width="1.2"{dash} points="{}"/>"#,
                path.trim_end()
            );
            let ly = MARGIN_T + 14.0 + 14.0 * k as f64;
            let lx = MARGIN_L + pw - 130.0;
            let _ = writeln!(
                s,
                r#"<line x1="{lx}" y1="{0}" x2="{1}" y2="{0}" stroke="{color}" stroke-width="2"{dash}/><text x="{2}" y="{3}">{4}</text>"#,
                ly,
                lx + 18.0,
                lx + 24.0,
                ly + 4.0,
                escape(&series.label)
            );
        }
        s.push_str("</svg>\n");
        s
    }

    /// Long-format CSV `series,x,y` of exactly the drawn points (untransformed).
    pub fn to_csv(&self) -> String {
        let mut s = String::from("series,x,y\n");
        for series in &self.series {
            for (x, y) in series.points(self.log_y) {
                let y = if self.log_y { 10f64.powf(y) } else { y };
                let _ = writeln!(s, "{},{x},{y}", series.label.replace(',', ";"));
            }
        }
        s
    }

    /// Writes `stem.svg` and `stem.csv` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<Vec<PathBuf>, CliError> {
        let mut out = Vec::new();
        for (ext, body) in [("svg", self.to_svg()), ("csv", self.to_csv())] {
            let path = dir.join(format!("{stem}.{ext}"));
            fs::write(&path, body).map_err(|e| CliError::io(&path, e))?;
            out.push(path);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn svg_has_one_polyline_per_series() {
        let p = Plot::new("t", "x", "y")
            .with(Series::new("a", vec![0.0, 1.0, 2.0], vec![1.0, 3.0, 2.0]))
            .with(Series::new("b<c", vec![0.0, 2.0], vec![0.0, 0.5]).dashed());
        let svg = p.to_svg();
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains("b&lt;c"));
        assert!(svg.contains("stroke-dasharray"));
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    }

    #[test]
    fn csv_lists_drawn_points() {
        let p = Plot::new("t", "x", "y")
            .log_y()
            .with(Series::new("loss", vec![0.0, 1.0, 2.0, 3.0], vec![1.0, 0.0, 0.01, f64::NAN]));
        let csv = p.to_csv();
        let rows: Vec<&str> = csv.lines().skip(1).collect();
        assert_eq!(rows.len(), 2);
        let y: f64 = rows[1].split(',').nth(2).unwrap().parse().unwrap();
        assert!((y - 0.01).abs() < 1e-15);
    }

    #[test]
    fn long_series_are_thinned() {
        let x: Vec<f64> = (0..10_001).map(f64::from).collect();
        let p = Plot::new("t", "x", "y").with(Series::new("s", x.clone(), x));
        assert!(p.to_csv().lines().count() <= MAX_POINTS + 1);
    }

    #[test]
    fn empty_and_flat_plots_render() {
        assert!(Plot::new("e", "x", "y").to_svg().contains("</svg>"));
        let flat = Plot::new("f", "x", "y").with(Series::new("c", vec![1.0, 1.0], vec![2.0, 2.0]));
        assert!(!flat.to_svg().contains("NaN"));
    }
}
