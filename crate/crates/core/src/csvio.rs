//! Plain-text tables: a header row followed by rows of 17-significant-digit
//! floats, so every value survives a write/read cycle bit-exactly.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Formats a float with 17 significant digits (round-trip exact for f64).
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn table_to_string(header: &[String], data: &DMatrix<f64>) -> String {
    let mut out = String::with_capacity(data.len() * 24 + 64);
    out.push_str(&header.join(","));
    out.push('\n');
    for i in 0..data.nrows() {
        for j in 0..data.ncols() {
            if j > 0 {
                out.push(',');
            }
            let _ = write!(out, "{:.16e}", data[(i, j)]);
        }
        out.push('\n');
    }
    out
}

pub fn write_table(path: &Path, header: &[String], data: &DMatrix<f64>) -> Result<()> {
    if header.len() != data.ncols() {
        return Err(Error::dim(format!(
            "header has {} names for {} columns",
            header.len(),
            data.ncols()
        )));
    }
    fs::write(path, table_to_string(header, data)).map_err(|e| Error::io(path, e))
}

pub fn parse_table(path: &Path, text: &str) -> Result<(Vec<String>, DMatrix<f64>)> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, head) = lines
        .next()
        .ok_or_else(|| Error::parse(path, 1, "empty file"))?;
    let header: Vec<String> = head.split(',').map(|s| s.trim().to_string()).collect();
    let ncols = header.len();
    let mut values = Vec::new();
    let mut nrows = 0;
    for (lineno, line) in lines {
        let before = values.len();
        for field in line.split(',') {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| Error::parse(path, lineno + 1, format!("bad number `{field}`")))?;
            values.push(v);
        }
        if values.len() - before != ncols {
            return Err(Error::parse(
                path,
                lineno + 1,
                format!("expected {ncols} fields, got {}", values.len() - before),
            ));
        }
        nrows += 1;
    }
    Ok((header, DMatrix::from_row_slice(nrows, ncols, &values)))
}

pub fn read_table(path: &Path) -> Result<(Vec<String>, DMatrix<f64>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_table(path, &text)
}

/// Headerless matrix dump (used for embedding and basis factors).
pub fn write_matrix(path: &Path, data: &DMatrix<f64>) -> Result<()> {
    let header: Vec<String> = (0..data.ncols()).map(|j| format!("c{j}")).collect();
    write_table(path, &header, data)
}

pub fn read_matrix(path: &Path) -> Result<DMatrix<f64>> {
    read_table(path).map(|(_, m)| m)
}
