//! CSV datasets (`label,f0,f1,...`) and auxiliary pools (`f0,f1,...`).

use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{fmt_real, write_atomic};
use crate::linalg::Matrix;

use super::{AuxiliaryPool, Dataset};

fn format_err(path: &Path, pos: Option<&csv::Position>, msg: impl Into<String>) -> Error {
    let msg = msg.into();
    Error::Format {
        path: path.display().to_string(),
        offset: pos.map_or(0, csv::Position::byte),
        msg: match pos {
            Some(p) => format!("line {}: {msg}", p.line()),
            None => msg,
        },
    }
}

fn reader(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => format_err(path, None, format!("{other:?}")),
        })
}

fn parse_real(path: &Path, pos: &csv::Position, field: &str) -> Result<f64> {
    field
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| format_err(path, Some(pos), format!("`{field}` is not a finite number")))
}

/// Reads a labeled CSV. `class_count` defaults to the largest label plus one.
pub fn load_csv_dataset(path: impl AsRef<Path>, class_count: Option<usize>) -> Result<Dataset> {
    let path = path.as_ref();
    let mut rdr = reader(path)?;
    let headers = rdr
        .headers()
        .map_err(|e| format_err(path, e.position(), e.to_string()))?
        .clone();
    if headers.get(0) != Some("label") || headers.len() < 2 {
        return Err(format_err(
            path,
            None,
            "header must be `label,f0,f1,...` with at least one feature",
        ));
    }
    let dim = headers.len() - 1;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| format_err(path, e.position(), e.to_string()))?;
        let pos = rec.position().cloned().unwrap_or_else(csv::Position::new);
        if rec.len() != dim + 1 {
            return Err(format_err(
                path,
                Some(&pos),
                format!("expected {} fields, found {}", dim + 1, rec.len()),
            ));
        }
        let label: usize = rec[0]
            .parse()
            .map_err(|_| format_err(path, Some(&pos), format!("bad label `{}`", &rec[0])))?;
        if let Some(c) = class_count.filter(|&c| label >= c) {
            return Err(format_err(
                path,
                Some(&pos),
                format!("label {label} outside [0, {c})"),
            ));
        }
        labels.push(label);
        for field in rec.iter().skip(1) {
            data.push(parse_real(path, &pos, field)?);
        }
    }
    if labels.is_empty() {
        return Err(format_err(path, None, "no samples"));
    }
    let classes = class_count.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
    Dataset::new(Matrix::new(labels.len(), dim, data)?, labels, classes)
}

/// Reads an unlabeled pool CSV.
pub fn load_csv_pool(path: impl AsRef<Path>, tag: impl Into<String>) -> Result<AuxiliaryPool> {
    let path = path.as_ref();
    let mut rdr = reader(path)?;
    let dim = rdr
        .headers()
        .map_err(|e| format_err(path, e.position(), e.to_string()))?
        .len();
    if dim == 0 {
        return Err(format_err(path, None, "empty header"));
    }
    let mut data = Vec::new();
    let mut rows = 0;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| format_err(path, e.position(), e.to_string()))?;
        let pos = rec.position().cloned().unwrap_or_else(csv::Position::new);
        if rec.len() != dim {
            return Err(format_err(
                path,
                Some(&pos),
                format!("expected {dim} fields, found {}", rec.len()),
            ));
        }
        for field in rec.iter() {
            data.push(parse_real(path, &pos, field)?);
        }
        rows += 1;
    }
    AuxiliaryPool::new(Matrix::new(rows, dim, data)?, tag)
}

fn feature_header(dim: usize) -> impl Iterator<Item = String> {
    (0..dim).map(|i| format!("f{i}"))
}

pub fn write_csv_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::from("label");
    for h in feature_header(dataset.dim()) {
        out.push(',');
        out.push_str(&h);
    }
    out.push('\n');
    for (i, &y) in dataset.y().iter().enumerate() {
        out.push_str(&y.to_string());
        for &v in dataset.x().row(i) {
            out.push(',');
            out.push_str(&fmt_real(v));
        }
        out.push('\n');
    }
    write_atomic(path.as_ref(), out.as_bytes())
}

pub fn write_csv_pool(pool: &AuxiliaryPool, path: impl AsRef<Path>) -> Result<()> {
    let mut out = feature_header(pool.dim()).collect::<Vec<_>>().join(",");
    out.push('\n');
    for r in 0..pool.len() {
        let row: Vec<String> = pool.x().row(r).iter().map(|&v| fmt_real(v)).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    write_atomic(path.as_ref(), out.as_bytes())
}
