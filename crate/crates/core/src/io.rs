//! Matrix TSV and JSON files. Every write goes to a temporary sibling first
//! and is renamed into place.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linmodel::FeatureMatrix;

/// A matrix with row and column labels, as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledMatrix {
    /// Header of the id column.
    pub corner: String,
    pub row_ids: Vec<String>,
    pub col_ids: Vec<String>,
    pub values: DMatrix<f64>,
}

impl LabeledMatrix {
    /// Label rows `{row_prefix}1..` and columns `{col_prefix}1..`.
    pub fn with_generated_ids(values: DMatrix<f64>, corner: &str, row_prefix: &str, col_prefix: &str) -> Self {
        Self {
            corner: corner.into(),
            row_ids: (1..=values.nrows()).map(|i| format!("{row_prefix}{i}")).collect(),
            col_ids: (1..=values.ncols()).map(|i| format!("{col_prefix}{i}")).collect(),
            values,
        }
    }
}

/// Seventeen significant digits, enough to round-trip any `f64`.
pub fn format_real(v: f64) -> String {
    if v == 0.0 {
        // avoid "-0" differing between otherwise identical outputs
        return "0".into();
    }
    format!("{v:.16e}")
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Write `bytes` to a temporary file beside `path`, then rename it over `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidInput(format!("{} is not a file path", path.display())))?;
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    fs::write(&tmp, bytes).map_err(|e| io_err(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        io_err(path, e)
    })
}

pub fn matrix_tsv(m: &LabeledMatrix) -> String {
    let mut out = String::new();
    out.push_str(&m.corner);
    for c in &m.col_ids {
        out.push('\t');
        out.push_str(c);
    }
    out.push('\n');
    for (i, id) in m.row_ids.iter().enumerate() {
        out.push_str(id);
        for j in 0..m.values.ncols() {
            out.push('\t');
            out.push_str(&format_real(m.values[(i, j)]));
        }
        out.push('\n');
    }
    out
}

pub fn parse_matrix_tsv(text: &str, source: &str) -> Result<LabeledMatrix> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .has_headers(true)
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let header = reader
        .headers()
        .map_err(|e| Error::Parse(format!("{source}: {e}")))?
        .clone();
    if header.is_empty() {
        return Err(Error::Parse(format!("{source}: empty header")));
    }
    let corner = header[0].to_string();
    let col_ids: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let mut row_ids = Vec::new();
    let mut data = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Parse(format!("{source}: {e}")))?;
        row_ids.push(record[0].to_string());
        for (j, field) in record.iter().skip(1).enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| {
                Error::Parse(format!("{source}: row {}, column {}: cannot parse {field:?}", line + 2, j + 2))
            })?;
            data.push(v);
        }
    }
    let values = DMatrix::from_row_slice(row_ids.len(), col_ids.len(), &data);
    Ok(LabeledMatrix {
        corner,
        row_ids,
        col_ids,
        values,
    })
}

pub fn write_matrix(path: &Path, m: &LabeledMatrix) -> Result<()> {
    atomic_write(path, matrix_tsv(m).as_bytes())
}

pub fn read_matrix(path: &Path) -> Result<LabeledMatrix> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    parse_matrix_tsv(&text, &path.display().to_string())
}

/// Features in rows, samples in columns.
pub fn read_feature_matrix(path: &Path) -> Result<FeatureMatrix> {
    let m = read_matrix(path)?;
    FeatureMatrix::new(m.values, m.row_ids, m.col_ids)
}

pub fn write_feature_matrix(path: &Path, y: &FeatureMatrix) -> Result<()> {
    write_matrix(
        path,
        &LabeledMatrix {
            corner: "feature_id".into(),
            row_ids: y.feature_ids.clone(),
            col_ids: y.sample_ids.clone(),
            values: y.values.clone(),
        },
    )
}

/// Samples in rows; the row ids must match `sample_ids` in order.
pub fn read_sample_matrix(path: &Path, sample_ids: &[String]) -> Result<DMatrix<f64>> {
    let m = read_matrix(path)?;
    if m.row_ids != sample_ids {
        return Err(Error::DimensionMismatch(format!(
            "{}: sample ids do not match the response matrix",
            path.display()
        )));
    }
    Ok(m.values)
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Parse(e.to_string()))?;
    text.push('\n');
    atomic_write(path, text.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}
