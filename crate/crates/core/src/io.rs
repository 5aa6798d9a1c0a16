//! Dataset and model files.
//!
//! Datasets are CSV, one observation per row, no header unless asked for.
//! Values are written as `{:.16e}` (17 significant digits), which
//! round-trips every `f64`.
//!
//! Models are stored either as JSON, `{"n_x", "n_z", "sigma", "c_r"}` with
//! `c_r` row-major, or as a little-endian binary file:
//!
//! | offset | type      | content                     |
//! |--------|-----------|-----------------------------|
//! | 0      | `[u8; 4]` | magic `PPCA`                |
//! | 4      | `u32`     | format version (1)          |
//! | 8      | `u64`     | `n_x`                       |
//! | 16     | `u64`     | `n_z`                       |
//! | 24     | `f64`     | `sigma`                     |
//! | 32     | `f64 × n_x·n_z` | `c_r`, row-major      |

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::ppca::{Dataset, PpcaModel};

const MAGIC: &[u8; 4] = b"PPCA";
const VERSION: u32 = 1;

/// Opens `path`, naming it in the error.
pub(crate) fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| with_path(e, path))
}

pub(crate) fn with_path(e: std::io::Error, path: &Path) -> Error {
    Error::Io(std::io::Error::new(
        e.kind(),
        format!("{}: {e}", path.display()),
    ))
}

/// Reads a numeric CSV. With `header`, the first row is skipped.
pub fn read_csv(path: &Path, header: bool) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(header)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(open(path)?);
    let mut data = Vec::new();
    let mut cols = None;
    let mut rows = 0usize;
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let line = i + 1 + usize::from(header);
        if record.iter().all(str::is_empty) {
            continue;
        }
        match cols {
            None => cols = Some(record.len()),
            Some(c) if c != record.len() => {
                return Err(Error::Parse(format!(
                    "{}: line {line} has {} fields, expected {c}",
                    path.display(),
                    record.len()
                )));
            }
            Some(_) => {}
        }
        for field in record.iter() {
            let v: f64 = field.parse().map_err(|_| {
                Error::Parse(format!(
                    "{}: line {line}: not a number: {field:?}",
                    path.display()
                ))
            })?;
            if !v.is_finite() {
                return Err(Error::Parse(format!(
                    "{}: line {line}: non-finite value",
                    path.display()
                )));
            }
            data.push(v);
        }
        rows += 1;
    }
    let cols = cols.ok_or_else(|| Error::Parse(format!("{}: no data rows", path.display())))?;
    Ok(Dataset::new(Matrix::new(rows, cols, data)?))
}

/// Writes one row per observation with 17 significant digits.
pub fn write_csv(path: &Path, points: &Matrix) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).map_err(|e| with_path(e, path))?);
    for r in 0..points.rows() {
        let row: Vec<String> = points.row(r).iter().map(|v| format!("{v:.16e}")).collect();
        writeln!(w, "{}", row.join(","))?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct ModelJson {
    n_x: usize,
    n_z: usize,
    sigma: f64,
    c_r: Vec<f64>,
}

/// File encoding for models.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelFormat {
    Json,
    Binary,
}

impl ModelFormat {
    /// JSON for a `.json` extension, binary otherwise.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("json") => Self::Json,
            _ => Self::Binary,
        }
    }
}

pub fn model_to_bytes(model: &PpcaModel) -> Vec<u8> {
    let c = model.c_r().as_slice();
    let mut out = Vec::with_capacity(32 + 8 * c.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(model.n_x() as u64).to_le_bytes());
    out.extend_from_slice(&(model.n_z() as u64).to_le_bytes());
    out.extend_from_slice(&model.sigma().to_le_bytes());
    for v in c {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn take<const N: usize>(bytes: &[u8], offset: &mut usize) -> Result<[u8; N]> {
    let end = *offset + N;
    let chunk = bytes
        .get(*offset..end)
        .ok_or_else(|| Error::Parse("model file is truncated".into()))?;
    *offset = end;
    Ok(chunk.try_into().expect("length checked"))
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<PpcaModel> {
    let mut at = 0;
    if &take::<4>(bytes, &mut at)? != MAGIC {
        return Err(Error::Parse("not a PPCA model file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(take(bytes, &mut at)?);
    if version != VERSION {
        return Err(Error::Parse(format!(
            "unsupported model file version {version}"
        )));
    }
    let n_x = u64::from_le_bytes(take(bytes, &mut at)?) as usize;
    let n_z = u64::from_le_bytes(take(bytes, &mut at)?) as usize;
    let sigma = f64::from_le_bytes(take(bytes, &mut at)?);
    let count = n_x
        .checked_mul(n_z)
        .filter(|&c| bytes.len() == 32 + 8 * c)
        .ok_or_else(|| Error::Parse("model file size does not match its header".into()))?;
    let mut c = Vec::with_capacity(count);
    for _ in 0..count {
        c.push(f64::from_le_bytes(take(bytes, &mut at)?));
    }
    PpcaModel::new(Matrix::new(n_x, n_z, c)?, sigma)
}

pub fn model_to_json(model: &PpcaModel) -> Result<String> {
    Ok(serde_json::to_string_pretty(&ModelJson {
        n_x: model.n_x(),
        n_z: model.n_z(),
        sigma: model.sigma(),
        c_r: model.c_r().as_slice().to_vec(),
    })?)
}

pub fn model_from_json(text: &str) -> Result<PpcaModel> {
    let m: ModelJson = serde_json::from_str(text)?;
    if m.c_r.len() != m.n_x * m.n_z {
        return Err(Error::Parse(format!(
            "c_r has {} entries, expected {}",
            m.c_r.len(),
            m.n_x * m.n_z
        )));
    }
    PpcaModel::new(Matrix::new(m.n_x, m.n_z, m.c_r)?, m.sigma)
}

pub fn save_model(path: &Path, model: &PpcaModel) -> Result<()> {
    match ModelFormat::from_path(path) {
        ModelFormat::Json => std::fs::write(path, model_to_json(model)?),
        ModelFormat::Binary => std::fs::write(path, model_to_bytes(model)),
    }
    .map_err(|e| with_path(e, path))?;
    Ok(())
}

/// Loads either format, sniffing the magic bytes.
pub fn load_model(path: &Path) -> Result<PpcaModel> {
    let mut bytes = Vec::new();
    open(path)?.read_to_end(&mut bytes)?;
    if bytes.starts_with(MAGIC) {
        model_from_bytes(&bytes)
    } else {
        let text = String::from_utf8(bytes).map_err(|_| {
            Error::Parse(format!("{}: neither binary nor JSON model", path.display()))
        })?;
        model_from_json(&text)
    }
}
