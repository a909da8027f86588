//! File formats: labeled CSV/TSV matrices, the `OTAG` binary matrix format,
//! and JSON output with floats rounded to 9 significant digits.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::Serialize;
use serde_json::Value;

use crate::error::{OtagError, Result};
use crate::matrix::Matrix;

pub const OTAG_MAGIC: &[u8; 4] = b"OTAG";
pub const OTAG_VERSION: u32 = 1;
const OTAG_HEADER_LEN: usize = 4 + 4 + 8 + 8;

/// Format like C's `%.9g`.
pub fn fmt_sig9(x: f64) -> String {
    if !x.is_finite() {
        return format!("{x}");
    }
    if x == 0.0 {
        return "0".to_string();
    }
    let sci = format!("{x:.8e}");
    let (mantissa, exp) = sci.split_once('e').unwrap_or((sci.as_str(), "0"));
    let exp: i32 = exp.parse().unwrap_or(0);
    if !(-4..9).contains(&exp) {
        let mantissa = trim_fraction(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{mantissa}e{sign}{:02}", exp.abs())
    } else {
        let decimals = (8 - exp) as usize;
        trim_fraction(&format!("{x:.decimals$}")).to_string()
    }
}

fn trim_fraction(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// Round to the nearest value printable with 9 significant digits.
pub fn sig9(x: f64) -> f64 {
    if x.is_finite() {
        fmt_sig9(x).parse().unwrap_or(x)
    } else {
        x
    }
}

fn round_value(v: &mut Value) {
    match v {
        Value::Number(n) if n.is_f64() => {
            if let Some(f) = n.as_f64() {
                if let Some(r) = serde_json::Number::from_f64(sig9(f)) {
                    *n = r;
                }
            }
        }
        Value::Array(items) => items.iter_mut().for_each(round_value),
        Value::Object(map) => map.values_mut().for_each(round_value),
        _ => {}
    }
}

/// Pretty JSON with every float rounded to 9 significant digits.
pub fn to_json_sig9<T: Serialize>(value: &T) -> Result<String> {
    let mut v = serde_json::to_value(value)?;
    round_value(&mut v);
    Ok(serde_json::to_string_pretty(&v)?)
}

pub fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| OtagError::io(path, e))
}

pub fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| OtagError::io(path, e))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| OtagError::io(path, e))
}

/// A matrix with row and column labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledMatrix {
    /// Header of the label column (`clip_id`, `mid`, ...).
    pub label_header: String,
    pub row_labels: Vec<String>,
    pub columns: Vec<String>,
    pub values: Matrix,
}

impl LabeledMatrix {
    /// Require the value columns to equal `expected`, in order.
    pub fn check_columns(&self, expected: &[String]) -> Result<()> {
        for (i, want) in expected.iter().enumerate() {
            match self.columns.get(i) {
                Some(got) if got == want => {}
                Some(got) => {
                    return Err(OtagError::ColumnMismatch {
                        position: i + 1,
                        expected: want.clone(),
                        found: got.clone(),
                    })
                }
                None => {
                    return Err(OtagError::ColumnMismatch {
                        position: i + 1,
                        expected: want.clone(),
                        found: String::new(),
                    })
                }
            }
        }
        if let Some(extra) = self.columns.get(expected.len()) {
            return Err(OtagError::ColumnMismatch {
                position: expected.len() + 1,
                expected: String::new(),
                found: extra.clone(),
            });
        }
        Ok(())
    }
}

/// Read a delimited matrix: header row, first column row labels, remaining
/// columns numeric. `skip_columns` drops that many columns after the label
/// column (used for the `parent` column of embedding exports).
pub fn read_delimited<R: Read>(reader: R, delimiter: u8, skip_columns: usize, source: &str) -> Result<LabeledMatrix> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .has_headers(true)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.is_empty() {
        return Err(OtagError::Format {
            path: source.to_string(),
            message: "missing header row".into(),
        });
    }
    let start = 1 + skip_columns;
    let columns: Vec<String> = headers.iter().skip(start).map(str::to_string).collect();
    let mut row_labels = Vec::new();
    let mut data = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() != headers.len() {
            return Err(OtagError::Format {
                path: source.to_string(),
                message: format!("row {} has {} fields, header has {}", line + 1, rec.len(), headers.len()),
            });
        }
        row_labels.push(rec[0].to_string());
        for field in rec.iter().skip(start) {
            let v: f64 = field.trim().parse().map_err(|_| OtagError::Format {
                path: source.to_string(),
                message: format!("row {}: {field:?} is not a number", line + 1),
            })?;
            data.push(v);
        }
    }
    Ok(LabeledMatrix {
        label_header: headers[0].to_string(),
        values: Matrix::from_vec(row_labels.len(), columns.len(), data)?,
        row_labels,
        columns,
    })
}

pub fn write_csv_matrix<W: Write>(mut sink: W, m: &LabeledMatrix) -> Result<()> {
    write!(sink, "{}", m.label_header)?;
    for c in &m.columns {
        write!(sink, ",{c}")?;
    }
    writeln!(sink)?;
    for (r, label) in m.row_labels.iter().enumerate() {
        write!(sink, "{label}")?;
        for &v in m.values.row(r) {
            write!(sink, ",{}", fmt_sig9(v))?;
        }
        writeln!(sink)?;
    }
    sink.flush()?;
    Ok(())
}

/// Write the `OTAG` binary format: magic, u32 version, u64 rows, u64 cols, then
/// row-major f32 values, all little-endian.
pub fn write_otag<W: Write>(mut sink: W, m: &Matrix) -> Result<()> {
    sink.write_all(OTAG_MAGIC)?;
    sink.write_all(&OTAG_VERSION.to_le_bytes())?;
    sink.write_all(&(m.rows() as u64).to_le_bytes())?;
    sink.write_all(&(m.cols() as u64).to_le_bytes())?;
    for &v in m.as_slice() {
        sink.write_all(&(v as f32).to_le_bytes())?;
    }
    sink.flush()?;
    Ok(())
}

pub fn read_otag(bytes: &[u8], source: &str) -> Result<Matrix> {
    let fail = |message: String| OtagError::Format {
        path: source.to_string(),
        message,
    };
    if bytes.len() < OTAG_HEADER_LEN || &bytes[..4] != OTAG_MAGIC {
        return Err(fail("missing OTAG header".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != OTAG_VERSION {
        return Err(fail(format!("unsupported OTAG version {version}")));
    }
    let rows = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let cols = u64::from_le_bytes(bytes[16..24].try_into().expect("8 bytes"));
    let count = rows
        .checked_mul(cols)
        .and_then(|n| usize::try_from(n).ok())
        .ok_or_else(|| fail("matrix too large".into()))?;
    let body = &bytes[OTAG_HEADER_LEN..];
    if body.len() != count * 4 {
        return Err(fail(format!("expected {} value bytes, found {}", count * 4, body.len())));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
        .collect();
    Matrix::from_vec(rows as usize, cols as usize, data)
}

pub fn is_otag(bytes: &[u8]) -> bool {
    bytes.starts_with(OTAG_MAGIC)
}

/// Read a clip × class matrix from CSV or `OTAG` binary (sniffed by magic
/// bytes). CSV class columns must match `class_mids` exactly; binary files only
/// need the right column count and get row labels `row0, row1, ...`.
pub fn read_class_matrix(path: &Path, class_mids: &[String]) -> Result<LabeledMatrix> {
    let bytes = read_bytes(path)?;
    let source = path.display().to_string();
    if is_otag(&bytes) {
        let values = read_otag(&bytes, &source)?;
        if values.cols() != class_mids.len() {
            return Err(OtagError::Format {
                path: source,
                message: format!("{} columns, class list has {}", values.cols(), class_mids.len()),
            });
        }
        Ok(LabeledMatrix {
            label_header: "clip_id".into(),
            row_labels: (0..values.rows()).map(|i| format!("row{i}")).collect(),
            columns: class_mids.to_vec(),
            values,
        })
    } else {
        let m = read_delimited(bytes.as_slice(), b',', 0, &source)?;
        m.check_columns(class_mids)?;
        Ok(m)
    }
}

/// Read a per-row embedding table: `OTAG` binary, the TSV export format
/// (`mid`, `parent`, `v0..`), or a CSV whose first column is the row label.
pub fn read_embeddings(path: &Path) -> Result<LabeledMatrix> {
    let bytes = read_bytes(path)?;
    let source = path.display().to_string();
    if is_otag(&bytes) {
        let values = read_otag(&bytes, &source)?;
        return Ok(LabeledMatrix {
            label_header: "id".into(),
            row_labels: (0..values.rows()).map(|i| format!("row{i}")).collect(),
            columns: (0..values.cols()).map(|i| format!("v{i}")).collect(),
            values,
        });
    }
    let first_line = bytes.split(|&b| b == b'\n').next().unwrap_or_default();
    let tsv = first_line.contains(&b'\t');
    let delimiter = if tsv { b'\t' } else { b',' };
    let header: Vec<&[u8]> = first_line.split(|&b| b == delimiter).collect();
    let skip = usize::from(header.get(1).is_some_and(|h| h.trim_ascii() == b"parent"));
    read_delimited(bytes.as_slice(), delimiter, skip, &source)
}
