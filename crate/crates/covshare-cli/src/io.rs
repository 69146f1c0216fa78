//! CSV ingestion and matrix output.
//!
//! Input files are UTF-8, comma-separated, '.' decimal, one observation per
//! row; a single leading header row is tolerated and skipped. Matrices are
//! written back as plain CSV with shortest round-trip float formatting.

use nalgebra::DMatrix;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::Failure;

/// Read a numeric matrix from CSV with row/column diagnostics. A first row
/// that does not parse as numbers is treated as a header.
pub fn read_matrix_csv(path: &Path) -> Result<DMatrix<f64>, Failure> {
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::Data(format!("cannot read {}: {e}", path.display())))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut width = None;
    for (line_no, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let mut parsed = Vec::with_capacity(fields.len());
        let mut bad_col = None;
        for (col, field) in fields.iter().enumerate() {
            match field.trim().parse::<f64>() {
                Ok(v) if v.is_finite() => parsed.push(v),
                _ => {
                    bad_col = Some(col);
                    break;
                }
            }
        }
        if let Some(col) = bad_col {
            if rows.is_empty() && line_no == 0 {
                continue; // header row
            }
            return Err(Failure::Data(format!(
                "{}: row {}, column {}: cannot parse '{}' as a finite number",
                path.display(),
                line_no + 1,
                col + 1,
                fields[col].trim()
            )));
        }
        if let Some(w) = width {
            if parsed.len() != w {
                return Err(Failure::Data(format!(
                    "{}: row {} has {} columns, expected {}",
                    path.display(),
                    line_no + 1,
                    parsed.len(),
                    w
                )));
            }
        } else {
            width = Some(parsed.len());
        }
        rows.push(parsed);
    }
    let width = width.ok_or_else(|| {
        Failure::Data(format!("{}: no numeric rows found", path.display()))
    })?;
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(DMatrix::from_row_slice(rows.len(), width, &flat))
}

/// Subtract column means in place.
pub fn demean_columns(m: &mut DMatrix<f64>) {
    let n = m.nrows() as f64;
    for j in 0..m.ncols() {
        let mean = m.column(j).sum() / n;
        for i in 0..m.nrows() {
            m[(i, j)] -= mean;
        }
    }
}

/// Write a matrix as headerless CSV, one row per line.
pub fn write_matrix_csv(path: &Path, m: &DMatrix<f64>) -> Result<(), Failure> {
    let mut out = String::new();
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            if j > 0 {
                out.push(',');
            }
            out.push_str(&format!("{}", m[(i, j)]));
        }
        out.push('\n');
    }
    fs::write(path, out)
        .map_err(|e| Failure::Data(format!("cannot write {}: {e}", path.display())))
}

/// Create a file and hand a buffered writer to `f`, mapping I/O failures.
pub fn with_file<F>(path: &Path, f: F) -> Result<(), Failure>
where
    F: FnOnce(&mut std::io::BufWriter<fs::File>) -> Result<(), covshare::Error>,
{
    let file = fs::File::create(path)
        .map_err(|e| Failure::Data(format!("cannot create {}: {e}", path.display())))?;
    let mut writer = std::io::BufWriter::new(file);
    f(&mut writer).map_err(|e| Failure::Data(format!("writing {}: {e}", path.display())))?;
    writer
        .flush()
        .map_err(|e| Failure::Data(format!("writing {}: {e}", path.display())))
}
