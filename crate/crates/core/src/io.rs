//! JSON and CSV interchange formats.
//!
//! Square matrices travel as `{"kappa": n, "entries": [[..], ..]}` in
//! row-major order; rectangular ones as `{"rows": r, "cols": c, "entries":
//! [[..], ..]}`. CSV output uses `.` as the decimal separator and 17
//! significant digits so values round-trip exactly.

use std::fmt::Write as _;
use std::io::Write;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Formats a float with 17 significant digits.
pub fn fmt_sig17(x: f64) -> String {
    format!("{x:.16e}")
}

/// Square matrix in row-major JSON form.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SquareMatrixJson {
    pub kappa: usize,
    pub entries: Vec<Vec<f64>>,
}

impl SquareMatrixJson {
    pub fn from_matrix(m: &DMatrix<f64>) -> Self {
        assert_eq!(m.nrows(), m.ncols(), "square schema needs a square matrix");
        Self {
            kappa: m.nrows(),
            entries: matrix_rows(m),
        }
    }

    pub fn to_matrix(&self) -> Result<DMatrix<f64>> {
        let m = matrix_from_rows(&self.entries)?;
        if m.nrows() != self.kappa || m.ncols() != self.kappa {
            return Err(Error::DimensionMismatch(format!(
                "kappa {} does not match {}x{} entries",
                self.kappa,
                m.nrows(),
                m.ncols()
            )));
        }
        Ok(m)
    }
}

/// Rectangular matrix in row-major JSON form.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixJson {
    pub rows: usize,
    pub cols: usize,
    pub entries: Vec<Vec<f64>>,
}

impl MatrixJson {
    pub fn from_matrix(m: &DMatrix<f64>) -> Self {
        Self {
            rows: m.nrows(),
            cols: m.ncols(),
            entries: matrix_rows(m),
        }
    }

    pub fn to_matrix(&self) -> Result<DMatrix<f64>> {
        let m = matrix_from_rows(&self.entries)?;
        if m.nrows() != self.rows || m.ncols() != self.cols {
            return Err(Error::DimensionMismatch(format!(
                "declared {}x{} does not match {}x{} entries",
                self.rows,
                self.cols,
                m.nrows(),
                m.ncols()
            )));
        }
        Ok(m)
    }
}

pub fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

pub fn matrix_from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    if rows.is_empty() {
        return Err(Error::DimensionMismatch("matrix has no rows".into()));
    }
    let ncols = rows[0].len();
    if ncols == 0 {
        return Err(Error::DimensionMismatch("matrix has empty rows".into()));
    }
    for (i, r) in rows.iter().enumerate() {
        if r.len() != ncols {
            return Err(Error::DimensionMismatch(format!(
                "row {i} has {} entries, expected {ncols}",
                r.len()
            )));
        }
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

/// Writes a matrix as CSV, one line per matrix row.
pub fn write_matrix_csv<W: Write>(mut w: W, m: &DMatrix<f64>) -> Result<()> {
    for i in 0..m.nrows() {
        let mut line = String::new();
        for j in 0..m.ncols() {
            if j > 0 {
                line.push(',');
            }
            let _ = write!(line, "{}", fmt_sig17(m[(i, j)]));
        }
        writeln!(w, "{line}")?;
    }
    Ok(())
}
