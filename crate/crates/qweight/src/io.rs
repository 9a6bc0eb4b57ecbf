//! Raw little-endian f32 files.

use std::fs;
use std::path::Path;

use qweight_core::{CalibrationVector, WeightMatrix};

use crate::error::{Error, Result};

pub fn read_f32(path: &Path) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Input(format!(
            "{}: length {} is not a multiple of 4",
            path.display(),
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub fn write_f32(path: &Path, values: &[f32]) -> Result<()> {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Row-major `rows x cols` matrix.
pub fn load_weights(path: &Path, rows: usize, cols: usize) -> Result<WeightMatrix> {
    let data = read_f32(path)?;
    if data.len() != rows * cols {
        return Err(qweight_core::Error::DimensionMismatch {
            what: "weight file elements",
            expected: rows * cols,
            found: data.len(),
        }
        .into());
    }
    Ok(WeightMatrix::new(rows, cols, data)?)
}

pub fn load_calibration(path: &Path, cols: usize) -> Result<CalibrationVector> {
    let h = CalibrationVector::new(read_f32(path)?)?;
    if h.len() != cols {
        return Err(qweight_core::Error::DimensionMismatch {
            what: "calibration length",
            expected: cols,
            found: h.len(),
        }
        .into());
    }
    Ok(h)
}
