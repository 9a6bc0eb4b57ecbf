use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Dense row-major weight matrix: `rows` output channels by `cols` input channels.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl WeightMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidConfig("matrix dimensions must be at least 1"));
        }
        let expected = rows
            .checked_mul(cols)
            .ok_or(Error::InvalidConfig("matrix dimensions overflow"))?;
        if data.len() != expected {
            return Err(Error::DimensionMismatch {
                what: "matrix element count",
                expected,
                found: data.len(),
            });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Result<Self> {
        Self::new(rows, cols, vec![0.0; rows * cols])
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.cols + col]
    }

    #[inline]
    pub fn row(&self, row: usize) -> &[f32] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }
}

/// Per-input-channel Hessian-inverse diagonal used to weight amplitudes and residuals.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationVector {
    h: Vec<f32>,
}

impl CalibrationVector {
    pub fn new(h: Vec<f32>) -> Result<Self> {
        if h.is_empty() {
            return Err(Error::InvalidConfig("calibration vector is empty"));
        }
        for (index, v) in h.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite { index });
            }
            if *v <= 0.0 {
                return Err(Error::NonPositiveCalibration { index });
            }
        }
        Ok(Self { h })
    }

    pub fn identity(cols: usize) -> Self {
        Self { h: vec![1.0; cols] }
    }

    pub fn len(&self) -> usize {
        self.h.len()
    }

    pub fn is_empty(&self) -> bool {
        self.h.is_empty()
    }

    pub fn values(&self) -> &[f32] {
        &self.h
    }

    pub(crate) fn check_cols(&self, cols: usize) -> Result<()> {
        if self.h.len() != cols {
            return Err(Error::DimensionMismatch {
                what: "calibration length",
                expected: cols,
                found: self.h.len(),
            });
        }
        Ok(())
    }
}
