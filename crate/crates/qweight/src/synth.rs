//! Seeded synthetic weights.

use qweight_core::WeightMatrix;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

pub const DEFAULT_SIGMA: f32 = 0.02;

pub fn gaussian(rows: usize, cols: usize, sigma: f32, seed: u64) -> Result<WeightMatrix> {
    let normal = Normal::new(0.0f32, sigma).map_err(|e| Error::Input(format!("sigma {sigma}: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols).map(|_| normal.sample(&mut rng)).collect();
    Ok(WeightMatrix::new(rows, cols, data)?)
}

/// Overwrites `count` distinct positions with `±magnitude * (1 + u)`,
/// `u` uniform in `[0, 1)`. When `columns` is given only those columns are
/// used. Returns the planted `(row, col)` pairs, ascending.
pub fn plant_outliers(
    w: &WeightMatrix,
    count: usize,
    magnitude: f32,
    columns: Option<&[usize]>,
    seed: u64,
) -> Result<(WeightMatrix, Vec<(usize, usize)>)> {
    let cols: Vec<usize> = match columns {
        Some(c) => c.to_vec(),
        None => (0..w.cols()).collect(),
    };
    let slots = w.rows() * cols.len();
    if count > slots {
        return Err(Error::Input(format!("cannot plant {count} outliers in {slots} slots")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<(usize, usize)> = sample(&mut rng, slots, count)
        .into_iter()
        .map(|i| (i / cols.len(), cols[i % cols.len()]))
        .collect();
    picked.sort_unstable();
    let mut data = w.data().to_vec();
    for &(r, c) in &picked {
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        data[r * w.cols() + c] = sign * magnitude * (1.0 + rng.random::<f32>());
    }
    Ok((WeightMatrix::new(w.rows(), w.cols(), data)?, picked))
}
