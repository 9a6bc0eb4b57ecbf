//! Bit accounting, reconstruction error and group range statistics.

use alloc::vec;
use alloc::vec::Vec;

use crate::bitpack::PackedLayer;
use crate::engine::reconstruct_dense;
use crate::error::{Error, Result};
use crate::matrix::WeightMatrix;
use crate::outliers::OUTLIER_BITS;
use crate::plan::{ChannelPlan, GROUP, PAD};
use crate::quant::GroupRange;

/// Bits per weight with one scale and zero per group, both stored with the
/// scale at 16 bits: `N + (N + 16) / g1`.
pub fn avg_bit_1order(n: u32, g1: u32) -> f64 {
    n as f64 + (n as f64 + 16.0) / g1 as f64
}

/// Bits per weight when scales are quantized again over `g2` groups:
/// `N + (N + N2) / g1 + (N2 + 16) / (g1 * g2)`.
pub fn avg_bit_2order(n: u32, n2: u32, g1: u32, g2: u32) -> f64 {
    let (n, n2, g1, g2) = (n as f64, n2 as f64, g1 as f64, g2 as f64);
    n + (n + n2) / g1 + (n2 + 16.0) / (g1 * g2)
}

/// Mixed layout where a fraction `alpha` of channels is 2-bit with
/// second-order scales and the rest is charged a flat 4 bits.
pub fn avg_bit_mixed(alpha: f64, n2: u32, g1: u32, g2: u32) -> f64 {
    alpha * avg_bit_2order(2, n2, g1, g2) + (1.0 - alpha) * 4.0
}

/// Sparse outliers cost a 16-bit value and a 16-bit index minus the 2 bits
/// the dense slot would have taken.
pub fn outlier_overhead(ratio: f64) -> f64 {
    OUTLIER_BITS * ratio
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BitComponent {
    pub name: &'static str,
    pub bits: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BitReport {
    pub formula_bit_1order: f64,
    pub formula_bit_2order: f64,
    pub formula_bit_mixed: f64,
    pub outlier_overhead_bit: f64,
    pub actual_container_bit: f64,
    /// Real weights, pads excluded.
    pub weights: u64,
    pub components: Vec<BitComponent>,
}

impl BitReport {
    pub fn total_bits(&self) -> u64 {
        self.components.iter().map(|c| c.bits).sum()
    }

    pub fn component_bit(&self, c: &BitComponent) -> f64 {
        c.bits as f64 / self.weights as f64
    }

    /// Bits per weight of everything except the sparse store.
    pub fn dense_bit(&self) -> f64 {
        let dense: u64 = self
            .components
            .iter()
            .filter(|c| !c.name.starts_with("csr_"))
            .map(|c| c.bits)
            .sum();
        dense as f64 / self.weights as f64
    }
}

/// Payload bits of every stored stream, itemized. The channel plan itself is
/// not counted.
pub fn payload_components(layer: &PackedLayer) -> Vec<BitComponent> {
    let s = layer.streams();
    let csr = layer.outliers();
    let row_ptr = if csr.nnz() == 0 { 0 } else { csr.row_ptr().len() as u64 * 32 };
    vec![
        BitComponent { name: "main", bits: s.main.len() as u64 * 128 },
        BitComponent { name: "secondary", bits: s.secondary.len() as u64 * 32 },
        BitComponent { name: "tail2", bits: s.tail2.len() as u64 * 96 },
        BitComponent { name: "tail4", bits: s.tail4.len() as u64 * 64 },
        BitComponent { name: "meta", bits: s.meta.len() as u64 * 16 },
        BitComponent { name: "second_order", bits: s.second_order.len() as u64 * 24 },
        BitComponent { name: "four_bit_params", bits: s.four_bit.len() as u64 * 24 },
        BitComponent { name: "csr_row_ptr", bits: row_ptr },
        BitComponent { name: "csr_col_ind", bits: csr.col_ind().len() as u64 * 16 },
        BitComponent { name: "csr_values", bits: csr.values().len() as u64 * 16 },
    ]
}

pub fn storage_bits_actual(layer: &PackedLayer) -> BitReport {
    let cfg = layer.config();
    let plan = layer.plan();
    let components = payload_components(layer);
    let weights = layer.rows() as u64 * layer.in_channels() as u64;
    let total: u64 = components.iter().map(|c| c.bits).sum();
    let (n2, g1, g2) = (cfg.n2 as u32, GROUP as u32, cfg.g2);
    let two_bit_fraction = plan.two_bit_channels() as f64 / plan.in_channels() as f64;
    BitReport {
        formula_bit_1order: avg_bit_1order(2, g1),
        formula_bit_2order: avg_bit_2order(2, n2, g1, g2),
        formula_bit_mixed: avg_bit_mixed(two_bit_fraction, n2, g1, g2),
        outlier_overhead_bit: outlier_overhead(layer.outliers().nnz() as f64 / weights as f64),
        actual_container_bit: total as f64 / weights as f64,
        weights,
        components,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupError {
    pub row: usize,
    pub group: usize,
    pub mse: f64,
    pub max_abs_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorStats {
    pub mse: f64,
    pub max_abs_err: f64,
    /// One entry per permuted group of 16 with at least one real channel.
    pub groups: Vec<GroupError>,
}

/// Error of the full reconstruction (dense plus outliers) against `w` over
/// real channels.
pub fn quant_error_stats(w: &WeightMatrix, layer: &PackedLayer) -> Result<ErrorStats> {
    if w.rows() != layer.rows() || w.cols() != layer.in_channels() {
        return Err(Error::DimensionMismatch {
            what: "weight shape",
            expected: layer.rows() * layer.in_channels(),
            found: w.rows() * w.cols(),
        });
    }
    let mut rec = reconstruct_dense(layer);
    let padded = rec.cols();
    for r in 0..layer.rows() {
        let row = &mut rec.data_mut()[r * padded..(r + 1) * padded];
        for (c, v) in layer.outliers().row(r) {
            row[c] += v;
        }
    }
    let fwd = layer.plan().permutation().forward();
    let (mut sum, mut max, mut count) = (0.0f64, 0.0f64, 0usize);
    let mut groups = Vec::new();
    for r in 0..w.rows() {
        let row = w.row(r);
        for (gi, chunk) in fwd.chunks_exact(GROUP).enumerate() {
            let (mut gs, mut gm, mut gn) = (0.0f64, 0.0f64, 0usize);
            for (i, &p) in chunk.iter().enumerate() {
                if p == PAD {
                    continue;
                }
                let d = (rec.get(r, gi * GROUP + i) as f64 - row[p as usize] as f64).abs();
                gs += d * d;
                gm = gm.max(d);
                gn += 1;
            }
            if gn == 0 {
                continue;
            }
            sum += gs;
            max = max.max(gm);
            count += gn;
            groups.push(GroupError {
                row: r,
                group: gi,
                mse: gs / gn as f64,
                max_abs_err: gm,
            });
        }
    }
    Ok(ErrorStats {
        mse: sum / count as f64,
        max_abs_err: max,
        groups,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupRangeEntry {
    pub row: usize,
    pub group: usize,
    pub min: f32,
    pub max: f32,
    pub range: f32,
}

/// `(max - min)` of every permuted group of `g1` real channels.
pub fn group_range_report(w: &WeightMatrix, plan: &ChannelPlan, g1: usize) -> Result<Vec<GroupRangeEntry>> {
    if g1 == 0 {
        return Err(Error::InvalidConfig("group size must be at least 1"));
    }
    if w.cols() != plan.in_channels() {
        return Err(Error::DimensionMismatch {
            what: "plan channels",
            expected: w.cols(),
            found: plan.in_channels(),
        });
    }
    let fwd = plan.permutation().forward();
    let mut out = Vec::with_capacity(w.rows() * fwd.len().div_ceil(g1));
    for r in 0..w.rows() {
        let row = w.row(r);
        for (group, chunk) in fwd.chunks(g1).enumerate() {
            let vals = chunk.iter().filter(|&&p| p != PAD).map(|&p| row[p as usize]);
            if let Some(range) = GroupRange::of(vals) {
                out.push(GroupRangeEntry {
                    row: r,
                    group,
                    min: range.min,
                    max: range.max,
                    range: range.span(),
                });
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

/// Equal-width histogram of group ranges over `[0, max range]`. When every
/// range is zero the result is one bin.
pub fn range_histogram(entries: &[GroupRangeEntry], bins: usize) -> Result<Vec<HistogramBin>> {
    if bins == 0 {
        return Err(Error::InvalidConfig("histogram needs at least one bin"));
    }
    let top = entries.iter().map(|e| e.range as f64).fold(0.0, f64::max);
    if top == 0.0 {
        return Ok(vec![HistogramBin { lo: 0.0, hi: 0.0, count: entries.len() }]);
    }
    let width = top / bins as f64;
    let mut hist: Vec<HistogramBin> = (0..bins)
        .map(|i| HistogramBin {
            lo: i as f64 * width,
            hi: if i + 1 == bins { top } else { (i + 1) as f64 * width },
            count: 0,
        })
        .collect();
    for e in entries {
        let i = ((e.range as f64 / width) as usize).min(bins - 1);
        hist[i].count += 1;
    }
    Ok(hist)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layer::{quantize_layer, QuantConfig};
    use crate::matrix::CalibrationVector;
    use crate::plan::{compute_amplitudes, ChannelPlan};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn formula_points() {
        assert_eq!(avg_bit_1order(2, 16), 3.125);
        assert_eq!(avg_bit_1order(2, 1), 20.0);
        assert_eq!(avg_bit_2order(2, 4, 16, 16), 2.453125);
        assert_eq!(avg_bit_2order(2, 4, 16, 1), 3.625);
        assert_eq!(avg_bit_mixed(0.75, 4, 16, 16), 2.83984375);
        assert_eq!(avg_bit_mixed(1.0, 4, 16, 16), avg_bit_2order(2, 4, 16, 16));
        assert_eq!(avg_bit_mixed(0.0, 4, 16, 16), 4.0);
        assert_eq!(outlier_overhead(0.002), 0.06);
        assert_eq!(outlier_overhead(0.01), 0.3);
        assert_eq!(outlier_overhead(0.0), 0.0);
    }

    #[test]
    fn formula_limits() {
        let mut prev = f64::INFINITY;
        for g1 in [1, 2, 16, 256, 1 << 20] {
            let b = avg_bit_1order(4, g1);
            assert!(b < prev && b > 4.0);
            prev = b;
        }
        assert!((avg_bit_2order(2, 4, 16, 1 << 30) - 2.375).abs() < 1e-8);
        let mut prev = f64::INFINITY;
        for a in 0..=20 {
            let b = avg_bit_mixed(a as f64 / 20.0, 4, 16, 16);
            assert!(b < prev);
            prev = b;
        }
    }

    fn gaussian_like(rows: usize, cols: usize, seed: u64) -> WeightMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        WeightMatrix::new(rows, cols, (0..rows * cols).map(|_| rng.random_range(-0.05f32..0.05)).collect()).unwrap()
    }

    #[test]
    fn container_bits_64x64() {
        let w = gaussian_like(64, 64, 1);
        let cfg = QuantConfig { outlier_ratio: 0.0, ..Default::default() };
        let layer = quantize_layer(&w, &CalibrationVector::identity(64), &cfg).unwrap();
        let report = storage_bits_actual(&layer);
        assert_eq!(report.actual_container_bit, 204.5 / 64.0);
        assert_eq!(report.total_bits(), 13088);
        assert_eq!(report.outlier_overhead_bit, 0.0);
        let sum: f64 = report.components.iter().map(|c| report.component_bit(c)).sum();
        assert!((sum - report.actual_container_bit).abs() < 1e-12);
    }

    #[test]
    fn outliers_add_csr_bits() {
        let w = gaussian_like(64, 1024, 2);
        let h = CalibrationVector::identity(1024);
        let base = storage_bits_actual(&quantize_layer(&w, &h, &QuantConfig { outlier_ratio: 0.0, ..Default::default() }).unwrap());
        let layer = quantize_layer(&w, &h, &QuantConfig::default()).unwrap();
        let with = storage_bits_actual(&layer);
        let nnz = layer.outliers().nnz() as f64;
        assert_eq!(nnz, 131.0);
        let expected = (32.0 * nnz + 32.0 * 65.0) / (64.0 * 1024.0);
        assert!((with.actual_container_bit - base.actual_container_bit - expected).abs() < 1e-12);
        assert_eq!(with.dense_bit(), base.actual_container_bit);
    }

    #[test]
    fn pure_two_bit_payload() {
        let w = gaussian_like(32, 96, 3);
        let cfg = QuantConfig { alpha: 0.0, outlier_ratio: 0.0, ..Default::default() };
        let report = storage_bits_actual(&quantize_layer(&w, &CalibrationVector::identity(96), &cfg).unwrap());
        let codes: u64 = report
            .components
            .iter()
            .filter(|c| matches!(c.name, "main" | "secondary" | "tail2" | "tail4"))
            .map(|c| c.bits)
            .sum();
        assert_eq!(codes, 2 * 32 * 96);
    }

    #[test]
    fn exact_layer_has_zero_error() {
        let w = WeightMatrix::zeros(16, 64).unwrap();
        let layer = quantize_layer(&w, &CalibrationVector::identity(64), &QuantConfig::default()).unwrap();
        let stats = quant_error_stats(&w, &layer).unwrap();
        assert_eq!((stats.mse, stats.max_abs_err), (0.0, 0.0));
        assert_eq!(stats.groups.len(), 16 * 4);
        assert!(quant_error_stats(&WeightMatrix::zeros(16, 65).unwrap(), &layer).is_err());
    }

    #[test]
    fn constant_groups_single_bin() {
        let w = WeightMatrix::new(4, 64, vec![0.7; 256]).unwrap();
        let plan = ChannelPlan::build(&compute_amplitudes(&w, &CalibrationVector::identity(64)).unwrap(), 0.25).unwrap();
        let entries = group_range_report(&w, &plan, 16).unwrap();
        assert_eq!(entries.len(), 16);
        assert!(entries.iter().all(|e| e.range == 0.0));
        let hist = range_histogram(&entries, 10).unwrap();
        assert_eq!(hist.len(), 1);
        assert_eq!(hist[0].count, 16);
    }

    #[test]
    fn histogram_counts_everything() {
        let w = gaussian_like(8, 100, 4);
        let plan = ChannelPlan::build(&compute_amplitudes(&w, &CalibrationVector::identity(100)).unwrap(), 0.25).unwrap();
        let entries = group_range_report(&w, &plan, 16).unwrap();
        let hist = range_histogram(&entries, 7).unwrap();
        assert_eq!(hist.len(), 7);
        assert_eq!(hist.iter().map(|b| b.count).sum::<usize>(), entries.len());
        assert!(range_histogram(&entries, 0).is_err());
    }
}
