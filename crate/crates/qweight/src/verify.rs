//! Consistency checks of a packed layer against the weights it came from.

use half::f16;
use qweight_core::engine::{permute_activation, RowDecoder};
use qweight_core::plan::{GROUP, PAD};
use qweight_core::quant::GroupRange;
use qweight_core::{matvec_oracle, reconstruct_dense, Accumulation, PackedLayer, WeightMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::container;
use crate::error::{Error, Result};
use crate::pipeline::matvec_pipelined;

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct VerifyReport {
    pub checks: Vec<Check>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    fn push(&mut self, name: &'static str, failure: Option<String>) {
        self.checks.push(Check {
            name,
            passed: failure.is_none(),
            detail: failure.unwrap_or_else(|| "ok".into()),
        });
    }
}

/// Worst-case reconstruction error of a group with observed range
/// `[lo, hi]` coded on `0..=q` with effective step `s_hat`.
pub fn error_bound(range: GroupRange, q: f32, s_hat: f32) -> f32 {
    let lo = range.min.min(0.0) as f64;
    let hi = range.max.max(0.0) as f64;
    let s = (hi - lo) / q as f64;
    let s_hat = s_hat.max(0.0) as f64;
    let bound = s_hat / 2.0 + q as f64 * (s - s_hat).max(0.0);
    (bound + 1e-5 * (hi - lo + s_hat)) as f32
}

fn check_dims(layer: &PackedLayer, w: &WeightMatrix) -> Result<()> {
    if layer.rows() != w.rows() || layer.in_channels() != w.cols() {
        return Err(qweight_core::Error::DimensionMismatch {
            what: "original weights",
            expected: layer.rows() * layer.in_channels(),
            found: w.rows() * w.cols(),
        }
        .into());
    }
    Ok(())
}

fn reconstruction_bound(layer: &PackedLayer, w: &WeightMatrix) -> Option<String> {
    let dec = RowDecoder::new(layer);
    let g = *dec.geometry();
    let fwd = layer.plan().permutation().forward();
    let mut params = dec.block_params();
    let mut codes = dec.row_codes();
    let mut rec = dec.row_buffer();
    let mut outlier = vec![false; g.padded_channels];
    for r in 0..g.rows {
        dec.decode_into(r, &mut params, &mut codes, &mut rec);
        outlier.fill(false);
        layer.outliers().row(r).for_each(|(c, _)| outlier[c] = true);
        for (gi, slots) in fwd.chunks_exact(GROUP).enumerate() {
            let base = gi * GROUP;
            let q = if gi < g.two_bit_groups { 3.0 } else { 15.0 };
            let kept = || {
                slots
                    .iter()
                    .enumerate()
                    .filter(|&(i, &p)| p != PAD && !outlier[base + i])
                    .map(|(i, &p)| (base + i, w.get(r, p as usize)))
            };
            if let Some((k, _)) = slots.iter().enumerate().find(|&(i, &p)| {
                (p == PAD || outlier[base + i]) && rec[base + i] != 0.0
            }) {
                return Some(format!("row {r} slot {} should decode to 0", base + k));
            }
            let Some(range) = GroupRange::of(kept().map(|(_, v)| v)) else {
                continue;
            };
            let bound = error_bound(range, q, codes.scales[gi]);
            for (k, v) in kept() {
                let err = (rec[k] - v).abs();
                if err > bound {
                    return Some(format!("row {r} slot {k}: error {err} exceeds bound {bound}"));
                }
            }
        }
    }
    None
}

fn outlier_additivity(layer: &PackedLayer, w: &WeightMatrix) -> Option<String> {
    let dense = reconstruct_dense(layer);
    let fwd = layer.plan().permutation().forward();
    for r in 0..layer.rows() {
        for (c, v) in layer.outliers().row(r) {
            if dense.get(r, c) != 0.0 {
                return Some(format!("dense slot ({r}, {c}) is {} not 0", dense.get(r, c)));
            }
            let original = w.get(r, fwd[c] as usize);
            if v != f16::from_f32(original).to_f32() {
                return Some(format!("outlier ({r}, {c}) stores {v}, original {original}"));
            }
        }
    }
    None
}

fn oracle_equivalence(layer: &PackedLayer) -> Result<Option<String>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let x: Vec<f32> = (0..layer.in_channels()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let y = matvec_oracle(layer, &x, Accumulation::F32)?;
    for workers in [1, 2, 8] {
        let p = matvec_pipelined(layer, &x, workers)?;
        if p.y.iter().zip(&y).any(|(a, b)| a.to_bits() != b.to_bits()) {
            return Ok(Some(format!("{workers} workers differ from the sequential product")));
        }
    }
    let y64 = f64_reference(layer, &x)?;
    let rel = relative_error(&y, &y64);
    if rel > 1e-3 {
        return Ok(Some(format!("relative error {rel:e} against f64 reference")));
    }
    Ok(None)
}

/// Dense reconstruction plus outliers, multiplied in f64.
pub fn f64_reference(layer: &PackedLayer, x: &[f32]) -> Result<Vec<f64>> {
    let xp = permute_activation(layer, x)?;
    let dense = reconstruct_dense(layer);
    Ok((0..layer.rows())
        .map(|r| {
            let mut acc: f64 = dense.row(r).iter().zip(&xp).map(|(&a, &b)| a as f64 * b as f64).sum();
            for (c, v) in layer.outliers().row(r) {
                acc += v as f64 * xp[c] as f64;
            }
            acc
        })
        .collect())
}

/// `||y - reference|| / ||reference||`, 0 when both vanish.
pub fn relative_error(y: &[f32], reference: &[f64]) -> f64 {
    let num: f64 = y.iter().zip(reference).map(|(&a, &b)| (a as f64 - b).powi(2)).sum();
    let den: f64 = reference.iter().map(|b| b * b).sum();
    if den == 0.0 {
        if num == 0.0 { 0.0 } else { f64::INFINITY }
    } else {
        (num / den).sqrt()
    }
}

/// Decodes `bytes` and checks it against `original`. Integrity failures of
/// the container are reported as a failed check; shape mismatches are errors.
pub fn verify(bytes: &[u8], original: &WeightMatrix) -> Result<VerifyReport> {
    let mut report = VerifyReport::default();
    let layer = match container::decode(bytes) {
        Ok(l) => l,
        Err(e @ (Error::Truncated { .. } | Error::ChecksumMismatch { .. } | Error::InconsistentSection { .. })) => {
            report.push("container", Some(e.to_string()));
            return Ok(report);
        }
        Err(e) => return Err(e),
    };
    check_dims(&layer, original)?;
    report.push(
        "container",
        (container::encode(&layer) != bytes).then(|| "re-encoding changes the bytes".into()),
    );
    report.push("reconstruction_bound", reconstruction_bound(&layer, original));
    report.push("outlier_additivity", outlier_additivity(&layer, original));
    report.push("oracle_equivalence", oracle_equivalence(&layer)?);
    Ok(report)
}
