//! End-to-end quantization of one linear layer into a [`PackedLayer`].

use alloc::vec;
use alloc::vec::Vec;

use crate::bitpack::{
    effective_scale, encode_scale_code, pack_layer, FourBitParams, LayerConfig, LogicalLayer,
    PackedLayer, SecondOrderParams,
};
use crate::error::{Error, Result};
use crate::matrix::{CalibrationVector, WeightMatrix};
use crate::outliers::{score_outliers, select_outliers, split_dense_sparse, CsrOutliers, OutlierBudget};
use crate::plan::{compute_amplitudes, ChannelPlan, GROUP, PAD};
use crate::quant::{quantize_scales_2order, quantize_value, step_to_half, zero_for_scale, GroupRange};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantConfig {
    /// Fraction of input channels kept at 4 bits.
    pub alpha: f64,
    /// First-order group size. The packed layout only supports 16.
    pub g1: usize,
    /// Rows sharing one set of second-order parameters.
    pub g2: usize,
    /// Second-order bit width, 2 to 4.
    pub n2: u32,
    /// Fraction of all weights moved to the sparse store.
    pub outlier_ratio: f64,
}

impl Default for QuantConfig {
    fn default() -> Self {
        Self {
            alpha: 0.25,
            g1: GROUP,
            g2: 16,
            n2: 4,
            outlier_ratio: 0.002,
        }
    }
}

impl QuantConfig {
    pub fn validate(&self) -> Result<()> {
        if self.g1 != GROUP {
            return Err(Error::InvalidConfig("g1 must be 16 for the packed layout"));
        }
        if self.g2 == 0 || self.g2 > u32::MAX as usize {
            return Err(Error::InvalidConfig("g2 must be between 1 and 2^32-1"));
        }
        if !(2..=4).contains(&self.n2) {
            return Err(Error::InvalidConfig("second-order bit width must be 2, 3 or 4"));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidAlpha(self.alpha));
        }
        OutlierBudget::new(self.outlier_ratio)?;
        Ok(())
    }

    fn layer_config(&self, plan: &ChannelPlan, rows: usize) -> LayerConfig {
        LayerConfig {
            n2: self.n2 as u8,
            g2: self.g2 as u32,
            in_channels: plan.in_channels() as u32,
            out_channels: rows as u32,
            pads: plan.pads() as u32,
            n4: plan.n4() as u32,
            alpha: self.alpha as f32,
            outlier_ratio: self.outlier_ratio as f32,
        }
    }
}

/// Plans channels, extracts outliers, quantizes both orders and packs.
pub fn quantize_layer(w: &WeightMatrix, h: &CalibrationVector, cfg: &QuantConfig) -> Result<PackedLayer> {
    cfg.validate()?;
    h.check_cols(w.cols())?;
    let amp = compute_amplitudes(w, h)?;
    let plan = ChannelPlan::build(&amp, cfg.alpha)?;
    let k = OutlierBudget::new(cfg.outlier_ratio)?.count(w.rows(), w.cols());
    if k == 0 {
        return quantize_with_plan(w, None, plan, CsrOutliers::empty(w.rows()), cfg);
    }
    let scores = score_outliers(w, h, &plan)?;
    let selection = select_outliers(&scores, k);
    let split = split_dense_sparse(w, &plan, &selection)?;
    quantize_with_plan(&split.dense, Some(&split.mask), plan, split.csr, cfg)
}

/// Quantizes `w` under a fixed plan. Slots set in `mask` (original
/// coordinates) are left out of every fit and coded at the zero point.
pub fn quantize_with_plan(
    w: &WeightMatrix,
    mask: Option<&[bool]>,
    plan: ChannelPlan,
    outliers: CsrOutliers,
    cfg: &QuantConfig,
) -> Result<PackedLayer> {
    cfg.validate()?;
    if w.rows() > u32::MAX as usize {
        return Err(Error::InvalidConfig("too many rows"));
    }
    if plan.in_channels() != w.cols() {
        return Err(Error::DimensionMismatch {
            what: "plan channels",
            expected: w.cols(),
            found: plan.in_channels(),
        });
    }
    if let Some(m) = mask {
        if m.len() != w.rows() * w.cols() {
            return Err(Error::DimensionMismatch {
                what: "outlier mask",
                expected: w.rows() * w.cols(),
                found: m.len(),
            });
        }
    }
    let config = cfg.layer_config(&plan, w.rows());
    let g = config.geometry();
    let (rows, cols) = (w.rows(), w.cols());
    let fwd = plan.permutation().forward();
    let n4 = g.n4();
    let mut logical = LogicalLayer::zeroed(&g);

    let mut permuted = vec![0.0f32; rows * g.padded_channels];
    let mut keep = vec![false; rows * g.padded_channels];
    // first-order 2-bit fit per (row, group): scale, lowest kept value, any nonzero
    let mut scales = vec![0.0f32; rows * g.two_bit_groups];
    let mut lows = vec![0.0f32; rows * g.two_bit_groups];
    let mut live = vec![false; rows * g.two_bit_groups];

    for r in 0..rows {
        let prow = &mut permuted[r * g.padded_channels..(r + 1) * g.padded_channels];
        let krow = &mut keep[r * g.padded_channels..(r + 1) * g.padded_channels];
        plan.permute_row(w.row(r), prow);
        for (k, &p) in fwd.iter().enumerate() {
            krow[k] = p != PAD && !mask.is_some_and(|m| m[r * cols + p as usize]);
        }
        for gi in 0..g.two_bit_groups {
            let span = gi * GROUP..(gi + 1) * GROUP;
            let kept = prow[span.clone()]
                .iter()
                .zip(&krow[span])
                .filter(|(_, &k)| k)
                .map(|(&v, _)| v);
            let i = r * g.two_bit_groups + gi;
            if let Some(range) = GroupRange::of(kept) {
                if range.min != 0.0 || range.max != 0.0 {
                    scales[i] = range.params(2)?.scale;
                    lows[i] = range.min;
                    live[i] = true;
                }
            }
        }
        for j in 0..g.four_bit_groups {
            let base = g.two_bit_slots + j * GROUP;
            let vals = &prow[base..base + GROUP];
            let range = GroupRange::of(vals.iter().copied()).ok_or(Error::EmptyGroup)?;
            let scale = step_to_half("4-bit scale", range.params(4)?.scale)?;
            let s = scale.to_f32();
            let zero = zero_for_scale(range.min, s, 4)?;
            for (i, &v) in vals.iter().enumerate() {
                logical.codes4[r * n4 + j * GROUP + i] = quantize_value(v, s, zero, 15);
            }
            logical.four_bit[r * g.four_bit_groups + j] = FourBitParams { scale, zero };
        }
    }

    let n2 = cfg.n2;
    let mut block_scales = Vec::with_capacity(cfg.g2);
    for b in 0..g.row_blocks {
        let block_rows = b * cfg.g2..((b + 1) * cfg.g2).min(rows);
        for gi in 0..g.two_bit_groups {
            block_scales.clear();
            block_scales.extend(block_rows.clone().map(|r| scales[r * g.two_bit_groups + gi]));
            let sq = quantize_scales_2order(&block_scales, n2)?;
            let params = SecondOrderParams {
                zero2: sq.zero2,
                scale2: sq.scale2,
            };
            logical.second_order[b * g.two_bit_groups + gi] = params;
            let s2 = sq.scale2.to_f32();
            let pos = gi % 3;
            for r in block_rows.clone() {
                let i = r * g.two_bit_groups + gi;
                let stored = encode_scale_code(pos, scales[i] / s2 + sq.zero2 as f32, n2);
                logical.scale_codes[i] = stored;
                let s = effective_scale(pos, stored, params);
                let span = r * g.padded_channels + gi * GROUP..r * g.padded_channels + (gi + 1) * GROUP;
                let codes = &mut logical.codes2[r * g.two_bit_slots + gi * GROUP..r * g.two_bit_slots + (gi + 1) * GROUP];
                if !live[i] || s <= 0.0 {
                    // the group reconstructs to zero
                    logical.zeros2[i] = 0;
                    codes.fill(0);
                    continue;
                }
                let zero = zero_for_scale(lows[i], s, 2)?;
                logical.zeros2[i] = zero;
                for ((c, &v), &k) in codes.iter_mut().zip(&permuted[span.clone()]).zip(&keep[span]) {
                    *c = if k { quantize_value(v, s, zero, 3) } else { zero };
                }
            }
        }
    }
    pack_layer(config, plan, &logical, outliers)
}
