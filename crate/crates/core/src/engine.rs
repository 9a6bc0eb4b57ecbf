//! Row decoding and matrix-vector products over a [`PackedLayer`].
//!
//! Every product accumulates one row at a time in a single accumulator,
//! permuted channels ascending (2-bit slots, pads, then 4-bit slots), with
//! a separate multiply and add per term. Outliers are added afterwards,
//! columns ascending. Callers that split the work differently still get the
//! same bits as long as they go through [`RowDecoder`] and [`dot_row`].

use alloc::vec;
use alloc::vec::Vec;

use crate::bitpack::{
    expand_scale_code, unpack_meta, unpack_nibbles, unpack_two_bit, Geometry, PackedLayer,
};
use crate::error::{Error, Result};
use crate::matrix::WeightMatrix;
use crate::plan::{GROUP, PAD, TWO_BIT_PER_TILE};
use crate::quant::{dequantize_scale, dequantize_value};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum Accumulation {
    #[default]
    F32,
    F64,
}

/// Second-order parameters of one row block, widened to f32.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    block: usize,
    zero2: Vec<u8>,
    scale2: Vec<f32>,
}

impl BlockParams {
    pub fn block(&self) -> usize {
        self.block
    }
}

/// Codes and first-order parameters of one row. Groups are listed 2-bit
/// first, then 4-bit, matching the permuted slot order.
#[derive(Debug, Clone, PartialEq)]
pub struct RowCodes {
    pub codes: Vec<u8>,
    pub zeros: Vec<u8>,
    pub scales: Vec<f32>,
}

/// Staged decoder for one layer:
/// 1. [`load_block`](Self::load_block) second-order params of a row block
/// 2. [`decode_row`](Self::decode_row) scales and codes of a row
/// 3. [`dequantize_row`](Self::dequantize_row) into f32 weights
#[derive(Debug, Clone, Copy)]
pub struct RowDecoder<'a> {
    layer: &'a PackedLayer,
    g: Geometry,
    g2: usize,
}

impl<'a> RowDecoder<'a> {
    pub fn new(layer: &'a PackedLayer) -> Self {
        Self {
            layer,
            g: layer.geometry(),
            g2: layer.config().g2 as usize,
        }
    }

    pub fn layer(&self) -> &'a PackedLayer {
        self.layer
    }

    pub fn geometry(&self) -> &Geometry {
        &self.g
    }

    pub fn block_of(&self, row: usize) -> usize {
        row / self.g2
    }

    pub fn block_params(&self) -> BlockParams {
        BlockParams {
            block: usize::MAX,
            zero2: vec![0; self.g.two_bit_groups],
            scale2: vec![0.0; self.g.two_bit_groups],
        }
    }

    pub fn row_codes(&self) -> RowCodes {
        let groups = self.g.two_bit_groups + self.g.four_bit_groups;
        RowCodes {
            codes: vec![0; self.g.padded_channels],
            zeros: vec![0; groups],
            scales: vec![0.0; groups],
        }
    }

    pub fn row_buffer(&self) -> Vec<f32> {
        vec![0.0; self.g.padded_channels]
    }

    pub fn load_block(&self, block: usize, out: &mut BlockParams) {
        let n = self.g.two_bit_groups;
        let src = &self.layer.streams().second_order[block * n..(block + 1) * n];
        for ((z, s), p) in out.zero2.iter_mut().zip(out.scale2.iter_mut()).zip(src) {
            *z = p.zero2;
            *s = p.scale2.to_f32();
        }
        out.block = block;
    }

    /// Loads the block for `row` unless `params` already holds it.
    #[inline]
    pub fn ensure_block(&self, row: usize, params: &mut BlockParams) {
        let b = self.block_of(row);
        if params.block != b {
            self.load_block(b, params);
        }
    }

    pub fn decode_row(&self, row: usize, params: &BlockParams, out: &mut RowCodes) {
        debug_assert_eq!(params.block, self.block_of(row));
        let g = &self.g;
        let s = self.layer.streams();
        let tails2 = g.two_bit_tiles - g.full_tiles;
        let tails4 = g.four_bit_groups - g.full_tiles;
        let (codes2, codes4) = out.codes.split_at_mut(g.two_bit_slots);
        for k in 0..g.two_bit_tiles {
            let (z, sc) = unpack_meta(s.meta[row * g.two_bit_tiles + k]);
            for p in 0..3 {
                let gi = 3 * k + p;
                out.zeros[gi] = z[p];
                out.scales[gi] = dequantize_scale(
                    expand_scale_code(p, sc[p]),
                    params.zero2[gi],
                    params.scale2[gi],
                );
            }
            let triple = &mut codes2[k * TWO_BIT_PER_TILE..(k + 1) * TWO_BIT_PER_TILE];
            if k < g.full_tiles {
                let i = row * g.full_tiles + k;
                let quad = &mut codes4[k * GROUP..(k + 1) * GROUP];
                unpack_two_bit(&s.main[i].0[..12], triple);
                unpack_nibbles(&s.main[i].0[12..], &mut quad[..8]);
                unpack_nibbles(&s.secondary[i].0, &mut quad[8..]);
            } else {
                unpack_two_bit(&s.tail2[row * tails2 + k - g.full_tiles].0, triple);
            }
        }
        for k in g.full_tiles..g.four_bit_groups {
            let block = &s.tail4[row * tails4 + k - g.full_tiles];
            unpack_nibbles(&block.0, &mut codes4[k * GROUP..(k + 1) * GROUP]);
        }
        let params4 = &s.four_bit[row * g.four_bit_groups..(row + 1) * g.four_bit_groups];
        for (j, p) in params4.iter().enumerate() {
            out.zeros[g.two_bit_groups + j] = p.zero;
            out.scales[g.two_bit_groups + j] = p.scale.to_f32();
        }
    }

    /// Weights of one row in permuted slot order. Outlier slots come out 0.
    pub fn dequantize_row(&self, codes: &RowCodes, out: &mut [f32]) {
        for (gi, (w, c)) in out
            .chunks_exact_mut(GROUP)
            .zip(codes.codes.chunks_exact(GROUP))
            .enumerate()
        {
            let (z, s) = (codes.zeros[gi], codes.scales[gi]);
            for (w, &c) in w.iter_mut().zip(c) {
                *w = dequantize_value(c, z, s);
            }
        }
    }

    /// Dequantizes `next` into `next_out` while accumulating `w . x` for the
    /// current row, one group at a time. The accumulation order is that of
    /// [`dot_row`], so the sum is bitwise identical; interleaving lets the
    /// independent dequantization hide behind the add chain.
    pub fn dequantize_overlapped(&self, next: &RowCodes, next_out: &mut [f32], w: &[f32], x: &[f32]) -> f32 {
        let mut acc = 0.0f32;
        let groups = next_out
            .chunks_exact_mut(GROUP)
            .zip(next.codes.chunks_exact(GROUP))
            .zip(w.chunks_exact(GROUP).zip(x.chunks_exact(GROUP)));
        for (gi, ((out, c), (w, x))) in groups.enumerate() {
            let (z, s) = (next.zeros[gi], next.scales[gi]);
            for (o, &c) in out.iter_mut().zip(c) {
                *o = dequantize_value(c, z, s);
            }
            for (&a, &b) in w.iter().zip(x) {
                acc += a * b;
            }
        }
        acc
    }

    /// Runs all three stages for one row.
    pub fn decode_into(&self, row: usize, params: &mut BlockParams, codes: &mut RowCodes, out: &mut [f32]) {
        self.ensure_block(row, params);
        self.decode_row(row, params, codes);
        self.dequantize_row(codes, out);
    }
}

/// Sequential dot product, index ascending.
#[inline]
pub fn dot_row(w: &[f32], x: &[f32]) -> f32 {
    let mut acc = 0.0f32;
    for (&a, &b) in w.iter().zip(x) {
        acc += a * b;
    }
    acc
}

#[inline]
pub fn dot_row_f64(w: &[f32], x: &[f32]) -> f64 {
    let mut acc = 0.0f64;
    for (&a, &b) in w.iter().zip(x) {
        acc += a as f64 * b as f64;
    }
    acc
}

/// Activation gathered into permuted order with pads as 0.
pub fn permute_activation(layer: &PackedLayer, x: &[f32]) -> Result<Vec<f32>> {
    if x.len() != layer.in_channels() {
        return Err(Error::DimensionMismatch {
            what: "activation length",
            expected: layer.in_channels(),
            found: x.len(),
        });
    }
    if let Some(index) = x.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index });
    }
    Ok(layer
        .plan()
        .permutation()
        .forward()
        .iter()
        .map(|&p| if p == PAD { 0.0 } else { x[p as usize] })
        .collect())
}

/// Final value of row `r` given its dequantized weights and the permuted
/// activation.
#[inline]
pub fn finish_row(layer: &PackedLayer, r: usize, w: &[f32], xp: &[f32]) -> f32 {
    layer.outliers().accumulate_row(r, xp, dot_row(w, xp))
}

/// Dense part only, permuted slot order, `rows x padded_channels`.
pub fn reconstruct_dense(layer: &PackedLayer) -> WeightMatrix {
    let dec = RowDecoder::new(layer);
    let g = *dec.geometry();
    let mut params = dec.block_params();
    let mut codes = dec.row_codes();
    let mut data = vec![0.0f32; g.rows * g.padded_channels];
    for (r, out) in data.chunks_exact_mut(g.padded_channels).enumerate() {
        dec.decode_into(r, &mut params, &mut codes, out);
    }
    WeightMatrix::new(g.rows, g.padded_channels, data).expect("decoded weights are finite")
}

/// Dense plus outliers in original channel order, `rows x in_channels`.
pub fn reconstruct_original(layer: &PackedLayer) -> WeightMatrix {
    let dense = reconstruct_dense(layer);
    let fwd = layer.plan().permutation().forward();
    let (rows, cols, padded) = (layer.rows(), layer.in_channels(), dense.cols());
    let mut data = vec![0.0f32; rows * cols];
    for r in 0..rows {
        let out = &mut data[r * cols..(r + 1) * cols];
        for (k, &p) in fwd.iter().enumerate() {
            if p != PAD {
                out[p as usize] = dense.data()[r * padded + k];
            }
        }
        for (c, v) in layer.outliers().row(r) {
            out[fwd[c] as usize] += v;
        }
    }
    WeightMatrix::new(rows, cols, data).expect("decoded weights are finite")
}

/// Row-by-row reference product. `x` is in original channel order.
pub fn matvec_oracle(layer: &PackedLayer, x: &[f32], acc: Accumulation) -> Result<Vec<f32>> {
    let xp = permute_activation(layer, x)?;
    let dec = RowDecoder::new(layer);
    let mut params = dec.block_params();
    let mut codes = dec.row_codes();
    let mut w = dec.row_buffer();
    let mut y = Vec::with_capacity(layer.rows());
    for r in 0..layer.rows() {
        dec.decode_into(r, &mut params, &mut codes, &mut w);
        y.push(match acc {
            Accumulation::F32 => finish_row(layer, r, &w, &xp),
            Accumulation::F64 => {
                let mut a = dot_row_f64(&w, &xp);
                for (c, v) in layer.outliers().row(r) {
                    a += v as f64 * xp[c] as f64;
                }
                a as f32
            }
        });
    }
    Ok(y)
}

/// Plain product of a dense matrix with `x`, same accumulation order.
pub fn dense_matvec(w: &WeightMatrix, x: &[f32]) -> Result<Vec<f32>> {
    if x.len() != w.cols() {
        return Err(Error::DimensionMismatch {
            what: "activation length",
            expected: w.cols(),
            found: x.len(),
        });
    }
    Ok((0..w.rows()).map(|r| dot_row(w.row(r), x)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bitpack::{expand_scale_code, unpack_layer};
    use crate::layer::{quantize_layer, QuantConfig};
    use crate::matrix::CalibrationVector;
    use crate::quant::{dequantize_scale, dequantize_value};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_layer(rows: usize, cols: usize, seed: u64, cfg: &QuantConfig) -> (WeightMatrix, PackedLayer) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = WeightMatrix::new(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap();
        let layer = quantize_layer(&w, &CalibrationVector::identity(cols), cfg).unwrap();
        (w, layer)
    }

    #[test]
    fn overlapped_step_matches_separate_stages() {
        let (_, layer) = random_layer(3, 200, 11, &QuantConfig::default());
        let dec = RowDecoder::new(&layer);
        let mut params = dec.block_params();
        let (mut c0, mut c1) = (dec.row_codes(), dec.row_codes());
        let (mut w0, mut w1, mut fused) = (dec.row_buffer(), dec.row_buffer(), dec.row_buffer());
        dec.decode_into(0, &mut params, &mut c0, &mut w0);
        dec.decode_into(1, &mut params, &mut c1, &mut w1);
        let x: Vec<f32> = (0..w0.len()).map(|i| (i as f32 * 0.7).cos()).collect();
        let acc = dec.dequantize_overlapped(&c1, &mut fused, &w0, &x);
        assert_eq!(acc.to_bits(), dot_row(&w0, &x).to_bits());
        assert_eq!(fused, w1);
    }

    /// Reconstruction through the logical form and scalar dequantizers.
    fn logical_oracle(layer: &PackedLayer) -> Vec<f32> {
        let l = unpack_layer(layer);
        let g = layer.geometry();
        let g2 = layer.config().g2 as usize;
        let mut out = Vec::new();
        for r in 0..g.rows {
            for k in 0..g.two_bit_slots {
                let gi = k / 16;
                let p = l.second_order[(r / g2) * g.two_bit_groups + gi];
                let code = expand_scale_code(gi % 3, l.scale_codes[r * g.two_bit_groups + gi]);
                let s = dequantize_scale(code, p.zero2, p.scale2.to_f32());
                out.push(dequantize_value(l.codes2[r * g.two_bit_slots + k], l.zeros2[r * g.two_bit_groups + gi], s));
            }
            for k in 0..g.n4() {
                let p = l.four_bit[r * g.four_bit_groups + k / 16];
                out.push(dequantize_value(l.codes4[r * g.n4() + k], p.zero, p.scale.to_f32()));
            }
        }
        out
    }

    #[test]
    fn reconstruction_matches_logical_oracle() {
        let (_, layer) = random_layer(64, 128, 1, &QuantConfig::default());
        let rec = reconstruct_dense(&layer);
        let oracle = logical_oracle(&layer);
        assert_eq!(rec.data().len(), oracle.len());
        for (a, b) in rec.data().iter().zip(&oracle) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn zero_activation_gives_zero() {
        let (_, layer) = random_layer(16, 64, 2, &QuantConfig::default());
        let y = matvec_oracle(&layer, &[0.0; 64], Accumulation::F32).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unit_activation_selects_column() {
        // 1.40625 = 3 * 15 * 2^-5, so both scale orders are exact
        let mut data = vec![0.0f32; 32 * 64];
        for r in 0..32 {
            data[r * 64 + r] = 1.40625;
        }
        let w = WeightMatrix::new(32, 64, data).unwrap();
        let cfg = QuantConfig { outlier_ratio: 0.0, ..Default::default() };
        let layer = quantize_layer(&w, &CalibrationVector::identity(64), &cfg).unwrap();
        for k in [0usize, 5, 15, 16, 20, 31, 40] {
            let mut x = vec![0.0f32; 64];
            x[k] = 1.0;
            let y = matvec_oracle(&layer, &x, Accumulation::F32).unwrap();
            for (r, &v) in y.iter().enumerate() {
                assert_eq!(v, w.get(r, k), "row {r} col {k}");
            }
        }
    }

    #[test]
    fn rejects_bad_activation() {
        let (_, layer) = random_layer(4, 64, 3, &QuantConfig::default());
        assert!(matvec_oracle(&layer, &[0.0; 63], Accumulation::F32).is_err());
        let mut x = vec![0.0; 64];
        x[9] = f32::INFINITY;
        assert_eq!(matvec_oracle(&layer, &x, Accumulation::F32).unwrap_err(), Error::NonFinite { index: 9 });
    }

    #[test]
    fn matches_dense_matvec_without_outliers() {
        let cfg = QuantConfig { outlier_ratio: 0.0, ..Default::default() };
        let (_, layer) = random_layer(32, 200, 4, &cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let x: Vec<f32> = (0..200).map(|_| rng.random_range(-1.0..1.0)).collect();
        let xp = permute_activation(&layer, &x).unwrap();
        let y = matvec_oracle(&layer, &x, Accumulation::F32).unwrap();
        let d = dense_matvec(&reconstruct_dense(&layer), &xp).unwrap();
        assert_eq!(y, d);
    }

    #[test]
    fn f32_close_to_f64_reference() {
        let (_, layer) = random_layer(64, 128, 5, &QuantConfig::default());
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let x: Vec<f32> = (0..128).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y = matvec_oracle(&layer, &x, Accumulation::F32).unwrap();
        let full = reconstruct_original(&layer);
        let mut num = 0.0f64;
        let mut den = 0.0f64;
        for (r, &v) in y.iter().enumerate() {
            let reference: f64 = full.row(r).iter().zip(&x).map(|(&a, &b)| a as f64 * b as f64).sum();
            num += (v as f64 - reference).powi(2);
            den += reference * reference;
        }
        assert!((num / den).sqrt() <= 1e-3);
    }

    #[test]
    fn original_order_includes_outliers() {
        let (w, layer) = random_layer(32, 128, 6, &QuantConfig { outlier_ratio: 0.01, ..Default::default() });
        let full = reconstruct_original(&layer);
        let fwd = layer.plan().permutation().forward();
        for r in 0..32 {
            for (c, v) in layer.outliers().row(r) {
                let col = fwd[c] as usize;
                assert_eq!(full.get(r, col), v);
                assert_eq!(v, half::f16::from_f32(w.get(r, col)).to_f32());
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn linear_in_activation(seed in any::<u64>(), a in 0.25f32..4.0) {
            let (_, layer) = random_layer(8, 96, seed, &QuantConfig::default());
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
            let x: Vec<f32> = (0..96).map(|_| rng.random_range(-1.0..1.0)).collect();
            let ax: Vec<f32> = x.iter().map(|v| v * a).collect();
            let y = matvec_oracle(&layer, &x, Accumulation::F32).unwrap();
            let ya = matvec_oracle(&layer, &ax, Accumulation::F32).unwrap();
            let diff: f64 = y.iter().zip(&ya).map(|(p, q)| ((p * a) as f64 - *q as f64).powi(2)).sum();
            let norm: f64 = ya.iter().map(|q| (*q as f64).powi(2)).sum();
            prop_assert!(diff.sqrt() <= 1e-6 * norm.sqrt());
            // powers of two scale exactly
            let y2 = matvec_oracle(&layer, &x.iter().map(|v| v * 4.0).collect::<Vec<_>>(), Accumulation::F32).unwrap();
            for (p, q) in y.iter().zip(&y2) {
                prop_assert_eq!(p * 4.0, *q);
            }
        }
    }
}
