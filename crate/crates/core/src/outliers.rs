//! Sparse outliers: scoring, budgeted selection, dense/sparse split and the
//! CSR store (16-bit values, 16-bit permuted column indices, 32-bit row
//! pointers).

use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use half::f16;

use crate::error::{Error, Result};
use crate::matrix::{CalibrationVector, WeightMatrix};
use crate::plan::{BitWidth, ChannelPlan, GROUP, PAD};
use crate::quant::{dequantize_value, max_code, quantize_value, GroupRange};

/// Storage bits per outlier (value + column index) minus the 2-bit code it
/// displaces.
pub const OUTLIER_BITS: f64 = (16 + 16 - 2) as f64;

#[derive(Debug, Clone, PartialEq)]
pub struct CsrOutliers {
    row_ptr: Vec<u32>,
    col_ind: Vec<u16>,
    values: Vec<f16>,
}

impl CsrOutliers {
    pub fn empty(rows: usize) -> Self {
        Self {
            row_ptr: vec![0; rows + 1],
            col_ind: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Validates structure only; eligibility against a plan is checked by
    /// [`CsrOutliers::check_plan`].
    pub fn from_parts(row_ptr: Vec<u32>, col_ind: Vec<u16>, values: Vec<f16>) -> Result<Self> {
        if row_ptr.is_empty() || row_ptr[0] != 0 {
            return Err(Error::InvalidLayer("row_ptr must start at 0"));
        }
        if row_ptr.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::InvalidLayer("row_ptr must be nondecreasing"));
        }
        let nnz = *row_ptr.last().unwrap() as usize;
        if col_ind.len() != nnz || values.len() != nnz {
            return Err(Error::InvalidLayer("CSR array lengths disagree with row_ptr"));
        }
        for w in row_ptr.windows(2) {
            let cols = &col_ind[w[0] as usize..w[1] as usize];
            if cols.windows(2).any(|c| c[0] >= c[1]) {
                return Err(Error::InvalidLayer("CSR columns must be strictly increasing per row"));
            }
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidLayer("CSR value is not finite"));
        }
        Ok(Self {
            row_ptr,
            col_ind,
            values,
        })
    }

    /// Every column is a real 2-bit channel of `plan` and the row count matches.
    pub fn check_plan(&self, plan: &ChannelPlan, rows: usize) -> Result<()> {
        if self.rows() != rows {
            return Err(Error::InvalidLayer("CSR row count differs from layer rows"));
        }
        let limit = plan.two_bit_channels();
        if self.col_ind.iter().any(|&c| c as usize >= limit) {
            return Err(Error::InvalidLayer("CSR column outside real 2-bit channels"));
        }
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.row_ptr.len() - 1
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row_ptr(&self) -> &[u32] {
        &self.row_ptr
    }

    pub fn col_ind(&self) -> &[u16] {
        &self.col_ind
    }

    pub fn values(&self) -> &[f16] {
        &self.values
    }

    /// `(permuted column, value)` pairs of one row, columns ascending.
    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f32)> + '_ {
        let (a, b) = (self.row_ptr[r] as usize, self.row_ptr[r + 1] as usize);
        self.col_ind[a..b]
            .iter()
            .zip(&self.values[a..b])
            .map(|(&c, v)| (c as usize, v.to_f32()))
    }

    /// Adds row `r`'s contribution to `acc` in ascending column order.
    #[inline]
    pub fn accumulate_row(&self, r: usize, x: &[f32], mut acc: f32) -> f32 {
        for (c, v) in self.row(r) {
            acc += v * x[c];
        }
        acc
    }
}

/// `y[r] += sum values * x[col]`, f32, columns ascending per row.
pub fn sparse_matvec(csr: &CsrOutliers, x: &[f32], y: &mut [f32]) -> Result<()> {
    if y.len() != csr.rows() {
        return Err(Error::DimensionMismatch {
            what: "output length",
            expected: csr.rows(),
            found: y.len(),
        });
    }
    if let Some(&max) = csr.col_ind.iter().max() {
        if max as usize >= x.len() {
            return Err(Error::DimensionMismatch {
                what: "activation length",
                expected: max as usize + 1,
                found: x.len(),
            });
        }
    }
    for (r, out) in y.iter_mut().enumerate() {
        *out = csr.accumulate_row(r, x, *out);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OutlierBudget {
    pub ratio: f64,
}

impl OutlierBudget {
    pub fn new(ratio: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&ratio) {
            return Err(Error::InvalidOutlierRatio(ratio));
        }
        Ok(Self { ratio })
    }

    /// `round(ratio * rows * cols)`; the denominator is every weight.
    pub fn count(&self, rows: usize, cols: usize) -> usize {
        libm::floor(self.ratio * (rows * cols) as f64 + 0.5) as usize
    }
}

impl Default for OutlierBudget {
    fn default() -> Self {
        Self { ratio: 0.002 }
    }
}

/// Per-element scores in original `(row, col)` coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct OutlierScores {
    pub rows: usize,
    pub cols: usize,
    pub scores: Vec<f64>,
}

/// Residual scores `(w - deq(q(w)))^2 / H_i^2` using a 2-bit baseline fit on
/// each permuted group of 16. When `include_four_bit` is false, 4-bit
/// channels score zero.
fn residual_scores(
    w: &WeightMatrix,
    h: &CalibrationVector,
    plan: &ChannelPlan,
    include_four_bit: bool,
) -> Result<OutlierScores> {
    h.check_cols(w.cols())?;
    if plan.in_channels() != w.cols() {
        return Err(Error::DimensionMismatch {
            what: "plan channels",
            expected: w.cols(),
            found: plan.in_channels(),
        });
    }
    let q = max_code(2)?;
    let fwd = plan.permutation().forward();
    let hv = h.values();
    let mut scores = vec![0.0f64; w.rows() * w.cols()];
    let group_count = if include_four_bit {
        plan.padded_channels() / GROUP
    } else {
        plan.two_bit_groups()
    };
    for r in 0..w.rows() {
        let row = w.row(r);
        for g in 0..group_count {
            let members = fwd[g * GROUP..(g + 1) * GROUP]
                .iter()
                .filter(|&&p| p != PAD)
                .map(|&p| p as usize);
            let Some(range) = GroupRange::of(members.clone().map(|c| row[c])) else {
                continue;
            };
            let params = range.params(2)?;
            for c in members {
                let v = row[c];
                let rec = dequantize_value(quantize_value(v, params.scale, params.zero, q), params.zero, params.scale);
                let d = (v - rec) as f64;
                let hc = hv[c] as f64;
                scores[r * w.cols() + c] = d * d / (hc * hc);
            }
        }
    }
    Ok(OutlierScores {
        rows: w.rows(),
        cols: w.cols(),
        scores,
    })
}

pub fn score_outliers(w: &WeightMatrix, h: &CalibrationVector, plan: &ChannelPlan) -> Result<OutlierScores> {
    residual_scores(w, h, plan, false)
}

fn by_score_then_index(scores: &[f64]) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    move |&a, &b| match scores[b].total_cmp(&scores[a]) {
        Ordering::Equal => a.cmp(&b),
        o => o,
    }
}

/// Global top-`k` positive scores, ties by `(row, col)` ascending. Returns
/// `(row, col)` pairs in ascending order.
pub fn select_outliers(scores: &OutlierScores, k: usize) -> Vec<(usize, usize)> {
    let mut cand: Vec<usize> = (0..scores.scores.len())
        .filter(|&i| scores.scores[i] > 0.0)
        .collect();
    if k < cand.len() {
        if k == 0 {
            cand.clear();
        } else {
            cand.select_nth_unstable_by(k - 1, by_score_then_index(&scores.scores));
            cand.truncate(k);
        }
    }
    cand.sort_unstable();
    cand.iter()
        .map(|&i| (i / scores.cols, i % scores.cols))
        .collect()
}

/// Dense remainder plus the sparse outlier store.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseSparseSplit {
    /// Original weights with outlier slots set to 0.0.
    pub dense: WeightMatrix,
    /// `true` at outlier slots, original coordinates.
    pub mask: Vec<bool>,
    pub csr: CsrOutliers,
}

/// Moves the selected 2-bit slots into CSR (values rounded to f16, columns in
/// permuted order). The dense slot keeps 0.0; group fits must exclude masked
/// slots and code them at the zero point so they dequantize to exactly 0.
pub fn split_dense_sparse(
    w: &WeightMatrix,
    plan: &ChannelPlan,
    selection: &[(usize, usize)],
) -> Result<DenseSparseSplit> {
    if plan.in_channels() != w.cols() {
        return Err(Error::DimensionMismatch {
            what: "plan channels",
            expected: w.cols(),
            found: plan.in_channels(),
        });
    }
    let cols = w.cols();
    let mut mask = vec![false; w.rows() * cols];
    for &(row, col) in selection {
        if row >= w.rows() || col >= cols || plan.bit_width(col) != BitWidth::Two {
            return Err(Error::IneligibleOutlier { row, col });
        }
        mask[row * cols + col] = true;
    }
    let perm = plan.permutation();
    let mut row_ptr = Vec::with_capacity(w.rows() + 1);
    row_ptr.push(0u32);
    let mut col_ind = Vec::new();
    let mut values = Vec::new();
    let mut entries: Vec<(u16, f16)> = Vec::new();
    let mut dense = w.clone();
    for r in 0..w.rows() {
        entries.clear();
        for c in 0..cols {
            if mask[r * cols + c] {
                let v = w.get(r, c);
                let h = f16::from_f32(v);
                if !h.is_finite() {
                    return Err(Error::HalfOverflow {
                        what: "outlier value",
                        value: v,
                    });
                }
                entries.push((perm.position_of(c) as u16, h));
                dense.data_mut()[r * cols + c] = 0.0;
            }
        }
        entries.sort_unstable_by_key(|e| e.0);
        col_ind.extend(entries.iter().map(|e| e.0));
        values.extend(entries.iter().map(|e| e.1));
        row_ptr.push(col_ind.len() as u32);
    }
    Ok(DenseSparseSplit {
        dense,
        mask,
        csr: CsrOutliers::from_parts(row_ptr, col_ind, values)?,
    })
}

/// Where the top-`k` residual outliers would land if 4-bit channels were
/// eligible too.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OutlierDistribution {
    pub selected: usize,
    pub in_two_bit: f64,
    pub in_four_bit: f64,
}

/// Scores every element against a 2-bit baseline (4-bit channels included,
/// grouped in permuted order) and reports the share of the top-`k` that falls
/// in 4-bit channels.
pub fn outlier_distribution_report(
    w: &WeightMatrix,
    h: &CalibrationVector,
    plan: &ChannelPlan,
    k: usize,
) -> Result<OutlierDistribution> {
    let scores = residual_scores(w, h, plan, true)?;
    let picked = select_outliers(&scores, k);
    if picked.is_empty() {
        return Ok(OutlierDistribution {
            selected: 0,
            in_two_bit: 0.0,
            in_four_bit: 0.0,
        });
    }
    let four = picked
        .iter()
        .filter(|&&(_, c)| plan.bit_width(c) == BitWidth::Four)
        .count();
    let n = picked.len() as f64;
    Ok(OutlierDistribution {
        selected: picked.len(),
        in_four_bit: four as f64 / n,
        in_two_bit: (picked.len() - four) as f64 / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plan::AmplitudeProfile;
    use crate::quant::fit_scale_zero;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn plan_with(bits: Vec<BitWidth>) -> ChannelPlan {
        ChannelPlan::from_bits(bits).unwrap()
    }

    fn gaussianish(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
        (0..n)
            .map(|_| (0..4).map(|_| rng.random_range(-1.0f32..1.0)).sum::<f32>())
            .collect()
    }

    #[test]
    fn budget_count() {
        assert_eq!(OutlierBudget::default().count(512, 1024), 1049);
        assert_eq!(OutlierBudget::new(0.0).unwrap().count(10, 10), 0);
        assert!(OutlierBudget::new(1.0).is_err());
        assert!(OutlierBudget::new(-0.1).is_err());
        assert_eq!(OUTLIER_BITS * 0.002, 0.06);
        assert_eq!(OUTLIER_BITS * 0.01, 0.3);
    }

    #[test]
    fn representable_elements_score_zero() {
        // {-1, 0, 1, 2} fits exactly on the 2-bit grid with s=1, z=1
        let mut row = vec![0.0f32; 48];
        row[..4].copy_from_slice(&[-1.0, 0.0, 1.0, 2.0]);
        let w = WeightMatrix::new(1, 48, row).unwrap();
        let plan = plan_with(vec![BitWidth::Two; 48]);
        let s = score_outliers(&w, &CalibrationVector::identity(48), &plan).unwrap();
        assert!(s.scores.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_groups_score_zero() {
        let w = WeightMatrix::new(2, 48, vec![0.37; 96]).unwrap();
        let plan = plan_with(vec![BitWidth::Two; 48]);
        let s = score_outliers(&w, &CalibrationVector::identity(48), &plan).unwrap();
        assert!(s.scores.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scores_match_requantization_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let values = gaussianish(&mut rng, 16);
        let mut row = values.clone();
        row.resize(48, 0.0);
        let w = WeightMatrix::new(1, 48, row).unwrap();
        let h: Vec<f32> = (0..48).map(|_| rng.random_range(0.5f32..2.0)).collect();
        let plan = plan_with(vec![BitWidth::Two; 48]);
        let s = score_outliers(&w, &CalibrationVector::new(h.clone()).unwrap(), &plan).unwrap();
        // brute force: requantize each element with the group's baseline fit
        let p = fit_scale_zero(&values, 2).unwrap();
        for (i, &v) in values.iter().enumerate() {
            let code = (libm::roundf(v / p.scale) + p.zero as f32).clamp(0.0, 3.0);
            let rec = (code - p.zero as f32) * p.scale;
            let want = ((v - rec) as f64).powi(2) / (h[i] as f64).powi(2);
            assert_eq!(s.scores[i], want);
        }
    }

    #[test]
    fn four_bit_channels_are_ineligible() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = WeightMatrix::new(4, 64, gaussianish(&mut rng, 256)).unwrap();
        let plan = ChannelPlan::build(
            &AmplitudeProfile {
                amp: (0..64).map(|i| i as f64).collect(),
            },
            0.25,
        )
        .unwrap();
        let s = score_outliers(&w, &CalibrationVector::identity(64), &plan).unwrap();
        for r in 0..4 {
            for c in 48..64 {
                assert_eq!(s.scores[r * 64 + c], 0.0);
            }
        }
        assert!(s.scores.iter().any(|&v| v > 0.0));
    }

    #[test]
    fn select_edge_cases() {
        let scores = OutlierScores {
            rows: 2,
            cols: 3,
            scores: vec![0.0, 3.0, 1.0, 3.0, 0.0, 2.0],
        };
        assert!(select_outliers(&scores, 0).is_empty());
        assert_eq!(
            select_outliers(&scores, 100),
            vec![(0, 1), (0, 2), (1, 0), (1, 2)]
        );
        // tie at 3.0 keeps both; next is (1, 2)
        assert_eq!(select_outliers(&scores, 3), vec![(0, 1), (1, 0), (1, 2)]);
        assert_eq!(select_outliers(&scores, 1), vec![(0, 1)]);
    }

    #[test]
    fn select_matches_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let scores: Vec<f64> = (0..64)
                .map(|_| if rng.random_bool(0.2) { 0.0 } else { rng.random_range(0..8) as f64 })
                .collect();
            let s = OutlierScores { rows: 8, cols: 8, scores: scores.clone() };
            let mut all: Vec<usize> = (0..64).filter(|&i| scores[i] > 0.0).collect();
            all.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
            all.truncate(5);
            all.sort();
            let want: Vec<(usize, usize)> = all.iter().map(|&i| (i / 8, i % 8)).collect();
            assert_eq!(select_outliers(&s, 5), want);
        }
    }

    #[test]
    fn split_empty_selection() {
        let w = WeightMatrix::new(2, 48, (0..96).map(|i| i as f32 * 0.1).collect()).unwrap();
        let plan = plan_with(vec![BitWidth::Two; 48]);
        let split = split_dense_sparse(&w, &plan, &[]).unwrap();
        assert_eq!(split.dense, w);
        assert_eq!(split.csr.row_ptr(), &[0, 0, 0]);
        assert_eq!(split.csr.nnz(), 0);
    }

    #[test]
    fn split_single_outlier_uses_permuted_column() {
        // channels 0..16 are 4-bit, so original column 20 sits at permuted 4
        let mut bits = vec![BitWidth::Two; 64];
        bits[..16].fill(BitWidth::Four);
        let plan = plan_with(bits);
        let mut data = vec![0.0f32; 3 * 64];
        data[20] = 7.25;
        let w = WeightMatrix::new(3, 64, data).unwrap();
        let split = split_dense_sparse(&w, &plan, &[(0, 20)]).unwrap();
        assert_eq!(split.csr.values(), &[f16::from_f32(7.25)]);
        assert_eq!(split.csr.col_ind(), &[4]);
        assert_eq!(split.csr.row_ptr(), &[0, 1, 1, 1]);
        assert_eq!(split.dense.get(0, 20), 0.0);
        assert!(split.mask[20]);
        assert_eq!(
            split_dense_sparse(&w, &plan, &[(0, 3)]).unwrap_err(),
            Error::IneligibleOutlier { row: 0, col: 3 }
        );
    }

    #[test]
    fn split_refit_shrinks_range() {
        let mut group = [0.1f32; 16];
        group[5] = 50.0;
        let mut row = group.to_vec();
        row.resize(48, 0.0);
        let w = WeightMatrix::new(1, 48, row).unwrap();
        let plan = plan_with(vec![BitWidth::Two; 48]);
        let split = split_dense_sparse(&w, &plan, &[(0, 5)]).unwrap();
        let kept = (0..16).filter(|&c| !split.mask[c]).map(|c| split.dense.get(0, c));
        let p = GroupRange::of(kept).unwrap().params(2).unwrap();
        for c in 0..16 {
            let code = if split.mask[c] {
                p.zero
            } else {
                quantize_value(split.dense.get(0, c), p.scale, p.zero, 3)
            };
            let dense = dequantize_value(code, p.zero, p.scale);
            let sparse = split.csr.row(0).find(|&(k, _)| k == c).map_or(0.0, |(_, v)| v);
            if c == 5 {
                assert_eq!(dense, 0.0);
                assert_eq!(sparse, 50.0);
            } else {
                assert_eq!(dense, 0.1);
            }
        }
    }

    #[test]
    fn sparse_matvec_examples() {
        let empty = CsrOutliers::empty(3);
        let mut y = vec![0.0; 3];
        sparse_matvec(&empty, &[1.0; 4], &mut y).unwrap();
        assert_eq!(y, vec![0.0; 3]);

        let csr = CsrOutliers::from_parts(vec![0, 0, 1], vec![3], vec![f16::from_f32(2.0)]).unwrap();
        let mut y = vec![0.0; 2];
        sparse_matvec(&csr, &[0.0, 0.0, 0.0, 5.0], &mut y).unwrap();
        assert_eq!(y, vec![0.0, 10.0]);
    }

    #[test]
    fn sparse_matvec_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let mut dense = [[0.0f32; 8]; 8];
            let mut row_ptr = vec![0u32];
            let mut cols = Vec::new();
            let mut vals = Vec::new();
            for row in dense.iter_mut() {
                for (c, slot) in row.iter_mut().enumerate() {
                    if rng.random_bool(0.3) {
                        let v = f16::from_f32(rng.random_range(-4.0f32..4.0));
                        *slot = v.to_f32();
                        cols.push(c as u16);
                        vals.push(v);
                    }
                }
                row_ptr.push(cols.len() as u32);
            }
            let csr = CsrOutliers::from_parts(row_ptr, cols, vals).unwrap();
            let x: Vec<f32> = (0..8).map(|_| rng.random_range(-1.0f32..1.0)).collect();
            let mut y = vec![0.0; 8];
            sparse_matvec(&csr, &x, &mut y).unwrap();
            for r in 0..8 {
                let want: f64 = (0..8).map(|c| dense[r][c] as f64 * x[c] as f64).sum();
                assert!((y[r] as f64 - want).abs() <= 1e-6 * want.abs().max(1.0));
            }
        }
    }

    #[test]
    fn csr_structure_is_checked() {
        assert!(CsrOutliers::from_parts(vec![1, 1], vec![0], vec![f16::ONE]).is_err());
        assert!(CsrOutliers::from_parts(vec![0, 2], vec![3, 3], vec![f16::ONE; 2]).is_err());
        assert!(CsrOutliers::from_parts(vec![0, 2, 1], vec![1, 2], vec![f16::ONE; 2]).is_err());
        assert!(CsrOutliers::from_parts(vec![0, 1], vec![1], vec![f16::INFINITY]).is_err());
    }

    #[test]
    fn distribution_report_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w = WeightMatrix::new(16, 64, gaussianish(&mut rng, 1024)).unwrap();
        let h = CalibrationVector::identity(64);

        let all_two = plan_with(vec![BitWidth::Two; 64]);
        let d = outlier_distribution_report(&w, &h, &all_two, 10).unwrap();
        assert_eq!(d.in_four_bit, 0.0);

        let amp = crate::plan::compute_amplitudes(&w, &h).unwrap();
        let plan = ChannelPlan::build(&amp, 0.25).unwrap();
        let d = outlier_distribution_report(&w, &h, &plan, 20).unwrap();
        assert_eq!(d.selected, 20);
        assert!((d.in_two_bit + d.in_four_bit - 1.0).abs() < 1e-12);

        // plant large residuals only in 4-bit channels (original 0..16)
        let mut bits = vec![BitWidth::Two; 64];
        bits[..16].fill(BitWidth::Four);
        let plan = plan_with(bits);
        let mut data = vec![0.0f32; 16 * 64];
        for r in 0..16 {
            for c in 0..16 {
                data[r * 64 + c] = if c == 0 { 100.0 } else { rng.random_range(-1.0f32..1.0) };
            }
            for c in 16..64 {
                data[r * 64 + c] = 0.01 * (c % 4) as f32 - 0.01;
            }
        }
        let w = WeightMatrix::new(16, 64, data).unwrap();
        let d = outlier_distribution_report(&w, &h, &plan, 30).unwrap();
        assert_eq!(d.in_four_bit, 1.0);
    }
}
