//! Per-input-channel amplitude profiling and 2/4-bit channel assignment.
//!
//! Amplitude of input channel `i` is `sum_j W[j][i]^2 / H[i]^2`. The `n4`
//! channels with the largest amplitude become 4-bit; the rest are 2-bit.
//! Channels are physically reordered: 2-bit channels (ascending original
//! index), then zero pad channels, then 4-bit channels (ascending).

use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::error::{Error, Result};
use crate::matrix::{CalibrationVector, WeightMatrix};

/// Channels per first-order group.
pub const GROUP: usize = 16;
/// 2-bit channels per tile (three groups).
pub const TWO_BIT_PER_TILE: usize = 3 * GROUP;
/// 4-bit channels per tile.
pub const FOUR_BIT_PER_TILE: usize = GROUP;
/// Permuted channels per tile.
pub const TILE: usize = TWO_BIT_PER_TILE + FOUR_BIT_PER_TILE;
/// Marker for a pad position in a [`Permutation`].
pub const PAD: u32 = u32::MAX;
/// Column indices of outliers are stored in 16 bits.
pub const MAX_PADDED_CHANNELS: usize = 1 << 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BitWidth {
    Two,
    Four,
}

impl BitWidth {
    pub fn bits(self) -> u32 {
        match self {
            BitWidth::Two => 2,
            BitWidth::Four => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AmplitudeProfile {
    pub amp: Vec<f64>,
}

pub fn compute_amplitudes(w: &WeightMatrix, h: &CalibrationVector) -> Result<AmplitudeProfile> {
    h.check_cols(w.cols())?;
    let mut amp = vec![0.0f64; w.cols()];
    for r in 0..w.rows() {
        for (a, &v) in amp.iter_mut().zip(w.row(r)) {
            let v = v as f64;
            *a += v * v;
        }
    }
    for (a, &hi) in amp.iter_mut().zip(h.values()) {
        let hi = hi as f64;
        *a /= hi * hi;
    }
    Ok(AmplitudeProfile { amp })
}

/// Maps permuted positions to original channels; [`PAD`] marks virtual zero
/// channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Permutation {
    forward: Vec<u32>,
    inverse: Vec<u32>,
}

impl Permutation {
    /// `forward[k]` is the original channel at permuted position `k`. Every
    /// original channel in `0..n` must appear exactly once, where `n` is the
    /// number of non-pad entries.
    pub fn new(forward: Vec<u32>) -> Result<Self> {
        let n = forward.iter().filter(|&&p| p != PAD).count();
        let mut inverse = vec![PAD; n];
        for (k, &p) in forward.iter().enumerate() {
            if p == PAD {
                continue;
            }
            let slot = inverse
                .get_mut(p as usize)
                .ok_or(Error::InvalidLayer("permutation entry out of range"))?;
            if *slot != PAD {
                return Err(Error::InvalidLayer("permutation repeats a channel"));
            }
            *slot = k as u32;
        }
        Ok(Self { forward, inverse })
    }

    pub fn identity(n: usize) -> Self {
        let forward: Vec<u32> = (0..n as u32).collect();
        Self {
            inverse: forward.clone(),
            forward,
        }
    }

    pub fn forward(&self) -> &[u32] {
        &self.forward
    }

    /// Number of real (non-pad) channels.
    pub fn channels(&self) -> usize {
        self.inverse.len()
    }

    /// Number of permuted positions, pads included.
    pub fn len(&self) -> usize {
        self.forward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forward.is_empty()
    }

    /// Permuted position of original channel `c`.
    #[inline]
    pub fn position_of(&self, c: usize) -> usize {
        self.inverse[c] as usize
    }

    /// `y[k] = x[forward[k]]`, pads read as zero.
    pub fn apply(&self, x: &[f32]) -> Result<Vec<f32>> {
        let mut y = vec![0.0; self.len()];
        self.apply_into(x, &mut y)?;
        Ok(y)
    }

    pub fn apply_into(&self, x: &[f32], y: &mut [f32]) -> Result<()> {
        if x.len() != self.channels() {
            return Err(Error::DimensionMismatch {
                what: "activation length",
                expected: self.channels(),
                found: x.len(),
            });
        }
        for (out, &p) in y.iter_mut().zip(&self.forward) {
            *out = if p == PAD { 0.0 } else { x[p as usize] };
        }
        Ok(())
    }

    pub fn invert(&self, y: &[f32]) -> Result<Vec<f32>> {
        if y.len() != self.len() {
            return Err(Error::DimensionMismatch {
                what: "permuted vector length",
                expected: self.len(),
                found: y.len(),
            });
        }
        Ok(self.inverse.iter().map(|&k| y[k as usize]).collect())
    }
}

/// Bit-width assignment and physical channel order for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelPlan {
    bits: Vec<BitWidth>,
    perm: Permutation,
    n4: usize,
    pads: usize,
}

/// `round(alpha * channels)` snapped to the nearest multiple of 16, ties up.
pub fn four_bit_count(alpha: f64, channels: usize) -> Result<usize> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidAlpha(alpha));
    }
    let m = libm::floor(alpha * channels as f64 + 0.5) as usize;
    let n4 = (m + GROUP / 2) / GROUP * GROUP;
    if n4 > channels {
        return Err(Error::TooManyFourBit { n4, channels });
    }
    Ok(n4)
}

/// Pad channels needed to make `two_bit` a multiple of 48.
pub fn pad_count(two_bit: usize) -> usize {
    (TWO_BIT_PER_TILE - two_bit % TWO_BIT_PER_TILE) % TWO_BIT_PER_TILE
}

/// Channel indices ordered by amplitude descending, lower index first on ties.
pub fn rank_channels(amp: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..amp.len()).collect();
    order.sort_by(|&a, &b| match amp[b].total_cmp(&amp[a]) {
        Ordering::Equal => a.cmp(&b),
        o => o,
    });
    order
}

impl ChannelPlan {
    pub fn build(amp: &AmplitudeProfile, alpha: f64) -> Result<Self> {
        let channels = amp.amp.len();
        if channels == 0 {
            return Err(Error::InvalidConfig("no input channels"));
        }
        if let Some(index) = amp.amp.iter().position(|a| !a.is_finite() || *a < 0.0) {
            return Err(Error::NonFinite { index });
        }
        let n4 = four_bit_count(alpha, channels)?;
        let mut bits = vec![BitWidth::Two; channels];
        for &c in rank_channels(&amp.amp).iter().take(n4) {
            bits[c] = BitWidth::Four;
        }
        Self::from_bits(bits)
    }

    /// Rebuilds the plan from a per-channel assignment. The 4-bit count must
    /// be a multiple of 16.
    pub fn from_bits(bits: Vec<BitWidth>) -> Result<Self> {
        let n4 = bits.iter().filter(|b| **b == BitWidth::Four).count();
        if n4 % GROUP != 0 {
            return Err(Error::InvalidConfig("4-bit channel count must be a multiple of 16"));
        }
        let pads = pad_count(bits.len() - n4);
        let padded = bits.len() + pads;
        if padded > MAX_PADDED_CHANNELS {
            return Err(Error::TooWide { channels: padded });
        }
        let mut forward = Vec::with_capacity(padded);
        forward.extend(
            (0..bits.len() as u32).filter(|&c| bits[c as usize] == BitWidth::Two),
        );
        forward.extend(core::iter::repeat_n(PAD, pads));
        forward.extend(
            (0..bits.len() as u32).filter(|&c| bits[c as usize] == BitWidth::Four),
        );
        let perm = Permutation::new(forward)?;
        Ok(Self {
            bits,
            perm,
            n4,
            pads,
        })
    }

    pub fn bits(&self) -> &[BitWidth] {
        &self.bits
    }

    pub fn permutation(&self) -> &Permutation {
        &self.perm
    }

    pub fn in_channels(&self) -> usize {
        self.bits.len()
    }

    pub fn padded_channels(&self) -> usize {
        self.bits.len() + self.pads
    }

    pub fn n4(&self) -> usize {
        self.n4
    }

    pub fn pads(&self) -> usize {
        self.pads
    }

    /// Real 2-bit channels.
    pub fn two_bit_channels(&self) -> usize {
        self.bits.len() - self.n4
    }

    /// Permuted 2-bit positions, pads included.
    pub fn two_bit_slots(&self) -> usize {
        self.two_bit_channels() + self.pads
    }

    pub fn two_bit_groups(&self) -> usize {
        self.two_bit_slots() / GROUP
    }

    pub fn four_bit_groups(&self) -> usize {
        self.n4 / GROUP
    }

    /// Units of 48 two-bit channels.
    pub fn two_bit_tiles(&self) -> usize {
        self.two_bit_slots() / TWO_BIT_PER_TILE
    }

    /// Tiles holding both a 2-bit triple and a 4-bit group.
    pub fn full_tiles(&self) -> usize {
        self.two_bit_tiles().min(self.four_bit_groups())
    }

    #[inline]
    pub fn is_pad(&self, k: usize) -> bool {
        self.perm.forward[k] == PAD
    }

    pub fn bit_width(&self, channel: usize) -> BitWidth {
        self.bits[channel]
    }

    /// Actual fraction of real channels that are 4-bit.
    pub fn four_bit_fraction(&self) -> f64 {
        self.n4 as f64 / self.bits.len() as f64
    }

    /// Weight row gathered into permuted order, pads as zero.
    pub fn permute_row(&self, row: &[f32], out: &mut [f32]) {
        for (o, &p) in out.iter_mut().zip(&self.perm.forward) {
            *o = if p == PAD { 0.0 } else { row[p as usize] };
        }
    }

    /// Whole matrix in permuted order (`rows x padded_channels`).
    pub fn permute_matrix(&self, w: &WeightMatrix) -> Result<WeightMatrix> {
        if w.cols() != self.in_channels() {
            return Err(Error::DimensionMismatch {
                what: "weight columns",
                expected: self.in_channels(),
                found: w.cols(),
            });
        }
        let cols = self.padded_channels();
        let mut out = WeightMatrix::zeros(w.rows(), cols)?;
        for r in 0..w.rows() {
            self.permute_row(w.row(r), &mut out.data_mut()[r * cols..(r + 1) * cols]);
        }
        Ok(out)
    }
}
