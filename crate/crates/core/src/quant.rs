//! Uniform asymmetric group quantization and second-order quantization of
//! group scales.
//!
//! A group with value range `[min, max]` is mapped onto `0..=2^N-1` with a
//! step `s` and integer zero-point `z`:
//!
//! ```text
//! s     = (hi - lo) / (2^N - 1)        lo = min(min, 0), hi = max(max, 0)
//! z     = clamp(round(-lo / s), 0, 2^N - 1)
//! code  = clamp(round(w / s) + z, 0, 2^N - 1)
//! w'    = (code - z) * s
//! ```
//!
//! `round` is half-away-from-zero. The range always contains zero, so the zero
//! point is representable and every `w` in the group reconstructs to within `s`.

use alloc::vec::Vec;

use half::f16;

use crate::error::{Error, Result};

/// Largest code for a `bits`-wide unsigned quantizer.
#[inline]
pub fn max_code(bits: u32) -> Result<u8> {
    match bits {
        1..=8 => Ok(((1u32 << bits) - 1) as u8),
        _ => Err(Error::UnsupportedBitWidth(bits)),
    }
}

#[inline]
pub(crate) fn round_half_away(x: f32) -> f32 {
    libm::roundf(x)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupParams {
    pub scale: f32,
    pub zero: u8,
}

/// Observed value range of a group.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupRange {
    pub min: f32,
    pub max: f32,
}

impl GroupRange {
    /// `None` for an empty iterator.
    pub fn of<I: IntoIterator<Item = f32>>(values: I) -> Option<Self> {
        let mut it = values.into_iter();
        let first = it.next()?;
        let (min, max) = it.fold((first, first), |(lo, hi), v| (lo.min(v), hi.max(v)));
        Some(Self { min, max })
    }

    #[inline]
    pub fn span(&self) -> f32 {
        self.max - self.min
    }

    /// Scale and zero-point for this range.
    ///
    /// A constant nonzero group `v` gets `s = |v| / (2^N-1)` with the zero
    /// point at the opposite end so `v` lands on the extreme code. When that
    /// product does not reproduce `|v|` in f32, the step becomes `|v|` itself
    /// (code one step from the zero point), which is always exact.
    pub fn params(&self, bits: u32) -> Result<GroupParams> {
        let q = max_code(bits)?;
        let qf = q as f32;
        if self.min == self.max {
            let v = self.min;
            if v == 0.0 {
                return Ok(GroupParams { scale: 1.0, zero: 0 });
            }
            let mag = v.abs();
            let s = mag / qf;
            let (scale, steps) = if s > 0.0 && s * qf == mag {
                (s, q)
            } else {
                (mag, 1)
            };
            let zero = if v > 0.0 { 0 } else { steps };
            return Ok(GroupParams { scale, zero });
        }
        let lo = self.min.min(0.0);
        let hi = self.max.max(0.0);
        let mut scale = ((hi as f64 - lo as f64) / qf as f64) as f32;
        if scale <= 0.0 {
            // span below the f32 subnormal step after division
            scale = f32::from_bits(1);
        }
        let zero = zero_for_scale(self.min, scale, bits)?;
        Ok(GroupParams { scale, zero })
    }
}

/// Zero point `clamp(round(-min(lo, 0) / s))` for a fixed step `s`.
pub fn zero_for_scale(lo: f32, scale: f32, bits: u32) -> Result<u8> {
    let q = max_code(bits)? as f32;
    if scale <= 0.0 {
        return Ok(0);
    }
    let z = round_half_away(-lo.min(0.0) / scale);
    Ok(z.clamp(0.0, q) as u8)
}

pub fn fit_scale_zero(values: &[f32], bits: u32) -> Result<GroupParams> {
    GroupRange::of(values.iter().copied())
        .ok_or(Error::EmptyGroup)?
        .params(bits)
}

/// Code for a single value. `scale` must be positive.
#[inline]
pub fn quantize_value(w: f32, scale: f32, zero: u8, q: u8) -> u8 {
    let c = round_half_away(w / scale) + zero as f32;
    c.clamp(0.0, q as f32) as u8
}

pub fn quantize_values(values: &[f32], scale: f32, zero: u8, bits: u32) -> Result<Vec<u8>> {
    let q = max_code(bits)?;
    if scale.is_nan() || scale <= 0.0 {
        return Err(Error::NonPositiveScale(scale));
    }
    if zero > q {
        return Err(Error::CodeOutOfRange {
            what: "zero point",
            value: zero,
            max: q,
        });
    }
    Ok(values
        .iter()
        .map(|&w| quantize_value(w, scale, zero, q))
        .collect())
}

#[inline]
pub fn dequantize_value(code: u8, zero: u8, scale: f32) -> f32 {
    (code as f32 - zero as f32) * scale
}

pub fn dequantize_values(codes: &[u8], scale: f32, zero: u8) -> Vec<f32> {
    codes
        .iter()
        .map(|&c| dequantize_value(c, zero, scale))
        .collect()
}

/// One quantized group: codes plus its first-order parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupQuant {
    pub codes: Vec<u8>,
    pub params: GroupParams,
    pub bits: u32,
}

impl GroupQuant {
    pub fn quantize(values: &[f32], bits: u32) -> Result<Self> {
        let params = fit_scale_zero(values, bits)?;
        let codes = quantize_values(values, params.scale, params.zero, bits)?;
        Ok(Self {
            codes,
            params,
            bits,
        })
    }

    pub fn dequantize(&self) -> Vec<f32> {
        dequantize_values(&self.codes, self.params.scale, self.params.zero)
    }
}

/// Second-order quantization of a block of first-order scales.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleQuant2 {
    pub codes: Vec<u8>,
    pub zero2: u8,
    pub scale2: f16,
}

impl ScaleQuant2 {
    pub fn dequantize(&self) -> Vec<f32> {
        let s2 = self.scale2.to_f32();
        self.codes
            .iter()
            .map(|&c| dequantize_scale(c, self.zero2, s2))
            .collect()
    }
}

/// Rounds a positive step to f16, keeping it positive and finite.
pub(crate) fn step_to_half(what: &'static str, step: f32) -> Result<f16> {
    let h = f16::from_f32(step);
    if h.is_infinite() || h.is_nan() {
        return Err(Error::HalfOverflow { what, value: step });
    }
    if step > 0.0 && h.to_f32() <= 0.0 {
        return Ok(f16::from_bits(1));
    }
    Ok(h)
}

/// Fits `(scale2, zero2)` over the scales and quantizes them to `n2` bits.
/// `scale2` is stored in half precision and the codes are computed against
/// the stored value.
pub fn quantize_scales_2order(scales: &[f32], n2: u32) -> Result<ScaleQuant2> {
    let params = fit_scale_zero(scales, n2)?;
    let scale2 = step_to_half("second-order scale", params.scale)?;
    let q = max_code(n2)?;
    let s2 = scale2.to_f32();
    let codes = scales
        .iter()
        .map(|&s| quantize_value(s, s2, params.zero, q))
        .collect();
    Ok(ScaleQuant2 {
        codes,
        zero2: params.zero,
        scale2,
    })
}

#[inline]
pub fn dequantize_scale(code: u8, zero2: u8, scale2: f32) -> f32 {
    (code as f32 - zero2 as f32) * scale2
}
