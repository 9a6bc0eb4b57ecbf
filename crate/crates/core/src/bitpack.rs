//! Memory-aligned packed layout.
//!
//! A tile covers 64 permuted channels of one row: three 2-bit groups of 16
//! followed by 16 4-bit channels.
//!
//! ```text
//! main block (16 B)   bytes 0..12  48 x 2-bit codes, LSB first
//!                     bytes 12..16 4-bit codes of tile channels 48..56
//! secondary (4 B)                  4-bit codes of tile channels 56..64
//! meta word (u16)     z0:2 z1:2 z2:2 scode0:4 scode1:3 scode2:3 (LSB first)
//! ```
//!
//! Nibbles hold the even channel in the low half. When a layer has more
//! 2-bit triples than 4-bit groups (or the reverse) the surplus goes to tail
//! streams: 12-byte 2-bit blocks or 8-byte 4-bit blocks.
//!
//! Scale code 0 of a tile keeps all `N2` bits. Codes 1 and 2 are restricted
//! to odd values and stored as `c >> 1` in `N2 - 1` bits.

use alloc::vec;
use alloc::vec::Vec;

use half::f16;

use crate::error::{Error, Result};
use crate::outliers::CsrOutliers;
use crate::plan::{ChannelPlan, FOUR_BIT_PER_TILE, GROUP, TILE, TWO_BIT_PER_TILE};

/// First-order bit width of the low-precision channels.
pub const LOW_BITS: u32 = 2;
/// First-order bit width of the high-precision channels.
pub const HIGH_BITS: u32 = 4;
/// Bits per meta-word field: three zeros, then three scale codes.
pub const SCALE_CODE_BITS: [u32; 3] = [4, 3, 3];

#[repr(C, align(16))]
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MainBlock(pub [u8; 16]);

#[repr(C, align(4))]
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SecondaryBlock(pub [u8; 4]);

/// Tail block of 48 2-bit codes with no 4-bit partner.
#[repr(C, align(4))]
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TwoBitBlock(pub [u8; 12]);

/// Tail block of 16 4-bit codes with no 2-bit partner.
#[repr(C, align(8))]
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FourBitBlock(pub [u8; 8]);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TileCodes {
    pub codes2: [u8; TWO_BIT_PER_TILE],
    pub codes4: [u8; FOUR_BIT_PER_TILE],
    pub zeros: [u8; 3],
    pub scodes: [u8; 3],
}

impl Default for TileCodes {
    fn default() -> Self {
        Self {
            codes2: [0; TWO_BIT_PER_TILE],
            codes4: [0; FOUR_BIT_PER_TILE],
            zeros: [0; 3],
            scodes: [0; 3],
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PackedTile {
    pub main: MainBlock,
    pub secondary: SecondaryBlock,
    pub meta: u16,
}

#[inline]
fn check(what: &'static str, value: u8, bits: u32) -> Result<()> {
    let max = ((1u32 << bits) - 1) as u8;
    if value > max {
        return Err(Error::CodeOutOfRange { what, value, max });
    }
    Ok(())
}

pub fn pack_two_bit(codes: &[u8], out: &mut [u8]) {
    debug_assert_eq!(codes.len(), out.len() * 4);
    for (byte, quad) in out.iter_mut().zip(codes.chunks_exact(4)) {
        *byte = quad[0] | quad[1] << 2 | quad[2] << 4 | quad[3] << 6;
    }
}

#[inline]
pub fn unpack_two_bit(bytes: &[u8], out: &mut [u8]) {
    debug_assert_eq!(out.len(), bytes.len() * 4);
    for (quad, &b) in out.chunks_exact_mut(4).zip(bytes) {
        quad[0] = b & 3;
        quad[1] = (b >> 2) & 3;
        quad[2] = (b >> 4) & 3;
        quad[3] = b >> 6;
    }
}

pub fn pack_nibbles(codes: &[u8], out: &mut [u8]) {
    debug_assert_eq!(codes.len(), out.len() * 2);
    for (byte, pair) in out.iter_mut().zip(codes.chunks_exact(2)) {
        *byte = pair[0] | pair[1] << 4;
    }
}

#[inline]
pub fn unpack_nibbles(bytes: &[u8], out: &mut [u8]) {
    debug_assert_eq!(out.len(), bytes.len() * 2);
    for (pair, &b) in out.chunks_exact_mut(2).zip(bytes) {
        pair[0] = b & 0x0f;
        pair[1] = b >> 4;
    }
}

pub fn pack_meta(zeros: [u8; 3], scodes: [u8; 3]) -> Result<u16> {
    for &z in &zeros {
        check("first-order zero", z, LOW_BITS)?;
    }
    for (&c, &bits) in scodes.iter().zip(&SCALE_CODE_BITS) {
        check("scale code", c, bits)?;
    }
    Ok(zeros[0] as u16
        | (zeros[1] as u16) << 2
        | (zeros[2] as u16) << 4
        | (scodes[0] as u16) << 6
        | (scodes[1] as u16) << 10
        | (scodes[2] as u16) << 13)
}

#[inline]
pub fn unpack_meta(meta: u16) -> ([u8; 3], [u8; 3]) {
    (
        [
            (meta & 3) as u8,
            ((meta >> 2) & 3) as u8,
            ((meta >> 4) & 3) as u8,
        ],
        [
            ((meta >> 6) & 0xf) as u8,
            ((meta >> 10) & 7) as u8,
            (meta >> 13) as u8,
        ],
    )
}

/// Stored form of a second-order scale code at tile position `pos`, given the
/// continuous code position `x = s / scale2 + zero2`. Position 0 rounds to
/// the nearest `n2`-bit code; positions 1 and 2 round to the nearest odd code
/// so the dropped bit costs at most one step.
#[inline]
pub fn encode_scale_code(pos: usize, x: f32, n2: u32) -> u8 {
    let q = ((1u32 << n2) - 1) as f32;
    if pos == 0 {
        libm::roundf(x).clamp(0.0, q) as u8
    } else {
        libm::roundf((x - 1.0) * 0.5).clamp(0.0, (q - 1.0) * 0.5) as u8
    }
}

/// Second-order code reconstructed from its stored form.
#[inline]
pub fn expand_scale_code(pos: usize, stored: u8) -> u8 {
    if pos == 0 {
        stored
    } else {
        2 * stored + 1
    }
}

/// First-order scale of a 2-bit group from its stored code.
#[inline]
pub fn effective_scale(pos: usize, stored: u8, params: SecondOrderParams) -> f32 {
    crate::quant::dequantize_scale(expand_scale_code(pos, stored), params.zero2, params.scale2.to_f32())
}

pub fn pack_tile(t: &TileCodes) -> Result<PackedTile> {
    for &c in &t.codes2 {
        check("2-bit code", c, LOW_BITS)?;
    }
    for &c in &t.codes4 {
        check("4-bit code", c, HIGH_BITS)?;
    }
    let mut tile = PackedTile {
        meta: pack_meta(t.zeros, t.scodes)?,
        ..PackedTile::default()
    };
    pack_two_bit(&t.codes2, &mut tile.main.0[..12]);
    pack_nibbles(&t.codes4[..8], &mut tile.main.0[12..]);
    pack_nibbles(&t.codes4[8..], &mut tile.secondary.0);
    Ok(tile)
}

pub fn unpack_tile(tile: &PackedTile) -> TileCodes {
    let mut t = TileCodes::default();
    unpack_two_bit(&tile.main.0[..12], &mut t.codes2);
    unpack_nibbles(&tile.main.0[12..], &mut t.codes4[..8]);
    unpack_nibbles(&tile.secondary.0, &mut t.codes4[8..]);
    (t.zeros, t.scodes) = unpack_meta(tile.meta);
    t
}

/// `(zero2, scale2)` for one 2-bit group column within one block of `g2` rows.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SecondOrderParams {
    pub zero2: u8,
    pub scale2: f16,
}

/// First-order parameters of one 4-bit group.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FourBitParams {
    pub scale: f16,
    pub zero: u8,
}

/// Scalar description of a packed layer. Group size 16, `N = 2` and the
/// 64-channel tile are fixed by the layout.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerConfig {
    pub n2: u8,
    pub g2: u32,
    pub in_channels: u32,
    pub out_channels: u32,
    pub pads: u32,
    pub n4: u32,
    pub alpha: f32,
    pub outlier_ratio: f32,
}

/// Counts derived from a [`LayerConfig`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Geometry {
    pub rows: usize,
    pub padded_channels: usize,
    pub two_bit_slots: usize,
    pub two_bit_tiles: usize,
    pub four_bit_groups: usize,
    pub full_tiles: usize,
    pub two_bit_groups: usize,
    pub row_blocks: usize,
}

impl Geometry {
    pub fn main_blocks(&self) -> usize {
        self.rows * self.full_tiles
    }

    pub fn tail_two_bit_blocks(&self) -> usize {
        self.rows * (self.two_bit_tiles - self.full_tiles)
    }

    pub fn tail_four_bit_blocks(&self) -> usize {
        self.rows * (self.four_bit_groups - self.full_tiles)
    }

    pub fn meta_words(&self) -> usize {
        self.rows * self.two_bit_tiles
    }

    pub fn second_order_entries(&self) -> usize {
        self.row_blocks * self.two_bit_groups
    }

    pub fn four_bit_entries(&self) -> usize {
        self.rows * self.four_bit_groups
    }

    pub fn n4(&self) -> usize {
        self.four_bit_groups * GROUP
    }
}

impl LayerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(2..=4).contains(&self.n2) {
            return Err(Error::InvalidConfig("second-order bit width must be 2, 3 or 4"));
        }
        if self.g2 == 0 {
            return Err(Error::InvalidConfig("g2 must be at least 1"));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::InvalidConfig("layer dimensions must be at least 1"));
        }
        if !self.n4.is_multiple_of(GROUP as u32) || self.n4 > self.in_channels {
            return Err(Error::InvalidConfig("4-bit channel count must be a multiple of 16 within IC"));
        }
        if !(self.in_channels - self.n4 + self.pads).is_multiple_of(TWO_BIT_PER_TILE as u32) {
            return Err(Error::InvalidConfig("2-bit channel count plus pads must be a multiple of 48"));
        }
        Ok(())
    }

    pub fn geometry(&self) -> Geometry {
        let rows = self.out_channels as usize;
        let n4 = self.n4 as usize;
        let two_bit_slots = (self.in_channels - self.n4 + self.pads) as usize;
        let two_bit_tiles = two_bit_slots / TWO_BIT_PER_TILE;
        let four_bit_groups = n4 / GROUP;
        let g2 = self.g2.max(1) as usize;
        Geometry {
            rows,
            padded_channels: two_bit_slots + n4,
            two_bit_slots,
            two_bit_tiles,
            four_bit_groups,
            full_tiles: two_bit_tiles.min(four_bit_groups),
            two_bit_groups: two_bit_slots / GROUP,
            row_blocks: rows.div_ceil(g2),
        }
    }
}

/// Raw packed streams of a layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerStreams {
    pub main: Vec<MainBlock>,
    pub secondary: Vec<SecondaryBlock>,
    pub tail2: Vec<TwoBitBlock>,
    pub tail4: Vec<FourBitBlock>,
    pub meta: Vec<u16>,
    pub second_order: Vec<SecondOrderParams>,
    pub four_bit: Vec<FourBitParams>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PackedLayer {
    config: LayerConfig,
    plan: ChannelPlan,
    streams: LayerStreams,
    outliers: CsrOutliers,
}

fn expect_len(what: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::DimensionMismatch {
            what,
            expected,
            found,
        });
    }
    Ok(())
}

impl PackedLayer {
    /// Checks every stream length against the config and every stored field
    /// against its bit width.
    pub fn new(
        config: LayerConfig,
        plan: ChannelPlan,
        streams: LayerStreams,
        outliers: CsrOutliers,
    ) -> Result<Self> {
        config.validate()?;
        if plan.in_channels() != config.in_channels as usize
            || plan.n4() != config.n4 as usize
            || plan.pads() != config.pads as usize
        {
            return Err(Error::InvalidLayer("plan disagrees with config"));
        }
        let g = config.geometry();
        expect_len("main blocks", g.main_blocks(), streams.main.len())?;
        expect_len("secondary blocks", g.main_blocks(), streams.secondary.len())?;
        expect_len("2-bit tail blocks", g.tail_two_bit_blocks(), streams.tail2.len())?;
        expect_len("4-bit tail blocks", g.tail_four_bit_blocks(), streams.tail4.len())?;
        expect_len("meta words", g.meta_words(), streams.meta.len())?;
        expect_len("second-order params", g.second_order_entries(), streams.second_order.len())?;
        expect_len("4-bit params", g.four_bit_entries(), streams.four_bit.len())?;
        let n2 = config.n2 as u32;
        for &m in &streams.meta {
            let (_, sc) = unpack_meta(m);
            check("scale code", sc[0], n2)?;
            check("scale code", sc[1], n2 - 1)?;
            check("scale code", sc[2], n2 - 1)?;
        }
        for p in &streams.second_order {
            check("second-order zero", p.zero2, n2)?;
            if !p.scale2.is_finite() || p.scale2.to_f32() < 0.0 {
                return Err(Error::InvalidLayer("second-order scale must be finite and non-negative"));
            }
        }
        for p in &streams.four_bit {
            check("4-bit zero", p.zero, HIGH_BITS)?;
            if !p.scale.is_finite() || p.scale.to_f32() < 0.0 {
                return Err(Error::InvalidLayer("4-bit scale must be finite and non-negative"));
            }
        }
        outliers.check_plan(&plan, g.rows)?;
        Ok(Self {
            config,
            plan,
            streams,
            outliers,
        })
    }

    pub fn config(&self) -> &LayerConfig {
        &self.config
    }

    pub fn geometry(&self) -> Geometry {
        self.config.geometry()
    }

    pub fn plan(&self) -> &ChannelPlan {
        &self.plan
    }

    pub fn streams(&self) -> &LayerStreams {
        &self.streams
    }

    pub fn outliers(&self) -> &CsrOutliers {
        &self.outliers
    }

    pub fn rows(&self) -> usize {
        self.config.out_channels as usize
    }

    pub fn in_channels(&self) -> usize {
        self.config.in_channels as usize
    }

    /// Tile `k` of `row` when it is a full tile.
    pub fn tile(&self, row: usize, k: usize) -> Option<PackedTile> {
        let g = self.geometry();
        if k >= g.full_tiles {
            return None;
        }
        let i = row * g.full_tiles + k;
        Some(PackedTile {
            main: self.streams.main[i],
            secondary: self.streams.secondary[i],
            meta: self.streams.meta[row * g.two_bit_tiles + k],
        })
    }
}

/// Every quantized field of a layer in logical (row-major) order.
#[derive(Debug, Clone, PartialEq)]
pub struct LogicalLayer {
    /// `rows x two_bit_slots` 2-bit codes.
    pub codes2: Vec<u8>,
    /// `rows x two_bit_groups` first-order zeros.
    pub zeros2: Vec<u8>,
    /// `rows x two_bit_groups` stored scale codes (4/3/3 bits by tile position).
    pub scale_codes: Vec<u8>,
    /// `rows x n4` 4-bit codes.
    pub codes4: Vec<u8>,
    /// `row_blocks x two_bit_groups`, flat index `block * two_bit_groups + group`.
    pub second_order: Vec<SecondOrderParams>,
    /// `rows x four_bit_groups`.
    pub four_bit: Vec<FourBitParams>,
}

impl LogicalLayer {
    pub fn zeroed(g: &Geometry) -> Self {
        Self {
            codes2: vec![0; g.rows * g.two_bit_slots],
            zeros2: vec![0; g.rows * g.two_bit_groups],
            scale_codes: vec![0; g.rows * g.two_bit_groups],
            codes4: vec![0; g.rows * g.n4()],
            second_order: vec![
                SecondOrderParams {
                    zero2: 0,
                    scale2: f16::ZERO
                };
                g.second_order_entries()
            ],
            four_bit: vec![
                FourBitParams {
                    scale: f16::ZERO,
                    zero: 0
                };
                g.four_bit_entries()
            ],
        }
    }
}

pub fn pack_layer(
    config: LayerConfig,
    plan: ChannelPlan,
    logical: &LogicalLayer,
    outliers: CsrOutliers,
) -> Result<PackedLayer> {
    config.validate()?;
    let g = config.geometry();
    expect_len("2-bit codes", g.rows * g.two_bit_slots, logical.codes2.len())?;
    expect_len("2-bit zeros", g.rows * g.two_bit_groups, logical.zeros2.len())?;
    expect_len("scale codes", g.rows * g.two_bit_groups, logical.scale_codes.len())?;
    expect_len("4-bit codes", g.rows * g.n4(), logical.codes4.len())?;
    for &c in &logical.codes4 {
        check("4-bit code", c, HIGH_BITS)?;
    }
    let n4 = g.n4();
    let mut streams = LayerStreams {
        main: Vec::with_capacity(g.main_blocks()),
        secondary: Vec::with_capacity(g.main_blocks()),
        tail2: Vec::with_capacity(g.tail_two_bit_blocks()),
        tail4: Vec::with_capacity(g.tail_four_bit_blocks()),
        meta: Vec::with_capacity(g.meta_words()),
        second_order: logical.second_order.clone(),
        four_bit: logical.four_bit.clone(),
    };
    for r in 0..g.rows {
        let codes2 = &logical.codes2[r * g.two_bit_slots..(r + 1) * g.two_bit_slots];
        let codes4 = &logical.codes4[r * n4..(r + 1) * n4];
        let zeros = &logical.zeros2[r * g.two_bit_groups..(r + 1) * g.two_bit_groups];
        let scodes = &logical.scale_codes[r * g.two_bit_groups..(r + 1) * g.two_bit_groups];
        for k in 0..g.two_bit_tiles {
            let triple = &codes2[k * TWO_BIT_PER_TILE..(k + 1) * TWO_BIT_PER_TILE];
            let z: [u8; 3] = zeros[3 * k..3 * k + 3].try_into().unwrap();
            let s: [u8; 3] = scodes[3 * k..3 * k + 3].try_into().unwrap();
            if k < g.full_tiles {
                let tile = pack_tile(&TileCodes {
                    codes2: triple.try_into().unwrap(),
                    codes4: codes4[k * GROUP..(k + 1) * GROUP].try_into().unwrap(),
                    zeros: z,
                    scodes: s,
                })?;
                streams.main.push(tile.main);
                streams.secondary.push(tile.secondary);
                streams.meta.push(tile.meta);
            } else {
                for &c in triple {
                    check("2-bit code", c, LOW_BITS)?;
                }
                let mut block = TwoBitBlock::default();
                pack_two_bit(triple, &mut block.0);
                streams.tail2.push(block);
                streams.meta.push(pack_meta(z, s)?);
            }
        }
        for k in g.full_tiles..g.four_bit_groups {
            let mut block = FourBitBlock::default();
            pack_nibbles(&codes4[k * GROUP..(k + 1) * GROUP], &mut block.0);
            streams.tail4.push(block);
        }
    }
    PackedLayer::new(config, plan, streams, outliers)
}

pub fn unpack_layer(layer: &PackedLayer) -> LogicalLayer {
    let g = layer.geometry();
    let s = layer.streams();
    let mut out = LogicalLayer::zeroed(&g);
    out.second_order.clone_from(&s.second_order);
    out.four_bit.clone_from(&s.four_bit);
    let n4 = g.n4();
    for r in 0..g.rows {
        let codes2 = &mut out.codes2[r * g.two_bit_slots..(r + 1) * g.two_bit_slots];
        let codes4 = &mut out.codes4[r * n4..(r + 1) * n4];
        for k in 0..g.two_bit_tiles {
            let triple = &mut codes2[k * TWO_BIT_PER_TILE..(k + 1) * TWO_BIT_PER_TILE];
            if k < g.full_tiles {
                let i = r * g.full_tiles + k;
                unpack_two_bit(&s.main[i].0[..12], triple);
                unpack_nibbles(&s.main[i].0[12..], &mut codes4[k * GROUP..k * GROUP + 8]);
                unpack_nibbles(&s.secondary[i].0, &mut codes4[k * GROUP + 8..(k + 1) * GROUP]);
            } else {
                let i = r * (g.two_bit_tiles - g.full_tiles) + (k - g.full_tiles);
                unpack_two_bit(&s.tail2[i].0, triple);
            }
            let (z, sc) = unpack_meta(s.meta[r * g.two_bit_tiles + k]);
            let base = r * g.two_bit_groups + 3 * k;
            out.zeros2[base..base + 3].copy_from_slice(&z);
            out.scale_codes[base..base + 3].copy_from_slice(&sc);
        }
        for k in g.full_tiles..g.four_bit_groups {
            let i = r * (g.four_bit_groups - g.full_tiles) + (k - g.full_tiles);
            unpack_nibbles(&s.tail4[i].0, &mut codes4[k * GROUP..(k + 1) * GROUP]);
        }
    }
    out
}

/// Bits per packed weight tile, main + secondary.
pub const TILE_PAYLOAD_BITS: usize = (16 + 4) * 8;
const _: () = assert!(TILE_PAYLOAD_BITS == 160 && TILE == 64);

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plan::{BitWidth, ChannelPlan};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_tile() {
        let t = pack_tile(&TileCodes::default()).unwrap();
        assert_eq!(t.main.0, [0; 16]);
        assert_eq!(t.secondary.0, [0; 4]);
        assert_eq!(t.meta, 0);
    }

    #[test]
    fn repeating_two_bit_pattern() {
        let mut t = TileCodes::default();
        for (i, c) in t.codes2.iter_mut().enumerate() {
            *c = (i % 4) as u8;
        }
        let p = pack_tile(&t).unwrap();
        assert!(p.main.0[..12].iter().all(|&b| b == 0xE4));
        let back = unpack_tile(&p);
        assert_eq!(&back.codes2[..4], &[0, 1, 2, 3]);
    }

    #[test]
    fn meta_word_layout() {
        let meta = pack_meta([1, 2, 3], [9, 5, 3]).unwrap();
        assert_eq!(meta, 0x7679);
        assert_eq!(meta, 1 + 2 * 4 + 3 * 16 + 9 * 64 + 5 * 1024 + 3 * 8192);
        assert_eq!(unpack_meta(0x7679), ([1, 2, 3], [9, 5, 3]));
        // all 16 bits are used
        assert_eq!(pack_meta([3, 3, 3], [15, 7, 7]).unwrap(), 0xFFFF);
    }

    #[test]
    fn nibble_order() {
        let t = TileCodes {
            codes4: core::array::from_fn(|i| i as u8),
            ..TileCodes::default()
        };
        let p = pack_tile(&t).unwrap();
        assert_eq!(&p.main.0[12..], &[0x10, 0x32, 0x54, 0x76]);
        assert_eq!(p.secondary.0, [0x98, 0xBA, 0xDC, 0xFE]);
    }

    #[test]
    fn out_of_range_codes() {
        let mut t = TileCodes::default();
        t.codes2[3] = 4;
        assert!(matches!(pack_tile(&t), Err(Error::CodeOutOfRange { .. })));
        let mut t = TileCodes::default();
        t.codes4[0] = 16;
        assert!(pack_tile(&t).is_err());
        assert!(pack_meta([0; 3], [16, 0, 0]).is_err());
        assert!(pack_meta([0; 3], [0, 8, 0]).is_err());
        assert!(pack_meta([4, 0, 0], [0; 3]).is_err());
    }

    #[test]
    fn scale_code_compression() {
        assert_eq!(encode_scale_code(0, 13.2, 4), 13);
        assert_eq!(encode_scale_code(0, 17.0, 4), 15);
        assert_eq!(encode_scale_code(1, 13.0, 4), 6);
        assert_eq!(expand_scale_code(1, 6), 13);
        // 12.2 is nearer 13 than 11
        assert_eq!(expand_scale_code(2, encode_scale_code(2, 12.2, 4)), 13);
        assert_eq!(expand_scale_code(2, encode_scale_code(2, 15.0, 4)), 15);
        assert_eq!(expand_scale_code(1, encode_scale_code(1, 0.0, 4)), 1);
        assert_eq!(expand_scale_code(1, encode_scale_code(1, 7.0, 3)), 7);
    }

    proptest! {
        #[test]
        fn odd_codes_within_one_step(x in 0f32..=15.0) {
            let c = expand_scale_code(1, encode_scale_code(1, x, 4)) as f32;
            prop_assert!((c - x).abs() <= 1.0);
            let c0 = expand_scale_code(0, encode_scale_code(0, x, 4)) as f32;
            prop_assert!((c0 - x).abs() <= 0.5);
        }
    }

    #[test]
    fn alignment() {
        assert_eq!(core::mem::align_of::<MainBlock>(), 16);
        assert_eq!(core::mem::size_of::<MainBlock>(), 16);
        assert_eq!(core::mem::size_of::<SecondaryBlock>(), 4);
        let v = [MainBlock::default(); 3];
        assert_eq!(v.as_ptr() as usize % 16, 0);
    }

    fn random_plan(rng: &mut ChaCha8Rng, ic: usize, n4: usize) -> ChannelPlan {
        let mut bits = vec![BitWidth::Two; ic];
        let mut idx: Vec<usize> = (0..ic).collect();
        for i in 0..n4 {
            let j = rng.random_range(i..ic);
            idx.swap(i, j);
            bits[idx[i]] = BitWidth::Four;
        }
        ChannelPlan::from_bits(bits).unwrap()
    }

    pub(crate) fn random_logical(rng: &mut ChaCha8Rng, config: &LayerConfig) -> LogicalLayer {
        let g = config.geometry();
        let n2 = config.n2 as u32;
        let mut l = LogicalLayer::zeroed(&g);
        l.codes2.iter_mut().for_each(|c| *c = rng.random_range(0..4));
        l.zeros2.iter_mut().for_each(|c| *c = rng.random_range(0..4));
        for (i, c) in l.scale_codes.iter_mut().enumerate() {
            let bits = if (i % g.two_bit_groups).is_multiple_of(3) { n2 } else { n2 - 1 };
            *c = rng.random_range(0..1u8 << bits);
        }
        l.codes4.iter_mut().for_each(|c| *c = rng.random_range(0..16));
        for p in l.second_order.iter_mut() {
            *p = SecondOrderParams {
                zero2: rng.random_range(0..1u8 << n2),
                scale2: f16::from_f32(rng.random_range(0.0f32..1.0)),
            };
        }
        for p in l.four_bit.iter_mut() {
            *p = FourBitParams {
                scale: f16::from_f32(rng.random_range(0.0f32..1.0)),
                zero: rng.random_range(0..16),
            };
        }
        l
    }

    fn config_for(plan: &ChannelPlan, rows: usize, g2: u32) -> LayerConfig {
        LayerConfig {
            n2: 4,
            g2,
            in_channels: plan.in_channels() as u32,
            out_channels: rows as u32,
            pads: plan.pads() as u32,
            n4: plan.n4() as u32,
            alpha: 0.25,
            outlier_ratio: 0.0,
        }
    }

    #[test]
    fn layer_sizes_16x64() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let plan = random_plan(&mut rng, 64, 16);
        let config = config_for(&plan, 16, 16);
        let logical = random_logical(&mut rng, &config);
        let layer = pack_layer(config, plan, &logical, CsrOutliers::empty(16)).unwrap();
        let s = layer.streams();
        assert_eq!(s.main.len() * 16, 256);
        assert_eq!(s.secondary.len() * 4, 64);
        assert_eq!(s.meta.len() * 2, 32);
        assert_eq!(s.second_order.len(), 3);
        assert_eq!(s.four_bit.len(), 16);
        assert!(s.tail2.is_empty() && s.tail4.is_empty());
        assert_eq!(unpack_layer(&layer), logical);
        // payload density: 160 bits per 64 weights
        assert_eq!((s.main.len() * 16 + s.secondary.len() * 4) * 8, 16 * 64 * 5 / 2);
    }

    #[test]
    fn doubling_rows_doubles_streams() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let plan = random_plan(&mut rng, 128, 32);
        let a = config_for(&plan, 16, 16);
        let b = config_for(&plan, 32, 16);
        let la = pack_layer(a, plan.clone(), &random_logical(&mut rng, &a), CsrOutliers::empty(16)).unwrap();
        let lb = pack_layer(b, plan, &random_logical(&mut rng, &b), CsrOutliers::empty(32)).unwrap();
        assert_eq!(lb.streams().main.len(), 2 * la.streams().main.len());
        assert_eq!(lb.streams().secondary.len(), 2 * la.streams().secondary.len());
        assert_eq!(lb.streams().meta.len(), 2 * la.streams().meta.len());
    }

    #[test]
    fn tail_streams_when_counts_differ() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // alpha = 0: only 2-bit tail blocks
        let plan = random_plan(&mut rng, 96, 0);
        let config = config_for(&plan, 5, 4);
        let logical = random_logical(&mut rng, &config);
        let layer = pack_layer(config, plan, &logical, CsrOutliers::empty(5)).unwrap();
        assert!(layer.streams().main.is_empty());
        assert_eq!(layer.streams().tail2.len(), 10);
        assert_eq!(unpack_layer(&layer), logical);
        // more 4-bit groups than 2-bit triples
        let plan = random_plan(&mut rng, 96, 64);
        let config = config_for(&plan, 3, 2);
        let logical = random_logical(&mut rng, &config);
        let layer = pack_layer(config, plan, &logical, CsrOutliers::empty(3)).unwrap();
        assert_eq!(layer.streams().main.len(), 3);
        assert_eq!(layer.streams().tail4.len(), 9);
        assert_eq!(unpack_layer(&layer), logical);
    }

    #[test]
    fn rejects_mismatched_dimensions() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let plan = random_plan(&mut rng, 64, 16);
        let config = config_for(&plan, 16, 16);
        let mut logical = random_logical(&mut rng, &config);
        logical.codes4.pop();
        assert!(matches!(
            pack_layer(config, plan, &logical, CsrOutliers::empty(16)),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    proptest! {
        #[test]
        fn tile_roundtrip(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = TileCodes {
                codes2: core::array::from_fn(|_| rng.random_range(0..4)),
                codes4: core::array::from_fn(|_| rng.random_range(0..16)),
                zeros: core::array::from_fn(|_| rng.random_range(0..4)),
                scodes: [rng.random_range(0..16), rng.random_range(0..8), rng.random_range(0..8)],
            };
            prop_assert_eq!(unpack_tile(&pack_tile(&t).unwrap()), t);
        }

        #[test]
        fn layer_roundtrip(seed in any::<u64>(), rows in 1usize..40, ic in 1usize..300, alpha in 0f64..0.6, g2 in 1u32..20) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n4 = match crate::plan::four_bit_count(alpha, ic) { Ok(n) => n, Err(_) => return Ok(()) };
            let plan = random_plan(&mut rng, ic, n4);
            let config = config_for(&plan, rows, g2);
            let logical = random_logical(&mut rng, &config);
            let layer = pack_layer(config, plan, &logical, CsrOutliers::empty(rows)).unwrap();
            prop_assert_eq!(unpack_layer(&layer), logical);
        }
    }
}
