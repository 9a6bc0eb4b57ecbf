//! `QWL1` container: a fixed header, a section table and 16-byte aligned
//! sections. All integers are little-endian.
//!
//! ```text
//! 0   magic "QWL1"
//! 4   u16 version
//! 6   config: u8 N, u8 N2, u16 g1, u32 g2, u16 tile, u16 reserved,
//!     u32 IC, u32 OC, u32 pads, u32 n4, u32 outlier count,
//!     f32 alpha, f32 outlier ratio
//! 46  u16 section count, u16 reserved
//! 50  section entries: u16 id, u16 reserved, u32 offset, u32 length, u32 crc32
//! ..  u32 crc32 of everything above
//! ```
//!
//! An empty CSR has a zero-length `row_ptr` section.

use std::fs;
use std::path::Path;

use half::f16;
use qweight_core::bitpack::{
    FourBitBlock, FourBitParams, LayerConfig, LayerStreams, MainBlock, PackedLayer,
    SecondOrderParams, SecondaryBlock, TwoBitBlock, LOW_BITS,
};
use qweight_core::outliers::CsrOutliers;
use qweight_core::plan::{BitWidth, ChannelPlan, GROUP, TILE};

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"QWL1";
pub const VERSION: u16 = 1;
const CONFIG_LEN: usize = 40;
const ENTRY_LEN: usize = 16;
const TABLE_START: usize = 6 + CONFIG_LEN + 4;
const ALIGN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u16)]
pub enum SectionId {
    Plan = 1,
    Perm,
    Main,
    Secondary,
    Tail2,
    Tail4,
    Meta,
    SecondOrder,
    FourBit,
    RowPtr,
    ColInd,
    Values,
}

impl SectionId {
    pub const ALL: [SectionId; 12] = [
        Self::Plan,
        Self::Perm,
        Self::Main,
        Self::Secondary,
        Self::Tail2,
        Self::Tail4,
        Self::Meta,
        Self::SecondOrder,
        Self::FourBit,
        Self::RowPtr,
        Self::ColInd,
        Self::Values,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Plan => "plan",
            Self::Perm => "perm",
            Self::Main => "main",
            Self::Secondary => "secondary",
            Self::Tail2 => "tail2",
            Self::Tail4 => "tail4",
            Self::Meta => "meta",
            Self::SecondOrder => "second_order",
            Self::FourBit => "four_bit",
            Self::RowPtr => "row_ptr",
            Self::ColInd => "col_ind",
            Self::Values => "values",
        }
    }

    /// Sections counted as stored weight payload (everything but the plan).
    pub fn is_payload(self) -> bool {
        !matches!(self, Self::Plan | Self::Perm)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SectionEntry {
    pub id: SectionId,
    pub offset: u32,
    pub len: u32,
    pub crc: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Header {
    pub config: LayerConfig,
    pub outlier_count: u32,
    pub sections: Vec<SectionEntry>,
}

impl Header {
    /// Stored payload bits, section padding excluded.
    pub fn payload_bits(&self) -> u64 {
        self.sections
            .iter()
            .filter(|s| s.id.is_payload())
            .map(|s| s.len as u64 * 8)
            .sum()
    }
}

fn header_len() -> usize {
    TABLE_START + SectionId::ALL.len() * ENTRY_LEN + 4
}

fn section_bytes(layer: &PackedLayer, id: SectionId) -> Vec<u8> {
    let s = layer.streams();
    let csr = layer.outliers();
    let mut out = Vec::new();
    match id {
        SectionId::Plan => {
            let bits = layer.plan().bits();
            out.resize(bits.len().div_ceil(8), 0);
            for (c, b) in bits.iter().enumerate() {
                if *b == BitWidth::Four {
                    out[c / 8] |= 1 << (c % 8);
                }
            }
        }
        SectionId::Perm => {
            for p in layer.plan().permutation().forward() {
                out.extend_from_slice(&p.to_le_bytes());
            }
        }
        SectionId::Main => s.main.iter().for_each(|b| out.extend_from_slice(&b.0)),
        SectionId::Secondary => s.secondary.iter().for_each(|b| out.extend_from_slice(&b.0)),
        SectionId::Tail2 => s.tail2.iter().for_each(|b| out.extend_from_slice(&b.0)),
        SectionId::Tail4 => s.tail4.iter().for_each(|b| out.extend_from_slice(&b.0)),
        SectionId::Meta => s.meta.iter().for_each(|m| out.extend_from_slice(&m.to_le_bytes())),
        SectionId::SecondOrder => {
            for p in &s.second_order {
                out.push(p.zero2);
                out.extend_from_slice(&p.scale2.to_bits().to_le_bytes());
            }
        }
        SectionId::FourBit => {
            for p in &s.four_bit {
                out.extend_from_slice(&p.scale.to_bits().to_le_bytes());
                out.push(p.zero);
            }
        }
        SectionId::RowPtr => {
            if csr.nnz() > 0 {
                csr.row_ptr().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
            }
        }
        SectionId::ColInd => csr.col_ind().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        SectionId::Values => csr
            .values()
            .iter()
            .for_each(|v| out.extend_from_slice(&v.to_bits().to_le_bytes())),
    }
    out
}

pub fn encode(layer: &PackedLayer) -> Vec<u8> {
    let c = layer.config();
    let mut out = Vec::with_capacity(header_len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(LOW_BITS as u8);
    out.push(c.n2);
    out.extend_from_slice(&(GROUP as u16).to_le_bytes());
    out.extend_from_slice(&c.g2.to_le_bytes());
    out.extend_from_slice(&(TILE as u16).to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes());
    for v in [c.in_channels, c.out_channels, c.pads, c.n4, layer.outliers().nnz() as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&c.alpha.to_le_bytes());
    out.extend_from_slice(&c.outlier_ratio.to_le_bytes());
    out.extend_from_slice(&(SectionId::ALL.len() as u16).to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes());

    let bodies: Vec<Vec<u8>> = SectionId::ALL.iter().map(|&id| section_bytes(layer, id)).collect();
    let mut offset = header_len().next_multiple_of(ALIGN);
    for (&id, body) in SectionId::ALL.iter().zip(&bodies) {
        out.extend_from_slice(&(id as u16).to_le_bytes());
        out.extend_from_slice(&0u16.to_le_bytes());
        out.extend_from_slice(&(offset as u32).to_le_bytes());
        out.extend_from_slice(&(body.len() as u32).to_le_bytes());
        out.extend_from_slice(&crc32fast::hash(body).to_le_bytes());
        offset = (offset + body.len()).next_multiple_of(ALIGN);
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    for body in &bodies {
        out.resize(out.len().next_multiple_of(ALIGN), 0);
        out.extend_from_slice(body);
    }
    // empty trailing sections point at the aligned end
    out.resize(out.len().next_multiple_of(ALIGN), 0);
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        let b = self
            .bytes
            .get(self.pos..self.pos + N)
            .ok_or(Error::Truncated { section: "header" })?;
        self.pos += N;
        Ok(b.try_into().unwrap())
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take::<1>()?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take()?))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take()?))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take()?))
    }
}

/// Parses and checks the header and section table without touching section
/// contents.
pub fn read_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < 4 {
        return Err(Error::Truncated { section: "header" });
    }
    if bytes[..4] != MAGIC {
        return Err(Error::BadMagic);
    }
    let mut r = Reader { bytes, pos: 4 };
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let n = r.u8()?;
    let n2 = r.u8()?;
    let g1 = r.u16()?;
    let g2 = r.u32()?;
    let tile = r.u16()?;
    let _reserved = r.u16()?;
    let in_channels = r.u32()?;
    let out_channels = r.u32()?;
    let pads = r.u32()?;
    let n4 = r.u32()?;
    let outlier_count = r.u32()?;
    let alpha = r.f32()?;
    let outlier_ratio = r.f32()?;
    let count = r.u16()? as usize;
    let _reserved = r.u16()?;
    if count != SectionId::ALL.len() {
        return Err(Error::inconsistent("header", format!("expected 12 sections, found {count}")));
    }
    let mut raw = Vec::with_capacity(count);
    for _ in 0..count {
        let id = r.u16()?;
        let _reserved = r.u16()?;
        raw.push((id, r.u32()?, r.u32()?, r.u32()?));
    }
    let end = r.pos;
    let crc = r.u32()?;
    if crc32fast::hash(&bytes[..end]) != crc {
        return Err(Error::ChecksumMismatch { section: "header" });
    }
    if n as u32 != LOW_BITS || g1 as usize != GROUP || tile as usize != TILE {
        return Err(Error::inconsistent(
            "header",
            format!("unsupported layout N={n} g1={g1} tile={tile}"),
        ));
    }
    let config = LayerConfig {
        n2,
        g2,
        in_channels,
        out_channels,
        pads,
        n4,
        alpha,
        outlier_ratio,
    };
    config
        .validate()
        .map_err(|e| Error::inconsistent("header", e.to_string()))?;
    let mut sections = Vec::with_capacity(count);
    for (&expected, (id, offset, len, crc)) in SectionId::ALL.iter().zip(raw) {
        if id != expected as u16 {
            return Err(Error::inconsistent(
                "header",
                format!("section {id} out of order, expected {}", expected as u16),
            ));
        }
        sections.push(SectionEntry {
            id: expected,
            offset,
            len,
            crc,
        });
    }
    Ok(Header {
        config,
        outlier_count,
        sections,
    })
}

fn expected_len(h: &Header, id: SectionId) -> usize {
    let g = h.config.geometry();
    let nnz = h.outlier_count as usize;
    match id {
        SectionId::Plan => (h.config.in_channels as usize).div_ceil(8),
        SectionId::Perm => g.padded_channels * 4,
        SectionId::Main => g.main_blocks() * 16,
        SectionId::Secondary => g.main_blocks() * 4,
        SectionId::Tail2 => g.tail_two_bit_blocks() * 12,
        SectionId::Tail4 => g.tail_four_bit_blocks() * 8,
        SectionId::Meta => g.meta_words() * 2,
        SectionId::SecondOrder => g.second_order_entries() * 3,
        SectionId::FourBit => g.four_bit_entries() * 3,
        SectionId::RowPtr => {
            if nnz == 0 {
                0
            } else {
                (g.rows + 1) * 4
            }
        }
        SectionId::ColInd | SectionId::Values => nnz * 2,
    }
}

fn blocks<const N: usize, T>(b: &[u8], f: impl Fn([u8; N]) -> T) -> Vec<T> {
    b.chunks_exact(N).map(|c| f(c.try_into().unwrap())).collect()
}

pub fn decode(bytes: &[u8]) -> Result<PackedLayer> {
    let h = read_header(bytes)?;
    let mut body: Vec<&[u8]> = Vec::with_capacity(h.sections.len());
    for s in &h.sections {
        let name = s.id.name();
        let start = s.offset as usize;
        let end = start + s.len as usize;
        if end > bytes.len() {
            return Err(Error::Truncated { section: name });
        }
        let data = &bytes[start..end];
        if crc32fast::hash(data) != s.crc {
            return Err(Error::ChecksumMismatch { section: name });
        }
        let expected = expected_len(&h, s.id);
        if data.len() != expected {
            return Err(Error::inconsistent(
                name,
                format!("length {} but the config implies {expected}", data.len()),
            ));
        }
        body.push(data);
    }
    let sec = |id: SectionId| body[id as usize - 1];
    let ic = h.config.in_channels as usize;
    let bits: Vec<BitWidth> = (0..ic)
        .map(|c| {
            if sec(SectionId::Plan)[c / 8] >> (c % 8) & 1 == 1 {
                BitWidth::Four
            } else {
                BitWidth::Two
            }
        })
        .collect();
    let plan = ChannelPlan::from_bits(bits).map_err(|e| Error::inconsistent("plan", e.to_string()))?;
    let perm: Vec<u32> = blocks(sec(SectionId::Perm), u32::from_le_bytes);
    if perm != plan.permutation().forward() {
        return Err(Error::inconsistent("perm", "permutation does not match the plan bitmap"));
    }
    let half = |b: [u8; 2]| f16::from_bits(u16::from_le_bytes(b));
    let streams = LayerStreams {
        main: blocks(sec(SectionId::Main), MainBlock),
        secondary: blocks(sec(SectionId::Secondary), SecondaryBlock),
        tail2: blocks(sec(SectionId::Tail2), TwoBitBlock),
        tail4: blocks(sec(SectionId::Tail4), FourBitBlock),
        meta: blocks(sec(SectionId::Meta), u16::from_le_bytes),
        second_order: blocks(sec(SectionId::SecondOrder), |b: [u8; 3]| SecondOrderParams {
            zero2: b[0],
            scale2: half([b[1], b[2]]),
        }),
        four_bit: blocks(sec(SectionId::FourBit), |b: [u8; 3]| FourBitParams {
            scale: half([b[0], b[1]]),
            zero: b[2],
        }),
    };
    let rows = h.config.out_channels as usize;
    let csr = if h.outlier_count == 0 {
        CsrOutliers::empty(rows)
    } else {
        CsrOutliers::from_parts(
            blocks(sec(SectionId::RowPtr), u32::from_le_bytes),
            blocks(sec(SectionId::ColInd), u16::from_le_bytes),
            blocks(sec(SectionId::Values), half),
        )
        .map_err(|e| Error::inconsistent("row_ptr", e.to_string()))?
    };
    PackedLayer::new(h.config, plan, streams, csr).map_err(|e| Error::inconsistent("layer", e.to_string()))
}

pub fn write(path: &Path, layer: &PackedLayer) -> Result<()> {
    fs::write(path, encode(layer)).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<PackedLayer> {
    decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
