//! PCQ1 packed artifact format and bits-per-weight accounting.
//!
//! Layout, little-endian scalars, bitstreams MSB-first within bytes, every
//! section padded to a byte boundary:
//!
//! ```text
//! magic "PCQ1" | u32 version | u32 tensor_count
//! per tensor:
//!   u16 name_len | name (UTF-8)
//!   u32 rows | u32 cols
//!   u8 b_common | u8 b_outlier | u32 group_size | f64 alpha
//!   u8 clip tag (0 none, 1 per_group, 2 per_tensor) | f64 clip_percentile
//!   u64 common_group_count | u64 outlier_count
//!   section 1: outlier count per logical group, unsigned LEB128 each
//!   section 2: common group params, (u16 scale, u16 offset) binary16 bits
//!   section 3: outlier group params, same encoding
//!   section 4: common codes, b_common bits each
//!   section 5: outliers, (log2 g)-bit intra index + b_outlier-bit code each
//! ```
//!
//! `unpack(pack(q))` reproduces `q` exactly: codes, indices, and parameter
//! bits are all preserved.
//!
//! The accounting distinguishes the closed-form per-weight cost
//! ([`avg_bits`], which charges each class its code bits plus 2x16 bits of
//! group params per `group_size` weights plus `log2 g` index bits per
//! outlier) from the bits a decoder actually needs ([`measured_bits_per_weight`],
//! which additionally pays for the per-group outlier counts). The measured
//! value is always the larger one.

use thiserror::Error;

use crate::parallel;
use crate::quantizer::{ClipScope, GroupParams, OutlierRecord, QuantConfig, QuantizedTensor};

pub const PCQ1_MAGIC: [u8; 4] = *b"PCQ1";
pub const PCQ1_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PackError {
    #[error("not a PCQ1 payload: magic bytes {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("corrupt PCQ1 payload: {0}")]
    Corrupt(String),
}

/// Average bits per weight under the closed-form accounting.
pub fn avg_bits(config: &QuantConfig) -> f64 {
    let g = config.group_size as f64;
    let params_share = 2.0 * 16.0 / g;
    let common = config.b_common as f64 + params_share;
    let outlier = config.b_outlier as f64 + (config.group_size.ilog2() as f64) + params_share;
    common * (1.0 - config.alpha) + outlier * config.alpha
}

/// Payload bits a decoder needs per weight: the five sections (including
/// per-group outlier counts and byte padding), divided by the weight count.
pub fn measured_bits_per_weight(q: &QuantizedTensor) -> f64 {
    let s = SectionSizes::of(q);
    (s.total_bytes() * 8) as f64 / q.weight_count() as f64
}

/// Byte sizes of the five payload sections of one tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SectionSizes {
    pub group_counts: usize,
    pub common_params: usize,
    pub outlier_params: usize,
    pub common_codes: usize,
    pub outlier_stream: usize,
}

impl SectionSizes {
    pub fn of(q: &QuantizedTensor) -> Self {
        let counts = per_group_counts(q);
        let group_counts = counts.iter().map(|&c| leb128_len(c)).sum();
        let index_bits = q.config.index_bits() as usize;
        Self {
            group_counts,
            common_params: q.common_group_params.len() * 4,
            outlier_params: q.outlier_group_params.len() * 4,
            common_codes: (q.common_codes.len() * q.config.b_common as usize).div_ceil(8),
            outlier_stream: (q.outliers.len() * (index_bits + q.config.b_outlier as usize))
                .div_ceil(8),
        }
    }

    pub fn total_bytes(&self) -> usize {
        self.group_counts
            + self.common_params
            + self.outlier_params
            + self.common_codes
            + self.outlier_stream
    }
}

fn per_group_counts(q: &QuantizedTensor) -> Vec<u64> {
    let mut counts = vec![0u64; q.num_common_groups()];
    for rec in &q.outliers {
        counts[rec.group_index as usize] += 1;
    }
    counts
}

fn leb128_len(mut v: u64) -> usize {
    let mut n = 1;
    while v >= 0x80 {
        v >>= 7;
        n += 1;
    }
    n
}

/// Packs a group of quantized tensors into one PCQ1 artifact.
pub fn pack_artifact(tensors: &[QuantizedTensor]) -> Vec<u8> {
    let blocks = parallel::map_range(tensors.len(), |i| encode_tensor(&tensors[i]));
    let mut out = Vec::with_capacity(12 + blocks.iter().map(Vec::len).sum::<usize>());
    out.extend_from_slice(&PCQ1_MAGIC);
    out.extend_from_slice(&PCQ1_VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for b in blocks {
        out.extend_from_slice(&b);
    }
    out
}

/// Packs a single tensor (an artifact with tensor count 1).
pub fn pack(q: &QuantizedTensor) -> Vec<u8> {
    pack_artifact(std::slice::from_ref(q))
}

/// Inverse of [`pack_artifact`].
pub fn unpack_artifact(bytes: &[u8]) -> Result<Vec<QuantizedTensor>, PackError> {
    let mut cur = ByteReader { bytes, pos: 0 };
    let magic = cur.take::<4>()?;
    if magic != PCQ1_MAGIC {
        return Err(PackError::BadMagic(magic));
    }
    let _version = cur.u32()?;
    let count = cur.u32()?;
    let mut tensors = Vec::with_capacity(count.min(1024) as usize);
    for _ in 0..count {
        tensors.push(decode_tensor(&mut cur)?);
    }
    if cur.pos != bytes.len() {
        return Err(PackError::Corrupt(format!(
            "{} trailing bytes after last tensor",
            bytes.len() - cur.pos
        )));
    }
    Ok(tensors)
}

/// Inverse of [`pack`]; the payload must hold exactly one tensor.
pub fn unpack(bytes: &[u8]) -> Result<QuantizedTensor, PackError> {
    let mut tensors = unpack_artifact(bytes)?;
    match tensors.len() {
        1 => Ok(tensors.pop().unwrap()),
        n => Err(PackError::Corrupt(format!("expected 1 tensor, found {n}"))),
    }
}

fn encode_tensor(q: &QuantizedTensor) -> Vec<u8> {
    assert!(q.validate().is_ok(), "cannot pack an invalid tensor");
    let sections = SectionSizes::of(q);
    let mut out = Vec::with_capacity(64 + q.name.len() + sections.total_bytes());

    out.extend_from_slice(&(q.name.len() as u16).to_le_bytes());
    out.extend_from_slice(q.name.as_bytes());
    out.extend_from_slice(&q.rows.to_le_bytes());
    out.extend_from_slice(&q.cols.to_le_bytes());
    out.push(q.config.b_common);
    out.push(q.config.b_outlier);
    out.extend_from_slice(&q.config.group_size.to_le_bytes());
    out.extend_from_slice(&q.config.alpha.to_le_bytes());
    let (clip_tag, clip_p) = match (q.config.clip_percentile, q.config.clip_scope) {
        (None, _) => (0u8, 1.0),
        (Some(p), ClipScope::PerGroup) => (1, p),
        (Some(p), ClipScope::PerTensor) => (2, p),
    };
    out.push(clip_tag);
    out.extend_from_slice(&clip_p.to_le_bytes());
    out.extend_from_slice(&(q.num_common_groups() as u64).to_le_bytes());
    out.extend_from_slice(&(q.outliers.len() as u64).to_le_bytes());

    // section 1: per-group outlier counts
    for c in per_group_counts(q) {
        write_leb128(&mut out, c);
    }
    // sections 2 and 3: params
    for p in &q.common_group_params {
        out.extend_from_slice(&p.scale().to_bits().to_le_bytes());
        out.extend_from_slice(&p.offset().to_bits().to_le_bytes());
    }
    for p in &q.outlier_group_params {
        out.extend_from_slice(&p.scale().to_bits().to_le_bytes());
        out.extend_from_slice(&p.offset().to_bits().to_le_bytes());
    }
    // section 4: common codes
    let mut bits = BitWriter::new(&mut out);
    for &c in &q.common_codes {
        bits.write(c as u32, q.config.b_common as u32);
    }
    bits.finish();
    // section 5: outlier stream
    let index_bits = q.config.index_bits();
    let mut bits = BitWriter::new(&mut out);
    for rec in &q.outliers {
        bits.write(rec.intra_index, index_bits);
        bits.write(rec.code as u32, q.config.b_outlier as u32);
    }
    bits.finish();
    out
}

fn decode_tensor(cur: &mut ByteReader) -> Result<QuantizedTensor, PackError> {
    let name_len = cur.u16()? as usize;
    let name = std::str::from_utf8(cur.slice(name_len)?)
        .map_err(|_| PackError::Corrupt("tensor name is not UTF-8".into()))?
        .to_owned();
    let rows = cur.u32()?;
    let cols = cur.u32()?;
    let b_common = cur.u8()?;
    let b_outlier = cur.u8()?;
    let group_size = cur.u32()?;
    let alpha = cur.f64()?;
    let clip_tag = cur.u8()?;
    let clip_p = cur.f64()?;
    let config = QuantConfig {
        b_common,
        b_outlier,
        group_size,
        alpha,
        clip_percentile: match clip_tag {
            0 => None,
            1 | 2 => Some(clip_p),
            t => return Err(PackError::Corrupt(format!("unknown clip tag {t}"))),
        },
        clip_scope: if clip_tag == 2 {
            ClipScope::PerTensor
        } else {
            ClipScope::PerGroup
        },
    };
    config
        .validate()
        .map_err(|e| PackError::Corrupt(e.to_string()))?;
    if rows == 0 || cols == 0 {
        return Err(PackError::Corrupt(format!("bad shape {rows}x{cols}")));
    }

    let n = rows as usize * cols as usize;
    let groups_per_row = cols.div_ceil(group_size) as usize;
    let num_groups = rows as usize * groups_per_row;
    let declared_groups = cur.u64()? as usize;
    if declared_groups != num_groups {
        return Err(PackError::Corrupt(format!(
            "declared {declared_groups} groups, shape implies {num_groups}"
        )));
    }
    let n_outliers = cur.u64()? as usize;
    if n_outliers > n {
        return Err(PackError::Corrupt(format!(
            "{n_outliers} outliers for {n} weights"
        )));
    }

    // Capped preallocations: sizes are attacker-controlled until the byte
    // reads themselves fail on a short payload.
    let mut counts = Vec::with_capacity(num_groups.min(1 << 20));
    let mut total = 0u64;
    for _ in 0..num_groups {
        let c = cur.leb128()?;
        total = total
            .checked_add(c)
            .ok_or_else(|| PackError::Corrupt("group counts overflow".into()))?;
        counts.push(c);
    }
    if total != n_outliers as u64 {
        return Err(PackError::Corrupt(format!(
            "group counts sum to {total}, expected {n_outliers}"
        )));
    }

    let mut read_params = |count: usize| -> Result<Vec<GroupParams>, PackError> {
        let mut v = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let scale = cur.u16()?;
            let offset = cur.u16()?;
            v.push(GroupParams::from_bits(scale, offset));
        }
        Ok(v)
    };
    let common_group_params = read_params(num_groups)?;
    let outlier_group_params = read_params(n_outliers.div_ceil(group_size as usize))?;

    let stream_bits = |count: usize, per: usize| {
        count
            .checked_mul(per)
            .ok_or_else(|| PackError::Corrupt("declared stream size overflows".into()))
    };
    let n_common = n - n_outliers;
    let mut bits = BitReader::new(cur, stream_bits(n_common, b_common as usize)?)?;
    let mut common_codes = Vec::with_capacity(n_common.min(1 << 24));
    for _ in 0..n_common {
        common_codes.push(bits.read(b_common as u32) as u8);
    }
    bits.finish();

    let index_bits = config.index_bits();
    let mut bits = BitReader::new(
        cur,
        stream_bits(n_outliers, (index_bits + b_outlier as u32) as usize)?,
    )?;
    let mut outliers = Vec::with_capacity(n_outliers.min(1 << 24));
    for (gi, &count) in counts.iter().enumerate() {
        let mut prev_intra = None;
        for _ in 0..count {
            let intra_index = bits.read(index_bits);
            let code = bits.read(b_outlier as u32) as u8;
            if prev_intra.is_some_and(|p| p >= intra_index) {
                return Err(PackError::Corrupt(format!(
                    "outlier indices not ascending in group {gi}"
                )));
            }
            prev_intra = Some(intra_index);
            outliers.push(OutlierRecord {
                group_index: gi as u32,
                intra_index,
                code,
            });
        }
    }
    bits.finish();

    let q = QuantizedTensor {
        name,
        rows,
        cols,
        config,
        common_codes,
        common_group_params,
        outliers,
        outlier_group_params,
    };
    q.validate().map_err(|e| PackError::Corrupt(e.to_string()))?;
    Ok(q)
}

// MSB-first bit packing

struct BitWriter<'a> {
    out: &'a mut Vec<u8>,
    acc: u32,
    nbits: u32,
}

impl<'a> BitWriter<'a> {
    fn new(out: &'a mut Vec<u8>) -> Self {
        Self {
            out,
            acc: 0,
            nbits: 0,
        }
    }

    fn write(&mut self, value: u32, bits: u32) {
        debug_assert!((1..=16).contains(&bits) && value < (1 << bits));
        self.acc = (self.acc << bits) | value;
        self.nbits += bits;
        while self.nbits >= 8 {
            self.out.push((self.acc >> (self.nbits - 8)) as u8);
            self.nbits -= 8;
        }
    }

    /// Pads the tail with zero bits up to the next byte boundary.
    fn finish(self) {
        if self.nbits > 0 {
            self.out.push((self.acc << (8 - self.nbits)) as u8);
        }
    }
}

struct BitReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    acc: u32,
    nbits: u32,
}

impl<'a> BitReader<'a> {
    /// Claims the padded byte span holding `total_bits` from the reader.
    fn new(cur: &mut ByteReader<'a>, total_bits: usize) -> Result<Self, PackError> {
        let bytes = cur.slice(total_bits.div_ceil(8))?;
        Ok(Self {
            bytes,
            pos: 0,
            acc: 0,
            nbits: 0,
        })
    }

    fn read(&mut self, bits: u32) -> u32 {
        while self.nbits < bits {
            // Sizing in `new` guarantees the bytes are present.
            self.acc = (self.acc << 8) | self.bytes[self.pos] as u32;
            self.pos += 1;
            self.nbits += 8;
        }
        let v = (self.acc >> (self.nbits - bits)) & ((1 << bits) - 1);
        self.nbits -= bits;
        v
    }

    fn finish(self) {}
}

fn write_leb128(out: &mut Vec<u8>, mut v: u64) {
    loop {
        let byte = (v & 0x7f) as u8;
        v >>= 7;
        if v == 0 {
            out.push(byte);
            return;
        }
        out.push(byte | 0x80);
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn slice(&mut self, n: usize) -> Result<&'a [u8], PackError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| PackError::Corrupt("payload shorter than declared".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn take<const N: usize>(&mut self) -> Result<[u8; N], PackError> {
        Ok(self.slice(N)?.try_into().unwrap())
    }

    fn u8(&mut self) -> Result<u8, PackError> {
        Ok(self.take::<1>()?[0])
    }

    fn u16(&mut self) -> Result<u16, PackError> {
        Ok(u16::from_le_bytes(self.take()?))
    }

    fn u32(&mut self) -> Result<u32, PackError> {
        Ok(u32::from_le_bytes(self.take()?))
    }

    fn u64(&mut self) -> Result<u64, PackError> {
        Ok(u64::from_le_bytes(self.take()?))
    }

    fn f64(&mut self) -> Result<f64, PackError> {
        Ok(f64::from_le_bytes(self.take()?))
    }

    fn leb128(&mut self) -> Result<u64, PackError> {
        let mut v = 0u64;
        let mut shift = 0u32;
        loop {
            let byte = self.u8()?;
            if shift >= 63 && byte > 1 {
                return Err(PackError::Corrupt("LEB128 value overflows u64".into()));
            }
            v |= ((byte & 0x7f) as u64) << shift;
            if byte & 0x80 == 0 {
                return Ok(v);
            }
            shift += 7;
        }
    }
}
