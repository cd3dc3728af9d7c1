//! `.sct` container: a 21-byte header followed by one payload per
//! iteration, with no length fields.
//!
//! ```text
//! offset size field
//!      0    4 magic "SCT1"
//!      4    1 format version (1)
//!      5    2 true height, u16 LE
//!      7    2 true width, u16 LE
//!      9    1 iterations K
//!     10    1 bits per tile B
//!     11    1 tile size
//!     12    1 flags, bit 0 = stop-code masking enabled
//!     13    8 model config hash, u64 LE
//!     21      payload 1 .. payload K
//! ```
//!
//! Payload `k` holds `B` bits for every tile not stopped before `k`, tiles in
//! raster order, bits in channel order, packed MSB-first and zero-filled to a
//! byte boundary. Its length follows from the codes already read: a tile
//! whose code is all zero at `k` is absent from payloads `k+1..K`. The
//! `.sct.dz` form is the same bytes inside a gzip (DEFLATE) stream.

use std::io::{Read, Write};

use flate2::read::GzDecoder;
use flate2::{Compression, GzBuilder};

use crate::code::CodeTensor;
use crate::error::BitstreamError;
use crate::mask::{decoder_mask_from_codes, TileMask};

pub const MAGIC: [u8; 4] = *b"SCT1";
pub const FORMAT_VERSION: u8 = 1;
pub const HEADER_LEN: usize = 21;
pub const FLAG_SCT: u8 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SctHeader {
    pub version: u8,
    pub true_h: u16,
    pub true_w: u16,
    pub iterations: u8,
    pub depth: u8,
    pub tile_size: u8,
    pub flags: u8,
    pub config_hash: u64,
}

impl SctHeader {
    pub fn new(
        true_h: usize,
        true_w: usize,
        iterations: usize,
        depth: usize,
        tile_size: usize,
        sct: bool,
        config_hash: u64,
    ) -> Result<Self, BitstreamError> {
        let narrow = |v: usize, max: usize, what: &str| {
            if v == 0 || v > max {
                Err(BitstreamError::Header(format!(
                    "{what} {v} outside 1..={max}"
                )))
            } else {
                Ok(v)
            }
        };
        Ok(SctHeader {
            version: FORMAT_VERSION,
            true_h: narrow(true_h, u16::MAX as usize, "height")? as u16,
            true_w: narrow(true_w, u16::MAX as usize, "width")? as u16,
            iterations: narrow(iterations, 255, "iterations")? as u8,
            depth: narrow(depth, 255, "code depth")? as u8,
            tile_size: narrow(tile_size, 255, "tile size")? as u8,
            flags: if sct { FLAG_SCT } else { 0 },
            config_hash,
        })
    }

    pub fn sct(&self) -> bool {
        self.flags & FLAG_SCT != 0
    }

    /// `(tiles_h, tiles_w)` after padding to the tile grid.
    pub fn grid(&self) -> (usize, usize) {
        let t = self.tile_size as usize;
        (
            (self.true_h as usize).div_ceil(t),
            (self.true_w as usize).div_ceil(t),
        )
    }

    pub fn padded_size(&self) -> (usize, usize) {
        let (th, tw) = self.grid();
        let t = self.tile_size as usize;
        (th * t, tw * t)
    }

    pub fn to_bytes(&self) -> [u8; HEADER_LEN] {
        let mut b = [0u8; HEADER_LEN];
        b[0..4].copy_from_slice(&MAGIC);
        b[4] = self.version;
        b[5..7].copy_from_slice(&self.true_h.to_le_bytes());
        b[7..9].copy_from_slice(&self.true_w.to_le_bytes());
        b[9] = self.iterations;
        b[10] = self.depth;
        b[11] = self.tile_size;
        b[12] = self.flags;
        b[13..21].copy_from_slice(&self.config_hash.to_le_bytes());
        b
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self, BitstreamError> {
        if b.len() < 4 {
            return Err(BitstreamError::ShortHeader(b.len()));
        }
        let magic: [u8; 4] = b[0..4].try_into().expect("4 bytes");
        if magic != MAGIC {
            return Err(BitstreamError::BadMagic(magic));
        }
        if b.len() < HEADER_LEN {
            return Err(BitstreamError::ShortHeader(b.len()));
        }
        if b[4] != FORMAT_VERSION {
            return Err(BitstreamError::Version(b[4]));
        }
        let h = SctHeader {
            version: b[4],
            true_h: u16::from_le_bytes([b[5], b[6]]),
            true_w: u16::from_le_bytes([b[7], b[8]]),
            iterations: b[9],
            depth: b[10],
            tile_size: b[11],
            flags: b[12],
            config_hash: u64::from_le_bytes(b[13..21].try_into().expect("8 bytes")),
        };
        if h.true_h == 0 || h.true_w == 0 || h.iterations == 0 || h.depth == 0 || h.tile_size == 0 {
            return Err(BitstreamError::Header(format!(
                "zero field in {}x{} K={} B={} tile={}",
                h.true_h, h.true_w, h.iterations, h.depth, h.tile_size
            )));
        }
        if h.flags & !FLAG_SCT != 0 {
            return Err(BitstreamError::Header(format!(
                "unknown flag bits {:#04x}",
                h.flags
            )));
        }
        Ok(h)
    }
}

/// Header plus per-iteration payloads.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SctBitstream {
    pub header: SctHeader,
    pub payloads: Vec<Vec<u8>>,
}

fn pack(bits: impl Iterator<Item = u8>) -> Vec<u8> {
    let mut out = Vec::new();
    for (i, b) in bits.enumerate() {
        if i % 8 == 0 {
            out.push(0);
        }
        if b != 0 {
            *out.last_mut().expect("byte pushed") |= 0x80 >> (i % 8);
        }
    }
    out
}

fn bit_at(bytes: &[u8], i: usize) -> u8 {
    (bytes[i / 8] >> (7 - i % 8)) & 1
}

/// Tiles transmitted in payload `k` under `prev`, the mask after `k - 1`.
fn active_tiles(prev: Option<&TileMask>, n: usize) -> Vec<usize> {
    match prev {
        None => (0..n).collect(),
        Some(m) => (0..n).filter(|&t| !m.is_stopped(t)).collect(),
    }
}

/// Serializes post-masking codes. Under stop-code masking, `masks` must be
/// exactly the sequence a decoder derives from `codes`.
pub fn write(
    codes: &[CodeTensor],
    masks: &[TileMask],
    header: SctHeader,
) -> Result<SctBitstream, BitstreamError> {
    let k_max = header.iterations as usize;
    if codes.len() != k_max {
        return Err(BitstreamError::Header(format!(
            "header declares {k_max} iterations, {} code tensors given",
            codes.len()
        )));
    }
    let grid = header.grid();
    for c in codes {
        if c.grid() != grid || c.depth() != header.depth as usize {
            return Err(BitstreamError::Header(format!(
                "codes {:?}x{} do not match header geometry {:?}x{}",
                c.grid(),
                c.depth(),
                grid,
                header.depth
            )));
        }
    }
    let tw = grid.1;
    let mut payloads = Vec::with_capacity(k_max);
    if !header.sct() {
        for c in codes {
            payloads.push(pack(c.bits().iter().copied()));
        }
        return Ok(SctBitstream { header, payloads });
    }
    if masks.len() != k_max {
        return Err(BitstreamError::Header(format!(
            "{} masks for {k_max} iterations",
            masks.len()
        )));
    }
    let derived = decoder_mask_from_codes(codes);
    for (i, c) in codes.iter().enumerate() {
        let k = i + 1;
        let prev = (i > 0).then(|| &masks[i - 1]);
        for t in 0..c.num_tiles() {
            let (row, col) = (t / tw, t % tw);
            let inconsistent = |reason| BitstreamError::Inconsistent {
                iteration: k,
                row,
                col,
                reason,
            };
            if prev.is_some_and(|m| m.is_stopped(t)) && !c.is_stop_code(t) {
                return Err(inconsistent("nonzero bits on a stopped tile"));
            }
            if masks[i].first_stop(t) != derived[i].first_stop(t) {
                return Err(inconsistent(if c.is_stop_code(t) {
                    "all-zero code on a tile the mask keeps active"
                } else {
                    "mask stops a tile whose code is not the stop code"
                }));
            }
        }
        let tiles = active_tiles(prev, c.num_tiles());
        payloads.push(pack(tiles.iter().flat_map(|&t| c.tile(t).iter().copied())));
    }
    Ok(SctBitstream { header, payloads })
}

fn payload_len(tiles: usize, depth: usize) -> usize {
    (tiles * depth).div_ceil(8)
}

/// Decodes one payload into a code tensor, filling trimmed tiles with zeros.
fn unpack(
    payload: &[u8],
    tiles: &[usize],
    grid: (usize, usize),
    depth: usize,
    k: usize,
) -> Result<CodeTensor, BitstreamError> {
    let mut code = CodeTensor::zeros(grid.0, grid.1, depth, k);
    for (j, &t) in tiles.iter().enumerate() {
        for (b, slot) in code.tile_mut(t).iter_mut().enumerate() {
            *slot = bit_at(payload, j * depth + b);
        }
    }
    Ok(code)
}

/// Recovers codes and masks. Without masking, every mask is empty.
pub fn read(stream: &SctBitstream) -> Result<(Vec<CodeTensor>, Vec<TileMask>), BitstreamError> {
    let h = &stream.header;
    let grid = h.grid();
    let n = grid.0 * grid.1;
    let depth = h.depth as usize;
    let k_max = h.iterations as usize;
    if stream.payloads.len() != k_max {
        return Err(BitstreamError::Header(format!(
            "header declares {k_max} iterations, stream has {} payloads",
            stream.payloads.len()
        )));
    }
    let mut codes = Vec::with_capacity(k_max);
    let mut masks: Vec<TileMask> = Vec::with_capacity(k_max);
    let mut offset = HEADER_LEN;
    for (i, payload) in stream.payloads.iter().enumerate() {
        let k = i + 1;
        let tiles = if h.sct() {
            active_tiles(masks.last(), n)
        } else {
            (0..n).collect()
        };
        let needed = payload_len(tiles.len(), depth);
        if payload.len() < needed {
            return Err(BitstreamError::Truncated {
                iteration: k,
                offset,
                needed,
                available: payload.len(),
            });
        }
        if payload.len() > needed {
            return Err(BitstreamError::TrailingBytes(payload.len() - needed));
        }
        let code = unpack(payload, &tiles, grid, depth, k)?;
        offset += needed;
        if h.sct() {
            let prev = masks
                .last()
                .cloned()
                .unwrap_or_else(|| TileMask::empty(grid.0, grid.1));
            let first = (0..n)
                .map(|t| {
                    prev.first_stop(t)
                        .or_else(|| code.is_stop_code(t).then_some(k))
                })
                .collect();
            masks.push(TileMask::from_first_stops(grid.0, grid.1, first));
        } else {
            masks.push(TileMask::empty(grid.0, grid.1));
        }
        codes.push(code);
    }
    Ok((codes, masks))
}

impl SctBitstream {
    pub fn payload_bytes(&self) -> usize {
        self.payloads.iter().map(Vec::len).sum()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.payload_bytes());
        out.extend_from_slice(&self.header.to_bytes());
        for p in &self.payloads {
            out.extend_from_slice(p);
        }
        out
    }

    /// Splits a `.sct` byte string into payloads, deriving each payload's
    /// length from the codes of the previous ones.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, BitstreamError> {
        let header = SctHeader::from_bytes(bytes)?;
        let grid = header.grid();
        let n = grid.0 * grid.1;
        let depth = header.depth as usize;
        let mut payloads = Vec::with_capacity(header.iterations as usize);
        let mut stopped = vec![false; n];
        let mut offset = HEADER_LEN;
        for k in 1..=header.iterations as usize {
            let tiles: Vec<usize> = (0..n).filter(|&t| !stopped[t]).collect();
            let needed = payload_len(tiles.len(), depth);
            let available = bytes.len() - offset;
            if available < needed {
                return Err(BitstreamError::Truncated {
                    iteration: k,
                    offset,
                    needed,
                    available,
                });
            }
            let payload = bytes[offset..offset + needed].to_vec();
            if header.sct() {
                for (j, &t) in tiles.iter().enumerate() {
                    stopped[t] = (0..depth).all(|b| bit_at(&payload, j * depth + b) == 0);
                }
            }
            payloads.push(payload);
            offset += needed;
        }
        if offset != bytes.len() {
            return Err(BitstreamError::TrailingBytes(bytes.len() - offset));
        }
        Ok(SctBitstream { header, payloads })
    }

    /// The stream as if only the first `k` iterations had been encoded.
    pub fn truncated(&self, k: usize) -> Result<SctBitstream, BitstreamError> {
        if k == 0 || k > self.payloads.len() {
            return Err(BitstreamError::Header(format!(
                "cannot keep {k} of {} iterations",
                self.payloads.len()
            )));
        }
        let mut header = self.header;
        header.iterations = k as u8;
        Ok(SctBitstream {
            header,
            payloads: self.payloads[..k].to_vec(),
        })
    }
}

/// `.sct.dz`: gzip at maximum compression with a zero timestamp, so output
/// bytes depend only on the input.
pub fn compress(stream: &SctBitstream) -> Vec<u8> {
    compress_bytes(&stream.to_bytes())
}

pub fn compress_bytes(bytes: &[u8]) -> Vec<u8> {
    let mut enc = GzBuilder::new()
        .mtime(0)
        .write(Vec::new(), Compression::best());
    enc.write_all(bytes).expect("in-memory write");
    enc.finish().expect("in-memory write")
}

pub fn decompress(bytes: &[u8]) -> Result<SctBitstream, BitstreamError> {
    let mut raw = Vec::new();
    GzDecoder::new(bytes)
        .read_to_end(&mut raw)
        .map_err(BitstreamError::Container)?;
    SctBitstream::from_bytes(&raw)
}

/// Accepts either form, detecting gzip by its magic bytes.
pub fn parse_any(bytes: &[u8]) -> Result<SctBitstream, BitstreamError> {
    if bytes.starts_with(&[0x1f, 0x8b]) {
        decompress(bytes)
    } else {
        SctBitstream::from_bytes(bytes)
    }
}

/// Bits per pixel of one stream, all relative to the true image area.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BitrateReport {
    /// `K * B / tile²`: no trimming, no entropy coding.
    pub nominal_bpp: f64,
    /// Payload bits, including per-iteration fill.
    pub trimmed_bpp: f64,
    /// Gzip of the whole `.sct`, header included.
    pub compressed_bpp: f64,
    pub payload_bytes: usize,
    pub compressed_bytes: usize,
    /// `B * |active tiles|` summed over iterations.
    pub code_bits: usize,
}

pub fn bitrate_report(stream: &SctBitstream) -> BitrateReport {
    let h = &stream.header;
    let area = h.true_h as f64 * h.true_w as f64;
    let tile = h.tile_size as f64;
    let compressed = compress(stream).len();
    let payload = stream.payload_bytes();
    let code_bits = match read(stream) {
        Ok((_, masks)) => {
            let n = h.grid().0 * h.grid().1;
            (0..masks.len())
                .map(|i| active_tiles((i > 0).then(|| &masks[i - 1]), n).len() * h.depth as usize)
                .sum()
        }
        Err(_) => 8 * payload,
    };
    BitrateReport {
        nominal_bpp: h.iterations as f64 * h.depth as f64 / (tile * tile),
        trimmed_bpp: 8.0 * payload as f64 / area,
        compressed_bpp: 8.0 * compressed as f64 / area,
        payload_bytes: payload,
        compressed_bytes: compressed,
        code_bits,
    }
}
