//! Little-endian bitstream container.
//!
//! `"CZC1" | version u8 | frozen digest u64 | orig_h u16 | orig_w u16 |
//! pad_h u16 | pad_w u16 | hyper_len u32 | hyper | main_len u32 | main`
//!
//! Latent shapes are not stored: they follow from the padded dims and the
//! model architecture.

use byteorder::{ByteOrder, LittleEndian as LE};

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"CZC1";
pub const FORMAT_VERSION: u8 = 1;
/// Fixed container overhead, including both length fields.
pub const HEADER_BYTES: usize = 4 + 1 + 8 + 4 * 2 + 4 + 4;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Bitstream {
    pub version: u8,
    pub digest: u64,
    pub orig_h: u16,
    pub orig_w: u16,
    pub pad_h: u16,
    pub pad_w: u16,
    pub hyper: Vec<u8>,
    pub main: Vec<u8>,
}

impl Bitstream {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.byte_len());
        out.extend_from_slice(&MAGIC);
        out.push(self.version);
        out.extend_from_slice(&self.digest.to_le_bytes());
        for v in [self.orig_h, self.orig_w, self.pad_h, self.pad_w] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(self.hyper.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.hyper);
        out.extend_from_slice(&(self.main.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.main);
        out
    }

    /// Parses one container; returns it with the number of bytes consumed.
    pub fn parse_prefix(bytes: &[u8]) -> Result<(Self, usize)> {
        let corrupt = |what: &str| Error::CorruptStream(what.to_string());
        if bytes.len() < HEADER_BYTES - 4 {
            return Err(corrupt("container shorter than its header"));
        }
        if bytes[..4] != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = bytes[4];
        if version != FORMAT_VERSION {
            return Err(Error::CorruptStream(format!("unsupported container version {version}")));
        }
        let digest = LE::read_u64(&bytes[5..13]);
        let dims: Vec<u16> = (0..4).map(|i| LE::read_u16(&bytes[13 + 2 * i..15 + 2 * i])).collect();
        let mut pos = 21;
        let take = |pos: &mut usize| -> Result<Vec<u8>> {
            let len_end = *pos + 4;
            let len = LE::read_u32(bytes.get(*pos..len_end).ok_or_else(|| corrupt("truncated length field"))?) as usize;
            let body = bytes.get(len_end..len_end + len).ok_or_else(|| corrupt("truncated payload"))?;
            *pos = len_end + len;
            Ok(body.to_vec())
        };
        let hyper = take(&mut pos)?;
        let main = take(&mut pos)?;
        let b = Self { version, digest, orig_h: dims[0], orig_w: dims[1], pad_h: dims[2], pad_w: dims[3], hyper, main };
        if b.orig_h == 0 || b.orig_w == 0 || b.pad_h < b.orig_h || b.pad_w < b.orig_w {
            return Err(corrupt("inconsistent dimensions"));
        }
        Ok((b, pos))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (b, used) = Self::parse_prefix(bytes)?;
        if used != bytes.len() {
            return Err(Error::CorruptStream(format!("{} trailing bytes", bytes.len() - used)));
        }
        Ok(b)
    }

    pub fn byte_len(&self) -> usize {
        HEADER_BYTES + self.hyper.len() + self.main.len()
    }

    /// Header plus payload bits.
    pub fn total_bits(&self) -> u64 {
        self.byte_len() as u64 * 8
    }

    pub fn payload_bits(&self) -> u64 {
        (self.hyper.len() + self.main.len()) as u64 * 8
    }
}

/// `bits / (height * width)`.
pub fn bits_per_pixel(bits: u64, height: usize, width: usize) -> f64 {
    bits as f64 / (height * width) as f64
}

/// Header plus payload bits over the original pixel count.
pub fn measure_bpp(b: &Bitstream) -> f64 {
    bits_per_pixel(b.total_bits(), b.orig_h as usize, b.orig_w as usize)
}
