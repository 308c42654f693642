//! Single-file model checkpoints and the frozen-set digest.
//!
//! `"CZCM" | version u8 | frozen u8 | lambda f32 | channels u32 | latent u32 |
//! hyper u32 | block count u32 | blocks`, each block being
//! `name_len u16 | name | group u8 | ndims u8 | dims u32* | f32 data`, all
//! little-endian. Group 1 marks the frozen set.

use std::path::Path;

use byteorder::{ByteOrder, LittleEndian as LE};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::model::{ArchConfig, CodecModel};
use crate::error::{Error, Result};
use crate::nn::Param;

const MAGIC: [u8; 4] = *b"CZCM";
const VERSION: u8 = 1;
const GROUP_ENCODER: u8 = 0;
const GROUP_FROZEN: u8 = 1;

fn write_block(out: &mut Vec<u8>, p: &Param, group: u8) {
    out.extend_from_slice(&(p.name.len() as u16).to_le_bytes());
    out.extend_from_slice(p.name.as_bytes());
    out.push(group);
    out.push(p.shape.len() as u8);
    for &d in &p.shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in &p.value {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serialized bytes of the frozen parameter set, in a fixed order.
pub fn frozen_bytes(model: &CodecModel) -> Vec<u8> {
    let mut out = Vec::new();
    for p in model.frozen_set_params() {
        write_block(&mut out, p, GROUP_FROZEN);
    }
    out
}

/// First eight bytes (little-endian) of SHA-256 over [`frozen_bytes`].
pub fn frozen_digest(model: &CodecModel) -> u64 {
    let hash = Sha256::digest(frozen_bytes(model));
    LE::read_u64(&hash[..8])
}

pub fn to_bytes(model: &CodecModel) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(model.is_frozen() as u8);
    out.extend_from_slice(&model.lambda.to_le_bytes());
    for v in [model.arch.channels, model.arch.latent, model.arch.hyper] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    let enc = model.encoder_params();
    let frozen = model.frozen_set_params();
    out.extend_from_slice(&((enc.len() + frozen.len()) as u32).to_le_bytes());
    for p in enc {
        write_block(&mut out, p, GROUP_ENCODER);
    }
    for p in frozen {
        write_block(&mut out, p, GROUP_FROZEN);
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| Error::CorruptStream("checkpoint truncated".into()))?;
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(LE::read_u16(self.take(2)?))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(LE::read_u32(self.take(4)?))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<CodecModel> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::CorruptStream("not a codec checkpoint".into()));
    }
    let version = r.u8()?;
    if version != VERSION {
        return Err(Error::CorruptStream(format!("unsupported checkpoint version {version}")));
    }
    let frozen = r.u8()? != 0;
    let lambda = f32::from_le_bytes(r.take(4)?.try_into().unwrap());
    let arch = ArchConfig { channels: r.u32()? as usize, latent: r.u32()? as usize, hyper: r.u32()? as usize };
    if arch.channels == 0 || arch.latent == 0 || arch.hyper == 0 || arch.channels > 4096 || arch.latent > 4096 || arch.hyper > 4096 {
        return Err(Error::CorruptStream(format!("implausible architecture {arch:?}")));
    }
    let mut model = CodecModel::new(&mut ChaCha8Rng::seed_from_u64(0), arch, lambda);
    let count = r.u32()? as usize;
    let mut seen = std::collections::HashSet::new();
    {
        let mut params = model.all_params_mut();
        if count != params.len() {
            return Err(Error::CorruptStream(format!("{count} blocks, architecture has {}", params.len())));
        }
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::CorruptStream("block name is not UTF-8".into()))?
                .to_string();
            let _group = r.u8()?;
            let ndims = r.u8()? as usize;
            let dims: Vec<usize> = (0..ndims).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
            let p = params
                .iter_mut()
                .find(|p| p.name == name)
                .ok_or_else(|| Error::CorruptStream(format!("unknown block {name}")))?;
            if p.shape != dims {
                return Err(Error::CorruptStream(format!("block {name} has shape {dims:?}, expected {:?}", p.shape)));
            }
            let raw = r.take(p.value.len() * 4)?;
            for (v, chunk) in p.value.iter_mut().zip(raw.chunks_exact(4)) {
                *v = f32::from_le_bytes(chunk.try_into().unwrap());
            }
            seen.insert(name);
        }
    }
    if seen.len() != count {
        return Err(Error::CorruptStream("duplicate parameter blocks".into()));
    }
    if r.pos != bytes.len() {
        return Err(Error::CorruptStream("trailing bytes after checkpoint".into()));
    }
    if frozen {
        model.freeze_decoder_side();
    }
    Ok(model)
}

pub fn save(model: &CodecModel, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(model))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<CodecModel> {
    from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> CodecModel {
        let arch = ArchConfig { channels: 4, latent: 6, hyper: 3 };
        CodecModel::new(&mut ChaCha8Rng::seed_from_u64(7), arch, 100.0)
    }

    #[test]
    fn round_trip_preserves_every_parameter_and_flag() {
        let mut m = tiny();
        m.freeze_decoder_side();
        let bytes = to_bytes(&m);
        let back = from_bytes(&bytes).unwrap();
        assert!(back.is_frozen());
        assert_eq!(back.lambda, 100.0);
        assert_eq!(to_bytes(&back), bytes);
        assert_eq!(back.frozen_digest(), m.frozen_digest());
    }

    #[test]
    fn digest_ignores_encoder_and_tracks_frozen_set() {
        let m = tiny();
        let d = frozen_digest(&m);
        let mut enc_changed = m.clone();
        enc_changed.encoder_params_mut()[0].value[0] += 1.0;
        assert_eq!(frozen_digest(&enc_changed), d);
        let mut dec_changed = m.clone();
        dec_changed.all_params_mut().last_mut().unwrap().value[0] += 1e-6;
        assert_ne!(frozen_digest(&dec_changed), d);
    }

    #[test]
    fn damaged_checkpoints_are_rejected() {
        let bytes = to_bytes(&tiny());
        assert!(from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(from_bytes(&bytes[..10]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(from_bytes(&extra).is_err());
    }
}
