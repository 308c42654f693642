//! Entropy-coded encode/decode of single images.

use super::bitstream::{Bitstream, FORMAT_VERSION};
use super::entropy::{gaussian_tables, mean_split, scale_index, WindowTable, MEAN_STEPS};
use super::model::{CodecModel, PAD_MULTIPLE};
use super::rangecoder::{RangeDecoder, RangeEncoder, MAX_TAIL_READ};
use crate::datamodel::RgbImage;
use crate::error::{Error, Result};
use crate::nn::Tensor;

/// Rounded latent and hyper-latent of one image (NHWC order, batch of one).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LatentCode {
    pub y: Vec<i32>,
    /// `(height, width, channels)`.
    pub y_shape: (usize, usize, usize),
    pub z: Vec<i32>,
    pub z_shape: (usize, usize, usize),
}

fn padded_side(n: usize) -> usize {
    n.div_ceil(PAD_MULTIPLE) * PAD_MULTIPLE
}

fn rounded(t: &Tensor) -> Vec<i32> {
    t.data.iter().map(|v| v.round() as i32).collect()
}

fn as_tensor(v: &[i32], (h, w, c): (usize, usize, usize)) -> Tensor {
    Tensor::from_vec(1, h, w, c, v.iter().map(|&x| x as f32).collect())
}

fn check_dims(image: &RgbImage) -> Result<()> {
    if image.height == 0 || image.width == 0 {
        return Err(Error::EmptyInput("zero-area image".into()));
    }
    if padded_side(image.height) > u16::MAX as usize || padded_side(image.width) > u16::MAX as usize {
        return Err(Error::Config(format!("{}x{} exceeds the container's dimension range", image.height, image.width)));
    }
    Ok(())
}

/// Reflect-pads the image and runs both analysis transforms with rounding.
pub fn analyze(model: &CodecModel, image: &RgbImage) -> Result<LatentCode> {
    check_dims(image)?;
    let padded = image.reflect_pad(padded_side(image.height), padded_side(image.width));
    let y = model.analysis(&padded.to_unit_tensor());
    let y_hat = rounded(&y);
    let y_shape = (y.h, y.w, y.c);
    let z = model.hyper_analysis(&y);
    Ok(LatentCode { y: y_hat, y_shape, z: rounded(&z), z_shape: (z.h, z.w, z.c) })
}

/// Model estimate `-log2 p(z_hat) - log2 p(y_hat | z_hat)` in bits.
pub fn estimated_rate_bits(model: &CodecModel, code: &LatentCode) -> f64 {
    let z_hat = as_tensor(&code.z, code.z_shape);
    let (scales, means) = model.hyper_synthesis(&z_hat);
    2.0 * TERMINATOR_BITS + model.hyper_rate_bits(&z_hat) + CodecModel::latent_rate_bits(&as_tensor(&code.y, code.y_shape), &scales, &means)
}

fn encode_windowed(enc: &mut RangeEncoder, table: &WindowTable, rel: i64) {
    let idx = rel - table.lo;
    if (0..table.window_len() as i64).contains(&idx) {
        enc.encode_symbol(&table.table, idx as usize);
        return;
    }
    enc.encode_symbol(&table.table, table.escape());
    let (below, excess) = if idx < 0 { (true, -idx - 1) } else { (false, idx - table.window_len() as i64) };
    enc.encode_bit(below);
    enc.encode_gamma(excess as u32);
}

fn decode_windowed(dec: &mut RangeDecoder, table: &WindowTable) -> Result<i64> {
    let sym = dec.decode_symbol(&table.table)?;
    if sym != table.escape() {
        return Ok(table.lo + sym as i64);
    }
    let below = dec.decode_bit()?;
    let excess = dec.decode_gamma()? as i64;
    Ok(if below { table.lo - 1 - excess } else { table.lo + table.window_len() as i64 + excess })
}

fn gaussian_table(scale: f32, mean: f32) -> (&'static WindowTable, i64) {
    let (centre, offset) = mean_split(mean);
    (&gaussian_tables()[scale_index(scale) * MEAN_STEPS as usize + offset], centre)
}

/// Range-codes an already analysed image.
pub fn encode_code(model: &CodecModel, code: &LatentCode, orig_h: usize, orig_w: usize) -> Bitstream {
    let hyper_tables = model.hyper_tables();
    let mut enc = RangeEncoder::new();
    let c = code.z_shape.2;
    for (i, &v) in code.z.iter().enumerate() {
        encode_windowed(&mut enc, &hyper_tables[i % c], v as i64);
    }
    let hyper = seal(enc);

    let (scales, means) = model.hyper_synthesis(&as_tensor(&code.z, code.z_shape));
    let mut enc = RangeEncoder::new();
    for (i, &v) in code.y.iter().enumerate() {
        let (table, centre) = gaussian_table(scales.data[i], means.data[i]);
        encode_windowed(&mut enc, table, v as i64 - centre);
    }
    let main = seal(enc);
    Bitstream {
        version: FORMAT_VERSION,
        digest: model.frozen_digest(),
        orig_h: orig_h as u16,
        orig_w: orig_w as u16,
        pad_h: (code.y_shape.0 * super::MAIN_FACTOR) as u16,
        pad_w: (code.y_shape.1 * super::MAIN_FACTOR) as u16,
        hyper,
        main,
    }
}

/// Deterministic compression of one image.
pub fn encode(model: &CodecModel, image: &RgbImage) -> Result<Bitstream> {
    let code = analyze(model, image)?;
    Ok(encode_code(model, &code, image.height, image.width))
}

/// Entropy-decodes the latents without running the synthesis transform.
pub fn decode_code(model: &CodecModel, b: &Bitstream) -> Result<LatentCode> {
    let found = model.frozen_digest();
    if b.digest != found {
        return Err(Error::IncompatibleModel { expected: b.digest, found, record: None });
    }
    let (ph, pw) = (b.pad_h as usize, b.pad_w as usize);
    if ph % PAD_MULTIPLE != 0 || pw % PAD_MULTIPLE != 0 || ph != padded_side(b.orig_h as usize) || pw != padded_side(b.orig_w as usize) {
        return Err(Error::CorruptStream(format!("padded dims {ph}x{pw} do not match the model's multiple")));
    }
    let arch = model.arch;
    let z_shape = (ph / PAD_MULTIPLE, pw / PAD_MULTIPLE, arch.hyper);
    let y_shape = (ph / super::MAIN_FACTOR, pw / super::MAIN_FACTOR, arch.latent);

    let hyper_tables = model.hyper_tables();
    let mut dec = RangeDecoder::new(&b.hyper);
    let nz = z_shape.0 * z_shape.1 * z_shape.2;
    let mut z = Vec::with_capacity(nz);
    for i in 0..nz {
        z.push(narrow(decode_windowed(&mut dec, &hyper_tables[i % z_shape.2])?)?);
    }
    check_consumed(dec, b.hyper.len(), "hyper")?;

    let (scales, means) = model.hyper_synthesis(&as_tensor(&z, z_shape));
    let mut dec = RangeDecoder::new(&b.main);
    let ny = y_shape.0 * y_shape.1 * y_shape.2;
    let mut y = Vec::with_capacity(ny);
    for i in 0..ny {
        let (table, centre) = gaussian_table(scales.data[i], means.data[i]);
        y.push(narrow(decode_windowed(&mut dec, table)? + centre)?);
    }
    check_consumed(dec, b.main.len(), "main")?;
    Ok(LatentCode { y, y_shape, z, z_shape })
}

fn narrow(v: i64) -> Result<i32> {
    i32::try_from(v).map_err(|_| Error::CorruptStream("latent value out of range".into()))
}

/// Every payload ends with this pattern as equiprobable bits. A cut-short
/// payload decodes zeros past its end, which rarely reproduce it.
const TERMINATOR: u16 = 0xA5C3;
pub const TERMINATOR_BITS: f64 = 16.0;

fn seal(mut enc: RangeEncoder) -> Vec<u8> {
    for i in (0..16).rev() {
        enc.encode_bit(TERMINATOR >> i & 1 == 1);
    }
    enc.finish()
}

/// A well-formed payload ends with the terminator and is never read further
/// past its end than the encoder's trimmed flush allows.
fn check_consumed(mut dec: RangeDecoder, len: usize, which: &str) -> Result<()> {
    let mut tail = 0u16;
    for _ in 0..16 {
        tail = tail << 1 | u16::from(dec.decode_bit()?);
    }
    if tail != TERMINATOR || dec.position() > len + MAX_TAIL_READ {
        return Err(Error::CorruptStream(format!("{which} payload truncated")));
    }
    Ok(())
}

/// Reconstruction at the original dims.
pub fn decode(model: &CodecModel, b: &Bitstream) -> Result<RgbImage> {
    let code = decode_code(model, b)?;
    let x_hat = model.synthesis(&as_tensor(&code.y, code.y_shape));
    Ok(RgbImage::from_unit_tensor(&x_hat, 0, b.orig_h as usize, b.orig_w as usize))
}
