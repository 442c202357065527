//! Compressed parameter packets exchanged between clients and the server.
//!
//! Payload layout, every multi-byte field big-endian:
//!
//! ```text
//! magic "FMC1" | version u16 = 1 | tensor count u32
//! per tensor: name len u16 | name utf-8 | dtype u8 (1 = binary16) | ndim u8
//!             | dims u32 x ndim | values binary16 x prod(dims), row-major
//! ```
//!
//! The payload is zlib-compressed at level 6. Values are rounded to nearest
//! even binary16; magnitudes beyond 65504 saturate.
//!
//! With compression disabled ([`Codec::Raw32`]) the same table is sent
//! uncompressed with binary32 values (dtype 2). A raw payload starts with the
//! magic, a zlib stream never does, so [`unpack_bytes`] accepts both.

use std::io::{Read, Write};

use byteorder::{BigEndian, ReadBytesExt, WriteBytesExt};
use flate2::read::ZlibDecoder;
use flate2::write::ZlibEncoder;
use flate2::Compression;
use half::f16;

use crate::error::{Error, Result};
use crate::params::NamedTensor;

pub const MAGIC: &[u8; 4] = b"FMC1";
pub const VERSION: u16 = 1;
pub const DTYPE_F16: u8 = 1;
pub const DTYPE_F32: u8 = 2;
pub const ZLIB_LEVEL: u32 = 6;
pub const F16_MAX: f64 = 65504.0;

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum WireError {
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),
    #[error("truncated payload")]
    Truncated,
    #[error("unknown dtype code {0}")]
    UnknownDtype(u8),
    #[error("inconsistent tensor table: {0}")]
    Inconsistent(String),
    #[error("{0} trailing bytes after tensor table")]
    TrailingBytes(usize),
    #[error("zlib stream invalid: {0}")]
    Decompress(String),
}

/// How parameter sets are encoded for transmission.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Codec {
    /// binary16 values, zlib-compressed.
    #[default]
    Compressed,
    /// binary32 values, no compression.
    Raw32,
}

/// A compressed packet and the size of the payload before compression.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WirePacket {
    pub bytes: Vec<u8>,
    pub raw_len: usize,
}

impl WirePacket {
    pub fn len(&self) -> usize {
        self.bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }
}

/// Rounds to binary16 (nearest even), saturating at +-65504.
///
/// Rounds straight from the 64-bit value. Going through binary32 first
/// (as `f16::from_f64` does on some targets) can round twice and land on
/// the wrong neighbour when the value sits just below a binary16 midpoint.
pub fn quantize(x: f64) -> u16 {
    let sign: u16 = if x.is_sign_negative() { 0x8000 } else { 0 };
    if x.is_nan() {
        return 0x7e00;
    }
    let a = x.abs().min(F16_MAX);
    if a < f64::powi(2.0, -14) {
        // Subnormal: the bit pattern is the count of 2^-24 steps, and 1024
        // steps is exactly the smallest normal.
        return sign | (a * f64::powi(2.0, 24)).round_ties_even() as u16;
    }
    let e = ((a.to_bits() >> 52) & 0x7ff) as i32 - 1023;
    // Scaling by a power of two is exact, so one rounding happens here.
    let m = (a * f64::powi(2.0, 10 - e)).round_ties_even() as u16;
    // A carry to 2048 correctly bumps the exponent field.
    sign | ((((e + 15) as u16) << 10) + (m - 1024))
}

pub fn dequantize(bits: u16) -> f32 {
    f16::from_bits(bits).to_f32()
}

/// Serializes tensors into the uncompressed binary16 payload.
pub fn encode_payload(tensors: &[NamedTensor]) -> Result<Vec<u8>> {
    encode_payload_as(tensors, DTYPE_F16)
}

fn encode_payload_as(tensors: &[NamedTensor], dtype: u8) -> Result<Vec<u8>> {
    let mut out =
        Vec::with_capacity(16 + tensors.iter().map(|t| 16 + 2 * t.numel()).sum::<usize>());
    out.extend_from_slice(MAGIC);
    out.write_u16::<BigEndian>(VERSION)?;
    out.write_u32::<BigEndian>(
        u32::try_from(tensors.len()).map_err(|_| too_large("tensor count"))?,
    )?;
    for t in tensors {
        if let Some(pos) = t.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Serialization(format!(
                "tensor `{}` has a non-finite value at index {pos}",
                t.name
            )));
        }
        let expected: usize = t.shape.iter().product();
        if expected != t.data.len() {
            return Err(Error::Serialization(format!(
                "tensor `{}` shape does not match its data",
                t.name
            )));
        }
        let name = t.name.as_bytes();
        out.write_u16::<BigEndian>(
            u16::try_from(name.len()).map_err(|_| too_large("tensor name"))?,
        )?;
        out.extend_from_slice(name);
        out.write_u8(dtype)?;
        out.write_u8(u8::try_from(t.shape.len()).map_err(|_| too_large("tensor rank"))?)?;
        for &d in &t.shape {
            out.write_u32::<BigEndian>(u32::try_from(d).map_err(|_| too_large("tensor dim"))?)?;
        }
        if dtype == DTYPE_F16 {
            for &v in &t.data {
                out.write_u16::<BigEndian>(quantize(v))?;
            }
        } else {
            for &v in &t.data {
                out.write_f32::<BigEndian>(v as f32)?;
            }
        }
    }
    Ok(out)
}

fn too_large(what: &str) -> Error {
    Error::Serialization(format!("{what} exceeds the wire format's field width"))
}

/// Parses an uncompressed payload. Fails closed: no tensors on any error.
pub fn decode_payload(payload: &[u8]) -> std::result::Result<Vec<NamedTensor>, WireError> {
    let mut cur = payload;
    let mut magic = [0u8; 4];
    cur.read_exact(&mut magic)
        .map_err(|_| WireError::Truncated)?;
    if &magic != MAGIC {
        return Err(WireError::BadMagic);
    }
    let version = cur
        .read_u16::<BigEndian>()
        .map_err(|_| WireError::Truncated)?;
    if version != VERSION {
        return Err(WireError::UnsupportedVersion(version));
    }
    let count = cur
        .read_u32::<BigEndian>()
        .map_err(|_| WireError::Truncated)? as usize;
    // Each tensor needs at least 4 header bytes; reject absurd counts early.
    if count > cur.len() / 4 + 1 {
        return Err(WireError::Inconsistent(format!(
            "tensor count {count} exceeds payload size"
        )));
    }
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = cur
            .read_u16::<BigEndian>()
            .map_err(|_| WireError::Truncated)? as usize;
        if cur.len() < name_len {
            return Err(WireError::Truncated);
        }
        let name = std::str::from_utf8(&cur[..name_len])
            .map_err(|_| WireError::Inconsistent("tensor name is not utf-8".into()))?
            .to_string();
        cur = &cur[name_len..];
        let dtype = cur.read_u8().map_err(|_| WireError::Truncated)?;
        let width = match dtype {
            DTYPE_F16 => 2,
            DTYPE_F32 => 4,
            other => return Err(WireError::UnknownDtype(other)),
        };
        let ndim = cur.read_u8().map_err(|_| WireError::Truncated)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        let mut numel: usize = 1;
        for _ in 0..ndim {
            let d = cur
                .read_u32::<BigEndian>()
                .map_err(|_| WireError::Truncated)? as usize;
            numel = numel
                .checked_mul(d)
                .ok_or_else(|| WireError::Inconsistent(format!("tensor `{name}` is too large")))?;
            shape.push(d);
        }
        let bytes = numel
            .checked_mul(width)
            .ok_or_else(|| WireError::Inconsistent(format!("tensor `{name}` is too large")))?;
        if cur.len() < bytes {
            return Err(WireError::Truncated);
        }
        let data = if width == 2 {
            cur[..bytes]
                .chunks_exact(2)
                .map(|b| dequantize(u16::from_be_bytes([b[0], b[1]])) as f64)
                .collect()
        } else {
            cur[..bytes]
                .chunks_exact(4)
                .map(|b| f32::from_be_bytes([b[0], b[1], b[2], b[3]]) as f64)
                .collect()
        };
        cur = &cur[bytes..];
        tensors.push(NamedTensor { name, shape, data });
    }
    if !cur.is_empty() {
        return Err(WireError::TrailingBytes(cur.len()));
    }
    Ok(tensors)
}

/// Quantizes, serializes and zlib-compresses a parameter set.
pub fn pack(tensors: &[NamedTensor]) -> Result<WirePacket> {
    let payload = encode_payload(tensors)?;
    let mut enc = ZlibEncoder::new(Vec::new(), Compression::new(ZLIB_LEVEL));
    enc.write_all(&payload)?;
    Ok(WirePacket {
        bytes: enc.finish()?,
        raw_len: payload.len(),
    })
}

/// Encodes with the chosen codec.
pub fn pack_with(tensors: &[NamedTensor], codec: Codec) -> Result<WirePacket> {
    match codec {
        Codec::Compressed => pack(tensors),
        Codec::Raw32 => {
            let payload = encode_payload_as(tensors, DTYPE_F32)?;
            Ok(WirePacket {
                raw_len: payload.len(),
                bytes: payload,
            })
        }
    }
}

/// Decompresses and parses a packet, widening binary16 values.
pub fn unpack(packet: &WirePacket) -> Result<Vec<NamedTensor>> {
    Ok(unpack_bytes(&packet.bytes)?)
}

pub fn unpack_bytes(bytes: &[u8]) -> std::result::Result<Vec<NamedTensor>, WireError> {
    if bytes.starts_with(MAGIC) {
        return decode_payload(bytes);
    }
    // Neither a raw payload nor a zlib header (deflate method, check bits).
    let zlib_header = bytes.len() >= 2
        && bytes[0] & 0x0f == 8
        && u16::from_be_bytes([bytes[0], bytes[1]]).is_multiple_of(31);
    if !zlib_header {
        return Err(WireError::BadMagic);
    }
    let mut payload = Vec::new();
    ZlibDecoder::new(bytes)
        .read_to_end(&mut payload)
        .map_err(|e| WireError::Decompress(e.to_string()))?;
    decode_payload(&payload)
}

/// Size of the same tensors at 4 bytes per value, the uncompressed float32 baseline.
pub fn f32_baseline_bytes(tensors: &[NamedTensor]) -> usize {
    4 * tensors.iter().map(NamedTensor::numel).sum::<usize>()
}
