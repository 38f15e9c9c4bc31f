//! Binary framing for [`CompressedUpdate`].
//!
//! All integers little-endian:
//!
//! ```text
//! "PRFL" | u16 version=1 | u32 client_id | u64 sample_count | u32 matrix_count
//! per matrix:
//!   u16 name_len | name (UTF-8) | u8 kind (0 raw, 1 lowrank) | u8 ndim | u32 dims[ndim]
//!   u32 P | u32 Q | u32 r | u32 K_p | u32 K_n        (all zero for raw)
//!   f32 payload: raw = prod(dims) values; lowrank = U_p, S_p, V_p, U_n, S_n, V_n
//! u32 CRC-32 (IEEE) over every preceding byte
//! ```

use thiserror::Error;

use super::{CompressedMatrix, CompressedUpdate, LowRank, Payload};

pub const MAGIC: [u8; 4] = *b"PRFL";
pub const VERSION: u16 = 1;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DecodeError {
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported version {0}")]
    BadVersion(u16),
    #[error("message truncated")]
    Truncated,
    #[error("CRC mismatch")]
    CrcMismatch,
    #[error("malformed message: {0}")]
    Malformed(String),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EncodeError {
    #[error("field `{0}` does not fit its wire width")]
    Overflow(&'static str),
}

fn push_u32(out: &mut Vec<u8>, v: usize, field: &'static str) -> Result<(), EncodeError> {
    let v = u32::try_from(v).map_err(|_| EncodeError::Overflow(field))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn push_f32s(out: &mut Vec<u8>, vals: &[f32]) {
    for v in vals {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode(c: &CompressedUpdate) -> Result<Vec<u8>, EncodeError> {
    let mut out = Vec::with_capacity(32 + 4 * c.uploaded_float_count());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&c.client_id.to_le_bytes());
    out.extend_from_slice(&c.sample_count.to_le_bytes());
    push_u32(&mut out, c.matrices.len(), "matrix_count")?;
    for m in &c.matrices {
        let name = m.name.as_bytes();
        let len = u16::try_from(name.len()).map_err(|_| EncodeError::Overflow("name_len"))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name);
        out.push(u8::from(m.is_lowrank()));
        out.push(u8::try_from(m.orig_dims.len()).map_err(|_| EncodeError::Overflow("ndim"))?);
        for &d in &m.orig_dims {
            push_u32(&mut out, d, "dims")?;
        }
        match &m.payload {
            Payload::Raw(v) => {
                out.extend_from_slice(&[0u8; 20]);
                push_f32s(&mut out, v);
            }
            Payload::LowRank(l) => {
                for (v, f) in [(l.p, "P"), (l.q, "Q"), (l.r, "r"), (l.k_p, "K_p"), (l.k_n, "K_n")] {
                    push_u32(&mut out, v, f)?;
                }
                for part in [&l.u_p, &l.s_p, &l.v_p, &l.u_n, &l.s_n, &l.v_n] {
                    push_f32s(&mut out, part);
                }
            }
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DecodeError> {
        let end = self.pos.checked_add(n).ok_or(DecodeError::Truncated)?;
        let s = self.buf.get(self.pos..end).ok_or(DecodeError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, DecodeError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, DecodeError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, DecodeError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, DecodeError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn usize(&mut self) -> Result<usize, DecodeError> {
        Ok(self.u32()? as usize)
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>, DecodeError> {
        let bytes = self.take(n.checked_mul(4).ok_or(DecodeError::Truncated)?)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

fn product(a: usize, b: usize) -> Result<usize, DecodeError> {
    a.checked_mul(b).ok_or_else(|| DecodeError::Malformed("size overflow".into()))
}

pub fn decode(bytes: &[u8]) -> Result<CompressedUpdate, DecodeError> {
    let mut rd = Reader { buf: bytes, pos: 0 };
    if rd.take(4)? != MAGIC {
        return Err(DecodeError::BadMagic);
    }
    let version = rd.u16()?;
    if version != VERSION {
        return Err(DecodeError::BadVersion(version));
    }
    let client_id = rd.u32()?;
    let sample_count = rd.u64()?;
    let count = rd.usize()?;
    let mut matrices = Vec::new();
    for _ in 0..count {
        let name_len = rd.u16()? as usize;
        let name = std::str::from_utf8(rd.take(name_len)?)
            .map_err(|_| DecodeError::Malformed("name is not UTF-8".into()))?
            .to_string();
        let kind = rd.u8()?;
        let ndim = rd.u8()? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(rd.usize()?);
        }
        let [p, q, r, k_p, k_n] = [rd.usize()?, rd.usize()?, rd.usize()?, rd.usize()?, rd.usize()?];
        let payload = match kind {
            0 => {
                if [p, q, r, k_p, k_n] != [0; 5] {
                    return Err(DecodeError::Malformed("raw entry with nonzero ranks".into()));
                }
                let n = dims.iter().try_fold(1usize, |a, &d| product(a, d))?;
                Payload::Raw(rd.f32s(n)?)
            }
            1 => Payload::LowRank(LowRank {
                p,
                q,
                r,
                k_p,
                k_n,
                u_p: rd.f32s(product(p, k_p)?)?,
                s_p: rd.f32s(k_p)?,
                v_p: rd.f32s(product(k_p, r)?)?,
                u_n: rd.f32s(product(r, k_n)?)?,
                s_n: rd.f32s(k_n)?,
                v_n: rd.f32s(product(k_n, q)?)?,
            }),
            other => return Err(DecodeError::Malformed(format!("unknown kind {other}"))),
        };
        matrices.push(CompressedMatrix { name, orig_dims: dims, payload });
    }
    let body_end = rd.pos;
    let stored = rd.u32()?;
    if rd.pos != bytes.len() {
        return Err(DecodeError::Malformed("trailing bytes".into()));
    }
    if crc32fast::hash(&bytes[..body_end]) != stored {
        return Err(DecodeError::CrcMismatch);
    }
    Ok(CompressedUpdate { client_id, sample_count, matrices })
}

/// Bytes occupied by the fixed header, per-matrix metadata and CRC, i.e.
/// everything except the f32 payload.
pub fn framing_bytes(c: &CompressedUpdate) -> usize {
    let per_matrix: usize = c.matrices.iter().map(|m| 2 + m.name.len() + 2 + 4 * m.orig_dims.len() + 20).sum();
    4 + 2 + 4 + 8 + 4 + per_matrix + 4
}
