//! Binary checkpoint format.
//!
//! ```text
//! magic    8 bytes  "XVIEWCKP"
//! version  u32 LE
//! config   u64 LE length, then ModelConfig as JSON
//! tensors  u32 LE count, then per tensor:
//!            u32 LE name length, name (UTF-8)
//!            u32 LE rank, rank × u64 LE dims
//!            f64 LE values, row-major
//! trailer  32 bytes SHA-256 of everything above
//! ```

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, Parameters};

pub const MAGIC: &[u8; 8] = b"XVIEWCKP";
pub const VERSION: u32 = 1;

fn fmt_err(detail: impl Into<String>) -> Error {
    Error::Format {
        what: "checkpoint",
        detail: detail.into(),
    }
}

fn encode_tensors(params: &Parameters, out: &mut Vec<u8>) {
    let named = params.named();
    out.extend_from_slice(&(named.len() as u32).to_le_bytes());
    for (name, t) in named {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

pub fn to_hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// SHA-256 over the tensor section; identical parameters always hash alike.
pub fn params_hash(params: &Parameters) -> String {
    let mut buf = Vec::with_capacity(params.num_values() * 8 + 4096);
    encode_tensors(params, &mut buf);
    to_hex(&Sha256::digest(&buf))
}

pub fn encode(model: &Model) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(model.params.num_values() * 8 + 8192);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = serde_json::to_vec(&model.config)?;
    out.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
    out.extend_from_slice(&cfg);
    encode_tensors(&model.params, &mut out);
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            fmt_err(format!("truncated at byte {}", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, v: u64) -> Result<usize> {
        usize::try_from(v)
            .ok()
            .filter(|&n| n <= self.buf.len())
            .ok_or_else(|| fmt_err(format!("implausible length {v}")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Model> {
    if bytes.len() < MAGIC.len() + 32 {
        return Err(fmt_err("file too short"));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 32);
    if &body[..MAGIC.len()] != MAGIC {
        return Err(fmt_err("bad magic"));
    }
    if Sha256::digest(body).as_slice() != trailer {
        return Err(fmt_err("content hash mismatch"));
    }
    let mut r = Reader { buf: body, pos: MAGIC.len() };
    let version = r.u32()?;
    if version != VERSION {
        return Err(fmt_err(format!("unsupported version {version}")));
    }
    let n = r.u64()?;
    let n = r.len(n)?;
    let config: ModelConfig =
        serde_json::from_slice(r.take(n)?).map_err(|e| fmt_err(format!("config: {e}")))?;
    config.validate()?;
    let mut params = Parameters::zeros(&config);
    let count = r.u32()? as usize;
    let expected: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
    if count != expected.len() {
        return Err(fmt_err(format!("{count} tensors, config implies {}", expected.len())));
    }
    for (t, want) in params.tensors_mut().into_iter().zip(&expected) {
        let nlen = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(nlen)?).map_err(|_| fmt_err("tensor name is not UTF-8"))?;
        if name != want {
            return Err(fmt_err(format!("expected tensor {want}, found {name}")));
        }
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            let d = r.u64()?;
            shape.push(r.len(d)?);
        }
        if shape != t.shape() {
            return Err(fmt_err(format!("{name}: shape {shape:?}, config implies {:?}", t.shape())));
        }
        let raw = r.take(t.len() * 8)?;
        for (dst, chunk) in t.data_mut().iter_mut().zip(raw.chunks_exact(8)) {
            *dst = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        }
    }
    if r.pos != body.len() {
        return Err(fmt_err("trailing bytes before hash"));
    }
    Model::new(config, params)
}

pub fn save(model: &Model, path: &std::path::Path) -> Result<()> {
    std::fs::write(path, encode(model)?)?;
    Ok(())
}

pub fn load(path: &std::path::Path) -> Result<Model> {
    decode(&std::fs::read(path)?)
}

/// Hash stored in an encoded checkpoint's trailer.
pub fn trailer_hash(bytes: &[u8]) -> Result<String> {
    if bytes.len() < 32 {
        return Err(fmt_err("file too short"));
    }
    Ok(to_hex(&bytes[bytes.len() - 32..]))
}
