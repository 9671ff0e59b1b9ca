//! Single-file model format.
//!
//! ```text
//! "DLF1"                      magic
//! u32                         version (1)
//! u32 + bytes                 config, UTF-8 JSON
//! u32                         tensor count
//! per tensor:
//!   u32 + bytes               name, UTF-8
//!   u32, u32 × rank           shape
//!   f32 × numel               data
//! ```
//! All integers and floats are little-endian.

use std::path::Path;

use dlf_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::basenet::BaseNetConfig;
use crate::error::{Error, Result};
use crate::hypernet::{HyperConfig, WeightLearningNet};
use crate::model::Model;
use crate::operators::GammaCodec;
use crate::train::EvalReport;

pub const MAGIC: &[u8; 4] = b"DLF1";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    base: BaseNetConfig,
    hyper: HyperConfig,
    codec: GammaCodec,
    eval: Option<EvalReport>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn to_bytes(model: &Model) -> Result<Vec<u8>> {
    let header = Header {
        base: model.net.base().clone(),
        hyper: model.net.hyper().clone(),
        codec: model.codec.clone(),
        eval: model.eval.clone(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_u32(&mut out, json.len())?;
    out.extend_from_slice(&json);
    let names = model.net.parameter_names();
    let params = model.net.parameters();
    put_u32(&mut out, names.len())?;
    for (name, t) in names.iter().zip(params) {
        put_u32(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.rank())?;
        for &d in t.shape() {
            put_u32(&mut out, d)?;
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<Model> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = r.u32()? as u32;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let len = r.u32()?;
    let header: Header = serde_json::from_slice(r.take(len)?)?;
    let count = r.u32()?;
    let mut named = Vec::with_capacity(count);
    for _ in 0..count {
        let n = r.u32()?;
        let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|e| Error::Format(e.to_string()))?;
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let numel = numel.ok_or_else(|| Error::Format(format!("{name}: shape overflow")))?;
        let bytes = r.take(numel.checked_mul(4).ok_or_else(|| Error::Format("size overflow".into()))?)?;
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        named.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != buf.len() {
        return Err(Error::Format(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    if header.hyper.gamma_dim != header.codec.dim() {
        return Err(Error::Format("γ length does not match the operator encoding".into()));
    }
    let net = WeightLearningNet::from_parameters(header.base, header.hyper, named)?;
    Ok(Model {
        net,
        codec: header.codec,
        eval: header.eval,
    })
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(model)?).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load(path: &Path) -> Result<Model> {
    let buf = std::fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    from_bytes(&buf)
}
