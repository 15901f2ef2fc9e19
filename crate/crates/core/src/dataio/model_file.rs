//! Binary model file, all integers and reals little-endian:
//!
//! ```text
//! magic        8 bytes  "BMNETMDL"
//! version      u32
//! input shape  3 × u32  (channels, height, width)
//! architecture str      (u32 byte length + UTF-8, layer notation)
//! seed         u64
//! config       str      (digest of the training configuration)
//! blocks       u32 count, then per conv/fc layer in network order:
//!   name       str
//!   kind       u8       0 = classical (weight, bias), 1 = BM (V0, V1, bias)
//!   tensors    u32 count, each: u32 rank, rank × u32 dims, f64 payload
//! checksum     32 bytes SHA-256 of everything above
//! ```
//!
//! `NEG_INF` entries are stored as IEEE −∞ bit patterns.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::bm::BmWeights;
use crate::error::{Error, Result};
use crate::layers::{LayerParams, NetworkSpec};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"BMNETMDL";
pub const FORMAT_VERSION: u32 = 1;

/// Provenance stored next to the parameters.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ModelMeta {
    pub seed: u64,
    pub config_digest: String,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len());
        self.0.extend_from_slice(s.as_bytes());
    }
    fn tensor(&mut self, t: &Tensor) {
        self.u32(t.rank());
        for &d in t.shape() {
            self.u32(d);
        }
        for v in t.data() {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
}

pub fn encode_model(net: &NetworkSpec, meta: &ModelMeta) -> Result<Vec<u8>> {
    net.check_params()?;
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(FORMAT_VERSION as usize);
    for d in net.input_shape() {
        w.u32(d);
    }
    w.str(&net.architecture());
    w.u64(meta.seed);
    w.str(&meta.config_digest);
    let weighted = net.convertible_layers();
    w.u32(weighted.len());
    for name in &weighted {
        w.str(name);
        match &net.params[name] {
            LayerParams::Classical { weight, bias } => {
                w.u8(0);
                w.u32(2);
                w.tensor(weight);
                w.tensor(bias);
            }
            LayerParams::Bm(bw) => {
                w.u8(1);
                w.u32(3);
                w.tensor(&bw.v0);
                w.tensor(&bw.v1);
                w.tensor(&bw.bias);
            }
        }
    }
    let digest = Sha256::digest(&w.0);
    w.0.extend_from_slice(&digest);
    Ok(w.0)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::ModelFile {
            offset: self.pos,
            message: message.into(),
        }
    }
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.err(format!("truncated: need {n} more bytes")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()?;
        let at = self.pos;
        let bytes = self.take(n)?.to_vec();
        String::from_utf8(bytes).map_err(|_| Error::ModelFile {
            offset: at,
            message: "invalid UTF-8".into(),
        })
    }
    fn tensor(&mut self) -> Result<Tensor> {
        let rank = self.u32()?;
        if rank > crate::tensor::MAX_RANK {
            return Err(self.err(format!("tensor rank {rank} too large")));
        }
        let dims = (0..rank).map(|_| self.u32()).collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| self.err("tensor too large"))?)?;
        let data: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if data.iter().any(|v| v.is_nan()) {
            return Err(self.err("NaN in tensor payload"));
        }
        Tensor::new(&dims, data).map_err(|e| self.err(e.to_string()))
    }
}

pub fn decode_model(bytes: &[u8]) -> Result<(NetworkSpec, ModelMeta)> {
    if bytes.len() < MAGIC.len() + 32 {
        return Err(Error::ModelFile {
            offset: bytes.len(),
            message: "truncated: file shorter than header and checksum".into(),
        });
    }
    if &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::ModelFile {
            offset: 0,
            message: "bad magic".into(),
        });
    }
    let body = &bytes[..bytes.len() - 32];
    let mut r = Reader { buf: body, pos: MAGIC.len() };
    let version = r.u32()?;
    if version != FORMAT_VERSION as usize {
        return Err(Error::ModelFile {
            offset: MAGIC.len(),
            message: format!("unsupported format version {version} (expected {FORMAT_VERSION})"),
        });
    }
    let input = [r.u32()?, r.u32()?, r.u32()?];
    let arch_at = r.pos;
    let arch = r.str()?;
    let meta = ModelMeta {
        seed: r.u64()?,
        config_digest: r.str()?,
    };
    let mut net = NetworkSpec::parse(&arch, input).map_err(|e| Error::ModelFile {
        offset: arch_at,
        message: format!("architecture: {e}"),
    })?;
    let blocks = r.u32()?;
    for _ in 0..blocks {
        let at = r.pos;
        let name = r.str()?;
        let kind = r.u8()?;
        let count = r.u32()?;
        let tensors = (0..count).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
        let layer = net.layer(&name).ok_or_else(|| Error::ModelFile {
            offset: at,
            message: format!("block for unknown layer `{name}`"),
        })?;
        let is_bm = layer.kind.is_bm();
        let mismatch = |m: &str| Error::ModelFile {
            offset: at,
            message: format!("layer `{name}`: {m}"),
        };
        let params = match (kind, is_bm, tensors.len()) {
            (0, false, 2) => {
                let mut it = tensors.into_iter();
                LayerParams::Classical {
                    weight: it.next().unwrap(),
                    bias: it.next().unwrap(),
                }
            }
            (1, true, 3) => {
                let geometry = net.geometry_of(&name)?;
                let mut it = tensors.into_iter();
                LayerParams::Bm(BmWeights {
                    v0: it.next().unwrap(),
                    v1: it.next().unwrap(),
                    bias: it.next().unwrap(),
                    geometry,
                })
            }
            _ => return Err(mismatch("block kind or tensor count disagrees with the architecture")),
        };
        if net.params.insert(name.clone(), params).is_some() {
            return Err(mismatch("duplicate block"));
        }
    }
    if r.pos != body.len() {
        return Err(r.err("trailing bytes before checksum"));
    }
    if Sha256::digest(body).as_slice() != &bytes[body.len()..] {
        return Err(Error::ModelFile {
            offset: body.len(),
            message: "checksum mismatch".into(),
        });
    }
    net.check_params().map_err(|e| Error::ModelFile {
        offset: body.len(),
        message: e.to_string(),
    })?;
    Ok((net, meta))
}

pub fn save_model(net: &NetworkSpec, meta: &ModelMeta, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_model(net, meta)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<(NetworkSpec, ModelMeta)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_model(&bytes)
}
