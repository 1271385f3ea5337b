//! Binary checkpoints.
//!
//! ```text
//! "MLMC" | version u32 | layers, hidden, heads, max_len, vocab: u32 | dropout f64
//! meta count u32 | (key len u16, key, value u64)*
//! tensor count u32 | (name len u16, name, ndims u8, dims u32*, f32 data)*
//! ```
//! All integers and floats are little-endian.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::{ParamSet, Tensor};

const MAGIC: &[u8; 4] = b"MLMC";
const VERSION: u32 = 1;
/// Prefix of optimizer-state tensors stored next to the model.
pub const OPT_PREFIX: &str = "adam.";

/// Model configuration, named f32 tensors and integer metadata (training
/// cursor and the like).
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub meta: BTreeMap<String, u64>,
    pub tensors: ParamSet<f32>,
}

impl Checkpoint {
    pub fn new(config: ModelConfig, tensors: ParamSet<f32>) -> Self {
        Checkpoint { config, meta: BTreeMap::new(), tensors }
    }

    /// The model tensors, without optimizer state (names under `adam.`).
    pub fn model(&self) -> Result<Model<f32>> {
        let mut params = ParamSet::new();
        for (name, t) in self.tensors.iter().filter(|(n, _)| !n.starts_with(OPT_PREFIX)) {
            params.push(name, t.clone())?;
        }
        Model::from_params(self.config, params)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let c = &self.config;
        for v in [c.layers, c.hidden, c.heads, c.max_len, c.vocab] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&c.dropout.to_le_bytes());
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        for (k, v) in &self.meta {
            put_name(&mut out, k);
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in self.tensors.iter() {
            put_name(&mut out, name);
            out.push(t.shape.len() as u8);
            for &d in &t.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &x in &t.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Data("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Data(format!("unsupported checkpoint version {version}")));
        }
        let mut dims = [0usize; 5];
        for d in &mut dims {
            *d = r.u32()? as usize;
        }
        let dropout = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
        let config = ModelConfig {
            layers: dims[0],
            hidden: dims[1],
            heads: dims[2],
            max_len: dims[3],
            vocab: dims[4],
            dropout,
        };
        let mut meta = BTreeMap::new();
        for _ in 0..r.u32()? {
            let k = r.name()?;
            let v = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
            meta.insert(k, v);
        }
        let mut tensors = ParamSet::new();
        for _ in 0..r.u32()? {
            let name = r.name()?;
            let nd = r.take(1)?[0] as usize;
            let shape = (0..nd).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Data("tensor too large".into()))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors
                .push(name, Tensor { shape, data })
                .map_err(|e| Error::Data(e.to_string()))?;
        }
        if r.at != bytes.len() {
            return Err(Error::Data("trailing bytes after checkpoint".into()));
        }
        Ok(Checkpoint { config, meta, tensors })
    }
}

fn put_name(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u16).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Data("checkpoint is truncated".into()))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn name(&mut self) -> Result<String> {
        let n = u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")) as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Data("tensor name is not UTF-8".into()))
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    // Write to a sibling and rename so an interrupted save leaves the old file intact.
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&ckpt.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
