//! Versioned binary container for parameter sets.
//!
//! Layout (little endian): magic `MODELAB\0`, `u32` version, `u64` header
//! length, JSON header, `u32` tensor count, then per tensor a `u32` name
//! length, the UTF-8 name, a `u32` rank, `u64` dims and `f64` data.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterConfig, AdapterStack};
use crate::backbone::{Backbone, BackboneConfig};
use crate::error::{LabError, LabResult};
use crate::params::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"MODELAB\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub kind: String,
    pub seed: u64,
    pub config: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: Header,
    pub params: ParamStore,
}

fn err(msg: impl Into<String>) -> LabError {
    LabError::Checkpoint(msg.into())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> LabResult<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| err("truncated checkpoint"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> LabResult<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> LabResult<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

impl Checkpoint {
    pub fn encode(&self) -> LabResult<Vec<u8>> {
        let header = serde_json::to_vec(&self.header).map_err(|e| err(e.to_string()))?;
        let mut out = Vec::with_capacity(64 + header.len() + self.params.numel() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in self.params.names().iter().zip(self.params.tensors()) {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> LabResult<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(err("not a checkpoint file"));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(err(format!("unsupported checkpoint version {version}")));
        }
        let hlen = r.u64()? as usize;
        let header: Header = serde_json::from_slice(r.take(hlen)?).map_err(|e| err(e.to_string()))?;
        let count = r.u32()?;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let nlen = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(nlen)?)
                .map_err(|_| err("tensor name is not UTF-8"))?
                .to_string();
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(8).ok_or_else(|| err("tensor too large"))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            params.push(name, Tensor::new(shape, data).map_err(|e| err(e.to_string()))?);
        }
        if r.pos != bytes.len() {
            return Err(err("trailing bytes after last tensor"));
        }
        Ok(Self { header, params })
    }

    pub fn save(&self, path: &Path) -> LabResult<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> LabResult<Self> {
        Self::decode(&fs::read(path)?)
    }
}

fn adopt(target: &mut ParamStore, source: &ParamStore) -> LabResult<()> {
    if target.names() != source.names() {
        return Err(err("parameter names do not match the configured architecture"));
    }
    for i in 0..target.len() {
        if target.get(i).shape() != source.get(i).shape() {
            return Err(err(format!("shape mismatch for {}", target.name(i))));
        }
        *target.get_mut(i) = source.get(i).clone();
    }
    Ok(())
}

impl Backbone {
    pub fn to_checkpoint(&self) -> LabResult<Checkpoint> {
        Ok(Checkpoint {
            header: Header {
                kind: "backbone".into(),
                seed: self.config.seed,
                config: serde_json::to_value(&self.config).map_err(|e| err(e.to_string()))?,
            },
            params: self.params.clone(),
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> LabResult<Self> {
        if ck.header.kind != "backbone" {
            return Err(err(format!("expected a backbone checkpoint, found {:?}", ck.header.kind)));
        }
        let config: BackboneConfig =
            serde_json::from_value(ck.header.config.clone()).map_err(|e| err(e.to_string()))?;
        let mut bb = Backbone::init(config)?;
        adopt(&mut bb.params, &ck.params)?;
        Ok(bb)
    }
}

#[derive(Serialize, Deserialize)]
struct AdapterHeader {
    backbone: BackboneConfig,
    adapter: AdapterConfig,
}

impl AdapterStack {
    pub fn to_checkpoint(&self, backbone: &BackboneConfig) -> LabResult<Checkpoint> {
        let h = AdapterHeader {
            backbone: backbone.clone(),
            adapter: self.config.clone(),
        };
        Ok(Checkpoint {
            header: Header {
                kind: "adapters".into(),
                seed: self.config.seed,
                config: serde_json::to_value(&h).map_err(|e| err(e.to_string()))?,
            },
            params: self.params.clone(),
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> LabResult<(Self, BackboneConfig)> {
        if ck.header.kind != "adapters" {
            return Err(err(format!("expected an adapter checkpoint, found {:?}", ck.header.kind)));
        }
        let h: AdapterHeader =
            serde_json::from_value(ck.header.config.clone()).map_err(|e| err(e.to_string()))?;
        let mut stack = AdapterStack::new(&h.backbone, h.adapter)?;
        adopt(&mut stack.params, &ck.params)?;
        Ok((stack, h.backbone))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> BackboneConfig {
        BackboneConfig {
            layers: 1,
            model_dim: 8,
            mlp_dim: 16,
            heads: 2,
            image_tokens: 4,
            text_tokens: 4,
            max_len: 6,
            seed: 9,
        }
    }

    #[test]
    fn backbone_round_trip_is_bit_exact() {
        let bb = Backbone::init(tiny()).unwrap();
        let bytes = bb.to_checkpoint().unwrap().encode().unwrap();
        let back = Backbone::from_checkpoint(&Checkpoint::decode(&bytes).unwrap()).unwrap();
        assert_eq!(back, bb);
        assert_eq!(back.to_checkpoint().unwrap().encode().unwrap(), bytes);
    }

    #[test]
    fn adapter_round_trip() {
        let mut s = AdapterStack::new(&tiny(), AdapterConfig { rank: 2, experts: 3, ..AdapterConfig::default() }).unwrap();
        s.perturb_b(4, 0.1);
        let bytes = s.to_checkpoint(&tiny()).unwrap().encode().unwrap();
        let (back, cfg) = AdapterStack::from_checkpoint(&Checkpoint::decode(&bytes).unwrap()).unwrap();
        assert_eq!(cfg, tiny());
        assert_eq!(back, s);
    }

    #[test]
    fn rejects_corruption() {
        let bb = Backbone::init(tiny()).unwrap();
        let bytes = bb.to_checkpoint().unwrap().encode().unwrap();
        assert!(Checkpoint::decode(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::decode(&bad).is_err());
        let mut wrong_version = bytes;
        wrong_version[8] = 99;
        assert!(Checkpoint::decode(&wrong_version).is_err());
    }
}
