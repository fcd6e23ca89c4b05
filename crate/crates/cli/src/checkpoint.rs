//! The DDCK checkpoint file: a flat named-tensor table plus a JSON metadata
//! trailer. Layout: magic "DDCK", u32 version, u32 tensor count; per tensor a
//! u16 name length, the UTF-8 name, a u8 rank, rank u64 dims, then the f32
//! payload; finally a u32 length and the metadata JSON. All integers and
//! floats are little-endian. Tensors are stored sorted by name, so identical
//! contents always produce identical bytes.

use std::collections::BTreeMap;
use std::path::Path;

use ddc_core::denoiser::VarianceMode;
use ddc_core::error::{Error, Result};
use ddc_core::features::FeatureExtractor;
use ddc_core::nn::{Backbone, NetConfig};
use ddc_core::Tensor;

use crate::config::{NetSpec, ScheduleSpec};

const MAGIC: &[u8; 4] = b"DDCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CheckpointMeta {
    pub config_hash: String,
    pub revision: String,
    pub step_count: u64,
    pub schedule: ScheduleSpec,
    pub feature_seed: u64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub denoiser_net: Option<NetSpec>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub denoiser_variance: Option<VarianceMode>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub consistency_net: Option<NetSpec>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub tensors: BTreeMap<String, Tensor>,
    pub meta: CheckpointMeta,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(corrupt("file truncated"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

impl Checkpoint {
    pub fn new(meta: CheckpointMeta) -> Self {
        Checkpoint { tensors: BTreeMap::new(), meta }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let count = u32::try_from(self.tensors.len())
            .map_err(|_| Error::invalid("too many tensors for a checkpoint"))?;
        out.extend_from_slice(&count.to_le_bytes());
        for (name, tensor) in &self.tensors {
            let name_len = u16::try_from(name.len())
                .map_err(|_| Error::invalid(format!("tensor name too long: {name}")))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let rank = u8::try_from(tensor.shape().len())
                .map_err(|_| Error::invalid("tensor rank exceeds 255"))?;
            out.push(rank);
            for &d in tensor.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let meta = serde_json::to_vec(&self.meta).expect("metadata serializes");
        let meta_len = u32::try_from(meta.len())
            .map_err(|_| Error::invalid("metadata too large"))?;
        out.extend_from_slice(&meta_len.to_le_bytes());
        out.extend_from_slice(&meta);
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Checkpoint> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(corrupt("bad magic bytes, not a DDCK checkpoint"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(corrupt(format!("unsupported checkpoint version {version}")));
        }
        let count = r.u32()? as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| corrupt("tensor name is not UTF-8"))?
                .to_string();
            let rank = *r.take(1)?.first().unwrap() as usize;
            let mut shape = Vec::with_capacity(rank);
            let mut numel: usize = 1;
            for _ in 0..rank {
                let d = r.u64()?;
                let d = usize::try_from(d).map_err(|_| corrupt("dimension overflow"))?;
                numel = numel
                    .checked_mul(d)
                    .ok_or_else(|| corrupt("element count overflow"))?;
                shape.push(d);
            }
            let bytes = numel
                .checked_mul(4)
                .ok_or_else(|| corrupt("payload size overflow"))?;
            let payload = r.take(bytes)?;
            let data: Vec<f32> = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if tensors.insert(name.clone(), Tensor::new(shape, data)?).is_some() {
                return Err(corrupt(format!("duplicate tensor name {name}")));
            }
        }
        let meta_len = r.u32()? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| corrupt(format!("metadata does not parse: {e}")))?;
        if r.pos != buf.len() {
            return Err(corrupt("trailing bytes after metadata"));
        }
        Ok(Checkpoint { tensors, meta })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)
            .map_err(|e| Error::invalid(format!("cannot write {}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let buf = std::fs::read(path)
            .map_err(|e| Error::invalid(format!("cannot read checkpoint {}: {e}", path.display())))?;
        Checkpoint::from_bytes(&buf)
    }

    pub fn insert_named(&mut self, prefix: &str, visit: impl FnOnce(&mut dyn FnMut(String, &Tensor))) {
        let tensors = &mut self.tensors;
        visit(&mut |name, t| {
            tensors.insert(format!("{prefix}.{name}"), t.clone());
        });
    }

    pub fn insert_backbone(&mut self, prefix: &str, net: &Backbone) {
        self.insert_named(prefix, |f| net.visit(f));
    }

    pub fn insert_features(&mut self, extractor: &FeatureExtractor) {
        self.insert_named("features", |f| extractor.visit(f));
    }

    pub fn backbone(&self, prefix: &str, cfg: NetConfig) -> Result<Backbone> {
        Backbone::from_named(cfg, |name| self.tensors.get(&format!("{prefix}.{name}")).cloned())
    }

    pub fn features(&self) -> Result<FeatureExtractor> {
        FeatureExtractor::from_named(|name| self.tensors.get(&format!("features.{name}")).cloned())
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        let key = format!("{prefix}.");
        self.tensors.keys().any(|k| k.starts_with(&key))
    }

    /// Copies every tensor under `prefix.` from `other`, preserving bytes.
    pub fn copy_prefix_from(&mut self, other: &Checkpoint, prefix: &str) {
        let key = format!("{prefix}.");
        for (name, t) in &other.tensors {
            if name.starts_with(&key) {
                self.tensors.insert(name.clone(), t.clone());
            }
        }
    }
}
