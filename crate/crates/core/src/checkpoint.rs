//! Binary checkpoint format.
//!
//! ```text
//! "PEMF" | version: u32 | config length: u64 | config JSON bytes
//!        | record count: u64
//!        | { name length: u32 | name bytes | rank: u32 | extents: u64 × rank | f64 payload }*
//! ```
//!
//! All integers and floats are little-endian. Records are written in name
//! order, so saving the same checkpoint twice yields identical bytes.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::NetworkConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::norm::RunningStats;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"PEMF";
pub const FORMAT_VERSION: u32 = 1;

/// ChaCha RNG position, enough to resume the exact random stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed_hex: String,
    pub stream: u64,
    /// Decimal `u128` word position.
    pub word_pos: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub network: NetworkConfig,
    /// `(H, W)` the network was trained at.
    pub input_size: (usize, usize),
    pub epoch: usize,
    pub adam_step: u64,
    pub rng: Option<RngState>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamMoments {
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParamStore,
    pub moments: AdamMoments,
}

/// Mean, variance and update count, gathered from separate records.
type StatsParts = (Option<Vec<f64>>, Option<Vec<f64>>, Option<u64>);

const PARAM: &str = "param/";
const STATS: &str = "stats/";
const ADAM_M: &str = "adam.m/";
const ADAM_V: &str = "adam.v/";

impl Checkpoint {
    pub fn from_model(model: &Model, input_size: (usize, usize)) -> Self {
        Self {
            meta: CheckpointMeta {
                network: model.config.clone(),
                input_size,
                epoch: 0,
                adam_step: 0,
                rng: None,
            },
            params: model.params.clone(),
            moments: AdamMoments::default(),
        }
    }

    pub fn model(&self) -> Result<Model> {
        Model::from_params(self.meta.network.clone(), self.params.clone())
    }

    fn records(&self) -> Vec<(String, Tensor)> {
        let mut out: BTreeMap<String, Tensor> = BTreeMap::new();
        for (k, t) in &self.params.tensors {
            out.insert(format!("{PARAM}{k}"), t.clone());
        }
        for (k, s) in &self.params.stats {
            let c = s.channels();
            out.insert(
                format!("{STATS}{k}/mean"),
                Tensor::new(vec![c], s.mean.clone()).expect("stats length"),
            );
            out.insert(
                format!("{STATS}{k}/var"),
                Tensor::new(vec![c], s.var.clone()).expect("stats length"),
            );
            out.insert(format!("{STATS}{k}/updates"), Tensor::scalar(s.updates as f64));
        }
        for (k, t) in &self.moments.m {
            out.insert(format!("{ADAM_M}{k}"), t.clone());
        }
        for (k, t) in &self.moments.v {
            out.insert(format!("{ADAM_V}{k}"), t.clone());
        }
        out.into_iter().collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta)
            .map_err(|e| Error::Checkpoint(format!("config encode: {e}")))?;
        let records = self.records();
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        buf.extend_from_slice(&meta);
        buf.extend_from_slice(&(records.len() as u64).to_le_bytes());
        for (name, t) in &records {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic bytes".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let meta_len = r.len_u64()?;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| Error::Checkpoint(format!("config decode: {e}")))?;
        let count = r.u64()?;
        let mut params = ParamStore::default();
        let mut stats_parts: BTreeMap<String, StatsParts> = BTreeMap::new();
        let mut moments = AdamMoments::default();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Checkpoint("record name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.len_u64()?);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|&n| n <= r.remaining() / 8)
                .ok_or_else(|| Error::Checkpoint(format!("record '{name}' overruns the file")))?;
            let data: Vec<f64> = r
                .take(numel * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(shape, data)
                .map_err(|e| Error::Checkpoint(format!("record '{name}': {e}")))?;
            if let Some(k) = name.strip_prefix(PARAM) {
                params.tensors.insert(k.to_string(), t);
            } else if let Some(k) = name.strip_prefix(ADAM_M) {
                moments.m.insert(k.to_string(), t);
            } else if let Some(k) = name.strip_prefix(ADAM_V) {
                moments.v.insert(k.to_string(), t);
            } else if let Some(rest) = name.strip_prefix(STATS) {
                let (k, field) = rest
                    .rsplit_once('/')
                    .ok_or_else(|| Error::Checkpoint(format!("bad stats record '{name}'")))?;
                let entry = stats_parts.entry(k.to_string()).or_default();
                match field {
                    "mean" => entry.0 = Some(t.into_data()),
                    "var" => entry.1 = Some(t.into_data()),
                    "updates" => entry.2 = Some(t.item() as u64),
                    _ => return Err(Error::Checkpoint(format!("bad stats record '{name}'"))),
                }
            } else {
                return Err(Error::Checkpoint(format!("unknown record '{name}'")));
            }
        }
        if r.remaining() != 0 {
            return Err(Error::Checkpoint("trailing bytes after last record".into()));
        }
        for (k, parts) in stats_parts {
            match parts {
                (Some(mean), Some(var), Some(updates)) if mean.len() == var.len() => {
                    params.stats.insert(k, RunningStats { mean, var, updates });
                }
                _ => return Err(Error::Checkpoint(format!("incomplete running stats for '{k}'"))),
            }
        }
        Ok(Self {
            meta,
            params,
            moments,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::Checkpoint("unexpected end of file".into()));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len_u64(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("length overflows usize".into()))
    }
}
