//! Model checkpoints.
//!
//! Binary layout (little-endian):
//!
//! ```text
//! b"SPCK" | version: u16 | header_len: u32 | header: JSON | values: f64 × Σ param sizes
//! ```
//!
//! The JSON header carries the architecture echo, training provenance and
//! the ordered `(name, shape)` parameter index. Values are stored at full
//! precision, so load → save reproduces the input bytes exactly.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ParserModel, ReidConfig, ReidModel};
use crate::ops::ParamStore;
use crate::parsing::{CoarseGrouping, ParserConfig};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SPCK";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    Reid(ReidConfig),
    Parser {
        config: ParserConfig,
        grouping: CoarseGrouping,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub phase: u32,
    pub iteration: usize,
    pub seed: u64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub architecture: Architecture,
    pub provenance: Provenance,
    pub params: Vec<(String, Tensor)>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    architecture: Architecture,
    provenance: Provenance,
    params: Vec<ParamEntry>,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

fn snapshot(store: &ParamStore) -> Vec<(String, Tensor)> {
    store.iter().map(|(_, n, t)| (n.to_string(), t.clone())).collect()
}

fn restore(store: &mut ParamStore, params: &[(String, Tensor)]) -> Result<()> {
    if params.len() != store.len() {
        return Err(Error::Parameter(format!(
            "checkpoint has {} parameters, architecture expects {}",
            params.len(),
            store.len()
        )));
    }
    for (name, t) in params {
        let id = store
            .id_of(name)
            .ok_or_else(|| Error::Parameter(format!("unexpected parameter {name:?}")))?;
        if store.get(id).shape() != t.shape() {
            return Err(Error::dim(format!(
                "parameter {name:?}: checkpoint shape {:?}, architecture shape {:?}",
                t.shape(),
                store.get(id).shape()
            )));
        }
        *store.get_mut(id) = t.clone();
    }
    Ok(())
}

impl ModelCheckpoint {
    pub fn from_reid(model: &ReidModel, provenance: Provenance) -> Self {
        Self {
            architecture: Architecture::Reid(model.config().clone()),
            provenance,
            params: snapshot(&model.params),
        }
    }

    pub fn from_parser(model: &ParserModel, provenance: Provenance) -> Self {
        Self {
            architecture: Architecture::Parser {
                config: model.config().clone(),
                grouping: model.grouping.clone(),
            },
            provenance,
            params: snapshot(&model.params),
        }
    }

    pub fn to_reid(&self) -> Result<ReidModel> {
        let Architecture::Reid(cfg) = &self.architecture else {
            return Err(Error::Parameter("checkpoint does not hold a re-id model".into()));
        };
        let mut m = ReidModel::new(cfg, 0)?;
        restore(&mut m.params, &self.params)?;
        Ok(m)
    }

    pub fn to_parser(&self) -> Result<ParserModel> {
        let Architecture::Parser { config, grouping } = &self.architecture else {
            return Err(Error::Parameter("checkpoint does not hold a parser".into()));
        };
        let mut m = ParserModel::new(config, grouping.clone(), 0)?;
        restore(&mut m.params, &self.params)?;
        Ok(m)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let header = Header {
            architecture: self.architecture.clone(),
            provenance: self.provenance.clone(),
            params: self
                .params
                .iter()
                .map(|(n, t)| ParamEntry {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let n_values: usize = self.params.iter().map(|(_, t)| t.len()).sum();
        let mut out = Vec::with_capacity(10 + json.len() + 8 * n_values);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.params {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let corrupt = |offset: usize, reason: &str| Error::Corrupt {
            offset,
            reason: reason.to_string(),
        };
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(corrupt(0, "bad magic, expected SPCK"));
        }
        if bytes.len() < 10 {
            return Err(corrupt(bytes.len(), "truncated fixed header"));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(Error::Version {
                found: version,
                expected: VERSION,
            });
        }
        let hlen = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        if bytes.len() < 10 + hlen {
            return Err(corrupt(bytes.len(), "truncated JSON header"));
        }
        let header: Header =
            serde_json::from_slice(&bytes[10..10 + hlen]).map_err(|e| corrupt(10, &format!("bad header: {e}")))?;
        let mut pos = 10 + hlen;
        let mut params = Vec::with_capacity(header.params.len());
        for entry in header.params {
            let n: usize = entry.shape.iter().product();
            if bytes.len() - pos < 8 * n {
                return Err(corrupt(
                    bytes.len(),
                    &format!("truncated values of {:?} (starting at byte {pos})", entry.name),
                ));
            }
            let data = bytes[pos..pos + 8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(&entry.shape, data).map_err(|e| corrupt(pos, &e.to_string()))?;
            pos += 8 * n;
            params.push((entry.name, t));
        }
        if pos != bytes.len() {
            return Err(corrupt(pos, "trailing bytes"));
        }
        Ok(Self {
            architecture: header.architecture,
            provenance: header.provenance,
            params,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        crate::output::write_atomic(path, &self.encode()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}
