use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Adam, Result, SearchError, SearchState};
use crate::autodiff::Tensor;
use crate::network::{ModelSpec, Network};
use crate::topk::TopkOperator;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DMSCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Model weights, operators, and optional optimizer and search state.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub params: Vec<Tensor>,
    pub operators: Vec<TopkOperator>,
    pub adam: Option<Adam>,
    pub search: Option<SearchState>,
}

// bincode cannot decode the spec's untagged and optional fields, so it
// travels as JSON
#[derive(Serialize, Deserialize)]
struct Wire {
    spec: String,
    params: Vec<Tensor>,
    operators: Vec<TopkOperator>,
    adam: Option<Adam>,
    search: Option<SearchState>,
}

impl Checkpoint {
    pub fn of(net: &Network) -> Self {
        Self {
            spec: net.spec().clone(),
            params: net.params().to_vec(),
            operators: net.operators.clone(),
            adam: None,
            search: None,
        }
    }

    pub fn network(&self) -> Result<Network> {
        Ok(Network::from_parts(
            &self.spec,
            self.params.clone(),
            self.operators.clone(),
        )?)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let wire = Wire {
            spec: serde_json::to_string(&self.spec).expect("spec serializes"),
            params: self.params.clone(),
            operators: self.operators.clone(),
            adam: self.adam.clone(),
            search: self.search.clone(),
        };
        bincode::serialize_into(&mut out, &wire).expect("checkpoint serializes");
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(SearchError::Checkpoint("is not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(SearchError::Checkpoint(format!(
                "has schema version {version}; this build reads {CHECKPOINT_VERSION}"
            )));
        }
        let corrupt = |e: &dyn std::fmt::Display| SearchError::Checkpoint(format!("is corrupt: {e}"));
        let w: Wire = bincode::deserialize(&bytes[12..]).map_err(|e| corrupt(&e))?;
        Ok(Self {
            spec: serde_json::from_str(&w.spec).map_err(|e| corrupt(&e))?,
            params: w.params,
            operators: w.operators,
            adam: w.adam,
            search: w.search,
        })
    }

    /// Writes atomically through a sibling temporary file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let io = |e: std::io::Error| SearchError::Checkpoint(format!("{}: {e}", path.display()));
        let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
        tmp.write_all(&self.to_bytes()).map_err(io)?;
        tmp.persist(path).map_err(|e| io(e.error))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| SearchError::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

/// SHA-256 over parameter shapes and little-endian values.
pub fn weight_digest(params: &[Tensor]) -> String {
    let mut h = Sha256::new();
    for p in params {
        h.update((p.shape().len() as u64).to_le_bytes());
        for &d in p.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for v in p.data() {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}
