//! Versioned tensor container: safetensors payload with a JSON manifest in the
//! header metadata.

use std::collections::HashMap;
use std::path::Path;

use markupdm_nn::{ParamStore, Tensor};
use safetensors::tensor::{Dtype, TensorView};
use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::tokenizer::hex;

pub const FORMAT: &str = "markupdm-checkpoint";
pub const VERSION: u32 = 1;
/// The only metadata key; a single key keeps the header byte-stable.
const META_KEY: &str = "markupdm";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("safetensors: {0}")]
    Format(#[from] safetensors::SafeTensorError),
    #[error("manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("not a {FORMAT} v{VERSION} file: {0}")]
    Header(String),
    #[error("tensor {0:?} missing from checkpoint")]
    MissingTensor(String),
    #[error("tensor {name:?} has shape {found:?}, model expects {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("{what} hash mismatch: checkpoint has {stored}, runtime has {actual}")]
    Lineage {
        what: &'static str,
        stored: String,
        actual: String,
    },
}

#[derive(Serialize, serde::Deserialize)]
struct Envelope<M> {
    format: String,
    version: u32,
    manifest: M,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

/// Content hash in git's blob style (`"blob <len>\0"` prefix), over sha256.
pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex(&h.finalize())
}

pub fn to_bytes<M: Serialize>(store: &ParamStore<f32>, manifest: &M) -> Result<Vec<u8>, CheckpointError> {
    let raw: Vec<(String, Vec<usize>, Vec<u8>)> = store
        .iter()
        .map(|(_, name, t)| {
            let bytes = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
            (name.to_string(), t.shape().to_vec(), bytes)
        })
        .collect();
    let views = raw
        .iter()
        .map(|(n, s, b)| Ok((n.clone(), TensorView::new(Dtype::F32, s.clone(), b)?)))
        .collect::<Result<Vec<_>, safetensors::SafeTensorError>>()?;
    let envelope = Envelope {
        format: FORMAT.into(),
        version: VERSION,
        manifest,
    };
    let meta = HashMap::from([(META_KEY.to_string(), serde_json::to_string(&envelope)?)]);
    Ok(safetensors::serialize(views, Some(meta))?)
}

/// Writes the file and returns its sha256.
pub fn save<M: Serialize>(path: &Path, store: &ParamStore<f32>, manifest: &M) -> Result<String, CheckpointError> {
    let bytes = to_bytes(store, manifest)?;
    std::fs::write(path, &bytes)?;
    Ok(sha256_hex(&bytes))
}

pub struct Loaded<M> {
    pub tensors: HashMap<String, Tensor<f32>>,
    pub manifest: M,
    pub sha256: String,
}

pub fn from_bytes<M: DeserializeOwned>(bytes: &[u8]) -> Result<Loaded<M>, CheckpointError> {
    let (_, meta) = safetensors::SafeTensors::read_metadata(bytes)?;
    let text = meta
        .metadata()
        .as_ref()
        .and_then(|m| m.get(META_KEY))
        .ok_or_else(|| CheckpointError::Header("no manifest".into()))?;
    let env: Envelope<serde_json::Value> = serde_json::from_str(text)?;
    if env.format != FORMAT || env.version != VERSION {
        return Err(CheckpointError::Header(format!("{} v{}", env.format, env.version)));
    }
    let manifest = serde_json::from_value(env.manifest)?;
    let st = safetensors::SafeTensors::deserialize(bytes)?;
    let mut tensors = HashMap::new();
    for (name, view) in st.tensors() {
        if view.dtype() != Dtype::F32 {
            return Err(CheckpointError::Header(format!("tensor {name} is {:?}", view.dtype())));
        }
        let data = view
            .data()
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.insert(name, Tensor::new(view.shape().to_vec(), data));
    }
    Ok(Loaded {
        tensors,
        manifest,
        sha256: sha256_hex(bytes),
    })
}

pub fn load<M: DeserializeOwned>(path: &Path) -> Result<Loaded<M>, CheckpointError> {
    from_bytes(&std::fs::read(path)?)
}

/// Copies every tensor of `store` from `tensors` by name, checking shapes.
pub fn restore(store: &mut ParamStore<f32>, tensors: &HashMap<String, Tensor<f32>>) -> Result<(), CheckpointError> {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.name(id).to_string();
        let t = tensors.get(&name).ok_or_else(|| CheckpointError::MissingTensor(name.clone()))?;
        if t.shape() != store.get(id).shape() {
            return Err(CheckpointError::ShapeMismatch {
                name,
                expected: store.get(id).shape().to_vec(),
                found: t.shape().to_vec(),
            });
        }
        store.set(id, t.clone());
    }
    Ok(())
}
