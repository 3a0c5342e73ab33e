//! Bit-exact checkpoint container.
//!
//! Layout: 8-byte magic `FPLLAB01`, a little-endian u32 header length, a
//! UTF-8 JSON header (kind, config, RNG algorithm, seed lineage, tensor
//! directory), then raw little-endian f32 tensor payloads in header order.
//! Tensor names are written sorted, so identical states produce identical
//! bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{Matrix, RNG_ALGORITHM};

use super::state::{LmConfig, ModelState};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"FPLLAB01";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TensorMeta {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ContainerHeader {
    pub version: u32,
    /// "model" for full model states, "aux" for adapter/delta sidecars.
    pub kind: String,
    pub rng_algorithm: String,
    pub config: Option<LmConfig>,
    pub seed_lineage: Vec<(String, u64)>,
    /// Free-form scalar metadata (adapter rank, alpha, ...).
    #[serde(default)]
    pub extra: BTreeMap<String, String>,
    pub tensors: Vec<TensorMeta>,
}

#[derive(Debug)]
pub struct Container {
    pub header: ContainerHeader,
    pub tensors: BTreeMap<String, Matrix>,
}

pub fn write_container(
    path: &Path,
    kind: &str,
    config: Option<&LmConfig>,
    seed_lineage: &[(String, u64)],
    extra: &BTreeMap<String, String>,
    tensors: &BTreeMap<String, Matrix>,
) -> Result<()> {
    let mut metas = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for (name, m) in tensors {
        metas.push(TensorMeta { name: name.clone(), rows: m.rows(), cols: m.cols(), offset });
        offset += (m.numel() * 4) as u64;
    }
    let header = ContainerHeader {
        version: FORMAT_VERSION,
        kind: kind.to_string(),
        rng_algorithm: RNG_ALGORITHM.to_string(),
        config: config.cloned(),
        seed_lineage: seed_lineage.to_vec(),
        extra: extra.clone(),
        tensors: metas,
    };
    let header_bytes = serde_json::to_vec(&header)
        .map_err(|e| Error::CheckpointFormat(format!("header encode: {e}")))?;

    let mut buf =
        Vec::with_capacity(8 + 4 + header_bytes.len() + offset as usize);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&(header_bytes.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header_bytes);
    for m in tensors.values() {
        for &v in m.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_container(path: &Path) -> Result<Container> {
    let bytes = fs::read(path)?;
    if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::CheckpointFormat(
            "magic/version mismatch: not an FPLLAB01 checkpoint".into(),
        ));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bytes.len() < 12 + header_len {
        return Err(Error::CheckpointFormat("truncated header".into()));
    }
    let header: ContainerHeader = serde_json::from_slice(&bytes[12..12 + header_len])
        .map_err(|e| Error::CheckpointFormat(format!("header decode: {e}")))?;
    if header.version != FORMAT_VERSION {
        return Err(Error::CheckpointFormat(format!(
            "magic/version mismatch: version {} (expected {FORMAT_VERSION})",
            header.version
        )));
    }
    let payload = &bytes[12 + header_len..];
    let mut tensors = BTreeMap::new();
    let mut expected_end = 0usize;
    for meta in &header.tensors {
        let start = meta.offset as usize;
        let n = meta.rows * meta.cols;
        let end = start + n * 4;
        if end > payload.len() {
            return Err(Error::CheckpointFormat(format!(
                "truncated payload for tensor {}",
                meta.name
            )));
        }
        expected_end = expected_end.max(end);
        let mut data = Vec::with_capacity(n);
        for chunk in payload[start..end].chunks_exact(4) {
            let v = f32::from_le_bytes(chunk.try_into().unwrap());
            if !v.is_finite() {
                return Err(Error::CheckpointFormat(format!(
                    "non-finite value in tensor {}",
                    meta.name
                )));
            }
            data.push(v);
        }
        tensors.insert(
            meta.name.clone(),
            Matrix::from_vec_unchecked(meta.rows, meta.cols, data),
        );
    }
    if expected_end != payload.len() {
        return Err(Error::CheckpointFormat(format!(
            "payload length {} does not match directory ({expected_end})",
            payload.len()
        )));
    }
    Ok(Container { header, tensors })
}

impl ModelState {
    pub fn save(&self, path: &Path) -> Result<()> {
        write_container(
            path,
            "model",
            Some(self.config()),
            self.seed_lineage(),
            &BTreeMap::new(),
            self.params(),
        )
    }

    pub fn load(path: &Path) -> Result<ModelState> {
        let c = read_container(path)?;
        if c.header.kind != "model" {
            return Err(Error::CheckpointFormat(format!(
                "expected a model checkpoint, found kind {:?}",
                c.header.kind
            )));
        }
        let config = c
            .header
            .config
            .ok_or_else(|| Error::CheckpointFormat("model checkpoint missing config".into()))?;
        ModelState::from_parts(config, c.tensors, c.header.seed_lineage)
    }
}
