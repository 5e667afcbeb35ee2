use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featurizers::{FeaturizerSpec, Network, TapPoint};
use crate::metrics::CellKey;

pub const CHECKPOINT_FORMAT: &str = "oodprobe-ckpt-v1";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub algorithm: String,
    pub dataset: String,
    pub test_env: usize,
    pub seed: u64,
    pub step: usize,
}

impl CheckpointMeta {
    pub fn cell(&self) -> CellKey {
        CellKey { algorithm: self.algorithm.clone(), dataset: self.dataset.clone(), test_env: self.test_env, seed: self.seed }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum TensorKind {
    Param,
    Buffer,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    kind: TensorKind,
    shape: Vec<usize>,
    /// Byte offset into the blob.
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    spec: FeaturizerSpec,
    num_classes: usize,
    meta: CheckpointMeta,
    taps: Vec<TapPoint>,
    tensors: Vec<TensorEntry>,
}

/// A frozen network plus its training provenance.
///
/// File layout: u64 LE manifest length, JSON manifest, then every tensor as
/// little-endian f32 at the manifest's byte offsets.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub network: Network,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn new(network: Network, meta: CheckpointMeta) -> Self {
        Checkpoint { network, meta }
    }

    pub fn featurizer_checksum(&self) -> String {
        self.network.featurizer_checksum()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = Vec::new();
        let mut blob: Vec<u8> = Vec::new();
        let mut push = |name: &str, kind, shape: &[usize], data: &[f32]| {
            tensors.push(TensorEntry { name: name.to_string(), kind, shape: shape.to_vec(), offset: blob.len() });
            data.iter().for_each(|v| blob.extend_from_slice(&v.to_le_bytes()));
        };
        self.network
            .visit_params(&mut |p| push(p.name(), TensorKind::Param, p.shape(), p.data()));
        self.network
            .visit_buffers(&mut |n, t| push(n, TensorKind::Buffer, t.shape(), t.data()));
        let manifest = Manifest {
            format: CHECKPOINT_FORMAT.to_string(),
            spec: self.network.spec().clone(),
            num_classes: self.network.num_classes(),
            meta: self.meta.clone(),
            taps: self.network.taps().to_vec(),
            tensors,
        };
        let json = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(8 + json.len() + blob.len());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&blob);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(m);
        let len = bytes
            .get(..8)
            .map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")) as usize)
            .ok_or_else(|| bad("file shorter than its length prefix".into()))?;
        let json = bytes
            .get(8..8 + len)
            .ok_or_else(|| bad(format!("manifest of {len} bytes is truncated")))?;
        let manifest: Manifest =
            serde_json::from_slice(json).map_err(|e| bad(format!("unreadable manifest: {e}")))?;
        if manifest.format != CHECKPOINT_FORMAT {
            return Err(bad(format!("format tag `{}`, expected `{CHECKPOINT_FORMAT}`", manifest.format)));
        }
        let blob = &bytes[8 + len..];

        let mut network = Network::build(&manifest.spec, manifest.num_classes, 0)
            .map_err(|e| bad(format!("manifest architecture is invalid: {e}")))?;
        if network.taps() != manifest.taps.as_slice() {
            return Err(bad("stored tap points do not match the architecture".into()));
        }

        let mut entries: BTreeMap<&str, &TensorEntry> = BTreeMap::new();
        for t in &manifest.tensors {
            if entries.insert(&t.name, t).is_some() {
                return Err(bad(format!("tensor `{}` listed twice", t.name)));
            }
        }
        let mut problem: Option<String> = None;
        let mut take = |name: &str, kind: TensorKind, shape: &[usize], dst: &mut [f32]| {
            let Some(e) = entries.remove(name) else {
                problem.get_or_insert(format!("tensor `{name}` missing from manifest"));
                return;
            };
            if e.kind != kind || e.shape != shape {
                problem.get_or_insert(format!("tensor `{name}` has {:?} {:?}, architecture needs {kind:?} {shape:?}", e.kind, e.shape));
                return;
            }
            let Some(raw) = blob.get(e.offset..e.offset + 4 * dst.len()) else {
                problem.get_or_insert(format!("tensor `{name}` runs past the end of the blob"));
                return;
            };
            for (d, c) in dst.iter_mut().zip(raw.chunks_exact(4)) {
                *d = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
            }
        };
        for p in network.params_mut() {
            let name = p.name().to_string();
            let shape = p.shape().to_vec();
            take(&name, TensorKind::Param, &shape, p.value.data_mut());
        }
        network.visit_buffers_mut(&mut |n, t| {
            let shape = t.shape().to_vec();
            take(n, TensorKind::Buffer, &shape, t.data_mut());
        });
        if let Some(p) = problem {
            return Err(bad(p));
        }
        if let Some(extra) = entries.keys().next() {
            return Err(bad(format!("manifest lists unknown tensor `{extra}`")));
        }
        Ok(Checkpoint { network, meta: manifest.meta })
    }

    /// Writes via a temporary sibling and rename so a crash never leaves a
    /// half-written checkpoint at `path`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()?).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
