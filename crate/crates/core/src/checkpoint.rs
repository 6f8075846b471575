//! Checkpoint directory: `manifest.json` plus `weights.bin`, a flat
//! little-endian `f32` blob.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::Ontology;
use crate::encoder::{Model, ModelConfig, Vocab};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    /// Byte offset into the blob.
    pub offset: usize,
    /// Number of `f32` values.
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub dtype: String,
    pub config: ModelConfig,
    pub vocab: Vec<String>,
    pub ontology: Ontology,
    pub tensors: Vec<TensorEntry>,
    /// Hex SHA-256 of the blob.
    pub blob_sha256: String,
}

impl Manifest {
    pub fn from_json_str(s: &str) -> Result<Self> {
        let m: Manifest = serde_json::from_str(s).map_err(|e| Error::json(MANIFEST_FILE, e))?;
        if m.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {} (expected {FORMAT_VERSION})",
                m.format_version
            )));
        }
        if m.dtype != "f32" {
            return Err(Error::Checkpoint(format!("unsupported dtype {}", m.dtype)));
        }
        Ok(m)
    }
}

/// Serializes a model into its manifest and weight blob.
pub fn encode_checkpoint(model: &Model<f32>) -> (Manifest, Vec<u8>) {
    let mut blob = Vec::with_capacity(model.params.num_scalars() * 4);
    let mut tensors = Vec::with_capacity(model.params.len());
    for (name, t) in model.params.names().iter().zip(model.params.tensors()) {
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: [t.rows(), t.cols()],
            offset: blob.len(),
            len: t.len(),
        });
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        dtype: "f32".into(),
        config: model.config.clone(),
        vocab: model.vocab.tokens().to_vec(),
        ontology: model.ontology.clone(),
        tensors,
        blob_sha256: hex::encode(Sha256::digest(&blob)),
    };
    (manifest, blob)
}

/// Rebuilds a model from a manifest and blob, checking the digest, every
/// offset and every shape.
pub fn decode_checkpoint(manifest: &Manifest, blob: &[u8]) -> Result<Model<f32>> {
    let digest = hex::encode(Sha256::digest(blob));
    if digest != manifest.blob_sha256 {
        return Err(Error::Checkpoint(format!(
            "weights digest {digest} does not match manifest {}",
            manifest.blob_sha256
        )));
    }
    let mut named = Vec::with_capacity(manifest.tensors.len());
    for e in &manifest.tensors {
        let expected = e.shape[0].checked_mul(e.shape[1]);
        let end = e.len.checked_mul(4).and_then(|n| n.checked_add(e.offset));
        let (Some(n), Some(end)) = (expected, end) else {
            return Err(Error::Checkpoint(format!("tensor {} has an impossible size", e.name)));
        };
        if n != e.len || end > blob.len() {
            return Err(Error::Checkpoint(format!(
                "tensor {} ({}x{}, {} values at byte {}) does not fit a {}-byte blob",
                e.name,
                e.shape[0],
                e.shape[1],
                e.len,
                e.offset,
                blob.len()
            )));
        }
        let data = blob[e.offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        named.push((e.name.clone(), Tensor::from_vec(e.shape[0], e.shape[1], data)));
    }
    let vocab = Vocab::from_tokens(manifest.vocab.clone())?;
    for d in manifest.ontology.domains() {
        if vocab.domain_id(Some(d)) == crate::encoder::vocab::UNK_ID {
            return Err(Error::Checkpoint(format!("vocabulary lacks the token of domain {d}")));
        }
    }
    Model::from_tensors(manifest.config.clone(), vocab, manifest.ontology.clone(), named)
}

pub fn save_checkpoint(model: &Model<f32>, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (manifest, blob) = encode_checkpoint(model);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    let mpath = dir.join(MANIFEST_FILE);
    std::fs::write(&mpath, json).map_err(|e| Error::io(&mpath, e))?;
    let wpath = dir.join(WEIGHTS_FILE);
    std::fs::write(&wpath, blob).map_err(|e| Error::io(&wpath, e))
}

pub fn load_checkpoint(dir: &Path) -> Result<Model<f32>> {
    let mpath = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest = Manifest::from_json_str(&text)?;
    let wpath = dir.join(WEIGHTS_FILE);
    let blob = std::fs::read(&wpath).map_err(|e| Error::io(&wpath, e))?;
    decode_checkpoint(&manifest, &blob)
}

/// SHA-256 of the weight blob, as recorded in the manifest.
pub fn checkpoint_digest(model: &Model<f32>) -> String {
    encode_checkpoint(model).0.blob_sha256
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;

    fn model() -> Model<f32> {
        let o = Ontology::new(
            ["hotel", "train"].map(String::from),
            ["hotel.area", "train.day"].map(String::from),
            BTreeMap::from([("hotel".to_string(), vec!["hotel.parking".to_string()])]),
        )
        .unwrap();
        Model::new(ModelConfig::tiny(8), Vocab::build(&o, []), o, 17).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = model();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&m, dir.path()).unwrap();
        let back = load_checkpoint(dir.path()).unwrap();
        assert_eq!(back.params.names(), m.params.names());
        for (a, b) in back.params.tensors().iter().zip(m.params.tensors()) {
            let a: Vec<u32> = a.data().iter().map(|x| x.to_bits()).collect();
            let b: Vec<u32> = b.data().iter().map(|x| x.to_bits()).collect();
            assert_eq!(a, b);
        }
        assert_eq!(back, m);
    }

    #[test]
    fn tampering_is_detected() {
        let m = model();
        let (manifest, mut blob) = encode_checkpoint(&m);
        blob[0] ^= 1;
        assert!(decode_checkpoint(&manifest, &blob).is_err());

        let (mut manifest, blob) = encode_checkpoint(&m);
        manifest.tensors[0].len += 1;
        assert!(decode_checkpoint(&manifest, &blob).is_err());

        let (mut manifest, blob) = encode_checkpoint(&m);
        manifest.tensors.pop();
        assert!(decode_checkpoint(&manifest, &blob).is_err());

        let (mut manifest, blob) = encode_checkpoint(&m);
        manifest.format_version = 9;
        let json = serde_json::to_string(&manifest).unwrap();
        assert!(Manifest::from_json_str(&json).is_err());
        let _ = blob;
    }
}
