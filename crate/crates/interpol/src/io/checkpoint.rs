//! Checkpoint directories: `manifest.json` plus `params.bin`.
//!
//! `params.bin` holds every parameter as a little-endian f32, concatenated in
//! the manifest's key order. Loading checks the key list and shapes against
//! the layout implied by the config, and the file size to the byte.

use std::fs;
use std::path::{Path, PathBuf};

use interpol_core::eval::hex;
use interpol_core::{ModelConfig, ModelKind, Transformer};
use serde::{Deserialize, Serialize};

use super::corpus::write_file;
use crate::error::FormatError;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";
pub const PARAMS: &str = "params.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub kind: ModelKind,
    /// `interpolation`, `left-to-right` or `coherence`.
    pub objective: String,
    pub config: ModelConfig,
    /// Vocabulary file, relative to the checkpoint directory.
    pub vocab: String,
    pub params: Vec<ParamEntry>,
    /// SHA-256 of the parameters, see [`Transformer::digest`].
    pub digest: String,
}

pub fn save_checkpoint(dir: &Path, net: &Transformer<f32>, objective: &str, vocab: &str) -> Result<Manifest, FormatError> {
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        kind: net.kind(),
        objective: objective.into(),
        config: net.config().clone(),
        vocab: vocab.into(),
        params: net.layout().iter().map(|p| ParamEntry { name: p.name.clone(), shape: p.shape.clone() }).collect(),
        digest: hex(&net.digest()),
    };
    let bytes: Vec<u8> = net.params().iter().flat_map(|p| p.to_le_bytes()).collect();
    write_file(&dir.join(PARAMS), &bytes)?;
    let mut json = serde_json::to_string_pretty(&manifest).map_err(FormatError::json(dir.join(MANIFEST)))?;
    json.push('\n');
    write_file(&dir.join(MANIFEST), json.as_bytes())?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest, FormatError> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(FormatError::io(&path))?;
    serde_json::from_str(&text).map_err(FormatError::json(&path))
}

pub fn load_checkpoint(dir: &Path) -> Result<(Manifest, Transformer<f32>), FormatError> {
    let bad = |message: String| FormatError::Checkpoint { path: dir.into(), message };
    let manifest = read_manifest(dir)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(bad(format!("unsupported format version {}", manifest.format_version)));
    }
    let template = Transformer::<f32>::zeros(manifest.kind, manifest.config.clone())?;
    let expected: Vec<ParamEntry> =
        template.layout().iter().map(|p| ParamEntry { name: p.name.clone(), shape: p.shape.clone() }).collect();
    if manifest.params != expected {
        let first = manifest.params.iter().zip(&expected).position(|(a, b)| a != b).unwrap_or(expected.len().min(manifest.params.len()));
        return Err(bad(format!("parameter list does not match the config (first difference at entry {first})")));
    }
    let path = dir.join(PARAMS);
    let bytes = fs::read(&path).map_err(FormatError::io(&path))?;
    let want = 4 * template.num_params();
    if bytes.len() != want {
        return Err(bad(format!("{PARAMS} has {} bytes, expected {want}", bytes.len())));
    }
    let params = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    let net = Transformer::from_params(manifest.kind, manifest.config.clone(), params)?;
    if hex(&net.digest()) != manifest.digest {
        return Err(bad("parameter digest does not match the manifest".into()));
    }
    Ok((manifest, net))
}

/// The vocabulary file a checkpoint refers to.
pub fn vocab_path(dir: &Path, manifest: &Manifest) -> PathBuf {
    dir.join(&manifest.vocab)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Transformer<f32> {
        let cfg = ModelConfig { layers: 1, heads: 2, width: 8, ff_width: 16, context: 12, vocab: 20 };
        Transformer::new(ModelKind::Ranker, cfg, &mut interpol_core::seeded_rng(3)).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let net = small();
        save_checkpoint(dir.path(), &net, "coherence", "../vocab.json").unwrap();
        let (m, back) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(m.kind, ModelKind::Ranker);
        assert_eq!(back.params(), net.params());
        assert_eq!(back.digest(), net.digest());
        assert_eq!(vocab_path(dir.path(), &m), dir.path().join("../vocab.json"));
    }

    #[test]
    fn truncated_or_mismatched_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let net = small();
        save_checkpoint(dir.path(), &net, "coherence", "v.json").unwrap();
        let p = dir.path().join(PARAMS);
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(FormatError::Checkpoint { .. })));
        fs::write(&p, &bytes).unwrap();
        let m = fs::read_to_string(dir.path().join(MANIFEST)).unwrap();
        fs::write(dir.path().join(MANIFEST), m.replacen("\"head.bias\"", "\"head.b\"", 1)).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(FormatError::Checkpoint { .. })));
    }
}
