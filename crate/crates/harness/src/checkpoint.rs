//! Checkpoint persistence: a zip archive of named little-endian f32 arrays
//! plus a TOML manifest carrying the model kind, the experiment hash, and
//! an optional channel-setting tag. Arrays are stored uncompressed, so the
//! save/load roundtrip is bit-exact by construction.

use crate::error::{HarnessError, Result};
use commin_core::TensorF32;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

pub const KIND_JSCC: &str = "jscc";
pub const KIND_INN: &str = "inn";
pub const KIND_DENOISER: &str = "denoiser";
pub const KIND_EXTRACTOR: &str = "extractor";
pub const KIND_PAIRS: &str = "pairs";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    /// What the arrays parameterize (one of the KIND_ constants).
    pub kind: String,
    /// Experiment-identity hash of the config that produced this artifact.
    pub config_hash: String,
    /// Seconds since the epoch at save time.
    pub created_unix: u64,
    /// Channel SNR the artifact is tied to, for per-setting models.
    pub setting_snr_db: Option<f64>,
    /// Every array in the archive, in stored order.
    pub arrays: Vec<ArrayMeta>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrayMeta {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub arrays: Vec<(String, TensorF32)>,
}

impl Checkpoint {
    /// Arrays keyed by name, for feeding into a model loader.
    pub fn into_map(self) -> std::collections::HashMap<String, TensorF32> {
        self.arrays.into_iter().collect()
    }
}

/// Writes the archive atomically (temp file, then rename).
pub fn save_checkpoint(
    path: &Path,
    kind: &str,
    config_hash: &str,
    setting_snr_db: Option<f64>,
    arrays: &[(String, TensorF32)],
) -> Result<()> {
    let manifest = Manifest {
        kind: kind.to_string(),
        config_hash: config_hash.to_string(),
        created_unix: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
        setting_snr_db,
        arrays: arrays
            .iter()
            .map(|(n, a)| ArrayMeta { name: n.clone(), shape: a.shape().to_vec() })
            .collect(),
    };
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let tmp = path.with_extension("ckpt.tmp");
    {
        let file = std::fs::File::create(&tmp)?;
        let mut zip = zip::ZipWriter::new(file);
        let opts = zip::write::SimpleFileOptions::default()
            .compression_method(zip::CompressionMethod::Stored);
        let manifest_text =
            toml::to_string(&manifest).map_err(|e| HarnessError::Checkpoint(e.to_string()))?;
        zip.start_file("manifest.toml", opts)
            .map_err(|e| HarnessError::Checkpoint(e.to_string()))?;
        zip.write_all(manifest_text.as_bytes())?;
        for (name, array) in arrays {
            zip.start_file(format!("arrays/{name}.f32le"), opts)
                .map_err(|e| HarnessError::Checkpoint(e.to_string()))?;
            let mut bytes = Vec::with_capacity(array.len() * 4);
            for v in array.iter() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            zip.write_all(&bytes)?;
        }
        zip.finish().map_err(|e| HarnessError::Checkpoint(e.to_string()))?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Loads and validates an archive. A wrong `kind` is an error; a config
/// hash differing from `expected_hash` only warns, since weights from an
/// older experiment revision may still be wanted deliberately.
pub fn load_checkpoint(path: &Path, expected_kind: &str, expected_hash: &str) -> Result<Checkpoint> {
    if !path.is_file() {
        return Err(HarnessError::MissingArtifact(format!(
            "checkpoint {} (train it first)",
            path.display()
        )));
    }
    let file = std::fs::File::open(path)?;
    let mut zip = zip::ZipArchive::new(file).map_err(|e| {
        HarnessError::Checkpoint(format!("{}: not a readable archive: {e}", path.display()))
    })?;
    let manifest: Manifest = {
        let mut entry = zip.by_name("manifest.toml").map_err(|e| {
            HarnessError::Checkpoint(format!("{}: missing manifest: {e}", path.display()))
        })?;
        let mut text = String::new();
        entry.read_to_string(&mut text).map_err(|e| {
            HarnessError::Checkpoint(format!("{}: unreadable manifest: {e}", path.display()))
        })?;
        toml::from_str(&text).map_err(|e| {
            HarnessError::Checkpoint(format!("{}: bad manifest: {e}", path.display()))
        })?
    };
    if manifest.kind != expected_kind {
        return Err(HarnessError::Checkpoint(format!(
            "{}: holds {} weights, expected {expected_kind}",
            path.display(),
            manifest.kind
        )));
    }
    if manifest.config_hash != expected_hash {
        eprintln!(
            "warning: {} was produced under config {} but the current config is {}",
            path.display(),
            &manifest.config_hash[..manifest.config_hash.len().min(12)],
            &expected_hash[..expected_hash.len().min(12)]
        );
    }
    let mut arrays = Vec::with_capacity(manifest.arrays.len());
    for meta in &manifest.arrays {
        let mut entry = zip.by_name(&format!("arrays/{}.f32le", meta.name)).map_err(|e| {
            HarnessError::Checkpoint(format!(
                "{}: array {} listed in manifest but absent: {e}",
                path.display(),
                meta.name
            ))
        })?;
        let expected_len = meta.shape.iter().product::<usize>() * 4;
        let mut bytes = Vec::with_capacity(expected_len);
        entry.read_to_end(&mut bytes)?;
        if bytes.len() != expected_len {
            return Err(HarnessError::Checkpoint(format!(
                "{}: array {} is {} bytes, expected {expected_len}",
                path.display(),
                meta.name,
                bytes.len()
            )));
        }
        let values: Vec<f32> =
            bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        let array = TensorF32::from_shape_vec(meta.shape.clone(), values)
            .map_err(|e| HarnessError::Checkpoint(format!("{}: {e}", path.display())))?;
        arrays.push((meta.name.clone(), array));
    }
    Ok(Checkpoint { manifest, arrays })
}
