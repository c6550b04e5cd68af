//! The model zoo: one weight blob per trained model plus `manifest.json`,
//! which records how each model was trained and the blob's SHA-256.

use std::io::Write;
use std::path::{Path, PathBuf};

use faultlab_core::train::TrainConfig;
use faultlab_core::{ModelSpec, TrainedModel};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::blob;
use crate::error::{CliError, Result};

pub const MANIFEST: &str = "manifest.json";
pub const FORMAT: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: u32,
    /// Directory the training data came from, as given on the command line.
    pub data_dir: Option<String>,
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
    pub models: Vec<ZooEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ZooEntry {
    pub model_id: String,
    pub spec: ModelSpec,
    pub replica: u64,
    pub train: TrainConfig,
    pub clean_test_error: f64,
    pub n_params: usize,
    pub blob: String,
    pub sha256: String,
}

impl Default for Manifest {
    fn default() -> Self {
        Self {
            format: FORMAT,
            data_dir: None,
            train_limit: None,
            test_limit: None,
            models: Vec::new(),
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Write via a temporary file in the same directory, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| CliError::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| CliError::io(tmp.path(), e))?;
    tmp.as_file().sync_all().map_err(|e| CliError::io(tmp.path(), e))?;
    tmp.persist(path).map_err(|e| CliError::io(path, e.error))?;
    Ok(())
}

/// A zoo directory on disk.
#[derive(Debug, Clone)]
pub struct Zoo {
    pub dir: PathBuf,
    pub manifest: Manifest,
}

impl Zoo {
    /// Open `dir`, or start an empty zoo if it has no manifest yet.
    pub fn open_or_create(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        if dir.join(MANIFEST).exists() {
            Self::open(dir)
        } else {
            Ok(Self {
                dir: dir.to_path_buf(),
                manifest: Manifest::default(),
            })
        }
    }

    pub fn open(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| CliError::Parse {
            path: path.clone(),
            line: e.line() as u64,
            message: e.to_string(),
        })?;
        if manifest.format != FORMAT {
            return Err(CliError::Corruption {
                what: path.display().to_string(),
                detail: format!("unsupported manifest format {}", manifest.format),
            });
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
        })
    }

    pub fn entry(&self, model_id: &str) -> Option<&ZooEntry> {
        self.manifest.models.iter().find(|e| e.model_id == model_id)
    }

    /// Blob bytes of `entry`, checked against the recorded digest.
    pub fn verified_blob(&self, entry: &ZooEntry) -> Result<Vec<u8>> {
        let path = self.dir.join(&entry.blob);
        let corrupt = |detail: String| CliError::Corruption {
            what: entry.model_id.clone(),
            detail,
        };
        let bytes = std::fs::read(&path).map_err(|e| corrupt(format!("cannot read {}: {e}", path.display())))?;
        let digest = sha256_hex(&bytes);
        if digest != entry.sha256 {
            return Err(corrupt(format!(
                "checksum mismatch for {}: manifest {}, file {digest}",
                path.display(),
                entry.sha256
            )));
        }
        Ok(bytes)
    }

    pub fn load_model(&self, entry: &ZooEntry) -> Result<TrainedModel> {
        let bytes = self.verified_blob(entry)?;
        blob::decode(&bytes, entry.spec, &entry.model_id)
    }

    /// Store a trained model's blob and add (or replace) its entry; the
    /// manifest itself is written by [`Zoo::save`].
    pub fn insert(
        &mut self,
        model_id: &str,
        replica: u64,
        model: &TrainedModel,
        train: TrainConfig,
        clean_test_error: f64,
    ) -> Result<()> {
        let bytes = blob::encode(model);
        let name = format!("{model_id}.bin");
        write_atomic(&self.dir.join(&name), &bytes)?;
        let entry = ZooEntry {
            model_id: model_id.to_string(),
            spec: *model.spec(),
            replica,
            train,
            clean_test_error,
            n_params: model.n_params(),
            blob: name,
            sha256: sha256_hex(&bytes),
        };
        self.manifest.models.retain(|e| e.model_id != model_id);
        self.manifest.models.push(entry);
        Ok(())
    }

    pub fn save(&mut self) -> Result<()> {
        self.manifest.models.sort_by(|a, b| a.model_id.cmp(&b.model_id));
        let mut text = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        text.push('\n');
        write_atomic(&self.dir.join(MANIFEST), text.as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use faultlab_core::nn::predict_clean;
    use faultlab_core::train::init_model;
    use faultlab_core::Tensor;

    #[test]
    fn digest_of_empty_input() {
        assert_eq!(
            sha256_hex(b""),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }

    #[test]
    fn stored_model_reloads_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let spec: ModelSpec = "CNN-1-3-2-3-max".parse().unwrap();
        let model = init_model(spec, 4);
        let mut zoo = Zoo::open_or_create(dir.path()).unwrap();
        zoo.insert("m-s0", 0, &model, TrainConfig::default(), 0.5).unwrap();
        zoo.save().unwrap();

        let zoo = Zoo::open(dir.path()).unwrap();
        let back = zoo.load_model(zoo.entry("m-s0").unwrap()).unwrap();
        let x = Tensor::new(vec![28, 28, 1], (0..784).map(|i| (i % 17) as f64 / 16.0).collect()).unwrap();
        let a = predict_clean(&model, &x).unwrap();
        let b = predict_clean(&back, &x).unwrap();
        assert_eq!(
            a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn flipped_byte_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let model = init_model(ModelSpec::mlp(1, 3).unwrap(), 1);
        let mut zoo = Zoo::open_or_create(dir.path()).unwrap();
        zoo.insert("m", 0, &model, TrainConfig::default(), 0.5).unwrap();
        let path = dir.path().join("m.bin");
        let mut bytes = std::fs::read(&path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 1;
        std::fs::write(&path, bytes).unwrap();
        let err = zoo.load_model(zoo.entry("m").unwrap()).unwrap_err();
        assert!(matches!(err, CliError::Corruption { .. }), "{err}");
    }

    #[test]
    fn manifest_serde_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut zoo = Zoo::open_or_create(dir.path()).unwrap();
        zoo.manifest.train_limit = Some(100);
        for (id, spec) in [("b", "MLP-1-4"), ("a", "CNN-1-5-2-2-none")] {
            let model = init_model(spec.parse().unwrap(), 2);
            zoo.insert(id, 7, &model, TrainConfig::default(), 0.125).unwrap();
        }
        zoo.save().unwrap();
        let first = std::fs::read(dir.path().join(MANIFEST)).unwrap();
        let mut again = Zoo::open(dir.path()).unwrap();
        assert_eq!(again.manifest, zoo.manifest);
        assert_eq!(again.manifest.models[0].model_id, "a");
        again.save().unwrap();
        assert_eq!(std::fs::read(dir.path().join(MANIFEST)).unwrap(), first);
    }
}
