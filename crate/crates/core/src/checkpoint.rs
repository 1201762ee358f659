//! Model checkpoints: a TOML manifest plus a little-endian `f64` blob.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::digest::Digester;
use crate::error::{Error, Result};
use crate::model::{EncoderModel, ModelConfig};
use crate::tensor::Tensor;
use crate::train::GeneTargetTransform;

pub const MANIFEST_FILE: &str = "checkpoint.toml";
pub const BLOB_FILE: &str = "params.bin";
const FORMAT: &str = "radiogen-checkpoint/1";
const TARGET_MEAN: &str = "target.mean";
const TARGET_STD: &str = "target.std";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub epochs: usize,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub initial_train_loss: f64,
    pub initial_val_loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_train_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_val_loss: Option<f64>,
    pub seed: u64,
    pub lr: f64,
    pub batch_size: usize,
    pub data_digest: String,
}

#[derive(Debug, Clone)]
pub struct ModelCheckpoint {
    pub model: EncoderModel,
    pub transform: GeneTargetTransform,
    pub gene_ids: Vec<String>,
    pub meta: TrainingMeta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub digest: String,
    pub config: ModelConfig,
    pub training_meta: TrainingMeta,
    pub gene_ids: Vec<String>,
    pub parameters: Vec<BlobEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_config: Option<toml::Table>,
}

impl ModelCheckpoint {
    pub fn new(model: EncoderModel, transform: GeneTargetTransform, gene_ids: Vec<String>, meta: TrainingMeta) -> Self {
        ModelCheckpoint {
            model,
            transform,
            gene_ids,
            meta,
        }
    }

    fn tensors(&self) -> Vec<(String, Tensor)> {
        let g = self.transform.mean.len();
        let mut out: Vec<(String, Tensor)> = self
            .model
            .params()
            .iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect();
        out.push((TARGET_MEAN.into(), Tensor::new(&[g], self.transform.mean.clone()).expect("len")));
        out.push((TARGET_STD.into(), Tensor::new(&[g], self.transform.std.clone()).expect("len")));
        out
    }

    fn blob(&self) -> (Vec<u8>, Vec<BlobEntry>) {
        let mut bytes = Vec::new();
        let mut index = Vec::new();
        for (name, t) in self.tensors() {
            index.push(BlobEntry {
                name,
                shape: t.shape().to_vec(),
                offset: bytes.len(),
            });
            bytes.extend(t.data().iter().flat_map(|v| v.to_le_bytes()));
        }
        (bytes, index)
    }

    fn digest_of(config: &ModelConfig, gene_ids: &[String], blob: &[u8]) -> String {
        let mut d = Digester::new();
        d.str(FORMAT).str(&toml::to_string(config).expect("config serializes"));
        for g in gene_ids {
            d.str(g);
        }
        d.bytes(blob);
        d.hex()
    }

    /// Content digest over configuration, gene order, parameters and target transform.
    pub fn digest(&self) -> String {
        let (blob, _) = self.blob();
        Self::digest_of(self.model.config(), &self.gene_ids, &blob)
    }

    /// Write `checkpoint.toml` and `params.bin` into `dir`.
    pub fn save(&self, dir: &Path, run_config: Option<toml::Table>) -> Result<String> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let (blob, parameters) = self.blob();
        let digest = Self::digest_of(self.model.config(), &self.gene_ids, &blob);
        let manifest = CheckpointManifest {
            format: FORMAT.into(),
            digest: digest.clone(),
            config: self.model.config().clone(),
            training_meta: self.meta.clone(),
            gene_ids: self.gene_ids.clone(),
            parameters,
            run_config,
        };
        let bin = dir.join(BLOB_FILE);
        fs::write(&bin, &blob).map_err(|e| Error::io(&bin, e))?;
        let path = dir.join(MANIFEST_FILE);
        let text = toml::to_string(&manifest).map_err(|e| Error::parse(&path, e.to_string()))?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(digest)
    }

    pub fn load_manifest(dir: &Path) -> Result<CheckpointManifest> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: CheckpointManifest = toml::from_str(&text).map_err(|e| Error::parse(&path, e.to_string()))?;
        if m.format != FORMAT {
            return Err(Error::parse(&path, format!("unsupported checkpoint format `{}`", m.format)));
        }
        Ok(m)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = Self::load_manifest(dir)?;
        let bin = dir.join(BLOB_FILE);
        let blob = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
        let digest = Self::digest_of(&manifest.config, &manifest.gene_ids, &blob);
        if digest != manifest.digest {
            return Err(Error::parse(&bin, "parameter blob does not match the manifest digest"));
        }
        let mut model = EncoderModel::new(manifest.config.clone())?;
        let mut mean = None;
        let mut std = None;
        let mut seen = 0;
        for e in &manifest.parameters {
            let n: usize = e.shape.iter().product();
            let end = e.offset + 8 * n;
            if end > blob.len() {
                return Err(Error::parse(&bin, format!("entry `{}` runs past the blob", e.name)));
            }
            let data: Vec<f64> = blob[e.offset..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(&e.shape, data)?;
            match e.name.as_str() {
                TARGET_MEAN => mean = Some(t.into_data()),
                TARGET_STD => std = Some(t.into_data()),
                name => {
                    model.params_mut().set(name, t)?;
                    seen += 1;
                }
            }
        }
        if seen != model.params().len() {
            return Err(Error::parse(
                &bin,
                format!("checkpoint holds {seen} of {} model parameters", model.params().len()),
            ));
        }
        let (Some(mean), Some(std)) = (mean, std) else {
            return Err(Error::parse(&bin, "checkpoint lacks the target transform"));
        };
        Ok(ModelCheckpoint {
            model,
            transform: GeneTargetTransform { mean, std },
            gene_ids: manifest.gene_ids,
            meta: manifest.training_meta,
        })
    }
}
