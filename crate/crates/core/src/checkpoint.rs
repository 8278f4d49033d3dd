//! Single-file JSON checkpoints holding the configuration, schema, vocabulary
//! and every parameter, frozen ones included.

use std::hash::{DefaultHasher, Hash, Hasher};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::data::{RelationSchema, SchemaFile, Vocabulary};
use crate::error::{Error, Result};
use crate::model::{InputDims, Model, ModelConfig};
use crate::params::ParamGroup;
use crate::tensor::Matrix;

pub const FORMAT_TAG: &str = "mmre-checkpoint/1";
pub const CHECKPOINT_FILE: &str = "model.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StoredParam {
    name: String,
    group: ParamGroup,
    trainable: bool,
    value: Matrix,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    config: ModelConfig,
    dims: InputDims,
    init_seed: u64,
    schema: SchemaFile,
    vocab: Option<Vocabulary>,
    params: Vec<StoredParam>,
}

/// `path` itself when it names a file, otherwise `path/model.json`.
pub fn checkpoint_path(path: &Path) -> PathBuf {
    if path.extension().is_some_and(|e| e == "json") {
        path.to_path_buf()
    } else {
        path.join(CHECKPOINT_FILE)
    }
}

/// Writes `model` (and optionally its vocabulary) to `path`.
pub fn save(model: &Model, init_seed: u64, vocab: Option<&Vocabulary>, path: &Path) -> Result<PathBuf> {
    let file = checkpoint_path(path);
    if let Some(dir) = file.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let ckpt = CheckpointFile {
        format: FORMAT_TAG.to_string(),
        config: model.config.clone(),
        dims: model.dims,
        init_seed,
        schema: model.schema.to_file(),
        vocab: vocab.cloned(),
        params: model
            .store
            .params()
            .iter()
            .map(|p| StoredParam { name: p.name.clone(), group: p.group, trainable: p.trainable, value: p.value.clone() })
            .collect(),
    };
    let json = serde_json::to_string(&ckpt).map_err(|e| Error::Checkpoint(e.to_string()))?;
    std::fs::write(&file, json).map_err(|e| Error::io(&file, e))?;
    Ok(file)
}

/// A restored model with the vocabulary it was trained with, if stored.
pub struct Loaded {
    pub model: Model,
    pub vocab: Option<Vocabulary>,
    pub init_seed: u64,
}

pub fn load(path: &Path) -> Result<Loaded> {
    let file = checkpoint_path(path);
    let text = std::fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
    let ckpt: CheckpointFile = serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", file.display())))?;
    if ckpt.format != FORMAT_TAG {
        return Err(Error::Checkpoint(format!("unsupported format {:?}, expected {FORMAT_TAG:?}", ckpt.format)));
    }
    let schema = Arc::new(RelationSchema::from_file(ckpt.schema)?);
    let mut model = Model::new(&ckpt.config, schema, ckpt.dims, ckpt.init_seed)?;
    if model.store.len() != ckpt.params.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} tensors, model has {}",
            ckpt.params.len(),
            model.store.len()
        )));
    }
    for stored in ckpt.params {
        let id = model
            .store
            .find(&stored.name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown tensor {}", stored.name)))?;
        let slot = model.store.value_mut(id);
        if slot.shape() != stored.value.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor {} has shape {:?}, expected {:?}",
                stored.name,
                stored.value.shape(),
                slot.shape()
            )));
        }
        *slot = stored.value;
    }
    Ok(Loaded { model, vocab: ckpt.vocab, init_seed: ckpt.init_seed })
}

/// Short stable identifier of a configuration.
pub fn fingerprint<T: Serialize>(config: &T) -> String {
    let json = serde_json::to_string(config).expect("configs serialize");
    let mut h = DefaultHasher::new();
    json.hash(&mut h);
    format!("{:016x}", h.finish())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};
    use crate::encoder::BackboneConfig;

    #[test]
    fn round_trip_preserves_predictions() {
        let data = generate_synthetic(&SyntheticSpec { n_samples: 6, ..Default::default() }).unwrap();
        let mut cfg = ModelConfig::default();
        cfg.encoder.backbone = BackboneConfig { n_layers: 1, n_heads: 1, model_dim: 4, ffn_dim: 4, max_positions: 80, dropout: 0.0 };
        cfg.encoder.prefix_len = 3;
        let s = &data.dataset.samples[0];
        let mut model = Model::new(&cfg, data.dataset.schema.clone(), InputDims::from_sample(s, data.vocab.len()), 4).unwrap();
        let head = model.decoder.relation_head.w;
        model.store.value_mut(head).data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = 0.1 * i as f64 - 0.3);
        let dir = tempfile::tempdir().unwrap();
        save(&model, 4, Some(&data.vocab), dir.path()).unwrap();
        let loaded = load(dir.path()).unwrap();
        assert_eq!(loaded.vocab.unwrap(), data.vocab);
        for s in &data.dataset.samples {
            assert_eq!(model.predict(s).unwrap(), loaded.model.predict(s).unwrap());
        }
    }

    #[test]
    fn wrong_format_tag_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        std::fs::write(&path, r#"{"format":"other","config":{},"dims":{"vocab_size":1,"raw_image_dim":1,"raw_object_dim":1},"init_seed":0,"schema":{"relations":["None"],"entity_types":["a"]},"vocab":null,"params":[]}"#).unwrap();
        assert!(matches!(load(&path), Err(Error::Checkpoint(_))));
    }
}
