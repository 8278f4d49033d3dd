//! JSONL sample files, the optional binary feature sidecar, and dataset directories.
//!
//! A dataset directory holds `schema.json`, an optional `vocab.json`, and
//! `train.jsonl` / `dev.jsonl` / `test.jsonl`. When `<split>.features.json`
//! sits next to a split file, image and object features missing from the
//! JSONL lines are read from the sidecar it describes.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{
    validate_sample_with, Dataset, ObjectFeature, RelationSchema, Sample, Span, Split,
    ValidationLimits, Vocabulary,
};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TokenList {
    Ids(Vec<u32>),
    Words(Vec<String>),
}

/// One JSONL line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub tokens: TokenList,
    pub head_span: [i64; 2],
    pub tail_span: [i64; 2],
    pub head_type: String,
    pub tail_type: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_feature: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object_features: Option<Vec<ObjectFeature>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relation: Option<String>,
}

impl SampleRecord {
    pub fn from_sample(s: &Sample, schema: &RelationSchema, vocab: &Vocabulary) -> Self {
        let image_rows: Vec<Vec<f64>> = (0..s.image_feature.rows()).map(|r| s.image_feature.row(r).to_vec()).collect();
        Self {
            id: s.id.clone(),
            tokens: TokenList::Words(vocab.decode(&s.tokens)),
            head_span: [s.head_span.start as i64, s.head_span.end as i64],
            tail_span: [s.tail_span.start as i64, s.tail_span.end as i64],
            head_type: schema.type_name(s.head_type).to_string(),
            tail_type: schema.type_name(s.tail_type).to_string(),
            image_feature: Some(image_rows),
            object_features: Some(s.objects.clone()),
            relation: s.relation.map(|r| schema.relation_name(r).to_string()),
        }
    }

    fn into_sample(
        self,
        line: usize,
        schema: &RelationSchema,
        vocab: &Vocabulary,
        sidecar: Option<&FeatureSidecar>,
    ) -> Result<Sample> {
        let violation = |field: &str, message: String| Error::SchemaViolation { line, field: field.into(), message };
        let span = |field: &str, v: [i64; 2]| -> Result<Span> {
            if v[0] < 0 || v[1] < 0 {
                return Err(violation(field, format!("negative index in [{}, {}]", v[0], v[1])));
            }
            Ok(Span::new(v[0] as usize, v[1] as usize))
        };
        let head_span = span("head_span", self.head_span)?;
        let tail_span = span("tail_span", self.tail_span)?;
        let type_id = |name: &str| {
            schema.type_id(name).ok_or_else(|| Error::UnknownName { line, kind: "entity type", name: name.into() })
        };
        let head_type = type_id(&self.head_type)?;
        let tail_type = type_id(&self.tail_type)?;
        let relation = match &self.relation {
            Some(name) => Some(
                schema
                    .relation_id(name)
                    .ok_or_else(|| Error::UnknownName { line, kind: "relation", name: name.clone() })?,
            ),
            None => None,
        };
        let tokens = match self.tokens {
            TokenList::Ids(ids) => ids,
            TokenList::Words(words) => vocab.encode(&words),
        };
        let image_feature = match self.image_feature {
            Some(rows) => {
                let width = rows.first().map_or(0, Vec::len);
                if rows.iter().any(|r| r.len() != width) {
                    return Err(violation("image_feature", "ragged image feature rows".into()));
                }
                Matrix::from_rows(&rows)
            }
            None => sidecar
                .and_then(|sc| sc.image(&self.id))
                .ok_or_else(|| violation("image_feature", "missing and not found in sidecar".into()))?,
        };
        let objects = match self.object_features {
            Some(o) => o,
            None => sidecar
                .and_then(|sc| sc.objects(&self.id))
                .ok_or_else(|| violation("object_features", "missing and not found in sidecar".into()))?,
        };
        Ok(Sample { id: self.id, tokens, head_span, tail_span, head_type, tail_type, image_feature, objects, relation })
    }
}

/// Loads and validates a JSONL split with default limits, picking up a
/// `<stem>.features.json` sidecar when one exists.
pub fn load_dataset(path: impl AsRef<Path>, schema: Arc<RelationSchema>, vocab: &Vocabulary) -> Result<Dataset> {
    let path = path.as_ref();
    let manifest = sidecar_path(path);
    let sidecar = if manifest.exists() { Some(FeatureSidecar::load(&manifest)?) } else { None };
    load_dataset_with_sidecar(path, schema, vocab, sidecar.as_ref(), ValidationLimits::default())
}

pub fn load_dataset_with_sidecar(
    path: impl AsRef<Path>,
    schema: Arc<RelationSchema>,
    vocab: &Vocabulary,
    sidecar: Option<&FeatureSidecar>,
    limits: ValidationLimits,
) -> Result<Dataset> {
    let path = path.as_ref();
    let split = split_from_path(path);
    let mut samples = Vec::new();
    for (line, record) in read_records(path)? {
        let sample = record.into_sample(line, &schema, vocab, sidecar)?;
        // Type-incompatible gold labels are rejected as well: the masked classifier can never emit them.
        if let Some(v) = validate_sample_with(&sample, &schema, limits).into_iter().next() {
            return Err(Error::SchemaViolation { line, field: v.field.into(), message: v.message });
        }
        samples.push(sample);
    }
    let dataset = Dataset::new(samples, schema, split);
    for (rel, n) in dataset.relation_counts() {
        log::info!("{}: {rel}: {n}", path.display());
    }
    Ok(dataset)
}

fn read_records(path: &Path) -> Result<Vec<(usize, SampleRecord)>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: SampleRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Json { path: path.to_path_buf(), line: line_no, source: e })?;
        out.push((line_no, record));
    }
    Ok(out)
}

fn split_from_path(path: &Path) -> Split {
    path.file_stem()
        .and_then(|s| s.to_str())
        .and_then(|s| s.split('.').next())
        .and_then(|s| s.parse().ok())
        .unwrap_or(Split::Train)
}

fn sidecar_path(jsonl: &Path) -> PathBuf {
    let stem = jsonl.file_stem().and_then(|s| s.to_str()).unwrap_or("data");
    jsonl.with_file_name(format!("{stem}.features.json"))
}

pub fn write_dataset(path: impl AsRef<Path>, dataset: &Dataset, vocab: &Vocabulary) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for s in &dataset.samples {
        let record = SampleRecord::from_sample(s, &dataset.schema, vocab);
        serde_json::to_writer(&mut w, &record).expect("record serializes");
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Location of one row-major block inside the sidecar data file, in elements.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockRef {
    pub offset: usize,
    pub shape: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SidecarEntry {
    #[serde(default)]
    pub image: Option<BlockRef>,
    #[serde(default)]
    pub objects: Option<BlockRef>,
    #[serde(default)]
    pub roi_scores: Option<Vec<f64>>,
}

/// JSON manifest naming the shapes stored in a little-endian `f32` data file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SidecarManifest {
    pub data_file: String,
    pub entries: BTreeMap<String, SidecarEntry>,
}

#[derive(Debug, Clone)]
pub struct FeatureSidecar {
    pub manifest: SidecarManifest,
    data: Vec<f32>,
}

impl FeatureSidecar {
    pub fn load(manifest_path: impl AsRef<Path>) -> Result<Self> {
        let manifest_path = manifest_path.as_ref();
        let text = std::fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
        let manifest: SidecarManifest = serde_json::from_str(&text)
            .map_err(|e| Error::Json { path: manifest_path.into(), line: 1, source: e })?;
        let data_path = manifest_path.with_file_name(&manifest.data_file);
        let bytes = std::fs::read(&data_path).map_err(|e| Error::io(&data_path, e))?;
        if bytes.len() % 4 != 0 {
            return Err(Error::InvalidInput(format!("{}: length not a multiple of 4", data_path.display())));
        }
        let data: Vec<f32> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        let sidecar = Self { manifest, data };
        for (id, e) in &sidecar.manifest.entries {
            for block in [&e.image, &e.objects].into_iter().flatten() {
                if block.offset + block.shape[0] * block.shape[1] > sidecar.data.len() {
                    return Err(Error::InvalidInput(format!("sidecar block for `{id}` runs past the data file")));
                }
            }
        }
        Ok(sidecar)
    }

    fn block(&self, b: &BlockRef) -> Matrix {
        let n = b.shape[0] * b.shape[1];
        let data = self.data[b.offset..b.offset + n].iter().map(|&v| v as f64).collect();
        Matrix::from_vec(b.shape[0], b.shape[1], data)
    }

    pub fn image(&self, id: &str) -> Option<Matrix> {
        self.manifest.entries.get(id)?.image.as_ref().map(|b| self.block(b))
    }

    pub fn objects(&self, id: &str) -> Option<Vec<ObjectFeature>> {
        let entry = self.manifest.entries.get(id)?;
        let m = self.block(entry.objects.as_ref()?);
        let scores = entry.roi_scores.clone().unwrap_or_else(|| vec![0.0; m.rows()]);
        if scores.len() != m.rows() {
            return None;
        }
        Some((0..m.rows()).map(|r| ObjectFeature { vec: m.row(r).to_vec(), roi_score: scores[r] }).collect())
    }
}

/// Writes the image and object features of `samples` as a sidecar pair.
pub fn write_sidecar(manifest_path: impl AsRef<Path>, data_file: &str, samples: &[Sample]) -> Result<()> {
    let manifest_path = manifest_path.as_ref();
    let mut data: Vec<f32> = Vec::new();
    let mut entries = BTreeMap::new();
    for s in samples {
        let image = BlockRef { offset: data.len(), shape: [s.image_feature.rows(), s.image_feature.cols()] };
        data.extend(s.image_feature.data().iter().map(|&v| v as f32));
        let objects = s.object_matrix();
        let obj = BlockRef { offset: data.len(), shape: [objects.rows(), objects.cols()] };
        data.extend(objects.data().iter().map(|&v| v as f32));
        entries.insert(
            s.id.clone(),
            SidecarEntry {
                image: Some(image),
                objects: Some(obj),
                roi_scores: Some(s.objects.iter().map(|o| o.roi_score).collect()),
            },
        );
    }
    let manifest = SidecarManifest { data_file: data_file.to_string(), entries };
    let data_path = manifest_path.with_file_name(data_file);
    let bytes: Vec<u8> = data.iter().flat_map(|v| v.to_le_bytes()).collect();
    std::fs::write(&data_path, bytes).map_err(|e| Error::io(&data_path, e))?;
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(manifest_path, text).map_err(|e| Error::io(manifest_path, e))
}

/// Schema, vocabulary and the three splits of one dataset directory.
#[derive(Debug, Clone)]
pub struct DatasetBundle {
    pub schema: Arc<RelationSchema>,
    pub vocab: Vocabulary,
    pub train: Dataset,
    pub dev: Dataset,
    pub test: Dataset,
}

impl DatasetBundle {
    pub fn split(&self, split: Split) -> &Dataset {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }

    pub fn split_mut(&mut self, split: Split) -> &mut Dataset {
        match split {
            Split::Train => &mut self.train,
            Split::Dev => &mut self.dev,
            Split::Test => &mut self.test,
        }
    }

    /// Loads a dataset directory. Without `vocab.json` the vocabulary is built
    /// from the words of `train.jsonl`. Missing dev/test files give empty splits.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let schema = Arc::new(RelationSchema::load(dir.join("schema.json"))?);
        let vocab_path = dir.join("vocab.json");
        let vocab = if vocab_path.exists() {
            Vocabulary::load(&vocab_path)?
        } else {
            let records = read_records(&dir.join("train.jsonl"))?;
            let words = records.iter().flat_map(|(_, r)| match &r.tokens {
                TokenList::Words(w) => w.clone(),
                TokenList::Ids(_) => Vec::new(),
            });
            Vocabulary::from_tokens(words)
        };
        let load = |split: Split| -> Result<Dataset> {
            let path = dir.join(format!("{split}.jsonl"));
            if path.exists() {
                load_dataset(&path, schema.clone(), &vocab)
            } else {
                Ok(Dataset::new(Vec::new(), schema.clone(), split))
            }
        };
        let train = load(Split::Train)?;
        let dev = load(Split::Dev)?;
        let test = load(Split::Test)?;
        Ok(Self { schema, vocab, train, dev, test })
    }

    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.schema.save(dir.join("schema.json"))?;
        self.vocab.save(dir.join("vocab.json"))?;
        for split in Split::ALL {
            write_dataset(dir.join(format!("{split}.jsonl")), self.split(split), &self.vocab)?;
        }
        Ok(())
    }
}
