//! Task instances, datasets and their validation.

mod batch;
mod io;
mod schema;
mod synthetic;
mod vocab;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use batch::{batch_iterator, Batch, BatchIter, DEFAULT_BATCH_SIZE};
pub use io::{
    load_dataset, load_dataset_with_sidecar, write_dataset, write_sidecar, DatasetBundle, FeatureSidecar,
    SampleRecord, SidecarEntry, SidecarManifest,
};
pub use schema::{build_compat_mask, parse_relation_types, CompatEntry, CompatMask, RelationSchema, SchemaFile, NONE_RELATION};
pub use synthetic::{generate_synthetic, SplitSizes, SyntheticData, SyntheticSpec};
pub use vocab::{Vocabulary, PAD_ID, PAD_TOKEN, UNK_ID, UNK_TOKEN};

use crate::tensor::Matrix;

/// Inclusive token range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "[usize; 2]", into = "[usize; 2]")]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end + 1 - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end < self.start
    }

    pub fn overlaps(&self, other: &Span) -> bool {
        self.start <= other.end && other.start <= self.end
    }

    pub fn contains(&self, i: usize) -> bool {
        self.start <= i && i <= self.end
    }
}

impl From<[usize; 2]> for Span {
    fn from(v: [usize; 2]) -> Self {
        Span::new(v[0], v[1])
    }
}

impl From<Span> for [usize; 2] {
    fn from(s: Span) -> Self {
        [s.start, s.end]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectFeature {
    pub vec: Vec<f64>,
    pub roi_score: f64,
}

/// One relation instance: text, entity pair, image and its detected objects.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub tokens: Vec<u32>,
    pub head_span: Span,
    pub tail_span: Span,
    pub head_type: usize,
    pub tail_type: usize,
    /// `M x raw_image_dim` block features.
    pub image_feature: Matrix,
    /// Sorted by descending ROI score.
    pub objects: Vec<ObjectFeature>,
    /// `None` in inference mode.
    pub relation: Option<usize>,
}

impl Sample {
    /// Object features stacked into a `K x raw_object_dim` matrix.
    pub fn object_matrix(&self) -> Matrix {
        let rows: Vec<&[f64]> = self.objects.iter().map(|o| o.vec.as_slice()).collect();
        Matrix::from_rows(&rows)
    }

    /// Zeroes every image block and object vector, keeping shapes.
    pub fn strip_visual(&mut self) {
        self.image_feature = Matrix::zeros(self.image_feature.rows(), self.image_feature.cols());
        for o in &mut self.objects {
            o.vec.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}` (expected train, dev or test)")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub schema: Arc<RelationSchema>,
    pub split: Split,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, schema: Arc<RelationSchema>, split: Split) -> Self {
        Self { samples, schema, split }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Sample> {
        self.samples.iter().find(|s| s.id == id)
    }

    /// Gold-label counts keyed by relation name; unlabeled samples are skipped.
    pub fn relation_counts(&self) -> BTreeMap<String, usize> {
        let mut counts = BTreeMap::new();
        for s in &self.samples {
            if let Some(r) = s.relation {
                *counts.entry(self.schema.relation_name(r).to_string()).or_insert(0) += 1;
            }
        }
        counts
    }
}

/// Bounds applied during validation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationLimits {
    pub max_text_len: usize,
    pub max_objects: usize,
}

impl Default for ValidationLimits {
    fn default() -> Self {
        Self { max_text_len: 128, max_objects: 10 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub field: &'static str,
    pub severity: Severity,
    pub message: String,
}

impl Violation {
    fn error(field: &'static str, message: impl Into<String>) -> Self {
        Self { field, severity: Severity::Error, message: message.into() }
    }

    fn warning(field: &'static str, message: impl Into<String>) -> Self {
        Self { field, severity: Severity::Warning, message: message.into() }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sev = match self.severity {
            Severity::Error => "error",
            Severity::Warning => "warning",
        };
        write!(f, "{sev}: {}: {}", self.field, self.message)
    }
}

pub fn validate_sample(s: &Sample, schema: &RelationSchema) -> Vec<Violation> {
    validate_sample_with(s, schema, ValidationLimits::default())
}

/// Checks every sample invariant. Returns an empty list iff the sample is valid;
/// a type-incompatible gold relation is reported as a warning.
pub fn validate_sample_with(s: &Sample, schema: &RelationSchema, limits: ValidationLimits) -> Vec<Violation> {
    let mut out = Vec::new();
    let n = s.tokens.len();
    if n == 0 {
        out.push(Violation::error("tokens", "empty text"));
    }
    if n > limits.max_text_len {
        out.push(Violation::error("tokens", format!("{n} tokens exceed max_text_len {}", limits.max_text_len)));
    }
    for (field, span) in [("head_span", s.head_span), ("tail_span", s.tail_span)] {
        if span.start > span.end {
            out.push(Violation::error(field, format!("reversed span [{}, {}]", span.start, span.end)));
        } else if span.end >= n {
            out.push(Violation::error(field, format!("span end {} outside {n} tokens", span.end)));
        }
    }
    if s.head_span.start <= s.head_span.end
        && s.tail_span.start <= s.tail_span.end
        && s.head_span.overlaps(&s.tail_span)
    {
        out.push(Violation::error("tail_span", "head and tail spans overlap"));
    }
    for (field, t) in [("head_type", s.head_type), ("tail_type", s.tail_type)] {
        if t >= schema.num_types() {
            out.push(Violation::error(field, format!("type id {t} outside schema")));
        }
    }
    if s.image_feature.rows() == 0 || s.image_feature.cols() == 0 {
        out.push(Violation::error("image_feature", "empty image feature block"));
    } else if !s.image_feature.all_finite() {
        out.push(Violation::error("image_feature", "non-finite value"));
    }
    if s.objects.is_empty() {
        out.push(Violation::error("object_features", "empty object list"));
    }
    if s.objects.len() > limits.max_objects {
        out.push(Violation::error(
            "object_features",
            format!("{} objects exceed K = {}", s.objects.len(), limits.max_objects),
        ));
    }
    if let Some(first) = s.objects.first() {
        let dim = first.vec.len();
        if dim == 0 {
            out.push(Violation::error("object_features", "zero-length object vector"));
        }
        if s.objects.iter().any(|o| o.vec.len() != dim) {
            out.push(Violation::error("object_features", "object vectors differ in length"));
        }
        if s.objects.iter().any(|o| !o.roi_score.is_finite() || o.vec.iter().any(|v| !v.is_finite())) {
            out.push(Violation::error("object_features", "non-finite value"));
        }
        if s.objects.windows(2).any(|w| w[0].roi_score < w[1].roi_score) {
            out.push(Violation::error("object_features", "objects not sorted by descending ROI score"));
        }
    }
    if let Some(r) = s.relation {
        if r >= schema.num_relations() {
            out.push(Violation::error("relation", format!("relation id {r} outside schema")));
        } else if s.head_type < schema.num_types()
            && s.tail_type < schema.num_types()
            && !schema.is_compatible(s.head_type, s.tail_type, r)
        {
            out.push(Violation::warning(
                "relation",
                format!(
                    "relation `{}` incompatible with ({}, {})",
                    schema.relation_name(r),
                    schema.type_name(s.head_type),
                    schema.type_name(s.tail_type)
                ),
            ));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema() -> RelationSchema {
        RelationSchema::new(
            vec!["None".into(), "/per/org/member_of".into(), "/per/per/born_with".into()],
            vec!["per".into(), "org".into()],
            &[],
        )
        .unwrap()
    }

    fn good() -> Sample {
        Sample {
            id: "s0".into(),
            tokens: vec![2, 3, 4, 5],
            head_span: Span::new(0, 0),
            tail_span: Span::new(2, 3),
            head_type: 0,
            tail_type: 1,
            image_feature: Matrix::filled(2, 3, 0.5),
            objects: vec![
                ObjectFeature { vec: vec![1.0, 0.0], roi_score: 0.9 },
                ObjectFeature { vec: vec![0.0, 1.0], roi_score: 0.4 },
            ],
            relation: Some(1),
        }
    }

    #[test]
    fn well_formed_sample_has_no_violations() {
        assert!(validate_sample(&good(), &schema()).is_empty());
    }

    #[test]
    fn empty_object_list_is_flagged() {
        let mut s = good();
        s.objects.clear();
        let v = validate_sample(&s, &schema());
        assert!(v.iter().any(|v| v.message == "empty object list"));
    }

    #[test]
    fn incompatible_relation_is_a_warning() {
        let mut s = good();
        s.relation = Some(2);
        let v = validate_sample(&s, &schema());
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].severity, Severity::Warning);
        assert_eq!(v[0].field, "relation");
    }

    #[test]
    fn span_problems() {
        let mut s = good();
        s.head_span = Span::new(3, 2);
        assert!(validate_sample(&s, &schema()).iter().any(|v| v.message.contains("reversed")));
        let mut s = good();
        s.tail_span = Span::new(0, 1);
        assert!(validate_sample(&s, &schema()).iter().any(|v| v.message.contains("overlap")));
        let mut s = good();
        s.tail_span = Span::new(2, 9);
        assert!(validate_sample(&s, &schema()).iter().any(|v| v.message.contains("outside")));
    }

    #[test]
    fn unsorted_objects_and_nan_are_flagged() {
        let mut s = good();
        s.objects.swap(0, 1);
        assert!(validate_sample(&s, &schema()).iter().any(|v| v.message.contains("sorted")));
        let mut s = good();
        s.image_feature.set(0, 0, f64::NAN);
        assert!(!validate_sample(&s, &schema()).is_empty());
    }
}
