//! Staged unidirectional encoding of objects, image and text.
//!
//! The three modalities enter a frozen causal transformer one stage at a time,
//! in a configurable order, with the object and entity prefixes prepended to a
//! configurable stage. Because each stage only attends to what was fed before
//! it, an earlier stage's states never depend on a later stage's input.

mod backbone;
mod prefix;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use backbone::{Backbone, BackboneConfig, Block, LayerCache, SegmentStates, StackState};
pub use prefix::{
    build_entity_prefix, build_object_prefix, entity_embedding, most_relevant_object, FeatureProjections,
    PrefixBlock, PrefixKind, PrefixParameters, PrefixTemplate, MIN_PREFIX_LEN, SLOT_START,
};

use crate::autograd::{Graph, Var};
use crate::data::{Sample, Span};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Objects,
    Image,
    Text,
}

impl Modality {
    pub fn label(self) -> &'static str {
        match self {
            Modality::Objects => "I_o",
            Modality::Image => "I_i",
            Modality::Text => "I_t",
        }
    }

    fn from_label(s: &str) -> Option<Self> {
        match s.trim() {
            "I_o" | "o" | "objects" => Some(Modality::Objects),
            "I_i" | "i" | "image" => Some(Modality::Image),
            "I_t" | "t" | "text" => Some(Modality::Text),
            _ => None,
        }
    }
}

/// Order in which the three modalities are fed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct StageOrder([Modality; 3]);

impl StageOrder {
    pub const DEFAULT: StageOrder = StageOrder([Modality::Objects, Modality::Image, Modality::Text]);

    /// All six permutations, default first.
    pub const ALL: [StageOrder; 6] = [
        StageOrder([Modality::Objects, Modality::Image, Modality::Text]),
        StageOrder([Modality::Objects, Modality::Text, Modality::Image]),
        StageOrder([Modality::Image, Modality::Objects, Modality::Text]),
        StageOrder([Modality::Image, Modality::Text, Modality::Objects]),
        StageOrder([Modality::Text, Modality::Objects, Modality::Image]),
        StageOrder([Modality::Text, Modality::Image, Modality::Objects]),
    ];

    pub fn new(stages: [Modality; 3]) -> Result<Self> {
        let mut seen = stages;
        seen.sort();
        if seen != [Modality::Objects, Modality::Image, Modality::Text] {
            return Err(Error::InvalidConfig(format!("stage order {stages:?} is not a permutation of the three inputs")));
        }
        Ok(Self(stages))
    }

    pub fn stages(&self) -> [Modality; 3] {
        self.0
    }

    /// Stage at which `m` is fed.
    pub fn stage_of(&self, m: Modality) -> Stage {
        let i = self.0.iter().position(|&x| x == m).expect("order is a permutation");
        Stage::ALL[i]
    }

    pub fn label(&self) -> String {
        self.0.map(Modality::label).join("→")
    }
}

impl Default for StageOrder {
    fn default() -> Self {
        Self::DEFAULT
    }
}

impl fmt::Display for StageOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl FromStr for StageOrder {
    type Err = Error;

    /// Accepts `I_o→I_i→I_t`, `I_o->I_i->I_t`, `o,i,t` or `oit`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = if s.contains('→') {
            s.split('→').collect()
        } else if s.contains("->") {
            s.split("->").collect()
        } else if s.contains(',') {
            s.split(',').collect()
        } else {
            s.char_indices().map(|(i, c)| &s[i..i + c.len_utf8()]).collect()
        };
        let bad = || Error::InvalidConfig(format!("cannot parse stage order {s:?}"));
        if parts.len() != 3 {
            return Err(bad());
        }
        let mut stages = [Modality::Objects; 3];
        for (slot, p) in stages.iter_mut().zip(&parts) {
            *slot = Modality::from_label(p).ok_or_else(bad)?;
        }
        StageOrder::new(stages)
    }
}

impl TryFrom<String> for StageOrder {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<StageOrder> for String {
    fn from(o: StageOrder) -> String {
        o.label()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stage {
    S1,
    S2,
    S3,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::S1, Stage::S2, Stage::S3];
}

/// Stage in front of which each prefix is inserted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PrefixPlacement {
    pub object: Stage,
    pub entity: Stage,
}

impl Default for PrefixPlacement {
    fn default() -> Self {
        Self { object: Stage::S1, entity: Stage::S1 }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PrefixAblation {
    pub no_object_prefix: bool,
    pub no_entity_prefix: bool,
}

impl PrefixAblation {
    pub const NONE: PrefixAblation = PrefixAblation { no_object_prefix: false, no_entity_prefix: false };
    pub const ALL: PrefixAblation = PrefixAblation { no_object_prefix: true, no_entity_prefix: true };

    pub fn uses(&self, kind: PrefixKind) -> bool {
        match kind {
            PrefixKind::Object => !self.no_object_prefix,
            PrefixKind::Entity => !self.no_entity_prefix,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub backbone: BackboneConfig,
    pub prefix_len: usize,
    pub max_text_len: usize,
    /// Objects kept per sample, highest ROI score first.
    pub max_objects: usize,
    pub order: StageOrder,
    pub placement: PrefixPlacement,
    pub ablation: PrefixAblation,
    /// Keeps the transformer stack fixed during training.
    pub freeze_backbone: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            prefix_len: 8,
            max_text_len: 128,
            max_objects: 10,
            order: StageOrder::DEFAULT,
            placement: PrefixPlacement::default(),
            ablation: PrefixAblation::NONE,
            freeze_backbone: true,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.prefix_len < MIN_PREFIX_LEN {
            return Err(Error::InvalidConfig(format!(
                "prefix_len {} leaves no room around the two slot rows (minimum {MIN_PREFIX_LEN})",
                self.prefix_len
            )));
        }
        if self.max_text_len == 0 || self.max_objects == 0 {
            return Err(Error::InvalidConfig("max_text_len and max_objects must be positive".into()));
        }
        Ok(())
    }
}

/// Raw inputs for one sample.
#[derive(Debug, Clone)]
pub struct EncoderInput {
    /// Token ids; entries at or past `length` are padding and ignored.
    pub tokens: Vec<u32>,
    pub length: usize,
    pub head_span: Span,
    pub tail_span: Span,
    /// `M x raw_image_dim`.
    pub image: Matrix,
    /// `K x raw_object_dim`, sorted by descending ROI score.
    pub objects: Matrix,
}

impl EncoderInput {
    /// Inputs of `s` with at most `max_objects` objects (stored by descending ROI score).
    pub fn from_sample(s: &Sample, max_objects: usize) -> Self {
        let rows: Vec<&[f64]> = s.objects.iter().take(max_objects).map(|o| o.vec.as_slice()).collect();
        Self {
            tokens: s.tokens.clone(),
            length: s.tokens.len(),
            head_span: s.head_span,
            tail_span: s.tail_span,
            image: s.image_feature.clone(),
            objects: Matrix::from_rows(&rows),
        }
    }
}

/// States of a prefix after it ran through the stack.
#[derive(Debug, Clone)]
pub struct PrefixStates {
    pub kind: PrefixKind,
    pub stage: Stage,
    /// `prefix_len x N` final-layer states.
    pub states: Var,
    /// Per-layer keys and values as seen by later positions.
    pub layer_kv: Vec<(Var, Var)>,
}

/// Everything the fusion and decoding steps need from one encoded sample.
#[derive(Debug, Clone)]
pub struct EncoderOutputs {
    /// `K x N`.
    pub objects: Var,
    /// `M x N`.
    pub image: Var,
    /// `1 x N` mean of the image states.
    pub image_pooled: Var,
    /// `L x N` per-token states.
    pub text: Var,
    /// `1 x N` state at the last text position.
    pub text_pooled: Var,
    pub prefixes: Vec<PrefixStates>,
    /// All states in feed order, `S x N`.
    pub sequence: Var,
    /// Row of `text_pooled` inside `sequence`.
    pub pooled_row: usize,
    /// Objects placed in the object prefix slots for the head and tail.
    pub selected_objects: (usize, usize),
}

/// Trainable input side plus the frozen stack.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub backbone: Backbone,
    pub projections: FeatureProjections,
    pub prefixes: PrefixParameters,
}

impl Encoder {
    pub fn new(
        store: &mut ParamStore,
        config: &EncoderConfig,
        vocab_size: usize,
        raw_image_dim: usize,
        raw_object_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let n = config.backbone.model_dim;
        let backbone = Backbone::new(store, &config.backbone, rng);
        if !config.freeze_backbone {
            store.set_group_trainable(crate::params::ParamGroup::Backbone, true);
        }
        let projections = FeatureProjections::new(store, vocab_size, raw_image_dim, raw_object_dim, n, rng);
        let prefixes = PrefixParameters::new(store, config.prefix_len, config.backbone.n_layers, n, rng);
        Ok(Self { config: config.clone(), backbone, projections, prefixes })
    }

    pub fn model_dim(&self) -> usize {
        self.config.backbone.model_dim
    }

    /// Runs the configured stages over one sample.
    pub fn encode(&self, g: &mut Graph<'_>, input: &EncoderInput) -> Result<EncoderOutputs> {
        let cfg = &self.config;
        if input.length == 0 {
            return Err(Error::InvalidInput("empty text".into()));
        }
        if input.length > input.tokens.len() {
            return Err(Error::InvalidInput(format!(
                "length {} exceeds {} supplied tokens",
                input.length,
                input.tokens.len()
            )));
        }
        if input.length > cfg.max_text_len {
            return Err(Error::SequenceTooLong { len: input.length, max: cfg.max_text_len });
        }
        if input.objects.rows() == 0 {
            return Err(Error::InvalidInput("no objects in sample".into()));
        }

        let text_in = self.projections.text(g, &input.tokens[..input.length])?;
        let raw_image = g.constant(input.image.clone());
        let image_in = self.projections.image(g, raw_image);
        let raw_objects = g.constant(input.objects.clone());
        let objects_in = self.projections.objects(g, raw_objects);

        let e1 = entity_embedding(g, text_in, input.head_span)?;
        let e2 = entity_embedding(g, text_in, input.tail_span)?;
        let o1 = most_relevant_object(g, objects_in, e1)?;
        let o2 = most_relevant_object(g, objects_in, e2)?;

        let mut blocks = Vec::new();
        if cfg.ablation.uses(PrefixKind::Object) {
            let a = g.row(objects_in, o1);
            let b = g.row(objects_in, o2);
            blocks.push((cfg.placement.object, build_object_prefix(g, &self.prefixes, a, b)));
        }
        if cfg.ablation.uses(PrefixKind::Entity) {
            blocks.push((cfg.placement.entity, build_entity_prefix(g, &self.prefixes, e1, e2)));
        }

        let mut state = self.backbone.new_state();
        let mut pieces = Vec::new();
        let mut prefixes = Vec::new();
        let mut modality_states = [None; 3];
        let mut text_start = 0;
        for (stage, modality) in Stage::ALL.into_iter().zip(cfg.order.stages()) {
            for (_, block) in blocks.iter().filter(|(s, _)| *s == stage) {
                let out = self.backbone.feed(g, &mut state, block.rows, Some(&block.layer_kv))?;
                pieces.push(out.states);
                prefixes.push(PrefixStates { kind: block.kind, stage, states: out.states, layer_kv: out.layer_kv });
            }
            let data = match modality {
                Modality::Objects => objects_in,
                Modality::Image => image_in,
                Modality::Text => text_in,
            };
            let out = self.backbone.feed(g, &mut state, data, None)?;
            if modality == Modality::Text {
                text_start = out.start;
            }
            pieces.push(out.states);
            modality_states[modality as usize] = Some(out.states);
        }

        let [objects, image, text] = modality_states.map(|s| s.expect("every modality fed once"));
        let image_pooled = g.mean_rows(image);
        let text_pooled = g.row(text, input.length - 1);
        let sequence = g.concat_rows(&pieces);
        Ok(EncoderOutputs {
            objects,
            image,
            image_pooled,
            text,
            text_pooled,
            prefixes,
            sequence,
            pooled_row: text_start + input.length - 1,
            selected_objects: (o1, o2),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamGroup;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_config() -> EncoderConfig {
        EncoderConfig {
            backbone: BackboneConfig { n_layers: 2, n_heads: 2, model_dim: 8, ffn_dim: 16, max_positions: 64, dropout: 0.0 },
            prefix_len: 4,
            ..Default::default()
        }
    }

    fn input(rng: &mut ChaCha8Rng) -> EncoderInput {
        let mut m = |r: usize, c: usize| {
            Matrix::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect())
        };
        EncoderInput {
            tokens: vec![3, 4, 5, 6, 7, 8],
            length: 6,
            head_span: Span { start: 0, end: 0 },
            tail_span: Span { start: 2, end: 3 },
            image: m(2, 5),
            objects: m(3, 6),
        }
    }

    fn setup(cfg: &EncoderConfig) -> (ParamStore, Encoder) {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, cfg, 12, 5, 6, &mut rng).unwrap();
        (store, enc)
    }

    #[test]
    fn stage_order_labels_round_trip() {
        assert_eq!(StageOrder::DEFAULT.label(), "I_o→I_i→I_t");
        for o in StageOrder::ALL {
            assert_eq!(o.label().parse::<StageOrder>().unwrap(), o);
        }
        assert_eq!("oti".parse::<StageOrder>().unwrap().stages()[1], Modality::Text);
        assert!("oot".parse::<StageOrder>().is_err());
        let json = serde_json::to_string(&StageOrder::DEFAULT).unwrap();
        assert_eq!(serde_json::from_str::<StageOrder>(&json).unwrap(), StageOrder::DEFAULT);
    }

    #[test]
    fn shapes_follow_inputs() {
        let cfg = small_config();
        let (store, enc) = setup(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = input(&mut rng);
        let mut g = Graph::new(&store);
        let out = enc.encode(&mut g, &x).unwrap();
        assert_eq!(g.value(out.objects).shape(), (3, 8));
        assert_eq!(g.value(out.image).shape(), (2, 8));
        assert_eq!(g.value(out.text_pooled).shape(), (1, 8));
        assert_eq!(g.value(out.sequence).rows(), 2 * 4 + 3 + 2 + 6);
        assert_eq!(g.value(out.sequence).row(out.pooled_row), g.value(out.text_pooled).row(0));
    }

    #[test]
    fn padding_is_ignored() {
        let cfg = small_config();
        let (store, enc) = setup(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = input(&mut rng);
        let mut padded = x.clone();
        padded.tokens.extend([0, 0, 0]);
        let mut g = Graph::new(&store);
        let a = enc.encode(&mut g, &x).unwrap().text_pooled;
        let b = enc.encode(&mut g, &padded).unwrap().text_pooled;
        assert_eq!(g.value(a), g.value(b));
    }

    #[test]
    fn no_prefix_ablation_drops_prefix_rows() {
        let mut cfg = small_config();
        cfg.ablation = PrefixAblation::ALL;
        let (store, enc) = setup(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut g = Graph::new(&store);
        let out = enc.encode(&mut g, &input(&mut rng)).unwrap();
        assert!(out.prefixes.is_empty());
        assert_eq!(g.value(out.sequence).rows(), 3 + 2 + 6);
    }

    #[test]
    fn backbone_is_frozen_group() {
        let (store, _) = setup(&small_config());
        assert!(store.group_ids(ParamGroup::Backbone).iter().all(|&id| !store.get(id).trainable));
        assert!(store.group_ids(ParamGroup::Prefixes).iter().all(|&id| store.get(id).trainable));
    }
}
