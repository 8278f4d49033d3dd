//! The assembled relation extractor: staged encoder, dual-gated fusion and
//! type-masked decoder sharing one parameter store.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::data::{RelationSchema, Sample};
use crate::decoder::{decode, relation_distribution, DecoderParameters, DecoderVars, RelationPrediction, RelationVars};
use crate::encoder::{Encoder, EncoderConfig, EncoderInput, EncoderOutputs};
use crate::error::{Error, Result};
use crate::fusion::{dual_gated_fusion, FusionConfig, FusionInputs, FusionParameters, FusionState, FusionVars, I2tProvider};
use crate::params::ParamStore;
use crate::tensor::Matrix;

/// Sizes of the raw inputs the projections are built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputDims {
    pub vocab_size: usize,
    pub raw_image_dim: usize,
    pub raw_object_dim: usize,
}

impl InputDims {
    /// Dimensions of `sample`'s features with the given vocabulary size.
    pub fn from_sample(sample: &Sample, vocab_size: usize) -> Self {
        Self {
            vocab_size,
            raw_image_dim: sample.image_feature.cols(),
            raw_object_dim: sample.objects.first().map_or(0, |o| o.vec.len()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub fusion: FusionConfig,
    /// Disables the fusion step; the plain text state is decoded instead.
    pub use_fusion: bool,
    /// Predicts from the fused row. When false the prediction comes from the
    /// plain encoder states and the fused path only feeds the consistency loss.
    pub decode_fused: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { encoder: EncoderConfig::default(), fusion: FusionConfig::default(), use_fusion: true, decode_fused: true }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.fusion.delta.validate(self.encoder.backbone.model_dim)
    }
}

/// What a forward pass should produce.
#[derive(Debug, Clone, Default)]
pub struct ForwardOptions {
    /// Also decode the plain text state (needed for the consistency loss).
    pub plain_path: bool,
    /// Inverted-dropout multiplier applied to the relation representation.
    pub dropout_mask: Option<Matrix>,
}

/// Graph handles of one sample's forward pass.
#[derive(Debug, Clone)]
pub struct SampleForward {
    pub encoded: EncoderOutputs,
    pub fusion: Option<FusionVars>,
    /// `1 x N` fused text state, or the plain one when fusion is off.
    pub fused: Var,
    /// Distribution the prediction is read from.
    pub predicted: RelationVars,
    pub decoded: DecoderVars,
    /// Distribution decoded from the fused row.
    pub fused_dist: RelationVars,
    /// Distribution decoded from the plain row, when requested.
    pub plain_dist: Option<RelationVars>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub dims: InputDims,
    pub schema: Arc<RelationSchema>,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub fusion: FusionParameters,
    pub decoder: DecoderParameters,
    pub i2t: I2tProvider,
}

impl Model {
    pub fn new(config: &ModelConfig, schema: Arc<RelationSchema>, dims: InputDims, seed: u64) -> Result<Self> {
        config.validate()?;
        if dims.vocab_size == 0 || dims.raw_image_dim == 0 || dims.raw_object_dim == 0 {
            return Err(Error::InvalidConfig(format!("input dimensions must be positive: {dims:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let n = config.encoder.backbone.model_dim;
        let encoder =
            Encoder::new(&mut store, &config.encoder, dims.vocab_size, dims.raw_image_dim, dims.raw_object_dim, &mut rng)?;
        let fusion = FusionParameters::new(&mut store, &config.fusion, n, &mut rng);
        let bb = &config.encoder.backbone;
        let decoder =
            DecoderParameters::new(&mut store, schema.num_types(), schema.num_relations(), n, bb.ffn_dim, bb.n_heads, &mut rng);
        let i2t = I2tProvider::from_source(&config.fusion.i2t, n)?;
        Ok(Self { config: config.clone(), dims, schema, store, encoder, fusion, decoder, i2t })
    }

    pub fn model_dim(&self) -> usize {
        self.encoder.model_dim()
    }

    fn check_sample(&self, s: &Sample) -> Result<()> {
        if s.image_feature.cols() != self.dims.raw_image_dim {
            return Err(Error::InvalidInput(format!(
                "sample {} has image width {}, model expects {}",
                s.id,
                s.image_feature.cols(),
                self.dims.raw_image_dim
            )));
        }
        if let Some(o) = s.objects.iter().find(|o| o.vec.len() != self.dims.raw_object_dim) {
            return Err(Error::InvalidInput(format!(
                "sample {} has object width {}, model expects {}",
                s.id,
                o.vec.len(),
                self.dims.raw_object_dim
            )));
        }
        Ok(())
    }

    /// Encode, fuse and decode one sample on `g`.
    pub fn forward(&self, g: &mut Graph<'_>, sample: &Sample, opts: &ForwardOptions) -> Result<SampleForward> {
        self.check_sample(sample)?;
        let encoded = self.encoder.encode(g, &EncoderInput::from_sample(sample, self.config.encoder.max_objects))?;
        let fusion = if self.config.use_fusion {
            let inputs = FusionInputs {
                h_t: encoded.text_pooled,
                h_o: encoded.objects,
                h_i: encoded.image_pooled,
                id: &sample.id,
            };
            Some(dual_gated_fusion(g, &self.fusion, &self.config.fusion, &self.i2t, inputs)?)
        } else {
            None
        };
        let fused = fusion.map_or(encoded.text_pooled, |f| f.fused);
        let allowed = self.schema.allowed(sample.head_type, sample.tail_type).to_vec();

        let distribution = |g: &mut Graph<'_>, row: Option<Var>| -> Result<(DecoderVars, RelationVars)> {
            let decoded = decode(g, &self.decoder, &self.encoder.backbone, &encoded, sample.head_type, sample.tail_type, row)?;
            let rep = match &opts.dropout_mask {
                Some(mask) => g.mul_const(decoded.relation_rep, mask.clone()),
                None => decoded.relation_rep,
            };
            Ok((decoded, relation_distribution(g, &self.decoder, rep, &allowed)?))
        };

        let (fused_decoded, fused_dist) = distribution(g, fusion.map(|f| f.fused))?;
        let plain = if fusion.is_some() && (opts.plain_path || !self.config.decode_fused) {
            Some(distribution(g, None)?)
        } else {
            None
        };
        let (decoded, predicted) = match (&plain, self.config.decode_fused) {
            (Some((d, p)), false) => (*d, *p),
            _ => (fused_decoded, fused_dist),
        };
        Ok(SampleForward {
            encoded,
            fusion,
            fused,
            predicted,
            decoded,
            fused_dist,
            plain_dist: plain.map(|(_, p)| p),
        })
    }

    /// Masked relation probabilities for `sample`.
    pub fn score_all(&self, sample: &Sample) -> Result<Vec<f64>> {
        Ok(self.predict(sample)?.masked_probs)
    }

    pub fn predict(&self, sample: &Sample) -> Result<RelationPrediction> {
        Ok(self.inspect(sample)?.0)
    }

    /// Prediction together with the fusion values and selected objects.
    pub fn inspect(&self, sample: &Sample) -> Result<(RelationPrediction, Option<FusionState>, (usize, usize))> {
        let mut g = Graph::new(&self.store);
        let out = self.forward(&mut g, sample, &ForwardOptions::default())?;
        let logits = g.value(out.predicted.logits).data().to_vec();
        let type_reps = [
            g.value(out.decoded.head_type_state).data().to_vec(),
            g.value(out.decoded.tail_type_state).data().to_vec(),
        ];
        let prediction = RelationPrediction::from_logits(logits, &self.schema, sample.head_type, sample.tail_type, type_reps)?;
        let state = out.fusion.map(|f| FusionState::read(&g, &f, &self.config.fusion));
        Ok((prediction, state, out.encoded.selected_objects))
    }
}
