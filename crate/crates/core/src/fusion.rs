//! Dual-gated fusion of the pooled text state with object and image states.
//!
//! A local gate `beta` comes from an attention-weighted sum of object states,
//! a global gate `gamma` from the pooled image state. The gated text vector
//! passes through a residual MLP, and a semantic image-to-text vector is added
//! with weight `delta`:
//!
//! ```text
//! alpha_k = cos(h_t, h_o[k]) / sum_j cos(h_t, h_o[j])
//! beta    = FC_beta(sum_k alpha_k h_o[k])
//! gamma   = tanh(FC_gamma(h_i))
//! fused   = MLP(h_t * gamma + beta) + h_t + delta * h_i2t
//! ```

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Init, ParamGroup, ParamId, ParamStore};
use crate::tensor::{norm, Matrix};

/// Below this absolute cosine sum the attention falls back to uniform weights.
pub const COSINE_SUM_EPS: f64 = 1e-6;
pub const DEFAULT_DELTA: f64 = 0.4;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaMode {
    /// Cosines divided by their sum; weights may be negative.
    #[default]
    CosineSum,
    /// Softmax over the cosines.
    Softmax,
}

/// Weight of the image-to-text vector: one scalar or one value per dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DeltaWeight {
    Scalar(f64),
    PerDim(Vec<f64>),
}

impl Default for DeltaWeight {
    fn default() -> Self {
        DeltaWeight::Scalar(DEFAULT_DELTA)
    }
}

impl DeltaWeight {
    pub fn validate(&self, dim: usize) -> Result<()> {
        let in_range = |d: f64| (0.0..=1.0).contains(&d);
        match self {
            DeltaWeight::Scalar(d) if !in_range(*d) => Err(Error::InvalidConfig(format!("delta {d} outside [0, 1]"))),
            DeltaWeight::PerDim(v) if v.len() != dim => {
                Err(Error::InvalidConfig(format!("delta has {} entries, model width is {dim}", v.len())))
            }
            DeltaWeight::PerDim(v) if !v.iter().all(|&d| in_range(d)) => {
                Err(Error::InvalidConfig("per-dimension delta outside [0, 1]".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn is_zero(&self) -> bool {
        match self {
            DeltaWeight::Scalar(d) => *d == 0.0,
            DeltaWeight::PerDim(v) => v.iter().all(|&d| d == 0.0),
        }
    }
}

/// Where the image-to-text vector comes from.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum I2tSource {
    /// A trainable two-layer map of the pooled image state.
    #[default]
    Learned,
    /// Fixed vectors read from a JSONL file of `{id, vec}` records.
    Precomputed { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    pub alpha_mode: AlphaMode,
    pub delta: DeltaWeight,
    pub i2t: I2tSource,
    /// Hidden width of the fusion and image-to-text MLPs; 0 means model width.
    pub hidden_dim: usize,
    /// Starts the local-gate map at the identity instead of a random matrix.
    pub beta_identity_init: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            alpha_mode: AlphaMode::CosineSum,
            delta: DeltaWeight::default(),
            i2t: I2tSource::Learned,
            hidden_dim: 0,
            beta_identity_init: false,
        }
    }
}

/// An affine map `x W + b`.
#[derive(Debug, Clone, Copy)]
pub struct Affine {
    pub w: ParamId,
    pub b: ParamId,
}

impl Affine {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        (rows, cols): (usize, usize),
        init: Init,
        rng: &mut impl Rng,
    ) -> Self {
        let w = store.add(format!("{name}.w"), group, rows, cols, init, rng);
        let b = store.add(format!("{name}.b"), group, 1, cols, Init::Zeros, rng);
        Self { w, b }
    }

    pub fn apply(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let (w, b) = (g.param(self.w), g.param(self.b));
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }
}

/// Two affine maps with a GELU between them; the output map starts at zero.
#[derive(Debug, Clone, Copy)]
pub struct Mlp {
    pub hidden: Affine,
    pub out: Affine,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, group: ParamGroup, dims: (usize, usize, usize), rng: &mut impl Rng) -> Self {
        let (i, h, o) = dims;
        Self {
            hidden: Affine::new(store, &format!("{name}.hidden"), group, (i, h), Init::FanIn, rng),
            out: Affine::new(store, &format!("{name}.out"), group, (h, o), Init::Zeros, rng),
        }
    }

    pub fn apply(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let h = self.hidden.apply(g, x);
        let h = g.gelu(h);
        self.out.apply(g, h)
    }
}

#[derive(Debug, Clone)]
pub struct FusionParameters {
    pub beta: Affine,
    pub gamma: Affine,
    pub mlp: Mlp,
    pub i2t: Mlp,
}

impl FusionParameters {
    pub fn new(store: &mut ParamStore, config: &FusionConfig, dim: usize, rng: &mut impl Rng) -> Self {
        let group = ParamGroup::Fusion;
        let hidden = if config.hidden_dim == 0 { dim } else { config.hidden_dim };
        let beta_init = if config.beta_identity_init { Init::Identity } else { Init::FanIn };
        Self {
            beta: Affine::new(store, "fusion.beta", group, (dim, dim), beta_init, rng),
            gamma: Affine::new(store, "fusion.gamma", group, (dim, dim), Init::FanIn, rng),
            mlp: Mlp::new(store, "fusion.mlp", group, (dim, hidden, dim), rng),
            i2t: Mlp::new(store, "fusion.i2t", group, (dim, hidden, dim), rng),
        }
    }
}

/// Source of image-to-text vectors at run time.
#[derive(Debug, Clone)]
pub enum I2tProvider {
    Learned,
    Precomputed(HashMap<String, Vec<f64>>),
}

#[derive(Deserialize)]
struct I2tRecord {
    id: String,
    vec: Vec<f64>,
}

impl I2tProvider {
    pub fn from_source(source: &I2tSource, dim: usize) -> Result<Self> {
        match source {
            I2tSource::Learned => Ok(I2tProvider::Learned),
            I2tSource::Precomputed { path } => Self::load(path, dim),
        }
    }

    /// Reads `{id, vec}` lines; every vector must have `dim` entries.
    pub fn load(path: &Path, dim: usize) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut table = HashMap::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: I2tRecord = serde_json::from_str(&line)
                .map_err(|source| Error::Json { path: path.to_path_buf(), line: i + 1, source })?;
            if rec.vec.len() != dim {
                return Err(Error::SchemaViolation {
                    line: i + 1,
                    field: "vec".into(),
                    message: format!("expected {dim} values, found {}", rec.vec.len()),
                });
            }
            table.insert(rec.id, rec.vec);
        }
        Ok(I2tProvider::Precomputed(table))
    }
}

/// Attention weights of the objects with respect to the pooled text state.
pub fn object_attention(g: &mut Graph<'_>, h_t: Var, h_o: Var, mode: AlphaMode) -> Result<Var> {
    attention_with_fallback(g, h_t, h_o, mode).map(|(alpha, _)| alpha)
}

fn attention_with_fallback(g: &mut Graph<'_>, h_t: Var, h_o: Var, mode: AlphaMode) -> Result<(Var, bool)> {
    if g.value(h_o).rows() == 0 {
        return Err(Error::InvalidInput("object attention needs at least one object".into()));
    }
    if norm(g.value(h_t).data()) == 0.0 {
        return Err(Error::ZeroNorm("pooled text state"));
    }
    let cos = g.cosine(h_t, h_o);
    Ok(match mode {
        AlphaMode::CosineSum => {
            let fallback = g.value(cos).sum().abs() < COSINE_SUM_EPS;
            (g.sum_normalize(cos, COSINE_SUM_EPS), fallback)
        }
        AlphaMode::Softmax => (g.softmax(cos), false),
    })
}

/// `FC_beta(alpha h_o)`.
pub fn local_gate(g: &mut Graph<'_>, params: &FusionParameters, alpha: Var, h_o: Var) -> Var {
    let pooled = g.matmul(alpha, h_o);
    params.beta.apply(g, pooled)
}

/// `tanh(FC_gamma(h_i))`.
pub fn global_gate(g: &mut Graph<'_>, params: &FusionParameters, h_i: Var) -> Var {
    let pre = params.gamma.apply(g, h_i);
    g.tanh(pre)
}

/// `MLP(h_t * gamma + beta) + h_t`.
pub fn fuse(g: &mut Graph<'_>, params: &FusionParameters, h_t: Var, beta: Var, gamma: Var) -> Var {
    let gated = g.mul(h_t, gamma);
    let gated = g.add(gated, beta);
    let update = params.mlp.apply(g, gated);
    g.add(update, h_t)
}

/// The semantic image vector for sample `id`.
pub fn image_to_text(
    g: &mut Graph<'_>,
    params: &FusionParameters,
    provider: &I2tProvider,
    h_i: Var,
    id: &str,
) -> Result<Var> {
    match provider {
        I2tProvider::Learned => Ok(params.i2t.apply(g, h_i)),
        I2tProvider::Precomputed(table) => {
            let v = table.get(id).ok_or_else(|| Error::MissingEmbedding(id.to_string()))?;
            let dim = g.value(h_i).cols();
            if v.len() != dim {
                return Err(Error::InvalidInput(format!("image-to-text vector for {id} has {} values, expected {dim}", v.len())));
            }
            Ok(g.constant(Matrix::row_vector(v.clone())))
        }
    }
}

/// `fused + delta * h_i2t`.
pub fn integrate_semantic(g: &mut Graph<'_>, fused: Var, h_i2t: Var, delta: &DeltaWeight) -> Result<Var> {
    let dim = g.value(fused).cols();
    delta.validate(dim)?;
    let weighted = match delta {
        DeltaWeight::Scalar(d) => g.scale(h_i2t, *d),
        DeltaWeight::PerDim(v) => g.mul_const(h_i2t, Matrix::row_vector(v.clone())),
    };
    Ok(g.add(fused, weighted))
}

/// Graph handles of one fusion pass.
#[derive(Debug, Clone, Copy)]
pub struct FusionVars {
    pub alpha: Var,
    pub beta: Var,
    pub gamma: Var,
    pub pre_semantic: Var,
    pub h_i2t: Var,
    pub fused: Var,
    pub uniform_fallback: bool,
}

/// The full chain from encoder states to the fused text vector.
pub fn dual_gated_fusion(
    g: &mut Graph<'_>,
    params: &FusionParameters,
    config: &FusionConfig,
    provider: &I2tProvider,
    inputs: FusionInputs<'_>,
) -> Result<FusionVars> {
    let (alpha, uniform_fallback) = attention_with_fallback(g, inputs.h_t, inputs.h_o, config.alpha_mode)?;
    let beta = local_gate(g, params, alpha, inputs.h_o);
    let gamma = global_gate(g, params, inputs.h_i);
    let pre_semantic = fuse(g, params, inputs.h_t, beta, gamma);
    let h_i2t = image_to_text(g, params, provider, inputs.h_i, inputs.id)?;
    let fused = integrate_semantic(g, pre_semantic, h_i2t, &config.delta)?;
    Ok(FusionVars { alpha, beta, gamma, pre_semantic, h_i2t, fused, uniform_fallback })
}

/// Inputs to [`dual_gated_fusion`].
#[derive(Debug, Clone, Copy)]
pub struct FusionInputs<'a> {
    /// `1 x N` pooled text state.
    pub h_t: Var,
    /// `K x N` object states.
    pub h_o: Var,
    /// `1 x N` pooled image state.
    pub h_i: Var,
    pub id: &'a str,
}

/// Plain values of one fusion pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionState {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
    pub h_i2t: Vec<f64>,
    pub fused: Vec<f64>,
    pub delta: DeltaWeight,
    /// True when the cosine sum was too small and uniform weights were used.
    pub uniform_fallback: bool,
}

impl FusionState {
    pub fn read(g: &Graph<'_>, vars: &FusionVars, config: &FusionConfig) -> Self {
        let v = |x: Var| g.value(x).data().to_vec();
        Self {
            alpha: v(vars.alpha),
            beta: v(vars.beta),
            gamma: v(vars.gamma),
            h_i2t: v(vars.h_i2t),
            fused: v(vars.fused),
            delta: config.delta.clone(),
            uniform_fallback: vars.uniform_fallback,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(dim: usize, cfg: &FusionConfig) -> (ParamStore, FusionParameters) {
        let mut store = ParamStore::new();
        let p = FusionParameters::new(&mut store, cfg, dim, &mut ChaCha8Rng::seed_from_u64(5));
        (store, p)
    }

    #[test]
    fn attention_examples() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let h = g.constant(Matrix::row_vector(vec![1.0, 0.0]));
        let one = g.constant(Matrix::from_rows(&[[3.0, 1.0]]));
        let a = object_attention(&mut g, h, one, AlphaMode::CosineSum).unwrap();
        assert_eq!(g.value(a).data(), &[1.0]);

        let axes = g.constant(Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]));
        let a = object_attention(&mut g, h, axes, AlphaMode::CosineSum).unwrap();
        assert_eq!(g.value(a).data(), &[1.0, 0.0]);

        let sym = g.constant(Matrix::from_rows(&[[1.0, 1.0], [1.0, -1.0]]));
        let a = object_attention(&mut g, h, sym, AlphaMode::CosineSum).unwrap();
        assert!((g.value(a).get(0, 0) - 0.5).abs() < 1e-15);
        assert!((g.value(a).get(0, 1) - 0.5).abs() < 1e-15);

        let zero = g.constant(Matrix::row_vector(vec![0.0, 0.0]));
        assert!(matches!(object_attention(&mut g, zero, axes, AlphaMode::CosineSum), Err(Error::ZeroNorm(_))));
    }

    #[test]
    fn cancelling_cosines_fall_back_to_uniform() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let h = g.constant(Matrix::row_vector(vec![1.0, 0.0]));
        let opposite = g.constant(Matrix::from_rows(&[[1.0, 0.0], [-1.0, 0.0]]));
        let a = object_attention(&mut g, h, opposite, AlphaMode::CosineSum).unwrap();
        assert_eq!(g.value(a).data(), &[0.5, 0.5]);
    }

    #[test]
    fn identity_beta_cancels_opposite_objects() {
        let cfg = FusionConfig { beta_identity_init: true, ..Default::default() };
        let (store, p) = setup(3, &cfg);
        let mut g = Graph::new(&store);
        let alpha = g.constant(Matrix::row_vector(vec![0.5, 0.5]));
        let objs = g.constant(Matrix::from_rows(&[[1.0, -2.0, 0.5], [-1.0, 2.0, -0.5]]));
        let beta = local_gate(&mut g, &p, alpha, objs);
        assert!(g.value(beta).data().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn fusion_is_identity_at_init() {
        let cfg = FusionConfig::default();
        let (store, p) = setup(4, &cfg);
        let mut g = Graph::new(&store);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut rand_row = |n: usize| Matrix::from_vec(n, 4, (0..4 * n).map(|_| rng.random_range(-1.0..1.0)).collect());
        let h_t = g.constant(rand_row(1));
        let h_o = g.constant(rand_row(3));
        let h_i = g.constant(rand_row(1));
        let vars = dual_gated_fusion(&mut g, &p, &cfg, &I2tProvider::Learned, FusionInputs { h_t, h_o, h_i, id: "x" }).unwrap();
        assert_eq!(g.value(vars.fused), g.value(h_t));
        assert!(g.value(vars.h_i2t).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn delta_validation() {
        assert!(DeltaWeight::Scalar(1.5).validate(4).is_err());
        assert!(DeltaWeight::PerDim(vec![0.1; 3]).validate(4).is_err());
        assert!(DeltaWeight::PerDim(vec![0.1; 4]).validate(4).is_ok());
        let json = serde_json::to_string(&DeltaWeight::default()).unwrap();
        assert_eq!(json, "0.4");
    }

    #[test]
    fn precomputed_vectors_are_returned_verbatim() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("i2t.jsonl");
        std::fs::write(&path, "{\"id\":\"a\",\"vec\":[0.25,-1.5]}\n").unwrap();
        let provider = I2tProvider::load(&path, 2).unwrap();
        let (store, p) = setup(2, &FusionConfig::default());
        let mut g = Graph::new(&store);
        let h_i = g.constant(Matrix::row_vector(vec![1.0, 1.0]));
        let v = image_to_text(&mut g, &p, &provider, h_i, "a").unwrap();
        assert_eq!(g.value(v).data(), &[0.25, -1.5]);
        assert!(matches!(image_to_text(&mut g, &p, &provider, h_i, "b"), Err(Error::MissingEmbedding(_))));
        assert!(I2tProvider::load(&path, 3).is_err());
    }
}
