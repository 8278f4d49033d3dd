//! Ablation, input-order and image-proportion runners.
//!
//! Every row retrains the model once per seed. Precision, recall and F1 are
//! scored on the pooled test predictions of all seeds, so each row satisfies
//! the same identities as a single run; the per-seed dev F1 is kept alongside.

use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, DatasetBundle};
use crate::encoder::{Stage, StageOrder};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, score, MetricsReport};
use crate::train::{load_or_generate, train, TrainConfig};

pub const DEFAULT_SEEDS: [u64; 3] = [13, 42, 2023];

fn default_seeds() -> Vec<u64> {
    DEFAULT_SEEDS.to_vec()
}

/// Training settings plus the seeds each row is averaged over.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(flatten)]
    pub train: TrainConfig,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Where the TSV table is written in addition to stdout.
    #[serde(default)]
    pub out: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self { train: TrainConfig::default(), seeds: default_seeds(), out: None }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig("at least one seed is required".into()));
        }
        self.train.validate()
    }
}

/// The ablation grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    Full,
    NoPrefixes,
    NoEntityPrefix,
    NoObjectPrefix,
    NoFusion,
    NoJointObjective,
    /// Both prefixes moved to the given stage.
    PrefixesAt(Stage),
    EntityPrefixAt(Stage),
    ObjectPrefixAt(Stage),
    /// Entity prefix and object prefix at the given stages.
    Split { entity: Stage, object: Stage },
}

impl Variant {
    /// The 13 ablation rows, without the full model.
    pub const ABLATIONS: [Variant; 13] = [
        Variant::NoPrefixes,
        Variant::NoEntityPrefix,
        Variant::NoObjectPrefix,
        Variant::NoFusion,
        Variant::NoJointObjective,
        Variant::PrefixesAt(Stage::S2),
        Variant::PrefixesAt(Stage::S3),
        Variant::EntityPrefixAt(Stage::S2),
        Variant::EntityPrefixAt(Stage::S3),
        Variant::ObjectPrefixAt(Stage::S2),
        Variant::ObjectPrefixAt(Stage::S3),
        Variant::Split { entity: Stage::S2, object: Stage::S3 },
        Variant::Split { entity: Stage::S3, object: Stage::S2 },
    ];

    /// Applies the variant on top of `base`.
    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let mut c = base.clone();
        match self {
            Variant::Full => {}
            Variant::NoPrefixes => c.ablation.no_prefixes = true,
            Variant::NoEntityPrefix => c.ablation.no_entity_prefix = true,
            Variant::NoObjectPrefix => c.ablation.no_object_prefix = true,
            Variant::NoFusion => c.ablation.no_fusion = true,
            Variant::NoJointObjective => c.ablation.no_joint = true,
            Variant::PrefixesAt(s) => {
                c.placement.entity = s;
                c.placement.object = s;
            }
            Variant::EntityPrefixAt(s) => c.placement.entity = s,
            Variant::ObjectPrefixAt(s) => c.placement.object = s,
            Variant::Split { entity, object } => {
                c.placement.entity = entity;
                c.placement.object = object;
            }
        }
        c
    }
}

fn stage_label(s: Stage) -> &'static str {
    match s {
        Stage::S1 => "S1",
        Stage::S2 => "S2",
        Stage::S3 => "S3",
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Variant::Full => write!(f, "Full model"),
            Variant::NoPrefixes => write!(f, "w/o All Prefixes"),
            Variant::NoEntityPrefix => write!(f, "w/o E-P"),
            Variant::NoObjectPrefix => write!(f, "w/o O-P"),
            Variant::NoFusion => write!(f, "w/o dual-gated fusion"),
            Variant::NoJointObjective => write!(f, "w/o joint objective"),
            Variant::PrefixesAt(s) => write!(f, "repl. All Prefixes in {}", stage_label(s)),
            Variant::EntityPrefixAt(s) => write!(f, "repl. E-P in {}", stage_label(s)),
            Variant::ObjectPrefixAt(s) => write!(f, "repl. O-P in {}", stage_label(s)),
            Variant::Split { entity, object } => {
                write!(f, "repl. E-P in {} & O-P in {}", stage_label(entity), stage_label(object))
            }
        }
    }
}

/// One table row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRow {
    pub label: String,
    pub seeds: Vec<u64>,
    /// Scores over the pooled test predictions of every seed.
    pub report: MetricsReport,
    pub dev_f1_per_seed: Vec<f64>,
}

impl ExperimentRow {
    pub fn mean_dev_f1(&self) -> f64 {
        self.dev_f1_per_seed.iter().sum::<f64>() / self.dev_f1_per_seed.len().max(1) as f64
    }
}

/// Trains `config` once per seed and pools the evaluation split.
pub fn run_row(label: impl Into<String>, config: &TrainConfig, bundle: &DatasetBundle, seeds: &[u64]) -> Result<ExperimentRow> {
    let label = label.into();
    let eval_split = if bundle.test.is_empty() { &bundle.dev } else { &bundle.test };
    let mut pairs = Vec::new();
    let mut dev_f1 = Vec::with_capacity(seeds.len());
    let mut violations = 0;
    for &seed in seeds {
        let cfg = TrainConfig { seed, ..config.clone() };
        let dev = (!bundle.dev.is_empty()).then_some(&bundle.dev);
        let outcome = train(&cfg, &bundle.train, dev, bundle.vocab.len())?;
        dev_f1.push(outcome.best_dev().map_or(0.0, |r| r.f1));
        let (report, records) = evaluate(&outcome.model, eval_split, cfg.averaging)?;
        violations += report.mask_violations;
        for (s, r) in eval_split.samples.iter().zip(&records) {
            let pred = bundle.schema.relation_id(&r.predicted).expect("prediction names come from the schema");
            pairs.push((s.relation, pred));
        }
        log::info!("{label} seed {seed}: dev f1 {:.4}, eval f1 {:.4}", dev_f1.last().unwrap(), report.f1);
    }
    let mut report = score(&pairs, &bundle.schema, config.averaging);
    report.mask_violations = violations;
    report.config_fingerprint = crate::checkpoint::fingerprint(config);
    report.check_identities()?;
    Ok(ExperimentRow { label, seeds: seeds.to_vec(), report, dev_f1_per_seed: dev_f1 })
}

/// The full model followed by `variants`.
pub fn run_variants(config: &ExperimentConfig, bundle: &DatasetBundle, variants: &[Variant]) -> Result<Vec<ExperimentRow>> {
    config.validate()?;
    std::iter::once(Variant::Full)
        .chain(variants.iter().copied().filter(|&v| v != Variant::Full))
        .map(|v| run_row(v.to_string(), &v.apply(&config.train), bundle, &config.seeds))
        .collect()
}

/// One row per input order, the default order first.
pub fn run_orders(config: &ExperimentConfig, bundle: &DatasetBundle) -> Result<Vec<ExperimentRow>> {
    config.validate()?;
    StageOrder::ALL
        .iter()
        .map(|&order| run_row(order.label(), &TrainConfig { order, ..config.train.clone() }, bundle, &config.seeds))
        .collect()
}

/// Copy of `train` where the visual features of all but a `proportion` of the
/// samples are zeroed. The kept samples are chosen by `seed`.
pub fn with_image_proportion(train: &Dataset, proportion: f64, seed: u64) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&proportion) {
        return Err(Error::InvalidConfig(format!("image proportion {proportion} outside [0, 1]")));
    }
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_strip = ((1.0 - proportion) * train.len() as f64).round() as usize;
    let mut out = train.clone();
    for &i in &order[..n_strip] {
        out.samples[i].strip_visual();
    }
    Ok(out)
}

/// One row per training image proportion. Dev and test keep their images.
pub fn run_image_proportions(config: &ExperimentConfig, bundle: &DatasetBundle, proportions: &[f64]) -> Result<Vec<ExperimentRow>> {
    config.validate()?;
    proportions
        .iter()
        .map(|&p| {
            let mut b = bundle.clone();
            b.train = with_image_proportion(&bundle.train, p, config.train.seed)?;
            run_row(format!("{p}"), &config.train, &b, &config.seeds)
        })
        .collect()
}

/// Loads or generates the dataset named by the experiment config.
pub fn load_bundle(config: &ExperimentConfig) -> Result<DatasetBundle> {
    load_or_generate(&config.train)
}

pub const TSV_HEADER: &str = "row\tseeds\taccuracy\tprecision\trecall\tf1\tmean_dev_f1\tmask_violations";

/// Tab-separated table with [`TSV_HEADER`].
pub fn rows_to_tsv(rows: &[ExperimentRow]) -> String {
    let mut out = format!("{TSV_HEADER}\n");
    for r in rows {
        let seeds = r.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(",");
        let m = &r.report;
        out += &format!(
            "{}\t{seeds}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{}\n",
            r.label,
            m.accuracy,
            m.precision,
            m.recall,
            m.f1,
            r.mean_dev_f1(),
            m.mask_violations
        );
    }
    out
}

/// Prints the table and writes it to `out` when given.
pub fn emit_table(rows: &[ExperimentRow], out: Option<&Path>) -> Result<()> {
    let tsv = rows_to_tsv(rows);
    print!("{tsv}");
    if let Some(path) = out {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, tsv).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};

    #[test]
    fn variant_labels_are_distinct() {
        let labels: std::collections::HashSet<String> = Variant::ABLATIONS.iter().map(Variant::to_string).collect();
        assert_eq!(labels.len(), 13);
        assert!(!labels.contains(&Variant::Full.to_string()));
    }

    #[test]
    fn no_joint_objective_keeps_classification_only() {
        let c = Variant::NoJointObjective.apply(&TrainConfig::default());
        let w = c.loss_weights();
        assert_eq!((w.lambda_d, w.lambda_s), (0.0, 0.0));
        assert_eq!(w.lambda_c, TrainConfig::default().loss.lambda_c);
    }

    #[test]
    fn image_proportion_extremes() {
        let data = generate_synthetic(&SyntheticSpec { n_samples: 20, ..Default::default() }).unwrap();
        let ds = &data.dataset;
        assert_eq!(with_image_proportion(ds, 1.0, 3).unwrap().samples, ds.samples);
        let none = with_image_proportion(ds, 0.0, 3).unwrap();
        assert!(none.samples.iter().all(|s| s.image_feature.data().iter().all(|&v| v == 0.0)));
        let half = with_image_proportion(ds, 0.5, 3).unwrap();
        let stripped = half.samples.iter().filter(|s| s.image_feature.data().iter().all(|&v| v == 0.0)).count();
        assert_eq!(stripped, 10);
        assert_eq!(half.samples, with_image_proportion(ds, 0.5, 3).unwrap().samples);
    }
}
