//! Mini-batch training with the joint loss.
//!
//! Each step runs in two phases. Every sample in the batch is encoded, fused
//! and decoded on its own graph; the batch-level losses are then built on a
//! separate graph whose inputs are the stacked per-sample outputs. Gradients
//! of those inputs seed a backward pass through each sample graph, and the
//! parameter gradients are summed in batch order so results do not depend on
//! the thread count.

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::checkpoint;
use crate::data::{batch_iterator, Dataset, DatasetBundle, Sample, SyntheticSpec, DEFAULT_BATCH_SIZE};
use crate::encoder::{BackboneConfig, EncoderConfig, PrefixAblation, PrefixPlacement, StageOrder};
use crate::error::{Error, Result};
use crate::fusion::FusionConfig;
use crate::metrics::{evaluate, Averaging, MetricsReport};
use crate::model::{ForwardOptions, InputDims, Model, ModelConfig, SampleForward};
use crate::objectives::{batch_losses, BatchVars, LossReport, LossWeights};
use crate::optim::{AdamW, AdamWConfig};
use crate::params::ParamGrads;
use crate::tensor::Matrix;

pub const TRAIN_LOG_FILE: &str = "train_log.csv";

/// Switches that remove parts of the model or objective.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablations {
    pub no_entity_prefix: bool,
    pub no_object_prefix: bool,
    pub no_prefixes: bool,
    pub no_fusion: bool,
    /// Trains with the classification loss only.
    pub no_joint: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub backbone: BackboneConfig,
    pub prefix_len: usize,
    pub max_text_len: usize,
    /// Objects kept per sample, highest ROI score first.
    pub max_objects: usize,
    pub order: StageOrder,
    pub placement: PrefixPlacement,
    pub ablation: Ablations,
    pub fusion: FusionConfig,
    pub decode_fused: bool,
    pub freeze_backbone: bool,
    pub loss: LossWeights,
    pub optimizer: AdamWConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Ends training once accuracy on the training split reaches this value.
    pub stop_at_train_accuracy: Option<f64>,
    /// Measures training-split accuracy after every epoch.
    pub eval_train: bool,
    pub averaging: Averaging,
    /// Dataset directory with `schema.json` and split files.
    pub data_dir: Option<PathBuf>,
    /// Generator settings used by the experiment runners when no `data_dir` is set.
    pub synthetic: Option<SyntheticSpec>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let enc = EncoderConfig::default();
        Self {
            backbone: enc.backbone,
            prefix_len: enc.prefix_len,
            max_text_len: enc.max_text_len,
            max_objects: 10,
            order: StageOrder::DEFAULT,
            placement: PrefixPlacement::default(),
            ablation: Ablations::default(),
            fusion: FusionConfig::default(),
            decode_fused: true,
            freeze_backbone: true,
            loss: LossWeights::default(),
            optimizer: AdamWConfig::default(),
            batch_size: DEFAULT_BATCH_SIZE,
            epochs: 20,
            seed: 13,
            stop_at_train_accuracy: None,
            eval_train: false,
            averaging: Averaging::Micro,
            data_dir: None,
            synthetic: None,
        }
    }
}

impl TrainConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
    }

    pub fn model_config(&self) -> ModelConfig {
        let a = self.ablation;
        ModelConfig {
            encoder: EncoderConfig {
                backbone: self.backbone.clone(),
                prefix_len: self.prefix_len,
                max_text_len: self.max_text_len,
                max_objects: self.max_objects,
                order: self.order,
                placement: self.placement,
                ablation: PrefixAblation {
                    no_object_prefix: a.no_prefixes || a.no_object_prefix,
                    no_entity_prefix: a.no_prefixes || a.no_entity_prefix,
                },
                freeze_backbone: self.freeze_backbone,
            },
            fusion: self.fusion.clone(),
            use_fusion: !a.no_fusion,
            decode_fused: self.decode_fused,
        }
    }

    /// Loss weights after the ablation switches.
    pub fn loss_weights(&self) -> LossWeights {
        let mut w = self.loss;
        if self.ablation.no_joint {
            w.lambda_d = 0.0;
            w.lambda_s = 0.0;
        }
        w
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.loss.validate()?;
        self.optimizer.validate()?;
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be positive".into()));
        }
        if self.batch_size == 0 || (self.loss_weights().uses_self_identification() && self.batch_size < 2) {
            return Err(Error::InvalidConfig(format!(
                "batch_size {} too small; the self-identification loss needs at least 2",
                self.batch_size
            )));
        }
        if let Some(t) = self.stop_at_train_accuracy {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::InvalidConfig(format!("stop_at_train_accuracy {t} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// One optimizer step as written to the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub l_d: f64,
    pub l_s: f64,
    pub l_c: f64,
    pub total: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub train_accuracy: Option<f64>,
    pub dev: Option<MetricsReport>,
}

/// Model, optimizer and step counter.
pub struct Trainer {
    pub model: Model,
    pub config: TrainConfig,
    weights: LossWeights,
    optimizer: AdamW,
    step: u64,
}

struct SampleGraph<'s> {
    graph: Graph<'s>,
    out: SampleForward,
}

fn stack(rows: impl Iterator<Item = Matrix>) -> Matrix {
    let rows: Vec<Vec<f64>> = rows.map(Matrix::into_vec).collect();
    Matrix::from_rows(&rows)
}

impl Trainer {
    pub fn new(config: TrainConfig, model: Model) -> Result<Self> {
        config.validate()?;
        let optimizer = AdamW::new(config.optimizer, &model.store)?;
        let weights = config.loss_weights();
        Ok(Self { model, config, weights, optimizer, step: 0 })
    }

    /// Builds a fresh model for `train` and wraps it.
    pub fn for_dataset(config: TrainConfig, train: &Dataset, vocab_size: usize) -> Result<Self> {
        let first = train.samples.first().ok_or_else(|| Error::InvalidInput("training split is empty".into()))?;
        let dims = InputDims::from_sample(first, vocab_size);
        let model = Model::new(&config.model_config(), train.schema.clone(), dims, config.seed)?;
        Self::new(config, model)
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn weights(&self) -> &LossWeights {
        &self.weights
    }

    fn dropout_mask(&self, position: usize) -> Option<Matrix> {
        let p = self.config.backbone.dropout;
        if p == 0.0 {
            return None;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ self.step.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        rng.set_stream(position as u64);
        let keep = 1.0 - p;
        let n = self.model.model_dim();
        Some(Matrix::from_vec(1, n, (0..n).map(|_| if rng.random_bool(keep) { 1.0 / keep } else { 0.0 }).collect()))
    }

    /// Loss and summed parameter gradients over `samples`. Dropout is applied when `train` is set.
    pub fn batch_gradients(&self, samples: &[&Sample], train: bool) -> Result<(LossReport, ParamGrads)> {
        let (report, grads) = self.run_batch(samples, train, true)?;
        Ok((report, grads.expect("gradients requested")))
    }

    /// Loss over `samples` without a backward pass.
    pub fn batch_loss(&self, samples: &[&Sample], train: bool) -> Result<LossReport> {
        Ok(self.run_batch(samples, train, false)?.0)
    }

    fn run_batch(&self, samples: &[&Sample], train: bool, with_grads: bool) -> Result<(LossReport, Option<ParamGrads>)> {
        let model = &self.model;
        let plain_path = model.config.use_fusion && self.weights.lambda_d > 0.0;
        let golds = samples
            .iter()
            .map(|s| s.relation.ok_or_else(|| Error::InvalidInput(format!("training sample {} has no relation", s.id))))
            .collect::<Result<Vec<_>>>()?;

        let graphs = samples
            .par_iter()
            .enumerate()
            .map(|(pos, s)| {
                let opts = ForwardOptions { plain_path, dropout_mask: if train { self.dropout_mask(pos) } else { None } };
                let mut graph = Graph::new(&model.store);
                let out = model.forward(&mut graph, s, &opts)?;
                Ok(SampleGraph { graph, out })
            })
            .collect::<Result<Vec<_>>>()?;

        let rows = |f: &dyn Fn(&SampleGraph) -> Matrix| stack(graphs.iter().map(f));
        let mut bg = Graph::new(&model.store);
        let plain = bg.input(rows(&|s| s.graph.value(s.out.encoded.text_pooled).clone()));
        let fused = bg.input(rows(&|s| s.graph.value(s.out.fused).clone()));
        let p_fused = bg.input(rows(&|s| s.graph.value(s.out.fused_dist.probs).clone()));
        let p_pred = bg.input(rows(&|s| s.graph.value(s.out.predicted.probs).clone()));
        let p_plain = if plain_path {
            Some(bg.input(rows(&|s| s.graph.value(s.out.plain_dist.expect("plain path decoded").probs).clone())))
        } else {
            None
        };
        let vars = BatchVars { plain, fused, p_fused, p_pred, p_plain };
        let (losses, report) = batch_losses(&mut bg, vars, &golds, &self.weights)?;
        let total = bg.value(losses.total).scalar();
        if !total.is_finite() {
            return Err(Error::Divergence { step: self.step as usize, l_d: report.l_d, l_s: report.l_s, l_c: report.l_c });
        }
        if !with_grads {
            return Ok((report, None));
        }
        let upstream = bg.backward(&[(losses.total, Matrix::filled(1, 1, 1.0))]);
        let grad_row = |v, b: usize| {
            let cols = bg.value(v).cols();
            upstream.wrt(v).map_or_else(|| Matrix::zeros(1, cols), |m| Matrix::row_vector(m.row(b).to_vec()))
        };

        let per_sample = graphs
            .par_iter()
            .enumerate()
            .map(|(b, sg)| {
                let o = &sg.out;
                let mut seeds = vec![
                    (o.encoded.text_pooled, grad_row(plain, b)),
                    (o.fused, grad_row(fused, b)),
                    (o.fused_dist.probs, grad_row(p_fused, b)),
                    (o.predicted.probs, grad_row(p_pred, b)),
                ];
                if let (Some(pp), Some(dist)) = (p_plain, o.plain_dist) {
                    seeds.push((dist.probs, grad_row(pp, b)));
                }
                sg.graph.backward(&seeds).param_grads(&sg.graph)
            })
            .collect::<Vec<_>>();
        let mut grads = ParamGrads::new(model.store.len());
        for g in &per_sample {
            grads.merge(g);
        }
        Ok((report, Some(grads)))
    }

    /// One optimizer step on `samples`.
    pub fn step(&mut self, samples: &[&Sample]) -> Result<StepRecord> {
        let (report, mut grads) = self.batch_gradients(samples, true)?;
        let lr = self.config.optimizer.lr;
        self.optimizer.step(&mut self.model.store, &mut grads, lr);
        self.step += 1;
        Ok(StepRecord { step: self.step, l_d: report.l_d, l_s: report.l_s, l_c: report.l_c, total: report.total, lr })
    }

    /// One pass over `dataset` in a seed-determined order.
    pub fn epoch(&mut self, dataset: &Dataset, epoch: usize) -> Result<Vec<StepRecord>> {
        let needs_negatives = self.weights.uses_self_identification();
        let seed = self.config.seed.wrapping_add(epoch as u64);
        let batches = batch_iterator(dataset, self.config.batch_size, seed, true, needs_negatives)?;
        let order: Vec<Vec<usize>> = batches.map(|b| b.indices).collect();
        let mut records = Vec::with_capacity(order.len());
        for indices in order {
            let samples: Vec<&Sample> = indices.iter().map(|&i| &dataset.samples[i]).collect();
            records.push(self.step(&samples)?);
        }
        Ok(records)
    }
}

/// Everything produced by [`train`].
pub struct TrainOutcome {
    /// Parameters of the epoch with the best dev F1 (the last epoch without dev data).
    pub model: Model,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
}

impl TrainOutcome {
    pub fn best_dev(&self) -> Option<&MetricsReport> {
        self.epochs.iter().find(|e| e.epoch == self.best_epoch).and_then(|e| e.dev.as_ref())
    }

    pub fn final_train_accuracy(&self) -> Option<f64> {
        self.epochs.last().and_then(|e| e.train_accuracy)
    }
}

/// Trains on `train`, selecting the epoch with the best F1 on `dev`.
pub fn train(config: &TrainConfig, train: &Dataset, dev: Option<&Dataset>, vocab_size: usize) -> Result<TrainOutcome> {
    config.validate()?;
    let mut trainer = Trainer::for_dataset(config.clone(), train, vocab_size)?;
    let mut steps = Vec::new();
    let mut epochs = Vec::new();
    let mut best: Option<(f64, usize, crate::params::ParamStore)> = None;
    for epoch in 1..=config.epochs {
        let records = trainer.epoch(train, epoch)?;
        let mean_loss = records.iter().map(|r| r.total).sum::<f64>() / records.len().max(1) as f64;
        steps.extend(records);
        let train_accuracy = if config.eval_train || config.stop_at_train_accuracy.is_some() {
            Some(evaluate(&trainer.model, train, config.averaging)?.0.accuracy)
        } else {
            None
        };
        let dev_report = match dev {
            Some(d) => Some(evaluate(&trainer.model, d, config.averaging)?.0),
            None => None,
        };
        let score = dev_report.as_ref().map_or(f64::NEG_INFINITY, |r| r.f1);
        if dev_report.is_none() || best.as_ref().is_none_or(|(b, _, _)| score > *b) {
            best = Some((score, epoch, trainer.model.store.clone()));
        }
        log::info!(
            "epoch {epoch}: loss {mean_loss:.4} train acc {} dev f1 {}",
            train_accuracy.map_or("-".into(), |a| format!("{a:.4}")),
            dev_report.as_ref().map_or("-".into(), |r| format!("{:.4}", r.f1))
        );
        epochs.push(EpochRecord { epoch, mean_loss, train_accuracy, dev: dev_report });
        if let (Some(target), Some(acc)) = (config.stop_at_train_accuracy, train_accuracy) {
            if acc >= target {
                break;
            }
        }
    }
    let (_, best_epoch, store) = best.expect("at least one epoch ran");
    let mut model = trainer.model;
    model.store = store;
    Ok(TrainOutcome { model, steps, epochs, best_epoch })
}

/// Writes the step log as CSV: `step,l_d,l_s,l_c,total,lr`.
pub fn write_train_log(path: &Path, steps: &[StepRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    for s in steps {
        w.serialize(s).map_err(|e| Error::io(path, e.into()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Trains on a dataset directory and writes `model.json`, the step log and the
/// per-epoch metrics to `out_dir`.
pub fn train_to_dir(config: &TrainConfig, bundle: &DatasetBundle, out_dir: &Path) -> Result<TrainOutcome> {
    let outcome = train(config, &bundle.train, Some(&bundle.dev), bundle.vocab.len())?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    checkpoint::save(&outcome.model, config.seed, Some(&bundle.vocab), out_dir)?;
    write_train_log(&out_dir.join(TRAIN_LOG_FILE), &outcome.steps)?;
    let path = out_dir.join("epochs.json");
    let mut f = File::create(&path).map_err(|e| Error::io(&path, e))?;
    let json = serde_json::to_string_pretty(&outcome.epochs).expect("epoch records serialize");
    f.write_all(json.as_bytes()).map_err(|e| Error::io(&path, e))?;
    Ok(outcome)
}

/// The dataset named by `config.data_dir`, or a generated one.
pub fn load_or_generate(config: &TrainConfig) -> Result<DatasetBundle> {
    match (&config.data_dir, &config.synthetic) {
        (Some(dir), _) => DatasetBundle::load_dir(dir),
        (None, spec) => Ok(crate::data::generate_synthetic(&spec.clone().unwrap_or_default())?.into_bundle()),
    }
}
