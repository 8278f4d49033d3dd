//! Acceptance gate. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any fails. Numeric arguments select criteria:
//! `cargo test --release --test acceptance -- 2 5`.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use mmre::autograd::Graph;
use mmre::data::{generate_synthetic, parse_relation_types, Sample, SplitSizes, SyntheticSpec};
use mmre::encoder::{BackboneConfig, EncoderInput};
use mmre::experiments::{run_variants, ExperimentConfig, Variant};
use mmre::fusion::{dual_gated_fusion, DeltaWeight, FusionConfig, FusionInputs, FusionParameters, I2tProvider, COSINE_SUM_EPS};
use mmre::gradcheck::{self, GradCheckConfig};
use mmre::metrics::{evaluate, Averaging};
use mmre::model::{InputDims, Model};
use mmre::objectives::{distribution_consistency, hardest_negatives, self_identification, ConsistencyMode, SelfIdMode};
use mmre::params::{ParamGroup, ParamStore};
use mmre::tensor::Matrix;
use mmre::train::{train, TrainConfig, Trainer};

type Verdict = Result<String, String>;

fn check(ok: bool, detail: String) -> Verdict {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------------------
// 1. gradients

fn gradient_suite() -> Verdict {
    let report = gradcheck::run(&GradCheckConfig::default()).map_err(|e| e.to_string())?;
    let groups = [ParamGroup::Projections, ParamGroup::Prefixes, ParamGroup::Fusion, ParamGroup::Decoder];
    let covered = groups.iter().all(|g| report.groups.iter().any(|c| c.group == *g && c.coords > 0));
    let worst = report
        .groups
        .iter()
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
        .map(|c| format!("{} / {}", c.term.label(), c.group.as_str()))
        .unwrap_or_default();
    check(
        covered && report.passes(1e-5) && report.runtime < Duration::from_secs(120),
        format!(
            "max rel error {:.2e} (worst {worst}), frozen grad {:.1e}, {} groups, {:.1?}",
            report.max_rel_error(),
            report.frozen_grad_max,
            report.groups.len(),
            report.runtime
        ),
    )
}

// ---------------------------------------------------------------------------
// 2. fusion oracle

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

fn affine(x: &[f64], w: &Matrix, b: &Matrix) -> Vec<f64> {
    (0..w.cols()).map(|j| b.get(0, j) + (0..w.rows()).map(|i| x[i] * w.get(i, j)).sum::<f64>()).collect()
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

struct OracleOut {
    alpha: Vec<f64>,
    gamma: Vec<f64>,
    fused: Vec<f64>,
}

/// Straight-line evaluation of the fusion chain from raw parameter values.
fn fusion_oracle(store: &ParamStore, p: &FusionParameters, delta: f64, h_t: &[f64], h_o: &[Vec<f64>], h_i: &[f64]) -> OracleOut {
    let v = |id| store.value(id);
    let cosines: Vec<f64> = h_o.iter().map(|o| cos(h_t, o)).collect();
    let total: f64 = cosines.iter().sum();
    let alpha: Vec<f64> = if total.abs() < COSINE_SUM_EPS {
        vec![1.0 / h_o.len() as f64; h_o.len()]
    } else {
        cosines.iter().map(|c| c / total).collect()
    };
    let n = h_t.len();
    let pooled: Vec<f64> = (0..n).map(|d| alpha.iter().zip(h_o).map(|(a, o)| a * o[d]).sum()).collect();
    let beta = affine(&pooled, v(p.beta.w), v(p.beta.b));
    let gamma: Vec<f64> = affine(h_i, v(p.gamma.w), v(p.gamma.b)).into_iter().map(f64::tanh).collect();
    let gated: Vec<f64> = (0..n).map(|d| h_t[d] * gamma[d] + beta[d]).collect();
    let hidden: Vec<f64> = affine(&gated, v(p.mlp.hidden.w), v(p.mlp.hidden.b)).into_iter().map(gelu).collect();
    let update = affine(&hidden, v(p.mlp.out.w), v(p.mlp.out.b));
    let i2t_hidden: Vec<f64> = affine(h_i, v(p.i2t.hidden.w), v(p.i2t.hidden.b)).into_iter().map(gelu).collect();
    let i2t = affine(&i2t_hidden, v(p.i2t.out.w), v(p.i2t.out.b));
    let fused = (0..n).map(|d| update[d] + h_t[d] + delta * i2t[d]).collect();
    OracleOut { alpha, gamma, fused }
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn fusion_oracle_equivalence() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (n, k) = (12, 5);
    let mut worst: f64 = 0.0;
    let mut alpha_ok = true;
    let mut gamma_ok = true;
    for trial in 0..1000 {
        let delta = rng.random_range(0.0..=1.0);
        let config = FusionConfig { delta: DeltaWeight::Scalar(delta), ..Default::default() };
        let mut store = ParamStore::new();
        let params = FusionParameters::new(&mut store, &config, n, &mut rng);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let len = store.value(id).len();
            let fresh = random_vec(&mut rng, len, 0.4);
            store.value_mut(id).data_mut().copy_from_slice(&fresh);
        }
        let h_t = random_vec(&mut rng, n, 1.0);
        let h_o: Vec<Vec<f64>> = (0..k).map(|_| random_vec(&mut rng, n, 1.0)).collect();
        let h_i = random_vec(&mut rng, n, 1.0);

        let mut g = Graph::new(&store);
        let vt = g.input(Matrix::row_vector(h_t.clone()));
        let vo = g.input(Matrix::from_rows(&h_o));
        let vi = g.input(Matrix::row_vector(h_i.clone()));
        let inputs = FusionInputs { h_t: vt, h_o: vo, h_i: vi, id: "x" };
        let vars = dual_gated_fusion(&mut g, &params, &config, &I2tProvider::Learned, inputs).map_err(|e| e.to_string())?;
        let alpha = g.value(vars.alpha).data();
        let gamma = g.value(vars.gamma).data();
        let sum: f64 = alpha.iter().sum();
        alpha_ok &= vars.uniform_fallback || (sum - 1.0).abs() <= 1e-6;
        gamma_ok &= gamma.iter().all(|&x| x > -1.0 && x < 1.0);

        if trial < 100 {
            let oracle = fusion_oracle(&store, &params, delta, &h_t, &h_o, &h_i);
            let diff = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            worst = worst
                .max(diff(alpha, &oracle.alpha))
                .max(diff(gamma, &oracle.gamma))
                .max(diff(g.value(vars.fused).data(), &oracle.fused));
        }
    }
    check(
        worst <= 1e-10 && alpha_ok && gamma_ok,
        format!("max |graph - oracle| {worst:.2e} over 100; alpha sums ok {alpha_ok}, gamma in (-1,1) {gamma_ok} over 1000"),
    )
}

// ---------------------------------------------------------------------------
// 3. stage causality

struct Encoded {
    objects: Vec<f64>,
    image: Vec<f64>,
    text: Matrix,
}

fn encode(model: &Model, s: &Sample) -> Encoded {
    let mut g = Graph::new(&model.store);
    let out = model.encoder.encode(&mut g, &EncoderInput::from_sample(s, model.config.encoder.max_objects)).expect("encodes");
    Encoded { objects: g.value(out.objects).data().to_vec(), image: g.value(out.image).data().to_vec(), text: g.value(out.text).clone() }
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

fn stage_causality() -> Verdict {
    let data = generate_synthetic(&SyntheticSpec { n_samples: 50, ..Default::default() }).map_err(|e| e.to_string())?;
    let dims = InputDims::from_sample(&data.dataset.samples[0], data.vocab.len());
    let model = Model::new(&TrainConfig::default().model_config(), data.dataset.schema.clone(), dims, 9).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut failures = Vec::new();
    let mut causal_ok = true;
    for (trial, s) in data.dataset.samples.iter().enumerate() {
        let base = encode(&model, s);

        let mut img = s.clone();
        img.image_feature.data_mut().iter_mut().for_each(|x| *x = rng.sample(StandardNormal));
        let after_image = encode(&model, &img);
        if bits(&after_image.objects) != bits(&base.objects) {
            failures.push(format!("trial {trial}: objects moved with image"));
        }

        let free: Vec<usize> =
            (0..s.tokens.len()).filter(|&i| !s.head_span.contains(i) && !s.tail_span.contains(i)).collect();
        let j = free[rng.random_range(0..free.len())];
        let mut txt = s.clone();
        txt.tokens[j] = if txt.tokens[j] == 2 { 3 } else { 2 };
        let after_text = encode(&model, &txt);
        if bits(&after_text.objects) != bits(&base.objects) || bits(&after_text.image) != bits(&base.image) {
            failures.push(format!("trial {trial}: object or image states moved with text"));
        }
        for row in 0..s.tokens.len() {
            let same = bits(after_text.text.row(row)) == bits(base.text.row(row));
            if (row < j && !same) || (row == j && same) {
                causal_ok = false;
            }
        }
    }
    check(
        failures.is_empty() && causal_ok,
        format!("50 trials, {} violations, causal token test {}", failures.len(), if causal_ok { "exact" } else { "broken" }),
    )
}

// ---------------------------------------------------------------------------
// 4. frozen backbone

fn frozen_backbone() -> Verdict {
    let data = generate_synthetic(&SyntheticSpec { n_samples: 200, ..Default::default() }).map_err(|e| e.to_string())?;
    let config = TrainConfig { batch_size: 10, ..Default::default() };
    let dims = InputDims::from_sample(&data.dataset.samples[0], data.vocab.len());
    let model = Model::new(&config.model_config(), data.dataset.schema.clone(), dims, 4).map_err(|e| e.to_string())?;
    let before = model.store.clone();
    let mut trainer = Trainer::new(config, model).map_err(|e| e.to_string())?;
    let mut epoch = 0;
    while trainer.steps() < 100 {
        epoch += 1;
        let order: Vec<usize> = (0..data.dataset.len()).collect();
        for chunk in order.chunks(10) {
            if trainer.steps() == 100 {
                break;
            }
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &data.dataset.samples[(i + epoch) % data.dataset.len()]).collect();
            trainer.step(&batch).map_err(|e| e.to_string())?;
        }
    }
    let after = &trainer.model.store;
    let backbone = before.group_ids(ParamGroup::Backbone);
    let identical = backbone.iter().all(|&id| bits(before.value(id).data()) == bits(after.value(id).data()));
    let moved = before
        .iter()
        .filter(|(_, p)| p.trainable)
        .filter(|(id, p)| bits(p.value.data()) != bits(after.value(*id).data()))
        .count();
    check(
        identical && moved > 0,
        format!("{} backbone tensors bit-identical after {} steps: {identical}; {moved} trainable tensors moved", backbone.len(), trainer.steps()),
    )
}

// ---------------------------------------------------------------------------
// 5. loss identities

fn random_distribution(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(1e-3..1.0f64).powi(3)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|x| x / total).collect()
}

fn brute_force_negatives(plain: &Matrix, fused: &Matrix) -> Vec<(usize, usize)> {
    let b = plain.rows();
    (0..b)
        .map(|i| {
            let (mut best_p, mut best_f) = (None::<(usize, f64)>, None::<(usize, f64)>);
            for j in 0..b {
                if j == i {
                    continue;
                }
                let sp = cos(plain.row(j), fused.row(i));
                let sf = cos(plain.row(i), fused.row(j));
                if best_p.is_none_or(|(_, s)| sp > s) {
                    best_p = Some((j, sp));
                }
                if best_f.is_none_or(|(_, s)| sf > s) {
                    best_f = Some((j, sf));
                }
            }
            (best_p.unwrap().0, best_f.unwrap().0)
        })
        .collect()
}

fn loss_identities() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst_same: f64 = 0.0;
    let mut min_kl = f64::INFINITY;
    for _ in 0..1000 {
        let n = rng.random_range(2..12);
        let p = random_distribution(&mut rng, n);
        let q = random_distribution(&mut rng, n);
        worst_same = worst_same.max(distribution_consistency(&p, &p, ConsistencyMode::Kl).map_err(|e| e.to_string())?.abs());
        min_kl = min_kl.min(distribution_consistency(&p, &q, ConsistencyMode::Kl).map_err(|e| e.to_string())?);
    }
    let mut min_ls = f64::INFINITY;
    let mut mismatches = 0;
    for _ in 0..50 {
        let b = rng.random_range(2..=32);
        let n = rng.random_range(2..10);
        let plain = Matrix::from_vec(b, n, random_vec(&mut rng, b * n, 1.0));
        let fused = Matrix::from_vec(b, n, random_vec(&mut rng, b * n, 1.0));
        let negatives = hardest_negatives(&plain, &fused).map_err(|e| e.to_string())?;
        if negatives != brute_force_negatives(&plain, &fused) {
            mismatches += 1;
        }
        for mode in [SelfIdMode::MarginTriplet, SelfIdMode::UnmarginedHinge] {
            min_ls = min_ls.min(self_identification(&plain, &fused, &negatives, 0.2, mode).map_err(|e| e.to_string())?);
        }
    }
    check(
        worst_same <= 1e-9 && min_kl >= 0.0 && min_ls >= 0.0 && mismatches == 0,
        format!("|KL(p,p)| <= {worst_same:.1e}, min KL {min_kl:.2e}, min L_s {min_ls:.2e}, negative mismatches {mismatches}/50"),
    )
}

// ---------------------------------------------------------------------------
// 6. type mask

fn type_mask_soundness() -> Verdict {
    let bundle = generate_synthetic(&SyntheticSpec::default()).map_err(|e| e.to_string())?.into_bundle();
    let config = TrainConfig { epochs: 2, ..Default::default() };
    let outcome = train(&config, &bundle.train, None, bundle.vocab.len()).map_err(|e| e.to_string())?;
    let (report, records) = evaluate(&outcome.model, &bundle.test, Averaging::Micro).map_err(|e| e.to_string())?;
    let schema = &bundle.schema;
    let admits = |s: &Sample, name: &str| match parse_relation_types(name) {
        Some((h, t)) => h == schema.type_name(s.head_type) && t == schema.type_name(s.tail_type),
        None => name == "None",
    };
    let mut in_set = 0;
    let mut leaks = 0;
    for (s, r) in bundle.test.samples.iter().zip(&records) {
        if admits(s, &r.predicted) {
            in_set += 1;
        }
        leaks += r.masked_probs.iter().enumerate().filter(|&(rel, &p)| !admits(s, schema.relation_name(rel)) && p != 0.0).count();
    }
    let n = bundle.test.len();
    check(
        in_set == n && leaks == 0 && report.mask_violations == 0,
        format!("{in_set}/{n} predictions type-compatible, {leaks} non-zero incompatible probabilities"),
    )
}

// ---------------------------------------------------------------------------
// 7. learnability

fn learnability_data() -> mmre::data::DatasetBundle {
    let spec = SyntheticSpec {
        n_samples: 1200,
        noise_std: 0.1,
        n_relations: 8,
        n_types: 4,
        splits: Some(SplitSizes { train: 1000, dev: 200, test: 0 }),
        ..Default::default()
    };
    generate_synthetic(&spec).expect("valid spec").into_bundle()
}

fn learnability() -> Verdict {
    let bundle = learnability_data();
    let config = TrainConfig { epochs: 100, eval_train: true, stop_at_train_accuracy: Some(0.95), ..Default::default() };
    let start = Instant::now();
    let outcome = train(&config, &bundle.train, Some(&bundle.dev), bundle.vocab.len()).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let train_acc = outcome.final_train_accuracy().unwrap_or(0.0);
    let dev_f1 = outcome.best_dev().map_or(0.0, |r| r.f1);

    let replay = TrainConfig { epochs: 2, stop_at_train_accuracy: None, eval_train: false, ..config.clone() };
    let again = train(&replay, &bundle.train, Some(&bundle.dev), bundle.vocab.len()).map_err(|e| e.to_string())?;
    let deterministic = again.steps[..] == outcome.steps[..again.steps.len()];
    check(
        train_acc >= 0.95 && dev_f1 >= 0.85 && elapsed < Duration::from_secs(900) && deterministic,
        format!(
            "train acc {train_acc:.3} after {} epochs, dev f1 {dev_f1:.3}, {elapsed:.1?}, replay identical {deterministic}",
            outcome.epochs.len()
        ),
    )
}

// ---------------------------------------------------------------------------
// 8. ablation direction

fn ablation_direction() -> Verdict {
    let bundle = learnability_data();
    let config = ExperimentConfig::default();
    let rows = run_variants(&config, &bundle, &[Variant::NoPrefixes, Variant::NoFusion]).map_err(|e| e.to_string())?;
    let full = rows[0].mean_dev_f1();
    let mut detail = format!("full {full:.4}");
    let mut worst_gap: f64 = 0.0;
    for r in &rows[1..] {
        let gap = r.mean_dev_f1() - full;
        worst_gap = worst_gap.max(gap);
        detail += &format!(", {} {:.4} ({:+.4})", r.label, r.mean_dev_f1(), -gap);
        if gap > 0.0 {
            detail += " [direction violated]";
        }
    }
    check(worst_gap <= 0.02, detail)
}

// ---------------------------------------------------------------------------
// 9. experiment runners through the command line

fn parse_table(path: &Path) -> Result<Vec<csv::StringRecord>, String> {
    let mut reader = csv::ReaderBuilder::new().delimiter(b'\t').from_path(path).map_err(|e| e.to_string())?;
    let header = reader.headers().map_err(|e| e.to_string())?.clone();
    if header.iter().collect::<Vec<_>>() != mmre::experiments::TSV_HEADER.split('\t').collect::<Vec<_>>() {
        return Err(format!("unexpected header {header:?}"));
    }
    reader.records().map(|r| r.map_err(|e| e.to_string())).collect()
}

fn identities_hold(rows: &[csv::StringRecord]) -> bool {
    rows.iter().all(|r| {
        let f = |i: usize| r[i].parse::<f64>().unwrap_or(f64::NAN);
        let (acc, p, rec, f1) = (f(2), f(3), f(4), f(5));
        let in_unit = [acc, p, rec, f1].iter().all(|x| (0.0..=1.0).contains(x));
        let harmonic = if p + rec > 0.0 { 2.0 * p * rec / (p + rec) } else { 0.0 };
        in_unit && (f1 - harmonic).abs() < 1e-5 && &r[7] == "0"
    })
}

fn experiment_runners() -> Verdict {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let bin = env!("CARGO_BIN_EXE_mmre");
    let mut outputs = Vec::new();
    for (cmd, extra) in [("variants", vec![]), ("orders", vec![]), ("image-prop", vec!["--props", "0,0.5,1"])] {
        let out = dir.path().join(format!("{cmd}.tsv"));
        let config = serde_json::json!({
            "epochs": 1,
            "batch_size": 20,
            "backbone": BackboneConfig { model_dim: 16, ffn_dim: 32, ..Default::default() },
            "synthetic": SyntheticSpec { n_samples: 80, ..Default::default() },
            "seeds": [13],
            "out": out,
        });
        let config_path = dir.path().join(format!("{cmd}.json"));
        std::fs::write(&config_path, config.to_string()).map_err(|e| e.to_string())?;
        let status = Command::new(bin)
            .arg(cmd)
            .arg("--config")
            .arg(&config_path)
            .args(&extra)
            .output()
            .map_err(|e| e.to_string())?;
        if !status.status.success() {
            return Err(format!("{cmd} failed: {}", String::from_utf8_lossy(&status.stderr)));
        }
        outputs.push((cmd, parse_table(&out)?));
    }
    let counts: Vec<usize> = outputs.iter().map(|(_, rows)| rows.len()).collect();
    let variants = &outputs[0].1;
    let expected: Vec<String> = std::iter::once(Variant::Full).chain(Variant::ABLATIONS).map(|v| v.to_string()).collect();
    let labels_ok = variants.iter().map(|r| r[0].to_string()).collect::<Vec<_>>() == expected;
    let default_first = &outputs[1].1[0][0] == "I_o→I_i→I_t";
    let props_ok = outputs[2].1.iter().map(|r| r[0].to_string()).collect::<Vec<_>>() == ["0", "0.5", "1"];
    let identities = outputs.iter().all(|(_, rows)| identities_hold(rows));
    check(
        counts == [14, 6, 3] && labels_ok && default_first && props_ok && identities,
        format!(
            "rows variants/orders/image-prop = {counts:?} (full + 13 ablations), labels {labels_ok}, default order first {default_first}, proportions {props_ok}, identities {identities}"
        ),
    )
}

// ---------------------------------------------------------------------------

fn main() {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [(usize, &str, fn() -> Verdict); 9] = [
        (1, "gradient suite", gradient_suite),
        (2, "fusion oracle equivalence", fusion_oracle_equivalence),
        (3, "stage causality", stage_causality),
        (4, "frozen backbone", frozen_backbone),
        (5, "loss identities", loss_identities),
        (6, "type-mask soundness", type_mask_soundness),
        (7, "learnability", learnability),
        (8, "ablation direction", ablation_direction),
        (9, "experiment runners", experiment_runners),
    ];
    let mut failed = 0;
    for (id, name, run) in criteria {
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let verdict = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = start.elapsed().as_secs_f64();
        match verdict {
            Ok(detail) => println!("criterion {id} {name}: PASS ({detail}) [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("criterion {id} {name}: FAIL ({detail}) [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
