use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mmre::autograd::Graph;
use mmre::data::{generate_synthetic, DatasetBundle, RelationSchema, SyntheticSpec};
use mmre::decoder::RelationPrediction;
use mmre::encoder::StageOrder;
use mmre::experiments::with_image_proportion;
use mmre::fusion::{dual_gated_fusion, FusionConfig, FusionInputs, FusionParameters, I2tProvider};
use mmre::metrics::{score, Averaging};
use mmre::objectives::{
    distribution_consistency, hardest_negatives, joint, self_identification, ConsistencyMode, LossWeights, SelfIdMode,
};
use mmre::params::ParamStore;
use mmre::tensor::Matrix;

fn schema() -> RelationSchema {
    let relations = ["None", "/a/b/r1", "/a/b/r2", "/b/a/r3", "/a/a/r4", "/b/b/r5"].map(String::from).to_vec();
    RelationSchema::new(relations, vec!["a".into(), "b".into()], &[]).unwrap()
}

fn distribution(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(1e-6..1.0f64, len).prop_map(|v| {
        let total: f64 = v.iter().sum();
        v.into_iter().map(|x| x / total).collect()
    })
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-3.0..3.0f64, rows * cols).prop_map(move |d| Matrix::from_vec(rows, cols, d))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn attention_weights_sum_to_one_and_global_gate_is_bounded(
        h_t in prop::collection::vec(-2.0..2.0f64, 6).prop_filter("non-zero", |v| v.iter().any(|x| x.abs() > 1e-3)),
        k in 1usize..6,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let config = FusionConfig::default();
        let mut store = ParamStore::new();
        let params = FusionParameters::new(&mut store, &config, 6, &mut rng);
        let mut g = Graph::new(&store);
        let objects: Vec<Vec<f64>> = (0..k).map(|i| (0..6).map(|d| ((seed as f64) * 0.37 + (i * 7 + d) as f64).sin()).collect()).collect();
        let vt = g.input(Matrix::row_vector(h_t));
        let vo = g.input(Matrix::from_rows(&objects));
        let vi = g.input(Matrix::row_vector(objects[0].clone()));
        let vars = dual_gated_fusion(&mut g, &params, &config, &I2tProvider::Learned, FusionInputs { h_t: vt, h_o: vo, h_i: vi, id: "p" }).unwrap();
        let sum: f64 = g.value(vars.alpha).data().iter().sum();
        prop_assert!(vars.uniform_fallback || (sum - 1.0).abs() < 1e-6);
        prop_assert!(g.value(vars.gamma).data().iter().all(|x| x.abs() < 1.0));
    }

    #[test]
    fn masked_distribution_is_zero_outside_the_type_pair(
        logits in prop::collection::vec(-50.0..50.0f64, 6),
        head in 0usize..2,
        tail in 0usize..2,
    ) {
        let s = schema();
        let p = RelationPrediction::from_logits(logits, &s, head, tail, [vec![], vec![]]).unwrap();
        let allowed = s.allowed(head, tail);
        prop_assert!(allowed[p.predicted]);
        for (prob, ok) in p.masked_probs.iter().zip(allowed) {
            if !ok {
                prop_assert_eq!(*prob, 0.0);
            }
        }
        prop_assert!((p.masked_probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn kl_is_non_negative_and_zero_on_itself((p, q) in (2usize..10).prop_flat_map(|n| (distribution(n), distribution(n)))) {
        prop_assert!(distribution_consistency(&p, &q, ConsistencyMode::Kl).unwrap() >= 0.0);
        prop_assert!(distribution_consistency(&p, &p, ConsistencyMode::Kl).unwrap().abs() < 1e-9);
        let ce = distribution_consistency(&p, &q, ConsistencyMode::CrossEntropy).unwrap();
        let entropy = distribution_consistency(&p, &p, ConsistencyMode::CrossEntropy).unwrap();
        prop_assert!(ce >= entropy - 1e-9);
    }

    #[test]
    fn hardest_negatives_exclude_the_anchor_and_hinge_is_non_negative(
        (plain, fused) in (2usize..12, 2usize..6).prop_flat_map(|(b, n)| (matrix(b, n), matrix(b, n))),
        margin in 0.0..1.0f64,
    ) {
        let negatives = hardest_negatives(&plain, &fused).unwrap();
        for (i, &(a, b)) in negatives.iter().enumerate() {
            prop_assert!(a != i && b != i && a < plain.rows() && b < plain.rows());
        }
        for mode in [SelfIdMode::MarginTriplet, SelfIdMode::UnmarginedHinge] {
            prop_assert!(self_identification(&plain, &fused, &negatives, margin, mode).unwrap() >= 0.0);
        }
    }

    #[test]
    fn joint_total_is_the_weighted_sum(l in prop::array::uniform3(0.0..10.0f64), w in prop::array::uniform3(0.0..5.0f64)) {
        let weights = LossWeights { lambda_d: w[0], lambda_s: w[1], lambda_c: w[2], ..Default::default() };
        let r = joint(l[0], l[1], l[2], &weights);
        prop_assert_eq!(r.total, w[0] * l[0] + w[1] * l[1] + w[2] * l[2]);
    }

    #[test]
    fn metrics_satisfy_identities(pairs in prop::collection::vec((prop::option::of(0usize..6), 0usize..6), 0..60)) {
        let s = schema();
        for averaging in [Averaging::Micro, Averaging::Macro] {
            let r = score(&pairs, &s, averaging);
            prop_assert!(r.check_identities().is_ok());
        }
    }

    #[test]
    fn image_proportion_strips_the_complement(p in 0.0..=1.0f64, seed in any::<u64>()) {
        let data = generate_synthetic(&SyntheticSpec { n_samples: 30, ..Default::default() }).unwrap();
        let out = with_image_proportion(&data.dataset, p, seed).unwrap();
        let changed = out.samples.iter().zip(&data.dataset.samples).filter(|(a, b)| a != b).count();
        prop_assert_eq!(changed, ((1.0 - p) * 30.0).round() as usize);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn dataset_directory_round_trips(seed in any::<u64>()) {
        let bundle = generate_synthetic(&SyntheticSpec { n_samples: 20, seed, ..Default::default() }).unwrap().into_bundle();
        let dir = tempfile::tempdir().unwrap();
        bundle.save_dir(dir.path()).unwrap();
        let back = DatasetBundle::load_dir(dir.path()).unwrap();
        prop_assert_eq!(&back.vocab, &bundle.vocab);
        prop_assert_eq!(&back.train.samples, &bundle.train.samples);
        prop_assert_eq!(&back.test.samples, &bundle.test.samples);
    }
}

#[test]
fn every_stage_order_label_parses_back() {
    for order in StageOrder::ALL {
        assert_eq!(order.label().parse::<StageOrder>().unwrap(), order);
    }
    assert_eq!(StageOrder::ALL[0], StageOrder::DEFAULT);
    assert_eq!(StageOrder::DEFAULT.label(), "I_o→I_i→I_t");
}
