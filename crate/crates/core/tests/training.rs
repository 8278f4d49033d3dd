use mmre::data::{batch_iterator, generate_synthetic, Sample, SyntheticSpec};
use mmre::train::{train, TrainConfig, Trainer};

fn data(n: usize) -> mmre::data::SyntheticData {
    generate_synthetic(&SyntheticSpec { n_samples: n, ..Default::default() }).unwrap()
}

/// Training-set loss after every optimizer step, evaluated without dropout over all samples.
fn loss_curve(config: &TrainConfig, n: usize) -> Vec<f64> {
    let d = data(n);
    let all: Vec<&Sample> = d.dataset.samples.iter().collect();
    let mut trainer = Trainer::for_dataset(config.clone(), &d.dataset, d.vocab.len()).unwrap();
    let mut curve = vec![trainer.batch_loss(&all, false).unwrap().total];
    for epoch in 0..config.epochs {
        let seed = config.seed.wrapping_add(epoch as u64);
        for batch in batch_iterator(&d.dataset, config.batch_size, seed, true, true).unwrap() {
            let samples: Vec<&Sample> = batch.indices.iter().map(|&i| &d.dataset.samples[i]).collect();
            trainer.step(&samples).unwrap();
            curve.push(trainer.batch_loss(&all, false).unwrap().total);
        }
    }
    curve
}

#[test]
fn train_loss_mostly_decreases_over_two_epochs() {
    let config = TrainConfig { epochs: 2, batch_size: 5, ..Default::default() };
    let curve = loss_curve(&config, 50);
    let windows: Vec<bool> = curve.windows(2).map(|w| w[1] <= w[0]).collect();
    let share = windows.iter().filter(|&&ok| ok).count() as f64 / windows.len() as f64;
    assert_eq!(windows.len(), 20);
    assert!(share >= 0.9, "non-increasing in {share:.2} of windows: {curve:?}");
    assert!(curve.last() < curve.first());
}

#[test]
fn identical_configs_give_identical_logs_and_parameters() {
    let d = data(60);
    let config = TrainConfig { epochs: 2, batch_size: 12, ..Default::default() };
    let a = train(&config, &d.dataset, None, d.vocab.len()).unwrap();
    let b = train(&config, &d.dataset, None, d.vocab.len()).unwrap();
    let bits = |xs: &[mmre::train::StepRecord]| xs.iter().map(|s| s.total.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a.steps), bits(&b.steps));
    let params = |m: &mmre::model::Model| -> Vec<u64> {
        m.store.iter().flat_map(|(id, _)| m.store.value(id).data().iter().map(|x| x.to_bits()).collect::<Vec<_>>()).collect()
    };
    assert_eq!(params(&a.model), params(&b.model));
}

#[test]
fn different_seeds_diverge() {
    let d = data(40);
    let base = TrainConfig { epochs: 1, batch_size: 10, ..Default::default() };
    let a = train(&base, &d.dataset, None, d.vocab.len()).unwrap();
    let b = train(&TrainConfig { seed: 42, ..base }, &d.dataset, None, d.vocab.len()).unwrap();
    assert_ne!(a.steps[0].total, b.steps[0].total);
}

#[test]
fn steps_count_batches_across_epochs() {
    let d = data(45);
    let config = TrainConfig { epochs: 3, batch_size: 10, ..Default::default() };
    let out = train(&config, &d.dataset, None, d.vocab.len()).unwrap();
    assert_eq!(out.steps.len(), 15);
    assert_eq!(out.epochs.len(), 3);
    assert!(out.steps.windows(2).all(|w| w[1].step == w[0].step + 1));
}
