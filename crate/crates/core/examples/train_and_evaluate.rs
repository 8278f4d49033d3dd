//! Trains the full model on a generated dataset and reports dev metrics.
//!
//! `cargo run --release --example train_and_evaluate -- [epochs]`

use mmre::data::{generate_synthetic, SplitSizes, SyntheticSpec};
use mmre::metrics::{evaluate, Averaging};
use mmre::train::{train, TrainConfig};

fn main() -> mmre::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let epochs = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(20);
    let spec = SyntheticSpec {
        n_samples: 1400,
        splits: Some(SplitSizes { train: 1000, dev: 200, test: 200 }),
        ..Default::default()
    };
    let bundle = generate_synthetic(&spec)?.into_bundle();
    let config = TrainConfig { epochs, eval_train: true, stop_at_train_accuracy: Some(0.95), ..Default::default() };

    let start = std::time::Instant::now();
    let outcome = train(&config, &bundle.train, Some(&bundle.dev), bundle.vocab.len())?;
    println!("trained {} epochs in {:.1?}", outcome.epochs.len(), start.elapsed());
    for e in &outcome.epochs {
        let dev = e.dev.as_ref().map_or(f64::NAN, |d| d.f1);
        println!("epoch {:3}  loss {:.4}  train acc {:.3}  dev f1 {dev:.3}", e.epoch, e.mean_loss, e.train_accuracy.unwrap_or(f64::NAN));
    }
    let (test, _) = evaluate(&outcome.model, &bundle.test, Averaging::Micro)?;
    println!("test: acc {:.3} p {:.3} r {:.3} f1 {:.3}", test.accuracy, test.precision, test.recall, test.f1);
    Ok(())
}
