//! Retrains with the visual features of a growing share of training samples
//! kept; the rest are zeroed.
//!
//! `cargo run --release --example image_proportion -- [epochs]`

use mmre::data::SyntheticSpec;
use mmre::experiments::{emit_table, load_bundle, run_image_proportions, ExperimentConfig};
use mmre::train::TrainConfig;

fn main() -> mmre::Result<()> {
    let epochs = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(3);
    let config = ExperimentConfig {
        train: TrainConfig {
            epochs,
            batch_size: 50,
            synthetic: Some(SyntheticSpec { n_samples: 300, ..Default::default() }),
            ..Default::default()
        },
        seeds: vec![13],
        out: None,
    };
    let bundle = load_bundle(&config)?;
    emit_table(&run_image_proportions(&config, &bundle, &[0.0, 0.5, 1.0])?, None)
}
