//! Trains one model per ordering of the three input segments.
//!
//! `cargo run --release --example input_orders -- [epochs]`

use mmre::data::SyntheticSpec;
use mmre::experiments::{emit_table, load_bundle, run_orders, ExperimentConfig};
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
    emit_table(&run_orders(&config, &bundle)?, None)
}
