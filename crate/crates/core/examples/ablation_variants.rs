//! Trains the full model and the 13 ablation rows on a small generated
//! dataset and prints the table as TSV.
//!
//! `cargo run --release --example ablation_variants -- [epochs]`

use mmre::data::SyntheticSpec;
use mmre::experiments::{emit_table, load_bundle, run_variants, ExperimentConfig, Variant};
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
    let rows = run_variants(&config, &bundle, &Variant::ABLATIONS)?;
    emit_table(&rows, None)
}
