//! Trains briefly, saves a checkpoint, reloads it and dumps the gate values
//! of one test sample as JSON.

use mmre::checkpoint;
use mmre::data::{generate_synthetic, SyntheticSpec};
use mmre::inspect::inspect_sample;
use mmre::train::{train, TrainConfig};

fn main() -> mmre::Result<()> {
    let bundle = generate_synthetic(&SyntheticSpec { n_samples: 200, ..Default::default() })?.into_bundle();
    let config = TrainConfig { epochs: 2, batch_size: 40, ..Default::default() };
    let outcome = train(&config, &bundle.train, Some(&bundle.dev), bundle.vocab.len())?;

    let dir = std::env::temp_dir().join("mmre_inspect_gates");
    let path = checkpoint::save(&outcome.model, config.seed, Some(&bundle.vocab), &dir)?;
    let loaded = checkpoint::load(&path)?;
    let dump = inspect_sample(&loaded.model, &bundle.test.samples[0])?;
    println!("{}", serde_json::to_string_pretty(&dump).expect("inspections serialize"));
    Ok(())
}
