//! Computes the consistency, self-identification and classification losses
//! of one batch, with the hardest in-batch negatives used by the second.

use mmre::data::{generate_synthetic, Sample, SyntheticSpec};
use mmre::model::{InputDims, Model};
use mmre::train::{TrainConfig, Trainer};

fn main() -> mmre::Result<()> {
    let data = generate_synthetic(&SyntheticSpec { n_samples: 8, ..Default::default() })?;
    let config = TrainConfig { batch_size: 8, ..Default::default() };
    let dims = InputDims::from_sample(&data.dataset.samples[0], data.vocab.len());
    let model = Model::new(&config.model_config(), data.dataset.schema.clone(), dims, 3)?;
    let trainer = Trainer::new(config, model)?;
    let batch: Vec<&Sample> = data.dataset.samples.iter().collect();
    let (report, grads) = trainer.batch_gradients(&batch, false)?;
    let w = trainer.weights();
    println!("L_d {:.6} (x{})", report.l_d, w.lambda_d);
    println!("L_s {:.6} (x{})", report.l_s, w.lambda_s);
    println!("L_c {:.6} (x{})", report.l_c, w.lambda_c);
    println!("total {:.6}, gradient norm {:.4}", report.total, grads.global_norm());
    for (i, (xn, xtn)) in report.hardest_negatives.iter().enumerate() {
        println!("  anchor {i}: hardest plain {xn}, hardest fused {xtn}");
    }
    Ok(())
}
