//! Runs the local and global gates on one encoded sample and prints the
//! object weights, the gate values and the size of the semantic term.

use mmre::autograd::Graph;
use mmre::data::{generate_synthetic, SyntheticSpec};
use mmre::fusion::{dual_gated_fusion, FusionInputs, FusionState};
use mmre::model::{InputDims, Model, ModelConfig};
use mmre::encoder::EncoderInput;
use mmre::tensor::norm;

fn main() -> mmre::Result<()> {
    let data = generate_synthetic(&SyntheticSpec { n_samples: 4, ..Default::default() })?;
    let sample = &data.dataset.samples[0];
    let config = ModelConfig::default();
    let model = Model::new(&config, data.dataset.schema.clone(), InputDims::from_sample(sample, data.vocab.len()), 5)?;

    let mut g = Graph::new(&model.store);
    let enc = model.encoder.encode(&mut g, &EncoderInput::from_sample(sample, config.encoder.max_objects))?;
    let inputs = FusionInputs { h_t: enc.text_pooled, h_o: enc.objects, h_i: enc.image_pooled, id: &sample.id };
    let vars = dual_gated_fusion(&mut g, &model.fusion, &config.fusion, &model.i2t, inputs)?;
    let state = FusionState::read(&g, &vars, &config.fusion);

    println!("alpha (sum {:.6}, uniform fallback {}):", state.alpha.iter().sum::<f64>(), state.uniform_fallback);
    for (k, a) in state.alpha.iter().enumerate() {
        println!("  object {k}: {a:+.4}");
    }
    let range = |v: &[f64]| v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    println!("beta  |.| = {:.4}", norm(&state.beta));
    println!("gamma range {:?}", range(&state.gamma));
    println!("text |.| = {:.4}, fused |.| = {:.4}", norm(g.value(enc.text_pooled).data()), norm(&state.fused));
    Ok(())
}
