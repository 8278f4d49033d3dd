//! Decodes relation distributions restricted to the relations a type pair
//! admits; every other relation gets probability exactly zero.

use mmre::data::{generate_synthetic, SyntheticSpec};
use mmre::model::{InputDims, Model, ModelConfig};

fn main() -> mmre::Result<()> {
    let data = generate_synthetic(&SyntheticSpec { n_samples: 6, ..Default::default() })?;
    let schema = data.dataset.schema.clone();
    let model = Model::new(&ModelConfig::default(), schema.clone(), InputDims::from_sample(&data.dataset.samples[0], data.vocab.len()), 2)?;
    for s in &data.dataset.samples {
        let p = model.predict(s)?;
        println!("{} ({} -> {}):", s.id, schema.type_name(s.head_type), schema.type_name(s.tail_type));
        for (r, prob) in p.masked_probs.iter().enumerate() {
            let mark = if schema.is_compatible(s.head_type, s.tail_type, r) { " " } else { "x" };
            println!("  {mark} {:<24} {prob:.4}", schema.relation_name(r));
        }
        println!("  predicted {}", schema.relation_name(p.predicted));
    }
    Ok(())
}
