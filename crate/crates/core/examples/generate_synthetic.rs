//! Generates a synthetic dataset with a planted visual rule and writes it as a
//! dataset directory.
//!
//! `cargo run --example generate_synthetic -- [out_dir]`

use mmre::data::{generate_synthetic, SyntheticSpec};

fn main() -> mmre::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "synthetic_data".into());
    let spec = SyntheticSpec { n_samples: 400, ..Default::default() };
    let data = generate_synthetic(&spec)?;
    println!("relations: {:?}", data.dataset.schema.relations());
    println!("vocabulary: {} tokens", data.vocab.len());
    for (name, n) in data.dataset.relation_counts() {
        println!("  {name:<28} {n}");
    }
    let s = &data.dataset.samples[0];
    println!(
        "first sample: {} tokens, head {:?}, tail {:?}, image {:?}, {} objects",
        s.tokens.len(),
        s.head_span,
        s.tail_span,
        s.image_feature.shape(),
        s.objects.len()
    );
    let bundle = data.into_bundle();
    bundle.save_dir(&out)?;
    println!("train/dev/test = {}/{}/{} written to {out}", bundle.train.len(), bundle.dev.len(), bundle.test.len());
    Ok(())
}
