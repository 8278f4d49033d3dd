//! Compares analytic gradients with central finite differences per loss term
//! and parameter group.
//!
//! `cargo run --release --example gradient_check -- [seed]`

use mmre::gradcheck::{run, GradCheckConfig};

fn main() -> mmre::Result<()> {
    let seed = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(0);
    let report = run(&GradCheckConfig { seed, ..Default::default() })?;
    print!("{}", report.to_tsv());
    println!("max relative error {:.3e} in {:.1?}", report.max_rel_error(), report.runtime);
    Ok(())
}
