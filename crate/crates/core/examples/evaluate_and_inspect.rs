//! Writes a small corpus, evaluates the identity and ground-truth fields on
//! it, and writes inspection maps for one field.
//!
//! Run with `cargo run --release --example evaluate_and_inspect`.

use weakreg::harness::{evaluate_fields, inspect_command, synth_corpus, write_corpus, PhantomSpec};
use weakreg::volume::write_volume;
use weakreg::DisplacementField;

fn main() -> weakreg::Result<()> {
    let dir = std::env::temp_dir().join("weakreg_evaluate");
    let spec = PhantomSpec::default();
    let cases = synth_corpus(&spec, 3)?;
    let manifest = write_corpus(&dir.join("corpus"), Some(&spec), &cases, vec![], vec![0, 1, 2])?;
    println!("corpus manifest: {}", manifest.display());

    let identity: Vec<DisplacementField> = cases.iter().map(|c| DisplacementField::zeros(*c.fixed.meta())).collect();
    let truth: Vec<DisplacementField> = cases.iter().map(|c| c.ground_truth.clone().expect("synthetic")).collect();
    for (name, fields) in [("identity", &identity), ("ground truth", &truth)] {
        let r = evaluate_fields(&cases, fields, None)?;
        println!("{name}:");
        print!("{}", r.percentile_csv());
    }

    let ddf = dir.join("truth0");
    write_volume(truth[0].clone(), &ddf)?;
    let summary = inspect_command(&ddf, &dir.join("inspect"))?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}
