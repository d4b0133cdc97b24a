//! Generates a few synthetic cases and reports how far apart the moving and
//! fixed labels start, and how well the ground-truth field aligns them.
//!
//! Run with `cargo run --release --example phantom_corpus`.

use weakreg::harness::{evaluate_fields, synth_corpus, PhantomSpec};
use weakreg::DisplacementField;

fn main() -> weakreg::Result<()> {
    let spec = PhantomSpec::default();
    let cases = synth_corpus(&spec, 4)?;
    let truth: Vec<DisplacementField> = cases.iter().map(|c| c.ground_truth.clone().expect("synthetic")).collect();
    let report = evaluate_fields(&cases, &truth, None)?;
    for (c, r) in cases.iter().zip(&report.cases) {
        println!(
            "case {}: {} landmarks, TRE {:.2} -> {:.2} mm, gland DSC {:.3} -> {:.3}, max |u| {:.2} mm",
            c.case_id,
            c.landmarks.len(),
            r.initial_tre.unwrap_or(f64::NAN),
            r.tre.unwrap_or(f64::NAN),
            r.initial_dsc.unwrap_or(f64::NAN),
            r.dsc.unwrap_or(f64::NAN),
            r.max_displacement_mm
        );
    }
    Ok(())
}
