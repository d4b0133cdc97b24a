//! Checks that two-stage minibatch sampling (an image pair uniformly, then
//! one of its label pairs uniformly) gives an unbiased gradient of the
//! corpus objective, by enumeration and by Monte Carlo.
//!
//! Run with `cargo run --release --example sampler_unbiasedness`.

use weakreg::harness::{synth_cases, training_corpus, PhantomSpec};
use weakreg::loss::MultiscaleConfig;
use weakreg::net::{NetworkConfig, ParamRole, RegNet};
use weakreg::train::{unbiasedness_check, LossSettings};

fn main() -> weakreg::Result<()> {
    let spec = PhantomSpec {
        dims: [16; 3],
        ..PhantomSpec::default()
    };
    let cases = synth_cases(&spec, 0, 2)?;
    let corpus = training_corpus(&cases)?.cast::<f64>();
    println!("label pairs per image: {:?}", corpus.label_counts());

    let mut net = RegNet::new(NetworkConfig { n0: 2, ..NetworkConfig::desk() }, 3)?.cast::<f64>();
    // Non-zero heads so every parameter receives a gradient.
    for p in net.store_mut().iter_mut() {
        if matches!(p.role, ParamRole::HeadWeight) {
            p.value.iter_mut().enumerate().for_each(|(i, v)| *v = 0.01 * ((i % 7) as f64 - 3.0));
        }
    }
    let r = unbiasedness_check(&net, &corpus, &MultiscaleConfig::default(), &LossSettings::default(), 4, 20_000, 1)?;
    for (slot, w) in &r.slot_weights {
        println!("image {} label {}: weight {w:.4}", slot.entry, slot.label);
    }
    println!(
        "enumeration error {:.1e}; {}/{} components within 3 SE; passes: {}",
        r.enumeration_error,
        r.components_within,
        r.components_tested,
        r.passes()
    );
    Ok(())
}
