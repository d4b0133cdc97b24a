//! Builds the registration network, runs one forward pass and prints the
//! summand grids. A fresh network predicts the zero field.
//!
//! Run with `cargo run --release --example network_forward`.

use weakreg::harness::{synth_case, PhantomSpec};
use weakreg::net::{pack_pairs, BnMode, NetworkConfig, RegNet};

fn main() -> weakreg::Result<()> {
    let case = synth_case(&PhantomSpec::default(), 0)?;
    let meta = *case.fixed.meta();
    let input = pack_pairs(&[(&case.moving, &case.fixed)])?;

    let cfg = NetworkConfig::desk();
    let net = RegNet::new(cfg.clone(), 0)?;
    let n: usize = net.store().iter().filter(|p| p.trainable()).map(|p| p.len()).sum();
    println!("n0 = {}, {} trainable parameters", cfg.n0, n);

    let out = net.forward(&input, &meta, BnMode::Running)?;
    for s in &out.summands[0] {
        println!("summand level {}: dims {:?}", s.level, s.field.meta().dims);
    }
    let zero = out.ddfs[0].data().iter().all(|&v| v == 0.0);
    println!("initial DDF is zero everywhere: {zero}");

    let affine = RegNet::new(cfg.affine(), 0)?;
    let out = affine.forward(&input, &meta, BnMode::Running)?;
    println!("affine head starts at {:?}", out.affine[0].to_array());
    Ok(())
}
