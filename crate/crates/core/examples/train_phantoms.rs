//! Trains a small network on synthetic phantoms for a few hundred
//! iterations and scores it on held-out cases.
//!
//! Run with `cargo run --release --example train_phantoms -- [iterations]`.

use weakreg::harness::{evaluate, synth_cases, training_corpus, PhantomSpec};
use weakreg::net::NetworkConfig;
use weakreg::train::{train, TrainConfig};

fn main() -> weakreg::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let iterations = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(300);

    let spec = PhantomSpec::default();
    let train_cases = synth_cases(&spec, 0, 12)?;
    let held_out = synth_cases(&spec, 12, 4)?;
    let cfg = TrainConfig {
        iterations,
        ..TrainConfig::desk()
    };
    let out = train(&training_corpus(&train_cases)?, &NetworkConfig::desk(), &cfg, None)?;
    let report = evaluate(&out.net, &held_out, None)?;
    print!("{}", report.percentile_csv());
    Ok(())
}
