//! Bending energy and the L² gradient penalty on a smooth field, a rough
//! field and a pure translation.
//!
//! Run with `cargo run --example regularizers`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use weakreg::loss::{bending_energy, l2_gradient_penalty};
use weakreg::{DisplacementField, GridMeta};

fn main() -> weakreg::Result<()> {
    let meta = GridMeta::isotropic([24; 3], 1.0)?;
    let smooth = DisplacementField::from_fn(meta, |p| [(p[1] / 8.0).sin(), 0.0, 0.2 * (p[0] / 12.0).cos()]);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let rough = DisplacementField::new(meta, (0..3 * meta.len()).map(|_| rng.gen_range(-0.5..0.5)).collect())?;
    let shift = DisplacementField::constant(meta, [1.0, -2.0, 0.5]);
    for (name, u) in [("smooth", &smooth), ("rough", &rough), ("translation", &shift)] {
        println!(
            "{name:>11}: bending {:.6}, L2 gradient {:.6}",
            bending_energy(u).value,
            l2_gradient_penalty(u).value
        );
    }
    Ok(())
}
