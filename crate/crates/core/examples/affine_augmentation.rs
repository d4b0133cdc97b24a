//! Draws random affine augmentations, turns them into displacement fields
//! and reports their determinants.
//!
//! Run with `cargo run --example affine_augmentation`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use weakreg::spatial::{affine_to_ddf, jacobian_determinant_map, random_affine, AugmentConfig};
use weakreg::{DisplacementField, GridMeta};

fn main() -> weakreg::Result<()> {
    let meta = GridMeta::isotropic([32; 3], 1.0)?;
    let cfg = AugmentConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for i in 0..4 {
        let p = random_affine(&meta, &mut rng, &cfg);
        let u: DisplacementField = affine_to_ddf(&p, &meta);
        let jac = jacobian_determinant_map(&u);
        let (lo, hi) = jac
            .data()
            .iter()
            .fold((f32::MAX, f32::MIN), |(a, b), &v| (a.min(v), b.max(v)));
        let t = p.to_array();
        println!(
            "draw {i}: det {:.4}, Jacobian map [{lo:.4}, {hi:.4}], translation ({:.2}, {:.2}, {:.2}) mm",
            p.determinant(),
            t[9],
            t[10],
            t[11]
        );
    }
    let none = random_affine(&meta, &mut rng, &AugmentConfig::none());
    println!("disabled augmentation gives the identity: {}", none == weakreg::AffineParams::identity());
    Ok(())
}
