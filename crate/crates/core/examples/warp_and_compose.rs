//! Pulls a label through a translation field, then composes two fields and
//! checks that warping once with the composition matches warping twice.
//!
//! Run with `cargo run --example warp_and_compose`.

use weakreg::spatial::{compose, warp_label};
use weakreg::volume::centroid;
use weakreg::{DisplacementField, GridMeta, LabelMask};

fn main() -> weakreg::Result<()> {
    let meta = GridMeta::isotropic([32; 3], 1.0)?;
    let ball: LabelMask = LabelMask::from_predicate(meta, |p| {
        (p[0] - 14.0).powi(2) + (p[1] - 16.0).powi(2) + (p[2] - 16.0).powi(2) <= 36.0
    });

    // The field is stored on the output grid and says where to sample the
    // input, so a displacement of -2 mm moves content +2 mm.
    let shift = DisplacementField::constant(meta, [-2.0, 0.0, 0.0]);
    let moved = warp_label(&ball, &shift)?;
    let (a, b) = (centroid(&ball)?, centroid(&moved)?);
    println!("centroid x: {:.3} -> {:.3}", a[0], b[0]);

    let c = meta.center();
    let swirl = DisplacementField::from_fn(meta, |p| {
        let (dx, dy) = (p[0] - c[0], p[1] - c[1]);
        [-0.05 * dy, 0.05 * dx, 0.0]
    });
    let both = compose(&swirl, &shift)?;
    let once = warp_label(&ball, &both)?;
    let twice = warp_label(&warp_label(&ball, &swirl)?, &shift)?;
    let diff = once
        .data()
        .iter()
        .zip(twice.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0f32, f32::max);
    println!("max |compose - sequential| = {diff:.4} (interpolation only)");
    Ok(())
}
