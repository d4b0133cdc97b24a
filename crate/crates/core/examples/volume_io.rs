//! Writes a scalar volume, a label mask and a displacement field to disk and
//! reads them back.
//!
//! Run with `cargo run --example volume_io`.

use weakreg::volume::{read_ddf, read_header, read_label, read_scalar, write_volume};
use weakreg::{DisplacementField, GridMeta, LabelMask, Volume};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::temp_dir().join("weakreg_volume_io");
    std::fs::create_dir_all(&dir)?;

    let meta = GridMeta::new([24, 20, 16], [0.8, 0.8, 1.5])?;
    let c = meta.center();
    let image = Volume::from_fn(meta, |p| (-(p[0] - c[0]).powi(2) / 50.0).exp());
    let label = LabelMask::from_predicate(meta, |p| (0..3).map(|a| (p[a] - c[a]).powi(2)).sum::<f64>() < 25.0);
    let ddf = DisplacementField::from_fn(meta, |p| [0.1 * (p[2] - c[2]), 0.0, -0.5]);

    write_volume(image.clone(), dir.join("image"))?;
    write_volume(label.clone(), dir.join("label"))?;
    write_volume(ddf.clone(), dir.join("ddf"))?;

    let header = read_header(dir.join("ddf"))?;
    println!("ddf header: {}", serde_json::to_string(&header)?);

    assert_eq!(read_scalar(dir.join("image"))?, image);
    assert_eq!(read_label(dir.join("label"))?, label);
    assert_eq!(read_ddf(dir.join("ddf"))?, ddf);
    println!("label mass {:.0} voxels; all three round-trip exactly", label.mass());
    println!("files in {}", dir.display());
    Ok(())
}
