use nalgebra::{Matrix3, Rotation3, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::real::Real;
use crate::volume::{AffineParams, DisplacementField, GridMeta};

/// `u(x) = A·x + t − x` at every voxel position.
pub fn affine_to_ddf<T: Real>(p: &AffineParams, meta: &GridMeta) -> DisplacementField<T> {
    DisplacementField::from_fn(*meta, |x| {
        let y = p.apply(x);
        [y[0] - x[0], y[1] - x[1], y[2] - x[2]]
    })
}

/// Ranges of the random affine augmentation. Every draw is uniform in
/// `[-bound, bound]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Rotation about each axis, degrees.
    pub rotation_deg: f64,
    /// Per-axis log-scale.
    pub log_scale: f64,
    /// Off-diagonal entries of the symmetric stretch generator.
    pub shear: f64,
    /// Translation as a fraction of the grid extent per axis.
    pub translation_frac: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            rotation_deg: 10.0,
            log_scale: 0.1,
            shear: 0.05,
            translation_frac: 0.05,
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self::default().scaled(0.0)
    }

    /// Scales every bound by `m`; `m = 0` yields the identity transform.
    pub fn scaled(self, m: f64) -> Self {
        AugmentConfig {
            rotation_deg: self.rotation_deg * m,
            log_scale: self.log_scale * m,
            shear: self.shear * m,
            translation_frac: self.translation_frac * m,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.rotation_deg == 0.0
            && self.log_scale == 0.0
            && self.shear == 0.0
            && self.translation_frac == 0.0
    }

    pub fn validate(&self) -> crate::Result<()> {
        let ok = |v: f64, max: f64| v.is_finite() && (0.0..=max).contains(&v);
        if ok(self.rotation_deg, 45.0)
            && ok(self.log_scale, 0.5)
            && ok(self.shear, 0.25)
            && ok(self.translation_frac, 0.5)
        {
            Ok(())
        } else {
            Err(crate::Error::InvalidConfig(format!(
                "augmentation bounds out of range: {self:?} (max rotation 45°, log-scale 0.5, shear 0.25, translation 0.5)"
            )))
        }
    }
}

/// Draws `A = R·exp(S)` with `S` symmetric, so `det A = exp(tr S) > 0`
/// and the transform never flips. Rotation and stretch act about the grid
/// centre.
pub fn random_affine<R: Rng + ?Sized>(meta: &GridMeta, rng: &mut R, cfg: &AugmentConfig) -> AffineParams {
    let mut sym = |bound: f64| bound * (2.0 * rng.gen::<f64>() - 1.0);
    let angles = [0; 3].map(|_| sym(cfg.rotation_deg.to_radians()));
    let diag = [0; 3].map(|_| sym(cfg.log_scale));
    let off = [0; 3].map(|_| sym(cfg.shear));
    let ext = meta.extent();
    let shift = [0, 1, 2].map(|a| sym(cfg.translation_frac * ext[a]));

    let rot = Rotation3::from_euler_angles(angles[0], angles[1], angles[2]).into_inner();
    let generator = Matrix3::new(
        diag[0], off[0], off[1], //
        off[0], diag[1], off[2], //
        off[1], off[2], diag[2],
    );
    let stretch = if generator == Matrix3::zeros() {
        Matrix3::identity()
    } else {
        let eig = generator.symmetric_eigen();
        eig.eigenvectors
            * Matrix3::from_diagonal(&eig.eigenvalues.map(f64::exp))
            * eig.eigenvectors.transpose()
    };
    let a = if angles == [0.0; 3] { stretch } else { rot * stretch };
    let c = Vector3::from(meta.center());
    let t = c - a * c + Vector3::from(shift);
    AffineParams::from_nalgebra(&a, &t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_gives_zero_field() {
        let d = affine_to_ddf::<f32>(&AffineParams::identity(), &GridMeta::cube(3));
        assert!(d.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn translation_is_constant() {
        let d = affine_to_ddf::<f64>(&AffineParams::translation([1.0, 0.0, 0.0]), &GridMeta::cube(3));
        for idx in 0..27 {
            assert_eq!(d.vector(idx), [1.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn random_params_match_per_voxel_matrix_multiply() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let meta = GridMeta::isotropic([4, 4, 4], 0.9).unwrap();
        let p: [f64; 12] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
        let aff = AffineParams::from_array(p);
        let d = affine_to_ddf::<f64>(&aff, &meta);
        for k in 0..4 {
            for j in 0..4 {
                for i in 0..4 {
                    let x = [i as f64 * 0.9, j as f64 * 0.9, k as f64 * 0.9];
                    let idx = meta.index(i, j, k);
                    for r in 0..3 {
                        let ax = p[3 * r] * x[0] + p[3 * r + 1] * x[1] + p[3 * r + 2] * x[2];
                        let want = ax + p[9 + r] - x[r];
                        assert!((d.vector(idx)[r] - want).abs() < 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn zero_magnitude_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = random_affine(&GridMeta::cube(16), &mut rng, &AugmentConfig::default().scaled(0.0));
        assert_eq!(p, AffineParams::identity());
    }

    #[test]
    fn same_seed_same_params() {
        let meta = GridMeta::cube(16);
        let a = random_affine(&meta, &mut ChaCha8Rng::seed_from_u64(5), &AugmentConfig::default());
        let b = random_affine(&meta, &mut ChaCha8Rng::seed_from_u64(5), &AugmentConfig::default());
        assert_eq!(a, b);
    }

    #[test]
    fn default_draws_never_flip() {
        let meta = GridMeta::cube(32);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let cfg = AugmentConfig::default();
        for _ in 0..10_000 {
            let p = random_affine(&meta, &mut rng, &cfg);
            assert!(p.determinant() > 0.0);
        }
    }

    #[test]
    fn bounds_validated() {
        assert!(AugmentConfig::default().validate().is_ok());
        let bad = AugmentConfig {
            rotation_deg: 90.0,
            ..AugmentConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
