//! Spatial operators on displacement fields.
//!
//! Convention: a DDF `u` lives on the fixed grid and pulls from the moving
//! image, so the warped value at fixed position `x` is the source sampled at
//! `x + u(x)`. Out-of-domain samples replicate the border.

mod affine;
mod inspect;
mod resize;
mod warp;

pub use affine::{affine_to_ddf, random_affine, AugmentConfig};
pub use inspect::{
    displacement_magnitude_map, gradient_l2norm_map, jacobian_determinant_map, jacobian_matrices,
    negative_jacobian_count,
};
pub use resize::{resize_trilinear, resize_trilinear_adjoint, AxisInterp};
pub use warp::{compose, warp_label, warp_volume, Sampler, WarpGradients};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::volume::{DisplacementField, GridMeta};

/// One displacement summand predicted at resolution level `level`.
#[derive(Debug, Clone)]
pub struct Summand<T = f32> {
    pub level: usize,
    pub field: DisplacementField<T>,
}

/// Upsamples every summand to `full` resolution and adds them up.
///
/// A summand at level `k` must have dims `ceil(full / 2^k)`. Upsampling is
/// trilinear with half-voxel-centred alignment, so constant fields are
/// preserved exactly.
pub fn aggregate_summands<T: Real>(
    full: &GridMeta,
    summands: &[Summand<T>],
) -> Result<DisplacementField<T>> {
    if summands.is_empty() {
        return Err(Error::Shape("no displacement summands to aggregate".into()));
    }
    let n = full.len();
    let mut out: Option<Vec<T>> = None;
    for s in summands {
        let expected = full.level(s.level).dims;
        if s.field.meta().dims != expected {
            return Err(Error::Shape(format!(
                "summand at level {} has dims {:?}, expected {:?}",
                s.level,
                s.field.meta().dims,
                expected
            )));
        }
        let up: Vec<T> = if s.level == 0 {
            s.field.data().to_vec()
        } else {
            (0..3)
                .flat_map(|c| resize_trilinear(s.field.component(c), s.field.meta().dims, full.dims))
                .collect()
        };
        debug_assert_eq!(up.len(), 3 * n);
        match out.as_mut() {
            None => out = Some(up),
            Some(acc) => acc.iter_mut().zip(&up).for_each(|(a, &b)| *a += b),
        }
    }
    Ok(DisplacementField::from_parts(*full, out.expect("nonempty")))
}

/// Adjoint of [`aggregate_summands`]: maps a gradient on the full-resolution
/// field back onto each summand grid.
pub fn aggregate_summands_adjoint<T: Real>(
    full: &GridMeta,
    levels: &[usize],
    d_out: &[T],
) -> Vec<Vec<T>> {
    let n = full.len();
    assert_eq!(d_out.len(), 3 * n);
    levels
        .iter()
        .map(|&level| {
            if level == 0 {
                d_out.to_vec()
            } else {
                let coarse = full.level(level).dims;
                (0..3)
                    .flat_map(|c| {
                        resize_trilinear_adjoint(&d_out[c * n..(c + 1) * n], coarse, full.dims)
                    })
                    .collect()
            }
        })
        .collect()
}

/// First derivatives of each displacement component in physical units:
/// central differences inside, one-sided on faces. Returns `g[c][a]`
/// = ∂u_c/∂x_a at voxel `idx`.
#[inline]
pub(crate) fn field_gradient_at<T: Real>(ddf: &DisplacementField<T>, idx: usize) -> [[f64; 3]; 3] {
    let meta = ddf.meta();
    let pos = meta.coords(idx);
    let strides = [1, meta.dims[0], meta.dims[0] * meta.dims[1]];
    let mut g = [[0.0; 3]; 3];
    for a in 0..3 {
        let n = meta.dims[a];
        if n < 2 {
            continue;
        }
        let p = pos[a];
        let (lo, hi, span) = if p == 0 {
            (idx, idx + strides[a], 1.0)
        } else if p == n - 1 {
            (idx - strides[a], idx, 1.0)
        } else {
            (idx - strides[a], idx + strides[a], 2.0)
        };
        let h = span * meta.spacing[a];
        for (c, row) in g.iter_mut().enumerate() {
            let comp = ddf.component(c);
            row[a] = (comp[hi].as_f64() - comp[lo].as_f64()) / h;
        }
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_upsample(src: &[f64], cd: [usize; 3], fd: [usize; 3]) -> Vec<f64> {
        let coord = |i: usize, a: usize| {
            let c = (i as f64 + 0.5) * cd[a] as f64 / fd[a] as f64 - 0.5;
            c.clamp(0.0, (cd[a] - 1) as f64)
        };
        let mut out = vec![0.0; fd[0] * fd[1] * fd[2]];
        for k in 0..fd[2] {
            for j in 0..fd[1] {
                for i in 0..fd[0] {
                    let c = [coord(i, 0), coord(j, 1), coord(k, 2)];
                    let mut v = 0.0;
                    for corner in 0..8 {
                        let mut w = 1.0;
                        let mut ix = [0usize; 3];
                        for a in 0..3 {
                            let lo = c[a].floor() as usize;
                            let f = c[a] - lo as f64;
                            let hi = (lo + 1).min(cd[a] - 1);
                            if corner >> a & 1 == 1 {
                                w *= f;
                                ix[a] = hi;
                            } else {
                                w *= 1.0 - f;
                                ix[a] = lo;
                            }
                        }
                        v += w * src[(ix[2] * cd[1] + ix[1]) * cd[0] + ix[0]];
                    }
                    out[(k * fd[1] + j) * fd[0] + i] = v;
                }
            }
        }
        out
    }

    #[test]
    fn single_full_res_summand_passes_through() {
        let meta = GridMeta::cube(4);
        let f = DisplacementField::<f32>::from_fn(meta, |p| [p[0], -p[1], 0.5]);
        let out = aggregate_summands(&meta, &[Summand { level: 0, field: f.clone() }]).unwrap();
        assert_eq!(out, f);
    }

    #[test]
    fn constants_add_across_levels() {
        let meta = GridMeta::cube(8);
        let s0 = DisplacementField::<f64>::constant(meta, [1.0, 2.0, 3.0]);
        let s1 = DisplacementField::<f64>::constant(meta.level(1), [0.5, -1.0, 0.25]);
        let s3 = DisplacementField::<f64>::constant(meta.level(3), [0.0, 0.0, 1.0]);
        let out = aggregate_summands(
            &meta,
            &[
                Summand { level: 0, field: s0 },
                Summand { level: 1, field: s1 },
                Summand { level: 3, field: s3 },
            ],
        )
        .unwrap();
        for idx in 0..meta.len() {
            let v = out.vector(idx);
            assert!((v[0] - 1.5).abs() < 1e-12);
            assert!((v[1] - 1.0).abs() < 1e-12);
            assert!((v[2] - 4.25).abs() < 1e-12);
        }
    }

    #[test]
    fn half_resolution_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let meta = GridMeta::isotropic([8, 6, 4], 0.8).unwrap();
        let coarse = meta.level(1);
        let data: Vec<f64> = (0..3 * coarse.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let field = DisplacementField::new(coarse, data.clone()).unwrap();
        let out = aggregate_summands(&meta, &[Summand { level: 1, field }]).unwrap();
        for c in 0..3 {
            let oracle = brute_upsample(
                &data[c * coarse.len()..(c + 1) * coarse.len()],
                coarse.dims,
                meta.dims,
            );
            for (a, b) in out.component(c).iter().zip(&oracle) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn aggregation_rejects_bad_input() {
        let meta = GridMeta::cube(8);
        assert!(aggregate_summands::<f32>(&meta, &[]).is_err());
        let wrong = DisplacementField::<f32>::zeros(GridMeta::cube(3));
        assert!(aggregate_summands(&meta, &[Summand { level: 1, field: wrong }]).is_err());
    }

    #[test]
    fn aggregation_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let meta = GridMeta::cube(8);
        let mk = |level: usize, rng: &mut ChaCha8Rng| {
            let m = meta.level(level);
            let d = (0..3 * m.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            Summand { level, field: DisplacementField::<f64>::new(m, d).unwrap() }
        };
        let s = vec![mk(0, &mut rng), mk(2, &mut rng)];
        let scaled: Vec<_> = s
            .iter()
            .map(|x| Summand { level: x.level, field: x.field.scaled(-2.5) })
            .collect();
        let a = aggregate_summands(&meta, &s).unwrap();
        let b = aggregate_summands(&meta, &scaled).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x * -2.5 - y).abs() < 1e-12);
        }
    }

    #[test]
    fn adjoint_satisfies_inner_product_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let meta = GridMeta::isotropic([8, 4, 6], 1.0).unwrap();
        let levels = [0usize, 1, 2];
        let summands: Vec<_> = levels
            .iter()
            .map(|&l| {
                let m = meta.level(l);
                let d = (0..3 * m.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
                Summand { level: l, field: DisplacementField::<f64>::new(m, d).unwrap() }
            })
            .collect();
        let g: Vec<f64> = (0..3 * meta.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let out = aggregate_summands(&meta, &summands).unwrap();
        let lhs: f64 = out.data().iter().zip(&g).map(|(a, b)| a * b).sum();
        let adj = aggregate_summands_adjoint(&meta, &levels, &g);
        let rhs: f64 = summands
            .iter()
            .zip(&adj)
            .map(|(s, a)| s.field.data().iter().zip(a).map(|(x, y)| x * y).sum::<f64>())
            .sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
