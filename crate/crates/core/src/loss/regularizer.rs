//! Smoothness penalties on displacement fields, averaged over interior voxels
//! (those at least one voxel away from every face).

use serde::{Deserialize, Serialize};

use super::Penalty;
use crate::real::Real;
use crate::volume::DisplacementField;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegularizerKind {
    /// Mean squared second derivatives.
    Bending,
    /// Mean squared Frobenius norm of the first derivatives.
    L2Gradient,
}

impl RegularizerKind {
    pub fn evaluate<T: Real>(&self, u: &DisplacementField<T>) -> Penalty<T> {
        match self {
            RegularizerKind::Bending => bending_energy(u),
            RegularizerKind::L2Gradient => l2_gradient_penalty(u),
        }
    }
}

struct Interior {
    strides: [usize; 3],
    count: usize,
    voxels: Vec<usize>,
}

fn interior<T: Real>(u: &DisplacementField<T>) -> Interior {
    let [nx, ny, nz] = u.meta().dims;
    let strides = [1, nx, nx * ny];
    let mut voxels = Vec::new();
    if nx >= 3 && ny >= 3 && nz >= 3 {
        for k in 1..nz - 1 {
            for j in 1..ny - 1 {
                for i in 1..nx - 1 {
                    voxels.push(u.meta().index(i, j, k));
                }
            }
        }
    }
    Interior {
        strides,
        count: voxels.len(),
        voxels,
    }
}

fn finish<T: Real>(value: f64, grad: Vec<f64>) -> Penalty<T> {
    Penalty {
        value,
        d_ddf: grad.into_iter().map(T::lit).collect(),
    }
}

/// Mean over interior voxels and the three components of
/// `u_xx² + u_yy² + u_zz² + 2u_xy² + 2u_xz² + 2u_yz²` (central differences, mm).
pub fn bending_energy<T: Real>(u: &DisplacementField<T>) -> Penalty<T> {
    let meta = *u.meta();
    let n = meta.len();
    let int = interior(u);
    let mut grad = vec![0.0f64; 3 * n];
    if int.count == 0 {
        return finish(0.0, grad);
    }
    let h = meta.spacing;
    let s = int.strides;
    let norm = 1.0 / (3.0 * int.count as f64);
    let mut total = 0.0;
    for c in 0..3 {
        let comp = u.component(c);
        let g = &mut grad[c * n..(c + 1) * n];
        for &v in &int.voxels {
            let val = |i: usize| comp[i].as_f64();
            for a in 0..3 {
                let coef = 1.0 / (h[a] * h[a]);
                let d = (val(v + s[a]) - 2.0 * val(v) + val(v - s[a])) * coef;
                total += d * d;
                let w = 2.0 * d * coef * norm;
                g[v + s[a]] += w;
                g[v] -= 2.0 * w;
                g[v - s[a]] += w;
            }
            for (a, b) in [(0, 1), (0, 2), (1, 2)] {
                let coef = 1.0 / (4.0 * h[a] * h[b]);
                let (pp, pm, mp, mm) = (
                    v + s[a] + s[b],
                    v + s[a] - s[b],
                    v - s[a] + s[b],
                    v - s[a] - s[b],
                );
                let d = (val(pp) - val(pm) - val(mp) + val(mm)) * coef;
                total += 2.0 * d * d;
                let w = 4.0 * d * coef * norm;
                g[pp] += w;
                g[pm] -= w;
                g[mp] -= w;
                g[mm] += w;
            }
        }
    }
    finish(total * norm, grad)
}

/// Mean over interior voxels of `‖∂u/∂x‖²_F` (central differences, mm).
pub fn l2_gradient_penalty<T: Real>(u: &DisplacementField<T>) -> Penalty<T> {
    let meta = *u.meta();
    let n = meta.len();
    let int = interior(u);
    let mut grad = vec![0.0f64; 3 * n];
    if int.count == 0 {
        return finish(0.0, grad);
    }
    let h = meta.spacing;
    let s = int.strides;
    let norm = 1.0 / int.count as f64;
    let mut total = 0.0;
    for c in 0..3 {
        let comp = u.component(c);
        let g = &mut grad[c * n..(c + 1) * n];
        for &v in &int.voxels {
            for a in 0..3 {
                let coef = 1.0 / (2.0 * h[a]);
                let d = (comp[v + s[a]].as_f64() - comp[v - s[a]].as_f64()) * coef;
                total += d * d;
                let w = 2.0 * d * coef * norm;
                g[v + s[a]] += w;
                g[v - s[a]] -= w;
            }
        }
    }
    finish(total * norm, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_difference, relative_error};
    use crate::volume::GridMeta;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_field(meta: GridMeta, seed: u64) -> DisplacementField<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DisplacementField::new(meta, (0..3 * meta.len()).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap()
    }

    #[test]
    fn affine_fields_have_no_bending() {
        // Dyadic coefficients keep every stencil evaluation exact.
        let meta = GridMeta::isotropic([5, 5, 5], 1.0).unwrap();
        let u = DisplacementField::<f64>::from_fn(meta, |p| {
            [0.5 * p[0] - 0.25 * p[1] + 1.0, 0.125 * p[2], -0.75 * p[0] + 0.5 * p[1]]
        });
        assert_eq!(bending_energy(&u).value, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m: [f64; 12] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
        let meta = GridMeta::cube(5);
        let u = DisplacementField::<f64>::from_fn(meta, |p| {
            [0, 1, 2].map(|r| m[3 * r] * p[0] + m[3 * r + 1] * p[1] + m[3 * r + 2] * p[2] + m[9 + r])
        });
        assert!(bending_energy(&u).value < 1e-20);
    }

    #[test]
    fn quadratic_field_bending() {
        // u_x = x² on a unit grid: u_xx = 2, so the per-voxel density summed over
        // components is 4 and the mean over the three components is 4/3.
        let meta = GridMeta::isotropic([6, 5, 5], 1.0).unwrap();
        let u = DisplacementField::<f64>::from_fn(meta, |p| [p[0] * p[0], 0.0, 0.0]);
        let e = bending_energy(&u).value;
        assert!((3.0 * e - 4.0).abs() < 1e-12);
        assert!((e - 4.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn penalties_are_translation_invariant() {
        let meta = GridMeta::isotropic([5, 4, 6], 0.8).unwrap();
        let u = random_field(meta, 3);
        let mut data = u.data().to_vec();
        let n = meta.len();
        for c in 0..3 {
            for v in &mut data[c * n..(c + 1) * n] {
                *v += [2.0, -1.0, 0.5][c];
            }
        }
        let t = DisplacementField::new(meta, data).unwrap();
        let (a, b) = (bending_energy(&u).value, bending_energy(&t).value);
        assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        let (a, b) = (l2_gradient_penalty(&u).value, l2_gradient_penalty(&t).value);
        assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }

    #[test]
    fn l2_penalty_analytic() {
        let meta = GridMeta::cube(5);
        let c = DisplacementField::<f64>::constant(meta, [1.0, 2.0, 3.0]);
        assert_eq!(l2_gradient_penalty(&c).value, 0.0);
        let u = DisplacementField::<f64>::from_fn(meta, |p| [0.1 * p[0], 0.0, 0.0]);
        assert!((l2_gradient_penalty(&u).value - 0.01).abs() < 1e-12);
    }

    #[test]
    fn gradients_match_fd() {
        let meta = GridMeta::isotropic([5, 6, 4], 0.8).unwrap();
        let u = random_field(meta, 9);
        for kind in [RegularizerKind::Bending, RegularizerKind::L2Gradient] {
            let p = kind.evaluate(&u);
            let fd = central_difference(u.data(), 1e-6, |x| {
                kind.evaluate(&DisplacementField::new(meta, x.to_vec()).unwrap()).value
            });
            assert!(relative_error(&p.d_ddf, &fd) < 1e-4, "{kind:?}");
        }
    }
}
