use crate::real::Real;
use crate::volume::GridMeta;

/// Kernel half-width in standard deviations.
pub const DEFAULT_TRUNCATE: f64 = 3.0;

/// Normalized sampled Gaussian `exp(-k²/2σ²)` on `k ∈ [-r, r]`,
/// `r = ceil(truncate·σ)`. `σ = 0` gives the unit impulse.
pub fn gaussian_kernel(sigma_vox: f64, truncate: f64) -> Vec<f64> {
    if sigma_vox <= 0.0 {
        return vec![1.0];
    }
    let r = (truncate * sigma_vox).ceil().max(1.0) as i64;
    let mut k: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma_vox * sigma_vox)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// One axis of a clamp-to-edge convolution, folded into a banded matrix:
/// `out[i] = Σ_j rows[i][j - start[i]] · in[j]`.
#[derive(Debug, Clone)]
struct BandedAxis<T> {
    start: Vec<usize>,
    rows: Vec<Vec<T>>,
}

impl<T: Real> BandedAxis<T> {
    fn new(kernel: &[f64], n: usize) -> Self {
        let r = (kernel.len() / 2) as i64;
        let mut start = Vec::with_capacity(n);
        let mut rows = Vec::with_capacity(n);
        for i in 0..n as i64 {
            let lo = (i - r).clamp(0, n as i64 - 1) as usize;
            let hi = (i + r).clamp(0, n as i64 - 1) as usize;
            let mut row = vec![0.0f64; hi - lo + 1];
            for (t, &g) in kernel.iter().enumerate() {
                let j = (i + t as i64 - r).clamp(0, n as i64 - 1) as usize;
                row[j - lo] += g;
            }
            start.push(lo);
            rows.push(row.into_iter().map(T::lit).collect());
        }
        BandedAxis { start, rows }
    }

    fn is_identity(&self) -> bool {
        self.rows.iter().all(|r| r.len() == 1 && r[0] == T::one())
    }
}

/// Separable 3D Gaussian with clamp-to-edge borders on a fixed grid.
#[derive(Debug, Clone)]
pub struct GaussianFilter<T = f32> {
    pub sigma_mm: f64,
    dims: [usize; 3],
    axes: [BandedAxis<T>; 3],
    identity: bool,
}

impl<T: Real> GaussianFilter<T> {
    pub fn new(meta: &GridMeta, sigma_mm: f64, truncate: f64) -> Self {
        assert!(sigma_mm >= 0.0, "sigma must be non-negative");
        let axes = [0, 1, 2].map(|a| {
            let k = gaussian_kernel(sigma_mm / meta.spacing[a], truncate);
            BandedAxis::new(&k, meta.dims[a])
        });
        let identity = sigma_mm == 0.0 || axes.iter().all(|a| a.is_identity());
        GaussianFilter {
            sigma_mm,
            dims: meta.dims,
            axes,
            identity,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.identity
    }

    fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn apply(&self, src: &[T]) -> Vec<T> {
        assert_eq!(src.len(), self.len());
        if self.identity {
            return src.to_vec();
        }
        let a = self.pass(src, 0, false);
        let b = self.pass(&a, 1, false);
        self.pass(&b, 2, false)
    }

    /// Transpose of [`GaussianFilter::apply`]. Equal to `apply` away from the
    /// borders; the folded edge weights make it differ near them.
    pub fn adjoint(&self, d_out: &[T]) -> Vec<T> {
        assert_eq!(d_out.len(), self.len());
        if self.identity {
            return d_out.to_vec();
        }
        let a = self.pass(d_out, 2, true);
        let b = self.pass(&a, 1, true);
        self.pass(&b, 0, true)
    }

    fn pass(&self, src: &[T], axis: usize, transpose: bool) -> Vec<T> {
        let [nx, ny, nz] = self.dims;
        let ax = &self.axes[axis];
        let mut out = vec![T::zero(); src.len()];
        // (line stride, element stride, lines)
        match axis {
            0 => {
                for (line_in, line_out) in src.chunks_exact(nx).zip(out.chunks_exact_mut(nx)) {
                    for i in 0..nx {
                        let s = ax.start[i];
                        let row = &ax.rows[i];
                        if transpose {
                            let v = line_in[i];
                            for (o, &w) in line_out[s..s + row.len()].iter_mut().zip(row) {
                                *o += w * v;
                            }
                        } else {
                            let mut acc = T::zero();
                            for (&x, &w) in line_in[s..s + row.len()].iter().zip(row) {
                                acc += w * x;
                            }
                            line_out[i] = acc;
                        }
                    }
                }
            }
            _ => {
                // Whole rows along x move together; the banded weights act on
                // row index `j` (axis 1, within a z-slab) or slab index `k` (axis 2).
                let (count, step, outer, outer_step) = if axis == 1 {
                    (ny, nx, nz, nx * ny)
                } else {
                    (nz, nx * ny, 1, 0)
                };
                let width = step;
                for o in 0..outer {
                    let base = o * outer_step;
                    for i in 0..count {
                        let s = ax.start[i];
                        let row = &ax.rows[i];
                        if transpose {
                            let from = base + i * step;
                            for (t, &w) in row.iter().enumerate() {
                                let to = base + (s + t) * step;
                                for x in 0..width {
                                    let v = src[from + x];
                                    out[to + x] += w * v;
                                }
                            }
                        } else {
                            let to = base + i * step;
                            for (t, &w) in row.iter().enumerate() {
                                let from = base + (s + t) * step;
                                for x in 0..width {
                                    let v = src[from + x];
                                    out[to + x] += w * v;
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Dense 3D convolution with clamped indices.
    pub(crate) fn dense_oracle(src: &[f64], meta: &GridMeta, sigma_mm: f64) -> Vec<f64> {
        let ks: Vec<Vec<f64>> = (0..3)
            .map(|a| gaussian_kernel(sigma_mm / meta.spacing[a], DEFAULT_TRUNCATE))
            .collect();
        let [nx, ny, nz] = meta.dims;
        let clamp = |v: i64, n: usize| v.clamp(0, n as i64 - 1) as usize;
        let mut out = vec![0.0; src.len()];
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    let mut acc = 0.0;
                    let (rx, ry, rz) = (ks[0].len() / 2, ks[1].len() / 2, ks[2].len() / 2);
                    for (c, gz) in ks[2].iter().enumerate() {
                        let z = clamp(k as i64 + c as i64 - rz as i64, nz);
                        for (b, gy) in ks[1].iter().enumerate() {
                            let y = clamp(j as i64 + b as i64 - ry as i64, ny);
                            for (a, gx) in ks[0].iter().enumerate() {
                                let x = clamp(i as i64 + a as i64 - rx as i64, nx);
                                acc += gx * gy * gz * src[meta.index(x, y, z)];
                            }
                        }
                    }
                    out[meta.index(i, j, k)] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn kernel_is_normalized() {
        for s in [0.3, 1.25, 2.5, 40.0] {
            let k = gaussian_kernel(s, 3.0);
            assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-7);
            assert_eq!(k.len() % 2, 1);
        }
        assert_eq!(gaussian_kernel(0.0, 3.0), vec![1.0]);
    }

    #[test]
    fn zero_sigma_is_identity() {
        let meta = GridMeta::cube(4);
        let f = GaussianFilter::<f32>::new(&meta, 0.0, DEFAULT_TRUNCATE);
        let src: Vec<f32> = (0..64).map(|i| (i % 7) as f32 / 7.0).collect();
        assert_eq!(f.apply(&src), src);
    }

    #[test]
    fn impulse_matches_dense_convolution() {
        let meta = GridMeta::cube(9);
        let mut src = vec![0.0f64; meta.len()];
        src[meta.index(4, 4, 4)] = 1.0;
        let f = GaussianFilter::<f64>::new(&meta, 2.0, DEFAULT_TRUNCATE);
        let oracle = dense_oracle(&src, &meta, 2.0);
        for (a, b) in f.apply(&src).iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn random_input_matches_dense_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let meta = GridMeta::isotropic([8, 5, 7], 0.8).unwrap();
        let src: Vec<f64> = (0..meta.len()).map(|_| rng.gen()).collect();
        for sigma in [1.0, 4.0, 32.0] {
            let f = GaussianFilter::<f64>::new(&meta, sigma, DEFAULT_TRUNCATE);
            let oracle = dense_oracle(&src, &meta, sigma);
            for (a, b) in f.apply(&src).iter().zip(&oracle) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn constant_stays_constant() {
        let meta = GridMeta::cube(6);
        let f = GaussianFilter::<f32>::new(&meta, 4.0, DEFAULT_TRUNCATE);
        for v in f.apply(&vec![0.7f32; meta.len()]) {
            assert!((v - 0.7).abs() < 1e-6);
        }
    }

    #[test]
    fn adjoint_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let meta = GridMeta::isotropic([7, 6, 5], 0.8).unwrap();
        let f = GaussianFilter::<f64>::new(&meta, 1.5, DEFAULT_TRUNCATE);
        let x: Vec<f64> = (0..meta.len()).map(|_| rng.gen()).collect();
        let y: Vec<f64> = (0..meta.len()).map(|_| rng.gen()).collect();
        let lhs: f64 = f.apply(&x).iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(f.adjoint(&y)).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
