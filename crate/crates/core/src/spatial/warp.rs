use crate::error::{Error, Result};
use crate::real::Real;
use crate::volume::{DisplacementField, GridMeta, LabelMask, Volume};

/// Sensitivities of a warped output with respect to its inputs.
#[derive(Debug, Clone)]
pub struct WarpGradients<T = f32> {
    /// Gradient on the source grid.
    pub d_input: Vec<T>,
    /// Gradient per displacement component, channel-major like the DDF.
    pub d_ddf: Vec<T>,
}

#[derive(Debug, Clone, Copy)]
struct Tap<T> {
    lo: [usize; 3],
    hi: [usize; 3],
    w: [T; 3],
    /// ∂(continuous source index)/∂u per axis; zero where the sample was clamped.
    dc: [T; 3],
}

/// Precomputed trilinear sampling pattern of one DDF against one source grid.
///
/// Build once per DDF, then warp any number of channels with it and
/// back-propagate through it.
#[derive(Debug, Clone)]
pub struct Sampler<T = f32> {
    src: GridMeta,
    out: GridMeta,
    taps: Vec<Tap<T>>,
}

impl<T: Real> Sampler<T> {
    pub fn new(src: GridMeta, ddf: &DisplacementField<T>) -> Result<Self> {
        if let Some(index) = ddf.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "displacement field",
                index,
            });
        }
        let out = *ddf.meta();
        let n = out.len();
        let data = ddf.data();
        let ratio: [T; 3] = [0, 1, 2].map(|a| T::lit(out.spacing[a] / src.spacing[a]));
        let inv_s: [T; 3] = [0, 1, 2].map(|a| T::lit(1.0 / src.spacing[a]));
        let mut taps = Vec::with_capacity(n);
        for idx in 0..n {
            let ijk = out.coords(idx);
            let mut tap = Tap {
                lo: [0; 3],
                hi: [0; 3],
                w: [T::zero(); 3],
                dc: [T::zero(); 3],
            };
            for a in 0..3 {
                let len = src.dims[a];
                let max = T::lit((len - 1) as f64);
                let mut c = T::lit(ijk[a] as f64) * ratio[a] + data[a * n + idx] * inv_s[a];
                let mut dc = inv_s[a];
                if c < T::zero() {
                    c = T::zero();
                    dc = T::zero();
                } else if c > max {
                    c = max;
                    dc = T::zero();
                }
                if len == 1 {
                    dc = T::zero();
                }
                let lo = c.floor().to_usize().unwrap_or(0).min(len.saturating_sub(2));
                tap.lo[a] = lo;
                tap.hi[a] = (lo + 1).min(len - 1);
                tap.w[a] = c - T::lit(lo as f64);
                tap.dc[a] = dc;
            }
            taps.push(tap);
        }
        Ok(Sampler { src, out, taps })
    }

    pub fn source_meta(&self) -> &GridMeta {
        &self.src
    }

    pub fn output_meta(&self) -> &GridMeta {
        &self.out
    }

    #[inline]
    fn corners(&self, t: &Tap<T>) -> [usize; 8] {
        let nx = self.src.dims[0];
        let nxy = nx * self.src.dims[1];
        let x = [t.lo[0], t.hi[0]];
        let y = [t.lo[1] * nx, t.hi[1] * nx];
        let z = [t.lo[2] * nxy, t.hi[2] * nxy];
        [
            x[0] + y[0] + z[0],
            x[1] + y[0] + z[0],
            x[0] + y[1] + z[0],
            x[1] + y[1] + z[0],
            x[0] + y[0] + z[1],
            x[1] + y[0] + z[1],
            x[0] + y[1] + z[1],
            x[1] + y[1] + z[1],
        ]
    }

    /// Warps one scalar channel defined on the source grid.
    pub fn sample(&self, src: &[T]) -> Vec<T> {
        assert_eq!(src.len(), self.src.len());
        self.taps
            .iter()
            .map(|t| {
                let c = self.corners(t);
                let [wx, wy, wz] = t.w;
                let one = T::one();
                let x00 = src[c[0]] * (one - wx) + src[c[1]] * wx;
                let x10 = src[c[2]] * (one - wx) + src[c[3]] * wx;
                let x01 = src[c[4]] * (one - wx) + src[c[5]] * wx;
                let x11 = src[c[6]] * (one - wx) + src[c[7]] * wx;
                let y0 = x00 * (one - wy) + x10 * wy;
                let y1 = x01 * (one - wy) + x11 * wy;
                y0 * (one - wz) + y1 * wz
            })
            .collect()
    }

    /// Adds `d_out · ∂warp(src)/∂u` into `d_ddf` (channel-major, length 3·N).
    pub fn accumulate_ddf_grad(&self, src: &[T], d_out: &[T], d_ddf: &mut [T]) {
        let n = self.out.len();
        assert_eq!(d_out.len(), n);
        assert_eq!(d_ddf.len(), 3 * n);
        let one = T::one();
        for (idx, t) in self.taps.iter().enumerate() {
            let g = d_out[idx];
            if g == T::zero() {
                continue;
            }
            let c = self.corners(t);
            let v = c.map(|i| src[i]);
            let [wx, wy, wz] = t.w;
            let (ux, uy, uz) = (one - wx, one - wy, one - wz);
            if t.dc[0] != T::zero() {
                let dx = (v[1] - v[0]) * uy * uz
                    + (v[3] - v[2]) * wy * uz
                    + (v[5] - v[4]) * uy * wz
                    + (v[7] - v[6]) * wy * wz;
                d_ddf[idx] += g * dx * t.dc[0];
            }
            if t.dc[1] != T::zero() {
                let dy = (v[2] - v[0]) * ux * uz
                    + (v[3] - v[1]) * wx * uz
                    + (v[6] - v[4]) * ux * wz
                    + (v[7] - v[5]) * wx * wz;
                d_ddf[n + idx] += g * dy * t.dc[1];
            }
            if t.dc[2] != T::zero() {
                let dz = (v[4] - v[0]) * ux * uy
                    + (v[5] - v[1]) * wx * uy
                    + (v[6] - v[2]) * ux * wy
                    + (v[7] - v[3]) * wx * wy;
                d_ddf[2 * n + idx] += g * dz * t.dc[2];
            }
        }
    }

    /// Transpose of [`Sampler::sample`] with respect to the source values.
    pub fn input_grad(&self, d_out: &[T]) -> Vec<T> {
        assert_eq!(d_out.len(), self.out.len());
        let mut g = vec![T::zero(); self.src.len()];
        let one = T::one();
        for (t, &d) in self.taps.iter().zip(d_out) {
            if d == T::zero() {
                continue;
            }
            let c = self.corners(t);
            let [wx, wy, wz] = t.w;
            let w = [
                (one - wx) * (one - wy) * (one - wz),
                wx * (one - wy) * (one - wz),
                (one - wx) * wy * (one - wz),
                wx * wy * (one - wz),
                (one - wx) * (one - wy) * wz,
                wx * (one - wy) * wz,
                (one - wx) * wy * wz,
                wx * wy * wz,
            ];
            for k in 0..8 {
                g[c[k]] += d * w[k];
            }
        }
        g
    }

    /// Both gradients of `⟨d_out, warp(src, u)⟩`.
    pub fn vjp(&self, src: &[T], d_out: &[T]) -> WarpGradients<T> {
        let mut d_ddf = vec![T::zero(); 3 * self.out.len()];
        self.accumulate_ddf_grad(src, d_out, &mut d_ddf);
        WarpGradients {
            d_input: self.input_grad(d_out),
            d_ddf,
        }
    }
}

pub fn warp_volume<T: Real>(src: &Volume<T>, ddf: &DisplacementField<T>) -> Result<Volume<T>> {
    let s = Sampler::new(*src.meta(), ddf)?;
    Ok(Volume::from_parts(*ddf.meta(), s.sample(src.data())))
}

/// Trilinear interpolation with clamped borders is a convex combination, so
/// the result stays in `[0, 1]`.
pub fn warp_label<T: Real>(src: &LabelMask<T>, ddf: &DisplacementField<T>) -> Result<LabelMask<T>> {
    let s = Sampler::new(*src.meta(), ddf)?;
    let data = s
        .sample(src.data())
        .into_iter()
        .map(|v| v.max(T::zero()).min(T::one()))
        .collect();
    Ok(LabelMask::from_parts(*ddf.meta(), data))
}

/// `u(x) = u_inner(x) + u_outer(x + u_inner(x))`.
pub fn compose<T: Real>(
    outer: &DisplacementField<T>,
    inner: &DisplacementField<T>,
) -> Result<DisplacementField<T>> {
    if outer.meta() != inner.meta() {
        return Err(Error::Shape("composed fields must share a grid".into()));
    }
    if let Some(index) = outer.data().iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: "displacement field",
            index,
        });
    }
    let s = Sampler::new(*outer.meta(), inner)?;
    let mut data = Vec::with_capacity(inner.data().len());
    for c in 0..3 {
        let resampled = s.sample(outer.component(c));
        data.extend(resampled.iter().zip(inner.component(c)).map(|(&a, &b)| a + b));
    }
    Ok(DisplacementField::from_parts(*inner.meta(), data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_ddf_is_exact_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let meta = GridMeta::isotropic([5, 4, 3], 0.8).unwrap();
        let v = Volume::new(meta, (0..meta.len()).map(|_| rng.gen::<f32>()).collect()).unwrap();
        let out = warp_volume(&v, &DisplacementField::zeros(meta)).unwrap();
        assert_eq!(out, v);
    }

    #[test]
    fn one_voxel_shift_matches_array_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let meta = GridMeta::isotropic([6, 5, 4], 0.8).unwrap();
        let v = Volume::new(meta, (0..meta.len()).map(|_| rng.gen::<f64>()).collect()).unwrap();
        let out = warp_volume(&v, &DisplacementField::constant(meta, [0.8, 0.0, 0.0])).unwrap();
        for k in 0..4 {
            for j in 0..5 {
                for i in 0..5 {
                    let got = out.get(i, j, k);
                    let want = v.get(i + 1, j, k);
                    assert!((got - want).abs() < 1e-12, "({i},{j},{k})");
                }
            }
        }
    }

    #[test]
    fn linear_ramp_is_reproduced_exactly() {
        let meta = GridMeta::isotropic([8, 3, 3], 0.8).unwrap();
        let ramp = Volume::<f64>::from_fn(meta, |p| p[0]);
        let shift = 0.37 * 0.8;
        let out = warp_volume(&ramp, &DisplacementField::constant(meta, [shift, 0.0, 0.0])).unwrap();
        for k in 0..3 {
            for j in 0..3 {
                for i in 0..7 {
                    let want = i as f64 * 0.8 + shift;
                    assert!((out.get(i, j, k) - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn non_finite_ddf_rejected() {
        let meta = GridMeta::cube(2);
        let mut d = DisplacementField::<f32>::zeros(meta);
        d.data_mut()[3] = f32::INFINITY;
        assert!(Sampler::new(meta, &d).is_err());
    }

    #[test]
    fn compose_with_zero_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let meta = GridMeta::cube(5);
        let f = DisplacementField::<f64>::new(
            meta,
            (0..3 * meta.len()).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let z = DisplacementField::zeros(meta);
        assert_eq!(compose(&f, &z).unwrap(), f);
        assert_eq!(compose(&z, &f).unwrap(), f);
    }

    #[test]
    fn compose_translations_sequentially() {
        let meta = GridMeta::cube(8);
        let a = [0.5, -0.3, 0.2];
        let b = [-0.4, 0.6, 0.1];
        let inner = DisplacementField::<f64>::constant(meta, a);
        let outer = DisplacementField::<f64>::constant(meta, b);
        let c = compose(&outer, &inner).unwrap();
        // Oracle: push a point cloud through both fields one after another.
        for idx in 0..meta.len() {
            let x = meta.position(idx);
            let y: Vec<f64> = (0..3).map(|i| x[i] + a[i]).collect();
            let inside = (0..3).all(|i| y[i] >= 0.0 && y[i] <= 7.0 * 0.8 && x[i] + a[i] + b[i] >= 0.0);
            if !inside {
                continue;
            }
            let z: Vec<f64> = (0..3).map(|i| y[i] + b[i]).collect();
            let v = c.vector(idx);
            for i in 0..3 {
                assert!((x[i] + v[i] - z[i]).abs() < 1e-12);
            }
        }
    }
}
