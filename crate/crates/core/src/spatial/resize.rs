use crate::real::Real;

/// Linear interpolation taps along one axis: output `i` reads
/// `(1 - w)·src[lo] + w·src[hi]`.
#[derive(Debug, Clone)]
pub struct AxisInterp<T> {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub w: Vec<T>,
}

impl<T: Real> AxisInterp<T> {
    /// Half-voxel-centred mapping `src = (i + 0.5)·n_in/n_out − 0.5`, clamped.
    pub fn new(n_in: usize, n_out: usize) -> Self {
        let mut lo = Vec::with_capacity(n_out);
        let mut hi = Vec::with_capacity(n_out);
        let mut w = Vec::with_capacity(n_out);
        let scale = n_in as f64 / n_out as f64;
        for i in 0..n_out {
            let c = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
            let l = (c.floor() as usize).min(n_in.saturating_sub(2));
            let f = c - l as f64;
            lo.push(l);
            hi.push((l + 1).min(n_in - 1));
            w.push(T::lit(f));
        }
        AxisInterp { lo, hi, w }
    }
}

/// Applies 1D interpolation along `axis` of a volume with dims `d`.
fn resize_axis<T: Real>(src: &[T], d: [usize; 3], axis: usize, n_out: usize) -> (Vec<T>, [usize; 3]) {
    let interp = AxisInterp::<T>::new(d[axis], n_out);
    let mut od = d;
    od[axis] = n_out;
    let mut out = vec![T::zero(); od[0] * od[1] * od[2]];
    match axis {
        0 => {
            for (row_in, row_out) in src.chunks_exact(d[0]).zip(out.chunks_exact_mut(n_out)) {
                for i in 0..n_out {
                    let w = interp.w[i];
                    row_out[i] = row_in[interp.lo[i]] * (T::one() - w) + row_in[interp.hi[i]] * w;
                }
            }
        }
        1 => {
            let nx = d[0];
            for z in 0..d[2] {
                for j in 0..n_out {
                    let w = interp.w[j];
                    let a = &src[(z * d[1] + interp.lo[j]) * nx..][..nx];
                    let b = &src[(z * d[1] + interp.hi[j]) * nx..][..nx];
                    let o = &mut out[(z * n_out + j) * nx..][..nx];
                    for x in 0..nx {
                        o[x] = a[x] * (T::one() - w) + b[x] * w;
                    }
                }
            }
        }
        _ => {
            let plane = d[0] * d[1];
            for k in 0..n_out {
                let w = interp.w[k];
                let a = &src[interp.lo[k] * plane..][..plane];
                let b = &src[interp.hi[k] * plane..][..plane];
                let o = &mut out[k * plane..][..plane];
                for x in 0..plane {
                    o[x] = a[x] * (T::one() - w) + b[x] * w;
                }
            }
        }
    }
    (out, od)
}

/// Transpose of [`resize_axis`]: scatters output gradients back to the input grid.
fn resize_axis_adjoint<T: Real>(
    d_out: &[T],
    d_in: [usize; 3],
    axis: usize,
    n_out: usize,
) -> Vec<T> {
    let interp = AxisInterp::<T>::new(d_in[axis], n_out);
    let mut g = vec![T::zero(); d_in[0] * d_in[1] * d_in[2]];
    match axis {
        0 => {
            for (row_g, row_o) in g.chunks_exact_mut(d_in[0]).zip(d_out.chunks_exact(n_out)) {
                for i in 0..n_out {
                    let w = interp.w[i];
                    row_g[interp.lo[i]] += row_o[i] * (T::one() - w);
                    row_g[interp.hi[i]] += row_o[i] * w;
                }
            }
        }
        1 => {
            let nx = d_in[0];
            for z in 0..d_in[2] {
                for j in 0..n_out {
                    let w = interp.w[j];
                    let o = &d_out[(z * n_out + j) * nx..][..nx];
                    let lo = (z * d_in[1] + interp.lo[j]) * nx;
                    let hi = (z * d_in[1] + interp.hi[j]) * nx;
                    for x in 0..nx {
                        g[lo + x] += o[x] * (T::one() - w);
                    }
                    for x in 0..nx {
                        g[hi + x] += o[x] * w;
                    }
                }
            }
        }
        _ => {
            let plane = d_in[0] * d_in[1];
            for k in 0..n_out {
                let w = interp.w[k];
                let o = &d_out[k * plane..][..plane];
                let lo = interp.lo[k] * plane;
                let hi = interp.hi[k] * plane;
                for x in 0..plane {
                    g[lo + x] += o[x] * (T::one() - w);
                }
                for x in 0..plane {
                    g[hi + x] += o[x] * w;
                }
            }
        }
    }
    g
}

/// Separable trilinear resize of one channel from `din` to `dout`.
pub fn resize_trilinear<T: Real>(src: &[T], din: [usize; 3], dout: [usize; 3]) -> Vec<T> {
    assert_eq!(src.len(), din[0] * din[1] * din[2]);
    let (a, da) = resize_axis(src, din, 0, dout[0]);
    let (b, db) = resize_axis(&a, da, 1, dout[1]);
    let (c, _) = resize_axis(&b, db, 2, dout[2]);
    c
}

pub fn resize_trilinear_adjoint<T: Real>(d_out: &[T], din: [usize; 3], dout: [usize; 3]) -> Vec<T> {
    assert_eq!(d_out.len(), dout[0] * dout[1] * dout[2]);
    let d1 = [dout[0], dout[1], din[2]];
    let d0 = [dout[0], din[1], din[2]];
    let g2 = resize_axis_adjoint(d_out, d1, 2, dout[2]);
    let g1 = resize_axis_adjoint(&g2, d0, 1, dout[1]);
    resize_axis_adjoint(&g1, din, 0, dout[0])
}
