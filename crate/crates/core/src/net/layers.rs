//! Layer primitives with exact reverse-mode gradients.
//!
//! Every forward function is pure; backward functions take the cached
//! forward quantities they need and return input and parameter gradients.
//! Parallel loops write disjoint output chunks and reduce in a fixed order,
//! so results do not depend on the thread count.

use rayon::prelude::*;

use super::tensor::Tensor;
use crate::real::{matmul, Mat, Real};
use crate::spatial::{resize_trilinear, resize_trilinear_adjoint};

/// Output range `[x0, x1)` for which `x + off - pad` stays inside `[0, n)`.
#[inline]
fn valid_range(n: usize, off: usize, pad: usize) -> (usize, usize) {
    let x0 = pad.saturating_sub(off);
    let x1 = (n + pad).saturating_sub(off).min(n);
    (x0, x1.max(x0))
}

/// Patch-matrix elements per slab; keeps each unfolded slab cache-sized.
const SLAB_ELEMS: usize = 1 << 18;

/// z-slices per slab for a patch matrix with `rows` rows.
fn slab_depth(rows: usize, plane: usize, nz: usize) -> usize {
    (SLAB_ELEMS / (rows * plane).max(1)).clamp(1, nz)
}

/// Unfolds z-slices `[z0, z1)` of one batch element into `[c_in·k³, m]`
/// patch rows (`m` voxels of the slab); taps outside the volume are zero.
fn im2col<T: Real>(x: &Tensor<T>, b: usize, k: usize, z0: usize, z1: usize, col: &mut [T]) {
    let k3 = k * k * k;
    let p = k / 2;
    let [nx, ny, nz] = x.dims;
    let m = (z1 - z0) * ny * nx;
    col.fill(T::zero());
    for (r, row) in col.chunks_mut(m).enumerate() {
        let (ci, t) = (r / k3, r % k3);
        let (dz, dy, dx) = (t / (k * k), (t / k) % k, t % k);
        let xin = x.channel(b, ci);
        let (x0, x1) = valid_range(nx, dx, p);
        if x0 >= x1 {
            continue;
        }
        for z in z0..z1 {
            let zz = z + dz;
            if zz < p || zz - p >= nz {
                continue;
            }
            for y in 0..ny {
                let yy = y + dy;
                if yy < p || yy - p >= ny {
                    continue;
                }
                let irow = &xin[((zz - p) * ny + yy - p) * nx..][..nx];
                let o = ((z - z0) * ny + y) * nx;
                row[o + x0..o + x1].copy_from_slice(&irow[x0 + dx - p..x1 + dx - p]);
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters slab patch-row gradients back onto the
/// `c_in` input channels of one batch element.
fn col2im<T: Real>(d_col: &[T], dims: [usize; 3], k: usize, z0: usize, z1: usize, d_in: &mut [T]) {
    let k3 = k * k * k;
    let p = k / 2;
    let [nx, ny, nz] = dims;
    let n = nx * ny * nz;
    let m = (z1 - z0) * ny * nx;
    for (ci, g) in d_in.chunks_mut(n).enumerate() {
        for t in 0..k3 {
            let (dz, dy, dx) = (t / (k * k), (t / k) % k, t % k);
            let row = &d_col[(ci * k3 + t) * m..][..m];
            let (x0, x1) = valid_range(nx, dx, p);
            if x0 >= x1 {
                continue;
            }
            for z in z0..z1 {
                let zz = z + dz;
                if zz < p || zz - p >= nz {
                    continue;
                }
                for y in 0..ny {
                    let yy = y + dy;
                    if yy < p || yy - p >= ny {
                        continue;
                    }
                    let grow = &mut g[((zz - p) * ny + yy - p) * nx..][..nx];
                    let src = &row[((z - z0) * ny + y) * nx..][..nx];
                    for (o, &v) in grow[x0 + dx - p..x1 + dx - p].iter_mut().zip(&src[x0..x1]) {
                        *o += v;
                    }
                }
            }
        }
    }
}

/// Stride-1 "same" convolution with a cubic odd kernel and zero padding.
/// Weights are `[c_out, c_in, k, k, k]`, x fastest.
pub fn conv3d_forward<T: Real>(
    x: &Tensor<T>,
    w: &[T],
    bias: Option<&[T]>,
    c_out: usize,
    k: usize,
) -> Tensor<T> {
    let c_in = x.channels;
    let k3 = k * k * k;
    assert_eq!(w.len(), c_out * c_in * k3, "conv weight shape");
    assert!(k % 2 == 1, "conv kernel must be odd");
    let [nx, ny, nz] = x.dims;
    let (n, plane, rows) = (x.voxels(), nx * ny, c_in * k3);
    let depth = slab_depth(rows, plane, nz);
    let mut out = Tensor::zeros(x.batch, c_out, x.dims);
    out.data.par_chunks_mut(c_out * n).enumerate().for_each(|(b, o)| {
        let mut col = vec![T::zero(); rows * depth * plane];
        let mut block = vec![T::zero(); c_out * depth * plane];
        for z0 in (0..nz).step_by(depth) {
            let z1 = (z0 + depth).min(nz);
            let m = (z1 - z0) * plane;
            im2col(x, b, k, z0, z1, &mut col[..rows * m]);
            matmul(Mat::new(w, c_out, rows), Mat::new(&col[..rows * m], rows, m), T::zero(), &mut block[..c_out * m]);
            for co in 0..c_out {
                let dst = &mut o[co * n + z0 * plane..][..m];
                let src = &block[co * m..][..m];
                match bias {
                    Some(bias) => dst.iter_mut().zip(src).for_each(|(d, &s)| *d = s + bias[co]),
                    None => dst.copy_from_slice(src),
                }
            }
        }
    });
    out
}

/// Gradients of [`conv3d_forward`]. Returns `(d_input, d_weight, d_bias)`;
/// `d_input` is skipped when `need_input_grad` is false.
pub fn conv3d_backward<T: Real>(
    x: &Tensor<T>,
    w: &[T],
    d_out: &Tensor<T>,
    k: usize,
    need_input_grad: bool,
) -> (Option<Tensor<T>>, Vec<T>, Vec<T>) {
    let c_in = x.channels;
    let c_out = d_out.channels;
    let k3 = k * k * k;
    let [nx, ny, nz] = x.dims;
    let (n, plane, rows) = (x.voxels(), nx * ny, c_in * k3);
    let depth = slab_depth(rows, plane, nz);

    // Per-element partial weight gradients, reduced below in batch order.
    let parts: Vec<(Vec<T>, Option<Vec<T>>)> = (0..x.batch)
        .into_par_iter()
        .map(|b| {
            let mut col = vec![T::zero(); rows * depth * plane];
            let mut block = vec![T::zero(); c_out * depth * plane];
            let mut d_w = vec![T::zero(); c_out * rows];
            let mut d_in = need_input_grad.then(|| vec![T::zero(); c_in * n]);
            for z0 in (0..nz).step_by(depth) {
                let z1 = (z0 + depth).min(nz);
                let m = (z1 - z0) * plane;
                for co in 0..c_out {
                    block[co * m..][..m].copy_from_slice(&d_out.channel(b, co)[z0 * plane..][..m]);
                }
                let dob = &block[..c_out * m];
                im2col(x, b, k, z0, z1, &mut col[..rows * m]);
                matmul(Mat::new(dob, c_out, m), Mat::new(&col[..rows * m], rows, m).t(), T::one(), &mut d_w);
                if let Some(d_in) = d_in.as_mut() {
                    let d_col = &mut col[..rows * m];
                    matmul(Mat::new(w, c_out, rows).t(), Mat::new(dob, c_out, m), T::zero(), d_col);
                    col2im(d_col, x.dims, k, z0, z1, d_in);
                }
            }
            (d_w, d_in)
        })
        .collect();

    let mut d_w = vec![T::zero(); c_out * rows];
    for (pw, _) in &parts {
        d_w.iter_mut().zip(pw).for_each(|(a, &b)| *a += b);
    }
    let d_in = need_input_grad.then(|| {
        let data = parts.into_iter().flat_map(|(_, d)| d.unwrap_or_default()).collect();
        Tensor::from_vec(x.batch, c_in, x.dims, data)
    });
    let d_b = (0..c_out)
        .map(|co| {
            let mut s = 0.0f64;
            for b in 0..d_out.batch {
                s += d_out.channel(b, co).iter().map(|v| v.as_f64()).sum::<f64>();
            }
            T::lit(s)
        })
        .collect();
    (d_in, d_w, d_b)
}

/// Which statistics batch normalization uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Statistics of the current batch (training).
    Batch,
    /// Stored running statistics (inference).
    Running,
}

#[derive(Debug, Clone)]
pub struct BnCache<T> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<f64>,
    pub mode: BnMode,
}

/// Per-channel batch statistics `(mean, unbiased variance)` observed in
/// [`BnMode::Batch`]; used to update running averages.
pub type BnStats = Vec<(f64, f64)>;

pub fn batchnorm_forward<T: Real>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    running_mean: &[T],
    running_var: &[T],
    eps: f64,
    mode: BnMode,
) -> (Tensor<T>, BnCache<T>, BnStats) {
    let c = x.channels;
    let m = (x.batch * x.voxels()) as f64;
    let mut stats = Vec::new();
    let mut mean = vec![0.0f64; c];
    let mut inv_std = vec![0.0f64; c];
    for ch in 0..c {
        match mode {
            BnMode::Batch => {
                let mut s = 0.0;
                for b in 0..x.batch {
                    s += x.channel(b, ch).iter().map(|v| v.as_f64()).sum::<f64>();
                }
                let mu = s / m;
                let mut ss = 0.0;
                for b in 0..x.batch {
                    ss += x
                        .channel(b, ch)
                        .iter()
                        .map(|v| (v.as_f64() - mu).powi(2))
                        .sum::<f64>();
                }
                let var = ss / m;
                mean[ch] = mu;
                inv_std[ch] = 1.0 / (var + eps).sqrt();
                let unbiased = if m > 1.0 { ss / (m - 1.0) } else { var };
                stats.push((mu, unbiased));
            }
            BnMode::Running => {
                mean[ch] = running_mean[ch].as_f64();
                inv_std[ch] = 1.0 / (running_var[ch].as_f64() + eps).sqrt();
            }
        }
    }
    let mut xhat = Tensor::zeros(x.batch, c, x.dims);
    let mut y = Tensor::zeros(x.batch, c, x.dims);
    for b in 0..x.batch {
        for ch in 0..c {
            let (mu, is) = (T::lit(mean[ch]), T::lit(inv_std[ch]));
            let (g, be) = (gamma[ch], beta[ch]);
            let src = x.channel(b, ch);
            let xh = xhat.channel_mut(b, ch);
            for (o, &v) in xh.iter_mut().zip(src) {
                *o = (v - mu) * is;
            }
            let xh = xhat.channel(b, ch).to_vec();
            for (o, v) in y.channel_mut(b, ch).iter_mut().zip(xh) {
                *o = g * v + be;
            }
        }
    }
    (y, BnCache { xhat, inv_std, mode }, stats)
}

/// Returns `(d_x, d_gamma, d_beta)`.
pub fn batchnorm_backward<T: Real>(
    d_y: &Tensor<T>,
    cache: &BnCache<T>,
    gamma: &[T],
) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let c = d_y.channels;
    let m = (d_y.batch * d_y.voxels()) as f64;
    let mut d_x = Tensor::zeros(d_y.batch, c, d_y.dims);
    let mut d_gamma = Vec::with_capacity(c);
    let mut d_beta = Vec::with_capacity(c);
    for ch in 0..c {
        let mut sum_dy = 0.0f64;
        let mut sum_dy_xhat = 0.0f64;
        for b in 0..d_y.batch {
            for (&g, &xh) in d_y.channel(b, ch).iter().zip(cache.xhat.channel(b, ch)) {
                sum_dy += g.as_f64();
                sum_dy_xhat += g.as_f64() * xh.as_f64();
            }
        }
        d_gamma.push(T::lit(sum_dy_xhat));
        d_beta.push(T::lit(sum_dy));
        let scale = gamma[ch].as_f64() * cache.inv_std[ch];
        for b in 0..d_y.batch {
            let dy = d_y.channel(b, ch).to_vec();
            let xh = cache.xhat.channel(b, ch).to_vec();
            let out = d_x.channel_mut(b, ch);
            match cache.mode {
                BnMode::Batch => {
                    let k = T::lit(scale / m);
                    let (s1, s2) = (T::lit(sum_dy), T::lit(sum_dy_xhat));
                    let mm = T::lit(m);
                    for i in 0..out.len() {
                        out[i] = k * (mm * dy[i] - s1 - xh[i] * s2);
                    }
                }
                BnMode::Running => {
                    let k = T::lit(scale);
                    for i in 0..out.len() {
                        out[i] = k * dy[i];
                    }
                }
            }
        }
    }
    (d_x, d_gamma, d_beta)
}

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.max(T::zero()))
}

/// Gradient of ReLU given its output.
pub fn relu_backward<T: Real>(out: &Tensor<T>, d_out: &Tensor<T>) -> Tensor<T> {
    let mut g = d_out.clone();
    g.data
        .iter_mut()
        .zip(&out.data)
        .for_each(|(d, &o)| {
            if o <= T::zero() {
                *d = T::zero();
            }
        });
    g
}

/// 2×2×2 max pooling with stride 2; returns the argmax index (within the
/// input channel) for every output voxel. Ties go to the first voxel in
/// x-fastest order.
pub fn maxpool2_forward<T: Real>(x: &Tensor<T>) -> (Tensor<T>, Vec<u32>) {
    let [nx, ny, nz] = x.dims;
    assert!(nx % 2 == 0 && ny % 2 == 0 && nz % 2 == 0, "maxpool needs even dims");
    let od = [nx / 2, ny / 2, nz / 2];
    let mut out = Tensor::zeros(x.batch, x.channels, od);
    let mut arg = vec![0u32; out.data.len()];
    let on = out.voxels();
    for b in 0..x.batch {
        for c in 0..x.channels {
            let src = x.channel(b, c);
            let base = (b * x.channels + c) * on;
            for k in 0..od[2] {
                for j in 0..od[1] {
                    for i in 0..od[0] {
                        let mut best = T::neg_infinity();
                        let mut at = 0usize;
                        for dz in 0..2 {
                            for dy in 0..2 {
                                for dx in 0..2 {
                                    let idx = ((2 * k + dz) * ny + 2 * j + dy) * nx + 2 * i + dx;
                                    if src[idx] > best {
                                        best = src[idx];
                                        at = idx;
                                    }
                                }
                            }
                        }
                        let o = base + (k * od[1] + j) * od[0] + i;
                        out.data[o] = best;
                        arg[o] = at as u32;
                    }
                }
            }
        }
    }
    (out, arg)
}

pub fn maxpool2_backward<T: Real>(
    d_out: &Tensor<T>,
    argmax: &[u32],
    input_dims: [usize; 3],
) -> Tensor<T> {
    let mut d_in = Tensor::zeros(d_out.batch, d_out.channels, input_dims);
    let on = d_out.voxels();
    for b in 0..d_out.batch {
        for c in 0..d_out.channels {
            let base = (b * d_out.channels + c) * on;
            let g = d_in.channel_mut(b, c);
            for o in 0..on {
                g[argmax[base + o] as usize] += d_out.data[base + o];
            }
        }
    }
    d_in
}

/// Transpose convolution with kernel 2 and stride 2 (exactly doubles every
/// spatial dim). Weights are `[c_in, c_out, 2, 2, 2]`.
pub fn deconv2_forward<T: Real>(x: &Tensor<T>, w: &[T], bias: &[T], c_out: usize) -> Tensor<T> {
    let c_in = x.channels;
    assert_eq!(w.len(), c_in * c_out * 8, "deconv weight shape");
    let [nx, ny, nz] = x.dims;
    let od = [2 * nx, 2 * ny, 2 * nz];
    let mut out = Tensor::zeros(x.batch, c_out, od);
    let on = out.voxels();
    out.data.par_chunks_mut(on).enumerate().for_each(|(bc, o)| {
        let (b, co) = (bc / c_out, bc % c_out);
        o.fill(bias[co]);
        for ci in 0..c_in {
            let src = x.channel(b, ci);
            for tap in 0..8 {
                let (a, bb, c) = (tap & 1, (tap >> 1) & 1, tap >> 2);
                let wv = w[(ci * c_out + co) * 8 + tap];
                for z in 0..nz {
                    for y in 0..ny {
                        let srow = &src[(z * ny + y) * nx..][..nx];
                        let orow = &mut o[((2 * z + c) * od[1] + 2 * y + bb) * od[0]..][..od[0]];
                        for (xi, &s) in srow.iter().enumerate() {
                            orow[2 * xi + a] += wv * s;
                        }
                    }
                }
            }
        }
    });
    out
}

/// Returns `(d_input, d_weight, d_bias)`.
pub fn deconv2_backward<T: Real>(
    x: &Tensor<T>,
    w: &[T],
    d_out: &Tensor<T>,
) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let c_in = x.channels;
    let c_out = d_out.channels;
    let [nx, ny, nz] = x.dims;
    let od = d_out.dims;
    let n = x.voxels();
    let mut d_in = Tensor::zeros(x.batch, c_in, x.dims);
    d_in.data.par_chunks_mut(n).enumerate().for_each(|(bc, g)| {
        let (b, ci) = (bc / c_in, bc % c_in);
        for co in 0..c_out {
            let dout = d_out.channel(b, co);
            for tap in 0..8 {
                let (a, bb, c) = (tap & 1, (tap >> 1) & 1, tap >> 2);
                let wv = w[(ci * c_out + co) * 8 + tap];
                for z in 0..nz {
                    for y in 0..ny {
                        let grow = &mut g[(z * ny + y) * nx..][..nx];
                        let orow = &dout[((2 * z + c) * od[1] + 2 * y + bb) * od[0]..][..od[0]];
                        for (xi, gv) in grow.iter_mut().enumerate() {
                            *gv += wv * orow[2 * xi + a];
                        }
                    }
                }
            }
        }
    });
    let mut d_w = vec![T::zero(); c_in * c_out * 8];
    d_w.par_chunks_mut(c_out * 8).enumerate().for_each(|(ci, gw)| {
        for b in 0..x.batch {
            let src = x.channel(b, ci);
            for co in 0..c_out {
                let dout = d_out.channel(b, co);
                for tap in 0..8 {
                    let (a, bb, c) = (tap & 1, (tap >> 1) & 1, tap >> 2);
                    let mut acc = T::zero();
                    for z in 0..nz {
                        for y in 0..ny {
                            let srow = &src[(z * ny + y) * nx..][..nx];
                            let orow =
                                &dout[((2 * z + c) * od[1] + 2 * y + bb) * od[0]..][..od[0]];
                            for (xi, &s) in srow.iter().enumerate() {
                                acc += s * orow[2 * xi + a];
                            }
                        }
                    }
                    gw[co * 8 + tap] += acc;
                }
            }
        }
    });
    let d_b = (0..c_out)
        .map(|co| {
            let mut s = 0.0f64;
            for b in 0..d_out.batch {
                s += d_out.channel(b, co).iter().map(|v| v.as_f64()).sum::<f64>();
            }
            T::lit(s)
        })
        .collect();
    (d_in, d_w, d_b)
}

/// Trilinear ×2 upsampling followed by summing groups of adjacent channels
/// down to `c_out` channels (parameter-free shortcut around the deconv).
pub fn upsample_additive_forward<T: Real>(x: &Tensor<T>, c_out: usize) -> Tensor<T> {
    assert_eq!(x.channels % c_out, 0, "channel count must divide");
    let r = x.channels / c_out;
    let od = x.dims.map(|d| 2 * d);
    let mut out = Tensor::zeros(x.batch, c_out, od);
    for b in 0..x.batch {
        for co in 0..c_out {
            for g in 0..r {
                let up = resize_trilinear(x.channel(b, co * r + g), x.dims, od);
                out.channel_mut(b, co)
                    .iter_mut()
                    .zip(&up)
                    .for_each(|(o, &u)| *o += u);
            }
        }
    }
    out
}

pub fn upsample_additive_backward<T: Real>(d_out: &Tensor<T>, c_in: usize) -> Tensor<T> {
    let c_out = d_out.channels;
    let r = c_in / c_out;
    let id = d_out.dims.map(|d| d / 2);
    let mut d_in = Tensor::zeros(d_out.batch, c_in, id);
    for b in 0..d_out.batch {
        for co in 0..c_out {
            let g = resize_trilinear_adjoint(d_out.channel(b, co), id, d_out.dims);
            for k in 0..r {
                d_in.channel_mut(b, co * r + k).copy_from_slice(&g);
            }
        }
    }
    d_in
}

/// Global average pooling to `[batch, channels]`.
pub fn global_avg_pool<T: Real>(x: &Tensor<T>) -> Vec<T> {
    let n = x.voxels() as f64;
    let mut out = Vec::with_capacity(x.batch * x.channels);
    for b in 0..x.batch {
        for c in 0..x.channels {
            out.push(T::lit(x.channel(b, c).iter().map(|v| v.as_f64()).sum::<f64>() / n));
        }
    }
    out
}

pub fn global_avg_pool_backward<T: Real>(
    d_pooled: &[T],
    batch: usize,
    channels: usize,
    dims: [usize; 3],
) -> Tensor<T> {
    let mut g = Tensor::zeros(batch, channels, dims);
    let inv = T::lit(1.0 / (dims[0] * dims[1] * dims[2]) as f64);
    for b in 0..batch {
        for c in 0..channels {
            let v = d_pooled[b * channels + c] * inv;
            g.channel_mut(b, c).fill(v);
        }
    }
    g
}

/// Fully-connected layer `y = W·x + b` per batch row; `W` is `[out, in]`.
pub fn dense_forward<T: Real>(x: &[T], batch: usize, w: &[T], bias: &[T]) -> Vec<T> {
    let n_out = bias.len();
    let n_in = w.len() / n_out;
    let mut y = Vec::with_capacity(batch * n_out);
    for b in 0..batch {
        let row = &x[b * n_in..(b + 1) * n_in];
        for o in 0..n_out {
            let mut acc = bias[o].as_f64();
            for (wi, xi) in w[o * n_in..(o + 1) * n_in].iter().zip(row) {
                acc += wi.as_f64() * xi.as_f64();
            }
            y.push(T::lit(acc));
        }
    }
    y
}

/// Returns `(d_x, d_w, d_b)`.
pub fn dense_backward<T: Real>(
    x: &[T],
    batch: usize,
    w: &[T],
    d_y: &[T],
    n_out: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let n_in = w.len() / n_out;
    let mut d_x = vec![T::zero(); batch * n_in];
    let mut d_w = vec![T::zero(); w.len()];
    let mut d_b = vec![T::zero(); n_out];
    for b in 0..batch {
        for o in 0..n_out {
            let g = d_y[b * n_out + o];
            d_b[o] += g;
            for i in 0..n_in {
                d_w[o * n_in + i] += g * x[b * n_in + i];
                d_x[b * n_in + i] += g * w[o * n_in + i];
            }
        }
    }
    (d_x, d_w, d_b)
}
