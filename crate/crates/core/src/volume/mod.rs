//! Dense 3D grids: scalar volumes, soft label masks and displacement fields.
//!
//! All containers share one memory layout: x varies fastest, then y, then z.
//! Vector fields are channel-major (every x component, then every y
//! component, then every z component). Physical positions are in mm with
//! voxel `(i, j, k)` sitting at `(i·sx, j·sy, k·sz)`.

mod io;

pub use io::{
    header_path, payload_path, read_header, read_ddf, read_label, read_scalar, read_volume,
    write_volume, AnyVolume, VolumeHeader,
};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;

/// Voxel spacing used when nothing else is specified (0.8 mm isotropic).
pub const DEFAULT_SPACING_MM: f64 = 0.8;

/// Zero-variance guard for intensity normalization.
pub const NORMALIZE_STD_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridMeta {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
}

impl GridMeta {
    pub fn new(dims: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        let meta = GridMeta { dims, spacing };
        meta.validate()?;
        Ok(meta)
    }

    pub fn isotropic(dims: [usize; 3], spacing: f64) -> Result<Self> {
        Self::new(dims, [spacing; 3])
    }

    /// Cubic grid with the default 0.8 mm spacing.
    pub fn cube(n: usize) -> Self {
        Self::isotropic([n; 3], DEFAULT_SPACING_MM).expect("n >= 1")
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidGrid(format!("zero dimension in {:?}", self.dims)));
        }
        if self.spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::InvalidGrid(format!(
                "spacing must be positive, got {:?}",
                self.spacing
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.dims[1] + j) * self.dims[0] + i
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let nx = self.dims[0];
        let ny = self.dims[1];
        [idx % nx, (idx / nx) % ny, idx / (nx * ny)]
    }

    /// Physical position of a voxel in mm.
    #[inline]
    pub fn position(&self, idx: usize) -> [f64; 3] {
        let c = self.coords(idx);
        [
            c[0] as f64 * self.spacing[0],
            c[1] as f64 * self.spacing[1],
            c[2] as f64 * self.spacing[2],
        ]
    }

    /// Physical extent `(n - 1)·s` per axis.
    pub fn extent(&self) -> [f64; 3] {
        [0, 1, 2].map(|a| (self.dims[a] - 1) as f64 * self.spacing[a])
    }

    pub fn center(&self) -> [f64; 3] {
        self.extent().map(|e| 0.5 * e)
    }

    /// Grid at resolution level `level`: dims `ceil(n / 2^level)`, spacing scaled by `2^level`.
    pub fn level(&self, level: usize) -> GridMeta {
        let f = 1usize << level;
        GridMeta {
            dims: self.dims.map(|n| n.div_ceil(f)),
            spacing: self.spacing.map(|s| s * f as f64),
        }
    }

    pub fn same_dims(&self, other: &GridMeta) -> bool {
        self.dims == other.dims
    }
}

fn check_len(meta: &GridMeta, channels: usize, len: usize) -> Result<()> {
    meta.validate()?;
    let expected = meta.len() * channels;
    if expected != len {
        return Err(Error::SizeMismatch {
            expected,
            found: len,
        });
    }
    Ok(())
}

fn check_finite<T: Real>(data: &[T], what: &'static str) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite { what, index }),
        None => Ok(()),
    }
}

/// Scalar intensity grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume<T = f32> {
    meta: GridMeta,
    data: Vec<T>,
}

impl<T: Real> Volume<T> {
    pub fn new(meta: GridMeta, data: Vec<T>) -> Result<Self> {
        check_len(&meta, 1, data.len())?;
        check_finite(&data, "volume")?;
        Ok(Volume { meta, data })
    }

    pub fn zeros(meta: GridMeta) -> Self {
        Volume {
            data: vec![T::zero(); meta.len()],
            meta,
        }
    }

    pub fn constant(meta: GridMeta, value: T) -> Self {
        Volume {
            data: vec![value; meta.len()],
            meta,
        }
    }

    /// Builds a volume by evaluating `f` at every voxel's physical position.
    pub fn from_fn(meta: GridMeta, mut f: impl FnMut([f64; 3]) -> f64) -> Self {
        let data = (0..meta.len()).map(|i| T::lit(f(meta.position(i)))).collect();
        Volume { meta, data }
    }

    /// Unchecked constructor for kernels whose output is finite by construction.
    pub(crate) fn from_parts(meta: GridMeta, data: Vec<T>) -> Self {
        debug_assert_eq!(meta.len(), data.len());
        Volume { meta, data }
    }

    pub fn meta(&self) -> &GridMeta {
        &self.meta
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> T {
        self.data[self.meta.index(i, j, k)]
    }

    pub fn cast<U: Real>(&self) -> Volume<U> {
        Volume {
            meta: self.meta,
            data: crate::real::cast_slice(&self.data),
        }
    }
}

/// Per-voxel foreground probability in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMask<T = f32> {
    meta: GridMeta,
    data: Vec<T>,
}

impl<T: Real> LabelMask<T> {
    pub fn new(meta: GridMeta, data: Vec<T>) -> Result<Self> {
        check_len(&meta, 1, data.len())?;
        for (index, &v) in data.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    what: "label",
                    index,
                });
            }
            if v < T::zero() || v > T::one() {
                return Err(Error::LabelOutOfRange {
                    index,
                    value: v.as_f64() as f32,
                });
            }
        }
        Ok(LabelMask { meta, data })
    }

    pub fn zeros(meta: GridMeta) -> Self {
        LabelMask {
            data: vec![T::zero(); meta.len()],
            meta,
        }
    }

    /// Label from a predicate on physical positions (1 inside, 0 outside).
    pub fn from_predicate(meta: GridMeta, mut inside: impl FnMut([f64; 3]) -> bool) -> Self {
        let data = (0..meta.len())
            .map(|i| if inside(meta.position(i)) { T::one() } else { T::zero() })
            .collect();
        LabelMask { meta, data }
    }

    pub(crate) fn from_parts(meta: GridMeta, data: Vec<T>) -> Self {
        debug_assert_eq!(meta.len(), data.len());
        LabelMask { meta, data }
    }

    pub fn meta(&self) -> &GridMeta {
        &self.meta
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn mass(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|v| *v == T::zero())
    }

    /// Hard mask: 1 where the probability is at least `threshold`.
    pub fn binarize(&self, threshold: f64) -> LabelMask<T> {
        let data = self
            .data
            .iter()
            .map(|v| if v.as_f64() >= threshold { T::one() } else { T::zero() })
            .collect();
        LabelMask {
            meta: self.meta,
            data,
        }
    }

    pub fn cast<U: Real>(&self) -> LabelMask<U> {
        LabelMask {
            meta: self.meta,
            data: crate::real::cast_slice(&self.data),
        }
    }
}

/// Dense displacement field in mm, sampled on the fixed-image grid.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField<T = f32> {
    meta: GridMeta,
    data: Vec<T>,
}

impl<T: Real> DisplacementField<T> {
    pub fn new(meta: GridMeta, data: Vec<T>) -> Result<Self> {
        check_len(&meta, 3, data.len())?;
        check_finite(&data, "displacement field")?;
        Ok(DisplacementField { meta, data })
    }

    pub fn zeros(meta: GridMeta) -> Self {
        DisplacementField {
            data: vec![T::zero(); 3 * meta.len()],
            meta,
        }
    }

    pub fn constant(meta: GridMeta, u: [f64; 3]) -> Self {
        Self::from_fn(meta, |_| u)
    }

    /// Evaluates `f` at each voxel's physical position.
    pub fn from_fn(meta: GridMeta, mut f: impl FnMut([f64; 3]) -> [f64; 3]) -> Self {
        let n = meta.len();
        let mut data = vec![T::zero(); 3 * n];
        for i in 0..n {
            let u = f(meta.position(i));
            for c in 0..3 {
                data[c * n + i] = T::lit(u[c]);
            }
        }
        DisplacementField { meta, data }
    }

    pub(crate) fn from_parts(meta: GridMeta, data: Vec<T>) -> Self {
        debug_assert_eq!(3 * meta.len(), data.len());
        DisplacementField { meta, data }
    }

    pub fn meta(&self) -> &GridMeta {
        &self.meta
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn component(&self, c: usize) -> &[T] {
        let n = self.meta.len();
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn vector(&self, idx: usize) -> [T; 3] {
        let n = self.meta.len();
        [self.data[idx], self.data[n + idx], self.data[2 * n + idx]]
    }

    pub fn scaled(&self, factor: T) -> Self {
        DisplacementField {
            meta: self.meta,
            data: self.data.iter().map(|&v| v * factor).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> DisplacementField<U> {
        DisplacementField {
            meta: self.meta,
            data: crate::real::cast_slice(&self.data),
        }
    }
}

/// Affine map `x ↦ A·x + t` on physical coordinates (mm).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineParams {
    /// Row-major 3×3 linear part.
    pub matrix: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl Default for AffineParams {
    fn default() -> Self {
        Self::identity()
    }
}

impl AffineParams {
    pub const IDENTITY_ARRAY: [f64; 12] = [1., 0., 0., 0., 1., 0., 0., 0., 1., 0., 0., 0.];

    pub fn identity() -> Self {
        Self::from_array(Self::IDENTITY_ARRAY)
    }

    pub fn translation(t: [f64; 3]) -> Self {
        AffineParams {
            translation: t,
            ..Self::identity()
        }
    }

    /// Nine row-major matrix entries followed by the translation.
    pub fn from_array(p: [f64; 12]) -> Self {
        AffineParams {
            matrix: [[p[0], p[1], p[2]], [p[3], p[4], p[5]], [p[6], p[7], p[8]]],
            translation: [p[9], p[10], p[11]],
        }
    }

    pub fn to_array(&self) -> [f64; 12] {
        let m = &self.matrix;
        let t = &self.translation;
        [
            m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2], m[2][0], m[2][1], m[2][2], t[0],
            t[1], t[2],
        ]
    }

    pub fn from_nalgebra(a: &Matrix3<f64>, t: &Vector3<f64>) -> Self {
        AffineParams {
            matrix: [
                [a[(0, 0)], a[(0, 1)], a[(0, 2)]],
                [a[(1, 0)], a[(1, 1)], a[(1, 2)]],
                [a[(2, 0)], a[(2, 1)], a[(2, 2)]],
            ],
            translation: [t[0], t[1], t[2]],
        }
    }

    pub fn linear(&self) -> Matrix3<f64> {
        let m = &self.matrix;
        Matrix3::new(
            m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2], m[2][0], m[2][1], m[2][2],
        )
    }

    pub fn determinant(&self) -> f64 {
        self.linear().determinant()
    }

    #[inline]
    pub fn apply(&self, x: [f64; 3]) -> [f64; 3] {
        let m = &self.matrix;
        [0, 1, 2].map(|r| m[r][0] * x[0] + m[r][1] * x[1] + m[r][2] * x[2] + self.translation[r])
    }

    /// `self ∘ inner`: apply `inner` first, then `self`.
    pub fn after(&self, inner: &AffineParams) -> AffineParams {
        let a = self.linear() * inner.linear();
        let t = self.linear() * Vector3::from(inner.translation) + Vector3::from(self.translation);
        Self::from_nalgebra(&a, &t)
    }

    pub fn inverse(&self) -> Option<AffineParams> {
        let inv = self.linear().try_inverse()?;
        let t = -(inv * Vector3::from(self.translation));
        Some(Self::from_nalgebra(&inv, &t))
    }
}

/// Rescales a volume to zero mean and unit population standard deviation.
///
/// Constant volumes map to all zeros.
pub fn normalize_intensity<T: Real>(v: &Volume<T>) -> Result<Volume<T>> {
    check_finite(&v.data, "volume")?;
    if v.data.len() < 2 {
        return Err(Error::InvalidGrid(
            "normalization needs at least two voxels".into(),
        ));
    }
    let n = v.data.len() as f64;
    let mean = v.data.iter().map(|x| x.as_f64()).sum::<f64>() / n;
    let var = v
        .data
        .iter()
        .map(|x| {
            let d = x.as_f64() - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    let std = var.sqrt();
    let data = if std < NORMALIZE_STD_FLOOR {
        vec![T::zero(); v.data.len()]
    } else {
        v.data
            .iter()
            .map(|x| T::lit((x.as_f64() - mean) / std))
            .collect()
    };
    Ok(Volume::from_parts(v.meta, data))
}

/// Probability-weighted centre of mass in physical mm.
pub fn centroid<T: Real>(l: &LabelMask<T>) -> Result<[f64; 3]> {
    let meta = l.meta;
    let [nx, ny, _] = meta.dims;
    let mut mass = 0.0;
    let mut acc = [0.0f64; 3];
    for (idx, &p) in l.data.iter().enumerate() {
        let p = p.as_f64();
        if p == 0.0 {
            continue;
        }
        let i = idx % nx;
        let j = (idx / nx) % ny;
        let k = idx / (nx * ny);
        mass += p;
        acc[0] += p * i as f64;
        acc[1] += p * j as f64;
        acc[2] += p * k as f64;
    }
    if mass <= 0.0 {
        return Err(Error::EmptyLabel);
    }
    Ok([0, 1, 2].map(|a| acc[a] / mass * meta.spacing[a]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn grid_rejects_bad_meta() {
        assert!(GridMeta::new([0, 2, 2], [1.0; 3]).is_err());
        assert!(GridMeta::new([2, 2, 2], [1.0, -1.0, 1.0]).is_err());
        assert!(GridMeta::new([2, 2, 2], [1.0, f64::NAN, 1.0]).is_err());
    }

    #[test]
    fn level_dims_round_up() {
        let m = GridMeta::isotropic([32, 17, 1], 0.8).unwrap();
        assert_eq!(m.level(1).dims, [16, 9, 1]);
        assert_eq!(m.level(4).dims, [2, 2, 1]);
        assert_eq!(m.level(2).spacing, [3.2; 3]);
    }

    #[test]
    fn normalize_constant_is_zero() {
        let v = Volume::<f32>::constant(GridMeta::cube(3), 5.0);
        let n = normalize_intensity(&v).unwrap();
        assert!(n.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn normalize_two_values() {
        let meta = GridMeta::isotropic([2, 1, 1], 1.0).unwrap();
        let v = Volume::new(meta, vec![0.0f32, 2.0]).unwrap();
        assert_eq!(normalize_intensity(&v).unwrap().data(), &[-1.0, 1.0]);
    }

    #[test]
    fn normalize_random_moments_and_idempotence() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let meta = GridMeta::cube(8);
        let v = Volume::new(meta, (0..512).map(|_| rng.gen_range(-3.0f32..10.0)).collect()).unwrap();
        let n = normalize_intensity(&v).unwrap();
        let d: Vec<f64> = n.data().iter().map(|&x| x as f64).collect();
        let mean = d.iter().sum::<f64>() / 512.0;
        let std = (d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 512.0).sqrt();
        assert!(mean.abs() < 1e-5);
        assert!((std - 1.0).abs() < 1e-5);
        let twice = normalize_intensity(&n).unwrap();
        for (a, b) in n.data().iter().zip(twice.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn normalize_rejects_nan() {
        let meta = GridMeta::isotropic([2, 1, 1], 1.0).unwrap();
        let v = Volume::from_parts(meta, vec![0.0f32, f32::NAN]);
        assert!(matches!(normalize_intensity(&v), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn centroid_point_mass() {
        let meta = GridMeta::cube(4);
        let mut data = vec![0.0f32; 64];
        data[meta.index(1, 2, 3)] = 1.0;
        let c = centroid(&LabelMask::new(meta, data).unwrap()).unwrap();
        for (got, want) in c.iter().zip([0.8, 1.6, 2.4]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn centroid_symmetric_pair() {
        let meta = GridMeta::cube(3);
        let mut data = vec![0.0f32; 27];
        data[meta.index(0, 1, 1)] = 1.0;
        data[meta.index(2, 1, 1)] = 1.0;
        let c = centroid(&LabelMask::new(meta, data).unwrap()).unwrap();
        assert!((c[0] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn centroid_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let meta = GridMeta::isotropic([5, 4, 6], 0.7).unwrap();
        let data: Vec<f32> = (0..meta.len()).map(|_| rng.gen::<f32>()).collect();
        let mask = LabelMask::new(meta, data.clone()).unwrap();
        let mut num = [0.0f64; 3];
        let mut den = 0.0;
        for k in 0..6 {
            for j in 0..4 {
                for i in 0..5 {
                    let p = data[meta.index(i, j, k)] as f64;
                    den += p;
                    num[0] += p * i as f64 * 0.7;
                    num[1] += p * j as f64 * 0.7;
                    num[2] += p * k as f64 * 0.7;
                }
            }
        }
        let c = centroid(&mask).unwrap();
        for a in 0..3 {
            assert!((c[a] - num[a] / den).abs() < 1e-9);
        }
    }

    #[test]
    fn centroid_empty_is_error() {
        let mask = LabelMask::<f32>::zeros(GridMeta::cube(2));
        assert!(matches!(centroid(&mask), Err(Error::EmptyLabel)));
    }

    #[test]
    fn label_range_enforced() {
        let meta = GridMeta::cube(1);
        assert!(matches!(
            LabelMask::new(meta, vec![1.5f32]),
            Err(Error::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn affine_compose_and_inverse() {
        let a = AffineParams::from_array([1.1, 0.1, 0.0, -0.05, 0.9, 0.02, 0.0, 0.03, 1.0, 1.0, -2.0, 0.5]);
        let b = AffineParams::translation([0.3, 0.2, -0.1]);
        let x = [1.0, 2.0, 3.0];
        let via = a.apply(b.apply(x));
        let direct = a.after(&b).apply(x);
        for i in 0..3 {
            assert!((via[i] - direct[i]).abs() < 1e-12);
        }
        let back = a.inverse().unwrap().apply(a.apply(x));
        for i in 0..3 {
            assert!((back[i] - x[i]).abs() < 1e-12);
        }
    }
}
