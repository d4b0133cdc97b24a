//! Label similarity measures and deformation regularizers.
//!
//! Every measure returns its value together with exact gradients. Sums are
//! accumulated in `f64` regardless of the element type, in a fixed order.

mod gaussian;
mod regularizer;

pub use gaussian::{gaussian_kernel, GaussianFilter, DEFAULT_TRUNCATE};
pub use regularizer::{bending_energy, l2_gradient_penalty, RegularizerKind};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::volume::{GridMeta, LabelMask};

/// Baseline regularization weight between bending energy and multiscale Dice.
pub const DEFAULT_ALPHA: f64 = 0.5;

/// Probability clip used by the cross-entropy.
pub const CE_EPSILON: f64 = 1e-6;

/// Value and gradients of a scalar function of two label maps.
#[derive(Debug, Clone)]
pub struct Scored<T = f32> {
    pub value: f64,
    /// Per-scale values (a single entry for single-scale measures).
    pub per_scale: Vec<f64>,
    pub d_fixed: Vec<T>,
    pub d_warped: Vec<T>,
}

/// Value and gradient of a DDF regularizer.
#[derive(Debug, Clone)]
pub struct Penalty<T = f32> {
    pub value: f64,
    pub d_ddf: Vec<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityKind {
    MultiscaleDice,
    MultiscaleCrossEntropy,
}

/// Scales of the multiscale label similarity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiscaleConfig {
    /// Isotropic Gaussian standard deviations in mm; 0 means unfiltered.
    pub sigmas_mm: Vec<f64>,
    /// Kernel half-width in standard deviations.
    #[serde(default = "default_truncate")]
    pub truncate: f64,
}

fn default_truncate() -> f64 {
    DEFAULT_TRUNCATE
}

impl Default for MultiscaleConfig {
    /// Seven scales: 0, 1, 2, 4, 8, 16 and 32 mm.
    fn default() -> Self {
        MultiscaleConfig {
            sigmas_mm: vec![0.0, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0],
            truncate: DEFAULT_TRUNCATE,
        }
    }
}

impl MultiscaleConfig {
    pub fn single_scale() -> Self {
        MultiscaleConfig {
            sigmas_mm: vec![0.0],
            truncate: DEFAULT_TRUNCATE,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sigmas_mm.is_empty() {
            return Err(Error::InvalidConfig("at least one scale is required".into()));
        }
        if self.sigmas_mm.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::InvalidConfig(format!(
                "scales must be finite and non-negative: {:?}",
                self.sigmas_mm
            )));
        }
        if !(self.truncate.is_finite() && self.truncate > 0.0) {
            return Err(Error::InvalidConfig("truncate must be positive".into()));
        }
        Ok(())
    }

    /// Precomputes the per-axis kernels for one grid.
    pub fn filters<T: Real>(&self, meta: &GridMeta) -> Result<MultiscaleFilters<T>> {
        self.validate()?;
        Ok(MultiscaleFilters {
            meta: *meta,
            filters: self
                .sigmas_mm
                .iter()
                .map(|&s| GaussianFilter::new(meta, s, self.truncate))
                .collect(),
        })
    }
}

/// A [`MultiscaleConfig`] bound to a grid.
#[derive(Debug, Clone)]
pub struct MultiscaleFilters<T = f32> {
    meta: GridMeta,
    filters: Vec<GaussianFilter<T>>,
}

impl<T: Real> MultiscaleFilters<T> {
    pub fn meta(&self) -> &GridMeta {
        &self.meta
    }

    pub fn scales(&self) -> &[GaussianFilter<T>] {
        &self.filters
    }

    pub fn len(&self) -> usize {
        self.filters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.filters.is_empty()
    }

    /// Filtered copies of `x`, one per scale.
    pub fn stack(&self, x: &[T]) -> Vec<Vec<T>> {
        self.filters.iter().map(|f| f.apply(x)).collect()
    }
}

/// Gaussian-filters a label map; `σ = 0` returns it unchanged.
pub fn gaussian_filter<T: Real>(l: &LabelMask<T>, sigma_mm: f64) -> LabelMask<T> {
    let f = GaussianFilter::new(l.meta(), sigma_mm, DEFAULT_TRUNCATE);
    let data = f
        .apply(l.data())
        .into_iter()
        .map(|v| v.max(T::zero()).min(T::one()))
        .collect();
    LabelMask::from_parts(*l.meta(), data)
}

/// Soft Dice `2Σab / (Σa + Σb)` on raw slices with gradients for both.
///
/// Two empty maps carry no alignment information: they score 1 with zero
/// gradient.
pub fn soft_dice_slices<T: Real>(a: &[T], b: &[T]) -> (f64, Vec<T>, Vec<T>) {
    assert_eq!(a.len(), b.len());
    let mut sa = 0.0f64;
    let mut sb = 0.0f64;
    let mut sab = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x.as_f64(), y.as_f64());
        sa += x;
        sb += y;
        sab += x * y;
    }
    let den = sa + sb;
    if den <= 0.0 {
        return (1.0, vec![T::zero(); a.len()], vec![T::zero(); b.len()]);
    }
    let dice = 2.0 * sab / den;
    let inv = 1.0 / den;
    let da = b.iter().map(|&y| T::lit((2.0 * y.as_f64() - dice) * inv)).collect();
    let db = a.iter().map(|&x| T::lit((2.0 * x.as_f64() - dice) * inv)).collect();
    (dice, da, db)
}

pub fn soft_dice<T: Real>(a: &LabelMask<T>, b: &LabelMask<T>) -> Result<Scored<T>> {
    same_grid(a.meta(), b.meta())?;
    let (value, d_fixed, d_warped) = soft_dice_slices(a.data(), b.data());
    Ok(Scored {
        value,
        per_scale: vec![value],
        d_fixed,
        d_warped,
    })
}

fn same_grid(a: &GridMeta, b: &GridMeta) -> Result<()> {
    if a.dims != b.dims {
        return Err(Error::Shape(format!(
            "label grids differ: {:?} vs {:?}",
            a.dims, b.dims
        )));
    }
    Ok(())
}

fn check_filters<T: Real>(meta: &GridMeta, filters: &MultiscaleFilters<T>) -> Result<()> {
    if filters.meta.dims != meta.dims {
        return Err(Error::Shape(
            "multiscale filters were built for a different grid".into(),
        ));
    }
    Ok(())
}

/// Mean soft Dice over Gaussian-filtered copies of both maps.
pub fn multiscale_dice<T: Real>(
    fixed: &LabelMask<T>,
    warped: &LabelMask<T>,
    filters: &MultiscaleFilters<T>,
) -> Result<Scored<T>> {
    same_grid(fixed.meta(), warped.meta())?;
    check_filters(fixed.meta(), filters)?;
    Ok(multiscale_dice_slices(fixed.data(), warped.data(), filters, true))
}

/// Slice-level multiscale Dice; `fixed_grad = false` skips `d_fixed`.
pub fn multiscale_dice_slices<T: Real>(
    fixed: &[T],
    warped: &[T],
    filters: &MultiscaleFilters<T>,
    fixed_grad: bool,
) -> Scored<T> {
    let z = filters.len() as f64;
    let n = fixed.len();
    let mut per_scale = Vec::with_capacity(filters.len());
    let mut d_fixed = vec![T::zero(); if fixed_grad { n } else { 0 }];
    let mut d_warped = vec![T::zero(); n];
    let w = T::lit(1.0 / z);
    for f in filters.scales() {
        let fa = f.apply(fixed);
        let fb = f.apply(warped);
        let (dice, da, db) = soft_dice_slices(&fa, &fb);
        per_scale.push(dice);
        let gb = f.adjoint(&db);
        d_warped.iter_mut().zip(&gb).for_each(|(d, &g)| *d += w * g);
        if fixed_grad {
            let ga = f.adjoint(&da);
            d_fixed.iter_mut().zip(&ga).for_each(|(d, &g)| *d += w * g);
        }
    }
    Scored {
        value: per_scale.iter().sum::<f64>() / z,
        per_scale,
        d_fixed,
        d_warped,
    }
}

/// Multiscale Dice on stacks that were filtered before warping. Returns the
/// value, per-scale values and the gradient for each warped stack entry.
pub fn multiscale_dice_prefiltered<T: Real>(
    fixed_stack: &[Vec<T>],
    warped_stack: &[Vec<T>],
) -> (f64, Vec<f64>, Vec<Vec<T>>) {
    assert_eq!(fixed_stack.len(), warped_stack.len());
    let z = fixed_stack.len() as f64;
    let w = T::lit(1.0 / z);
    let mut per_scale = Vec::with_capacity(fixed_stack.len());
    let mut grads = Vec::with_capacity(fixed_stack.len());
    for (a, b) in fixed_stack.iter().zip(warped_stack) {
        let (dice, _, mut db) = soft_dice_slices(a, b);
        db.iter_mut().for_each(|g| *g *= w);
        per_scale.push(dice);
        grads.push(db);
    }
    (per_scale.iter().sum::<f64>() / z, per_scale, grads)
}

/// `Σᵢ Σ_c p_c(aᵢ) log p_c(bᵢ)` with `p₁ = v`, `p₂ = 1 − v`; each class
/// probability of `b` is floored at [`CE_EPSILON`] before the log.
pub fn cross_entropy_slices<T: Real>(a: &[T], b: &[T]) -> (f64, Vec<T>, Vec<T>) {
    assert_eq!(a.len(), b.len());
    let mut total = 0.0f64;
    let mut da = Vec::with_capacity(a.len());
    let mut db = Vec::with_capacity(b.len());
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x.as_f64(), y.as_f64());
        let p1 = y.max(CE_EPSILON);
        let p2 = (1.0 - y).max(CE_EPSILON);
        let (l1, l2) = (p1.ln(), p2.ln());
        let mut term = 0.0;
        if x != 0.0 {
            term += x * l1;
        }
        if x != 1.0 {
            term += (1.0 - x) * l2;
        }
        total += term;
        da.push(T::lit(l1 - l2));
        let mut g = 0.0;
        if y > CE_EPSILON {
            g += x / p1;
        }
        if 1.0 - y > CE_EPSILON {
            g -= (1.0 - x) / p2;
        }
        db.push(T::lit(g));
    }
    (total, da, db)
}

/// Mean over scales of the cross-entropy between filtered maps.
pub fn multiscale_cross_entropy<T: Real>(
    fixed: &LabelMask<T>,
    warped: &LabelMask<T>,
    filters: &MultiscaleFilters<T>,
) -> Result<Scored<T>> {
    same_grid(fixed.meta(), warped.meta())?;
    check_filters(fixed.meta(), filters)?;
    Ok(multiscale_cross_entropy_slices(fixed.data(), warped.data(), filters, true))
}

pub fn multiscale_cross_entropy_slices<T: Real>(
    fixed: &[T],
    warped: &[T],
    filters: &MultiscaleFilters<T>,
    fixed_grad: bool,
) -> Scored<T> {
    let z = filters.len() as f64;
    let n = fixed.len();
    let w = T::lit(1.0 / z);
    let mut per_scale = Vec::with_capacity(filters.len());
    let mut d_fixed = vec![T::zero(); if fixed_grad { n } else { 0 }];
    let mut d_warped = vec![T::zero(); n];
    for f in filters.scales() {
        let fa = f.apply(fixed);
        let fb = f.apply(warped);
        let (v, da, db) = cross_entropy_slices(&fa, &fb);
        per_scale.push(v);
        let gb = f.adjoint(&db);
        d_warped.iter_mut().zip(&gb).for_each(|(d, &g)| *d += w * g);
        if fixed_grad {
            let ga = f.adjoint(&da);
            d_fixed.iter_mut().zip(&ga).for_each(|(d, &g)| *d += w * g);
        }
    }
    Scored {
        value: per_scale.iter().sum::<f64>() / z,
        per_scale,
        d_fixed,
        d_warped,
    }
}

/// `−J + α·Ω`.
pub fn total_loss(similarity: f64, regularizer: f64, alpha: f64) -> f64 {
    -similarity + alpha * regularizer
}

/// Loss terms of one evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub similarity: f64,
    pub regularizer: f64,
    pub alpha: f64,
    pub total: f64,
    pub per_scale: Vec<f64>,
}

impl LossReport {
    pub fn new(similarity: f64, regularizer: f64, alpha: f64, per_scale: Vec<f64>) -> Self {
        LossReport {
            similarity,
            regularizer,
            alpha,
            total: total_loss(similarity, regularizer, alpha),
            per_scale,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_difference, relative_error};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mask(meta: GridMeta, d: Vec<f64>) -> LabelMask<f64> {
        LabelMask::new(meta, d).unwrap()
    }

    fn random_mask(meta: GridMeta, rng: &mut ChaCha8Rng) -> LabelMask<f64> {
        mask(meta, (0..meta.len()).map(|_| rng.gen()).collect())
    }

    #[test]
    fn dice_identical_is_one() {
        let meta = GridMeta::isotropic([4, 1, 1], 1.0).unwrap();
        let a = mask(meta, vec![1.0, 0.5, 0.0, 0.2]);
        let s = soft_dice(&a, &a).unwrap().value;
        // 2Σa²/2Σa equals 1 only for binary maps.
        let want = a.data().iter().map(|v| v * v).sum::<f64>() / a.data().iter().sum::<f64>();
        assert!((s - want).abs() < 1e-15);
        let bin = mask(meta, vec![1.0, 1.0, 0.0, 1.0]);
        assert_eq!(soft_dice(&bin, &bin).unwrap().value, 1.0);
    }

    #[test]
    fn dice_half_overlap() {
        let meta = GridMeta::isotropic([4, 1, 1], 1.0).unwrap();
        let a = mask(meta, vec![1.0, 1.0, 0.0, 0.0]);
        let b = mask(meta, vec![0.0, 1.0, 1.0, 0.0]);
        assert_eq!(soft_dice(&a, &b).unwrap().value, 0.5);
    }

    #[test]
    fn dice_both_empty_scores_one() {
        let meta = GridMeta::cube(2);
        let z = LabelMask::<f64>::zeros(meta);
        let s = soft_dice(&z, &z).unwrap();
        assert_eq!(s.value, 1.0);
        assert!(s.d_warped.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn dice_matches_direct_sums_and_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let meta = GridMeta::cube(4);
        let a = random_mask(meta, &mut rng);
        let b = random_mask(meta, &mut rng);
        let s = soft_dice(&a, &b).unwrap();
        let (mut sab, mut sa, mut sb) = (0.0, 0.0, 0.0);
        for i in 0..64 {
            sab += a.data()[i] * b.data()[i];
            sa += a.data()[i];
            sb += b.data()[i];
        }
        assert!((s.value - 2.0 * sab / (sa + sb)).abs() < 1e-6);
        let fd_b = central_difference(b.data(), 1e-6, |x| soft_dice_slices(a.data(), x).0);
        assert!(relative_error(&s.d_warped, &fd_b) < 1e-4);
        let fd_a = central_difference(a.data(), 1e-6, |x| soft_dice_slices(x, b.data()).0);
        assert!(relative_error(&s.d_fixed, &fd_a) < 1e-4);
    }

    #[test]
    fn default_scales() {
        let cfg = MultiscaleConfig::default();
        assert_eq!(cfg.sigmas_mm, vec![0.0, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0]);
    }

    #[test]
    fn multiscale_identical_is_one_and_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let meta = GridMeta::cube(6);
        let f = MultiscaleConfig::default().filters::<f64>(&meta).unwrap();
        let bin = LabelMask::<f64>::from_predicate(meta, |p| p[0] < 2.0 && p[1] > 1.0);
        let single = MultiscaleConfig::single_scale().filters::<f64>(&meta).unwrap();
        assert!((multiscale_dice(&bin, &bin, &single).unwrap().value - 1.0).abs() < 1e-12);
        // Blurred copies of a binary map overlap imperfectly under 2Σab/(Σa+Σb).
        let blurred = multiscale_dice(&bin, &bin, &f).unwrap();
        assert!(blurred.per_scale[0] == 1.0 && blurred.value < 1.0);
        let a = random_mask(meta, &mut rng);
        let b = random_mask(meta, &mut rng);
        let ab = multiscale_dice(&a, &b, &f).unwrap().value;
        let ba = multiscale_dice(&b, &a, &f).unwrap().value;
        assert!((ab - ba).abs() < 1e-12);
        assert!((0.0..=1.0).contains(&ab));
    }

    #[test]
    fn multiscale_single_scale_equals_soft_dice() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let meta = GridMeta::cube(4);
        let f = MultiscaleConfig::single_scale().filters::<f64>(&meta).unwrap();
        let a = random_mask(meta, &mut rng);
        let b = random_mask(meta, &mut rng);
        assert_eq!(
            multiscale_dice(&a, &b, &f).unwrap().value,
            soft_dice(&a, &b).unwrap().value
        );
    }

    #[test]
    fn disjoint_points_gain_signal_at_coarse_scales() {
        let meta = GridMeta::isotropic([16, 3, 3], 0.8).unwrap();
        let mut a = vec![0.0; meta.len()];
        let mut b = vec![0.0; meta.len()];
        a[meta.index(2, 1, 1)] = 1.0;
        b[meta.index(12, 1, 1)] = 1.0;
        let (a, b) = (mask(meta, a), mask(meta, b));
        let f = MultiscaleConfig::default().filters::<f64>(&meta).unwrap();
        let s = multiscale_dice(&a, &b, &f).unwrap();
        assert_eq!(s.per_scale[0], 0.0);
        assert!(s.per_scale[6] > 0.0);
        assert!(s.value > 0.0 && s.value < 1.0);
        // Oracle: dense-filter both maps, then the Dice ratio by direct sums.
        let dense = |x: &[f64], sigma| gaussian::tests::dense_oracle(x, &meta, sigma);
        let mut mean = 0.0;
        for &sigma in &MultiscaleConfig::default().sigmas_mm {
            let (fa, fb) = (dense(a.data(), sigma), dense(b.data(), sigma));
            let sab: f64 = fa.iter().zip(&fb).map(|(x, y)| x * y).sum();
            let den: f64 = fa.iter().sum::<f64>() + fb.iter().sum::<f64>();
            mean += 2.0 * sab / den / 7.0;
        }
        assert!((s.value - mean).abs() < 1e-9);
    }

    #[test]
    fn multiscale_gradients_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let meta = GridMeta::isotropic([5, 4, 6], 0.8).unwrap();
        let f = MultiscaleConfig::default().filters::<f64>(&meta).unwrap();
        let a = random_mask(meta, &mut rng);
        let b = random_mask(meta, &mut rng);
        let s = multiscale_dice(&a, &b, &f).unwrap();
        let fd = central_difference(b.data(), 1e-6, |x| {
            multiscale_dice_slices(a.data(), x, &f, false).value
        });
        assert!(relative_error(&s.d_warped, &fd) < 1e-4);
        let fd = central_difference(a.data(), 1e-6, |x| {
            multiscale_dice_slices(x, b.data(), &f, false).value
        });
        assert!(relative_error(&s.d_fixed, &fd) < 1e-4);
    }

    #[test]
    fn cross_entropy_closed_forms() {
        let meta = GridMeta::cube(2);
        let f = MultiscaleConfig::single_scale().filters::<f64>(&meta).unwrap();
        let ones = mask(meta, vec![1.0; 8]);
        assert_eq!(multiscale_cross_entropy(&ones, &ones, &f).unwrap().value, 0.0);
        let half = mask(meta, vec![0.5; 8]);
        let v = multiscale_cross_entropy(&ones, &half, &f).unwrap().value;
        assert!((v - 8.0 * 0.5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_matches_dense_oracle_and_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let meta = GridMeta::isotropic([5, 5, 4], 0.8).unwrap();
        let f = MultiscaleConfig::default().filters::<f64>(&meta).unwrap();
        let a = random_mask(meta, &mut rng);
        let b = random_mask(meta, &mut rng);
        let s = multiscale_cross_entropy(&a, &b, &f).unwrap();
        let mut oracle = 0.0;
        for &sigma in &MultiscaleConfig::default().sigmas_mm {
            let fa = gaussian::tests::dense_oracle(a.data(), &meta, sigma);
            let fb = gaussian::tests::dense_oracle(b.data(), &meta, sigma);
            let mut acc = 0.0;
            for (x, y) in fa.iter().zip(&fb) {
                acc += x * y.max(CE_EPSILON).ln() + (1.0 - x) * (1.0 - y).max(CE_EPSILON).ln();
            }
            oracle += acc / 7.0;
        }
        assert!((s.value - oracle).abs() < 1e-5);
        let fd = central_difference(b.data(), 1e-6, |x| {
            multiscale_cross_entropy_slices(a.data(), x, &f, false).value
        });
        assert!(relative_error(&s.d_warped, &fd) < 1e-4);
        let fd = central_difference(a.data(), 1e-6, |x| {
            multiscale_cross_entropy_slices(x, b.data(), &f, false).value
        });
        assert!(relative_error(&s.d_fixed, &fd) < 1e-4);
    }

    #[test]
    fn prefiltered_path_agrees_at_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let meta = GridMeta::cube(6);
        let f = MultiscaleConfig::default().filters::<f64>(&meta).unwrap();
        let a = random_mask(meta, &mut rng);
        let b = random_mask(meta, &mut rng);
        let direct = multiscale_dice(&a, &b, &f).unwrap().value;
        let (pre, _, _) = multiscale_dice_prefiltered(&f.stack(a.data()), &f.stack(b.data()));
        assert!((direct - pre).abs() < 1e-12);
    }

    #[test]
    fn gaussian_filter_mass_with_zero_border() {
        let meta = GridMeta::isotropic([16, 16, 16], 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let l = LabelMask::<f64>::from_parts(
            meta,
            (0..meta.len())
                .map(|i| {
                    let c = meta.coords(i);
                    if c.iter().all(|&v| (7..=8).contains(&v)) { rng.gen() } else { 0.0 }
                })
                .collect(),
        );
        let out = gaussian_filter(&l, 2.0);
        assert!((out.mass() - l.mass()).abs() < 1e-5);
    }

    #[test]
    fn total_loss_arithmetic() {
        assert_eq!(total_loss(1.0, 0.0, DEFAULT_ALPHA), -1.0);
        assert!((total_loss(0.8, 0.4, 0.5) + 0.6).abs() < 1e-15);
        assert_eq!(DEFAULT_ALPHA, 0.5);
        let r = LossReport::new(0.8, 0.4, 0.5, vec![0.8]);
        assert_eq!(r.total, -r.similarity + r.alpha * r.regularizer);
    }
}
