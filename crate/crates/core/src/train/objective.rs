use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::loss::{
    cross_entropy_slices, multiscale_cross_entropy_slices, multiscale_dice_prefiltered,
    multiscale_dice_slices, MultiscaleFilters, RegularizerKind, SimilarityKind, DEFAULT_ALPHA,
};
use crate::real::Real;
use crate::spatial::Sampler;
use crate::volume::DisplacementField;

/// Which objective one slot is scored with.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSettings {
    pub similarity: SimilarityKind,
    pub regularizer: RegularizerKind,
    pub alpha: f64,
}

impl Default for LossSettings {
    fn default() -> Self {
        LossSettings {
            similarity: SimilarityKind::MultiscaleDice,
            regularizer: RegularizerKind::Bending,
            alpha: DEFAULT_ALPHA,
        }
    }
}

/// A label map either raw (filtered after warping) or as a stack filtered
/// once per scale before warping.
#[derive(Debug, Clone, Copy)]
pub enum LabelInput<'a, T> {
    Raw(&'a [T]),
    Stack(&'a [Vec<T>]),
}

/// Loss terms of one slot and the gradient of `−J + α·Ω` on its DDF.
#[derive(Debug, Clone)]
pub struct SlotLoss<T> {
    pub similarity: f64,
    pub regularizer: f64,
    pub total: f64,
    pub per_scale: Vec<f64>,
    pub d_ddf: Vec<T>,
}

/// Warps the moving label with `ddf`, compares it to the fixed label and
/// adds the regularizer. The moving label lives on the DDF's grid.
pub fn slot_loss<T: Real>(
    ddf: &DisplacementField<T>,
    moving: LabelInput<'_, T>,
    fixed: LabelInput<'_, T>,
    filters: &MultiscaleFilters<T>,
    settings: &LossSettings,
) -> Result<SlotLoss<T>> {
    let sampler = Sampler::new(*ddf.meta(), ddf)?;
    let mut d_ddf = vec![T::zero(); ddf.data().len()];
    let (similarity, per_scale) = match (moving, fixed) {
        (LabelInput::Raw(m), LabelInput::Raw(f)) => {
            let warped = sampler.sample(m);
            let scored = match settings.similarity {
                SimilarityKind::MultiscaleDice => multiscale_dice_slices(f, &warped, filters, false),
                SimilarityKind::MultiscaleCrossEntropy => {
                    multiscale_cross_entropy_slices(f, &warped, filters, false)
                }
            };
            let d_out: Vec<T> = scored.d_warped.iter().map(|&g| -g).collect();
            sampler.accumulate_ddf_grad(m, &d_out, &mut d_ddf);
            (scored.value, scored.per_scale)
        }
        (LabelInput::Stack(ms), LabelInput::Stack(fs)) => {
            assert_eq!(ms.len(), fs.len(), "stacks must have one entry per scale");
            let warped: Vec<Vec<T>> = ms.iter().map(|m| sampler.sample(m)).collect();
            let (value, per_scale, grads) = match settings.similarity {
                SimilarityKind::MultiscaleDice => multiscale_dice_prefiltered(fs, &warped),
                SimilarityKind::MultiscaleCrossEntropy => cross_entropy_prefiltered(fs, &warped),
            };
            for (m, g) in ms.iter().zip(&grads) {
                let d_out: Vec<T> = g.iter().map(|&v| -v).collect();
                sampler.accumulate_ddf_grad(m, &d_out, &mut d_ddf);
            }
            (value, per_scale)
        }
        _ => panic!("moving and fixed labels must both be raw or both be stacks"),
    };
    let penalty = settings.regularizer.evaluate(ddf);
    let a = T::lit(settings.alpha);
    d_ddf.iter_mut().zip(&penalty.d_ddf).for_each(|(d, &p)| *d += a * p);
    Ok(SlotLoss {
        similarity,
        regularizer: penalty.value,
        total: crate::loss::total_loss(similarity, penalty.value, settings.alpha),
        per_scale,
        d_ddf,
    })
}

fn cross_entropy_prefiltered<T: Real>(fixed: &[Vec<T>], warped: &[Vec<T>]) -> (f64, Vec<f64>, Vec<Vec<T>>) {
    let z = fixed.len() as f64;
    let w = T::lit(1.0 / z);
    let mut per_scale = Vec::with_capacity(fixed.len());
    let mut grads = Vec::with_capacity(fixed.len());
    for (a, b) in fixed.iter().zip(warped) {
        let (v, _, mut db) = cross_entropy_slices(a, b);
        db.iter_mut().for_each(|g| *g *= w);
        per_scale.push(v);
        grads.push(db);
    }
    (per_scale.iter().sum::<f64>() / z, per_scale, grads)
}
