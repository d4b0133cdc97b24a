//! Checks that the two-stage minibatch gradient is an unbiased estimate of
//! the full-corpus gradient.
//!
//! Batch norm runs on its running statistics here, so a slot's gradient does
//! not depend on the other slots in its minibatch and a minibatch gradient is
//! exactly the mean of its slot gradients. That lets every per-pair gradient
//! be computed once and reused across all draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::corpus::{sample_minibatch, slot_distribution, Slot, TrainingCorpus};
use super::objective::{slot_loss, LabelInput, LossSettings};
use crate::error::{Error, Result};
use crate::loss::MultiscaleConfig;
use crate::net::{pack_pairs, BnMode, RegNet};
use crate::real::Real;

/// Loss gradient with respect to every trainable parameter for each
/// `(entry, label)` pair, in [`slot_distribution`] order.
pub fn pair_gradients<T: Real>(
    net: &RegNet<T>,
    corpus: &TrainingCorpus<T>,
    multiscale: &MultiscaleConfig,
    settings: &LossSettings,
) -> Result<Vec<(Slot, Vec<f64>)>> {
    let meta = *corpus.meta();
    let filters = multiscale.filters::<T>(&meta)?;
    let mut out = Vec::new();
    for (slot, _) in slot_distribution(&corpus.label_counts()) {
        let e = &corpus.entries()[slot.entry];
        let l = &e.labels[slot.label];
        let input = pack_pairs(&[(&e.moving, &e.fixed)])?;
        let fwd = net.forward(&input, &meta, BnMode::Running)?;
        let loss = slot_loss(
            &fwd.ddfs[0],
            LabelInput::Raw(l.moving.data()),
            LabelInput::Raw(l.fixed.data()),
            &filters,
            settings,
        )?;
        let grads = net.backward(&fwd.cache, &[loss.d_ddf]);
        let flat = grads.flat_trainable(net.store()).iter().map(|g| g.as_f64()).collect();
        out.push((slot, flat));
    }
    Ok(out)
}

/// Expected minibatch gradient by enumerating all `(ΣM)^K` ordered slot
/// tuples with their two-stage probabilities. Also returns the marginal
/// probability of each slot recovered from the enumeration.
pub fn enumerate_expected_gradient(
    label_counts: &[usize],
    slot_grads: &[(Slot, Vec<f64>)],
    k: usize,
) -> (Vec<f64>, Vec<(Slot, f64)>) {
    let dist = slot_distribution(label_counts);
    assert_eq!(dist.len(), slot_grads.len(), "one gradient per slot");
    let s = dist.len();
    let dim = slot_grads.first().map_or(0, |g| g.1.len());
    let mut expected = vec![0.0; dim];
    let mut marginal = vec![0.0; s];
    let mut tuple = vec![0usize; k];
    let total = s.pow(k as u32);
    for _ in 0..total {
        let p: f64 = tuple.iter().map(|&i| dist[i].1).product();
        for &i in &tuple {
            let w = p / k as f64;
            marginal[i] += w;
            for (e, g) in expected.iter_mut().zip(&slot_grads[i].1) {
                *e += w * g;
            }
        }
        // Odometer increment.
        for d in tuple.iter_mut() {
            *d += 1;
            if *d < s {
                break;
            }
            *d = 0;
        }
    }
    let marginal = dist.iter().zip(marginal).map(|((slot, _), m)| (*slot, m)).collect();
    (expected, marginal)
}

#[derive(Debug, Clone, Serialize)]
pub struct UnbiasednessReport {
    /// Probability of each slot, `(1/N)(1/M_n)`.
    pub slot_weights: Vec<(Slot, f64)>,
    /// Largest deviation of the enumerated slot marginals from those weights.
    pub weight_error: f64,
    /// Largest deviation of the enumerated expectation from the exact
    /// full-corpus gradient.
    pub enumeration_error: f64,
    pub draws: usize,
    pub batch_size: usize,
    /// Components whose Monte-Carlo standard error is positive.
    pub components_tested: usize,
    pub components_within: usize,
    /// `components_within / components_tested`.
    pub fraction_within: f64,
    /// Components with zero spread whose mean still differs from the exact value.
    pub degenerate_mismatches: usize,
    #[serde(skip)]
    pub exact: Vec<f64>,
    #[serde(skip)]
    pub monte_carlo_mean: Vec<f64>,
    #[serde(skip)]
    pub standard_error: Vec<f64>,
}

/// Compares the exact full-corpus gradient with the mean of `draws` sampled
/// minibatch gradients (batch size `k`), component by component within
/// `3·SE`. The network should be small; every pair is evaluated once.
pub fn unbiasedness_check<T: Real>(
    net: &RegNet<T>,
    corpus: &TrainingCorpus<T>,
    multiscale: &MultiscaleConfig,
    settings: &LossSettings,
    k: usize,
    draws: usize,
    seed: u64,
) -> Result<UnbiasednessReport> {
    if k == 0 || draws < 2 {
        return Err(Error::InvalidConfig("need k ≥ 1 and at least 2 draws".into()));
    }
    let counts = corpus.label_counts();
    let grads = pair_gradients(net, corpus, multiscale, settings)?;
    let weights = slot_distribution(&counts);
    let s = weights.len();
    let dim = grads[0].1.len();

    let mut exact = vec![0.0; dim];
    for ((_, w), (_, g)) in weights.iter().zip(&grads) {
        for (e, x) in exact.iter_mut().zip(g) {
            *e += w * x;
        }
    }

    let (enumerated, marginal) = enumerate_expected_gradient(&counts, &grads, k);
    let weight_error = weights
        .iter()
        .zip(&marginal)
        .map(|(a, b)| (a.1 - b.1).abs())
        .fold(0.0, f64::max);
    let enumeration_error = exact
        .iter()
        .zip(&enumerated)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);

    // Per-draw slot counts reduce to total counts and a co-count matrix,
    // which fix the sample mean and variance of every component.
    let index: std::collections::HashMap<Slot, usize> =
        weights.iter().enumerate().map(|(i, (slot, _))| (*slot, i)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = vec![0.0f64; s];
    let mut cocount = vec![0.0f64; s * s];
    let mut n = vec![0.0f64; s];
    for _ in 0..draws {
        n.iter_mut().for_each(|x| *x = 0.0);
        for slot in sample_minibatch(&counts, k, &mut rng) {
            n[index[&slot]] += 1.0;
        }
        for a in 0..s {
            total[a] += n[a];
            for b in 0..s {
                cocount[a * s + b] += n[a] * n[b];
            }
        }
    }
    let d = draws as f64;
    let kf = k as f64;
    let mut mean = vec![0.0; dim];
    let mut se = vec![0.0; dim];
    let (mut tested, mut within, mut degenerate) = (0, 0, 0);
    for c in 0..dim {
        let g: Vec<f64> = grads.iter().map(|x| x.1[c]).collect();
        let m: f64 = (0..s).map(|a| total[a] * g[a]).sum::<f64>() / (d * kf);
        let sq: f64 = (0..s)
            .flat_map(|a| (0..s).map(move |b| (a, b)))
            .map(|(a, b)| cocount[a * s + b] * g[a] * g[b])
            .sum::<f64>()
            / (kf * kf);
        let var = ((sq - d * m * m) / (d - 1.0)).max(0.0);
        let spread = g.iter().fold(0.0f64, |acc, &x| acc.max((x - g[0]).abs()));
        mean[c] = m;
        se[c] = (var / d).sqrt();
        let scale = g.iter().fold(0.0f64, |acc, &x| acc.max(x.abs()));
        if spread <= 1e-12 * scale.max(f64::MIN_POSITIVE) {
            if (m - exact[c]).abs() > 1e-9 * scale {
                degenerate += 1;
            }
            continue;
        }
        tested += 1;
        if (m - exact[c]).abs() <= 3.0 * se[c] {
            within += 1;
        }
    }
    Ok(UnbiasednessReport {
        slot_weights: weights,
        weight_error,
        enumeration_error,
        draws,
        batch_size: k,
        components_tested: tested,
        components_within: within,
        fraction_within: if tested == 0 { 1.0 } else { within as f64 / tested as f64 },
        degenerate_mismatches: degenerate,
        exact,
        monte_carlo_mean: mean,
        standard_error: se,
    })
}

impl UnbiasednessReport {
    /// The acceptance bar: enumeration exact to `1e-10` and at least 99% of
    /// components within three standard errors.
    pub fn passes(&self) -> bool {
        self.weight_error <= 1e-10
            && self.enumeration_error <= 1e-10
            && self.degenerate_mismatches == 0
            && self.fraction_within >= 0.99
    }
}
