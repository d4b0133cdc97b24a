use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::volume::{GridMeta, LabelMask, Volume};

/// Corresponding label maps on the moving and fixed image.
#[derive(Debug, Clone)]
pub struct LabelPair<T = f32> {
    pub moving: LabelMask<T>,
    pub fixed: LabelMask<T>,
}

/// One training image pair with its label pairs.
#[derive(Debug, Clone)]
pub struct CorpusEntry<T = f32> {
    /// Case identifier carried into checkpoints and reports.
    pub case_id: usize,
    pub moving: Volume<T>,
    pub fixed: Volume<T>,
    pub labels: Vec<LabelPair<T>>,
}

#[derive(Debug, Clone)]
pub struct TrainingCorpus<T = f32> {
    entries: Vec<CorpusEntry<T>>,
}

impl<T: Real> TrainingCorpus<T> {
    /// Every entry needs at least one label pair and every volume must share
    /// one grid.
    pub fn new(entries: Vec<CorpusEntry<T>>) -> Result<Self> {
        let first = entries
            .first()
            .ok_or_else(|| Error::InvalidConfig("training corpus is empty".into()))?;
        let meta = *first.fixed.meta();
        for e in &entries {
            if e.labels.is_empty() {
                return Err(Error::InvalidConfig(format!("case {} has no label pairs", e.case_id)));
            }
            let grids = [e.moving.meta(), e.fixed.meta()]
                .into_iter()
                .chain(e.labels.iter().flat_map(|l| [l.moving.meta(), l.fixed.meta()]));
            for g in grids {
                if *g != meta {
                    return Err(Error::Shape(format!(
                        "case {}: grid {:?} differs from corpus grid {:?}",
                        e.case_id, g, meta
                    )));
                }
            }
        }
        Ok(TrainingCorpus { entries })
    }

    pub fn entries(&self) -> &[CorpusEntry<T>] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn meta(&self) -> &GridMeta {
        self.entries[0].fixed.meta()
    }

    /// `M_n` for every entry.
    pub fn label_counts(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.labels.len()).collect()
    }

    pub fn case_ids(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.case_id).collect()
    }

    pub fn cast<U: Real>(&self) -> TrainingCorpus<U> {
        TrainingCorpus {
            entries: self
                .entries
                .iter()
                .map(|e| CorpusEntry {
                    case_id: e.case_id,
                    moving: e.moving.cast(),
                    fixed: e.fixed.cast(),
                    labels: e
                        .labels
                        .iter()
                        .map(|l| LabelPair {
                            moving: l.moving.cast(),
                            fixed: l.fixed.cast(),
                        })
                        .collect(),
                })
                .collect(),
        }
    }
}

/// One minibatch slot: an entry and one of its label pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct Slot {
    pub entry: usize,
    pub label: usize,
}

/// Two-stage sampling: `k` entries uniformly with replacement, then one
/// label pair uniformly within each drawn entry.
pub fn sample_minibatch<R: Rng + ?Sized>(label_counts: &[usize], k: usize, rng: &mut R) -> Vec<Slot> {
    assert!(!label_counts.is_empty(), "cannot sample from an empty corpus");
    (0..k)
        .map(|_| {
            let entry = rng.gen_range(0..label_counts.len());
            let label = rng.gen_range(0..label_counts[entry]);
            Slot { entry, label }
        })
        .collect()
}

/// Exact per-slot probability of every label pair, `(1/N)(1/M_n)`.
pub fn slot_distribution(label_counts: &[usize]) -> Vec<(Slot, f64)> {
    let n = label_counts.len() as f64;
    label_counts
        .iter()
        .enumerate()
        .flat_map(|(entry, &m)| (0..m).map(move |label| (Slot { entry, label }, 1.0 / (n * m as f64))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashMap;

    #[test]
    fn single_pair_corpus_always_yields_it() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for s in sample_minibatch(&[1], 50, &mut rng) {
            assert_eq!(s, Slot { entry: 0, label: 0 });
        }
    }

    #[test]
    fn slot_frequencies_match_two_stage_weights() {
        let counts = [1, 3];
        let draws = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut hist: HashMap<Slot, usize> = HashMap::new();
        for s in sample_minibatch(&counts, draws, &mut rng) {
            *hist.entry(s).or_default() += 1;
        }
        for (slot, p) in slot_distribution(&counts) {
            let expected = if slot.entry == 0 { 0.5 } else { 1.0 / 6.0 };
            assert!((p - expected).abs() < 1e-15);
            let f = hist[&slot] as f64 / draws as f64;
            let sd = (p * (1.0 - p) / draws as f64).sqrt();
            assert!((f - p).abs() < 3.0 * sd, "{slot:?}: {f} vs {p}");
        }
    }

    #[test]
    fn weights_sum_to_one() {
        let w: f64 = slot_distribution(&[2, 5, 1, 3]).iter().map(|x| x.1).sum();
        assert!((w - 1.0).abs() < 1e-12);
    }
}
