//! Minibatch training of the registration network.
//!
//! Each iteration draws `K` slots with two-stage sampling, optionally
//! augments both sides of every slot with independent random affines, runs
//! the network on the batch, scores every slot with `−J + α·Ω` and takes one
//! Adam step on the mean. The random stream of iteration `t` is derived from
//! `(seed, t)` alone, so a resumed run replays the same draws.

mod adam;
mod corpus;
mod objective;
mod unbiased;

pub use adam::{adam_step, AdamConfig};
pub use corpus::{sample_minibatch, slot_distribution, CorpusEntry, LabelPair, Slot, TrainingCorpus};
pub use objective::{slot_loss, LabelInput, LossSettings, SlotLoss};
pub use unbiased::{enumerate_expected_gradient, pair_gradients, unbiasedness_check, UnbiasednessReport};

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{MultiscaleConfig, MultiscaleFilters, RegularizerKind, SimilarityKind, DEFAULT_ALPHA};
use crate::net::{
    load_checkpoint, pack_pairs, save_checkpoint, BnMode, CheckpointManifest, HeadKind, NetworkConfig, RegNet,
};
use crate::spatial::{affine_to_ddf, random_affine, AugmentConfig, Sampler};
use crate::volume::{AffineParams, GridMeta, Volume};

/// Learning-rate factor applied to the affine head.
pub const AFFINE_LR_FACTOR: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Minibatch size `K`.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub alpha: f64,
    pub similarity: SimilarityKind,
    pub regularizer: RegularizerKind,
    pub iterations: u64,
    pub seed: u64,
    pub augment: AugmentConfig,
    /// Draw moving and fixed augmentations independently; otherwise one
    /// draw is applied to both sides.
    pub augment_per_side: bool,
    /// Filter label stacks once up front and warp them per scale.
    pub prefilter: bool,
    pub multiscale: MultiscaleConfig,
    /// Save a checkpoint every this many iterations (0 = only at the end).
    pub checkpoint_every: u64,
    /// Run on a single thread.
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 4,
            learning_rate: 1e-5,
            alpha: DEFAULT_ALPHA,
            similarity: SimilarityKind::MultiscaleDice,
            regularizer: RegularizerKind::Bending,
            iterations: 2000,
            seed: 0,
            augment: AugmentConfig::default(),
            augment_per_side: true,
            prefilter: false,
            multiscale: MultiscaleConfig::default(),
            checkpoint_every: 0,
            deterministic: false,
        }
    }
}

impl TrainConfig {
    /// Settings for small CPU runs on 32³ phantoms.
    pub fn desk() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig("learning_rate must be positive".into()));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidConfig("alpha must be non-negative".into()));
        }
        self.augment.validate()?;
        self.multiscale.validate()
    }

    pub fn loss_settings(&self) -> LossSettings {
        LossSettings {
            similarity: self.similarity,
            regularizer: self.regularizer,
            alpha: self.alpha,
        }
    }

    /// The affine head trains at a tenth of the configured rate.
    pub fn effective_learning_rate(&self, head: HeadKind) -> f64 {
        match head {
            HeadKind::Ddf => self.learning_rate,
            HeadKind::Affine => self.learning_rate * AFFINE_LR_FACTOR,
        }
    }
}

/// Mean loss terms of one iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: u64,
    pub similarity: f64,
    pub regularizer: f64,
    pub total: f64,
}

pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut s = String::from("iteration,similarity,regularizer,total\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.iteration, r.similarity, r.regularizer, r.total);
    }
    s
}

pub fn write_trace_csv(path: impl AsRef<Path>, rows: &[TraceRow]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, trace_csv(rows)).map_err(|e| Error::file(path, e))
}

/// Label data of one corpus entry in the form the loss consumes.
enum PreparedLabels {
    Raw,
    Stacks(Vec<(Vec<Vec<f32>>, Vec<Vec<f32>>)>),
}

/// One augmented slot ready for the network.
struct SlotData {
    moving: Volume,
    fixed: Volume,
    moving_label: Vec<Vec<f32>>,
    fixed_label: Vec<Vec<f32>>,
}

pub struct Trainer<'c> {
    net: RegNet<f32>,
    cfg: TrainConfig,
    corpus: &'c TrainingCorpus,
    filters: MultiscaleFilters<f32>,
    labels: Vec<PreparedLabels>,
    iteration: u64,
    trace: Vec<TraceRow>,
}

impl<'c> Trainer<'c> {
    pub fn new(net: RegNet<f32>, cfg: TrainConfig, corpus: &'c TrainingCorpus) -> Result<Self> {
        cfg.validate()?;
        let meta = *corpus.meta();
        let filters = cfg.multiscale.filters::<f32>(&meta)?;
        let labels = corpus
            .entries()
            .iter()
            .map(|e| {
                if cfg.prefilter {
                    PreparedLabels::Stacks(
                        e.labels
                            .iter()
                            .map(|l| (filters.stack(l.moving.data()), filters.stack(l.fixed.data())))
                            .collect(),
                    )
                } else {
                    PreparedLabels::Raw
                }
            })
            .collect();
        Ok(Trainer {
            net,
            cfg,
            corpus,
            filters,
            labels,
            iteration: 0,
            trace: Vec::new(),
        })
    }

    /// Continues from a checkpoint written by [`Trainer::save`].
    pub fn resume(path: impl AsRef<Path>, corpus: &'c TrainingCorpus) -> Result<Self> {
        let (manifest, net) = load_checkpoint(path)?;
        let cfg: TrainConfig = serde_json::from_value(manifest.train.clone())?;
        let mut t = Trainer::new(net, cfg, corpus)?;
        t.iteration = manifest.iteration;
        Ok(t)
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn net(&self) -> &RegNet<f32> {
        &self.net
    }

    pub fn into_net(self) -> RegNet<f32> {
        self.net
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn trace(&self) -> &[TraceRow] {
        &self.trace
    }

    pub fn manifest(&self) -> CheckpointManifest {
        let mut m = CheckpointManifest::new(self.net.config().clone(), self.iteration, self.cfg.seed);
        m.train = serde_json::to_value(&self.cfg).unwrap_or(serde_json::Value::Null);
        m.train_cases = self.corpus.case_ids();
        m
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_checkpoint(path, &self.manifest(), &self.net)
    }

    fn rng_for(&self, iteration: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(iteration);
        rng
    }

    fn slot_data(&self, slot: Slot, aug: Option<(AffineParams, AffineParams)>) -> Result<SlotData> {
        let e = &self.corpus.entries()[slot.entry];
        let (ml, fl): (Vec<Vec<f32>>, Vec<Vec<f32>>) = match &self.labels[slot.entry] {
            PreparedLabels::Raw => {
                let l = &e.labels[slot.label];
                (vec![l.moving.data().to_vec()], vec![l.fixed.data().to_vec()])
            }
            PreparedLabels::Stacks(s) => s[slot.label].clone(),
        };
        let Some((am, af)) = aug else {
            return Ok(SlotData {
                moving: e.moving.clone(),
                fixed: e.fixed.clone(),
                moving_label: ml,
                fixed_label: fl,
            });
        };
        let meta = *self.corpus.meta();
        let side = |img: &Volume, labels: Vec<Vec<f32>>, p: &AffineParams| -> Result<(Volume, Vec<Vec<f32>>)> {
            let s = Sampler::new(meta, &affine_to_ddf::<f32>(p, &meta))?;
            let img = Volume::new(meta, s.sample(img.data()))?;
            Ok((img, labels.iter().map(|l| s.sample(l)).collect()))
        };
        let (moving, moving_label) = side(&e.moving, ml, &am)?;
        let (fixed, fixed_label) = side(&e.fixed, fl, &af)?;
        Ok(SlotData {
            moving,
            fixed,
            moving_label,
            fixed_label,
        })
    }

    /// Loss of the current parameters on one minibatch, without updating.
    fn evaluate_batch(&self, iteration: u64) -> Result<(TraceRow, Vec<Vec<f32>>, crate::net::ForwardCache<f32>)> {
        let meta: GridMeta = *self.corpus.meta();
        let mut rng = self.rng_for(iteration);
        let slots = sample_minibatch(&self.corpus.label_counts(), self.cfg.batch_size, &mut rng);
        let augs: Vec<Option<(AffineParams, AffineParams)>> = slots
            .iter()
            .map(|_| {
                (!self.cfg.augment.is_identity()).then(|| {
                    let a = random_affine(&meta, &mut rng, &self.cfg.augment);
                    let b = if self.cfg.augment_per_side {
                        random_affine(&meta, &mut rng, &self.cfg.augment)
                    } else {
                        a
                    };
                    (a, b)
                })
            })
            .collect();
        let data: Vec<SlotData> = slots
            .par_iter()
            .zip(augs)
            .map(|(&s, a)| self.slot_data(s, a))
            .collect::<Result<_>>()?;
        let pairs: Vec<(&Volume, &Volume)> = data.iter().map(|d| (&d.moving, &d.fixed)).collect();
        let input = pack_pairs(&pairs)?;
        let out = self.net.forward(&input, &meta, BnMode::Batch)?;
        let settings = self.cfg.loss_settings();
        let losses: Vec<SlotLoss<f32>> = data
            .par_iter()
            .zip(&out.ddfs)
            .map(|(d, ddf)| {
                let (m, f) = if self.cfg.prefilter {
                    (LabelInput::Stack(&d.moving_label), LabelInput::Stack(&d.fixed_label))
                } else {
                    (LabelInput::Raw(&d.moving_label[0]), LabelInput::Raw(&d.fixed_label[0]))
                };
                slot_loss(ddf, m, f, &self.filters, &settings)
            })
            .collect::<Result<_>>()
            .map_err(|e| Error::Diverged {
                iteration,
                reason: e.to_string(),
            })?;
        let k = losses.len() as f64;
        let row = TraceRow {
            iteration,
            similarity: losses.iter().map(|l| l.similarity).sum::<f64>() / k,
            regularizer: losses.iter().map(|l| l.regularizer).sum::<f64>() / k,
            total: losses.iter().map(|l| l.total).sum::<f64>() / k,
        };
        let scale = (1.0 / k) as f32;
        let d_ddf = losses
            .into_iter()
            .map(|l| l.d_ddf.into_iter().map(|g| g * scale).collect())
            .collect();
        Ok((row, d_ddf, out.cache))
    }

    /// Minibatch loss at the current parameters for the next iteration's
    /// draws, without taking a step.
    pub fn peek_loss(&self) -> Result<TraceRow> {
        Ok(self.evaluate_batch(self.iteration)?.0)
    }

    /// One optimization step. Fails with [`Error::Diverged`] on a
    /// non-finite loss or gradient, leaving the parameters untouched.
    pub fn step(&mut self) -> Result<TraceRow> {
        let it = self.iteration;
        let (row, d_ddf, cache) = self.evaluate_batch(it)?;
        if !row.total.is_finite() {
            return Err(Error::Diverged {
                iteration: it,
                reason: format!("loss is {}", row.total),
            });
        }
        let grads = self.net.backward(&cache, &d_ddf);
        let lr = self.cfg.effective_learning_rate(self.net.config().head);
        let store = self.net.store_mut();
        store.zero_grad();
        store.accumulate(&grads);
        adam_step(store, lr, it + 1, &AdamConfig::default()).map_err(|e| Error::Diverged {
            iteration: it,
            reason: e.to_string(),
        })?;
        self.net.update_running_stats(&cache);
        self.iteration += 1;
        self.trace.push(row);
        Ok(row)
    }

    /// Steps until `iteration == until`, checkpointing into `out` when given.
    /// The loss trace is written even when training diverges.
    pub fn run_until(&mut self, until: u64, out: Option<&Path>) -> Result<()> {
        let result = self.with_threads(|t| t.run_inner(until, out));
        if let Some(dir) = out {
            write_trace_csv(dir.join("loss.csv"), &self.trace)?;
        }
        result
    }

    fn run_inner(&mut self, until: u64, out: Option<&Path>) -> Result<()> {
        while self.iteration < until {
            let row = self.step()?;
            if row.iteration % 100 == 0 {
                log::info!(
                    "iteration {}: similarity {:.4} regularizer {:.5} total {:.4}",
                    row.iteration,
                    row.similarity,
                    row.regularizer,
                    row.total
                );
            }
            if let Some(dir) = out {
                let every = self.cfg.checkpoint_every;
                if every > 0 && self.iteration % every == 0 {
                    self.save(checkpoint_path(dir, self.iteration))?;
                }
            }
        }
        if let Some(dir) = out {
            self.save(dir.join("final"))?;
        }
        Ok(())
    }

    fn with_threads<R: Send>(&mut self, f: impl FnOnce(&mut Self) -> R + Send) -> R
    where
        Self: Send,
    {
        if self.cfg.deterministic {
            match rayon::ThreadPoolBuilder::new().num_threads(1).build() {
                Ok(pool) => pool.install(|| f(self)),
                Err(_) => f(self),
            }
        } else {
            f(self)
        }
    }
}

pub fn checkpoint_path(dir: &Path, iteration: u64) -> PathBuf {
    dir.join(format!("checkpoint_{iteration:06}"))
}

/// Result of [`train`].
pub struct TrainOutcome {
    pub net: RegNet<f32>,
    pub trace: Vec<TraceRow>,
}

/// Trains a fresh network (seeded from `cfg.seed`) for `cfg.iterations`.
pub fn train(
    corpus: &TrainingCorpus,
    net_cfg: &NetworkConfig,
    cfg: &TrainConfig,
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
    }
    let net = RegNet::new(net_cfg.clone(), cfg.seed)?;
    let mut t = Trainer::new(net, cfg.clone(), corpus)?;
    t.run_until(cfg.iterations, out)?;
    Ok(TrainOutcome {
        trace: t.trace.clone(),
        net: t.into_net(),
    })
}

#[cfg(test)]
mod tests;
