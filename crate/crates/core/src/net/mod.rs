//! The registration network: a residual encoder/decoder over the
//! concatenated moving/fixed pair that predicts displacement summands at up
//! to five resolution levels, or an affine transform from the encoder alone.
//!
//! Shapes: level `k` has `n0·2^k` channels and dims `n/2^k`; the input dims
//! must be divisible by 16. Skip connections between encoder and decoder are
//! sums, added after upsampling and before the decoder block's convolutions.

mod checkpoint;
pub mod layers;
mod params;
mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest, TensorEntry};
pub use layers::BnMode;
pub use params::{Gradients, Param, ParamId, ParamRole, ParameterStore};
pub use tensor::Tensor;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::spatial::{affine_to_ddf, aggregate_summands, aggregate_summands_adjoint, Summand};
use crate::volume::{AffineParams, DisplacementField, GridMeta, Volume};
use layers::*;

/// Number of down-sampling blocks (and up-sampling blocks).
pub const DOWN_BLOCKS: usize = 4;
/// Input dims must be divisible by this.
pub const SIZE_MULTIPLE: usize = 1 << DOWN_BLOCKS;
const FIRST_KERNEL: usize = 7;
const KERNEL: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// Dense displacement summands, one per configured level.
    #[default]
    Ddf,
    /// Global pooling of the encoder plus a fully-connected layer to 12
    /// affine parameters.
    Affine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    /// Channels at the finest level; level `k` has `n0·2^k`.
    pub n0: usize,
    /// Levels (0 = input resolution, 4 = coarsest) that emit a summand.
    pub summand_levels: Vec<usize>,
    pub head: HeadKind,
    pub bn_epsilon: f64,
    /// Weight of the old running statistic in the moving average.
    pub bn_momentum: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            n0: 32,
            summand_levels: (0..=DOWN_BLOCKS).collect(),
            head: HeadKind::Ddf,
            bn_epsilon: 1e-5,
            bn_momentum: 0.9,
        }
    }
}

impl NetworkConfig {
    /// Small preset for CPU-scale experiments.
    pub fn desk() -> Self {
        NetworkConfig {
            n0: 4,
            ..Self::default()
        }
    }

    pub fn with_levels(mut self, levels: &[usize]) -> Self {
        self.summand_levels = levels.to_vec();
        self
    }

    pub fn affine(mut self) -> Self {
        self.head = HeadKind::Affine;
        self
    }

    pub fn channels(&self, level: usize) -> usize {
        self.n0 << level
    }

    pub fn validate(&self) -> Result<()> {
        if self.n0 == 0 {
            return Err(Error::InvalidConfig("n0 must be at least 1".into()));
        }
        if self.head == HeadKind::Ddf {
            if self.summand_levels.is_empty() {
                return Err(Error::InvalidConfig("summand_levels is empty".into()));
            }
            let mut seen = [false; DOWN_BLOCKS + 1];
            for &l in &self.summand_levels {
                if l > DOWN_BLOCKS || seen[l] {
                    return Err(Error::InvalidConfig(format!(
                        "bad summand level list {:?}",
                        self.summand_levels
                    )));
                }
                seen[l] = true;
            }
        }
        if !(self.bn_epsilon > 0.0) || !(0.0..1.0).contains(&self.bn_momentum) {
            return Err(Error::InvalidConfig("batch-norm epsilon/momentum out of range".into()));
        }
        Ok(())
    }

    fn finest_level(&self) -> usize {
        self.summand_levels.iter().copied().min().unwrap_or(0)
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvBnIds {
    w: ParamId,
    gamma: ParamId,
    beta: ParamId,
    mean: ParamId,
    var: ParamId,
    k: usize,
}

#[derive(Debug, Clone, Copy)]
struct BlockIds {
    conv1: ConvBnIds,
    conv2: ConvBnIds,
}

#[derive(Debug, Clone, Copy)]
struct UpIds {
    deconv_w: ParamId,
    deconv_b: ParamId,
    block: BlockIds,
}

#[derive(Debug, Clone, Copy)]
struct HeadIds {
    level: usize,
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone)]
struct Layout {
    down: Vec<BlockIds>,
    bottom: Option<ConvBnIds>,
    up: Vec<Option<UpIds>>,
    heads: Vec<HeadIds>,
    dense: Option<(ParamId, ParamId)>,
}

/// Parameter declaration used by both initialization and loading.
struct Decl {
    name: String,
    shape: Vec<usize>,
    role: ParamRole,
    fans: (usize, usize),
}

fn declare(cfg: &NetworkConfig) -> (Layout, Vec<Decl>) {
    let mut b = Builder { decls: Vec::new() };
    let mut down = Vec::new();
    for k in 0..DOWN_BLOCKS {
        let ci = if k == 0 { 2 } else { cfg.channels(k - 1) };
        let c = cfg.channels(k);
        let k1 = if k == 0 { FIRST_KERNEL } else { KERNEL };
        down.push(BlockIds {
            conv1: b.conv_bn(&format!("down{k}.1"), ci, c, k1),
            conv2: b.conv_bn(&format!("down{k}.2"), c, c, KERNEL),
        });
    }
    let mut layout = Layout {
        down,
        bottom: None,
        up: vec![None; DOWN_BLOCKS],
        heads: Vec::new(),
        dense: None,
    };
    match cfg.head {
        HeadKind::Affine => {
            let c = cfg.channels(DOWN_BLOCKS - 1);
            let w = b.push("affine.dense.weight".into(), vec![12, c], ParamRole::DenseWeight, (c, 12));
            let bias = b.push("affine.dense.bias".into(), vec![12], ParamRole::DenseBias, (0, 0));
            layout.dense = Some((w, bias));
        }
        HeadKind::Ddf => {
            let cb = cfg.channels(DOWN_BLOCKS);
            layout.bottom = Some(b.conv_bn("bottom", cfg.channels(DOWN_BLOCKS - 1), cb, KERNEL));
            for k in (cfg.finest_level()..DOWN_BLOCKS).rev() {
                let (ci, c) = (cfg.channels(k + 1), cfg.channels(k));
                let deconv_w = b.push(format!("up{k}.deconv.weight"), vec![ci, c, 2, 2, 2], ParamRole::DeconvWeight, (ci * 8, c * 8));
                let deconv_b = b.push(format!("up{k}.deconv.bias"), vec![c], ParamRole::Bias, (0, 0));
                let block = BlockIds {
                    conv1: b.conv_bn(&format!("up{k}.1"), c, c, KERNEL),
                    conv2: b.conv_bn(&format!("up{k}.2"), c, c, KERNEL),
                };
                layout.up[k] = Some(UpIds {
                    deconv_w,
                    deconv_b,
                    block,
                });
            }
            let mut levels = cfg.summand_levels.clone();
            levels.sort_unstable();
            for level in levels {
                let c = cfg.channels(level);
                let w = b.push(format!("head{level}.weight"), vec![3, c, 3, 3, 3], ParamRole::HeadWeight, (0, 0));
                let bias = b.push(format!("head{level}.bias"), vec![3], ParamRole::HeadBias, (0, 0));
                layout.heads.push(HeadIds { level, w, b: bias });
            }
        }
    }
    (layout, b.decls)
}

struct Builder {
    decls: Vec<Decl>,
}

impl Builder {
    fn push(&mut self, name: String, shape: Vec<usize>, role: ParamRole, fans: (usize, usize)) -> ParamId {
        self.decls.push(Decl {
            name,
            shape,
            role,
            fans,
        });
        ParamId(self.decls.len() - 1)
    }

    fn conv_bn(&mut self, prefix: &str, ci: usize, co: usize, k: usize) -> ConvBnIds {
        let k3 = k * k * k;
        ConvBnIds {
            w: self.push(format!("{prefix}.conv"), vec![co, ci, k, k, k], ParamRole::ConvWeight, (ci * k3, co * k3)),
            gamma: self.push(format!("{prefix}.bn.gamma"), vec![co], ParamRole::BnGamma, (0, 0)),
            beta: self.push(format!("{prefix}.bn.beta"), vec![co], ParamRole::BnBeta, (0, 0)),
            mean: self.push(format!("{prefix}.bn.running_mean"), vec![co], ParamRole::BnRunningMean, (0, 0)),
            var: self.push(format!("{prefix}.bn.running_var"), vec![co], ParamRole::BnRunningVar, (0, 0)),
            k,
        }
    }
}

/// Xavier-uniform bound for a weight tensor.
pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Fresh parameters: Xavier-uniform conv/deconv weights, unit BN scale,
/// zero biases, and all-zero prediction heads. The affine head starts at
/// the identity transform.
pub fn init_parameters(cfg: &NetworkConfig, seed: u64) -> Result<ParameterStore<f32>> {
    cfg.validate()?;
    let (_, decls) = declare(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParameterStore::new();
    for d in decls {
        let n: usize = d.shape.iter().product();
        let value: Vec<f32> = match d.role {
            ParamRole::ConvWeight | ParamRole::DeconvWeight => {
                let bound = xavier_bound(d.fans.0, d.fans.1);
                (0..n).map(|_| ((rng.gen::<f64>() * 2.0 - 1.0) * bound) as f32).collect()
            }
            ParamRole::BnGamma | ParamRole::BnRunningVar => vec![1.0; n],
            ParamRole::DenseBias => AffineParams::IDENTITY_ARRAY.iter().map(|&v| v as f32).collect(),
            _ => vec![0.0; n],
        };
        store.push(d.name, d.shape, d.role, value);
    }
    Ok(store)
}

/// Packs moving/fixed pairs into a `[batch, 2, nx, ny, nz]` input.
pub fn pack_pairs<T: Real>(pairs: &[(&Volume<T>, &Volume<T>)]) -> Result<Tensor<T>> {
    let first = pairs.first().ok_or_else(|| Error::Shape("empty batch".into()))?;
    let meta = *first.0.meta();
    let mut data = Vec::with_capacity(pairs.len() * 2 * meta.len());
    for (m, f) in pairs {
        if m.meta().dims != meta.dims || f.meta().dims != meta.dims {
            return Err(Error::Shape("all images in a batch must share dims".into()));
        }
        data.extend_from_slice(m.data());
        data.extend_from_slice(f.data());
    }
    Ok(Tensor::from_vec(pairs.len(), 2, meta.dims, data))
}

struct ConvBnCache<T> {
    input: Tensor<T>,
    bn: BnCache<T>,
}

struct BlockCache<T> {
    c1: ConvBnCache<T>,
    h: Tensor<T>,
    c2: ConvBnCache<T>,
    s: Tensor<T>,
}

struct DownCache<T> {
    block: BlockCache<T>,
    argmax: Vec<u32>,
}

struct UpCache<T> {
    cur: Tensor<T>,
    block: BlockCache<T>,
}

/// Everything the backward pass needs from a forward pass.
pub struct ForwardCache<T> {
    meta: GridMeta,
    batch: usize,
    down: Vec<DownCache<T>>,
    bottom: Option<(ConvBnCache<T>, Tensor<T>)>,
    up: Vec<Option<UpCache<T>>>,
    head_inputs: Vec<Tensor<T>>,
    pooled: Option<Vec<T>>,
    bn_stats: Vec<(ParamId, ParamId, BnStats)>,
}

/// Result of a forward pass.
pub struct NetOutput<T> {
    /// Aggregated displacement field per batch element.
    pub ddfs: Vec<DisplacementField<T>>,
    /// Summands per batch element (empty for the affine head).
    pub summands: Vec<Vec<Summand<T>>>,
    /// Affine parameters per batch element (affine head only).
    pub affine: Vec<AffineParams>,
    pub cache: ForwardCache<T>,
}

/// Network parameters plus their wiring.
#[derive(Debug, Clone)]
pub struct RegNet<T = f32> {
    cfg: NetworkConfig,
    store: ParameterStore<T>,
    layout: Layout,
}

impl RegNet<f32> {
    pub fn new(cfg: NetworkConfig, seed: u64) -> Result<Self> {
        let store = init_parameters(&cfg, seed)?;
        Self::from_store(cfg, store)
    }
}

impl<T: Real> RegNet<T> {
    /// Wraps an existing store, checking names and shapes against `cfg`.
    pub fn from_store(cfg: NetworkConfig, store: ParameterStore<T>) -> Result<Self> {
        cfg.validate()?;
        let (layout, decls) = declare(&cfg);
        if decls.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                decls.len(),
                store.len()
            )));
        }
        for (d, p) in decls.iter().zip(store.iter()) {
            if d.name != p.name || d.shape != p.shape {
                return Err(Error::Checkpoint(format!(
                    "parameter {} {:?} does not match expected {} {:?}",
                    p.name, p.shape, d.name, d.shape
                )));
            }
        }
        Ok(RegNet { cfg, store, layout })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParameterStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParameterStore<T> {
        &mut self.store
    }

    pub fn into_store(self) -> ParameterStore<T> {
        self.store
    }

    pub fn cast<U: Real>(&self) -> RegNet<U> {
        RegNet {
            cfg: self.cfg.clone(),
            store: self.store.cast(),
            layout: self.layout.clone(),
        }
    }

    fn p(&self, id: ParamId) -> &[T] {
        self.store.value(id)
    }

    fn conv_bn(&self, x: &Tensor<T>, ids: &ConvBnIds, mode: BnMode, stats: &mut Vec<(ParamId, ParamId, BnStats)>) -> (Tensor<T>, ConvBnCache<T>) {
        let c_out = self.store.get(ids.w).shape[0];
        let z = conv3d_forward(x, self.p(ids.w), None, c_out, ids.k);
        let (y, bn, st) = batchnorm_forward(
            &z,
            self.p(ids.gamma),
            self.p(ids.beta),
            self.p(ids.mean),
            self.p(ids.var),
            self.cfg.bn_epsilon,
            mode,
        );
        if mode == BnMode::Batch {
            stats.push((ids.mean, ids.var, st));
        }
        (y, ConvBnCache { input: x.clone(), bn })
    }

    fn conv_bn_backward(&self, cache: &ConvBnCache<T>, d_y: &Tensor<T>, ids: &ConvBnIds, need_input: bool, grads: &mut Gradients<T>) -> Option<Tensor<T>> {
        let (d_z, d_gamma, d_beta) = batchnorm_backward(d_y, &cache.bn, self.p(ids.gamma));
        grads.add(ids.gamma, &d_gamma);
        grads.add(ids.beta, &d_beta);
        let (d_x, d_w, _) = conv3d_backward(&cache.input, self.p(ids.w), &d_z, ids.k, need_input);
        grads.add(ids.w, &d_w);
        d_x
    }

    /// Two conv+BN+ReLU layers with a shortcut added before the last ReLU:
    /// the block input when `residual_is_input`, else the first layer's output.
    fn block(&self, x: &Tensor<T>, ids: &BlockIds, residual_is_input: bool, mode: BnMode, stats: &mut Vec<(ParamId, ParamId, BnStats)>) -> (Tensor<T>, BlockCache<T>) {
        let (a1, c1) = self.conv_bn(x, &ids.conv1, mode, stats);
        let h = relu(&a1);
        let (mut a2, c2) = self.conv_bn(&h, &ids.conv2, mode, stats);
        a2.add_assign(if residual_is_input { x } else { &h });
        let s = relu(&a2);
        (s.clone(), BlockCache { c1, h, c2, s })
    }

    /// Returns the gradient with respect to the block input.
    fn block_backward(&self, cache: &BlockCache<T>, d_s: &Tensor<T>, ids: &BlockIds, residual_is_input: bool, need_input: bool, grads: &mut Gradients<T>) -> Option<Tensor<T>> {
        let d_pre = relu_backward(&cache.s, d_s);
        let mut d_h = self
            .conv_bn_backward(&cache.c2, &d_pre, &ids.conv2, true, grads)
            .expect("input grad requested");
        if !residual_is_input {
            d_h.add_assign(&d_pre);
        }
        let d_a1 = relu_backward(&cache.h, &d_h);
        let d_x = self.conv_bn_backward(&cache.c1, &d_a1, &ids.conv1, need_input || residual_is_input, grads);
        if residual_is_input {
            let mut d_x = d_x.expect("input grad requested");
            d_x.add_assign(&d_pre);
            Some(d_x)
        } else {
            d_x
        }
    }

    /// Forward pass over a `[batch, 2, ...]` input on grid `meta`.
    pub fn forward(&self, input: &Tensor<T>, meta: &GridMeta, mode: BnMode) -> Result<NetOutput<T>> {
        if input.channels != 2 {
            return Err(Error::Shape(format!("network input needs 2 channels, got {}", input.channels)));
        }
        if input.dims != meta.dims {
            return Err(Error::Shape("input dims differ from grid meta".into()));
        }
        if input.dims.iter().any(|&d| d == 0 || d % SIZE_MULTIPLE != 0) {
            return Err(Error::Shape(format!(
                "input dims {:?} must be positive multiples of {SIZE_MULTIPLE}",
                input.dims
            )));
        }
        let batch = input.batch;
        let mut stats = Vec::new();
        let mut down = Vec::with_capacity(DOWN_BLOCKS);
        let mut x = input.clone();
        for ids in &self.layout.down {
            let (s, block) = self.block(&x, ids, false, mode, &mut stats);
            let (pooled, argmax) = maxpool2_forward(&s);
            down.push(DownCache { block, argmax });
            x = pooled;
        }

        let mut cache = ForwardCache {
            meta: *meta,
            batch,
            down,
            bottom: None,
            up: (0..DOWN_BLOCKS).map(|_| None).collect(),
            head_inputs: Vec::new(),
            pooled: None,
            bn_stats: Vec::new(),
        };

        if let Some((w, b)) = self.layout.dense {
            let pooled = global_avg_pool(&x);
            let out = dense_forward(&pooled, batch, self.p(w), self.p(b));
            let mut affine = Vec::with_capacity(batch);
            let mut ddfs = Vec::with_capacity(batch);
            for row in out.chunks(12) {
                let mut arr = [0.0; 12];
                arr.iter_mut().zip(row).for_each(|(a, v)| *a = v.as_f64());
                let p = AffineParams::from_array(arr);
                ddfs.push(affine_to_ddf(&p, meta));
                affine.push(p);
            }
            cache.pooled = Some(pooled);
            cache.bn_stats = stats;
            return Ok(NetOutput {
                ddfs,
                summands: Vec::new(),
                affine,
                cache,
            });
        }

        let bottom_ids = self.layout.bottom.expect("ddf layout has a bottom block");
        let (a, bc) = self.conv_bn(&x, &bottom_ids, mode, &mut stats);
        let g = relu(&a);
        let mut feats: Vec<Option<Tensor<T>>> = vec![None; DOWN_BLOCKS + 1];
        feats[DOWN_BLOCKS] = Some(g.clone());
        cache.bottom = Some((bc, g.clone()));
        let mut cur = g;
        for k in (0..DOWN_BLOCKS).rev() {
            let Some(ids) = self.layout.up[k] else { break };
            let c = self.cfg.channels(k);
            let mut u = deconv2_forward(&cur, self.p(ids.deconv_w), self.p(ids.deconv_b), c);
            u.add_assign(&upsample_additive_forward(&cur, c));
            u.add_assign(&cache.down[k].block.s);
            let (s, block) = self.block(&u, &ids.block, true, mode, &mut stats);
            cache.up[k] = Some(UpCache { cur, block });
            feats[k] = Some(s.clone());
            cur = s;
        }

        let mut summands: Vec<Vec<Summand<T>>> = (0..batch).map(|_| Vec::new()).collect();
        for h in &self.layout.heads {
            let f = feats[h.level].as_ref().expect("feature level computed");
            let d = conv3d_forward(f, self.p(h.w), Some(self.p(h.b)), 3, KERNEL);
            let lmeta = meta.level(h.level);
            for (b, list) in summands.iter_mut().enumerate() {
                list.push(Summand {
                    level: h.level,
                    field: DisplacementField::from_parts(lmeta, d.slice_batch(b).data),
                });
            }
            cache.head_inputs.push(f.clone());
        }
        let ddfs = summands
            .iter()
            .map(|s| aggregate_summands(meta, s))
            .collect::<Result<Vec<_>>>()?;
        cache.bn_stats = stats;
        Ok(NetOutput {
            ddfs,
            summands,
            affine: Vec::new(),
            cache,
        })
    }

    /// Reverse pass: `d_ddf[b]` is the loss gradient on batch element `b`'s
    /// aggregated field. Returns gradients for every parameter touched.
    pub fn backward(&self, cache: &ForwardCache<T>, d_ddf: &[Vec<T>]) -> Gradients<T> {
        assert_eq!(d_ddf.len(), cache.batch, "one DDF gradient per batch element");
        let mut grads = Gradients::empty(self.store.len());
        let batch = cache.batch;
        let meta = &cache.meta;
        let mut d_skip: Vec<Option<Tensor<T>>> = (0..DOWN_BLOCKS).map(|_| None).collect();

        let mut d_x = if let Some((w, b)) = self.layout.dense {
            let pooled = cache.pooled.as_ref().expect("affine cache");
            let mut d_out = Vec::with_capacity(batch * 12);
            for d in d_ddf {
                d_out.extend(affine_param_grad(meta, d).iter().map(|&v| T::lit(v)));
            }
            let (d_pooled, d_w, d_b) = dense_backward(pooled, batch, self.p(w), &d_out, 12);
            grads.add(w, &d_w);
            grads.add(b, &d_b);
            let last = &cache.down[DOWN_BLOCKS - 1].block.s;
            let dims = last.dims.map(|d| d / 2);
            global_avg_pool_backward(&d_pooled, batch, last.channels, dims)
        } else {
            let mut d_feats: Vec<Option<Tensor<T>>> = vec![None; DOWN_BLOCKS + 1];
            for (h, f) in self.layout.heads.iter().zip(&cache.head_inputs) {
                let lmeta = meta.level(h.level);
                let mut parts = Vec::with_capacity(batch);
                for d in d_ddf {
                    let g = aggregate_summands_adjoint(meta, &[h.level], d).pop().expect("one level");
                    parts.push(Tensor::from_vec(1, 3, lmeta.dims, g));
                }
                let d_out = Tensor::stack(&parts);
                let (d_in, d_w, d_b) = conv3d_backward(f, self.p(h.w), &d_out, KERNEL, true);
                grads.add(h.w, &d_w);
                grads.add(h.b, &d_b);
                add_into(&mut d_feats[h.level], d_in.expect("input grad requested"));
            }
            for k in 0..DOWN_BLOCKS {
                let (Some(ids), Some(uc)) = (self.layout.up[k], cache.up[k].as_ref()) else { continue };
                let d_s = d_feats[k].take().unwrap_or_else(|| Tensor::zeros(batch, uc.block.s.channels, uc.block.s.dims));
                let d_u = self
                    .block_backward(&uc.block, &d_s, &ids.block, true, true, &mut grads)
                    .expect("input grad requested");
                let (mut d_cur, d_w, d_b) = deconv2_backward(&uc.cur, self.p(ids.deconv_w), &d_u);
                grads.add(ids.deconv_w, &d_w);
                grads.add(ids.deconv_b, &d_b);
                d_cur.add_assign(&upsample_additive_backward(&d_u, uc.cur.channels));
                add_into(&mut d_feats[k + 1], d_cur);
                d_skip[k] = Some(d_u);
            }
            let (bc, g) = cache.bottom.as_ref().expect("ddf cache has a bottom block");
            let d_g = d_feats[DOWN_BLOCKS].take().unwrap_or_else(|| Tensor::zeros(batch, g.channels, g.dims));
            let d_a = relu_backward(g, &d_g);
            let ids = self.layout.bottom.expect("ddf layout has a bottom block");
            self.conv_bn_backward(bc, &d_a, &ids, true, &mut grads)
                .expect("input grad requested")
        };

        for k in (0..DOWN_BLOCKS).rev() {
            let dc = &cache.down[k];
            let mut d_s = maxpool2_backward(&d_x, &dc.argmax, dc.block.s.dims);
            if let Some(ds) = d_skip[k].take() {
                d_s.add_assign(&ds);
            }
            let need = k > 0;
            match self.block_backward(&dc.block, &d_s, &self.layout.down[k], false, need, &mut grads) {
                Some(d) => d_x = d,
                None => break,
            }
        }
        grads
    }

    /// Folds the batch statistics observed in `cache` into the running
    /// averages.
    pub fn update_running_stats(&mut self, cache: &ForwardCache<T>) {
        let mom = self.cfg.bn_momentum;
        for (mean_id, var_id, stats) in &cache.bn_stats {
            for (ch, &(mu, var)) in stats.iter().enumerate() {
                let m = &mut self.store.get_mut(*mean_id).value[ch];
                *m = T::lit(mom * m.as_f64() + (1.0 - mom) * mu);
                let v = &mut self.store.get_mut(*var_id).value[ch];
                *v = T::lit(mom * v.as_f64() + (1.0 - mom) * var);
            }
        }
    }

    /// Inference on one image pair using running batch-norm statistics.
    pub fn predict(&self, moving: &Volume<T>, fixed: &Volume<T>) -> Result<DisplacementField<T>> {
        if moving.meta() != fixed.meta() {
            return Err(Error::Shape("moving and fixed grids differ".into()));
        }
        let input = pack_pairs(&[(moving, fixed)])?;
        let mut out = self.forward(&input, moving.meta(), BnMode::Running)?;
        Ok(out.ddfs.remove(0))
    }
}

fn add_into<T: Real>(slot: &mut Option<Tensor<T>>, t: Tensor<T>) {
    match slot {
        Some(acc) => acc.add_assign(&t),
        None => *slot = Some(t),
    }
}

/// Gradient of a loss with respect to the 12 affine parameters given its
/// gradient on the field `u(x) = A·x + t − x`.
fn affine_param_grad<T: Real>(meta: &GridMeta, d_u: &[T]) -> [f64; 12] {
    let n = meta.len();
    let mut g = [0.0; 12];
    for idx in 0..n {
        let p = meta.position(idx);
        for i in 0..3 {
            let d = d_u[i * n + idx].as_f64();
            for j in 0..3 {
                g[3 * i + j] += d * p[j];
            }
            g[9 + i] += d;
        }
    }
    g
}
