//! Mini-batch training loop: Adam with bias correction, linear warmup into
//! cosine annealing, frequency-sketch maintenance, and resumable state.
//!
//! Every random choice in a step (batch order, negatives, dropout) derives
//! from (seed, purpose tag, step), so a resumed run replays exactly the
//! stream an uninterrupted run would have seen.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Checkpoint, CheckpointError};
use crate::features::FeatureStore;
use crate::loss::{self, FrequencySketches, LossBatch, LossError};
use crate::model::{
    param_layout, Dropout, ModelConfig, ModelError, ModelParams, PinContext,
};
use crate::nn::Tensor;
use crate::seeds::{self, tags};
use crate::sketch::CountMinSketch;
use crate::walk::NeighborTable;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("train config: {0}")]
    Config(String),
    #[error("non-finite {quantity} in tensor {tensor} at step {step}")]
    NonFinite {
        quantity: &'static str,
        tensor: String,
        step: u64,
    },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("checkpoint does not match the model config: {0}")]
    StateMismatch(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("train io: {0}")]
    Io(#[from] std::io::Error),
}

fn default_peak_lr() -> f64 {
    0.002
}
fn default_batch_size() -> usize {
    128
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_clip_norm() -> f64 {
    10.0
}
fn default_sketch_width() -> usize {
    2048
}
fn default_sketch_depth() -> usize {
    4
}
fn default_prob_floor() -> f64 {
    1e-9
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_peak_lr")]
    pub peak_lr: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    pub steps: u64,
    /// Defaults to 5% of steps when absent.
    #[serde(default)]
    pub warmup_steps: Option<u64>,
    #[serde(default)]
    pub floor_lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Gradients are scaled down when their global norm exceeds this.
    #[serde(default = "default_clip_norm")]
    pub clip_norm: f64,
    #[serde(default)]
    pub seed: u64,
    /// Emit held-out recall every this many steps; 0 disables.
    #[serde(default)]
    pub eval_every: u64,
    #[serde(default = "default_sketch_width")]
    pub sketch_width: usize,
    #[serde(default = "default_sketch_depth")]
    pub sketch_depth: usize,
    #[serde(default = "default_prob_floor")]
    pub prob_floor: f64,
}

impl TrainConfig {
    pub fn warmup(&self) -> u64 {
        self.warmup_steps.unwrap_or(self.steps / 20)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |m: String| Err(TrainError::Config(m));
        if self.steps == 0 {
            return fail("steps must be positive".into());
        }
        if self.warmup() >= self.steps {
            return fail(format!(
                "warmup_steps {} must be below steps {}",
                self.warmup(),
                self.steps
            ));
        }
        if !(self.peak_lr > self.floor_lr) || self.floor_lr < 0.0 {
            return fail(format!(
                "need peak_lr {} > floor_lr {} >= 0",
                self.peak_lr, self.floor_lr
            ));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        for (name, v, lo, hi) in [
            ("beta1", self.beta1, 0.0, 1.0),
            ("beta2", self.beta2, 0.0, 1.0),
        ] {
            if !(v > lo && v < hi) {
                return fail(format!("{name} {v} outside ({lo}, {hi})"));
            }
        }
        if !(self.eps > 0.0) || !(self.clip_norm > 0.0) || !(self.prob_floor > 0.0) {
            return fail("eps, clip_norm, prob_floor must be positive".into());
        }
        if self.sketch_width == 0 || self.sketch_depth == 0 {
            return fail("sketch dims must be positive".into());
        }
        Ok(())
    }
}

/// Learning rate at a 0-based step: linear ramp to peak_lr over the warmup,
/// then half-cosine decay to floor_lr at the final step.
pub fn lr_at(step: u64, cfg: &TrainConfig) -> f64 {
    let w = cfg.warmup();
    if step < w {
        cfg.peak_lr * (step + 1) as f64 / w as f64
    } else {
        let t = (step - w) as f64 / (cfg.steps - w) as f64;
        cfg.floor_lr + 0.5 * (cfg.peak_lr - cfg.floor_lr) * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// Everything a resumed run needs: parameters, optimizer moments, the two
/// frequency sketches, the step counter, and the seed.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: ModelParams,
    /// First and second Adam moments, index-aligned with the registry.
    pub adam_m: Vec<Tensor>,
    pub adam_v: Vec<Tensor>,
    pub step: u64,
    pub sketches: FrequencySketches,
    pub seed: u64,
}

impl TrainState {
    pub fn new(model_cfg: &ModelConfig, train_cfg: &TrainConfig) -> Result<Self, TrainError> {
        train_cfg.validate()?;
        let params = ModelParams::init(model_cfg, train_cfg.seed).map_err(ModelError::Nn)?;
        let adam_m = params.tensors().iter().map(|t| Tensor::zeros(&t.dims)).collect();
        let adam_v = params.tensors().iter().map(|t| Tensor::zeros(&t.dims)).collect();
        Ok(TrainState {
            params,
            adam_m,
            adam_v,
            step: 0,
            sketches: FrequencySketches::new(
                train_cfg.sketch_width,
                train_cfg.sketch_depth,
                train_cfg.seed,
                train_cfg.prob_floor,
            ),
            seed: train_cfg.seed,
        })
    }
}

/// Scale all gradients by clip/norm when the global L2 norm exceeds clip.
/// Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [Tensor], clip: f64) -> f64 {
    let sq: f64 = grads
        .iter()
        .flat_map(|g| g.data.iter())
        .map(|&v| v * v)
        .sum();
    let norm = sq.sqrt();
    if norm > clip {
        let s = clip / norm;
        for g in grads {
            for v in &mut g.data {
                *v *= s;
            }
        }
    }
    norm
}

/// One Adam update with bias correction. Increments the step counter;
/// rejects non-finite gradients or resulting parameters by name.
pub fn adam_step(
    state: &mut TrainState,
    grads: &[Tensor],
    lr: f64,
    cfg: &TrainConfig,
) -> Result<(), TrainError> {
    assert_eq!(grads.len(), state.params.len(), "one gradient per tensor");
    state.step += 1;
    let t = state.step;
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    let names = state.params.names().to_vec();
    for (i, g) in grads.iter().enumerate() {
        let m = &mut state.adam_m[i].data;
        let v = &mut state.adam_v[i].data;
        let w = &mut state.params.tensors_mut()[i].data;
        for j in 0..g.data.len() {
            let gj = g.data[j];
            if !gj.is_finite() {
                return Err(TrainError::NonFinite {
                    quantity: "gradient",
                    tensor: names[i].clone(),
                    step: t,
                });
            }
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            w[j] -= lr * mhat / (vhat.sqrt() + cfg.eps);
            if !w[j].is_finite() {
                return Err(TrainError::NonFinite {
                    quantity: "parameter",
                    tensor: names[i].clone(),
                    step: t,
                });
            }
        }
    }
    Ok(())
}

/// One metrics row per training step.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub step: u64,
    pub lr: f64,
    pub loss_in_batch: f64,
    pub loss_mixed: f64,
    pub loss_total: f64,
}

pub fn write_metrics_tsv(rows: &[MetricRow], w: &mut impl Write) -> std::io::Result<()> {
    writeln!(w, "step\tlr\tloss_in_batch\tloss_mixed\tloss_total")?;
    for r in rows {
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}",
            r.step, r.lr, r.loss_in_batch, r.loss_mixed, r.loss_total
        )?;
    }
    Ok(())
}

pub fn write_recall_tsv(rows: &[(u64, f64)], w: &mut impl Write) -> std::io::Result<()> {
    writeln!(w, "step\trecall")?;
    for (step, recall) in rows {
        writeln!(w, "{step}\t{recall}")?;
    }
    Ok(())
}

/// Deterministic pair order: each epoch is a fresh seeded shuffle, and a
/// batch that straddles an epoch boundary reads from both permutations.
struct PairSchedule {
    len: usize,
    seed: u64,
    epoch: u64,
    perm: Vec<u32>,
}

impl PairSchedule {
    fn new(len: usize, seed: u64) -> Self {
        let mut s = PairSchedule { len, seed, epoch: 0, perm: Vec::new() };
        s.load_epoch(0);
        s
    }

    fn load_epoch(&mut self, epoch: u64) {
        let mut perm: Vec<u32> = (0..self.len as u32).collect();
        let mut rng = seeds::rng(self.seed, tags::SHUFFLE, epoch, 0);
        // Fisher-Yates
        for i in (1..perm.len()).rev() {
            let j = rand::Rng::random_range(&mut rng, 0..=i);
            perm.swap(i, j);
        }
        self.epoch = epoch;
        self.perm = perm;
    }

    fn index_at(&mut self, position: u64) -> usize {
        let epoch = position / self.len as u64;
        if epoch != self.epoch {
            self.load_epoch(epoch);
        }
        self.perm[(position % self.len as u64) as usize] as usize
    }
}

/// Run training until the configured step budget, mutating `state` in
/// place. `pause_at` stops the loop early at that step without touching
/// the schedule, so a paused-and-resumed run replays the uninterrupted
/// one. `eval_hook`, when present, is called at eval_every boundaries and
/// its value recorded as held-out recall.
///
/// Each step: draw the batch from the shuffled pair stream, draw |B|
/// uniform negatives from the catalog, fold both into the frequency
/// sketches, evaluate the combined loss with the sketch estimates, clip,
/// and apply Adam at the scheduled rate.
#[allow(clippy::too_many_arguments)]
pub fn fit(
    state: &mut TrainState,
    pairs: &[(u64, u64)],
    table: &NeighborTable,
    features: &FeatureStore,
    catalog: &[u64],
    graph_ids: &[u32],
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    pause_at: Option<u64>,
    mut eval_hook: Option<&mut dyn FnMut(u64, &TrainState) -> Result<f64, TrainError>>,
) -> Result<(Vec<MetricRow>, Vec<(u64, f64)>), TrainError> {
    train_cfg.validate()?;
    model_cfg.validate().map_err(|e| TrainError::Config(e.to_string()))?;
    if pairs.is_empty() || catalog.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut schedule = PairSchedule::new(pairs.len(), state.seed);
    let mut ctx_cache: HashMap<u64, PinContext> = HashMap::new();
    let mut metrics = Vec::new();
    let mut recalls = Vec::new();

    let horizon = pause_at.map_or(train_cfg.steps, |p| p.min(train_cfg.steps));
    while state.step < horizon {
        let step = state.step;
        let b = train_cfg.batch_size;

        let mut queries = Vec::with_capacity(b);
        let mut positives = Vec::with_capacity(b);
        for i in 0..b {
            let (q, e) = pairs[schedule.index_at(step * b as u64 + i as u64)];
            for id in [q, e] {
                if !ctx_cache.contains_key(&id) {
                    let ctx = PinContext::build(id, graph_ids, model_cfg, features, table)?;
                    ctx_cache.insert(id, ctx);
                }
            }
            queries.push(ctx_cache[&q].clone());
            positives.push(ctx_cache[&e].clone());
        }
        let mut neg_rng = seeds::rng(state.seed, tags::NEG, step, 0);
        let mut negatives = Vec::with_capacity(b);
        for _ in 0..b {
            let id = catalog[rand::Rng::random_range(&mut neg_rng, 0..catalog.len())];
            if !ctx_cache.contains_key(&id) {
                let ctx = PinContext::build(id, graph_ids, model_cfg, features, table)?;
                ctx_cache.insert(id, ctx);
            }
            negatives.push(ctx_cache[&id].clone());
        }

        // sketches see this batch before the loss reads estimates from them
        let pos_ids: Vec<u64> = positives.iter().map(|c| c.pin_id).collect();
        let neg_ids: Vec<u64> = negatives.iter().map(|c| c.pin_id).collect();
        state.sketches.observe(&pos_ids, &neg_ids);

        let mut drop = Dropout::new(
            model_cfg.dropout,
            seeds::rng(state.seed, tags::DROPOUT, step, 0),
        );
        let batch = LossBatch {
            queries: &queries,
            positives: &positives,
            negatives: &negatives,
        };
        let out = loss::combined_loss(&batch, &state.params, model_cfg, &state.sketches, &mut drop)?;
        let lr = lr_at(step, train_cfg);
        metrics.push(MetricRow {
            step,
            lr,
            loss_in_batch: out.in_batch,
            loss_mixed: out.mixed,
            loss_total: out.total,
        });

        let mut grads = out.grads;
        clip_global_norm(&mut grads, train_cfg.clip_norm);
        adam_step(state, &grads, lr, train_cfg)?;

        if train_cfg.eval_every > 0 && state.step % train_cfg.eval_every == 0 {
            if let Some(hook) = eval_hook.as_mut() {
                let r = hook(state.step, state)?;
                recalls.push((state.step, r));
            }
        }
    }
    Ok((metrics, recalls))
}

fn split_u64(v: u64) -> [f32; 2] {
    [f32::from_bits(v as u32), f32::from_bits((v >> 32) as u32)]
}

fn join_u64(lo: f32, hi: f32) -> u64 {
    (lo.to_bits() as u64) | ((hi.to_bits() as u64) << 32)
}

fn sketch_entries(ck: &mut Checkpoint, prefix: &str, s: &CountMinSketch) {
    let meta: Vec<f32> = [s.width() as u64, s.depth() as u64, s.seed(), s.total()]
        .iter()
        .flat_map(|&v| split_u64(v))
        .collect();
    ck.push(format!("{prefix}/meta"), vec![meta.len()], meta);
    let cells: Vec<f32> = s.cells().iter().flat_map(|&c| split_u64(c)).collect();
    ck.push(format!("{prefix}/cells"), vec![cells.len()], cells);
}

fn sketch_from_entries(ck: &Checkpoint, prefix: &str) -> Result<CountMinSketch, TrainError> {
    let meta = ck
        .get(&format!("{prefix}/meta"))
        .ok_or_else(|| TrainError::StateMismatch(format!("missing {prefix}/meta")))?;
    if meta.values.len() != 8 {
        return Err(TrainError::StateMismatch(format!("{prefix}/meta has wrong length")));
    }
    let read = |i: usize| join_u64(meta.values[2 * i], meta.values[2 * i + 1]);
    let (width, depth, seed, total) =
        (read(0) as usize, read(1) as usize, read(2), read(3));
    if width == 0 || depth == 0 {
        return Err(TrainError::StateMismatch(format!("{prefix} has empty dims")));
    }
    let cells_entry = ck
        .get(&format!("{prefix}/cells"))
        .ok_or_else(|| TrainError::StateMismatch(format!("missing {prefix}/cells")))?;
    let expect = width
        .checked_mul(depth)
        .and_then(|n| n.checked_mul(2))
        .ok_or_else(|| TrainError::StateMismatch(format!("{prefix} dims overflow")))?;
    if cells_entry.values.len() != expect {
        return Err(TrainError::StateMismatch(format!(
            "{prefix}/cells has {} values, want {expect}",
            cells_entry.values.len()
        )));
    }
    let cells: Vec<u64> = cells_entry
        .values
        .chunks_exact(2)
        .map(|p| join_u64(p[0], p[1]))
        .collect();
    Ok(CountMinSketch::from_parts(width, depth, seed, cells, total))
}

impl TrainState {
    /// Serialize to the named-tensor container: parameters and moments at
    /// 32-bit precision, sketch cells and counters bit-exact.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        let down = |t: &Tensor| -> Vec<f32> { t.data.iter().map(|&v| v as f32).collect() };
        for (name, t) in self.params.iter() {
            ck.push(name.to_string(), t.dims.clone(), down(t));
        }
        for ((name, _), m) in self.params.iter().zip(&self.adam_m) {
            ck.push(format!("adam_m/{name}"), m.dims.clone(), down(m));
        }
        for ((name, _), v) in self.params.iter().zip(&self.adam_v) {
            ck.push(format!("adam_v/{name}"), v.dims.clone(), down(v));
        }
        sketch_entries(&mut ck, "sketch_pos", self.sketches.positives());
        sketch_entries(&mut ck, "sketch_neg", self.sketches.negatives());
        let mut meta: Vec<f32> = Vec::new();
        meta.extend(split_u64(self.step));
        meta.extend(split_u64(self.seed));
        ck.push("meta/counters", vec![4], meta);
        ck.push("meta/prob_floor", vec![1], vec![self.sketches.floor() as f32]);
        ck
    }

    /// Rebuild from a checkpoint, validating every tensor against the
    /// layout the config implies.
    pub fn from_checkpoint(ck: &Checkpoint, model_cfg: &ModelConfig) -> Result<Self, TrainError> {
        model_cfg
            .validate()
            .map_err(|e| TrainError::StateMismatch(e.to_string()))?;
        let mut params = ModelParams::default();
        let mut adam_m = Vec::new();
        let mut adam_v = Vec::new();
        for spec in param_layout(model_cfg) {
            let up = |entry: &checkpoint::Entry| -> Result<Tensor, TrainError> {
                if entry.dims != spec.dims {
                    return Err(TrainError::StateMismatch(format!(
                        "{} has dims {:?}, config wants {:?}",
                        entry.name, entry.dims, spec.dims
                    )));
                }
                Ok(Tensor::from_vec(
                    &entry.dims,
                    entry.values.iter().map(|&v| v as f64).collect(),
                ))
            };
            let main = ck
                .get(&spec.name)
                .ok_or_else(|| TrainError::StateMismatch(format!("missing tensor {}", spec.name)))?;
            params.push(spec.name.clone(), up(main)?);
            let m = ck
                .get(&format!("adam_m/{}", spec.name))
                .ok_or_else(|| TrainError::StateMismatch(format!("missing adam_m/{}", spec.name)))?;
            adam_m.push(up(m)?);
            let v = ck
                .get(&format!("adam_v/{}", spec.name))
                .ok_or_else(|| TrainError::StateMismatch(format!("missing adam_v/{}", spec.name)))?;
            adam_v.push(up(v)?);
        }
        let meta = ck
            .get("meta/counters")
            .ok_or_else(|| TrainError::StateMismatch("missing meta/counters".into()))?;
        if meta.values.len() != 4 {
            return Err(TrainError::StateMismatch("meta/counters has wrong length".into()));
        }
        let step = join_u64(meta.values[0], meta.values[1]);
        let seed = join_u64(meta.values[2], meta.values[3]);
        let floor_entry = ck
            .get("meta/prob_floor")
            .ok_or_else(|| TrainError::StateMismatch("missing meta/prob_floor".into()))?;
        let floor = floor_entry.values.first().copied().unwrap_or(0.0) as f64;
        if !(floor > 0.0) {
            return Err(TrainError::StateMismatch("prob_floor must be positive".into()));
        }
        let positives = sketch_from_entries(ck, "sketch_pos")?;
        let negatives = sketch_from_entries(ck, "sketch_neg")?;
        Ok(TrainState {
            params,
            adam_m,
            adam_v,
            step,
            sketches: FrequencySketches::from_parts(positives, negatives, floor),
            seed,
        })
    }
}

pub fn save_state(state: &TrainState, path: impl AsRef<Path>) -> Result<(), TrainError> {
    state.to_checkpoint().save(path)?;
    Ok(())
}

pub fn load_state(path: impl AsRef<Path>, model_cfg: &ModelConfig) -> Result<TrainState, TrainError> {
    let ck = checkpoint::load_checkpoint(path)?;
    TrainState::from_checkpoint(&ck, model_cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{EncoderMode, Variant};

    fn train_cfg(steps: u64) -> TrainConfig {
        TrainConfig {
            peak_lr: 0.002,
            batch_size: 4,
            steps,
            warmup_steps: None,
            floor_lr: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 10.0,
            seed: 11,
            eval_every: 0,
            sketch_width: 128,
            sketch_depth: 4,
            prob_floor: 1e-9,
        }
    }

    fn model_cfg() -> ModelConfig {
        ModelConfig {
            k: 2,
            n: 2,
            d_v: 5,
            d_t: 3,
            d_h: 8,
            d: 8,
            heads: 2,
            variant: Variant::Multibisage,
            encoder_mode: EncoderMode::AttentionOnly,
            dropout: 0.0,
            logit_scale: 5.0,
        }
    }

    /// Two planted clusters: pins 0..8 in cluster A, 8..16 in cluster B.
    /// Features point at opposed directions plus mild per-pin jitter, and
    /// the neighbor table connects pins within their own cluster.
    fn fixture() -> (FeatureStore, NeighborTable, Vec<(u64, u64)>, Vec<u64>) {
        let cfg = model_cfg();
        let mut feats = FeatureStore::new(cfg.d_v, cfg.d_t);
        let mut table = NeighborTable::new();
        let catalog: Vec<u64> = (0..16).collect();
        for &id in &catalog {
            let sign = if id < 8 { 1.0 } else { -1.0 };
            let j = (id % 8) as f64 * 0.03;
            let v: Vec<f64> = (0..cfg.d_v).map(|c| sign * (1.0 - 0.1 * c as f64) + j).collect();
            let t: Vec<f64> = (0..cfg.d_t).map(|c| sign * (0.5 + 0.1 * c as f64) - j).collect();
            feats.insert(id, &v, &t);
            for gid in 0..2u32 {
                let base = if id < 8 { 0u64 } else { 8 };
                let nbrs: Vec<crate::walk::NeighborEntry> = (0..3)
                    .map(|r| crate::walk::NeighborEntry {
                        neighbor_id: base + ((id - base) + r + 1) % 8,
                        visits: 5 - r,
                    })
                    .collect();
                table.insert(id, gid, nbrs);
            }
        }
        let mut pairs = Vec::new();
        for i in 0..8u64 {
            pairs.push((i, (i + 3) % 8));
            pairs.push((8 + i, 8 + ((i + 3) % 8)));
        }
        (feats, table, pairs, catalog)
    }

    #[test]
    fn schedule_hits_peak_floor_and_midpoint() {
        let mut cfg = train_cfg(1000);
        cfg.warmup_steps = Some(100);
        cfg.floor_lr = 0.0004;
        assert!((lr_at(100, &cfg) - cfg.peak_lr).abs() < 1e-15);
        assert!((lr_at(1000, &cfg) - cfg.floor_lr).abs() < 1e-12);
        let mid = 100 + (1000 - 100) / 2;
        assert!((lr_at(mid, &cfg) - (cfg.peak_lr + cfg.floor_lr) / 2.0).abs() < 1e-12);
        // continuity across the boundary: last warmup step already at peak
        assert!((lr_at(99, &cfg) - cfg.peak_lr).abs() < 1e-15);
        // non-negative and finite across the whole horizon
        for s in 0..=1000 {
            let lr = lr_at(s, &cfg);
            assert!(lr.is_finite() && lr >= 0.0, "step {s} lr {lr}");
        }
    }

    #[test]
    fn warmup_defaults_to_five_percent() {
        let cfg = train_cfg(2000);
        assert_eq!(cfg.warmup(), 100);
    }

    #[test]
    fn validation_rejects_bad_configs() {
        let mut cfg = train_cfg(100);
        cfg.warmup_steps = Some(100);
        assert!(cfg.validate().is_err());
        let mut cfg = train_cfg(100);
        cfg.floor_lr = 0.002;
        assert!(cfg.validate().is_err());
        let mut cfg = train_cfg(100);
        cfg.steps = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = train_cfg(100);
        cfg.beta1 = 1.0;
        assert!(cfg.validate().is_err());
    }

    fn scalar_state(w: &[f64]) -> (TrainState, TrainConfig) {
        // hand-built single-tensor state for optimizer math tests
        let mut params = ModelParams::default();
        params.push("w".into(), Tensor::from_vec(&[w.len()], w.to_vec()));
        let adam_m = vec![Tensor::zeros(&[w.len()])];
        let adam_v = vec![Tensor::zeros(&[w.len()])];
        let state = TrainState {
            params,
            adam_m,
            adam_v,
            step: 0,
            sketches: FrequencySketches::new(16, 2, 1, 1e-9),
            seed: 1,
        };
        (state, train_cfg(1000))
    }

    #[test]
    fn adam_first_step_matches_hand_calculation() {
        let (mut state, cfg) = scalar_state(&[1.0]);
        let g = vec![Tensor::from_vec(&[1], vec![1.0])];
        adam_step(&mut state, &g, 0.1, &cfg).unwrap();
        // bias-corrected first step moves by lr/(1+eps-ish)
        let w = state.params.get("w").unwrap().data[0];
        assert!((w - 0.9).abs() < 1e-6, "w = {w}");
        assert_eq!(state.step, 1);
    }

    #[test]
    fn zero_gradients_leave_parameters_unchanged() {
        let (mut state, cfg) = scalar_state(&[1.5, -2.5]);
        let g = vec![Tensor::zeros(&[2])];
        adam_step(&mut state, &g, 0.1, &cfg).unwrap();
        assert_eq!(state.params.get("w").unwrap().data, vec![1.5, -2.5]);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn adam_converges_on_quadratic() {
        let (mut state, cfg) = scalar_state(&[5.0, -5.0]);
        for _ in 0..100 {
            let w = state.params.get("w").unwrap().data.clone();
            let g = vec![Tensor::from_vec(&[2], w.iter().map(|v| 2.0 * v).collect())];
            adam_step(&mut state, &g, 0.1, &cfg).unwrap();
        }
        let w = state.params.get("w").unwrap();
        let norm: f64 = w.data.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm < 0.5, "norm {norm}");
    }

    #[test]
    fn non_finite_gradient_names_the_tensor() {
        let (mut state, cfg) = scalar_state(&[1.0]);
        let g = vec![Tensor::from_vec(&[1], vec![f64::NAN])];
        match adam_step(&mut state, &g, 0.1, &cfg) {
            Err(TrainError::NonFinite { tensor, .. }) => assert_eq!(tensor, "w"),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn clipping_rescales_only_above_threshold() {
        let mut grads = vec![
            Tensor::from_vec(&[2], vec![3.0, 0.0]),
            Tensor::from_vec(&[1], vec![4.0]),
        ];
        let norm = clip_global_norm(&mut grads, 10.0);
        assert_eq!(norm, 5.0);
        assert_eq!(grads[0].data, vec![3.0, 0.0]);
        let norm = clip_global_norm(&mut grads, 2.5);
        assert_eq!(norm, 5.0);
        let new_sq: f64 = grads.iter().flat_map(|g| g.data.iter()).map(|v| v * v).sum();
        assert!((new_sq.sqrt() - 2.5).abs() < 1e-12);
    }

    #[test]
    fn zero_steps_returns_initial_params_bitwise() {
        let (feats, table, pairs, catalog) = fixture();
        let mcfg = model_cfg();
        let mut tcfg = train_cfg(5);
        tcfg.steps = 5;
        let mut state = TrainState::new(&mcfg, &tcfg).unwrap();
        let before: Vec<Vec<f64>> = state.params.tensors().iter().map(|t| t.data.clone()).collect();
        state.step = 5; // budget already spent: fit must be a no-op
        let (metrics, _) = fit(
            &mut state, &pairs, &table, &feats, &catalog, &[0, 1], &mcfg, &tcfg, None, None,
        )
        .unwrap();
        assert!(metrics.is_empty());
        for (t, b) in state.params.tensors().iter().zip(&before) {
            assert_eq!(&t.data, b);
        }
    }

    #[test]
    fn fixed_seed_runs_are_identical() {
        let (feats, table, pairs, catalog) = fixture();
        let mcfg = model_cfg();
        let tcfg = train_cfg(6);
        let run = || {
            let mut state = TrainState::new(&mcfg, &tcfg).unwrap();
            let (metrics, _) = fit(
                &mut state, &pairs, &table, &feats, &catalog, &[0, 1], &mcfg, &tcfg, None, None,
            )
            .unwrap();
            (metrics, state)
        };
        let (m1, s1) = run();
        let (m2, s2) = run();
        assert_eq!(m1, m2);
        for (a, b) in s1.params.tensors().iter().zip(s2.params.tensors()) {
            assert_eq!(a.data, b.data);
        }
    }

    #[test]
    fn sketch_totals_count_every_observation() {
        let (feats, table, pairs, catalog) = fixture();
        let mcfg = model_cfg();
        let tcfg = train_cfg(6);
        let mut state = TrainState::new(&mcfg, &tcfg).unwrap();
        fit(&mut state, &pairs, &table, &feats, &catalog, &[0, 1], &mcfg, &tcfg, None, None).unwrap();
        let want = 6 * tcfg.batch_size as u64;
        assert_eq!(state.sketches.positives().total(), want);
        assert_eq!(state.sketches.negatives().total(), want);
    }

    #[test]
    fn loss_decreases_on_learnable_fixture() {
        let (feats, table, pairs, catalog) = fixture();
        let mcfg = model_cfg();
        let mut tcfg = train_cfg(80);
        tcfg.batch_size = 8;
        tcfg.warmup_steps = Some(8);
        let mut state = TrainState::new(&mcfg, &tcfg).unwrap();
        let (metrics, _) = fit(
            &mut state, &pairs, &table, &feats, &catalog, &[0, 1], &mcfg, &tcfg, None, None,
        )
        .unwrap();
        let first: f64 = metrics[..8].iter().map(|m| m.loss_total).sum::<f64>() / 8.0;
        let last: f64 = metrics[metrics.len() - 8..].iter().map(|m| m.loss_total).sum::<f64>() / 8.0;
        assert!(last < first, "no descent: first {first} last {last}");
    }

    #[test]
    fn eval_hook_fires_on_schedule() {
        let (feats, table, pairs, catalog) = fixture();
        let mcfg = model_cfg();
        let mut tcfg = train_cfg(6);
        tcfg.eval_every = 2;
        let mut state = TrainState::new(&mcfg, &tcfg).unwrap();
        let mut calls = Vec::new();
        let mut hook = |step: u64, _: &TrainState| {
            calls.push(step);
            Ok(0.5)
        };
        let (_, recalls) = fit(
            &mut state, &pairs, &table, &feats, &catalog, &[0, 1], &mcfg, &tcfg, None,
            Some(&mut hook),
        )
        .unwrap();
        assert_eq!(calls, vec![2, 4, 6]);
        assert_eq!(recalls, vec![(2, 0.5), (4, 0.5), (6, 0.5)]);
    }

    #[test]
    fn state_round_trips_through_checkpoint_bytes() {
        let (feats, table, pairs, catalog) = fixture();
        let mcfg = model_cfg();
        let tcfg = train_cfg(3);
        let mut state = TrainState::new(&mcfg, &tcfg).unwrap();
        fit(&mut state, &pairs, &table, &feats, &catalog, &[0, 1], &mcfg, &tcfg, None, None).unwrap();
        let ck = state.to_checkpoint();
        let mut buf1 = Vec::new();
        ck.write(&mut buf1).unwrap();
        let loaded = TrainState::from_checkpoint(&ck, &mcfg).unwrap();
        assert_eq!(loaded.step, state.step);
        assert_eq!(loaded.seed, state.seed);
        assert_eq!(
            loaded.sketches.positives().cells(),
            state.sketches.positives().cells()
        );
        assert_eq!(loaded.sketches.negatives().total(), state.sketches.negatives().total());
        let mut buf2 = Vec::new();
        loaded.to_checkpoint().write(&mut buf2).unwrap();
        assert_eq!(buf1, buf2, "save -> load -> save must be byte-identical");
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let (feats, table, pairs, catalog) = fixture();
        let mcfg = model_cfg();
        let tcfg = train_cfg(6);

        let mut full = TrainState::new(&mcfg, &tcfg).unwrap();
        let (full_metrics, _) = fit(
            &mut full, &pairs, &table, &feats, &catalog, &[0, 1], &mcfg, &tcfg, None, None,
        )
        .unwrap();

        let mut half = TrainState::new(&mcfg, &tcfg).unwrap();
        fit(
            &mut half, &pairs, &table, &feats, &catalog, &[0, 1], &mcfg, &tcfg, Some(3), None,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mid.bsck");
        save_state(&half, &path).unwrap();
        let mut resumed = load_state(&path, &mcfg).unwrap();
        assert_eq!(resumed.step, 3);
        let (tail_metrics, _) = fit(
            &mut resumed, &pairs, &table, &feats, &catalog, &[0, 1], &mcfg, &tcfg, None, None,
        )
        .unwrap();

        assert_eq!(tail_metrics.len(), 3);
        for (a, b) in full_metrics[3..].iter().zip(&tail_metrics) {
            assert_eq!(a.step, b.step);
            let rel = (a.loss_total - b.loss_total).abs() / a.loss_total.abs().max(1e-12);
            assert!(rel <= 1e-5, "step {}: {} vs {} rel {rel}", a.step, a.loss_total, b.loss_total);
        }
        for (a, b) in full.params.tensors().iter().zip(resumed.params.tensors()) {
            for (x, y) in a.data.iter().zip(&b.data) {
                let rel = (x - y).abs() / x.abs().max(1e-6);
                assert!(rel <= 1e-4, "param drift {x} vs {y}");
            }
        }
    }

    #[test]
    fn corrupt_state_is_rejected() {
        let mcfg = model_cfg();
        let tcfg = train_cfg(3);
        let state = TrainState::new(&mcfg, &tcfg).unwrap();
        let mut ck = state.to_checkpoint();
        // a config wanting wider tensors than the checkpoint holds
        let mut wide = mcfg.clone();
        wide.d_h = 16;
        assert!(matches!(
            TrainState::from_checkpoint(&state.to_checkpoint(), &wide),
            Err(TrainError::StateMismatch(_))
        ));
        // a checkpoint missing a tensor the config requires
        ck = {
            let mut c = Checkpoint::new();
            for e in ck.entries().iter().skip(2) {
                c.push(e.name.clone(), e.dims.clone(), e.values.clone());
            }
            c
        };
        assert!(matches!(
            TrainState::from_checkpoint(&ck, &mcfg),
            Err(TrainError::StateMismatch(_))
        ));
    }

    #[test]
    fn metrics_tsv_has_pinned_columns() {
        let rows = vec![MetricRow {
            step: 0,
            lr: 0.001,
            loss_in_batch: 1.5,
            loss_mixed: 0.75,
            loss_total: 2.25,
        }];
        let mut buf = Vec::new();
        write_metrics_tsv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "step\tlr\tloss_in_batch\tloss_mixed\tloss_total\n0\t0.001\t1.5\t0.75\t2.25\n"
        );
        let mut buf = Vec::new();
        write_recall_tsv(&[(10, 0.25)], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "step\trecall\n10\t0.25\n");
    }
}
