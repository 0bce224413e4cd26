//! Two-level embedding tower: per-graph context encoders feeding an
//! aggregator, plus the single-encoder rewirings used for ablations.
//!
//! Every wiring ends in an L2-normalized d-dimensional pin embedding read
//! off a learned global token. Attention is only ever consumed at that
//! global row, so forward passes attend from row 0 alone rather than
//! materializing full TxT score matrices.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::features::FeatureStore;
use crate::nn::tape::SeqPart;
use crate::nn::{NnError, NodeId, Tape, Tensor};
use crate::seeds::{self, tags};
use crate::walk::NeighborTable;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    /// Pin id absent from the feature store.
    #[error("no features for pin {0}")]
    UnknownPin(u64),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Tower wiring. `Multibisage` is the two-level default; the rest replace
/// either the per-graph encoders or the aggregator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Per-graph encoders, attention aggregator over the k graph outputs.
    Multibisage,
    /// One encoder over a single sequence holding every graph's neighbor
    /// tokens (1 + 2 + 2kn tokens).
    Transformer,
    /// Multibisage with one encoder weight set reused across graphs.
    SharedTransformer,
    /// Neighbor token matrices combined rank-wise through an FFN, then one
    /// encoder.
    Nffn,
    /// Neighbor token matrices summed rank-wise, then one encoder.
    Nsum,
    /// Neighbor token matrices multiplied rank-wise, then one encoder.
    Nhadamard,
    /// Pin feature tokens moved from the per-graph encoders to the
    /// aggregator sequence.
    PinfeatToLast,
    /// Attention aggregator replaced by an FFN over concatenated per-graph
    /// outputs.
    AggregateByFfn,
}

/// How each encoder block consumes its sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderMode {
    /// Global-row attention followed by the output projection.
    #[default]
    AttentionOnly,
    /// Pre-norm attention with a residual at constant width, then a
    /// trailing projection.
    FullBlock,
}

fn default_logit_scale() -> f64 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Number of bipartite graphs feeding the tower.
    pub k: usize,
    /// Neighbor slots per graph; rows past the walker output are masked.
    pub n: usize,
    /// Visual feature width.
    pub d_v: usize,
    /// Textual feature width.
    pub d_t: usize,
    /// Encoder token width.
    pub d_h: usize,
    /// Output embedding width.
    pub d: usize,
    /// Attention heads; must divide both d_h and d.
    pub heads: usize,
    pub variant: Variant,
    #[serde(default)]
    pub encoder_mode: EncoderMode,
    /// Drop probability applied to FFN outputs during training.
    #[serde(default)]
    pub dropout: f64,
    /// Multiplier on embedding dot products before the softmax.
    #[serde(default = "default_logit_scale")]
    pub logit_scale: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        let fail = |m: String| Err(NnError::Config(m));
        if self.k == 0 {
            return fail("k must be at least 1".into());
        }
        for (name, v) in [
            ("d_v", self.d_v),
            ("d_t", self.d_t),
            ("d_h", self.d_h),
            ("d", self.d),
            ("heads", self.heads),
        ] {
            if v == 0 {
                return fail(format!("{name} must be positive"));
            }
        }
        if self.d_h % self.heads != 0 {
            return fail(format!(
                "heads {} must divide d_h {}",
                self.heads, self.d_h
            ));
        }
        if self.d % self.heads != 0 {
            return fail(format!("heads {} must divide d {}", self.heads, self.d));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0,1)", self.dropout));
        }
        if !(self.logit_scale > 0.0) || !self.logit_scale.is_finite() {
            return fail(format!("logit_scale {} must be positive", self.logit_scale));
        }
        Ok(())
    }

    /// Tokens per encoder sequence: 1 + 2(1+n) when pin tokens are present,
    /// 1 + 2n for pinfeat_to_last, 1 + 2 + 2kn for the single-sequence
    /// transformer wiring.
    pub fn encoder_token_count(&self) -> usize {
        match self.variant {
            Variant::Transformer => 3 + 2 * self.k * self.n,
            Variant::PinfeatToLast => 1 + 2 * self.n,
            _ => 3 + 2 * self.n,
        }
    }

    /// Aggregator sequence length, when the wiring has an attention
    /// aggregator: 1 + k, plus the two relocated pin tokens for
    /// pinfeat_to_last.
    pub fn aggregator_token_count(&self) -> Option<usize> {
        match self.variant {
            Variant::Multibisage | Variant::SharedTransformer => Some(1 + self.k),
            Variant::PinfeatToLast => Some(1 + self.k + 2),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ParamKind {
    Weight,
    Bias,
    Token,
}

/// One tensor slot in the registry: checkpoint name, shape, init family.
#[derive(Debug, Clone)]
pub struct ParamSpec {
    pub name: String,
    pub dims: Vec<usize>,
    kind: ParamKind,
}

fn spec(name: String, dims: Vec<usize>, kind: ParamKind) -> ParamSpec {
    ParamSpec { name, dims, kind }
}

/// Whether graph slot `i` owns pin-feature FFNs under this wiring.
fn has_pin_ffn(cfg: &ModelConfig, i: usize) -> bool {
    match cfg.variant {
        Variant::Multibisage | Variant::SharedTransformer | Variant::AggregateByFfn => true,
        Variant::Transformer | Variant::Nsum | Variant::Nhadamard | Variant::Nffn => i == 0,
        Variant::PinfeatToLast => false,
    }
}

/// Whether graph slot `i` owns a global token and encoder weights.
fn has_encoder(cfg: &ModelConfig, i: usize) -> bool {
    match cfg.variant {
        Variant::Multibisage | Variant::AggregateByFfn | Variant::PinfeatToLast => true,
        Variant::SharedTransformer
        | Variant::Transformer
        | Variant::Nsum
        | Variant::Nhadamard
        | Variant::Nffn => i == 0,
    }
}

fn has_attention_aggregator(cfg: &ModelConfig) -> bool {
    matches!(
        cfg.variant,
        Variant::Multibisage | Variant::SharedTransformer | Variant::PinfeatToLast
    )
}

fn push_attention(out: &mut Vec<ParamSpec>, prefix: &str, heads: usize, width: usize, proj: usize, mode: EncoderMode) {
    let d_head = width / heads;
    for j in 0..heads {
        out.push(spec(format!("{prefix}.h{j}.wq"), vec![width, d_head], ParamKind::Weight));
        out.push(spec(format!("{prefix}.h{j}.wk"), vec![width, d_head], ParamKind::Weight));
        out.push(spec(format!("{prefix}.h{j}.wv"), vec![width, d_head], ParamKind::Weight));
    }
    match mode {
        EncoderMode::AttentionOnly => {
            out.push(spec(format!("{prefix}.wo"), vec![width, proj], ParamKind::Weight));
        }
        EncoderMode::FullBlock => {
            out.push(spec(format!("{prefix}.wo"), vec![width, width], ParamKind::Weight));
            out.push(spec(format!("{prefix}.proj"), vec![width, proj], ParamKind::Weight));
        }
    }
}

/// Full tensor layout for a config, in registry (and checkpoint) order.
pub fn param_layout(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let mut out = Vec::new();
    let ffn = |out: &mut Vec<ParamSpec>, name: String, d_in: usize, d_out: usize| {
        out.push(spec(format!("{name}.w"), vec![d_in, d_out], ParamKind::Weight));
        out.push(spec(format!("{name}.b"), vec![d_out], ParamKind::Bias));
    };
    for i in 0..cfg.k {
        if has_pin_ffn(cfg, i) {
            ffn(&mut out, format!("g{i}.pin_v"), cfg.d_v, cfg.d_h);
            ffn(&mut out, format!("g{i}.pin_t"), cfg.d_t, cfg.d_h);
        }
        ffn(&mut out, format!("g{i}.nbr_v"), cfg.d_v, cfg.d_h);
        ffn(&mut out, format!("g{i}.nbr_t"), cfg.d_t, cfg.d_h);
        if has_encoder(cfg, i) {
            out.push(spec(format!("g{i}.global"), vec![cfg.d_h], ParamKind::Token));
            push_attention(&mut out, &format!("g{i}.enc"), cfg.heads, cfg.d_h, cfg.d, cfg.encoder_mode);
        }
    }
    match cfg.variant {
        Variant::Nffn => {
            ffn(&mut out, "comb_v".into(), cfg.k * cfg.d_h, cfg.d_h);
            ffn(&mut out, "comb_t".into(), cfg.k * cfg.d_h, cfg.d_h);
        }
        Variant::PinfeatToLast => {
            ffn(&mut out, "agg.pin_v".into(), cfg.d_v, cfg.d);
            ffn(&mut out, "agg.pin_t".into(), cfg.d_t, cfg.d);
        }
        Variant::AggregateByFfn => {
            ffn(&mut out, "agg.l1".into(), cfg.k * cfg.d, cfg.d);
            // second layer stays linear so the pre-norm output cannot
            // collapse to all zeros under ReLU
            out.push(spec("agg.l2.w".into(), vec![cfg.d, cfg.d], ParamKind::Weight));
            out.push(spec("agg.l2.b".into(), vec![cfg.d], ParamKind::Bias));
        }
        _ => {}
    }
    if has_attention_aggregator(cfg) {
        out.push(spec("agg.global".into(), vec![cfg.d], ParamKind::Token));
        push_attention(&mut out, "agg", cfg.heads, cfg.d, cfg.d, cfg.encoder_mode);
    }
    out
}

/// Flat named-tensor registry holding every trainable tensor, in a fixed
/// order shared with checkpoints and optimizer state.
#[derive(Debug, Clone, Default)]
pub struct ModelParams {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ModelParams {
    /// Seeded initialization: Xavier-uniform weights, zero biases,
    /// N(0, 0.02) global tokens.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self, NnError> {
        cfg.validate()?;
        let mut rng = seeds::rng(seed, tags::INIT, 0, 0);
        let mut p = ModelParams::default();
        for s in param_layout(cfg) {
            let len: usize = s.dims.iter().product();
            let data = match s.kind {
                ParamKind::Weight => {
                    let bound = (6.0 / (s.dims[0] + s.dims[1]) as f64).sqrt();
                    (0..len)
                        .map(|_| rand::Rng::random_range(&mut rng, -bound..=bound))
                        .collect()
                }
                ParamKind::Bias => vec![0.0; len],
                ParamKind::Token => (0..len)
                    .map(|_| 0.02 * seeds::standard_normal(&mut rng))
                    .collect(),
            };
            p.push(s.name, Tensor::from_vec(&s.dims, data));
        }
        Ok(p)
    }

    pub fn push(&mut self, name: String, t: Tensor) {
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter {name}"
        );
        self.index.insert(name.clone(), self.tensors.len());
        self.names.push(name);
        self.tensors.push(t);
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.tensors.iter())
    }

    /// Total scalar count across all tensors.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

/// Parameter tensors registered on a tape as leaves, index-aligned with the
/// registry so gradients map back by position.
pub struct ParamNodes {
    ids: Vec<NodeId>,
    by_name: HashMap<String, NodeId>,
}

impl ParamNodes {
    pub fn load(tape: &mut Tape, params: &ModelParams) -> Self {
        let mut ids = Vec::with_capacity(params.len());
        let mut by_name = HashMap::with_capacity(params.len());
        for (name, t) in params.iter() {
            let id = tape.leaf(t.clone());
            ids.push(id);
            by_name.insert(name.to_string(), id);
        }
        ParamNodes { ids, by_name }
    }

    pub fn id(&self, name: &str) -> NodeId {
        *self
            .by_name
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not allocated for this config"))
    }

    pub fn ids(&self) -> &[NodeId] {
        &self.ids
    }

    /// Gradient tensors aligned with the registry order; parameters the
    /// loss never touched come back as zeros.
    pub fn gradients(&self, params: &ModelParams, grads: &crate::nn::Gradients) -> Vec<Tensor> {
        self.ids
            .iter()
            .zip(params.tensors())
            .map(|(&id, t)| match grads.wrt(id) {
                Some(g) => Tensor::from_vec(&t.dims, g.to_vec()),
                None => Tensor::zeros(&t.dims),
            })
            .collect()
    }
}

/// Inverted dropout on FFN outputs. `off` disables masking entirely; with a
/// generator present each kept unit is scaled by 1/(1-p).
pub struct Dropout {
    rng: Option<rand_chacha::ChaCha8Rng>,
    p: f64,
}

impl Dropout {
    pub fn off() -> Self {
        Dropout { rng: None, p: 0.0 }
    }

    pub fn new(p: f64, rng: rand_chacha::ChaCha8Rng) -> Self {
        if p > 0.0 {
            Dropout { rng: Some(rng), p }
        } else {
            Dropout::off()
        }
    }

    fn apply(&mut self, tape: &mut Tape, x: NodeId) -> NodeId {
        let Some(rng) = self.rng.as_mut() else {
            return x;
        };
        let len = tape.dims(x).iter().product();
        let keep = 1.0 - self.p;
        let mask: Vec<f64> = (0..len)
            .map(|_| {
                if rand::Rng::random_bool(rng, keep) {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        tape.mul_mask(x, mask)
    }
}

/// All tokens one pin contributes: its own feature vectors plus, per graph
/// slot, n neighbor feature rows with a validity mask. Masked rows are
/// zero-filled.
#[derive(Debug, Clone)]
pub struct PinContext {
    pub pin_id: u64,
    pub visual: Vec<f64>,
    pub textual: Vec<f64>,
    /// Per graph slot: n * d_v row-major neighbor visual features.
    pub nbr_visual: Vec<Vec<f64>>,
    /// Per graph slot: n * d_t row-major neighbor textual features.
    pub nbr_textual: Vec<Vec<f64>>,
    /// Per graph slot: n entries, 1.0 for a real neighbor, 0.0 for padding.
    pub nbr_mask: Vec<Vec<f64>>,
}

impl PinContext {
    /// Assemble a pin's context from walker output. `graph_ids[i]` names the
    /// graph feeding slot i; a pin with fewer than n neighbors gets padded,
    /// one with more gets the top-visited prefix.
    pub fn build(
        pin_id: u64,
        graph_ids: &[u32],
        cfg: &ModelConfig,
        features: &FeatureStore,
        table: &NeighborTable,
    ) -> Result<Self, ModelError> {
        assert_eq!(graph_ids.len(), cfg.k, "graph slot count must equal k");
        let visual = features
            .visual(pin_id)
            .ok_or(ModelError::UnknownPin(pin_id))?
            .to_vec();
        let textual = features.textual(pin_id).expect("visual implies textual").to_vec();
        let mut nbr_visual = Vec::with_capacity(cfg.k);
        let mut nbr_textual = Vec::with_capacity(cfg.k);
        let mut nbr_mask = Vec::with_capacity(cfg.k);
        for &gid in graph_ids {
            let mut v = vec![0.0; cfg.n * cfg.d_v];
            let mut t = vec![0.0; cfg.n * cfg.d_t];
            let mut m = vec![0.0; cfg.n];
            for (r, e) in table.neighbors(pin_id, gid).iter().take(cfg.n).enumerate() {
                let nv = features
                    .visual(e.neighbor_id)
                    .ok_or(ModelError::UnknownPin(e.neighbor_id))?;
                let nt = features.textual(e.neighbor_id).expect("visual implies textual");
                v[r * cfg.d_v..(r + 1) * cfg.d_v].copy_from_slice(nv);
                t[r * cfg.d_t..(r + 1) * cfg.d_t].copy_from_slice(nt);
                m[r] = 1.0;
            }
            nbr_visual.push(v);
            nbr_textual.push(t);
            nbr_mask.push(m);
        }
        Ok(PinContext {
            pin_id,
            visual,
            textual,
            nbr_visual,
            nbr_textual,
            nbr_mask,
        })
    }
}

/// A batch of pin contexts packed into dense tensors ready for the tape.
pub struct BatchInputs {
    pub batch: usize,
    pub visual: Tensor,
    pub textual: Tensor,
    /// Per graph slot: [batch * n, d_v].
    pub nbr_visual: Vec<Tensor>,
    /// Per graph slot: [batch * n, d_t].
    pub nbr_textual: Vec<Tensor>,
    /// Per graph slot: batch * n validity flags.
    pub masks: Vec<Vec<f64>>,
}

impl BatchInputs {
    pub fn build(ctxs: &[PinContext], cfg: &ModelConfig) -> Self {
        assert!(!ctxs.is_empty(), "empty batch");
        let b = ctxs.len();
        let mut visual = Vec::with_capacity(b * cfg.d_v);
        let mut textual = Vec::with_capacity(b * cfg.d_t);
        for c in ctxs {
            assert_eq!(c.visual.len(), cfg.d_v, "visual width mismatch");
            assert_eq!(c.textual.len(), cfg.d_t, "textual width mismatch");
            assert_eq!(c.nbr_mask.len(), cfg.k, "graph slot count mismatch");
            visual.extend_from_slice(&c.visual);
            textual.extend_from_slice(&c.textual);
        }
        let mut nbr_visual = Vec::with_capacity(cfg.k);
        let mut nbr_textual = Vec::with_capacity(cfg.k);
        let mut masks = Vec::with_capacity(cfg.k);
        for i in 0..cfg.k {
            let mut v = Vec::with_capacity(b * cfg.n * cfg.d_v);
            let mut t = Vec::with_capacity(b * cfg.n * cfg.d_t);
            let mut m = Vec::with_capacity(b * cfg.n);
            for c in ctxs {
                v.extend_from_slice(&c.nbr_visual[i]);
                t.extend_from_slice(&c.nbr_textual[i]);
                m.extend_from_slice(&c.nbr_mask[i]);
            }
            nbr_visual.push(Tensor::from_vec(&[b * cfg.n, cfg.d_v], v));
            nbr_textual.push(Tensor::from_vec(&[b * cfg.n, cfg.d_t], t));
            masks.push(m);
        }
        BatchInputs {
            batch: b,
            visual: Tensor::from_vec(&[b, cfg.d_v], visual),
            textual: Tensor::from_vec(&[b, cfg.d_t], textual),
            nbr_visual,
            nbr_textual,
            masks,
        }
    }
}

fn ffn_node(tape: &mut Tape, x: NodeId, pn: &ParamNodes, name: &str, drop: &mut Dropout) -> NodeId {
    let y = tape.matmul(x, pn.id(&format!("{name}.w")));
    let y = tape.add_bias(y, pn.id(&format!("{name}.b")));
    let y = tape.relu(y);
    drop.apply(tape, y)
}

/// Attention read off the global row of `seq` ([B, T, w] -> [B, out]).
/// full_block pre-norms, keeps a row-0 residual at width w, then projects.
fn attend_global(
    tape: &mut Tape,
    pn: &ParamNodes,
    prefix: &str,
    heads: usize,
    mode: EncoderMode,
    seq: NodeId,
    mask: Option<Vec<f64>>,
) -> Result<NodeId, NnError> {
    let w = *tape.dims(seq).last().expect("seq has dims");
    let d_head = w / heads;
    let scale = 1.0 / (d_head as f64).sqrt();
    let (src, q_src) = match mode {
        EncoderMode::AttentionOnly => (seq, tape.token_row(seq, 0)),
        EncoderMode::FullBlock => {
            let ln = tape.layer_norm_rows(seq);
            (ln, tape.token_row(ln, 0))
        }
    };
    let mut head_outs = Vec::with_capacity(heads);
    for j in 0..heads {
        let q = tape.matmul(q_src, pn.id(&format!("{prefix}.h{j}.wq")));
        let k = tape.matmul(src, pn.id(&format!("{prefix}.h{j}.wk")));
        let v = tape.matmul(src, pn.id(&format!("{prefix}.h{j}.wv")));
        let s = tape.attend_scores(q, k, scale);
        let p = tape.masked_softmax(s, mask.clone())?;
        head_outs.push(tape.attend_mix(p, v));
    }
    let cat = tape.concat_cols(&head_outs);
    let out = tape.matmul(cat, pn.id(&format!("{prefix}.wo")));
    match mode {
        EncoderMode::AttentionOnly => Ok(out),
        EncoderMode::FullBlock => {
            let x0 = tape.token_row(seq, 0);
            let res = tape.add(x0, out);
            Ok(tape.matmul(res, pn.id(&format!("{prefix}.proj"))))
        }
    }
}

/// Sequence mask: `head` always-on tokens, then the graph mask repeated
/// `reps` times, per batch element.
fn seq_mask(batch: usize, n: usize, head: usize, blocks: &[&[f64]]) -> Option<Vec<f64>> {
    if n == 0 {
        return None;
    }
    let per = head + blocks.len() * n;
    let mut out = Vec::with_capacity(batch * per);
    for b in 0..batch {
        out.extend(std::iter::repeat_n(1.0, head));
        for m in blocks {
            out.extend_from_slice(&m[b * n..(b + 1) * n]);
        }
    }
    Some(out)
}

fn expand_mask(m: &[f64], width: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.len() * width);
    for &v in m {
        out.extend(std::iter::repeat_n(v, width));
    }
    out
}

struct Fwd<'a> {
    tape: &'a mut Tape,
    pn: &'a ParamNodes,
    cfg: &'a ModelConfig,
}

impl Fwd<'_> {
    /// Neighbor token matrices for graph slot i: ([B*n, d_h], [B*n, d_h]).
    fn nbr_tokens(&mut self, inp: &Inp, i: usize, drop: &mut Dropout) -> (NodeId, NodeId) {
        let hv = ffn_node(self.tape, inp.nbr_visual[i], self.pn, &format!("g{i}.nbr_v"), drop);
        let ht = ffn_node(self.tape, inp.nbr_textual[i], self.pn, &format!("g{i}.nbr_t"), drop);
        (hv, ht)
    }

    /// Pin token pair through graph slot `owner`'s FFNs: ([B, d_h], [B, d_h]).
    fn pin_tokens(&mut self, inp: &Inp, owner: usize, drop: &mut Dropout) -> (NodeId, NodeId) {
        let hv = ffn_node(self.tape, inp.visual, self.pn, &format!("g{owner}.pin_v"), drop);
        let ht = ffn_node(self.tape, inp.textual, self.pn, &format!("g{owner}.pin_t"), drop);
        (hv, ht)
    }

    /// Per-graph context encoding x_{p,i} for the multibisage family:
    /// sequence [global; pin_v; pin_t; n visual nbrs; n textual nbrs].
    fn encode_graph(
        &mut self,
        inp: &Inp,
        i: usize,
        masks: &[Vec<f64>],
        drop: &mut Dropout,
    ) -> Result<NodeId, NnError> {
        let cfg = self.cfg;
        let enc = if has_encoder(cfg, i) { i } else { 0 };
        let (pv, pt) = self.pin_tokens(inp, i, drop);
        let mut parts = vec![
            (self.pn.id(&format!("g{enc}.global")), SeqPart::Broadcast),
            (pv, SeqPart::Row),
            (pt, SeqPart::Row),
        ];
        if cfg.n > 0 {
            let (nv, nt) = self.nbr_tokens(inp, i, drop);
            parts.push((nv, SeqPart::Block(cfg.n)));
            parts.push((nt, SeqPart::Block(cfg.n)));
        }
        let seq = self.tape.assemble_seq(inp.batch, parts);
        assert_eq!(self.tape.dims(seq)[1], 1 + 2 * (1 + cfg.n), "encoder token count");
        let mask = seq_mask(inp.batch, cfg.n, 3, &[&masks[i], &masks[i]]);
        attend_global(
            self.tape,
            self.pn,
            &format!("g{enc}.enc"),
            cfg.heads,
            cfg.encoder_mode,
            seq,
            mask,
        )
    }

    /// Attention aggregator over per-graph outputs plus any extra rows:
    /// sequence [global; x_{p,0}; ..; x_{p,k-1}; extras], unit-normalized.
    fn aggregate_rows(&mut self, batch: usize, xs: &[NodeId], extras: &[NodeId]) -> Result<NodeId, NnError> {
        let mut parts = vec![(self.pn.id("agg.global"), SeqPart::Broadcast)];
        parts.extend(xs.iter().map(|&x| (x, SeqPart::Row)));
        parts.extend(extras.iter().map(|&x| (x, SeqPart::Row)));
        let seq = self.tape.assemble_seq(batch, parts);
        assert_eq!(
            self.tape.dims(seq)[1],
            1 + xs.len() + extras.len(),
            "aggregator token count"
        );
        let out = attend_global(
            self.tape,
            self.pn,
            "agg",
            self.cfg.heads,
            self.cfg.encoder_mode,
            seq,
            None,
        )?;
        self.tape.l2_norm_rows(out)
    }

    /// Single-encoder wirings: build the combined token blocks, run one
    /// encoder sequence, normalize.
    fn single_encoder(&mut self, inp: &Inp, drop: &mut Dropout) -> Result<NodeId, NnError> {
        let cfg = self.cfg;
        let (pv, pt) = self.pin_tokens(inp, 0, drop);
        let mut parts = vec![
            (self.pn.id("g0.global"), SeqPart::Broadcast),
            (pv, SeqPart::Row),
            (pt, SeqPart::Row),
        ];
        let mut mask_blocks: Vec<Vec<f64>> = Vec::new();
        if cfg.n > 0 {
            match cfg.variant {
                Variant::Transformer => {
                    for i in 0..cfg.k {
                        let (nv, nt) = self.nbr_tokens(inp, i, drop);
                        parts.push((nv, SeqPart::Block(cfg.n)));
                        parts.push((nt, SeqPart::Block(cfg.n)));
                        mask_blocks.push(inp.masks[i].clone());
                        mask_blocks.push(inp.masks[i].clone());
                    }
                }
                Variant::Nsum | Variant::Nhadamard | Variant::Nffn => {
                    let (nv, nt, m) = self.combine_neighbors(inp, drop)?;
                    parts.push((nv, SeqPart::Block(cfg.n)));
                    parts.push((nt, SeqPart::Block(cfg.n)));
                    mask_blocks.push(m.clone());
                    mask_blocks.push(m);
                }
                _ => unreachable!("single_encoder called for two-level variant"),
            }
        }
        let seq = self.tape.assemble_seq(inp.batch, parts);
        assert_eq!(self.tape.dims(seq)[1], cfg.encoder_token_count(), "encoder token count");
        let refs: Vec<&[f64]> = mask_blocks.iter().map(Vec::as_slice).collect();
        let mask = seq_mask(inp.batch, cfg.n, 3, &refs);
        let out = attend_global(
            self.tape,
            self.pn,
            "g0.enc",
            cfg.heads,
            cfg.encoder_mode,
            seq,
            mask,
        )?;
        self.tape.l2_norm_rows(out)
    }

    /// Rank-wise combination of per-graph neighbor token matrices. Returns
    /// the combined visual and textual blocks plus the combined mask.
    fn combine_neighbors(
        &mut self,
        inp: &Inp,
        drop: &mut Dropout,
    ) -> Result<(NodeId, NodeId, Vec<f64>), NnError> {
        let cfg = self.cfg;
        let rows = inp.batch * cfg.n;
        let tokens: Vec<(NodeId, NodeId)> =
            (0..cfg.k).map(|i| self.nbr_tokens(inp, i, drop)).collect();
        match cfg.variant {
            Variant::Nsum => {
                // zero out padded rows so they contribute nothing to the sum
                let mut acc: Option<(NodeId, NodeId)> = None;
                for (i, &(hv, ht)) in tokens.iter().enumerate() {
                    let mw = expand_mask(&inp.masks[i], cfg.d_h);
                    let hv = self.tape.mul_mask(hv, mw.clone());
                    let ht = self.tape.mul_mask(ht, mw);
                    acc = Some(match acc {
                        None => (hv, ht),
                        Some((av, at)) => (self.tape.add(av, hv), self.tape.add(at, ht)),
                    });
                }
                let (v, t) = acc.expect("k >= 1");
                let mut m = vec![0.0; rows];
                for i in 0..cfg.k {
                    for (slot, &f) in m.iter_mut().zip(&inp.masks[i]) {
                        *slot = f64::max(*slot, f);
                    }
                }
                Ok((v, t, m))
            }
            Variant::Nhadamard => {
                // a rank survives only when every graph filled it, so raw
                // products are safe: dead rows are masked out downstream
                let mut it = tokens.into_iter();
                let (mut v, mut t) = it.next().expect("k >= 1");
                for (hv, ht) in it {
                    v = self.tape.mul(v, hv);
                    t = self.tape.mul(t, ht);
                }
                let mut m = vec![1.0; rows];
                for i in 0..cfg.k {
                    for (slot, &f) in m.iter_mut().zip(&inp.masks[i]) {
                        *slot *= f;
                    }
                }
                Ok((v, t, m))
            }
            Variant::Nffn => {
                let masked: Vec<(NodeId, NodeId)> = tokens
                    .iter()
                    .enumerate()
                    .map(|(i, &(hv, ht))| {
                        let mw = expand_mask(&inp.masks[i], cfg.d_h);
                        (self.tape.mul_mask(hv, mw.clone()), self.tape.mul_mask(ht, mw))
                    })
                    .collect();
                let vs: Vec<NodeId> = masked.iter().map(|&(v, _)| v).collect();
                let ts: Vec<NodeId> = masked.iter().map(|&(_, t)| t).collect();
                let vcat = self.tape.concat_cols(&vs);
                let tcat = self.tape.concat_cols(&ts);
                let v = ffn_node(self.tape, vcat, self.pn, "comb_v", drop);
                let t = ffn_node(self.tape, tcat, self.pn, "comb_t", drop);
                let mut m = vec![0.0; rows];
                for i in 0..cfg.k {
                    for (slot, &f) in m.iter_mut().zip(&inp.masks[i]) {
                        *slot = f64::max(*slot, f);
                    }
                }
                Ok((v, t, m))
            }
            _ => unreachable!(),
        }
    }

    /// Per-graph encoder without pin tokens: [global_i; nbrs]; pin features
    /// join later as aggregator rows.
    fn encode_graph_pinless(
        &mut self,
        inp: &Inp,
        i: usize,
        drop: &mut Dropout,
    ) -> Result<NodeId, NnError> {
        let cfg = self.cfg;
        let mut parts = vec![(self.pn.id(&format!("g{i}.global")), SeqPart::Broadcast)];
        if cfg.n > 0 {
            let (nv, nt) = self.nbr_tokens(inp, i, drop);
            parts.push((nv, SeqPart::Block(cfg.n)));
            parts.push((nt, SeqPart::Block(cfg.n)));
        }
        let seq = self.tape.assemble_seq(inp.batch, parts);
        assert_eq!(self.tape.dims(seq)[1], 1 + 2 * cfg.n, "encoder token count");
        let mask = seq_mask(inp.batch, cfg.n, 1, &[&inp.masks[i], &inp.masks[i]]);
        attend_global(
            self.tape,
            self.pn,
            &format!("g{i}.enc"),
            cfg.heads,
            cfg.encoder_mode,
            seq,
            mask,
        )
    }
}

/// Batch inputs registered on a tape as leaves.
struct Inp {
    batch: usize,
    visual: NodeId,
    textual: NodeId,
    nbr_visual: Vec<NodeId>,
    nbr_textual: Vec<NodeId>,
    masks: Vec<Vec<f64>>,
}

impl Inp {
    fn load(tape: &mut Tape, inputs: &BatchInputs) -> Self {
        Inp {
            batch: inputs.batch,
            visual: tape.leaf(inputs.visual.clone()),
            textual: tape.leaf(inputs.textual.clone()),
            nbr_visual: inputs.nbr_visual.iter().map(|t| tape.leaf(t.clone())).collect(),
            nbr_textual: inputs.nbr_textual.iter().map(|t| tape.leaf(t.clone())).collect(),
            masks: inputs.masks.clone(),
        }
    }
}

/// Build the full tower forward pass for a batch on an existing tape.
/// Returns the [batch, d] node of unit-norm embeddings.
pub fn embed_batch(
    tape: &mut Tape,
    pn: &ParamNodes,
    cfg: &ModelConfig,
    inputs: &BatchInputs,
    drop: &mut Dropout,
) -> Result<NodeId, NnError> {
    let inp = Inp::load(tape, inputs);
    let mut f = Fwd { tape, pn, cfg };
    match cfg.variant {
        Variant::Multibisage | Variant::SharedTransformer => {
            let xs: Result<Vec<NodeId>, NnError> = (0..cfg.k)
                .map(|i| f.encode_graph(&inp, i, &inp.masks, drop))
                .collect();
            f.aggregate_rows(inp.batch, &xs?, &[])
        }
        Variant::Transformer | Variant::Nsum | Variant::Nhadamard | Variant::Nffn => {
            f.single_encoder(&inp, drop)
        }
        Variant::PinfeatToLast => {
            let xs: Result<Vec<NodeId>, NnError> = (0..cfg.k)
                .map(|i| f.encode_graph_pinless(&inp, i, drop))
                .collect();
            let pv = ffn_node(f.tape, inp.visual, f.pn, "agg.pin_v", drop);
            let pt = ffn_node(f.tape, inp.textual, f.pn, "agg.pin_t", drop);
            f.aggregate_rows(inp.batch, &xs?, &[pv, pt])
        }
        Variant::AggregateByFfn => {
            let xs: Result<Vec<NodeId>, NnError> = (0..cfg.k)
                .map(|i| f.encode_graph(&inp, i, &inp.masks, drop))
                .collect();
            let cat = f.tape.concat_cols(&xs?);
            let h = ffn_node(f.tape, cat, f.pn, "agg.l1", drop);
            let out = f.tape.matmul(h, f.pn.id("agg.l2.w"));
            let out = f.tape.add_bias(out, f.pn.id("agg.l2.b"));
            f.tape.l2_norm_rows(out)
        }
    }
}

/// Per-graph context encoding x_{p,i} for one pin, outside any training
/// tape. Valid for any config whose graph slot i owns pin FFNs.
pub fn encode_graph_context(
    ctx: &PinContext,
    i: usize,
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<Tensor, ModelError> {
    assert!(i < cfg.k, "graph slot out of range");
    let inputs = BatchInputs::build(std::slice::from_ref(ctx), cfg);
    let mut tape = Tape::new();
    let pn = ParamNodes::load(&mut tape, params);
    let inp = Inp::load(&mut tape, &inputs);
    let mut f = Fwd { tape: &mut tape, pn: &pn, cfg };
    let out = f.encode_graph(&inp, i, &inp.masks, &mut Dropout::off())?;
    Ok(Tensor::from_vec(tape.dims(out), tape.value(out).to_vec()))
}

/// Attention aggregation of k per-graph outputs into the final unit-norm
/// embedding, for wirings with an attention aggregator.
pub fn aggregate(xs: &[Tensor], params: &ModelParams, cfg: &ModelConfig) -> Result<Tensor, ModelError> {
    assert_eq!(xs.len(), cfg.k, "need one input per graph slot");
    let mut tape = Tape::new();
    let pn = ParamNodes::load(&mut tape, params);
    let rows: Vec<NodeId> = xs
        .iter()
        .map(|t| {
            assert_eq!(t.dims, vec![1, cfg.d], "per-graph output must be [1, d]");
            tape.leaf(t.clone())
        })
        .collect();
    let mut f = Fwd { tape: &mut tape, pn: &pn, cfg };
    let out = f.aggregate_rows(1, &rows, &[])?;
    Ok(Tensor::from_vec(tape.dims(out), tape.value(out).to_vec()))
}

/// Full two-level forward for one pin under the default wiring.
pub fn forward(ctx: &PinContext, params: &ModelParams, cfg: &ModelConfig) -> Result<Tensor, ModelError> {
    assert!(
        matches!(cfg.variant, Variant::Multibisage),
        "forward is the default wiring; use variant_forward for ablations"
    );
    variant_forward(ctx, params, cfg)
}

/// Forward for one pin under whatever wiring the config selects.
pub fn variant_forward(
    ctx: &PinContext,
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<Tensor, ModelError> {
    let inputs = BatchInputs::build(std::slice::from_ref(ctx), cfg);
    let mut tape = Tape::new();
    let pn = ParamNodes::load(&mut tape, params);
    let out = embed_batch(&mut tape, &pn, cfg, &inputs, &mut Dropout::off())?;
    Ok(Tensor::from_vec(tape.dims(out), tape.value(out).to_vec()))
}
