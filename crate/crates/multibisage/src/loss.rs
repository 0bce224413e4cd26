//! Training objective: bias-corrected sampled softmax over in-batch
//! candidates, a mixed-negative term over a shared random negative set,
//! and their equal-weight sum.
//!
//! Both terms subtract log of a sketch-estimated sampling probability from
//! each candidate logit. The mixed-negative denominator includes the
//! positive's own term so the per-row distribution is a proper categorical
//! and the loss stays non-negative.

use crate::model::{
    self, BatchInputs, Dropout, ModelConfig, ModelError, ModelParams, ParamNodes, PinContext,
};
use crate::nn::{NnError, NodeId, Tape, Tensor};
use crate::seeds;
use crate::sketch::CountMinSketch;

#[derive(Debug, thiserror::Error)]
pub enum LossError {
    #[error("sampling probability {0} outside (0, 1]")]
    BadProbability(f64),
    #[error("batch shape: {0}")]
    Shape(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

fn neg_log_probs(ps: &[f64]) -> Result<Vec<f64>, LossError> {
    ps.iter()
        .map(|&p| {
            if p.is_finite() && p > 0.0 && p <= 1.0 {
                Ok(-p.ln())
            } else {
                Err(LossError::BadProbability(p))
            }
        })
        .collect()
}

fn expect_rows(tape: &Tape, id: NodeId, what: &str) -> Result<usize, LossError> {
    let dims = tape.dims(id);
    if dims.len() != 2 {
        return Err(LossError::Shape(format!("{what} must be rank-2, got {dims:?}")));
    }
    Ok(dims[0])
}

/// In-batch sampled softmax on an existing tape. `xq`/`xe` are [B, d] query
/// and positive embeddings; candidates for row i are all positives, with
/// column j's logit corrected by -log qp[j]. Returns the scalar mean node.
pub fn sampled_softmax_node(
    tape: &mut Tape,
    xq: NodeId,
    xe: NodeId,
    qp: &[f64],
    scale: f64,
) -> Result<NodeId, LossError> {
    let b = expect_rows(tape, xq, "xq")?;
    if expect_rows(tape, xe, "xe")? != b {
        return Err(LossError::Shape("xq and xe row counts differ".into()));
    }
    if qp.len() != b {
        return Err(LossError::Shape(format!("qp has {} entries for batch {b}", qp.len())));
    }
    let corr = neg_log_probs(qp)?;
    let logits = tape.matmul_nt(xq, xe);
    let logits = tape.scale(logits, scale);
    let logits = tape.add_col_const(logits, corr);
    let ce = tape.ce_rows(logits, (0..b).collect());
    Ok(tape.mean(ce))
}

/// Mixed-negative loss on an existing tape. Row i scores its own positive
/// (corrected by -log qn_pos[i]) against every shared negative in `xm`
/// (column j corrected by -log qn_neg[j]); the positive sits in the
/// denominator too. `xm: None` is the empty-negative test mode (loss 0).
pub fn mixed_negative_node(
    tape: &mut Tape,
    xq: NodeId,
    xe: NodeId,
    xm: Option<NodeId>,
    qn_pos: &[f64],
    qn_neg: &[f64],
    scale: f64,
) -> Result<NodeId, LossError> {
    let b = expect_rows(tape, xq, "xq")?;
    if expect_rows(tape, xe, "xe")? != b {
        return Err(LossError::Shape("xq and xe row counts differ".into()));
    }
    if qn_pos.len() != b {
        return Err(LossError::Shape(format!(
            "qn_pos has {} entries for batch {b}",
            qn_pos.len()
        )));
    }
    let pos = tape.row_dots(xq, xe);
    let pos = tape.scale(pos, scale);
    let pos = tape.add_row_const(pos, neg_log_probs(qn_pos)?);
    let logits = match xm {
        Some(xm) => {
            let m = expect_rows(tape, xm, "xm")?;
            if qn_neg.len() != m {
                return Err(LossError::Shape(format!(
                    "qn_neg has {} entries for {m} negatives",
                    qn_neg.len()
                )));
            }
            let neg = tape.matmul_nt(xq, xm);
            let neg = tape.scale(neg, scale);
            let neg = tape.add_col_const(neg, neg_log_probs(qn_neg)?);
            tape.concat_cols(&[pos, neg])
        }
        None => {
            if !qn_neg.is_empty() {
                return Err(LossError::Shape("qn_neg given without negatives".into()));
            }
            pos
        }
    };
    let ce = tape.ce_rows(logits, vec![0; b]);
    Ok(tape.mean(ce))
}

/// Standalone in-batch sampled softmax: loss plus gradients w.r.t. the two
/// embedding matrices.
pub fn sampled_softmax_loss(
    xq: &Tensor,
    xe: &Tensor,
    qp: &[f64],
    scale: f64,
) -> Result<(f64, Tensor, Tensor), LossError> {
    let mut tape = Tape::new();
    let q = tape.leaf(xq.clone());
    let e = tape.leaf(xe.clone());
    let loss = sampled_softmax_node(&mut tape, q, e, qp, scale)?;
    let grads = tape.backward(loss);
    let gq = Tensor::from_vec(&xq.dims, grads.wrt(q).expect("xq reaches loss").to_vec());
    let ge = Tensor::from_vec(&xe.dims, grads.wrt(e).expect("xe reaches loss").to_vec());
    Ok((tape.scalar_value(loss), gq, ge))
}

/// Standalone mixed-negative loss: loss plus gradients w.r.t. queries,
/// positives, and (when present) negatives.
pub fn mixed_negative_loss(
    xq: &Tensor,
    xe: &Tensor,
    xm: Option<&Tensor>,
    qn_pos: &[f64],
    qn_neg: &[f64],
    scale: f64,
) -> Result<(f64, Tensor, Tensor, Option<Tensor>), LossError> {
    let mut tape = Tape::new();
    let q = tape.leaf(xq.clone());
    let e = tape.leaf(xe.clone());
    let m = xm.map(|t| tape.leaf(t.clone()));
    let loss = mixed_negative_node(&mut tape, q, e, m, qn_pos, qn_neg, scale)?;
    let grads = tape.backward(loss);
    let gq = Tensor::from_vec(&xq.dims, grads.wrt(q).expect("xq reaches loss").to_vec());
    let ge = Tensor::from_vec(&xe.dims, grads.wrt(e).expect("xe reaches loss").to_vec());
    let gm = m.zip(xm).map(|(id, t)| {
        Tensor::from_vec(
            &t.dims,
            grads.wrt(id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]),
        )
    });
    Ok((tape.scalar_value(loss), gq, ge, gm))
}

/// Streaming frequency estimates for the two candidate streams: positives
/// feed the in-batch correction, negatives feed the mixed-negative
/// correction. Estimates are floored so corrections stay finite.
#[derive(Debug, Clone)]
pub struct FrequencySketches {
    positives: CountMinSketch,
    negatives: CountMinSketch,
    floor: f64,
}

impl FrequencySketches {
    pub fn new(width: usize, depth: usize, seed: u64, floor: f64) -> Self {
        assert!(floor > 0.0, "probability floor must be positive");
        FrequencySketches {
            positives: CountMinSketch::new(width, depth, seeds::mix64(seed)),
            negatives: CountMinSketch::new(width, depth, seeds::mix64(seed ^ 1)),
            floor,
        }
    }

    pub fn from_parts(positives: CountMinSketch, negatives: CountMinSketch, floor: f64) -> Self {
        assert!(floor > 0.0, "probability floor must be positive");
        FrequencySketches { positives, negatives, floor }
    }

    /// Record one batch's sampled items. Call before reading probabilities
    /// for the same batch so an item's own occurrence counts toward its
    /// estimate.
    pub fn observe(&mut self, positives: &[u64], negatives: &[u64]) {
        for &id in positives {
            self.positives.increment(id);
        }
        for &id in negatives {
            self.negatives.increment(id);
        }
    }

    pub fn qp(&self, id: u64) -> f64 {
        self.positives.probability(id, self.floor)
    }

    pub fn qn(&self, id: u64) -> f64 {
        self.negatives.probability(id, self.floor)
    }

    pub fn floor(&self) -> f64 {
        self.floor
    }

    pub fn positives(&self) -> &CountMinSketch {
        &self.positives
    }

    pub fn negatives(&self) -> &CountMinSketch {
        &self.negatives
    }
}

/// One training batch: aligned query/positive pairs plus a shared set of
/// random negatives (empty only in tests).
pub struct LossBatch<'a> {
    pub queries: &'a [PinContext],
    pub positives: &'a [PinContext],
    pub negatives: &'a [PinContext],
}

/// Combined objective value and parameter gradients for one batch.
pub struct LossOutput {
    pub total: f64,
    pub in_batch: f64,
    pub mixed: f64,
    /// Aligned with the parameter registry order.
    pub grads: Vec<Tensor>,
}

/// Full forward + backward for one batch: embed queries, positives, and
/// negatives with shared weights, apply both loss terms with sketch-derived
/// corrections, and return gradients for every parameter.
///
/// The caller must have observed this batch into `sketches` already; this
/// function only reads estimates.
pub fn combined_loss(
    batch: &LossBatch,
    params: &ModelParams,
    cfg: &ModelConfig,
    sketches: &FrequencySketches,
    drop: &mut Dropout,
) -> Result<LossOutput, LossError> {
    if batch.queries.is_empty() || batch.queries.len() != batch.positives.len() {
        return Err(LossError::Shape(format!(
            "need aligned non-empty query/positive lists, got {} and {}",
            batch.queries.len(),
            batch.positives.len()
        )));
    }
    let mut tape = Tape::new();
    let pn = ParamNodes::load(&mut tape, params);
    let qi = BatchInputs::build(batch.queries, cfg);
    let ei = BatchInputs::build(batch.positives, cfg);
    let xq = model::embed_batch(&mut tape, &pn, cfg, &qi, drop)?;
    let xe = model::embed_batch(&mut tape, &pn, cfg, &ei, drop)?;

    let qp: Vec<f64> = batch.positives.iter().map(|c| sketches.qp(c.pin_id)).collect();
    let in_batch = sampled_softmax_node(&mut tape, xq, xe, &qp, cfg.logit_scale)?;

    let qn_pos: Vec<f64> = batch.positives.iter().map(|c| sketches.qn(c.pin_id)).collect();
    let (xm, qn_neg) = if batch.negatives.is_empty() {
        (None, Vec::new())
    } else {
        let mi = BatchInputs::build(batch.negatives, cfg);
        let xm = model::embed_batch(&mut tape, &pn, cfg, &mi, drop)?;
        let qn: Vec<f64> = batch.negatives.iter().map(|c| sketches.qn(c.pin_id)).collect();
        (Some(xm), qn)
    };
    let mixed = mixed_negative_node(&mut tape, xq, xe, xm, &qn_pos, &qn_neg, cfg.logit_scale)?;

    let total = tape.add(in_batch, mixed);
    let grads = tape.backward(total);
    Ok(LossOutput {
        total: tape.scalar_value(total),
        in_batch: tape.scalar_value(in_batch),
        mixed: tape.scalar_value(mixed),
        grads: pn.gradients(params, &grads),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{EncoderMode, Variant};
    use crate::nn::grad_check;
    use rand::Rng;

    fn unit_rows(rows: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = seeds::rng(seed, 0xBEEF, 0, 0);
        let mut data = Vec::with_capacity(rows * d);
        for _ in 0..rows {
            let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let n: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            data.extend(v.iter().map(|x| x / n));
        }
        Tensor::from_vec(&[rows, d], data)
    }

    /// Plain-loop reference for the in-batch loss: corrected logits,
    /// logsumexp by hand, no tape code anywhere.
    fn reference_in_batch(xq: &Tensor, xe: &Tensor, qp: &[f64], scale: f64) -> f64 {
        let b = xq.dims[0];
        let d = xq.dims[1];
        let mut total = 0.0;
        for i in 0..b {
            let logits: Vec<f64> = (0..b)
                .map(|j| {
                    let dot: f64 = (0..d).map(|c| xq.data[i * d + c] * xe.data[j * d + c]).sum();
                    scale * dot - qp[j].ln()
                })
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
            total += lse - logits[i];
        }
        total / b as f64
    }

    #[test]
    fn single_pair_batch_is_exactly_zero() {
        let xq = unit_rows(1, 4, 1);
        let xe = unit_rows(1, 4, 2);
        let (loss, _, _) = sampled_softmax_loss(&xq, &xe, &[0.3], 2.0).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn equal_dots_uniform_q_gives_log_batch_size() {
        // one shared embedding for every row: all pairwise dots equal
        let row = unit_rows(1, 6, 3);
        let mut data = Vec::new();
        for _ in 0..5 {
            data.extend_from_slice(&row.data);
        }
        let x = Tensor::from_vec(&[5, 6], data);
        let (loss, _, _) = sampled_softmax_loss(&x, &x, &[0.2; 5], 3.0).unwrap();
        assert!((loss - (5.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn full_catalog_uniform_q_matches_plain_softmax_oracle() {
        // when the in-batch candidates are the whole catalog and q is exact
        // uniform, the correction shifts every row by the same constant, so
        // the loss must equal ordinary full-softmax cross entropy
        let n = 50;
        let d = 8;
        let xq = unit_rows(n, d, 10);
        let xe = unit_rows(n, d, 11);
        let scale = 4.0;
        let (loss, _, _) = sampled_softmax_loss(&xq, &xe, &vec![1.0 / n as f64; n], scale).unwrap();
        let mut oracle = 0.0;
        for i in 0..n {
            let logits: Vec<f64> = (0..n)
                .map(|j| {
                    scale
                        * (0..d)
                            .map(|c| xq.data[i * d + c] * xe.data[j * d + c])
                            .sum::<f64>()
                })
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
            oracle += lse - logits[i];
        }
        oracle /= n as f64;
        assert!((loss - oracle).abs() < 1e-6, "loss {loss} oracle {oracle}");
    }

    #[test]
    fn matches_reference_on_nonuniform_q() {
        let xq = unit_rows(7, 5, 20);
        let xe = unit_rows(7, 5, 21);
        let qp: Vec<f64> = (0..7).map(|i| 0.05 + 0.1 * i as f64).collect();
        let (loss, _, _) = sampled_softmax_loss(&xq, &xe, &qp, 2.5).unwrap();
        let want = reference_in_batch(&xq, &xe, &qp, 2.5);
        assert!((loss - want).abs() < 1e-12);
    }

    #[test]
    fn row_shift_invariance_via_uniform_q() {
        // a uniform q adds the same constant to every logit in a row, so any
        // uniform level must give the same loss
        let xq = unit_rows(4, 6, 30);
        let xe = unit_rows(4, 6, 31);
        let (a, _, _) = sampled_softmax_loss(&xq, &xe, &[0.01; 4], 1.0).unwrap();
        let (b, _, _) = sampled_softmax_loss(&xq, &xe, &[0.97; 4], 1.0).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn per_pair_loss_grows_with_own_popularity_estimate() {
        let xq = unit_rows(5, 6, 40);
        let xe = unit_rows(5, 6, 41);
        let mut qp = vec![0.1; 5];
        // tape result must agree with the plain reference on both settings,
        // and row 0's contribution must rise when qp[0] rises
        let per_row = |qp: &[f64], row: usize| {
            let b = 5;
            let d = 6;
            let logits: Vec<f64> = (0..b)
                .map(|j| {
                    (0..d)
                        .map(|c| xq.data[row * d + c] * xe.data[j * d + c])
                        .sum::<f64>()
                        - qp[j].ln()
                })
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
            lse - logits[row]
        };
        let low = per_row(&qp, 0);
        let (tape_low, _, _) = sampled_softmax_loss(&xq, &xe, &qp, 1.0).unwrap();
        assert!((tape_low - reference_in_batch(&xq, &xe, &qp, 1.0)).abs() < 1e-12);
        qp[0] = 0.8;
        let high = per_row(&qp, 0);
        let (tape_high, _, _) = sampled_softmax_loss(&xq, &xe, &qp, 1.0).unwrap();
        assert!((tape_high - reference_in_batch(&xq, &xe, &qp, 1.0)).abs() < 1e-12);
        assert!(high > low, "row loss {high} should exceed {low}");
    }

    #[test]
    fn popular_candidate_gets_smaller_corrected_logit() {
        // equal dot products, different frequency estimates: the corrected
        // logit of the more popular candidate must come out lower
        let dot = 0.7;
        let (q_rare, q_popular): (f64, f64) = (0.01, 0.5);
        let rare = dot - q_rare.ln();
        let popular = dot - q_popular.ln();
        assert!(popular < rare);
        // and end-to-end: raising one column's q lowers that column's
        // corrected logit, making every other row's loss strictly smaller
        let xq = unit_rows(3, 4, 50);
        let xe = unit_rows(3, 4, 51);
        let (base, _, _) = sampled_softmax_loss(&xq, &xe, &[0.2, 0.2, 0.2], 1.0).unwrap();
        let (bumped, _, _) = sampled_softmax_loss(&xq, &xe, &[0.2, 0.2, 0.9], 1.0).unwrap();
        let base_r2 = reference_in_batch(&xq, &xe, &[0.2, 0.2, 0.2], 1.0);
        let bump_r2 = reference_in_batch(&xq, &xe, &[0.2, 0.2, 0.9], 1.0);
        assert!((base - base_r2).abs() < 1e-12);
        assert!((bumped - bump_r2).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_probabilities() {
        let xq = unit_rows(2, 4, 60);
        let xe = unit_rows(2, 4, 61);
        for bad in [0.0, -0.5, 1.5, f64::NAN] {
            assert!(matches!(
                sampled_softmax_loss(&xq, &xe, &[0.5, bad], 1.0),
                Err(LossError::BadProbability(_))
            ));
            assert!(matches!(
                mixed_negative_loss(&xq, &xe, None, &[0.5, bad], &[], 1.0),
                Err(LossError::BadProbability(_))
            ));
        }
    }

    #[test]
    fn empty_negative_set_gives_zero_loss() {
        let xq = unit_rows(3, 4, 70);
        let xe = unit_rows(3, 4, 71);
        let (loss, gq, _, gm) =
            mixed_negative_loss(&xq, &xe, None, &[0.3; 3], &[], 2.0).unwrap();
        assert_eq!(loss, 0.0);
        assert!(gm.is_none());
        assert!(gq.data.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn hand_computed_two_pair_case() {
        // dots: each query hits its positive at 1.0 and both negatives at
        // 0.0; uniform corrections cancel, so per pair the loss is
        // -log(e / (e + 2))
        let xq = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 1.0, 0.0]);
        let xe = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 1.0, 0.0]);
        let xm = Tensor::from_vec(&[2, 2], vec![0.0, 1.0, 0.0, 1.0]);
        let (loss, _, _, _) =
            mixed_negative_loss(&xq, &xe, Some(&xm), &[0.25; 2], &[0.25; 2], 1.0).unwrap();
        let want = -(1f64.exp() / (1f64.exp() + 2.0)).ln();
        assert!((loss - want).abs() < 1e-12, "loss {loss} want {want}");
    }

    #[test]
    fn mixed_loss_matches_brute_force_reimplementation() {
        let xq = unit_rows(4, 5, 80);
        let xe = unit_rows(4, 5, 81);
        let xm = unit_rows(6, 5, 82);
        let qn_pos = [0.11, 0.22, 0.08, 0.4];
        let qn_neg = [0.1, 0.2, 0.05, 0.3, 0.15, 0.02];
        let scale = 3.0;
        let (loss, _, _, _) =
            mixed_negative_loss(&xq, &xe, Some(&xm), &qn_pos, &qn_neg, scale).unwrap();
        let d = 5;
        let mut want = 0.0;
        for i in 0..4 {
            let pos: f64 = (0..d).map(|c| xq.data[i * d + c] * xe.data[i * d + c]).sum();
            let mut logits = vec![scale * pos - qn_pos[i].ln()];
            for j in 0..6 {
                let neg: f64 = (0..d).map(|c| xq.data[i * d + c] * xm.data[j * d + c]).sum();
                logits.push(scale * neg - qn_neg[j].ln());
            }
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
            want += lse - logits[0];
        }
        want /= 4.0;
        assert!((loss - want).abs() < 1e-12);
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let xq = unit_rows(3, 4, 90);
        let xe = unit_rows(3, 4, 91);
        let xm = unit_rows(4, 4, 92);
        let qp = [0.2, 0.1, 0.35];
        let qn_neg = [0.3, 0.1, 0.22, 0.05];
        let params = [xq, xe, xm];
        let worst = grad_check(&params, 1e-5, |ts: &[Tensor]| {
            let mut tape = Tape::new();
            let q = tape.leaf(ts[0].clone());
            let e = tape.leaf(ts[1].clone());
            let m = tape.leaf(ts[2].clone());
            let a = sampled_softmax_node(&mut tape, q, e, &qp, 2.0)
                .map_err(|_| NnError::Config("loss build".into()))?;
            let b = mixed_negative_node(&mut tape, q, e, Some(m), &qp, &qn_neg, 2.0)
                .map_err(|_| NnError::Config("loss build".into()))?;
            let total = tape.add(a, b);
            let grads = tape.backward(total);
            let out: Vec<Tensor> = [q, e, m]
                .iter()
                .zip(ts)
                .map(|(&id, t)| {
                    Tensor::from_vec(
                        &t.dims,
                        grads.wrt(id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]),
                    )
                })
                .collect();
            Ok((tape.scalar_value(total), out))
        })
        .unwrap();
        assert!(worst < 1e-6, "worst rel err {worst}");
    }

    #[test]
    fn sketch_pair_tracks_two_streams_independently() {
        let mut s = FrequencySketches::new(64, 4, 7, 1e-9);
        s.observe(&[1, 1, 2], &[9]);
        assert!(s.qp(1) > s.qp(2));
        assert!((s.qp(1) - 2.0 / 3.0).abs() < 1e-12);
        assert!((s.qn(9) - 1.0).abs() < 1e-12);
        // unseen ids fall back to the floor rather than zero
        assert_eq!(s.qp(999), 1e-9);
        assert_eq!(s.qn(999), 1e-9);
    }

    fn toy_setup() -> (ModelConfig, ModelParams, Vec<PinContext>, Vec<PinContext>, Vec<PinContext>) {
        let cfg = ModelConfig {
            k: 2,
            n: 2,
            d_v: 6,
            d_t: 4,
            d_h: 8,
            d: 8,
            heads: 2,
            variant: Variant::Multibisage,
            encoder_mode: EncoderMode::AttentionOnly,
            dropout: 0.0,
            logit_scale: 4.0,
        };
        let params = ModelParams::init(&cfg, 3).unwrap();
        let ctx = |seed: u64| {
            let mut rng = seeds::rng(seed, 0xFACE, 0, 0);
            let mut rnd = |len: usize| -> Vec<f64> {
                (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
            };
            PinContext {
                pin_id: seed,
                visual: rnd(cfg.d_v),
                textual: rnd(cfg.d_t),
                nbr_visual: vec![rnd(cfg.n * cfg.d_v), rnd(cfg.n * cfg.d_v)],
                nbr_textual: vec![rnd(cfg.n * cfg.d_t), rnd(cfg.n * cfg.d_t)],
                nbr_mask: vec![vec![1.0; cfg.n], vec![1.0; cfg.n]],
            }
        };
        let queries: Vec<PinContext> = (0..3).map(|i| ctx(100 + i)).collect();
        let positives: Vec<PinContext> = (0..3).map(|i| ctx(200 + i)).collect();
        let negatives: Vec<PinContext> = (0..3).map(|i| ctx(300 + i)).collect();
        (cfg, params, queries, positives, negatives)
    }

    #[test]
    fn combined_is_sum_of_components() {
        let (cfg, params, q, p, m) = toy_setup();
        let mut sk = FrequencySketches::new(128, 4, 5, 1e-9);
        sk.observe(
            &p.iter().map(|c| c.pin_id).collect::<Vec<_>>(),
            &m.iter().map(|c| c.pin_id).collect::<Vec<_>>(),
        );
        let batch = LossBatch { queries: &q, positives: &p, negatives: &m };
        let out = combined_loss(&batch, &params, &cfg, &sk, &mut Dropout::off()).unwrap();
        assert!((out.total - (out.in_batch + out.mixed)).abs() < 1e-12);
        assert!(out.total.is_finite() && out.total > 0.0);
        assert_eq!(out.grads.len(), params.len());
    }

    #[test]
    fn degenerate_batch_gives_zero_combined_loss() {
        let (cfg, params, q, p, _) = toy_setup();
        let mut sk = FrequencySketches::new(128, 4, 5, 1e-9);
        sk.observe(&[p[0].pin_id], &[]);
        let batch = LossBatch {
            queries: &q[..1],
            positives: &p[..1],
            negatives: &[],
        };
        let out = combined_loss(&batch, &params, &cfg, &sk, &mut Dropout::off()).unwrap();
        assert_eq!(out.total, 0.0);
        assert_eq!(out.in_batch, 0.0);
        assert_eq!(out.mixed, 0.0);
    }

    #[test]
    fn one_gradient_step_descends() {
        // plain gradient descent at small lr must strictly reduce the
        // combined loss on a fixed batch, for every seed
        for seed in 0..10u64 {
            let (cfg, _, q, p, m) = toy_setup();
            let params = ModelParams::init(&cfg, seed).unwrap();
            let mut sk = FrequencySketches::new(128, 4, seed, 1e-9);
            sk.observe(
                &p.iter().map(|c| c.pin_id).collect::<Vec<_>>(),
                &m.iter().map(|c| c.pin_id).collect::<Vec<_>>(),
            );
            let batch = LossBatch { queries: &q, positives: &p, negatives: &m };
            let before = combined_loss(&batch, &params, &cfg, &sk, &mut Dropout::off()).unwrap();
            let mut stepped = params.clone();
            for (t, g) in stepped.tensors_mut().iter_mut().zip(&before.grads) {
                for (w, gv) in t.data.iter_mut().zip(&g.data) {
                    *w -= 1e-3 * gv;
                }
            }
            let after = combined_loss(&batch, &stepped, &cfg, &sk, &mut Dropout::off()).unwrap();
            assert!(
                after.total < before.total,
                "seed {seed}: {} -> {}",
                before.total,
                after.total
            );
        }
    }

    #[test]
    fn shape_errors_are_reported() {
        let (cfg, params, q, p, _) = toy_setup();
        let sk = FrequencySketches::new(64, 4, 5, 1e-9);
        let batch = LossBatch { queries: &q, positives: &p[..2], negatives: &[] };
        assert!(matches!(
            combined_loss(&batch, &params, &cfg, &sk, &mut Dropout::off()),
            Err(LossError::Shape(_))
        ));
    }
}
