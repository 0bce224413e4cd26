//! Standalone numerics ops and the finite-difference gradient checker.
//!
//! These are straight-line forward implementations, deliberately
//! independent of the tape: tests use them as oracles against the taped
//! graph, and the gradient checker probes any taped construction one
//! coordinate at a time.

use super::tensor::{NnError, Tensor};

/// Per-head projection weights plus the output projection.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub wq: Vec<Tensor>,
    pub wk: Vec<Tensor>,
    pub wv: Vec<Tensor>,
    /// [H * d_head, d_out]
    pub wo: Tensor,
}

impl AttentionParams {
    pub fn heads(&self) -> usize {
        self.wq.len()
    }

    pub fn validate(&self, d_in: usize) -> Result<(), NnError> {
        let h = self.heads();
        if h == 0 || self.wk.len() != h || self.wv.len() != h {
            return Err(NnError::Config("head weight lists must align".into()));
        }
        if d_in % h != 0 {
            return Err(NnError::Config(format!(
                "head count {h} must divide input width {d_in}"
            )));
        }
        let d_head = d_in / h;
        for w in self.wq.iter().chain(&self.wk).chain(&self.wv) {
            if w.dims != [d_in, d_head] {
                return Err(NnError::Shape(format!(
                    "head projection {:?}, expected [{d_in}, {d_head}]",
                    w.dims
                )));
            }
        }
        if self.wo.dims.len() != 2 || self.wo.dims[0] != h * d_head {
            return Err(NnError::Shape(format!(
                "output projection {:?}, expected [{}, d_out]",
                self.wo.dims,
                h * d_head
            )));
        }
        Ok(())
    }
}

fn mm(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, p) = (a.rows(), a.cols());
    let (p2, q) = (b.rows(), b.cols());
    assert_eq!(p, p2);
    let mut out = Tensor::zeros(&[m, q]);
    for r in 0..m {
        for k in 0..p {
            let av = a.data[r * p + k];
            for j in 0..q {
                out.data[r * q + j] += av * b.data[k * q + j];
            }
        }
    }
    out
}

/// ReLU(x W + b); x: [m, d_in], W: [d_in, d_out], b: [d_out].
pub fn ffn_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor, NnError> {
    if w.dims.len() != 2 || x.cols() != w.dims[0] {
        return Err(NnError::Shape(format!(
            "ffn input {:?} vs weight {:?}",
            x.dims, w.dims
        )));
    }
    if b.dims.len() != 1 || b.len() != w.dims[1] {
        return Err(NnError::Shape(format!(
            "ffn bias {:?} vs weight {:?}",
            b.dims, w.dims
        )));
    }
    let mut out = mm(x, w);
    let c = out.cols();
    for (i, v) in out.data.iter_mut().enumerate() {
        *v = (*v + b.data[i % c]).max(0.0);
    }
    Ok(out)
}

/// softmax(Q K^T / sqrt(d_k)) V.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor, NnError> {
    if q.cols() != k.cols() {
        return Err(NnError::Shape(format!(
            "query width {} vs key width {}",
            q.cols(),
            k.cols()
        )));
    }
    if k.rows() != v.rows() {
        return Err(NnError::Shape(format!(
            "key rows {} vs value rows {}",
            k.rows(),
            v.rows()
        )));
    }
    let (m, dk) = (q.rows(), q.cols());
    let (t, dv) = (v.rows(), v.cols());
    let scale = 1.0 / (dk as f64).sqrt();
    let mut out = Tensor::zeros(&[m, dv]);
    let mut logits = vec![0.0; t];
    for r in 0..m {
        for ti in 0..t {
            let mut s = 0.0;
            for j in 0..dk {
                s += q.data[r * dk + j] * k.data[ti * dk + j];
            }
            logits[ti] = s * scale;
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for l in logits.iter_mut() {
            *l = (*l - max).exp();
            sum += *l;
        }
        for ti in 0..t {
            let w = logits[ti] / sum;
            for j in 0..dv {
                out.data[r * dv + j] += w * v.data[ti * dv + j];
            }
        }
    }
    Ok(out)
}

/// Concat over heads of attention(X Wq_j, X Wk_j, X Wv_j), times W^O.
pub fn multihead(x: &Tensor, p: &AttentionParams) -> Result<Tensor, NnError> {
    p.validate(x.cols())?;
    let m = x.rows();
    let d_head = x.cols() / p.heads();
    let d_cat = p.heads() * d_head;
    let mut cat = Tensor::zeros(&[m, d_cat]);
    for (j, ((wq, wk), wv)) in p.wq.iter().zip(&p.wk).zip(&p.wv).enumerate() {
        let head = attention(&mm(x, wq), &mm(x, wk), &mm(x, wv))?;
        for r in 0..m {
            cat.data[r * d_cat + j * d_head..r * d_cat + (j + 1) * d_head]
                .copy_from_slice(head.row(r));
        }
    }
    Ok(mm(&cat, &p.wo))
}

/// Normalize a vector to unit Euclidean norm.
pub fn l2_normalize(x: &Tensor) -> Result<Tensor, NnError> {
    if x.dims.len() != 1 {
        return Err(NnError::Shape(format!(
            "l2_normalize takes a vector, got {:?}",
            x.dims
        )));
    }
    let n = x.data.iter().map(|&v| v * v).sum::<f64>().sqrt();
    if n <= super::tape::EPS_NORM {
        return Err(NnError::DegenerateEmbedding);
    }
    Ok(Tensor::from_vec(
        &x.dims,
        x.data.iter().map(|&v| v / n).collect(),
    ))
}

/// Central-difference check of a scalar map. `f` returns the loss and
/// one gradient tensor per parameter; only the unperturbed call's
/// gradients are used. Returns the worst relative error over all
/// coordinates, with denominator max(|analytic|, |numeric|, 1e-8).
pub fn grad_check<F>(params: &[Tensor], h: f64, f: F) -> Result<f64, NnError>
where
    F: Fn(&[Tensor]) -> Result<(f64, Vec<Tensor>), NnError>,
{
    if !(1e-7..=1e-3).contains(&h) {
        return Err(NnError::Config(format!("step {h} outside [1e-7, 1e-3]")));
    }
    let (loss, grads) = f(params)?;
    if !loss.is_finite() {
        return Err(NnError::NonFinite("loss".into()));
    }
    if grads.len() != params.len() {
        return Err(NnError::Shape(format!(
            "{} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    let mut worst = 0.0f64;
    for (pi, p) in params.iter().enumerate() {
        if grads[pi].dims != p.dims {
            return Err(NnError::Shape(format!(
                "gradient dims {:?} vs parameter dims {:?}",
                grads[pi].dims, p.dims
            )));
        }
        for ci in 0..p.len() {
            let mut probe = params.to_vec();
            probe[pi].data[ci] = p.data[ci] + h;
            let (lp, _) = f(&probe)?;
            probe[pi].data[ci] = p.data[ci] - h;
            let (lm, _) = f(&probe)?;
            let numeric = (lp - lm) / (2.0 * h);
            let analytic = grads[pi].data[ci];
            if !numeric.is_finite() || !analytic.is_finite() {
                return Err(NnError::NonFinite(format!("param {pi} coord {ci}")));
            }
            let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::tape::{NodeId, SeqPart, Tape};
    use rand::{Rng, SeedableRng};

    fn rnd(dims: &[usize], seed: u64) -> Tensor {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = dims.iter().product();
        let data = (0..n)
            .map(|_| {
                let v: f64 = rng.random_range(0.2..1.0);
                if rng.random_bool(0.5) {
                    v
                } else {
                    -v
                }
            })
            .collect();
        Tensor::from_vec(dims, data)
    }

    /// Reduce any node to a scalar through fixed non-uniform weights so
    /// transposition mistakes in backward cannot cancel out.
    fn scalarize(tape: &mut Tape, out: NodeId) -> NodeId {
        let dims = tape.dims(out).to_vec();
        let n: usize = dims.iter().product();
        let w: Vec<f64> = (0..n).map(|i| 1.2 + (0.7 * i as f64).sin()).collect();
        let wleaf = tape.leaf_slice(&dims, &w);
        let prod = tape.mul(out, wleaf);
        tape.mean(prod)
    }

    /// Gradcheck a tape construction against central differences.
    fn check_op<B>(params: Vec<Tensor>, build: B) -> f64
    where
        B: Fn(&mut Tape, &[NodeId]) -> Result<NodeId, NnError>,
    {
        grad_check(&params, 1e-5, |ps| {
            let mut tape = Tape::new();
            let ids: Vec<NodeId> = ps.iter().map(|t| tape.leaf(t.clone())).collect();
            let out = build(&mut tape, &ids)?;
            let root = scalarize(&mut tape, out);
            let loss = tape.scalar_value(root);
            let grads = tape.backward(root);
            let gs = ids
                .iter()
                .zip(ps)
                .map(|(&id, p)| {
                    let g = grads
                        .wrt(id)
                        .map(|g| g.to_vec())
                        .unwrap_or_else(|| vec![0.0; p.len()]);
                    Tensor::from_vec(&p.dims, g)
                })
                .collect();
            Ok((loss, gs))
        })
        .unwrap()
    }

    #[test]
    fn ffn_hand_cases() {
        let x = Tensor::from_vec(&[1, 2], vec![1.0, 2.0]);
        let w = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, -1.0]);
        let b = Tensor::from_vec(&[2], vec![0.0, 0.0]);
        let y = ffn_forward(&x, &w, &b).unwrap();
        assert_eq!(y.data, vec![1.0, 0.0]);

        let w0 = Tensor::zeros(&[2, 3]);
        let b0 = Tensor::zeros(&[3]);
        let y0 = ffn_forward(&x, &w0, &b0).unwrap();
        assert!(y0.data.iter().all(|&v| v == 0.0));

        assert!(ffn_forward(&x, &Tensor::zeros(&[3, 2]), &b).is_err());
    }

    #[test]
    fn attention_single_row_returns_v() {
        let q = rnd(&[1, 4], 1);
        let k = rnd(&[1, 4], 2);
        let v = rnd(&[1, 3], 3);
        let out = attention(&q, &k, &v).unwrap();
        for (a, b) in out.data.iter().zip(&v.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_zero_query_averages_v() {
        let q = Tensor::zeros(&[2, 4]);
        let k = rnd(&[3, 4], 5);
        let v = rnd(&[3, 2], 6);
        let out = attention(&q, &k, &v).unwrap();
        for r in 0..2 {
            for j in 0..2 {
                let mean = (0..3).map(|t| v.data[t * 2 + j]).sum::<f64>() / 3.0;
                assert!((out.data[r * 2 + j] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_matches_brute_force_formula() {
        let q = rnd(&[4, 3], 7);
        let k = rnd(&[4, 3], 8);
        let v = rnd(&[4, 5], 9);
        let out = attention(&q, &k, &v).unwrap();
        // Direct re-evaluation, no shared helpers.
        let scale = 1.0 / 3.0f64.sqrt();
        for r in 0..4 {
            let logits: Vec<f64> = (0..4)
                .map(|t| {
                    (0..3).map(|j| q.data[r * 3 + j] * k.data[t * 3 + j]).sum::<f64>() * scale
                })
                .collect();
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|&l| (l - mx).exp()).collect();
            let z: f64 = exps.iter().sum();
            for j in 0..5 {
                let want: f64 = (0..4).map(|t| exps[t] / z * v.data[t * 5 + j]).sum();
                assert!((out.data[r * 5 + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_output_in_convex_hull_of_v() {
        let q = rnd(&[5, 4], 20);
        let k = rnd(&[6, 4], 21);
        let v = rnd(&[6, 3], 22);
        let out = attention(&q, &k, &v).unwrap();
        for j in 0..3 {
            let lo = (0..6).map(|t| v.data[t * 3 + j]).fold(f64::INFINITY, f64::min);
            let hi = (0..6).map(|t| v.data[t * 3 + j]).fold(f64::NEG_INFINITY, f64::max);
            for r in 0..5 {
                let x = out.data[r * 3 + j];
                assert!(x >= lo - 1e-12 && x <= hi + 1e-12);
            }
        }
    }

    fn identity_params(d: usize) -> AttentionParams {
        let mut eye = Tensor::zeros(&[d, d]);
        for i in 0..d {
            eye.data[i * d + i] = 1.0;
        }
        AttentionParams {
            wq: vec![eye.clone()],
            wk: vec![eye.clone()],
            wv: vec![eye.clone()],
            wo: eye,
        }
    }

    #[test]
    fn multihead_single_identity_head_is_plain_attention() {
        let x = rnd(&[4, 4], 11);
        let out = multihead(&x, &identity_params(4)).unwrap();
        let want = attention(&x, &x, &x).unwrap();
        for (a, b) in out.data.iter().zip(&want.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn multihead_rejects_indivisible_heads() {
        let p = AttentionParams {
            wq: vec![rnd(&[8, 2], 1); 3],
            wk: vec![rnd(&[8, 2], 2); 3],
            wv: vec![rnd(&[8, 2], 3); 3],
            wo: rnd(&[6, 8], 4),
        };
        assert!(matches!(
            multihead(&rnd(&[2, 8], 5), &p),
            Err(NnError::Config(_))
        ));
    }

    #[test]
    fn multihead_is_permutation_equivariant() {
        let x = rnd(&[5, 8], 30);
        let p = AttentionParams {
            wq: vec![rnd(&[8, 4], 31), rnd(&[8, 4], 32)],
            wk: vec![rnd(&[8, 4], 33), rnd(&[8, 4], 34)],
            wv: vec![rnd(&[8, 4], 35), rnd(&[8, 4], 36)],
            wo: rnd(&[8, 6], 37),
        };
        let base = multihead(&x, &p).unwrap();
        let perm = [3usize, 0, 4, 1, 2];
        let mut xp = Tensor::zeros(&[5, 8]);
        for (dst, &src) in perm.iter().enumerate() {
            xp.row_mut(dst).copy_from_slice(x.row(src));
        }
        let out = multihead(&xp, &p).unwrap();
        for (dst, &src) in perm.iter().enumerate() {
            for j in 0..6 {
                assert!((out.data[dst * 6 + j] - base.data[src * 6 + j]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn l2_normalize_cases() {
        let y = l2_normalize(&Tensor::from_vec(&[2], vec![3.0, 4.0])).unwrap();
        assert!((y.data[0] - 0.6).abs() < 1e-15);
        assert!((y.data[1] - 0.8).abs() < 1e-15);
        let unit = Tensor::from_vec(&[2], vec![0.6, 0.8]);
        let fixed = l2_normalize(&unit).unwrap();
        for (a, b) in fixed.data.iter().zip(&unit.data) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(matches!(
            l2_normalize(&Tensor::zeros(&[3])),
            Err(NnError::DegenerateEmbedding)
        ));
    }

    #[test]
    fn grad_check_exact_on_quadratic() {
        let w = Tensor::from_vec(&[2], vec![1.0, 2.0]);
        let err = grad_check(&[w], 1e-4, |ps| {
            let loss: f64 = ps[0].data.iter().map(|&v| v * v).sum();
            let g = Tensor::from_vec(&[2], ps[0].data.iter().map(|&v| 2.0 * v).collect());
            Ok((loss, vec![g]))
        })
        .unwrap();
        assert!(err <= 1e-9, "err {err}");
    }

    #[test]
    fn grad_check_flags_corrupted_gradient() {
        let w = Tensor::from_vec(&[2], vec![1.0, 2.0]);
        let err = grad_check(&[w], 1e-4, |ps| {
            let loss: f64 = ps[0].data.iter().map(|&v| v * v).sum();
            // One coordinate doubled.
            let g = Tensor::from_vec(&[2], vec![2.0 * ps[0].data[0], 4.0 * ps[0].data[1]]);
            Ok((loss, vec![g]))
        })
        .unwrap();
        assert!(err > 0.3, "err {err}");
    }

    #[test]
    fn grad_check_rejects_bad_step() {
        let w = Tensor::from_vec(&[1], vec![1.0]);
        assert!(grad_check(&[w], 1e-2, |_| Ok((0.0, vec![Tensor::zeros(&[1])]))).is_err());
    }

    #[test]
    fn per_op_gradients_match_finite_differences() {
        let tol = 1e-6;
        let checks: Vec<(&str, f64)> = vec![
            ("matmul", check_op(vec![rnd(&[3, 4], 1), rnd(&[4, 2], 2)], |t, ids| {
                Ok(t.matmul(ids[0], ids[1]))
            })),
            ("matmul_nt", check_op(vec![rnd(&[3, 4], 3), rnd(&[5, 4], 4)], |t, ids| {
                Ok(t.matmul_nt(ids[0], ids[1]))
            })),
            ("add_bias", check_op(vec![rnd(&[3, 4], 5), rnd(&[4], 6)], |t, ids| {
                Ok(t.add_bias(ids[0], ids[1]))
            })),
            ("relu", check_op(vec![rnd(&[3, 4], 7)], |t, ids| Ok(t.relu(ids[0])))),
            ("attend_scores", check_op(vec![rnd(&[2, 3], 8), rnd(&[2, 4, 3], 9)], |t, ids| {
                Ok(t.attend_scores(ids[0], ids[1], 0.5))
            })),
            ("masked_softmax", check_op(vec![rnd(&[2, 4], 10)], |t, ids| {
                t.masked_softmax(ids[0], Some(vec![1.0, 1.0, 0.0, 1.0, 1.0, 1.0, 1.0, 0.0]))
            })),
            ("attend_mix", check_op(vec![rnd(&[2, 3], 11), rnd(&[2, 3, 4], 12)], |t, ids| {
                Ok(t.attend_mix(ids[0], ids[1]))
            })),
            ("assemble_seq", check_op(
                vec![rnd(&[3], 13), rnd(&[2, 3], 14), rnd(&[4, 3], 15)],
                |t, ids| {
                    Ok(t.assemble_seq(
                        2,
                        vec![
                            (ids[0], SeqPart::Broadcast),
                            (ids[1], SeqPart::Row),
                            (ids[2], SeqPart::Block(2)),
                        ],
                    ))
                },
            )),
            ("token_row", check_op(vec![rnd(&[2, 3, 4], 16)], |t, ids| {
                Ok(t.token_row(ids[0], 1))
            })),
            ("concat_cols", check_op(vec![rnd(&[3, 2], 17), rnd(&[3, 4], 18)], |t, ids| {
                Ok(t.concat_cols(&[ids[0], ids[1]]))
            })),
            ("l2_norm_rows", check_op(vec![rnd(&[3, 4], 19)], |t, ids| {
                t.l2_norm_rows(ids[0])
            })),
            ("layer_norm_rows", check_op(vec![rnd(&[3, 4], 20)], |t, ids| {
                Ok(t.layer_norm_rows(ids[0]))
            })),
            ("scale", check_op(vec![rnd(&[3, 4], 21)], |t, ids| Ok(t.scale(ids[0], 2.5)))),
            ("add_row_const", check_op(vec![rnd(&[3, 4], 22)], |t, ids| {
                Ok(t.add_row_const(ids[0], vec![0.1, -0.2, 0.3]))
            })),
            ("add_col_const", check_op(vec![rnd(&[3, 4], 23)], |t, ids| {
                Ok(t.add_col_const(ids[0], vec![0.1, -0.2, 0.3, 0.4]))
            })),
            ("mul_mask", check_op(vec![rnd(&[2, 4], 24)], |t, ids| {
                Ok(t.mul_mask(ids[0], vec![1.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0, 1.0]))
            })),
            ("add", check_op(vec![rnd(&[3, 4], 25), rnd(&[3, 4], 26)], |t, ids| {
                Ok(t.add(ids[0], ids[1]))
            })),
            ("mul", check_op(vec![rnd(&[3, 4], 27), rnd(&[3, 4], 28)], |t, ids| {
                Ok(t.mul(ids[0], ids[1]))
            })),
            ("row_dots", check_op(vec![rnd(&[3, 4], 29), rnd(&[3, 4], 30)], |t, ids| {
                Ok(t.row_dots(ids[0], ids[1]))
            })),
            ("ce_rows", check_op(vec![rnd(&[3, 4], 31)], |t, ids| {
                Ok(t.ce_rows(ids[0], vec![0, 2, 3]))
            })),
            ("mean", check_op(vec![rnd(&[3, 4], 32)], |t, ids| Ok(t.mean(ids[0])))),
        ];
        for (name, err) in checks {
            assert!(err <= tol, "{name}: relative error {err}");
        }
    }

    #[test]
    fn multihead_gradcheck_via_tape() {
        // Full multi-head attention over all rows, assembled from taped
        // single-row queries; checks every parameter group.
        let m = 4;
        let d = 6;
        let h = 2;
        let dh = d / h;
        let params = vec![
            rnd(&[m, d], 41),  // x
            rnd(&[d, dh], 42), // wq0
            rnd(&[d, dh], 43), // wq1
            rnd(&[d, dh], 44), // wk0
            rnd(&[d, dh], 45), // wk1
            rnd(&[d, dh], 46), // wv0
            rnd(&[d, dh], 47), // wv1
            rnd(&[d, 5], 48),  // wo
        ];
        let err = check_op(params, move |t, ids| {
            let (x, wo) = (ids[0], ids[7]);
            let seq = t.assemble_seq(1, vec![(x, SeqPart::Block(m))]);
            let scale = 1.0 / (dh as f64).sqrt();
            let mut rows = Vec::new();
            for r in 0..m {
                let q_in = t.token_row(seq, r);
                let mut heads = Vec::new();
                for j in 0..h {
                    let q = t.matmul(q_in, ids[1 + j]);
                    let k = t.matmul(seq, ids[3 + j]);
                    let v = t.matmul(seq, ids[5 + j]);
                    let s = t.attend_scores(q, k, scale);
                    let p = t.masked_softmax(s, None)?;
                    heads.push(t.attend_mix(p, v));
                }
                let cat = t.concat_cols(&heads);
                rows.push(t.matmul(cat, wo));
            }
            Ok(t.concat_cols(&rows))
        });
        assert!(err <= 1e-4, "multihead end-to-end error {err}");
    }
}
