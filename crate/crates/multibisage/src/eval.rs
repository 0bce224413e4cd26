//! Retrieval metrics: Recall@k against a random distractor pool, with
//! pessimistic tie handling so collapsed embeddings cannot score well.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::seeds::{self, tags};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("no pairs to evaluate")]
    EmptyPairs,
    #[error("no embedding for id {0}")]
    UnknownId(u64),
    #[error("eval config: {0}")]
    Config(String),
}

fn default_k() -> usize {
    10
}
fn default_pool_size() -> usize {
    10_000
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_pool_size")]
    pub pool_size: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { k: default_k(), pool_size: default_pool_size(), seed: 0 }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.k == 0 {
            return Err(EvalError::Config("k must be at least 1".into()));
        }
        if self.pool_size < self.k {
            return Err(EvalError::Config(format!(
                "pool_size {} below k {}",
                self.pool_size, self.k
            )));
        }
        Ok(())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// 1-based rank of the engaged embedding among the distractors, by dot
/// product with the query, descending. A distractor scoring exactly the
/// target value outranks it (pessimistic ties).
pub fn rank_of(query: &[f64], engaged: &[f64], pool: &[Vec<f64>]) -> usize {
    let target = dot(query, engaged);
    1 + pool.iter().filter(|d| dot(query, d) >= target).count()
}

/// Seeded distractor pool: a uniform sample of the catalog without
/// replacement, capped at the catalog size.
pub fn sample_pool(catalog: &[u64], cfg: &EvalConfig) -> Vec<u64> {
    let mut ids = catalog.to_vec();
    let take = cfg.pool_size.min(ids.len());
    let mut rng = seeds::rng(cfg.seed, tags::EVAL, 0, 0);
    for i in 0..take {
        let j = rand::Rng::random_range(&mut rng, i..ids.len());
        ids.swap(i, j);
    }
    ids.truncate(take);
    ids
}

/// Per-pair ranks of each engaged pin among pool + engaged. The engaged pin
/// is dropped from the pool for its own pair; pairs are scored in parallel
/// (hit counting is order-free).
pub fn pair_ranks(
    pairs: &[(u64, u64)],
    embed: &(dyn Fn(u64) -> Option<Vec<f64>> + Sync),
    pool: &[u64],
) -> Result<Vec<usize>, EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::EmptyPairs);
    }
    let pool_embs: Vec<(u64, Vec<f64>)> = pool
        .iter()
        .map(|&id| embed(id).map(|e| (id, e)).ok_or(EvalError::UnknownId(id)))
        .collect::<Result<_, _>>()?;
    pairs
        .par_iter()
        .map(|&(q, e)| {
            let qe = embed(q).ok_or(EvalError::UnknownId(q))?;
            let ee = embed(e).ok_or(EvalError::UnknownId(e))?;
            let target = dot(&qe, &ee);
            let ahead = pool_embs
                .iter()
                .filter(|(id, emb)| *id != e && dot(&qe, emb) >= target)
                .count();
            Ok(1 + ahead)
        })
        .collect()
}

/// Fraction of pairs whose engaged pin ranks within the top k.
pub fn recall_at_k(
    pairs: &[(u64, u64)],
    embed: &(dyn Fn(u64) -> Option<Vec<f64>> + Sync),
    pool: &[u64],
    cfg: &EvalConfig,
) -> Result<f64, EvalError> {
    cfg.validate()?;
    let ranks = pair_ranks(pairs, embed, pool)?;
    let hits = ranks.iter().filter(|&&r| r <= cfg.k).count();
    Ok(hits as f64 / ranks.len() as f64)
}

/// `metric<TAB>value` report rows.
pub fn write_report(metrics: &[(String, f64)], w: &mut impl Write) -> std::io::Result<()> {
    writeln!(w, "metric\tvalue")?;
    for (name, value) in metrics {
        writeln!(w, "{name}\t{value}")?;
    }
    Ok(())
}

/// Per-pair rank dump for offline analysis.
pub fn write_ranks(
    pairs: &[(u64, u64)],
    ranks: &[usize],
    w: &mut impl Write,
) -> std::io::Result<()> {
    writeln!(w, "query\tengaged\trank")?;
    for ((q, e), r) in pairs.iter().zip(ranks) {
        writeln!(w, "{q}\t{e}\t{r}")?;
    }
    Ok(())
}
