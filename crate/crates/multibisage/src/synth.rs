//! Planted-cluster corpus generator: every pin belongs to a latent cluster
//! and, within it, a sub-cluster; both levels shape its graph edges, its
//! features, and its engagement pairs, so retrieval quality has a known
//! signal to recover. Engagement is a sub-cluster event, which keeps
//! recall@k meaningful well above 1/clusters even when clusters are few.

use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::features::FeatureStore;
use crate::graph::{BipartiteGraph, GraphError};
use crate::seeds::{self, standard_normal, tags};

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("synth config: {0}")]
    Config(String),
    #[error("graph {0} came out empty; raise edge probabilities")]
    EmptyGraph(u32),
    #[error("could not draw {0} distinct pairs; lower pair_count or raise num_pins")]
    PairSpaceExhausted(usize),
    #[error("pairs line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Feature(#[from] crate::features::FeatureError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub num_pins: usize,
    pub num_ctx: usize,
    pub num_graphs: usize,
    pub clusters: usize,
    /// Sub-clusters per cluster; engagement happens at this level.
    #[serde(default = "default_sub_clusters")]
    pub sub_clusters: usize,
    /// Edge probability for a same-sub-cluster (pin, ctx) cell in a fully
    /// informative graph.
    pub intra_edge_prob: f64,
    /// Edge probability for a same-cluster, different-sub-cluster cell in
    /// a fully informative graph.
    #[serde(default = "default_macro_edge_prob")]
    pub macro_edge_prob: f64,
    /// Edge probability for a cross-cluster cell, independent of
    /// informativeness.
    pub inter_edge_noise: f64,
    /// Stddev of the gaussian added to each feature coordinate.
    pub feature_noise: f64,
    /// Length of each sub-cluster's centroid offset from its cluster
    /// centroid, relative to the unit cluster centroid.
    #[serde(default = "default_sub_scale")]
    pub sub_scale: f64,
    pub pair_count: usize,
    /// Probability an engagement pair crosses clusters.
    pub pair_noise: f64,
    pub d_v: usize,
    pub d_t: usize,
    pub seed: u64,
    /// Per-graph weight in [0, 1] blending both same-cluster edge
    /// probabilities from inter_edge_noise (0, no signal) up to their
    /// configured values (1, full signal).
    pub graph_informativeness: Vec<f64>,
}

fn default_sub_clusters() -> usize {
    4
}
fn default_macro_edge_prob() -> f64 {
    0.04
}
fn default_sub_scale() -> f64 {
    0.5
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_pins: 400,
            num_ctx: 200,
            num_graphs: 2,
            clusters: 8,
            sub_clusters: 4,
            intra_edge_prob: 0.3,
            macro_edge_prob: 0.04,
            inter_edge_noise: 0.01,
            feature_noise: 0.4,
            sub_scale: 0.5,
            pair_count: 1200,
            pair_noise: 0.05,
            d_v: 12,
            d_t: 8,
            seed: 0,
            graph_informativeness: vec![1.0, 0.5],
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let err = |m: String| Err(SynthError::Config(m));
        if self.num_pins == 0 || self.num_ctx == 0 {
            return err("num_pins and num_ctx must be positive".into());
        }
        if self.num_graphs == 0 {
            return err("num_graphs must be positive".into());
        }
        if self.clusters == 0 || self.clusters > self.num_pins {
            return err(format!(
                "clusters must be in 1..={} (got {})",
                self.num_pins, self.clusters
            ));
        }
        if self.sub_clusters == 0 {
            return err("sub_clusters must be positive".into());
        }
        for (name, p) in [
            ("intra_edge_prob", self.intra_edge_prob),
            ("macro_edge_prob", self.macro_edge_prob),
            ("inter_edge_noise", self.inter_edge_noise),
            ("pair_noise", self.pair_noise),
        ] {
            if !(0.0..=1.0).contains(&p) || !p.is_finite() {
                return err(format!("{name} must be in [0, 1], got {p}"));
            }
        }
        for (name, v) in [
            ("feature_noise", self.feature_noise),
            ("sub_scale", self.sub_scale),
        ] {
            if !v.is_finite() || v < 0.0 {
                return err(format!("{name} must be >= 0, got {v}"));
            }
        }
        if self.pair_count == 0 {
            return err("pair_count must be positive".into());
        }
        if self.d_v == 0 || self.d_t == 0 {
            return err("d_v and d_t must be positive".into());
        }
        if self.graph_informativeness.len() != self.num_graphs {
            return err(format!(
                "graph_informativeness has {} entries for {} graphs",
                self.graph_informativeness.len(),
                self.num_graphs
            ));
        }
        for (i, &w) in self.graph_informativeness.iter().enumerate() {
            if !(0.0..=1.0).contains(&w) || !w.is_finite() {
                return err(format!("graph_informativeness[{i}] must be in [0, 1], got {w}"));
            }
        }
        Ok(())
    }

    /// Same-sub-cluster edge probability for graph `g`. At informativeness
    /// 0 this equals the cross-cluster noise, so the graph carries no
    /// cluster signal at all rather than no edges at all.
    pub fn sub_prob(&self, g: usize) -> f64 {
        let w = self.graph_informativeness[g];
        self.inter_edge_noise + w * (self.intra_edge_prob - self.inter_edge_noise)
    }

    /// Same-cluster, different-sub-cluster edge probability for graph `g`.
    pub fn macro_prob(&self, g: usize) -> f64 {
        let w = self.graph_informativeness[g];
        self.inter_edge_noise + w * (self.macro_edge_prob - self.inter_edge_noise)
    }
}

/// Latent position of a node: cluster and sub-cluster within it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Slot {
    cluster: u32,
    sub: u32,
}

fn draw_slot<R: Rng>(rng: &mut R, cfg: &SynthConfig) -> Slot {
    Slot {
        cluster: rng.random_range(0..cfg.clusters as u32),
        sub: rng.random_range(0..cfg.sub_clusters as u32),
    }
}

#[derive(Debug)]
pub struct Corpus {
    pub graphs: Vec<BipartiteGraph>,
    pub features: FeatureStore,
    pub train_pairs: Vec<(u64, u64)>,
    pub test_pairs: Vec<(u64, u64)>,
    /// Latent cluster per pin id (index = id); kept for oracle checks.
    pub pin_clusters: Vec<u32>,
    /// Flattened sub-cluster per pin id: cluster * sub_clusters + sub.
    pub pin_subs: Vec<u32>,
}

impl Corpus {
    pub fn pin_ids(&self) -> Vec<u64> {
        (0..self.pin_clusters.len() as u64).collect()
    }
}

/// Ctx ids occupy a disjoint range above the pin ids, one block per graph.
pub fn ctx_id(cfg: &SynthConfig, graph: usize, slot: usize) -> u64 {
    (cfg.num_pins + graph * cfg.num_ctx + slot) as u64
}

fn unit_direction<R: Rng>(rng: &mut R, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| standard_normal(rng)).collect();
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

pub fn gen_corpus(cfg: &SynthConfig) -> Result<Corpus, SynthError> {
    cfg.validate()?;

    let mut rng = seeds::rng(cfg.seed, tags::SYNTH, 0, 0);
    let pin_slots: Vec<Slot> = (0..cfg.num_pins).map(|_| draw_slot(&mut rng, cfg)).collect();

    let mut graphs = Vec::with_capacity(cfg.num_graphs);
    for g in 0..cfg.num_graphs {
        let mut rng = seeds::rng(cfg.seed, tags::SYNTH, 1, g as u64);
        let ctx_slots: Vec<Slot> =
            (0..cfg.num_ctx).map(|_| draw_slot(&mut rng, cfg)).collect();
        let p_sub = cfg.sub_prob(g);
        let p_mac = cfg.macro_prob(g);
        let mut edges = Vec::new();
        for (p, ps) in pin_slots.iter().enumerate() {
            for (j, cs) in ctx_slots.iter().enumerate() {
                let prob = if ps.cluster != cs.cluster {
                    cfg.inter_edge_noise
                } else if ps.sub == cs.sub {
                    p_sub
                } else {
                    p_mac
                };
                if rng.random_bool(prob) {
                    edges.push((p as u64, ctx_id(cfg, g, j)));
                }
            }
        }
        if edges.is_empty() {
            return Err(SynthError::EmptyGraph(g as u32));
        }
        graphs.push(BipartiteGraph::from_edges(g as u32, &edges)?);
    }

    // cluster centroids first, then per-cluster sub offsets, all from the
    // same stream so either level alone can be regenerated for checks
    let mut rng = seeds::rng(cfg.seed, tags::SYNTH, 2, 0);
    let centroids: Vec<(Vec<f64>, Vec<f64>)> = (0..cfg.clusters)
        .map(|_| (unit_direction(&mut rng, cfg.d_v), unit_direction(&mut rng, cfg.d_t)))
        .collect();
    let offsets: Vec<(Vec<f64>, Vec<f64>)> = (0..cfg.clusters * cfg.sub_clusters)
        .map(|_| {
            let scale = |v: Vec<f64>| v.into_iter().map(|x| x * cfg.sub_scale).collect();
            (
                scale(unit_direction(&mut rng, cfg.d_v)),
                scale(unit_direction(&mut rng, cfg.d_t)),
            )
        })
        .collect();

    let sub_index =
        |s: &Slot| -> usize { s.cluster as usize * cfg.sub_clusters + s.sub as usize };
    let mut features = FeatureStore::new(cfg.d_v, cfg.d_t);
    let mut rng = seeds::rng(cfg.seed, tags::SYNTH, 3, 0);
    for (p, ps) in pin_slots.iter().enumerate() {
        let (cv, ct) = &centroids[ps.cluster as usize];
        let (ov, ot) = &offsets[sub_index(ps)];
        let noisy = |c: &[f64], o: &[f64], rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
            c.iter()
                .zip(o)
                .map(|(&x, &y)| x + y + cfg.feature_noise * standard_normal(rng))
                .collect()
        };
        let v = noisy(cv, ov, &mut rng);
        let t = noisy(ct, ot, &mut rng);
        features.insert(p as u64, &v, &t);
    }

    let (train_pairs, test_pairs) = gen_pairs(cfg, &pin_slots)?;
    let pin_clusters = pin_slots.iter().map(|s| s.cluster).collect();
    let pin_subs = pin_slots.iter().map(|s| sub_index(s) as u32).collect();
    Ok(Corpus { graphs, features, train_pairs, test_pairs, pin_clusters, pin_subs })
}

fn gen_pairs(
    cfg: &SynthConfig,
    pin_slots: &[Slot],
) -> Result<(Vec<(u64, u64)>, Vec<(u64, u64)>), SynthError> {
    let sub_count = cfg.clusters * cfg.sub_clusters;
    let mut sub_members: Vec<Vec<u64>> = vec![Vec::new(); sub_count];
    let mut cluster_members: Vec<Vec<u64>> = vec![Vec::new(); cfg.clusters];
    for (p, s) in pin_slots.iter().enumerate() {
        sub_members[s.cluster as usize * cfg.sub_clusters + s.sub as usize].push(p as u64);
        cluster_members[s.cluster as usize].push(p as u64);
    }

    let mut rng = seeds::rng(cfg.seed, tags::SYNTH, 4, 0);
    let mut seen: HashSet<(u64, u64)> = HashSet::new();
    let mut pairs = Vec::with_capacity(cfg.pair_count);
    let mut attempts = 0usize;
    let max_attempts = cfg.pair_count.saturating_mul(200).max(10_000);
    while pairs.len() < cfg.pair_count {
        attempts += 1;
        if attempts > max_attempts {
            return Err(SynthError::PairSpaceExhausted(cfg.pair_count));
        }
        let q = rng.random_range(0..cfg.num_pins as u64);
        let qs = pin_slots[q as usize];
        let cross = rng.random_bool(cfg.pair_noise);
        // engagement lives in the query's sub-cluster; a sub too small to
        // supply a partner falls back to the cluster, and a singleton
        // cluster degenerates to a cross pair
        let sub = &sub_members[qs.cluster as usize * cfg.sub_clusters + qs.sub as usize];
        let cluster = &cluster_members[qs.cluster as usize];
        let e = if !cross && sub.len() > 1 {
            let e = sub[rng.random_range(0..sub.len())];
            if e == q {
                continue;
            }
            e
        } else if !cross && cluster.len() > 1 {
            let e = cluster[rng.random_range(0..cluster.len())];
            if e == q {
                continue;
            }
            e
        } else {
            let e = rng.random_range(0..cfg.num_pins as u64);
            if e == q || pin_slots[e as usize].cluster == qs.cluster {
                continue;
            }
            e
        };
        if seen.insert((q, e)) {
            pairs.push((q, e));
        }
    }

    let split = cfg.pair_count - cfg.pair_count / 10;
    let test = pairs.split_off(split);
    Ok((pairs, test))
}

/// `query_id<TAB>engaged_id` lines, one pair each.
pub fn write_pairs(pairs: &[(u64, u64)], w: &mut impl Write) -> std::io::Result<()> {
    for (q, e) in pairs {
        writeln!(w, "{q}\t{e}")?;
    }
    Ok(())
}

pub fn save_pairs<P: AsRef<Path>>(pairs: &[(u64, u64)], path: P) -> Result<(), SynthError> {
    let mut buf = Vec::new();
    write_pairs(pairs, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

/// Parse `query_id<TAB>engaged_id` lines. Blank lines are skipped;
/// anything else malformed reports its 1-based line number.
pub fn parse_pairs(bytes: &[u8]) -> Result<Vec<(u64, u64)>, SynthError> {
    let mut pairs = Vec::new();
    for (i, raw) in bytes.split(|&b| b == b'\n').enumerate() {
        let line = i + 1;
        let raw = raw.strip_suffix(b"\r").unwrap_or(raw);
        if raw.is_empty() {
            continue;
        }
        let text = std::str::from_utf8(raw).map_err(|_| SynthError::Parse {
            line,
            msg: "invalid UTF-8".into(),
        })?;
        let (q, e) = text.split_once('\t').ok_or_else(|| SynthError::Parse {
            line,
            msg: format!("expected query_id<TAB>engaged_id, got {text:?}"),
        })?;
        let parse = |s: &str, what: &str| {
            s.parse::<u64>().map_err(|_| SynthError::Parse {
                line,
                msg: format!("bad {what} {s:?}"),
            })
        };
        pairs.push((parse(q, "query id")?, parse(e, "engaged id")?));
    }
    Ok(pairs)
}

pub fn load_pairs<P: AsRef<Path>>(path: P) -> Result<Vec<(u64, u64)>, SynthError> {
    let bytes = std::fs::read(path)?;
    parse_pairs(&bytes)
}

/// File names used by both the writer below and the pipeline loader.
pub fn edge_file_name(graph: usize) -> String {
    format!("graph_{graph}.edges.tsv")
}
pub const FEATURES_FILE: &str = "features.bsft";
pub const TRAIN_PAIRS_FILE: &str = "train_pairs.tsv";
pub const TEST_PAIRS_FILE: &str = "test_pairs.tsv";

/// Write every corpus artifact under `dir`.
pub fn write_corpus<P: AsRef<Path>>(corpus: &Corpus, dir: P) -> Result<(), SynthError> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    for (g, graph) in corpus.graphs.iter().enumerate() {
        graph.save_edges(dir.join(edge_file_name(g)))?;
    }
    corpus.features.save(dir.join(FEATURES_FILE))?;
    save_pairs(&corpus.train_pairs, dir.join(TRAIN_PAIRS_FILE))?;
    save_pairs(&corpus.test_pairs, dir.join(TEST_PAIRS_FILE))?;
    Ok(())
}
