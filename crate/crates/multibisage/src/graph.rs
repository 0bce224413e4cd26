//! Bipartite graph storage, edge-list IO, and degree-based pruning.
//!
//! Graphs are immutable once built. Node iteration order is first
//! appearance in the edge list; every adjacency list is sorted by the
//! neighbor's external id so downstream sampling is independent of edge
//! file line order.

use std::collections::HashMap;
use std::fmt;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seeds;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("empty graph")]
    EmptyGraph,
    #[error("invalid prune config: {0}")]
    BadPruneConfig(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Which side of the bipartition a node lives on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Pin,
    Ctx,
}

/// Immutable bipartite graph over 64-bit node ids. Pin-side and ctx-side
/// ids are separate namespaces: pin 5 and ctx 5 are distinct nodes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BipartiteGraph {
    graph_id: u32,
    pins: Vec<u64>,
    ctxs: Vec<u64>,
    pin_index: HashMap<u64, u32>,
    ctx_index: HashMap<u64, u32>,
    /// Per pin, ctx-side neighbor indices sorted by ctx id.
    pin_adj: Vec<Vec<u32>>,
    /// Per ctx, pin-side neighbor indices sorted by pin id.
    ctx_adj: Vec<Vec<u32>>,
    edge_count: usize,
}

impl BipartiteGraph {
    /// Build from (pin_id, ctx_id) pairs. Duplicates are collapsed; node
    /// order is first appearance in `edges`.
    pub fn from_edges(graph_id: u32, edges: &[(u64, u64)]) -> Result<Self, GraphError> {
        let mut seen = std::collections::HashSet::with_capacity(edges.len());
        let mut pins = Vec::new();
        let mut ctxs = Vec::new();
        let mut pin_index = HashMap::new();
        let mut ctx_index = HashMap::new();
        let mut pin_adj: Vec<Vec<u32>> = Vec::new();
        let mut ctx_adj: Vec<Vec<u32>> = Vec::new();
        let mut edge_count = 0usize;

        for &(p, c) in edges {
            if !seen.insert((p, c)) {
                continue;
            }
            let pi = *pin_index.entry(p).or_insert_with(|| {
                pins.push(p);
                pin_adj.push(Vec::new());
                (pins.len() - 1) as u32
            });
            let ci = *ctx_index.entry(c).or_insert_with(|| {
                ctxs.push(c);
                ctx_adj.push(Vec::new());
                (ctxs.len() - 1) as u32
            });
            pin_adj[pi as usize].push(ci);
            ctx_adj[ci as usize].push(pi);
            edge_count += 1;
        }
        if edge_count == 0 {
            return Err(GraphError::EmptyGraph);
        }
        for list in &mut pin_adj {
            list.sort_unstable_by_key(|&ci| ctxs[ci as usize]);
        }
        for list in &mut ctx_adj {
            list.sort_unstable_by_key(|&pi| pins[pi as usize]);
        }
        Ok(BipartiteGraph {
            graph_id,
            pins,
            ctxs,
            pin_index,
            ctx_index,
            pin_adj,
            ctx_adj,
            edge_count,
        })
    }

    pub fn graph_id(&self) -> u32 {
        self.graph_id
    }

    pub fn num_pins(&self) -> usize {
        self.pins.len()
    }

    pub fn num_ctx(&self) -> usize {
        self.ctxs.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edge_count
    }

    /// Pin ids in first-appearance order.
    pub fn pin_ids(&self) -> &[u64] {
        &self.pins
    }

    /// Ctx ids in first-appearance order.
    pub fn ctx_ids(&self) -> &[u64] {
        &self.ctxs
    }

    pub fn pin_id(&self, idx: usize) -> u64 {
        self.pins[idx]
    }

    pub fn ctx_id(&self, idx: usize) -> u64 {
        self.ctxs[idx]
    }

    pub fn pin_index(&self, id: u64) -> Option<usize> {
        self.pin_index.get(&id).map(|&i| i as usize)
    }

    pub fn ctx_index(&self, id: u64) -> Option<usize> {
        self.ctx_index.get(&id).map(|&i| i as usize)
    }

    /// Ctx-side neighbor indices of a pin, sorted by ctx id.
    pub fn pin_neighbors(&self, idx: usize) -> &[u32] {
        &self.pin_adj[idx]
    }

    /// Pin-side neighbor indices of a ctx node, sorted by pin id.
    pub fn ctx_neighbors(&self, idx: usize) -> &[u32] {
        &self.ctx_adj[idx]
    }

    pub fn pin_degree(&self, idx: usize) -> usize {
        self.pin_adj[idx].len()
    }

    pub fn ctx_degree(&self, idx: usize) -> usize {
        self.ctx_adj[idx].len()
    }

    /// All edges as id pairs, sorted by (pin_id, ctx_id). Canonical: two
    /// graphs with equal edge sets produce identical vectors.
    pub fn edges(&self) -> Vec<(u64, u64)> {
        let mut out = Vec::with_capacity(self.edge_count);
        for (pi, list) in self.pin_adj.iter().enumerate() {
            let p = self.pins[pi];
            for &ci in list {
                out.push((p, self.ctxs[ci as usize]));
            }
        }
        out.sort_unstable();
        out
    }

    pub fn write_edges<W: Write>(&self, w: &mut W) -> io::Result<()> {
        for (p, c) in self.edges() {
            writeln!(w, "{p}\t{c}")?;
        }
        Ok(())
    }

    pub fn save_edges<P: AsRef<Path>>(&self, path: P) -> Result<(), GraphError> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        self.write_edges(&mut w)?;
        w.flush()?;
        Ok(())
    }

    /// Prune every node whose degree exceeds `cfg.min_degree` down to the
    /// configured target, visiting pins then ctx nodes in ascending id
    /// order. Removed edges are chosen uniformly at random per node from a
    /// stream seeded by (cfg.seed, side, node id).
    pub fn degree_prune(&self, cfg: &PruneConfig) -> Result<BipartiteGraph, GraphError> {
        self.degree_prune_with_report(cfg).map(|(g, _)| g)
    }

    /// As `degree_prune`, also reporting each directly-pruned node's
    /// degree immediately before and after its visit. A node's final
    /// degree can drop below the target again when a later neighbor's
    /// visit removes a shared edge; the report captures the state the
    /// rule actually enforced.
    pub fn degree_prune_with_report(
        &self,
        cfg: &PruneConfig,
    ) -> Result<(BipartiteGraph, Vec<PruneRecord>), GraphError> {
        cfg.validate()?;
        let mut pin_adj = self.pin_adj.clone();
        let mut ctx_adj = self.ctx_adj.clone();
        let mut report = Vec::new();

        let mut pin_order: Vec<usize> = (0..self.pins.len()).collect();
        pin_order.sort_unstable_by_key(|&i| self.pins[i]);
        let mut ctx_order: Vec<usize> = (0..self.ctxs.len()).collect();
        ctx_order.sort_unstable_by_key(|&i| self.ctxs[i]);

        for &pi in &pin_order {
            prune_node(Side::Pin, pi, &mut pin_adj, &mut ctx_adj, &self.pins, cfg, &mut report);
        }
        for &ci in &ctx_order {
            prune_node(Side::Ctx, ci, &mut ctx_adj, &mut pin_adj, &self.ctxs, cfg, &mut report);
        }

        let edge_count = pin_adj.iter().map(Vec::len).sum();
        let pruned = BipartiteGraph {
            graph_id: self.graph_id,
            pins: self.pins.clone(),
            ctxs: self.ctxs.clone(),
            pin_index: self.pin_index.clone(),
            ctx_index: self.ctx_index.clone(),
            pin_adj,
            ctx_adj,
            edge_count,
        };
        Ok((pruned, report))
    }
}

/// Prune one node in place. `adj` is the visited side's adjacency, `radj`
/// the mirror, `ids` the visited side's external ids.
fn prune_node(
    side: Side,
    idx: usize,
    adj: &mut [Vec<u32>],
    radj: &mut [Vec<u32>],
    ids: &[u64],
    cfg: &PruneConfig,
    report: &mut Vec<PruneRecord>,
) {
    let degree_before = adj[idx].len();
    if degree_before as u64 <= cfg.min_degree {
        return;
    }
    let target = cfg.target_degree(degree_before);
    let side_tag = match side {
        Side::Pin => 0,
        Side::Ctx => 1,
    };
    let mut rng = seeds::rng(cfg.seed, seeds::tags::PRUNE, side_tag, ids[idx]);
    while adj[idx].len() > target {
        let victim = rng.random_range(0..adj[idx].len());
        let other = adj[idx].remove(victim) as usize;
        // Mirror lists are sorted by this side's external id.
        let pos = radj[other]
            .binary_search_by_key(&ids[idx], |&w| ids[w as usize])
            .expect("adjacency out of sync");
        radj[other].remove(pos);
    }
    report.push(PruneRecord {
        side,
        node_id: ids[idx],
        degree_before,
        degree_after_visit: adj[idx].len(),
        target,
    });
}

/// Degree target formula. `MinAP` is the literal published rule
/// floor(min(a·p, b)); `DegreeScaled` is the plausible-intent variant
/// floor(min(deg·p, b)), kept behind configuration because the literal
/// rule makes b inert whenever a·p < b.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneRule {
    #[default]
    MinAP,
    DegreeScaled,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneConfig {
    /// a: nodes with degree above this are pruned.
    pub min_degree: u64,
    /// b: upper cap inside the target formula.
    pub max_degree: u64,
    /// p in [0,1].
    pub prune_factor: f64,
    pub seed: u64,
    #[serde(default)]
    pub rule: PruneRule,
}

impl PruneConfig {
    pub fn validate(&self) -> Result<(), GraphError> {
        if self.min_degree < 1 {
            return Err(GraphError::BadPruneConfig("min_degree must be >= 1".into()));
        }
        if self.max_degree < self.min_degree {
            return Err(GraphError::BadPruneConfig(
                "max_degree must be >= min_degree".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.prune_factor) {
            return Err(GraphError::BadPruneConfig(
                "prune_factor must be in [0,1]".into(),
            ));
        }
        Ok(())
    }

    /// Post-visit degree for a node of `degree` that exceeded min_degree.
    pub fn target_degree(&self, degree: usize) -> usize {
        let scaled = match self.rule {
            PruneRule::MinAP => self.min_degree as f64 * self.prune_factor,
            PruneRule::DegreeScaled => degree as f64 * self.prune_factor,
        };
        scaled.min(self.max_degree as f64).floor() as usize
    }
}

/// Per directly-pruned node: state around its own visit.
#[derive(Debug, Clone)]
pub struct PruneRecord {
    pub side: Side,
    pub node_id: u64,
    pub degree_before: usize,
    pub degree_after_visit: usize,
    pub target: usize,
}

impl fmt::Display for PruneRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:?} {}: {} -> {} (target {})",
            self.side, self.node_id, self.degree_before, self.degree_after_visit, self.target
        )
    }
}

/// Parse `pin_id<TAB>ctx_id` lines. Blank lines are skipped; anything
/// else malformed reports its 1-based line number. Duplicates are kept
/// (graph construction collapses them).
pub fn parse_edge_list(bytes: &[u8]) -> Result<Vec<(u64, u64)>, GraphError> {
    let mut edges = Vec::new();
    for (i, raw) in bytes.split(|&b| b == b'\n').enumerate() {
        let line = i + 1;
        let raw = raw.strip_suffix(b"\r").unwrap_or(raw);
        if raw.is_empty() {
            continue;
        }
        let text = std::str::from_utf8(raw).map_err(|_| GraphError::Parse {
            line,
            msg: "invalid UTF-8".into(),
        })?;
        let (p, c) = text.split_once('\t').ok_or_else(|| GraphError::Parse {
            line,
            msg: format!("expected pin_id<TAB>ctx_id, got {text:?}"),
        })?;
        let parse = |s: &str, what: &str| {
            s.parse::<u64>().map_err(|_| GraphError::Parse {
                line,
                msg: format!("bad {what} {s:?}"),
            })
        };
        edges.push((parse(p, "pin id")?, parse(c, "ctx id")?));
    }
    Ok(edges)
}

pub fn load_edges<P: AsRef<Path>>(path: P, graph_id: u32) -> Result<BipartiteGraph, GraphError> {
    let bytes = std::fs::read(path)?;
    let edges = parse_edge_list(&bytes)?;
    BipartiteGraph::from_edges(graph_id, &edges)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn star(center_is_ctx: bool, leaves: u64) -> BipartiteGraph {
        let edges: Vec<(u64, u64)> = (0..leaves)
            .map(|i| if center_is_ctx { (i + 1, 1000) } else { (1000, i + 1) })
            .collect();
        BipartiteGraph::from_edges(0, &edges).unwrap()
    }

    fn cfg(a: u64, b: u64, p: f64, seed: u64) -> PruneConfig {
        PruneConfig {
            min_degree: a,
            max_degree: b,
            prune_factor: p,
            seed,
            rule: PruneRule::MinAP,
        }
    }

    #[test]
    fn basic_counts() {
        let g = BipartiteGraph::from_edges(3, &[(1, 10), (1, 11), (2, 10)]).unwrap();
        assert_eq!(g.num_pins(), 2);
        assert_eq!(g.num_ctx(), 2);
        assert_eq!(g.edge_count(), 3);
        assert_eq!(g.graph_id(), 3);
    }

    #[test]
    fn duplicate_edges_collapse() {
        let g = BipartiteGraph::from_edges(0, &[(1, 10), (1, 10)]).unwrap();
        assert_eq!(g.edge_count(), 1);
    }

    #[test]
    fn first_appearance_order_and_sorted_adjacency() {
        let g = BipartiteGraph::from_edges(0, &[(5, 100), (1, 100), (5, 7)]).unwrap();
        assert_eq!(g.pin_ids(), &[5, 1]);
        assert_eq!(g.ctx_ids(), &[100, 7]);
        let nbr_ids: Vec<u64> = g
            .pin_neighbors(0)
            .iter()
            .map(|&ci| g.ctx_id(ci as usize))
            .collect();
        assert_eq!(nbr_ids, vec![7, 100]);
    }

    #[test]
    fn parse_reports_line_numbers() {
        let err = parse_edge_list(b"1\t2\n3 4\n").unwrap_err();
        match err {
            GraphError::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error {other:?}"),
        }
        let err = parse_edge_list(b"1\t2\n3\t-4\n").unwrap_err();
        match err {
            GraphError::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn empty_input_is_an_error() {
        assert!(matches!(
            BipartiteGraph::from_edges(0, &[]),
            Err(GraphError::EmptyGraph)
        ));
        // Blank lines alone parse to zero edges, which the graph rejects.
        let edges = parse_edge_list(b"\n\n").unwrap();
        assert!(matches!(
            BipartiteGraph::from_edges(0, &edges),
            Err(GraphError::EmptyGraph)
        ));
    }

    #[test]
    fn round_trip_preserves_degree_sequence() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let mut edges = Vec::new();
        for _ in 0..10_000 {
            edges.push((rng.random_range(0..500u64), rng.random_range(0..300u64)));
        }
        // Brute-force reference degrees from the deduplicated pair set.
        let uniq: std::collections::HashSet<(u64, u64)> = edges.iter().copied().collect();
        let mut ref_pin: HashMap<u64, usize> = HashMap::new();
        let mut ref_ctx: HashMap<u64, usize> = HashMap::new();
        for &(p, c) in &uniq {
            *ref_pin.entry(p).or_default() += 1;
            *ref_ctx.entry(c).or_default() += 1;
        }

        let g = BipartiteGraph::from_edges(7, &edges).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("edges.tsv");
        g.save_edges(&path).unwrap();
        let g2 = load_edges(&path, 7).unwrap();

        for g in [&g, &g2] {
            assert_eq!(g.edge_count(), uniq.len());
            for (i, &id) in g.pin_ids().iter().enumerate() {
                assert_eq!(g.pin_degree(i), ref_pin[&id], "pin {id}");
            }
            for (i, &id) in g.ctx_ids().iter().enumerate() {
                assert_eq!(g.ctx_degree(i), ref_ctx[&id], "ctx {id}");
            }
        }
        assert_eq!(g.edges(), g2.edges());
    }

    #[test]
    fn prune_target_matches_published_parameters() {
        // min(10 * 0.86, 10000) floors to 8.
        let g = star(false, 25);
        let (pruned, report) = g.degree_prune_with_report(&cfg(10, 10_000, 0.86, 1)).unwrap();
        assert_eq!(pruned.pin_degree(0), 8);
        assert_eq!(report.len(), 1);
        assert_eq!(report[0].target, 8);
        assert_eq!(report[0].degree_after_visit, 8);
    }

    #[test]
    fn prune_star_keeps_subset() {
        let g = star(true, 20);
        let pruned = g.degree_prune(&cfg(10, 10_000, 0.5, 9)).unwrap();
        let ci = pruned.ctx_index(1000).unwrap();
        assert_eq!(pruned.ctx_degree(ci), 5);
        let orig: std::collections::HashSet<_> = g.edges().into_iter().collect();
        for e in pruned.edges() {
            assert!(orig.contains(&e));
        }
    }

    #[test]
    fn prune_below_threshold_is_noop() {
        let g = BipartiteGraph::from_edges(0, &[(1, 10), (1, 11), (2, 10)]).unwrap();
        let pruned = g.degree_prune(&cfg(10, 100, 0.5, 3)).unwrap();
        assert_eq!(pruned.edges(), g.edges());
    }

    #[test]
    fn prune_is_seed_deterministic() {
        let g = star(false, 40);
        let a = g.degree_prune(&cfg(5, 100, 0.8, 11)).unwrap();
        let b = g.degree_prune(&cfg(5, 100, 0.8, 11)).unwrap();
        let c = g.degree_prune(&cfg(5, 100, 0.8, 12)).unwrap();
        assert_eq!(a.edges(), b.edges());
        // Different seed: same pruned degree, generally different edges.
        assert_eq!(c.pin_degree(0), a.pin_degree(0));
        assert_ne!(a.edges(), c.edges());
    }

    #[test]
    fn prune_preserves_symmetry() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let mut edges = Vec::new();
        for _ in 0..2000 {
            edges.push((rng.random_range(0..60u64), rng.random_range(0..40u64)));
        }
        let g = BipartiteGraph::from_edges(0, &edges).unwrap();
        let pruned = g.degree_prune(&cfg(4, 20, 0.75, 17)).unwrap();
        for pi in 0..pruned.num_pins() {
            for &ci in pruned.pin_neighbors(pi) {
                assert!(pruned.ctx_neighbors(ci as usize).contains(&(pi as u32)));
            }
        }
        let total: usize = (0..pruned.num_ctx()).map(|c| pruned.ctx_degree(c)).sum();
        assert_eq!(total, pruned.edge_count());
    }

    #[test]
    fn degree_scaled_rule() {
        let c = PruneConfig {
            rule: PruneRule::DegreeScaled,
            ..cfg(10, 18, 0.5, 0)
        };
        assert_eq!(c.target_degree(25), 12);
        assert_eq!(c.target_degree(50), 18); // capped by b
    }
}
