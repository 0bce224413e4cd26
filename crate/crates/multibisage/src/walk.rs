//! Restart random walks producing per-pin top-k visited neighbors.
//!
//! Each start pin runs `nw` independent segments. A segment repeatedly
//! hops to a uniformly random neighbor, counts the landing node if it is
//! pin-side and not the start, then ends with probability alpha. The RNG
//! stream for a start pin depends only on (seed, pin id, graph id), so
//! results are identical for any worker count.

use std::collections::{BTreeMap, HashMap};
use std::io::{self, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::BipartiteGraph;
use crate::seeds;

#[derive(Debug, Error)]
pub enum WalkError {
    #[error("invalid walk config: {0}")]
    BadConfig(String),
    #[error("unknown start pin {0}")]
    UnknownStart(u64),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WalkConfig {
    /// Walk segments per start pin.
    pub nw: u64,
    /// Per-step reset probability in (0, 1].
    pub alpha: f64,
    pub top_k: usize,
    pub seed: u64,
}

impl WalkConfig {
    pub fn validate(&self) -> Result<(), WalkError> {
        if self.nw < 1 {
            return Err(WalkError::BadConfig("nw must be >= 1".into()));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(WalkError::BadConfig("alpha must be in (0, 1]".into()));
        }
        if self.top_k < 1 {
            return Err(WalkError::BadConfig("top_k must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NeighborEntry {
    pub neighbor_id: u64,
    pub visits: u64,
}

/// Per (pin, graph): top visited pin neighbors, sorted by visit count
/// descending then id ascending.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct NeighborTable {
    entries: HashMap<(u64, u32), Vec<NeighborEntry>>,
}

impl NeighborTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, pin: u64, graph: u32, list: Vec<NeighborEntry>) {
        self.entries.insert((pin, graph), list);
    }

    /// Empty slice when the pin was never walked or had nothing to visit.
    pub fn neighbors(&self, pin: u64, graph: u32) -> &[NeighborEntry] {
        self.entries.get(&(pin, graph)).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Absorb another table; colliding (pin, graph) keys take `other`'s list.
    pub fn merge(&mut self, other: NeighborTable) {
        self.entries.extend(other.entries);
    }

    /// Rows sorted by (pin, graph, rank); rank starts at 1.
    pub fn write_tsv<W: Write>(&self, w: &mut W) -> io::Result<()> {
        let mut keys: Vec<&(u64, u32)> = self.entries.keys().collect();
        keys.sort_unstable();
        for &&(pin, graph) in &keys {
            for (i, e) in self.entries[&(pin, graph)].iter().enumerate() {
                writeln!(w, "{pin}\t{graph}\t{}\t{}\t{}", i + 1, e.neighbor_id, e.visits)?;
            }
        }
        Ok(())
    }

    pub fn save<P: AsRef<Path>>(&self, path: P) -> Result<(), WalkError> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        self.write_tsv(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load<P: AsRef<Path>>(path: P) -> Result<Self, WalkError> {
        let bytes = std::fs::read(path)?;
        parse_neighbor_table(&bytes)
    }
}

/// Parse `pin<TAB>graph<TAB>rank<TAB>neighbor<TAB>visits` rows. Rows of
/// one (pin, graph) must be contiguous with ranks 1..len and keep the
/// count-descending id-ascending order; violations are data errors.
pub fn parse_neighbor_table(bytes: &[u8]) -> Result<NeighborTable, WalkError> {
    let mut table = NeighborTable::new();
    let mut open: Option<((u64, u32), Vec<NeighborEntry>)> = None;

    fn close(table: &mut NeighborTable, open: &mut Option<((u64, u32), Vec<NeighborEntry>)>) {
        if let Some((key, list)) = open.take() {
            table.entries.insert(key, list);
        }
    }

    for (i, raw) in bytes.split(|&b| b == b'\n').enumerate() {
        let line = i + 1;
        let raw = raw.strip_suffix(b"\r").unwrap_or(raw);
        if raw.is_empty() {
            continue;
        }
        let text = std::str::from_utf8(raw).map_err(|_| WalkError::Parse {
            line,
            msg: "invalid UTF-8".into(),
        })?;
        let mut fields = text.split('\t');
        let mut next = |what: &str| {
            fields.next().ok_or_else(|| WalkError::Parse {
                line,
                msg: format!("missing {what}"),
            })
        };
        let pin = parse_u64(next("pin id")?, "pin id", line)?;
        let graph = parse_u64(next("graph id")?, "graph id", line)?;
        let graph = u32::try_from(graph).map_err(|_| WalkError::Parse {
            line,
            msg: format!("graph id {graph} out of range"),
        })?;
        let rank = parse_u64(next("rank")?, "rank", line)? as usize;
        let neighbor_id = parse_u64(next("neighbor id")?, "neighbor id", line)?;
        let visits = parse_u64(next("visits")?, "visits", line)?;
        if fields.next().is_some() {
            return Err(WalkError::Parse {
                line,
                msg: "expected exactly 5 fields".into(),
            });
        }
        if visits == 0 {
            return Err(WalkError::Parse {
                line,
                msg: "visits must be positive".into(),
            });
        }

        let key = (pin, graph);
        match &mut open {
            Some((k, list)) if *k == key => {
                if rank != list.len() + 1 {
                    return Err(WalkError::Parse {
                        line,
                        msg: format!("expected rank {}, got {rank}", list.len() + 1),
                    });
                }
                let prev = *list.last().expect("open block is never empty");
                let ordered = visits < prev.visits
                    || (visits == prev.visits && neighbor_id > prev.neighbor_id);
                if !ordered {
                    return Err(WalkError::Parse {
                        line,
                        msg: "rows violate (visits desc, id asc) order".into(),
                    });
                }
                list.push(NeighborEntry { neighbor_id, visits });
            }
            _ => {
                if rank != 1 {
                    return Err(WalkError::Parse {
                        line,
                        msg: format!("new (pin, graph) block must start at rank 1, got {rank}"),
                    });
                }
                close(&mut table, &mut open);
                if table.entries.contains_key(&key) {
                    return Err(WalkError::Parse {
                        line,
                        msg: format!("rows for pin {pin} graph {graph} are not contiguous"),
                    });
                }
                open = Some((key, vec![NeighborEntry { neighbor_id, visits }]));
            }
        }
    }
    close(&mut table, &mut open);
    Ok(table)
}

fn parse_u64(s: &str, what: &str, line: usize) -> Result<u64, WalkError> {
    s.parse::<u64>().map_err(|_| WalkError::Parse {
        line,
        msg: format!("bad {what} {s:?}"),
    })
}

/// Run restart walks from every start pin, in parallel over starts.
pub fn run_walks(
    g: &BipartiteGraph,
    starts: &[u64],
    cfg: &WalkConfig,
) -> Result<NeighborTable, WalkError> {
    cfg.validate()?;
    let start_idx: Vec<(u64, usize)> = starts
        .iter()
        .map(|&id| g.pin_index(id).map(|i| (id, i)).ok_or(WalkError::UnknownStart(id)))
        .collect::<Result<_, _>>()?;

    let lists: Vec<((u64, u32), Vec<NeighborEntry>)> = start_idx
        .par_iter()
        .map(|&(pin_id, pi)| {
            let list = walk_one(g, pin_id, pi, cfg);
            ((pin_id, g.graph_id()), list)
        })
        .collect();

    let mut table = NeighborTable::new();
    table.entries.extend(lists);
    Ok(table)
}

fn walk_one(g: &BipartiteGraph, pin_id: u64, pi: usize, cfg: &WalkConfig) -> Vec<NeighborEntry> {
    if g.pin_degree(pi) == 0 {
        return Vec::new();
    }
    let mut rng = seeds::rng(cfg.seed, seeds::tags::WALK, g.graph_id() as u64, pin_id);
    let mut visits = vec![0u64; g.num_pins()];
    let start = pi as u32;

    for _ in 0..cfg.nw {
        let mut on_pin_side = true;
        let mut cur = start;
        loop {
            let nbrs = if on_pin_side {
                g.pin_neighbors(cur as usize)
            } else {
                g.ctx_neighbors(cur as usize)
            };
            // Mid-walk nodes always have the edge we arrived by.
            debug_assert!(!nbrs.is_empty());
            cur = nbrs[rng.random_range(0..nbrs.len())];
            on_pin_side = !on_pin_side;
            if on_pin_side && cur != start {
                visits[cur as usize] += 1;
            }
            if rng.random_bool(cfg.alpha) {
                break;
            }
        }
    }

    let mut list: Vec<NeighborEntry> = visits
        .iter()
        .enumerate()
        .filter(|&(_, &v)| v > 0)
        .map(|(i, &v)| NeighborEntry {
            neighbor_id: g.pin_id(i),
            visits: v,
        })
        .collect();
    list.sort_unstable_by(|a, b| {
        b.visits.cmp(&a.visits).then(a.neighbor_id.cmp(&b.neighbor_id))
    });
    list.truncate(cfg.top_k);
    list
}

/// Exact expected visits per segment for every pin reachable from `p`:
/// sum over t >= 1 of (1-alpha)^(t-1) * [P^t]_{p, .} restricted to the
/// pin side, excluding p itself. Truncated once the geometric tail mass
/// (1-alpha)^T / alpha drops below `tol`.
pub fn exact_visit_distribution(
    g: &BipartiteGraph,
    p: u64,
    alpha: f64,
    tol: f64,
) -> Result<BTreeMap<u64, f64>, WalkError> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(WalkError::BadConfig("alpha must be in (0, 1]".into()));
    }
    if tol <= 0.0 {
        return Err(WalkError::BadConfig("tol must be > 0".into()));
    }
    let pi = g.pin_index(p).ok_or(WalkError::UnknownStart(p))?;
    let np = g.num_pins();
    let nc = g.num_ctx();
    if g.pin_degree(pi) == 0 {
        return Ok(BTreeMap::new());
    }

    // Node index space: pins 0..np, ctx np..np+nc.
    let mut dist = vec![0.0f64; np + nc];
    dist[pi] = 1.0;
    let mut expected = vec![0.0f64; np];
    let mut survival = 1.0; // (1-alpha)^(t-1)
    let mut t = 0u32;
    loop {
        t += 1;
        let mut next = vec![0.0f64; np + nc];
        for (u, &mass) in dist.iter().enumerate() {
            if mass == 0.0 {
                continue;
            }
            let (nbrs, offset) = if u < np {
                (g.pin_neighbors(u), np)
            } else {
                (g.ctx_neighbors(u - np), 0)
            };
            let share = mass / nbrs.len() as f64;
            for &v in nbrs {
                next[v as usize + offset] += share;
            }
        }
        dist = next;
        for (i, e) in expected.iter_mut().enumerate() {
            if i != pi {
                *e += survival * dist[i];
            }
        }
        survival *= 1.0 - alpha;
        // Tail mass after t steps: (1-alpha)^t / alpha.
        if survival / alpha < tol {
            break;
        }
        if t > 100_000 {
            return Err(WalkError::BadConfig(
                "tolerance unreachable; alpha too small".into(),
            ));
        }
    }

    Ok(expected
        .iter()
        .enumerate()
        .filter(|&(_, &e)| e > 0.0)
        .map(|(i, &e)| (g.pin_id(i), e))
        .collect())
}
