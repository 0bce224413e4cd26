//! End-to-end orchestration: corpus -> prune -> walks -> train -> eval,
//! every stage reading its inputs back from disk so running the stages by
//! hand with the same config produces byte-identical artifacts.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::checkpoint::CheckpointError;
use crate::config::{ConfigError, Manifest, PipelineConfig};
use crate::eval::{self, EvalError};
use crate::features::{FeatureError, FeatureStore};
use crate::graph::{self, GraphError};
use crate::model::{BatchInputs, Dropout, ModelConfig, ModelError, ModelParams, ParamNodes, PinContext, embed_batch};
use crate::nn::{NnError, Tape};
use crate::synth::{self, SynthError};
use crate::train::{self, TrainError, TrainState};
use crate::walk::{self, NeighborTable, WalkError};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Walk(#[from] WalkError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("pipeline: {0}")]
    Other(String),
}

/// Directory layout under --out-dir. Stages communicate only through
/// these paths.
pub mod layout {
    pub const CORPUS_DIR: &str = "corpus";
    pub const PRUNED_DIR: &str = "pruned";
    pub const WALKS_DIR: &str = "walks";
    pub const TRAIN_DIR: &str = "train";
    pub const EVAL_DIR: &str = "eval";
    pub const NEIGHBORS_FILE: &str = "neighbors.tsv";
    pub const INIT_STATE_FILE: &str = "init.bsck";
    pub const MODEL_FILE: &str = "model.bsck";
    pub const METRICS_FILE: &str = "metrics.tsv";
    pub const RECALL_FILE: &str = "recall.tsv";
    pub const REPORT_FILE: &str = "report.tsv";
    pub const RANKS_FILE: &str = "ranks.tsv";
    pub const MANIFEST_FILE: &str = "manifest.json";
    pub const ABLATION_FILE: &str = "ablation.tsv";
}

pub fn stage_synth(cfg: &PipelineConfig, out: &Path) -> Result<(), PipelineError> {
    let corpus = synth::gen_corpus(&cfg.synth)?;
    synth::write_corpus(&corpus, out.join(layout::CORPUS_DIR))?;
    Ok(())
}

pub fn stage_prune(cfg: &PipelineConfig, out: &Path) -> Result<(), PipelineError> {
    let pruned_dir = out.join(layout::PRUNED_DIR);
    std::fs::create_dir_all(&pruned_dir)?;
    for g in 0..cfg.synth.num_graphs {
        let name = synth::edge_file_name(g);
        let graph = graph::load_edges(out.join(layout::CORPUS_DIR).join(&name), g as u32)?;
        let pruned = graph.degree_prune(&cfg.prune)?;
        pruned.save_edges(pruned_dir.join(&name))?;
    }
    Ok(())
}

pub fn stage_walk(cfg: &PipelineConfig, out: &Path) -> Result<(), PipelineError> {
    let walks_dir = out.join(layout::WALKS_DIR);
    std::fs::create_dir_all(&walks_dir)?;
    let mut table = NeighborTable::new();
    for g in 0..cfg.synth.num_graphs {
        let name = synth::edge_file_name(g);
        let graph = graph::load_edges(out.join(layout::PRUNED_DIR).join(&name), g as u32)?;
        let starts = graph.pin_ids().to_vec();
        table.merge(walk::run_walks(&graph, &starts, &cfg.walk)?);
    }
    table.save(walks_dir.join(layout::NEIGHBORS_FILE))?;
    Ok(())
}

/// Embed each id once (walk neighbors, masks, forward pass) and return a
/// lookup map. Chunked so tapes stay small; chunks run in parallel.
pub fn embed_pins(
    ids: &[u64],
    params: &ModelParams,
    model_cfg: &ModelConfig,
    features: &FeatureStore,
    table: &NeighborTable,
    graph_ids: &[u32],
) -> Result<HashMap<u64, Vec<f64>>, PipelineError> {
    const CHUNK: usize = 256;
    let chunks: Vec<&[u64]> = ids.chunks(CHUNK).collect();
    let parts: Vec<Vec<(u64, Vec<f64>)>> = chunks
        .par_iter()
        .map(|chunk| -> Result<Vec<(u64, Vec<f64>)>, PipelineError> {
            let ctxs: Vec<PinContext> = chunk
                .iter()
                .map(|&id| PinContext::build(id, graph_ids, model_cfg, features, table))
                .collect::<Result<_, _>>()?;
            let inputs = BatchInputs::build(&ctxs, model_cfg);
            let mut tape = Tape::new();
            let pn = ParamNodes::load(&mut tape, params);
            let node = embed_batch(&mut tape, &pn, model_cfg, &inputs, &mut Dropout::off())?;
            let d = model_cfg.d;
            let values = tape.value(node);
            Ok(chunk
                .iter()
                .enumerate()
                .map(|(i, &id)| (id, values[i * d..(i + 1) * d].to_vec()))
                .collect())
        })
        .collect::<Result<_, _>>()?;
    let mut map = HashMap::new();
    for part in parts {
        for (id, v) in part {
            map.insert(id, v);
        }
    }
    Ok(map)
}

struct LoadedData {
    features: FeatureStore,
    table: NeighborTable,
    train_pairs: Vec<(u64, u64)>,
    test_pairs: Vec<(u64, u64)>,
    catalog: Vec<u64>,
}

fn load_data(out: &Path) -> Result<LoadedData, PipelineError> {
    let corpus = out.join(layout::CORPUS_DIR);
    let features = FeatureStore::load(corpus.join(synth::FEATURES_FILE))?;
    let table = NeighborTable::load(out.join(layout::WALKS_DIR).join(layout::NEIGHBORS_FILE))?;
    let train_pairs = synth::load_pairs(corpus.join(synth::TRAIN_PAIRS_FILE))?;
    let test_pairs = synth::load_pairs(corpus.join(synth::TEST_PAIRS_FILE))?;
    let mut catalog = features.ids().to_vec();
    catalog.sort_unstable();
    Ok(LoadedData { features, table, train_pairs, test_pairs, catalog })
}

fn eval_recall(
    state: &TrainState,
    features: &FeatureStore,
    table: &NeighborTable,
    pairs: &[(u64, u64)],
    catalog: &[u64],
    cfg: &PipelineConfig,
    model_cfg: &ModelConfig,
    graph_ids: &[u32],
) -> Result<(f64, Vec<usize>), PipelineError> {
    let pool = eval::sample_pool(catalog, &cfg.eval);
    let mut ids: Vec<u64> = pool.clone();
    for &(q, e) in pairs {
        ids.push(q);
        ids.push(e);
    }
    ids.sort_unstable();
    ids.dedup();
    let embs = embed_pins(&ids, &state.params, model_cfg, features, table, graph_ids)?;
    let lookup = |id: u64| embs.get(&id).cloned();
    let ranks = eval::pair_ranks(pairs, &lookup, &pool)?;
    let hits = ranks.iter().filter(|&&r| r <= cfg.eval.k).count();
    Ok((hits as f64 / ranks.len() as f64, ranks))
}

/// Train on the graphs in `graph_ids`, writing the initial state, final
/// state, metrics TSV, and (when eval_every is set) a recall TSV under
/// `train_dir`. Returns the final state and the last total loss.
/// `resume_from` continues a saved state instead of a fresh init;
/// `pause_at` stops early (the saved state can be resumed later).
pub fn stage_train(
    cfg: &PipelineConfig,
    out: &Path,
    graph_ids: &[u32],
    train_dir: &Path,
    resume_from: Option<&Path>,
    pause_at: Option<u64>,
) -> Result<(TrainState, f64), PipelineError> {
    let data = load_data(out)?;
    let model_cfg = model_for_subset(&cfg.model, graph_ids);
    std::fs::create_dir_all(train_dir)?;

    let mut state = match resume_from {
        Some(path) => train::load_state(path, &model_cfg)?,
        None => {
            let state = TrainState::new(&model_cfg, &cfg.train)?;
            train::save_state(&state, train_dir.join(layout::INIT_STATE_FILE))?;
            state
        }
    };

    let mut recall_hook;
    let hook: Option<&mut dyn FnMut(u64, &TrainState) -> Result<f64, TrainError>> =
        if cfg.train.eval_every > 0 {
            recall_hook = |_step: u64, st: &TrainState| -> Result<f64, TrainError> {
                let (recall, _) = eval_recall(
                    st,
                    &data.features,
                    &data.table,
                    &data.test_pairs,
                    &data.catalog,
                    cfg,
                    &model_cfg,
                    graph_ids,
                )
                .map_err(|e| TrainError::Config(e.to_string()))?;
                Ok(recall)
            };
            Some(&mut recall_hook)
        } else {
            None
        };

    let (metrics, recall_rows) = train::fit(
        &mut state,
        &data.train_pairs,
        &data.table,
        &data.features,
        &data.catalog,
        graph_ids,
        &model_cfg,
        &cfg.train,
        pause_at,
        hook,
    )?;

    let mut buf = Vec::new();
    train::write_metrics_tsv(&metrics, &mut buf)?;
    std::fs::write(train_dir.join(layout::METRICS_FILE), buf)?;
    if cfg.train.eval_every > 0 {
        let mut buf = Vec::new();
        train::write_recall_tsv(&recall_rows, &mut buf)?;
        std::fs::write(train_dir.join(layout::RECALL_FILE), buf)?;
    }
    train::save_state(&state, train_dir.join(layout::MODEL_FILE))?;
    let final_loss = metrics.last().map(|m| m.loss_total).unwrap_or(f64::NAN);
    Ok((state, final_loss))
}

/// File-level evaluation job: every input and output named explicitly so
/// the CLI can point it at arbitrary pair files and checkpoints.
pub struct EvalJob {
    pub features: PathBuf,
    pub neighbors: PathBuf,
    pub pairs: PathBuf,
    pub state: PathBuf,
    pub report: PathBuf,
    pub ranks: Option<PathBuf>,
}

pub fn eval_files(
    cfg: &PipelineConfig,
    graph_ids: &[u32],
    job: &EvalJob,
) -> Result<f64, PipelineError> {
    let features = FeatureStore::load(&job.features)?;
    let table = NeighborTable::load(&job.neighbors)?;
    let pairs = synth::load_pairs(&job.pairs)?;
    let mut catalog = features.ids().to_vec();
    catalog.sort_unstable();

    let model_cfg = model_for_subset(&cfg.model, graph_ids);
    let state = train::load_state(&job.state, &model_cfg)?;
    let (recall, ranks) =
        eval_recall(&state, &features, &table, &pairs, &catalog, cfg, &model_cfg, graph_ids)?;

    let metrics = vec![
        (format!("recall_at_{}", cfg.eval.k), recall),
        ("pairs".to_string(), pairs.len() as f64),
        ("pool_size".to_string(), cfg.eval.pool_size.min(catalog.len()) as f64),
    ];
    if let Some(dir) = job.report.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut buf = Vec::new();
    eval::write_report(&metrics, &mut buf)?;
    std::fs::write(&job.report, buf)?;
    if let Some(ranks_path) = &job.ranks {
        if let Some(dir) = ranks_path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut buf = Vec::new();
        eval::write_ranks(&pairs, &ranks, &mut buf)?;
        std::fs::write(ranks_path, buf)?;
    }
    Ok(recall)
}

/// Evaluate a stored state on the held-out pairs in the standard layout;
/// writes report.tsv and optionally the per-pair ranks. Returns recall@k.
pub fn stage_eval(
    cfg: &PipelineConfig,
    out: &Path,
    state_path: &Path,
    graph_ids: &[u32],
    eval_dir: &Path,
    dump_ranks: bool,
) -> Result<f64, PipelineError> {
    let corpus = out.join(layout::CORPUS_DIR);
    let job = EvalJob {
        features: corpus.join(synth::FEATURES_FILE),
        neighbors: out.join(layout::WALKS_DIR).join(layout::NEIGHBORS_FILE),
        pairs: corpus.join(synth::TEST_PAIRS_FILE),
        state: state_path.to_path_buf(),
        report: eval_dir.join(layout::REPORT_FILE),
        ranks: dump_ranks.then(|| eval_dir.join(layout::RANKS_FILE)),
    };
    eval_files(cfg, graph_ids, &job)
}

/// Model config for a graph subset: same tower dimensions, k graphs.
pub fn model_for_subset(model: &ModelConfig, graph_ids: &[u32]) -> ModelConfig {
    let mut cfg = model.clone();
    cfg.k = graph_ids.len();
    cfg
}

pub struct PipelineReport {
    pub recall: f64,
    pub final_loss: f64,
    pub manifest_path: PathBuf,
}

/// The full run: corpus, prune, walks, train, eval, manifest.
pub fn run_pipeline(cfg: &PipelineConfig, out: &Path) -> Result<PipelineReport, PipelineError> {
    cfg.validate()?;
    std::fs::create_dir_all(out)?;
    stage_synth(cfg, out)?;
    stage_prune(cfg, out)?;
    stage_walk(cfg, out)?;

    let graph_ids: Vec<u32> = (0..cfg.synth.num_graphs as u32).collect();
    let train_dir = out.join(layout::TRAIN_DIR);
    let (_, final_loss) = stage_train(cfg, out, &graph_ids, &train_dir, None, None)?;
    let eval_dir = out.join(layout::EVAL_DIR);
    let recall = stage_eval(
        cfg,
        out,
        &train_dir.join(layout::MODEL_FILE),
        &graph_ids,
        &eval_dir,
        false,
    )?;

    let mut manifest = Manifest::new(cfg);
    for g in 0..cfg.synth.num_graphs {
        let name = synth::edge_file_name(g);
        manifest.record(&format!("graph_{g}_edges"), &format!("{}/{name}", layout::CORPUS_DIR));
        manifest.record(&format!("graph_{g}_pruned"), &format!("{}/{name}", layout::PRUNED_DIR));
    }
    manifest.record("features", &format!("{}/{}", layout::CORPUS_DIR, synth::FEATURES_FILE));
    manifest.record("train_pairs", &format!("{}/{}", layout::CORPUS_DIR, synth::TRAIN_PAIRS_FILE));
    manifest.record("test_pairs", &format!("{}/{}", layout::CORPUS_DIR, synth::TEST_PAIRS_FILE));
    manifest.record("neighbors", &format!("{}/{}", layout::WALKS_DIR, layout::NEIGHBORS_FILE));
    manifest.record("init_state", &format!("{}/{}", layout::TRAIN_DIR, layout::INIT_STATE_FILE));
    manifest.record("model", &format!("{}/{}", layout::TRAIN_DIR, layout::MODEL_FILE));
    manifest.record("metrics", &format!("{}/{}", layout::TRAIN_DIR, layout::METRICS_FILE));
    if cfg.train.eval_every > 0 {
        manifest.record("train_recall", &format!("{}/{}", layout::TRAIN_DIR, layout::RECALL_FILE));
    }
    manifest.record("eval_report", &format!("{}/{}", layout::EVAL_DIR, layout::REPORT_FILE));
    let manifest_path = out.join(layout::MANIFEST_FILE);
    manifest.save(&manifest_path)?;

    Ok(PipelineReport { recall, final_loss, manifest_path })
}

/// "0,1,2" -> [0, 1, 2]; rejects empties, junk, duplicates, out-of-range.
pub fn parse_graph_subset(text: &str, num_graphs: usize) -> Result<Vec<u32>, PipelineError> {
    let mut ids = Vec::new();
    for part in text.split(',') {
        let id: u32 = part
            .trim()
            .parse()
            .map_err(|_| PipelineError::Other(format!("bad graph id {part:?} in {text:?}")))?;
        if id as usize >= num_graphs {
            return Err(PipelineError::Other(format!(
                "graph id {id} out of range; corpus has {num_graphs} graphs"
            )));
        }
        if ids.contains(&id) {
            return Err(PipelineError::Other(format!("graph id {id} repeats in {text:?}")));
        }
        ids.push(id);
    }
    if ids.is_empty() {
        return Err(PipelineError::Other("empty graph subset".into()));
    }
    Ok(ids)
}

pub fn subset_label(ids: &[u32]) -> String {
    ids.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(",")
}

/// Train and evaluate once per graph subset on a shared corpus and shared
/// walks; one TSV row per subset.
pub fn run_ablation(
    cfg: &PipelineConfig,
    out: &Path,
    subsets: &[Vec<u32>],
) -> Result<Vec<(String, f64)>, PipelineError> {
    cfg.validate()?;
    if subsets.is_empty() {
        return Err(PipelineError::Other("no graph subsets given".into()));
    }
    std::fs::create_dir_all(out)?;
    stage_synth(cfg, out)?;
    stage_prune(cfg, out)?;
    stage_walk(cfg, out)?;

    let mut rows = Vec::new();
    for ids in subsets {
        let label = subset_label(ids);
        let dir_label = label.replace(',', "_");
        let train_dir = out.join("ablate").join(format!("g{dir_label}")).join(layout::TRAIN_DIR);
        let eval_dir = out.join("ablate").join(format!("g{dir_label}")).join(layout::EVAL_DIR);
        stage_train(cfg, out, ids, &train_dir, None, None)?;
        let recall = stage_eval(
            cfg,
            out,
            &train_dir.join(layout::MODEL_FILE),
            ids,
            &eval_dir,
            false,
        )?;
        rows.push((label, recall));
    }

    let mut buf = String::new();
    buf.push_str(&format!("graphs\trecall_at_{}\n", cfg.eval.k));
    for (label, recall) in &rows {
        buf.push_str(&format!("{label}\t{recall}\n"));
    }
    std::fs::write(out.join(layout::ABLATION_FILE), buf)?;
    Ok(rows)
}
