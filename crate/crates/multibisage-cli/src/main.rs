//! `multibisage` binary: each subcommand runs one pipeline stage against
//! the standard --out-dir layout; `pipeline` chains them all. Exit codes:
//! 0 success, 1 usage error, 2 data error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use multibisage::config::{self, PipelineConfig};
use multibisage::graph::{self, PruneConfig};
use multibisage::pipeline::{self, layout, EvalJob};
use multibisage::synth;
use multibisage::walk::{self, WalkConfig};

#[derive(Debug)]
enum CliError {
    Usage(String),
    Data(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Data(m) => write!(f, "{m}"),
        }
    }
}

impl<E: Into<pipeline::PipelineError>> From<E> for CliError {
    fn from(e: E) -> Self {
        CliError::Data(e.into().to_string())
    }
}

#[derive(Parser)]
#[command(name = "multibisage", version, about = "Multi-graph pin embedding pipeline")]
struct Cli {
    /// JSON config file; wins over --preset.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Built-in config: "desk" (small, minutes on a laptop) or "prod"
    /// (production dimensions, shape checks only).
    #[arg(long, global = true, value_name = "NAME")]
    preset: Option<String>,
    /// Root directory for artifacts.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    out_dir: PathBuf,
    /// Master seed; overrides the config's seed and reseeds every stage.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic corpus under OUT_DIR/corpus.
    GenSynth,
    /// Load an edge list, optionally degree-prune it, write it back in
    /// canonical order.
    BuildGraph(BuildGraphArgs),
    /// Degree-prune every corpus graph into OUT_DIR/pruned.
    Prune,
    /// Run restart walks. With --graph: one file in, one table out.
    /// Without: every pruned corpus graph into OUT_DIR/walks.
    Walk(WalkArgs),
    /// Train the embedding tower on the corpus.
    Train(TrainArgs),
    /// Recall@k of a stored model state against a distractor pool.
    Eval(EvalArgs),
    /// Train/eval once per graph subset and tabulate recall.
    Ablate(AblateArgs),
    /// gen-synth, prune, walk, train, eval, manifest - one call.
    Pipeline,
    /// Parse, validate, and print the resolved config.
    ShowConfig,
}

#[derive(Args)]
struct BuildGraphArgs {
    #[arg(long, value_name = "PATH")]
    edges: PathBuf,
    #[arg(long, default_value_t = 0)]
    graph_id: u32,
    /// a,b,p: degrees above a are cut to floor(min(a*p, b)).
    #[arg(long, value_name = "A,B,P")]
    prune: Option<String>,
    #[arg(long, value_name = "PATH")]
    out: PathBuf,
}

#[derive(Args)]
struct WalkArgs {
    /// Edge list to walk (standalone mode).
    #[arg(long, value_name = "PATH")]
    graph: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    graph_id: u32,
    /// Walk segments per start pin.
    #[arg(long)]
    nw: Option<u64>,
    /// Restart probability per step.
    #[arg(long)]
    alpha: Option<f64>,
    /// Neighbors kept per pin.
    #[arg(long)]
    top_k: Option<usize>,
    /// Output table (standalone mode); default OUT_DIR/walks/neighbors.tsv.
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Train only these graphs, e.g. "0" or "0,2".
    #[arg(long, value_name = "IDS")]
    graphs: Option<String>,
    /// Continue from a saved state instead of a fresh init.
    #[arg(long, value_name = "PATH")]
    resume_from: Option<PathBuf>,
    /// Stop after this step and save; resumable later.
    #[arg(long, value_name = "STEP")]
    pause_at: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    /// Model state to evaluate; default OUT_DIR/train/model.bsck.
    #[arg(long, value_name = "PATH")]
    checkpoint: Option<PathBuf>,
    /// Pairs TSV; default OUT_DIR/corpus/test_pairs.tsv.
    #[arg(long, value_name = "PATH")]
    pairs: Option<PathBuf>,
    /// Features file; default OUT_DIR/corpus/features.bsft.
    #[arg(long, value_name = "PATH")]
    features: Option<PathBuf>,
    /// Neighbor table; default OUT_DIR/walks/neighbors.tsv.
    #[arg(long, value_name = "PATH")]
    neighbors: Option<PathBuf>,
    #[arg(long)]
    pool_size: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    /// Evaluate these graphs, e.g. "0,1"; default all.
    #[arg(long, value_name = "IDS")]
    graphs: Option<String>,
    /// Also write per-pair ranks here.
    #[arg(long, value_name = "PATH")]
    dump_ranks: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    /// Graph subset, repeatable: --graphs 0 --graphs 0,1,2
    #[arg(long, required = true, value_name = "IDS")]
    graphs: Vec<String>,
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, CliError> {
    let mut cfg = match (&cli.config, &cli.preset) {
        (Some(path), _) => PipelineConfig::load(path)
            .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?,
        (None, Some(name)) => config::preset(name)
            .map_err(|e| CliError::Usage(e.to_string()))?,
        (None, None) => config::desk_preset(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = Some(s);
        cfg.resolve_seeds();
    }
    cfg.validate().map_err(|e| CliError::Data(e.to_string()))?;
    Ok(cfg)
}

fn parse_prune_triple(text: &str, seed: u64) -> Result<PruneConfig, CliError> {
    let parts: Vec<&str> = text.split(',').collect();
    if parts.len() != 3 {
        return Err(CliError::Usage(format!("--prune wants a,b,p, got {text:?}")));
    }
    let a: u64 = parts[0]
        .trim()
        .parse()
        .map_err(|_| CliError::Usage(format!("--prune: bad a {:?}", parts[0])))?;
    let b: u64 = parts[1]
        .trim()
        .parse()
        .map_err(|_| CliError::Usage(format!("--prune: bad b {:?}", parts[1])))?;
    let p: f64 = parts[2]
        .trim()
        .parse()
        .map_err(|_| CliError::Usage(format!("--prune: bad p {:?}", parts[2])))?;
    let cfg = PruneConfig { min_degree: a, max_degree: b, prune_factor: p, seed, rule: Default::default() };
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(cfg)
}

fn subset_or_all(text: Option<&str>, num_graphs: usize) -> Result<Vec<u32>, CliError> {
    match text {
        Some(t) => pipeline::parse_graph_subset(t, num_graphs)
            .map_err(|e| CliError::Usage(e.to_string())),
        None => Ok((0..num_graphs as u32).collect()),
    }
}

fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.cmd {
        Cmd::GenSynth => {
            let cfg = load_config(cli)?;
            pipeline::stage_synth(&cfg, &cli.out_dir)?;
            println!("corpus\t{}", cli.out_dir.join(layout::CORPUS_DIR).display());
        }
        Cmd::BuildGraph(args) => {
            let mut g = graph::load_edges(&args.edges, args.graph_id)?;
            if let Some(triple) = &args.prune {
                let prune_cfg = parse_prune_triple(triple, cli.seed.unwrap_or(0))?;
                g = g.degree_prune(&prune_cfg)?;
            }
            if let Some(dir) = args.out.parent() {
                if !dir.as_os_str().is_empty() {
                    std::fs::create_dir_all(dir).map_err(pipeline::PipelineError::from)?;
                }
            }
            g.save_edges(&args.out)?;
            println!("pins\t{}", g.num_pins());
            println!("ctx\t{}", g.num_ctx());
            println!("edges\t{}", g.edge_count());
        }
        Cmd::Prune => {
            let cfg = load_config(cli)?;
            pipeline::stage_prune(&cfg, &cli.out_dir)?;
            println!("pruned\t{}", cli.out_dir.join(layout::PRUNED_DIR).display());
        }
        Cmd::Walk(args) => {
            let cfg = load_config(cli)?;
            let mut wcfg: WalkConfig = cfg.walk.clone();
            if let Some(nw) = args.nw {
                wcfg.nw = nw;
            }
            if let Some(alpha) = args.alpha {
                wcfg.alpha = alpha;
            }
            if let Some(top_k) = args.top_k {
                wcfg.top_k = top_k;
            }
            if let Some(path) = &args.graph {
                let g = graph::load_edges(path, args.graph_id)?;
                let starts = g.pin_ids().to_vec();
                let table = walk::run_walks(&g, &starts, &wcfg)?;
                let out = args
                    .out
                    .clone()
                    .unwrap_or_else(|| cli.out_dir.join(layout::WALKS_DIR).join(layout::NEIGHBORS_FILE));
                if let Some(dir) = out.parent() {
                    if !dir.as_os_str().is_empty() {
                        std::fs::create_dir_all(dir).map_err(pipeline::PipelineError::from)?;
                    }
                }
                table.save(&out)?;
                println!("neighbors\t{}", out.display());
            } else {
                let mut cfg = cfg;
                cfg.walk = wcfg;
                pipeline::stage_walk(&cfg, &cli.out_dir)?;
                println!(
                    "neighbors\t{}",
                    cli.out_dir.join(layout::WALKS_DIR).join(layout::NEIGHBORS_FILE).display()
                );
            }
        }
        Cmd::Train(args) => {
            let mut cfg = load_config(cli)?;
            if let Some(steps) = args.steps {
                cfg.train.steps = steps;
            }
            if let Some(b) = args.batch_size {
                cfg.train.batch_size = b;
            }
            let graph_ids = subset_or_all(args.graphs.as_deref(), cfg.synth.num_graphs)?;
            let train_dir = cli.out_dir.join(layout::TRAIN_DIR);
            let (state, final_loss) = pipeline::stage_train(
                &cfg,
                &cli.out_dir,
                &graph_ids,
                &train_dir,
                args.resume_from.as_deref(),
                args.pause_at,
            )?;
            println!("steps\t{}", state.step);
            println!("loss_total\t{final_loss}");
            println!("model\t{}", train_dir.join(layout::MODEL_FILE).display());
        }
        Cmd::Eval(args) => {
            let mut cfg = load_config(cli)?;
            if let Some(p) = args.pool_size {
                cfg.eval.pool_size = p;
            }
            if let Some(k) = args.k {
                cfg.eval.k = k;
            }
            cfg.eval.validate().map_err(|e| CliError::Usage(e.to_string()))?;
            let graph_ids = subset_or_all(args.graphs.as_deref(), cfg.synth.num_graphs)?;
            let corpus = cli.out_dir.join(layout::CORPUS_DIR);
            let eval_dir = cli.out_dir.join(layout::EVAL_DIR);
            let job = EvalJob {
                features: args
                    .features
                    .clone()
                    .unwrap_or_else(|| corpus.join(synth::FEATURES_FILE)),
                neighbors: args
                    .neighbors
                    .clone()
                    .unwrap_or_else(|| cli.out_dir.join(layout::WALKS_DIR).join(layout::NEIGHBORS_FILE)),
                pairs: args
                    .pairs
                    .clone()
                    .unwrap_or_else(|| corpus.join(synth::TEST_PAIRS_FILE)),
                state: args
                    .checkpoint
                    .clone()
                    .unwrap_or_else(|| cli.out_dir.join(layout::TRAIN_DIR).join(layout::MODEL_FILE)),
                report: eval_dir.join(layout::REPORT_FILE),
                ranks: args.dump_ranks.clone(),
            };
            let recall = pipeline::eval_files(&cfg, &graph_ids, &job)?;
            println!("recall_at_{}\t{recall}", cfg.eval.k);
        }
        Cmd::Ablate(args) => {
            let cfg = load_config(cli)?;
            let subsets: Vec<Vec<u32>> = args
                .graphs
                .iter()
                .map(|t| {
                    pipeline::parse_graph_subset(t, cfg.synth.num_graphs)
                        .map_err(|e| CliError::Usage(e.to_string()))
                })
                .collect::<Result<_, _>>()?;
            let rows = pipeline::run_ablation(&cfg, &cli.out_dir, &subsets)?;
            println!("graphs\trecall_at_{}", cfg.eval.k);
            for (label, recall) in rows {
                println!("{label}\t{recall}");
            }
        }
        Cmd::Pipeline => {
            let cfg = load_config(cli)?;
            let report = pipeline::run_pipeline(&cfg, &cli.out_dir)?;
            println!("recall_at_{}\t{}", cfg.eval.k, report.recall);
            println!("loss_total\t{}", report.final_loss);
            println!("manifest\t{}", report.manifest_path.display());
        }
        Cmd::ShowConfig => {
            let cfg = load_config(cli)?;
            println!("{}", cfg.to_json_pretty());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    // Die quietly when the reader of a pipe goes away (show-config | head).
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help and version are not errors
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("multibisage: --threads: {e}");
            return ExitCode::from(1);
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(m)) => {
            eprintln!("multibisage: {m}");
            ExitCode::from(1)
        }
        Err(CliError::Data(m)) => {
            eprintln!("multibisage: {m}");
            ExitCode::from(2)
        }
    }
}
