//! One JSON document drives an experiment: a section per pipeline stage,
//! an optional master seed fanned out to every stage, and a sha256 hash
//! over the resolved document so the manifest pins what actually ran.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::eval::EvalConfig;
use crate::graph::PruneConfig;
use crate::model::{EncoderMode, ModelConfig, Variant};
use crate::seeds::{self, tags};
use crate::synth::SynthConfig;
use crate::train::TrainConfig;
use crate::walk::WalkConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("config: {0}")]
    Invalid(String),
    #[error("config parse: {0}")]
    Parse(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Master seed. When set, every section seed is derived from it so one
    /// knob reseeds the whole experiment; when absent the section seeds
    /// stand as written.
    #[serde(default)]
    pub seed: Option<u64>,
    pub synth: SynthConfig,
    pub prune: PruneConfig,
    pub walk: WalkConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl PipelineConfig {
    /// Fan the master seed out to the sections. Idempotent: resolving
    /// twice with the same master gives the same section seeds.
    pub fn resolve_seeds(&mut self) {
        if let Some(s) = self.seed {
            self.synth.seed = seeds::derive(s, tags::SECTION, 0, 0);
            self.prune.seed = seeds::derive(s, tags::SECTION, 1, 0);
            self.walk.seed = seeds::derive(s, tags::SECTION, 2, 0);
            self.train.seed = seeds::derive(s, tags::SECTION, 3, 0);
            self.eval.seed = seeds::derive(s, tags::SECTION, 4, 0);
        }
    }

    /// The seed recorded in the manifest: the master when set, otherwise
    /// the corpus seed (the first stage everything downstream depends on).
    pub fn effective_seed(&self) -> u64 {
        self.seed.unwrap_or(self.synth.seed)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let err = |m: String| Err(ConfigError::Invalid(m));
        self.synth.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.prune.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.walk.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.model.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.train.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.eval.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.model.k != self.synth.num_graphs {
            return err(format!(
                "model.k = {} but synth.num_graphs = {}",
                self.model.k, self.synth.num_graphs
            ));
        }
        if self.model.d_v != self.synth.d_v || self.model.d_t != self.synth.d_t {
            return err(format!(
                "model feature dims ({}, {}) disagree with synth ({}, {})",
                self.model.d_v, self.model.d_t, self.synth.d_v, self.synth.d_t
            ));
        }
        if self.model.n > self.walk.top_k {
            return err(format!(
                "model.n = {} exceeds walk.top_k = {}; the walker cannot supply that many neighbors",
                self.model.n, self.walk.top_k
            ));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let mut cfg: PipelineConfig = serde_json::from_str(text)?;
        cfg.resolve_seeds();
        Ok(cfg)
    }

    pub fn load<P: AsRef<Path>>(path: P) -> Result<Self, ConfigError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// sha256 over the canonical JSON serialization of the resolved config.
    pub fn sha256(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&bytes);
        let mut hex = String::with_capacity(64);
        for b in digest {
            hex.push_str(&format!("{b:02x}"));
        }
        hex
    }
}

/// Small corpus, small model: a full pipeline run finishes in minutes on a
/// few cores while leaving enough signal that multi-graph training beats a
/// single graph.
pub fn desk_preset() -> PipelineConfig {
    let mut cfg = PipelineConfig {
        seed: Some(0),
        synth: SynthConfig {
            num_pins: 5000,
            num_ctx: 2500,
            num_graphs: 3,
            clusters: 20,
            sub_clusters: 25,
            intra_edge_prob: 0.9,
            macro_edge_prob: 0.015,
            inter_edge_noise: 0.0004,
            feature_noise: 0.3,
            sub_scale: 0.8,
            pair_count: 20_000,
            pair_noise: 0.05,
            d_v: 24,
            d_t: 16,
            seed: 0,
            graph_informativeness: vec![1.0, 0.7, 0.4],
        },
        prune: PruneConfig {
            min_degree: 50,
            max_degree: 500,
            prune_factor: 0.8,
            seed: 0,
            rule: Default::default(),
        },
        walk: WalkConfig { nw: 200, alpha: 0.5, top_k: 50, seed: 0 },
        model: ModelConfig {
            k: 3,
            n: 3,
            d_v: 24,
            d_t: 16,
            d_h: 32,
            d: 40,
            heads: 2,
            variant: Variant::Multibisage,
            encoder_mode: EncoderMode::AttentionOnly,
            dropout: 0.0,
            logit_scale: 10.0,
        },
        train: TrainConfig {
            peak_lr: 0.004,
            batch_size: 32,
            steps: 2000,
            warmup_steps: None,
            floor_lr: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 10.0,
            seed: 0,
            eval_every: 0,
            sketch_width: 2048,
            sketch_depth: 4,
            prob_floor: 1e-9,
        },
        eval: EvalConfig { k: 10, pool_size: 5000, seed: 0 },
    };
    cfg.resolve_seeds();
    cfg
}

/// Production-scale dimensions. Too large to train here; exists so shape
/// and layout checks can run against the real sizes.
pub fn prod_preset() -> PipelineConfig {
    let mut cfg = desk_preset();
    cfg.synth.num_graphs = 6;
    cfg.synth.graph_informativeness = vec![1.0, 1.0, 0.9, 0.7, 0.5, 0.4];
    cfg.synth.d_v = 1024;
    cfg.synth.d_t = 64;
    cfg.model.k = 6;
    cfg.model.n = 50;
    cfg.model.d_v = 1024;
    cfg.model.d_t = 64;
    cfg.model.d_h = 512;
    cfg.model.d = 256;
    cfg.model.heads = 8;
    cfg.walk.top_k = 50;
    cfg.train.batch_size = 8032;
    cfg.train.steps = 100_000;
    cfg.resolve_seeds();
    cfg
}

pub fn preset(name: &str) -> Result<PipelineConfig, ConfigError> {
    match name {
        "desk" => Ok(desk_preset()),
        "prod" => Ok(prod_preset()),
        other => Err(ConfigError::Invalid(format!(
            "unknown preset {other:?}; expected desk or prod"
        ))),
    }
}

/// What a run wrote and under which configuration, stored next to the
/// artifacts. Deterministic content: reruns produce identical manifests.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub config_sha256: String,
    pub seed: u64,
    /// Artifact name -> path relative to the manifest's directory.
    pub artifacts: BTreeMap<String, String>,
}

impl Manifest {
    pub fn new(cfg: &PipelineConfig) -> Self {
        Manifest {
            config_sha256: cfg.sha256(),
            seed: cfg.effective_seed(),
            artifacts: BTreeMap::new(),
        }
    }

    pub fn record(&mut self, name: &str, rel_path: &str) {
        self.artifacts.insert(name.to_string(), rel_path.to_string());
    }

    pub fn save<P: AsRef<Path>>(&self, path: P) -> Result<(), ConfigError> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load<P: AsRef<Path>>(path: P) -> Result<Self, ConfigError> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}
