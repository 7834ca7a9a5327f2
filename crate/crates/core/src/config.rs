//! Flat `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. Later assignments win, so command
//! line overrides are applied by calling [`RunConfig::set`] after the file.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{FusionConfig, ProviderKind, RelationScope};
use crate::model::ModelConfig;
use crate::objective::RelationChoice;
use crate::train::TrainConfig;

pub const SEED_ENV: &str = "IGT_SEED";

/// Every recognised key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "base seed for sampling, shuffling, dropout and initialisation"),
    ("epochs", "training epochs"),
    ("batch_size", "items per micro-batch"),
    ("grad_accum", "micro-batches per optimizer step"),
    ("weight_decay", "decoupled weight decay"),
    ("lr_encoder", "peak learning rate of the graph encoder group"),
    ("lr_provider", "peak learning rate of the prompt provider group"),
    ("lr_other", "peak learning rate of the remaining parameters"),
    ("warmup_encoder", "warm-up fraction of the encoder group"),
    ("warmup_provider", "warm-up fraction of the provider group"),
    ("warmup_other", "warm-up fraction of the remaining parameters"),
    ("eval_every", "validate every n epochs (0 disables)"),
    ("valid_max_queries", "cap on validation queries per direction (0 means all)"),
    ("restore_best", "reload the best validated parameters after training"),
    ("filtered", "filtered ranking"),
    ("radius", "neighbourhood radius for local sets"),
    ("m_hr", "budget of (h, r, .) triples"),
    ("m_h", "budget of other triples around h"),
    ("m_r", "budget of triples with relation r elsewhere"),
    ("d_model", "encoder width"),
    ("n_heads", "attention heads"),
    ("n_layers", "encoder layers"),
    ("d_ff", "feed-forward width"),
    ("dropout", "dropout probability"),
    ("init_std", "initialisation standard deviation"),
    ("num_distance_buckets", "distance buckets including G2G"),
    ("max_exact_distance", "largest distance with its own bucket"),
    ("shared_g2g", "D uses G2G wherever P does"),
    ("beta1", "weight of the subgraph terms"),
    ("relation_choice", "relation for constructed inputs: target or occurrence"),
    ("d_pool", "pooled triple width"),
    ("classifier_hidden", "classifier hidden width"),
    ("fusion", "prompt fusion provider: none, stub or cache"),
    ("lambda", "fusion weight of the prompt embedding"),
    ("relation_scope", "relation context: r, mr_l or mr_g"),
    ("d_llm", "stub provider width"),
    ("stub_layers", "stub provider layers"),
    ("stub_heads", "stub provider heads"),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[derive(Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// `None` disables fusion; otherwise the provider used.
    pub fusion_provider: Option<ProviderKind>,
    pub fusion: FusionConfig,
}


fn parse<V: FromStr>(key: &str, value: &str) -> Result<V>
where
    V::Err: std::fmt::Display,
{
    value.parse().map_err(|e| Error::Config(format!("{key} = {value:?}: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key} = {value:?}: expected true or false"))),
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let t = &mut self.train;
        let e = &mut self.model.encoder;
        let o = &mut self.model.objective;
        let f = &mut self.fusion;
        match key.trim() {
            "seed" => t.seed = parse(key, v)?,
            "epochs" => t.epochs = parse(key, v)?,
            "batch_size" => t.batch_size = parse(key, v)?,
            "grad_accum" => t.grad_accum = parse(key, v)?,
            "weight_decay" => t.weight_decay = parse(key, v)?,
            "lr_encoder" => t.schedules[0].lr = parse(key, v)?,
            "lr_provider" => t.schedules[1].lr = parse(key, v)?,
            "lr_other" => t.schedules[2].lr = parse(key, v)?,
            "warmup_encoder" => t.schedules[0].warmup = parse(key, v)?,
            "warmup_provider" => t.schedules[1].warmup = parse(key, v)?,
            "warmup_other" => t.schedules[2].warmup = parse(key, v)?,
            "eval_every" => t.eval_every = parse(key, v)?,
            "valid_max_queries" => {
                let n: usize = parse(key, v)?;
                t.valid_max_queries = (n > 0).then_some(n);
            }
            "restore_best" => t.restore_best = parse_bool(key, v)?,
            "filtered" => t.filtered = parse_bool(key, v)?,
            "radius" => t.sampler.radius = parse(key, v)?,
            "m_hr" => t.sampler.m_hr = parse(key, v)?,
            "m_h" => t.sampler.m_h = parse(key, v)?,
            "m_r" => t.sampler.m_r = parse(key, v)?,
            "d_model" => e.d_model = parse(key, v)?,
            "n_heads" => e.n_heads = parse(key, v)?,
            "n_layers" => e.n_layers = parse(key, v)?,
            "d_ff" => e.d_ff = parse(key, v)?,
            "dropout" => e.dropout = parse(key, v)?,
            "init_std" => e.init_std = parse(key, v)?,
            "num_distance_buckets" => e.buckets.num_distance_buckets = parse(key, v)?,
            "max_exact_distance" => e.buckets.max_exact_distance = parse(key, v)?,
            "shared_g2g" => e.shared_g2g = parse_bool(key, v)?,
            "beta1" => o.beta1 = parse(key, v)?,
            "relation_choice" => {
                o.relation_choice = match v {
                    "target" => RelationChoice::Target,
                    "occurrence" => RelationChoice::Occurrence,
                    _ => return Err(Error::Config(format!("{key} = {v:?}: expected target or occurrence"))),
                }
            }
            "d_pool" => o.d_pool = parse(key, v)?,
            "classifier_hidden" => o.classifier_hidden = parse(key, v)?,
            "fusion" => {
                self.fusion_provider = match v {
                    "none" => None,
                    "stub" => Some(ProviderKind::Stub),
                    "cache" => Some(ProviderKind::Cache),
                    _ => return Err(Error::Config(format!("{key} = {v:?}: expected none, stub or cache"))),
                }
            }
            "lambda" => f.lambda = parse(key, v)?,
            "relation_scope" => f.scope = RelationScope::from_str(v)?,
            "d_llm" => f.stub.d_llm = parse(key, v)?,
            "stub_layers" => f.stub.n_layers = parse(key, v)?,
            "stub_heads" => f.stub.n_heads = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown configuration key {other:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines in order.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse { line: i + 1, message: format!("expected key = value, got {line:?}") })?;
            self.set(k, v).map_err(|e| Error::Parse { line: i + 1, message: e.to_string() })?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(&std::fs::read_to_string(path)?)?;
        Ok(cfg)
    }

    /// Applies `IGT_SEED` when set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.set("seed", &v)?;
        }
        Ok(())
    }

    /// Model configuration with the fusion choice folded in.
    pub fn model_config(&self) -> ModelConfig {
        let mut m = self.model.clone();
        m.fusion = self.fusion_provider.map(|p| FusionConfig { provider: p, ..self.fusion.clone() });
        m
    }

    /// Checks every key, including fusion keys that the current choice leaves unused.
    pub fn validate(&self) -> Result<()> {
        self.fusion.validate()?;
        self.model_config().validate()?;
        self.train.validate()
    }

    /// Current values as sorted `key = value` pairs.
    pub fn to_pairs(&self) -> BTreeMap<&'static str, String> {
        let t = &self.train;
        let e = &self.model.encoder;
        let o = &self.model.objective;
        let f = &self.fusion;
        let fusion = match self.fusion_provider {
            None => "none",
            Some(ProviderKind::Stub) => "stub",
            Some(ProviderKind::Cache) => "cache",
        };
        let choice = match o.relation_choice {
            RelationChoice::Target => "target",
            RelationChoice::Occurrence => "occurrence",
        };
        let values: Vec<(&'static str, String)> = vec![
            ("seed", t.seed.to_string()),
            ("epochs", t.epochs.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("grad_accum", t.grad_accum.to_string()),
            ("weight_decay", t.weight_decay.to_string()),
            ("lr_encoder", t.schedules[0].lr.to_string()),
            ("lr_provider", t.schedules[1].lr.to_string()),
            ("lr_other", t.schedules[2].lr.to_string()),
            ("warmup_encoder", t.schedules[0].warmup.to_string()),
            ("warmup_provider", t.schedules[1].warmup.to_string()),
            ("warmup_other", t.schedules[2].warmup.to_string()),
            ("eval_every", t.eval_every.to_string()),
            ("valid_max_queries", t.valid_max_queries.unwrap_or(0).to_string()),
            ("restore_best", t.restore_best.to_string()),
            ("filtered", t.filtered.to_string()),
            ("radius", t.sampler.radius.to_string()),
            ("m_hr", t.sampler.m_hr.to_string()),
            ("m_h", t.sampler.m_h.to_string()),
            ("m_r", t.sampler.m_r.to_string()),
            ("d_model", e.d_model.to_string()),
            ("n_heads", e.n_heads.to_string()),
            ("n_layers", e.n_layers.to_string()),
            ("d_ff", e.d_ff.to_string()),
            ("dropout", e.dropout.to_string()),
            ("init_std", e.init_std.to_string()),
            ("num_distance_buckets", e.buckets.num_distance_buckets.to_string()),
            ("max_exact_distance", e.buckets.max_exact_distance.to_string()),
            ("shared_g2g", e.shared_g2g.to_string()),
            ("beta1", o.beta1.to_string()),
            ("relation_choice", choice.to_string()),
            ("d_pool", o.d_pool.to_string()),
            ("classifier_hidden", o.classifier_hidden.to_string()),
            ("fusion", fusion.to_string()),
            ("lambda", f.lambda.to_string()),
            ("relation_scope", f.scope.to_string()),
            ("d_llm", f.stub.d_llm.to_string()),
            ("stub_layers", f.stub.n_layers.to_string()),
            ("stub_heads", f.stub.n_heads.to_string()),
        ];
        values.into_iter().collect()
    }

    pub fn to_text(&self) -> String {
        self.to_pairs().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}
