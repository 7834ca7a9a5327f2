#![allow(dead_code)]

use igt_core::config::RunConfig;
use igt_core::encoder::EncoderConfig;
use igt_core::kg::{EntityId, KnowledgeGraph, RelationId, Triple, Vocab};
use igt_core::model::ModelConfig;
use igt_core::objective::ObjectiveConfig;
use proptest::prelude::*;

/// Inverse-doubled graph from raw `(h, r, t)` index triples.
pub fn graph(num_entities: usize, num_relations: usize, raw: &[(u32, u32, u32)]) -> KnowledgeGraph {
    let ents = Vocab::from_names((0..num_entities).map(|i| format!("e{i}")));
    let rels = Vocab::from_names((0..num_relations).map(|i| format!("r{i}")));
    let triples = raw.iter().map(|&(h, r, t)| Triple::new(EntityId(h), RelationId::base(r), EntityId(t))).collect();
    KnowledgeGraph::new(ents, rels, triples).unwrap().add_inverse_relations().unwrap()
}

/// Random small graph: entity count, relation count and raw triples.
pub fn arb_graph(max_entities: u32, max_relations: u32, max_triples: usize) -> impl Strategy<Value = (usize, usize, Vec<(u32, u32, u32)>)> {
    (2..=max_entities, 1..=max_relations).prop_flat_map(move |(n, r)| {
        let triple = (0..n, 0..r, 0..n);
        (Just(n as usize), Just(r as usize), prop::collection::vec(triple, 1..=max_triples))
    })
}

pub fn tiny_model_config(d_model: usize) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig { d_model, n_heads: 2, n_layers: 1, d_ff: 2 * d_model, ..EncoderConfig::default() },
        objective: ObjectiveConfig { d_pool: d_model, classifier_hidden: 2 * d_model, ..ObjectiveConfig::default() },
        fusion: None,
    }
}

/// Desk-scale settings used for every toy-graph training run.
pub fn toy_run_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.apply_text(
        "d_model = 32\n\
         n_heads = 4\n\
         n_layers = 2\n\
         d_ff = 64\n\
         d_pool = 32\n\
         classifier_hidden = 64\n\
         dropout = 0.1\n\
         batch_size = 8\n\
         grad_accum = 1\n\
         lr_encoder = 5e-4\n\
         lr_other = 1e-3\n\
         eval_every = 0\n",
    )
    .unwrap();
    cfg
}
