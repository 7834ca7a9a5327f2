//! Ranking metrics and input-size diagnostics.

use std::collections::HashSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::kg::{EntityId, KnowledgeGraph, KnownTrue, RelationId, TextCatalog, Triple};
use crate::model::Model;
use crate::positions::{bucketize_distance, build_distance_matrix, BucketMap};
use crate::sampler::{derive_seed, extract_subgraph, rng_for, SamplerConfig, Subgraph, Token};
use crate::scalar::Scalar;

/// `1 + #strictly higher + ceil(#ties / 2)`, ignoring filtered candidates other than the gold.
pub fn rank_candidates(probabilities: &[f64], gold: usize, known_true: Option<&HashSet<EntityId>>) -> Result<usize> {
    let g = *probabilities
        .get(gold)
        .ok_or_else(|| Error::Lookup(format!("gold {gold} outside {} candidates", probabilities.len())))?;
    let mut higher = 0usize;
    let mut ties = 0usize;
    for (i, &p) in probabilities.iter().enumerate() {
        if i == gold || known_true.is_some_and(|k| k.contains(&EntityId(i as u32))) {
            continue;
        }
        if p > g {
            higher += 1;
        } else if p == g {
            ties += 1;
        }
    }
    Ok(1 + higher + ties.div_ceil(2))
}

pub fn mrr(ranks: &[usize]) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::Contract("MRR of an empty rank list".into()));
    }
    Ok(ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / ranks.len() as f64)
}

pub fn hits_at_k(ranks: &[usize], k: usize) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::Contract("Hits@k of an empty rank list".into()));
    }
    Ok(ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingResult {
    pub head: u32,
    pub relation: u32,
    pub gold: u32,
    pub rank: usize,
    /// First 16 hex digits of SHA-256 over the little-endian score vector.
    pub scores_digest: String,
}

pub fn scores_digest(probabilities: &[f64]) -> String {
    let mut h = Sha256::new();
    for p in probabilities {
        h.update(p.to_le_bytes());
    }
    h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub count: usize,
    pub mrr: f64,
    pub hits1: f64,
    pub hits3: f64,
    pub hits10: f64,
}

impl Metrics {
    pub fn from_ranks(ranks: &[usize]) -> Result<Self> {
        Ok(Self {
            count: ranks.len(),
            mrr: mrr(ranks)?,
            hits1: hits_at_k(ranks, 1)?,
            hits3: hits_at_k(ranks, 3)?,
            hits10: hits_at_k(ranks, 10)?,
        })
    }
}

/// Mean triples, tokens and out-of-range distances per input.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub inputs: usize,
    pub a_it: f64,
    pub a_il: f64,
    pub a_bbr: f64,
    /// Inputs that received the full sampling budget.
    pub saturated: usize,
    /// Mean triples over saturated inputs only.
    pub a_it_saturated: f64,
    /// Mean layout length if every entity and relation were spelled out word by word.
    pub a_il_text: Option<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct DiagnosticsAccumulator {
    inputs: usize,
    triples: usize,
    tokens: usize,
    beyond: usize,
    saturated: usize,
    saturated_triples: usize,
    text_tokens: usize,
    with_text: bool,
}

impl DiagnosticsAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, subgraph: &Subgraph, buckets: &BucketMap, catalog: Option<&TextCatalog>) {
        let p = build_distance_matrix(subgraph);
        let b = bucketize_distance(&p, buckets);
        self.inputs += 1;
        self.triples += subgraph.num_triples();
        self.tokens += subgraph.num_tokens();
        self.beyond += b.beyond_range;
        if !subgraph.underfilled {
            self.saturated += 1;
            self.saturated_triples += subgraph.num_triples();
        }
        if let Some(c) = catalog {
            self.with_text = true;
            self.text_tokens += text_expanded_length(subgraph, c);
        }
    }

    pub fn finish(&self) -> Result<Diagnostics> {
        if self.inputs == 0 {
            return Err(Error::Contract("diagnostics over an empty input stream".into()));
        }
        let n = self.inputs as f64;
        Ok(Diagnostics {
            inputs: self.inputs,
            a_it: self.triples as f64 / n,
            a_il: self.tokens as f64 / n,
            a_bbr: self.beyond as f64 / n,
            saturated: self.saturated,
            a_it_saturated: if self.saturated == 0 { 0.0 } else { self.saturated_triples as f64 / self.saturated as f64 },
            a_il_text: self.with_text.then(|| self.text_tokens as f64 / n),
        })
    }
}

pub fn collect_diagnostics<'a>(
    subgraphs: impl IntoIterator<Item = &'a Subgraph>,
    buckets: &BucketMap,
    catalog: Option<&TextCatalog>,
) -> Result<Diagnostics> {
    let mut acc = DiagnosticsAccumulator::new();
    for s in subgraphs {
        acc.add(s, buckets, catalog);
    }
    acc.finish()
}

/// Diagnostics over an evenly spaced sample of at most `max_queries` queries;
/// the i-th sampled query uses seed `derive_seed(seed, [i])`.
pub fn sample_diagnostics(
    kg: &KnowledgeGraph,
    queries: &[Triple],
    max_queries: usize,
    sampler: &SamplerConfig,
    seed: u64,
    buckets: &BucketMap,
    catalog: Option<&TextCatalog>,
) -> Result<Diagnostics> {
    let n = queries.len().min(max_queries);
    if n == 0 {
        return Err(Error::Contract("no queries to sample".into()));
    }
    let step = queries.len() as f64 / n as f64;
    let mut acc = DiagnosticsAccumulator::new();
    for i in 0..n {
        let q = queries[(i as f64 * step) as usize];
        let mut rng = rng_for(derive_seed(seed, &[i as u64]));
        let sub = extract_subgraph(kg, q.head, q.relation, None, sampler, &mut rng)?;
        acc.add(&sub, buckets, catalog);
    }
    acc.finish()
}

/// Layout length when each entity and relation token expands into its description words.
pub fn text_expanded_length(subgraph: &Subgraph, catalog: &TextCatalog) -> usize {
    subgraph
        .tokens
        .iter()
        .map(|t| match *t {
            Token::Entity(e) => catalog.entity_tokens(e).len().max(1),
            Token::Relation { relation, .. } => catalog.relation_tokens(relation).len().max(1),
            Token::Mask => 1,
        })
        .sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub filtered: bool,
    pub sampler: SamplerConfig,
    pub seed: u64,
    /// Evaluate at most this many test triples (in file order).
    pub max_queries: Option<usize>,
    pub keep_rankings: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { filtered: true, sampler: SamplerConfig::default(), seed: 0, max_queries: None, keep_rankings: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub filtered: bool,
    /// Both directions pooled.
    pub overall: Metrics,
    pub tail: Metrics,
    pub head: Metrics,
    pub diagnostics: Diagnostics,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rankings: Vec<RankingResult>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Plain-text table: one row per direction, columns MRR and Hits@1/3/10.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let protocol = if self.filtered { "filtered" } else { "raw" };
        let _ = writeln!(s, "{} ({protocol})", self.dataset);
        let _ = writeln!(s, "{:<10} {:>7} {:>7} {:>7} {:>7} {:>7}", "direction", "MRR", "Hits@1", "Hits@3", "Hits@10", "count");
        for (name, m) in [("both", &self.overall), ("tail", &self.tail), ("head", &self.head)] {
            let _ = writeln!(
                s,
                "{name:<10} {:>7.3} {:>7.3} {:>7.3} {:>7.3} {:>7}",
                m.mrr, m.hits1, m.hits3, m.hits10, m.count
            );
        }
        let d = &self.diagnostics;
        let _ = writeln!(s, "A.IT {:.2}  A.IL {:.2}  A.BBR {:.2}", d.a_it, d.a_il, d.a_bbr);
        s
    }
}

/// Ranks every triple as a tail query `(h, r, ?)` and as a head query `(t, r^-1, ?)`.
pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    train: &KnowledgeGraph,
    triples: &[Triple],
    known: &KnownTrue,
    config: &EvalConfig,
    dataset: &str,
) -> Result<EvalReport> {
    let n = config.max_queries.map_or(triples.len(), |m| m.min(triples.len()));
    if n == 0 {
        return Err(Error::Contract("no triples to evaluate".into()));
    }
    let mut tail_ranks = Vec::with_capacity(n);
    let mut head_ranks = Vec::with_capacity(n);
    let mut rankings = Vec::new();
    let mut diag = DiagnosticsAccumulator::new();
    for (i, t) in triples[..n].iter().enumerate() {
        for (dir, q) in [(0u64, *t), (1u64, t.inverse())] {
            let (rank, probs, sub) = rank_query(model, train, q.head, q.relation, q.tail, known, config, derive_seed(config.seed, &[dir, i as u64]))?;
            diag.add(&sub, &model.config.encoder.buckets, None);
            if config.keep_rankings {
                rankings.push(RankingResult {
                    head: q.head.0,
                    relation: q.relation.raw() as u32,
                    gold: q.tail.0,
                    rank,
                    scores_digest: scores_digest(&probs),
                });
            }
            if dir == 0 {
                tail_ranks.push(rank);
            } else {
                head_ranks.push(rank);
            }
        }
    }
    let all: Vec<usize> = tail_ranks.iter().chain(&head_ranks).copied().collect();
    Ok(EvalReport {
        dataset: dataset.to_string(),
        filtered: config.filtered,
        overall: Metrics::from_ranks(&all)?,
        tail: Metrics::from_ranks(&tail_ranks)?,
        head: Metrics::from_ranks(&head_ranks)?,
        diagnostics: diag.finish()?,
        rankings,
    })
}

#[allow(clippy::too_many_arguments)]
fn rank_query<T: Scalar>(
    model: &Model<T>,
    train: &KnowledgeGraph,
    h: EntityId,
    r: RelationId,
    gold: EntityId,
    known: &KnownTrue,
    config: &EvalConfig,
    seed: u64,
) -> Result<(usize, Vec<f64>, Subgraph)> {
    let mut rng = rng_for(seed);
    let sub = extract_subgraph(train, h, r, None, &config.sampler, &mut rng)?;
    let probs = model.predict(&sub)?;
    let filter = if config.filtered { known.tails(h, r) } else { None };
    let rank = rank_candidates(&probs, gold.index(), filter)?;
    Ok((rank, probs, sub))
}
