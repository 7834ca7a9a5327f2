//! Degree-weighted subgraph extraction around a `(h, r, ?)` query.
//!
//! A subgraph holds the masked target triple followed by three sampled sets:
//! local triples sharing head and relation (`T_hr`), local triples touching the
//! head through other relations (`T_h`), and distant triples that reuse the
//! query relation (`T_r`). Local sets expand ring by ring up to a radius; the
//! per-set budget is spent on the innermost ring first and flows outward.
//!
//! A fact and its inverse count as one triple for de-duplication, so a
//! subgraph never contains both `(a, s, b)` and `(b, s^-1, a)`.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::{EntityId, KnowledgeGraph, RelationId, Triple};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub radius: usize,
    pub m_hr: usize,
    pub m_h: usize,
    pub m_r: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { radius: 2, m_hr: 5, m_h: 5, m_r: 5, seed: 0 }
    }
}

impl SamplerConfig {
    pub fn total_budget(&self) -> usize {
        self.m_hr + self.m_h + self.m_r
    }

    pub fn validate(&self) -> Result<()> {
        if self.radius < 1 {
            return Err(Error::Config("sampler radius must be at least 1".into()));
        }
        if self.total_budget() == 0 {
            return Err(Error::Config("sampler budget m_hr + m_h + m_r must be positive".into()));
        }
        Ok(())
    }
}

/// Which sampled set a subgraph triple came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TripleSet {
    Target,
    Hr { ring: u8 },
    H { ring: u8 },
    R,
    /// Uniform top-up after every named set ran dry.
    Fill,
}

impl TripleSet {
    pub fn tag(self) -> &'static str {
        match self {
            TripleSet::Target => "TT",
            TripleSet::Hr { .. } => "HR",
            TripleSet::H { .. } => "H",
            TripleSet::R | TripleSet::Fill => "R",
        }
    }

    pub fn is_local(self) -> bool {
        matches!(self, TripleSet::Target | TripleSet::Hr { .. } | TripleSet::H { .. })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Token {
    Entity(EntityId),
    /// The masked tail of the target triple.
    Mask,
    /// One occurrence of a relation; `triple` indexes [`Subgraph::triples`].
    Relation { relation: RelationId, triple: usize },
}

impl Token {
    pub fn is_relation(self) -> bool {
        matches!(self, Token::Relation { .. })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubgraphTriple {
    pub head: EntityId,
    pub relation: RelationId,
    /// `None` only for the masked target tail.
    pub tail: Option<EntityId>,
    pub set: TripleSet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Subgraph {
    pub head: EntityId,
    pub relation: RelationId,
    /// Gold tail, when known. Never placed in the token layout by the target.
    pub gold: Option<EntityId>,
    /// Target first, then `T_hr`, `T_h`, `T_r` (and fill) members.
    pub triples: Vec<SubgraphTriple>,
    pub tokens: Vec<Token>,
    /// `[head, relation, tail]` token positions of each triple.
    pub triple_tokens: Vec<[usize; 3]>,
    /// Entities receiving positive attention, ordered by token position.
    pub pos_entities: Vec<EntityId>,
    /// Every other subgraph entity (the mask excluded), ordered by token position.
    pub neg_entities: Vec<EntityId>,
    /// Set when the graph could not supply the full budget.
    pub underfilled: bool,
}

impl Subgraph {
    /// Assembles the token layout and Pos/Neg partition for a sampled triple list.
    /// The first entry must be the target.
    pub fn assemble(
        head: EntityId,
        relation: RelationId,
        gold: Option<EntityId>,
        triples: Vec<SubgraphTriple>,
        underfilled: bool,
    ) -> Self {
        debug_assert!(matches!(triples.first().map(|t| t.set), Some(TripleSet::Target)));
        let mut tokens = Vec::new();
        let mut entity_pos: HashMap<EntityId, usize> = HashMap::new();
        let mut triple_tokens = Vec::with_capacity(triples.len());
        let mut entity_token = |e: EntityId, tokens: &mut Vec<Token>| -> usize {
            *entity_pos.entry(e).or_insert_with(|| {
                tokens.push(Token::Entity(e));
                tokens.len() - 1
            })
        };
        for (i, t) in triples.iter().enumerate() {
            let hpos = entity_token(t.head, &mut tokens);
            tokens.push(Token::Relation { relation: t.relation, triple: i });
            let rpos = tokens.len() - 1;
            let tpos = match t.tail {
                Some(e) => entity_token(e, &mut tokens),
                None => {
                    tokens.push(Token::Mask);
                    tokens.len() - 1
                }
            };
            triple_tokens.push([hpos, rpos, tpos]);
        }
        let pos_set: HashSet<EntityId> = triples
            .iter()
            .filter(|t| t.set == TripleSet::Hr { ring: 1 })
            .filter_map(|t| t.tail)
            .collect();
        let mut pos_entities = Vec::new();
        let mut neg_entities = Vec::new();
        for tok in &tokens {
            if let Token::Entity(e) = *tok {
                if pos_set.contains(&e) {
                    pos_entities.push(e);
                } else {
                    neg_entities.push(e);
                }
            }
        }
        Self { head, relation, gold, triples, tokens, triple_tokens, pos_entities, neg_entities, underfilled }
    }

    pub fn num_triples(&self) -> usize {
        self.triples.len()
    }

    pub fn num_tokens(&self) -> usize {
        self.tokens.len()
    }

    pub fn entity_position(&self, e: EntityId) -> Option<usize> {
        self.tokens.iter().position(|t| *t == Token::Entity(e))
    }

    pub fn mask_position(&self) -> usize {
        self.triple_tokens[0][2]
    }

    /// Directed Levi-graph edges `head -> relation -> tail` per triple occurrence.
    pub fn levi_edges(&self) -> Vec<(usize, usize)> {
        self.triple_tokens.iter().flat_map(|&[h, r, t]| [(h, r), (r, t)]).collect()
    }

    /// Text dump: one tagged triple per line, then `POS:` and `NEG:` lines.
    pub fn dump(&self, kg: &KnowledgeGraph) -> String {
        let mut s = String::new();
        for t in &self.triples {
            let tail = t.tail.map_or_else(|| "?".to_string(), |e| kg.entity_name(e));
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}",
                t.set.tag(),
                kg.entity_name(t.head),
                kg.relation_name(t.relation),
                tail
            );
        }
        let names = |v: &[EntityId]| v.iter().map(|&e| kg.entity_name(e)).collect::<Vec<_>>().join("\t");
        let _ = writeln!(s, "POS:\t{}", names(&self.pos_entities));
        let _ = writeln!(s, "NEG:\t{}", names(&self.neg_entities));
        s
    }
}

/// Facts already in the subgraph, keyed so that a triple and its inverse collide.
#[derive(Clone, Debug, Default)]
struct Used(HashSet<Triple>);

impl Used {
    fn key(t: Triple) -> Triple {
        if t.relation.is_inverse() {
            t.inverse()
        } else {
            t
        }
    }

    fn contains(&self, t: Triple) -> bool {
        self.0.contains(&Self::key(t))
    }

    fn insert(&mut self, t: Triple) {
        self.0.insert(Self::key(t));
    }
}

struct Candidate {
    triple: Triple,
    weight: f64,
    /// Entity reached by this triple (the endpoint away from the frontier).
    reached: EntityId,
}

/// Successive weighted draws without replacement; a drawn fact also retires its
/// inverse twin among the candidates.
fn draw_weighted<R: Rng>(cands: &[Candidate], budget: usize, used: &mut Used, rng: &mut R) -> Vec<usize> {
    let mut picked = Vec::new();
    if budget == 0 || cands.is_empty() {
        return picked;
    }
    let live = |c: &Candidate, used: &Used| !used.contains(c.triple);
    let mut remaining = cands.iter().filter(|c| live(c, used)).count();
    if remaining == 0 {
        return picked;
    }
    let weights: Vec<f64> = cands.iter().map(|c| if live(c, used) { c.weight } else { 0.0 }).collect();
    let Ok(mut dist) = WeightedIndex::new(&weights) else { return picked };
    let mut weights = weights;
    while picked.len() < budget && remaining > 0 {
        let i = dist.sample(rng);
        let t = cands[i].triple;
        picked.push(i);
        used.insert(t);
        // retire every candidate carrying the same fact
        let mut updates = Vec::new();
        for (j, c) in cands.iter().enumerate() {
            if weights[j] > 0.0 && used.contains(c.triple) {
                weights[j] = 0.0;
                updates.push((j, 0.0));
                remaining -= 1;
            }
        }
        if remaining == 0 {
            break;
        }
        if dist.update_weights(&updates.iter().map(|(j, w)| (*j, w)).collect::<Vec<_>>()).is_err() {
            break;
        }
    }
    picked
}

fn weight(kg: &KnowledgeGraph, e: EntityId) -> f64 {
    f64::from(kg.total_degree(e).max(1))
}

/// Ring expansion shared by `T_hr` and `T_h`.
fn expand_rings<R: Rng>(
    kg: &KnowledgeGraph,
    first_ring: Vec<Candidate>,
    budget: usize,
    radius: usize,
    used: &mut Used,
    seen: &mut HashSet<EntityId>,
    rng: &mut R,
) -> Vec<(Triple, u8)> {
    let mut out = Vec::new();
    let mut remaining = budget;
    let mut cands = first_ring;
    for ring in 1..=radius {
        if remaining == 0 {
            break;
        }
        let picked = draw_weighted(&cands, remaining, used, rng);
        remaining -= picked.len();
        let mut frontier = Vec::new();
        for &i in &picked {
            out.push((cands[i].triple, ring as u8));
            let e = cands[i].reached;
            if seen.insert(e) {
                frontier.push(e);
            }
        }
        if ring == radius || frontier.is_empty() {
            break;
        }
        cands = Vec::new();
        for &f in &frontier {
            for &ti in kg.by_head(f).iter().chain(kg.by_tail(f)) {
                let t = kg.triple(ti);
                if used.contains(t) {
                    continue;
                }
                let reached = if t.head == f { t.tail } else { t.head };
                cands.push(Candidate { triple: t, weight: weight(kg, reached), reached });
            }
        }
    }
    out
}

fn target_used(h: EntityId, r: RelationId, gold: Option<EntityId>) -> Used {
    let mut used = Used::default();
    if let Some(t) = gold {
        used.insert(Triple::new(h, r, t));
    }
    used
}

/// `T_hr`: radius-1 triples `(h, r, t1)` with `t1` not the excluded gold tail,
/// then rings attached to the newest entities.
pub fn sample_t_hr<R: Rng>(
    kg: &KnowledgeGraph,
    h: EntityId,
    r: RelationId,
    excluded_tail: Option<EntityId>,
    budget: usize,
    radius: usize,
    rng: &mut R,
) -> Vec<Triple> {
    let mut used = target_used(h, r, excluded_tail);
    let mut seen = HashSet::from([h]);
    sample_hr_inner(kg, h, r, excluded_tail, budget, radius, &mut used, &mut seen, rng)
        .into_iter()
        .map(|(t, _)| t)
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn sample_hr_inner<R: Rng>(
    kg: &KnowledgeGraph,
    h: EntityId,
    r: RelationId,
    excluded_tail: Option<EntityId>,
    budget: usize,
    radius: usize,
    used: &mut Used,
    seen: &mut HashSet<EntityId>,
    rng: &mut R,
) -> Vec<(Triple, u8)> {
    let ring1 = kg
        .by_head(h)
        .iter()
        .map(|&i| kg.triple(i))
        .filter(|t| t.relation == r && Some(t.tail) != excluded_tail && !used.contains(*t))
        .map(|t| Candidate { triple: t, weight: weight(kg, t.tail), reached: t.tail })
        .collect();
    expand_rings(kg, ring1, budget, radius, used, seen, rng)
}

/// `T_h`: radius-1 triples touching `h` in either direction through a relation other than `r`.
/// The inverse form `(t, r^-1, h)` of an `(h, r, t)` fact is skipped as well.
pub fn sample_t_h<R: Rng>(
    kg: &KnowledgeGraph,
    h: EntityId,
    r: RelationId,
    budget: usize,
    radius: usize,
    rng: &mut R,
) -> Vec<Triple> {
    let mut used = Used::default();
    let mut seen = HashSet::from([h]);
    sample_h_inner(kg, h, r, budget, radius, &mut used, &mut seen, rng).into_iter().map(|(t, _)| t).collect()
}

#[allow(clippy::too_many_arguments)]
fn sample_h_inner<R: Rng>(
    kg: &KnowledgeGraph,
    h: EntityId,
    r: RelationId,
    budget: usize,
    radius: usize,
    used: &mut Used,
    seen: &mut HashSet<EntityId>,
    rng: &mut R,
) -> Vec<(Triple, u8)> {
    let mut ring1 = Vec::new();
    for &i in kg.by_head(h).iter().chain(kg.by_tail(h)) {
        let t = kg.triple(i);
        // skip every form of an (h, r, _) fact; those belong to T_hr
        let same_query = (t.head == h && t.relation == r) || (t.tail == h && t.relation == r.inverse());
        if same_query || used.contains(t) {
            continue;
        }
        let reached = if t.head == h { t.tail } else { t.head };
        ring1.push(Candidate { triple: t, weight: weight(kg, reached), reached });
    }
    expand_rings(kg, ring1, budget, radius, used, seen, rng)
}

/// `T_r`: triples with relation `r` whose endpoints avoid both `h` and the gold tail.
pub fn sample_t_r<R: Rng>(
    kg: &KnowledgeGraph,
    h: EntityId,
    t_gold: Option<EntityId>,
    r: RelationId,
    budget: usize,
    rng: &mut R,
) -> Vec<Triple> {
    let mut used = target_used(h, r, t_gold);
    sample_r_inner(kg, h, t_gold, r, budget, &mut used, rng)
}

fn sample_r_inner<R: Rng>(
    kg: &KnowledgeGraph,
    h: EntityId,
    t_gold: Option<EntityId>,
    r: RelationId,
    budget: usize,
    used: &mut Used,
    rng: &mut R,
) -> Vec<Triple> {
    let avoid = |e: EntityId| e == h || Some(e) == t_gold;
    let cands: Vec<Candidate> = kg
        .by_relation(r)
        .iter()
        .map(|&i| kg.triple(i))
        .filter(|t| !avoid(t.head) && !avoid(t.tail) && !used.contains(*t))
        .map(|t| Candidate { triple: t, weight: weight(kg, t.head) + weight(kg, t.tail), reached: t.tail })
        .collect();
    draw_weighted(&cands, budget, used, rng).into_iter().map(|i| cands[i].triple).collect()
}

/// Uniform top-up from triples whose relation is not `r`.
fn fill_uniform<R: Rng>(kg: &KnowledgeGraph, r: RelationId, budget: usize, used: &mut Used, rng: &mut R) -> Vec<Triple> {
    let mut out = Vec::new();
    if budget == 0 || kg.is_empty() {
        return out;
    }
    let eligible = |t: Triple, used: &Used| t.relation != r && !used.contains(t);
    // rejection draws first, exhaustive scan once they stop paying off
    let mut misses = 0usize;
    while out.len() < budget && misses < 64 {
        let t = kg.triple(rng.random_range(0..kg.len()) as u32);
        if eligible(t, used) {
            used.insert(t);
            out.push(t);
            misses = 0;
        } else {
            misses += 1;
        }
    }
    if out.len() < budget {
        let rest: Vec<u32> = (0..kg.len() as u32).filter(|&i| eligible(kg.triple(i), used)).collect();
        let mut rest = rest;
        while out.len() < budget && !rest.is_empty() {
            let k = rng.random_range(0..rest.len());
            let t = kg.triple(rest.swap_remove(k));
            if eligible(t, used) {
                used.insert(t);
                out.push(t);
            }
        }
    }
    out
}

/// Full extraction: target, `T_hr`, `T_h`, `T_r`, shortfall redistribution, token layout.
///
/// `gold` is the true tail during training; pass `None` at prediction time so the
/// sample does not depend on the answer.
pub fn extract_subgraph<R: Rng>(
    kg: &KnowledgeGraph,
    h: EntityId,
    r: RelationId,
    gold: Option<EntityId>,
    config: &SamplerConfig,
    rng: &mut R,
) -> Result<Subgraph> {
    config.validate()?;
    kg.check_entity(h)?;
    kg.check_relation(r)?;
    if let Some(t) = gold {
        kg.check_entity(t)?;
    }
    let mut used = target_used(h, r, gold);
    let mut seen = HashSet::from([h]);
    let hr = sample_hr_inner(kg, h, r, gold, config.m_hr, config.radius, &mut used, &mut seen, rng);
    let hh = sample_h_inner(kg, h, r, config.m_h, config.radius, &mut used, &mut seen, rng);
    let shortfall = (config.m_hr - hr.len()) + (config.m_h - hh.len());
    let r_budget = config.m_r + shortfall;
    let rr = sample_r_inner(kg, h, gold, r, r_budget, &mut used, rng);
    let fill = fill_uniform(kg, r, r_budget - rr.len(), &mut used, rng);

    let mut triples = Vec::with_capacity(1 + config.total_budget());
    triples.push(SubgraphTriple { head: h, relation: r, tail: None, set: TripleSet::Target });
    let wrap = |t: Triple, set: TripleSet| SubgraphTriple { head: t.head, relation: t.relation, tail: Some(t.tail), set };
    triples.extend(hr.into_iter().map(|(t, ring)| wrap(t, TripleSet::Hr { ring })));
    triples.extend(hh.into_iter().map(|(t, ring)| wrap(t, TripleSet::H { ring })));
    triples.extend(rr.into_iter().map(|t| wrap(t, TripleSet::R)));
    triples.extend(fill.into_iter().map(|t| wrap(t, TripleSet::Fill)));
    let underfilled = triples.len() < config.total_budget() + 1;
    if underfilled {
        log::debug!(
            "subgraph for ({}, {}) has {} of {} triples",
            h.0,
            r.raw(),
            triples.len(),
            config.total_budget() + 1
        );
    }
    Ok(Subgraph::assemble(h, r, gold, triples, underfilled))
}

/// Mixes a base seed with stream coordinates (epoch, item index, ...).
pub fn derive_seed(base: u64, coords: &[u64]) -> u64 {
    let mut x = base ^ 0x9E37_79B9_7F4A_7C15;
    for &c in coords {
        x = splitmix(x ^ splitmix(c.wrapping_add(0x632B_E59B_D9B4_E019)));
    }
    x
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn rng_for(seed: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::{parse_triples, Vocab, VocabMode};
    use std::io::Cursor;

    /// Builds a doubled graph and returns name lookups.
    fn graph(lines: &[&str]) -> KnowledgeGraph {
        let text = lines.iter().map(|l| l.replace(' ', "\t")).collect::<Vec<_>>().join("\n");
        let mut e = Vocab::new();
        let mut r = Vocab::new();
        let t = parse_triples(Cursor::new(text), &mut e, &mut r, VocabMode::Grow).unwrap();
        KnowledgeGraph::new(e, r, t).unwrap().add_inverse_relations().unwrap()
    }

    fn e(kg: &KnowledgeGraph, n: &str) -> EntityId {
        kg.resolve_entity(n).unwrap()
    }

    fn rel(kg: &KnowledgeGraph, n: &str) -> RelationId {
        kg.resolve_relation(n).unwrap()
    }

    fn names(kg: &KnowledgeGraph, ts: &[Triple]) -> Vec<String> {
        let mut v: Vec<String> = ts
            .iter()
            .map(|t| format!("{} {} {}", kg.entity_name(t.head), kg.relation_name(t.relation), kg.entity_name(t.tail)))
            .collect();
        v.sort();
        v
    }

    #[test]
    fn t_hr_excludes_gold() {
        let kg = graph(&["h r t"]);
        let mut rng = rng_for(1);
        let out = sample_t_hr(&kg, e(&kg, "h"), rel(&kg, "r"), Some(e(&kg, "t")), 5, 1, &mut rng);
        assert!(out.is_empty());
    }

    #[test]
    fn t_hr_enumerates_siblings() {
        let kg = graph(&["h r t", "h r x", "h r y"]);
        for radius in [1, 2] {
            let mut rng = rng_for(3);
            let out = sample_t_hr(&kg, e(&kg, "h"), rel(&kg, "r"), Some(e(&kg, "t")), 5, radius, &mut rng);
            assert_eq!(names(&kg, &out), vec!["h r x", "h r y"]);
        }
    }

    #[test]
    fn t_hr_is_degree_weighted() {
        let kg = graph(&["h r x", "h r y", "x s a", "x s b", "x s c", "x s d"]);
        let (x, y) = (e(&kg, "x"), e(&kg, "y"));
        // doubled degrees: x touches 5 facts -> 10, y -> 2
        assert_eq!(kg.total_degree(x), 10);
        assert_eq!(kg.total_degree(y), 2);
        let (h, r) = (e(&kg, "h"), rel(&kg, "r"));
        let n = 10_000;
        let hits = (0..n).filter(|&s| sample_t_hr(&kg, h, r, None, 1, 1, &mut rng_for(s))[0].tail == x).count();
        let freq = hits as f64 / n as f64;
        assert!((freq - 10.0 / 12.0).abs() < 0.02, "{freq}");
    }

    #[test]
    fn t_h_only_other_relations() {
        let kg = graph(&["h r t", "h s u"]);
        let mut rng = rng_for(0);
        let out = sample_t_h(&kg, e(&kg, "h"), rel(&kg, "r"), 5, 1, &mut rng);
        // the fact (h, s, u) is reachable in one of its two directions, once
        assert_eq!(out.len(), 1);
        let t = out[0];
        let key = if t.relation.is_inverse() { t.inverse() } else { t };
        assert_eq!(names(&kg, &[key]), vec!["h s u"]);

        let kg = graph(&["h r t"]);
        let out = sample_t_h(&kg, e(&kg, "h"), rel(&kg, "r"), 5, 1, &mut rng_for(0));
        assert!(out.is_empty());
    }

    #[test]
    fn t_h_takes_both_directions() {
        let kg = graph(&["u s h", "h s v", "a r b"]);
        let out = sample_t_h(&kg, e(&kg, "h"), rel(&kg, "r"), 5, 1, &mut rng_for(0));
        let mut facts: Vec<Triple> = out.iter().map(|t| if t.relation.is_inverse() { t.inverse() } else { *t }).collect();
        facts.sort();
        assert_eq!(names(&kg, &facts), vec!["h s v", "u s h"]);
    }

    #[test]
    fn t_r_endpoint_filter() {
        let kg = graph(&["h r t", "a r b"]);
        let (h, r, t) = (e(&kg, "h"), rel(&kg, "r"), e(&kg, "t"));
        let out = sample_t_r(&kg, h, Some(t), r, 5, &mut rng_for(0));
        assert_eq!(names(&kg, &out), vec!["a r b"]);

        let kg = graph(&["h r t", "a r t"]);
        let (h, r, t) = (e(&kg, "h"), rel(&kg, "r"), e(&kg, "t"));
        assert!(sample_t_r(&kg, h, Some(t), r, 5, &mut rng_for(0)).is_empty());

        let lines: Vec<String> = (0..8).map(|i| format!("a{i} r b{i}")).chain(["h r t".to_string()]).collect();
        let kg = graph(&lines.iter().map(String::as_str).collect::<Vec<_>>());
        let (h, r, t) = (e(&kg, "h"), rel(&kg, "r"), e(&kg, "t"));
        let out = sample_t_r(&kg, h, Some(t), r, 5, &mut rng_for(9));
        assert_eq!(out.len(), 5);
        let distinct: HashSet<_> = out.iter().collect();
        assert_eq!(distinct.len(), 5);
    }

    #[test]
    fn exhausted_graph_gives_target_only() {
        let kg = graph(&["h r t"]);
        let cfg = SamplerConfig { radius: 2, m_hr: 5, m_h: 5, m_r: 5, seed: 0 };
        let sg = extract_subgraph(&kg, e(&kg, "h"), rel(&kg, "r"), Some(e(&kg, "t")), &cfg, &mut rng_for(0)).unwrap();
        assert_eq!(sg.num_triples(), 1);
        assert!(sg.underfilled);
        assert_eq!(sg.tokens, vec![Token::Entity(e(&kg, "h")), Token::Relation { relation: rel(&kg, "r"), triple: 0 }, Token::Mask]);
    }

    #[test]
    fn pos_neg_partition_by_hand() {
        let kg = graph(&["h r t", "h r x", "h s u", "a r b"]);
        let cfg = SamplerConfig { radius: 1, m_hr: 1, m_h: 1, m_r: 1, seed: 0 };
        let sg = extract_subgraph(&kg, e(&kg, "h"), rel(&kg, "r"), Some(e(&kg, "t")), &cfg, &mut rng_for(0)).unwrap();
        assert_eq!(sg.pos_entities, vec![e(&kg, "x")]);
        let mut neg = sg.neg_entities.clone();
        neg.sort();
        let mut want = vec![e(&kg, "h"), e(&kg, "u"), e(&kg, "a"), e(&kg, "b")];
        want.sort();
        assert_eq!(neg, want);
    }

    #[test]
    fn shared_entities_and_relation_occurrences() {
        let kg = graph(&["h r t", "h r x", "x r y", "a r b"]);
        let cfg = SamplerConfig { radius: 2, m_hr: 2, m_h: 0, m_r: 1, seed: 0 };
        let sg = extract_subgraph(&kg, e(&kg, "h"), rel(&kg, "r"), Some(e(&kg, "t")), &cfg, &mut rng_for(0)).unwrap();
        let ents: Vec<_> = sg.tokens.iter().filter(|t| matches!(t, Token::Entity(_))).collect();
        let distinct: HashSet<_> = ents.iter().collect();
        assert_eq!(ents.len(), distinct.len());
        let rels = sg.tokens.iter().filter(|t| t.is_relation()).count();
        assert_eq!(rels, sg.num_triples());
    }

    #[test]
    fn unknown_query_is_lookup_error() {
        let kg = graph(&["h r t"]);
        let err = extract_subgraph(&kg, EntityId(99), RelationId::base(0), None, &SamplerConfig::default(), &mut rng_for(0));
        assert!(matches!(err, Err(Error::Lookup(_))));
    }

    #[test]
    fn dump_format() {
        let kg = graph(&["h r t", "h r x", "h s u", "a r b"]);
        let cfg = SamplerConfig { radius: 1, m_hr: 1, m_h: 1, m_r: 1, seed: 0 };
        let sg = extract_subgraph(&kg, e(&kg, "h"), rel(&kg, "r"), Some(e(&kg, "t")), &cfg, &mut rng_for(0)).unwrap();
        let d = sg.dump(&kg);
        let lines: Vec<&str> = d.lines().collect();
        assert_eq!(lines[0], "TT\th\tr\t?");
        assert_eq!(lines[1], "HR\th\tr\tx");
        assert!(lines[2].starts_with("H\t"));
        assert_eq!(lines[3], "R\ta\tr\tb");
        assert_eq!(lines[4], "POS:\tx");
        assert!(lines[5].starts_with("NEG:\th"));
    }
}
