mod common;

use std::collections::HashSet;

use common::{arb_graph, graph};
use igt_core::kg::{Dataset, EntityId, RelationId, Triple, Vocab};
use igt_core::sampler::{extract_subgraph, rng_for, SamplerConfig, Token, TripleSet};
use igt_core::Error;
use proptest::prelude::*;

fn fact_key(t: Triple) -> Triple {
    if t.relation.is_inverse() {
        t.inverse()
    } else {
        t
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn doubling_is_an_involution((n, r, raw) in arb_graph(10, 3, 30)) {
        let kg = graph(n, r, &raw);
        for t in kg.triples() {
            prop_assert_eq!(t.inverse().inverse(), *t);
            prop_assert!(kg.contains(&t.inverse()));
        }
        let base = kg.triples().iter().filter(|t| !t.relation.is_inverse()).count();
        prop_assert_eq!(kg.len(), 2 * base);
        prop_assert!(matches!(kg.add_inverse_relations(), Err(Error::AlreadyDoubled)));
    }

    #[test]
    fn snapshot_round_trip((n, r, raw) in arb_graph(10, 3, 30), split in 0usize..5) {
        let ents = Vocab::from_names((0..n).map(|i| format!("e{i}")));
        let rels = Vocab::from_names((0..r).map(|i| format!("r{i}")));
        let mut triples: Vec<Triple> = raw.iter().map(|&(h, r, t)| Triple::new(EntityId(h), RelationId::base(r), EntityId(t))).collect();
        let mut seen = HashSet::new();
        triples.retain(|t| seen.insert(*t));
        let cut = triples.len().saturating_sub(split);
        let held = triples.split_off(cut);
        let d = Dataset::from_triples(ents, rels, triples, held.clone(), held).unwrap();
        let mut buf = Vec::new();
        d.write_snapshot_to(&mut buf).unwrap();
        let back = Dataset::read_snapshot_from(&mut buf.as_slice()).unwrap();
        prop_assert_eq!(back.train.triples(), d.train.triples());
        prop_assert_eq!(&back.valid, &d.valid);
        prop_assert_eq!(back.train.entities(), d.train.entities());
    }

    #[test]
    fn subgraph_invariants((n, r, raw) in arb_graph(12, 3, 40), pick in any::<prop::sample::Index>(), seed in any::<u64>(), with_gold in any::<bool>()) {
        let kg = graph(n, r, &raw);
        let q = kg.triples()[pick.index(kg.len())];
        let cfg = SamplerConfig { radius: 2, m_hr: 2, m_h: 2, m_r: 2, seed: 0 };
        let gold = with_gold.then_some(q.tail);
        let sub = extract_subgraph(&kg, q.head, q.relation, gold, &cfg, &mut rng_for(seed)).unwrap();

        // target first, then at most the total budget
        prop_assert_eq!(sub.triples[0].set, TripleSet::Target);
        prop_assert!(sub.num_triples() <= 1 + cfg.total_budget());
        if !sub.underfilled {
            prop_assert_eq!(sub.num_triples(), 1 + cfg.total_budget());
        }

        // one mask, no fact twice (a fact and its inverse count once), target fact excluded
        let masks = sub.tokens.iter().filter(|t| matches!(t, Token::Mask)).count();
        prop_assert_eq!(masks, 1);
        let mut facts = HashSet::new();
        for t in &sub.triples[1..] {
            let full = Triple::new(t.head, t.relation, t.tail.unwrap());
            prop_assert!(kg.contains(&full));
            prop_assert!(facts.insert(fact_key(full)));
            if let Some(g) = gold {
                prop_assert_ne!(fact_key(full), fact_key(Triple::new(q.head, q.relation, g)));
            }
        }

        // entity tokens are deduplicated and Pos/Neg partition them
        let ents: Vec<EntityId> = sub.tokens.iter().filter_map(|t| match t { Token::Entity(e) => Some(*e), _ => None }).collect();
        let unique: HashSet<_> = ents.iter().copied().collect();
        prop_assert_eq!(unique.len(), ents.len());
        let mut parts: Vec<EntityId> = sub.pos_entities.iter().chain(&sub.neg_entities).copied().collect();
        parts.sort();
        let mut sorted = ents.clone();
        sorted.sort();
        prop_assert_eq!(parts, sorted);
        let pos: HashSet<EntityId> = sub.triples.iter().filter(|t| t.set == TripleSet::Hr { ring: 1 }).filter_map(|t| t.tail).collect();
        for e in &sub.pos_entities {
            prop_assert!(pos.contains(e));
        }

        // the layout follows the triples
        prop_assert_eq!(sub.num_tokens(), sub.num_triples() + unique.len() + 1);
        for (i, &[h, rr, t]) in sub.triple_tokens.iter().enumerate() {
            prop_assert_eq!(sub.tokens[h], Token::Entity(sub.triples[i].head));
            prop_assert_eq!(sub.tokens[rr], Token::Relation { relation: sub.triples[i].relation, triple: i });
            match sub.triples[i].tail {
                Some(e) => prop_assert_eq!(sub.tokens[t], Token::Entity(e)),
                None => prop_assert_eq!(sub.tokens[t], Token::Mask),
            }
        }

        // same seed, same subgraph
        let again = extract_subgraph(&kg, q.head, q.relation, gold, &cfg, &mut rng_for(seed)).unwrap();
        prop_assert_eq!(again.triples, sub.triples);
    }
}

#[test]
fn partition_example() {
    // kg {(h,r,t),(h,r,x),(h,s,u),(a,r,b)} with budget 1 per set
    let kg = graph(6, 2, &[(0, 0, 1), (0, 0, 2), (0, 1, 3), (4, 0, 5)]);
    let cfg = SamplerConfig { radius: 2, m_hr: 1, m_h: 1, m_r: 1, seed: 0 };
    let sub = extract_subgraph(&kg, EntityId(0), RelationId::base(0), Some(EntityId(1)), &cfg, &mut rng_for(3)).unwrap();
    assert_eq!(sub.pos_entities, vec![EntityId(2)]);
    let neg: HashSet<_> = sub.neg_entities.iter().copied().collect();
    assert_eq!(neg, [0, 3, 4, 5].into_iter().map(EntityId).collect());
}
