//! Small pinned graphs for smoke tests and diagnostics checks.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;

use crate::error::Result;
use crate::kg::{Dataset, EntityId, RelationId, Triple, Vocab};
use crate::sampler::rng_for;

pub const TOY_ENTITIES: usize = 60;
pub const TOY_SPLIT_SEED: u64 = 0;

/// Rules over `e0..e59` (indices mod 60): `r0: i -> i+1`, `r1` duplicates
/// `r0`, `r2: i+1 -> i`, and `r3` links every ordered pair of distinct
/// members of the triads `{3k, 3k+1, 3k+2}`.
pub fn toy_triples() -> Vec<(usize, usize, usize)> {
    let n = TOY_ENTITIES;
    let mut out = Vec::new();
    for i in 0..n {
        out.push((i, 0, (i + 1) % n));
        out.push((i, 1, (i + 1) % n));
        out.push(((i + 1) % n, 2, i));
        let base = 3 * (i / 3);
        for j in base..base + 3 {
            if j != i {
                out.push((i, 3, j));
            }
        }
    }
    out
}

/// 80/10/10 split of [`toy_triples`] under a fixed shuffle.
pub fn toy_dataset() -> Result<Dataset> {
    split_dataset(TOY_ENTITIES, 4, toy_triples(), TOY_SPLIT_SEED)
}

/// Every head has at least six tails per relation, so each subgraph set fills
/// its budget for the default sampler.
pub fn saturated_dataset() -> Result<Dataset> {
    let n = 40;
    let mut triples = Vec::new();
    for i in 0..n {
        for r in 0..3 {
            for k in 1..=6 {
                triples.push((i, r, (i + 6 * r + k) % n));
            }
        }
    }
    let ents = Vocab::from_names((0..n).map(|i| format!("e{i}")));
    let rels = Vocab::from_names((0..3).map(|r| format!("r{r}")));
    let train = to_triples(&triples);
    let test = train.iter().step_by(9).copied().collect();
    Dataset::from_triples(ents, rels, train, Vec::new(), test)
}

fn to_triples(raw: &[(usize, usize, usize)]) -> Vec<Triple> {
    raw.iter()
        .map(|&(h, r, t)| Triple::new(EntityId(h as u32), RelationId::base(r as u32), EntityId(t as u32)))
        .collect()
}

fn split_dataset(
    num_entities: usize,
    num_relations: usize,
    mut raw: Vec<(usize, usize, usize)>,
    seed: u64,
) -> Result<Dataset> {
    raw.shuffle(&mut rng_for(seed));
    let n = raw.len();
    let n_train = n * 8 / 10;
    let n_valid = (n - n_train) / 2;
    let triples = to_triples(&raw);
    let ents = Vocab::from_names((0..num_entities).map(|i| format!("e{i}")));
    let rels = Vocab::from_names((0..num_relations).map(|r| format!("r{r}")));
    Dataset::from_triples(
        ents,
        rels,
        triples[..n_train].to_vec(),
        triples[n_train..n_train + n_valid].to_vec(),
        triples[n_train + n_valid..].to_vec(),
    )
}

/// Writes `train.tsv`, `valid.tsv` and `test.tsv` with entity and relation names.
pub fn write_tsv_splits(data: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let kg = &data.train;
    let base: Vec<Triple> = kg.triples().iter().filter(|t| !t.relation.is_inverse()).copied().collect();
    for (name, split) in [("train.tsv", &base), ("valid.tsv", &data.valid), ("test.tsv", &data.test)] {
        let mut text = String::new();
        for t in split.iter() {
            text.push_str(&format!(
                "{}\t{}\t{}\n",
                kg.entity_name(t.head),
                kg.relation_name(t.relation),
                kg.entity_name(t.tail)
            ));
        }
        fs::write(dir.join(name), text)?;
    }
    Ok(())
}
