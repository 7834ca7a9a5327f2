//! Relative distance (P) and distinction (D) matrices over a subgraph token layout.
//!
//! Triples are read as three-token sentences `head -> relation -> tail`; tokens
//! shared between triples join these sentences into a directed Levi graph.
//! Token pairs without a directed path in either direction are "graph to graph"
//! (G2G) pairs and get a dedicated learned bias.

use std::collections::VecDeque;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::{KnowledgeGraph, RelationId};
use crate::sampler::{Subgraph, Token};

/// Signed hop counts; `None` marks G2G.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DistanceMatrix {
    size: usize,
    entries: Vec<Option<i32>>,
}

impl DistanceMatrix {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, i: usize, j: usize) -> Option<i32> {
        self.entries[i * self.size + j]
    }

    pub fn is_g2g(&self, i: usize, j: usize) -> bool {
        self.get(i, j).is_none()
    }

    pub fn entries(&self) -> &[Option<i32>] {
        &self.entries
    }

    pub fn from_entries(size: usize, entries: Vec<Option<i32>>) -> Result<Self> {
        if entries.len() != size * size {
            return Err(Error::Contract(format!("{} entries for a {size}x{size} matrix", entries.len())));
        }
        Ok(Self { size, entries })
    }
}

/// Token-kind codes 0..=3; `None` marks G2G.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DistinctionMatrix {
    size: usize,
    entries: Vec<Option<u8>>,
}

impl DistinctionMatrix {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, i: usize, j: usize) -> Option<u8> {
        self.entries[i * self.size + j]
    }

    pub fn entries(&self) -> &[Option<u8>] {
        &self.entries
    }
}

/// Shortest directed hop counts from every token, `None` when unreachable.
pub fn directed_hops(size: usize, edges: &[(usize, usize)]) -> Vec<Vec<Option<u32>>> {
    let mut adj = vec![Vec::new(); size];
    for &(a, b) in edges {
        adj[a].push(b);
    }
    (0..size)
        .map(|s| {
            let mut dist = vec![None; size];
            dist[s] = Some(0u32);
            let mut queue = VecDeque::from([s]);
            while let Some(u) = queue.pop_front() {
                let du = dist[u].unwrap_or(0);
                for &v in &adj[u] {
                    if dist[v].is_none() {
                        dist[v] = Some(du + 1);
                        queue.push_back(v);
                    }
                }
            }
            dist
        })
        .collect()
}

/// `P[i][j] = +k` for a shortest `i -> j` path of `k` hops, `-k` when only (or
/// more cheaply) `j -> i` exists. Equal hop counts both ways resolve to `+k`.
pub fn distance_from_edges(size: usize, edges: &[(usize, usize)]) -> DistanceMatrix {
    let hops = directed_hops(size, edges);
    let mut entries = Vec::with_capacity(size * size);
    for i in 0..size {
        for j in 0..size {
            let v = match (hops[i][j], hops[j][i]) {
                (Some(f), Some(b)) if b < f => Some(-(b as i32)),
                (Some(f), _) => Some(f as i32),
                (None, Some(b)) => Some(-(b as i32)),
                (None, None) => None,
            };
            entries.push(v);
        }
    }
    DistanceMatrix { size, entries }
}

pub fn build_distance_matrix(subgraph: &Subgraph) -> DistanceMatrix {
    distance_from_edges(subgraph.num_tokens(), &subgraph.levi_edges())
}

/// Code for an ordered token-kind pair.
pub fn distinction_code(from_relation: bool, to_relation: bool) -> u8 {
    match (from_relation, to_relation) {
        (false, false) => 0,
        (false, true) => 1,
        (true, false) => 2,
        (true, true) => 3,
    }
}

pub fn distinction_from_kinds(is_relation: &[bool], p: &DistanceMatrix, shared_g2g: bool) -> Result<DistinctionMatrix> {
    let n = is_relation.len();
    if p.size() != n {
        return Err(Error::Contract(format!("P is {}x{0} but the layout has {n} tokens", p.size())));
    }
    let mut entries = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            entries.push(if shared_g2g && p.is_g2g(i, j) {
                None
            } else {
                Some(distinction_code(is_relation[i], is_relation[j]))
            });
        }
    }
    Ok(DistinctionMatrix { size: n, entries })
}

/// With `shared_g2g` (the default) D is G2G exactly where P is.
pub fn build_distinction_matrix(subgraph: &Subgraph, p: &DistanceMatrix, shared_g2g: bool) -> Result<DistinctionMatrix> {
    let kinds: Vec<bool> = subgraph.tokens.iter().map(|t| t.is_relation()).collect();
    distinction_from_kinds(&kinds, p, shared_g2g)
}

/// Number of distinction buckets: four codes plus G2G.
pub const DISTINCTION_BUCKETS: usize = 5;
pub const DISTINCTION_G2G: u16 = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BucketMap {
    pub num_distance_buckets: usize,
    pub max_exact_distance: i32,
}

impl Default for BucketMap {
    fn default() -> Self {
        Self { num_distance_buckets: 32, max_exact_distance: 15 }
    }
}

impl BucketMap {
    pub fn validate(&self) -> Result<()> {
        if self.max_exact_distance < 1 {
            return Err(Error::Config("max_exact_distance must be at least 1".into()));
        }
        if self.num_distance_buckets < self.exact_buckets() + 1 {
            return Err(Error::Config(format!(
                "{} distance buckets cannot hold {} exact distances plus G2G",
                self.num_distance_buckets,
                self.exact_buckets()
            )));
        }
        Ok(())
    }

    /// Buckets for `-max ..= max`.
    pub fn exact_buckets(&self) -> usize {
        2 * self.max_exact_distance as usize + 1
    }

    pub fn g2g_bucket(&self) -> u16 {
        (self.num_distance_buckets - 1) as u16
    }

    /// Bucket of a signed distance and whether it was clamped.
    pub fn bucket(&self, d: i32) -> (u16, bool) {
        let m = self.max_exact_distance;
        let clamped = d.clamp(-m, m);
        ((clamped + m) as u16, clamped != d)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Bucketized {
    pub buckets: Vec<u16>,
    pub beyond_range: usize,
}

pub fn bucketize_distance(p: &DistanceMatrix, map: &BucketMap) -> Bucketized {
    let mut beyond_range = 0;
    let buckets = p
        .entries()
        .iter()
        .map(|e| match e {
            Some(d) => {
                let (b, over) = map.bucket(*d);
                beyond_range += usize::from(over);
                b
            }
            None => map.g2g_bucket(),
        })
        .collect();
    Bucketized { buckets, beyond_range }
}

/// Identity on codes 0..=3, G2G to [`DISTINCTION_G2G`].
pub fn bucketize_distinction(d: &DistinctionMatrix) -> Bucketized {
    let buckets = d.entries().iter().map(|e| e.map_or(DISTINCTION_G2G, u16::from)).collect();
    Bucketized { buckets, beyond_range: 0 }
}

/// Short token labels for grids: entity ids as `e<id>`, relations as `r<raw>`, the mask as `?`.
pub fn token_labels(subgraph: &Subgraph) -> Vec<String> {
    subgraph
        .tokens
        .iter()
        .map(|t| match t {
            Token::Entity(e) => format!("e{}", e.0),
            Token::Mask => "?".to_string(),
            Token::Relation { relation, .. } => format!("r{}", relation.raw()),
        })
        .collect()
}

/// Token labels from vocabulary names; inverse relations get a `^-1` suffix.
pub fn named_token_labels(subgraph: &Subgraph, kg: &KnowledgeGraph) -> Vec<String> {
    subgraph
        .tokens
        .iter()
        .map(|t| match t {
            Token::Entity(e) => kg.entity_name(*e),
            Token::Mask => "?".to_string(),
            Token::Relation { relation, .. } => {
                let base = kg.relation_name(RelationId::base(relation.index()));
                if relation.is_inverse() {
                    format!("{base}^-1")
                } else {
                    base
                }
            }
        })
        .collect()
}

/// Aligned integer grid with `G` for G2G entries.
pub fn format_grid<V: ToString>(labels: &[String], size: usize, get: impl Fn(usize, usize) -> Option<V>) -> String {
    let cells: Vec<Vec<String>> = (0..size)
        .map(|i| (0..size).map(|j| get(i, j).map_or_else(|| "G".to_string(), |v| v.to_string())).collect())
        .collect();
    let width = cells
        .iter()
        .flatten()
        .map(String::len)
        .chain(labels.iter().map(String::len))
        .max()
        .unwrap_or(1);
    let mut s = String::new();
    let _ = write!(s, "{:>width$}", "");
    for l in labels {
        let _ = write!(s, " {l:>width$}");
    }
    s.push('\n');
    for (i, row) in cells.iter().enumerate() {
        let _ = write!(s, "{:>width$}", labels.get(i).map_or("", String::as_str));
        for c in row {
            let _ = write!(s, " {c:>width$}");
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn triple_edges(triples: &[[usize; 3]]) -> Vec<(usize, usize)> {
        triples.iter().flat_map(|&[h, r, t]| [(h, r), (r, t)]).collect()
    }

    fn rows(p: &DistanceMatrix) -> Vec<Vec<Option<i32>>> {
        (0..p.size()).map(|i| (0..p.size()).map(|j| p.get(i, j)).collect()).collect()
    }

    #[test]
    fn single_triple_offsets() {
        let p = distance_from_edges(3, &triple_edges(&[[0, 1, 2]]));
        assert_eq!(
            rows(&p),
            vec![
                vec![Some(0), Some(1), Some(2)],
                vec![Some(-1), Some(0), Some(1)],
                vec![Some(-2), Some(-1), Some(0)]
            ]
        );
        let d = distinction_from_kinds(&[false, true, false], &p, true).unwrap();
        let got: Vec<Option<u8>> = d.entries().to_vec();
        let want = [0, 1, 0, 2, 3, 2, 0, 1, 0].map(Some).to_vec();
        assert_eq!(got, want);
    }

    #[test]
    fn sibling_relations_are_g2g() {
        // (h, r, t), (h, s, u): tokens h=0 r=1 t=2 s=3 u=4
        let p = distance_from_edges(5, &triple_edges(&[[0, 1, 2], [0, 3, 4]]));
        assert_eq!(p.get(1, 3), None);
        assert_eq!(p.get(3, 1), None);
        assert_eq!(p.get(2, 4), None);
        let d = distinction_from_kinds(&[false, true, false, true, false], &p, true).unwrap();
        assert_eq!(d.get(1, 3), None);
        let d = distinction_from_kinds(&[false, true, false, true, false], &p, false).unwrap();
        assert_eq!(d.get(1, 3), Some(3));
    }

    #[test]
    fn chain_distance() {
        // (a, r, b), (b, s, c): a=0 r=1 b=2 s=3 c=4
        let p = distance_from_edges(5, &triple_edges(&[[0, 1, 2], [2, 3, 4]]));
        assert_eq!(p.get(0, 4), Some(4));
        assert_eq!(p.get(4, 0), Some(-4));
    }

    #[test]
    fn cycle_tie_is_positive() {
        // a -> r -> b -> s -> a: both directions have 2 hops between a and b
        let p = distance_from_edges(4, &triple_edges(&[[0, 1, 2], [2, 3, 0]]));
        assert_eq!(p.get(0, 2), Some(2));
        assert_eq!(p.get(2, 0), Some(2));
        // a -> r is 1 hop, r -> a is 3
        assert_eq!(p.get(0, 1), Some(1));
        assert_eq!(p.get(1, 0), Some(-1));
    }

    #[test]
    fn shape_mismatch_is_contract_error() {
        let p = distance_from_edges(3, &triple_edges(&[[0, 1, 2]]));
        assert!(matches!(distinction_from_kinds(&[false, true], &p, true), Err(Error::Contract(_))));
    }

    #[test]
    fn bucket_map_defaults() {
        let m = BucketMap::default();
        m.validate().unwrap();
        assert_eq!(m.g2g_bucket(), 31);
        assert_eq!(m.bucket(-15), (0, false));
        assert_eq!(m.bucket(0), (15, false));
        assert_eq!(m.bucket(15), (30, false));
        assert_eq!(m.bucket(16), (30, true));
        assert_eq!(m.bucket(-40), (0, true));
        assert!(BucketMap { num_distance_buckets: 31, max_exact_distance: 15 }.validate().is_err());
    }

    #[test]
    fn bucketize_counts_overflow() {
        // a path of 9 triples spans 18 hops
        let triples: Vec<[usize; 3]> = (0..9).map(|k| [2 * k, 2 * k + 1, 2 * k + 2]).collect();
        let p = distance_from_edges(19, &triple_edges(&triples));
        let b = bucketize_distance(&p, &BucketMap::default());
        let expected = p.entries().iter().flatten().filter(|d| d.abs() > 15).count();
        assert!(expected > 0);
        assert_eq!(b.beyond_range, expected);
        let d = distinction_from_kinds(&(0..19).map(|i| i % 2 == 1).collect::<Vec<_>>(), &p, true).unwrap();
        let db = bucketize_distinction(&d);
        assert_eq!(db.beyond_range, 0);
        assert!(db.buckets.iter().all(|&b| b < DISTINCTION_BUCKETS as u16));
    }

    #[test]
    fn grid_uses_g_marker() {
        let p = distance_from_edges(5, &triple_edges(&[[0, 1, 2], [0, 3, 4]]));
        let labels: Vec<String> = ["h", "r", "t", "s", "u"].iter().map(|s| s.to_string()).collect();
        let g = format_grid(&labels, 5, |i, j| p.get(i, j));
        let line_r: Vec<&str> = g.lines().nth(2).unwrap().split_whitespace().collect();
        assert_eq!(line_r, vec!["r", "-1", "0", "1", "G", "G"]);
    }
}
