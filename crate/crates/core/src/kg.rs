//! Triple store, vocabularies, inverse-relation doubling and the binary graph snapshot.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EntityId(pub u32);

impl EntityId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// Relation identifier in the doubled relation space.
///
/// Base relation `k` is stored as `2k`, its inverse as `2k + 1`, so
/// `inverse(inverse(r)) == r` without knowing the vocabulary size.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RelationId(u32);

impl RelationId {
    pub fn new(index: u32, inverse: bool) -> Self {
        Self(index * 2 + inverse as u32)
    }

    pub fn base(index: u32) -> Self {
        Self::new(index, false)
    }

    pub fn from_raw(raw: u32) -> Self {
        Self(raw)
    }

    /// Index into the base relation vocabulary.
    pub fn index(self) -> u32 {
        self.0 / 2
    }

    pub fn is_inverse(self) -> bool {
        self.0 & 1 == 1
    }

    #[must_use]
    pub fn inverse(self) -> Self {
        Self(self.0 ^ 1)
    }

    /// Row in tables that hold one entry per base and inverse relation.
    pub fn raw(self) -> usize {
        self.0 as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triple {
    pub head: EntityId,
    pub relation: RelationId,
    pub tail: EntityId,
}

impl Triple {
    pub fn new(head: EntityId, relation: RelationId, tail: EntityId) -> Self {
        Self { head, relation, tail }
    }

    #[must_use]
    pub fn inverse(self) -> Self {
        Self { head: self.tail, relation: self.relation.inverse(), tail: self.head }
    }
}

impl fmt::Display for Triple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}{}, {})", self.head.0, self.relation.index(), if self.relation.is_inverse() { "^-1" } else { "" }, self.tail.0)
    }
}

/// Insertion-ordered string vocabulary.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Vocab {
    names: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_names<I: IntoIterator<Item = S>, S: Into<String>>(names: I) -> Self {
        let mut v = Self::new();
        for n in names {
            v.get_or_insert(&n.into());
        }
        v
    }

    pub fn get_or_insert(&mut self, name: &str) -> u32 {
        if let Some(&i) = self.index.get(name) {
            return i;
        }
        let i = self.names.len() as u32;
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), i);
        i
    }

    pub fn get(&self, name: &str) -> Option<u32> {
        self.index.get(name).copied()
    }

    pub fn name(&self, i: u32) -> Option<&str> {
        self.names.get(i as usize).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VocabMode {
    /// Unknown names are appended to the vocabulary.
    Grow,
    /// Unknown names are a lookup error.
    Frozen,
}

/// Reads `head<TAB>relation<TAB>tail` lines, resolving names against the vocabularies.
pub fn load_triples(
    path: impl AsRef<Path>,
    entities: &mut Vocab,
    relations: &mut Vocab,
    mode: VocabMode,
) -> Result<Vec<Triple>> {
    let file = File::open(path)?;
    parse_triples(BufReader::new(file), entities, relations, mode)
}

pub fn parse_triples<R: BufRead>(
    reader: R,
    entities: &mut Vocab,
    relations: &mut Vocab,
    mode: VocabMode,
) -> Result<Vec<Triple>> {
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = n + 1;
        let trimmed = line.trim_end_matches(['\r', '\n']);
        if trimmed.is_empty() {
            continue;
        }
        let fields: Vec<&str> = trimmed.split('\t').collect();
        if fields.len() != 3 || fields.iter().any(|f| f.is_empty()) {
            return Err(Error::Parse {
                line: lineno,
                message: format!("expected head<TAB>relation<TAB>tail, got {trimmed:?}"),
            });
        }
        let resolve = |vocab: &mut Vocab, name: &str, kind: &str| -> Result<u32> {
            match mode {
                VocabMode::Grow => Ok(vocab.get_or_insert(name)),
                VocabMode::Frozen => vocab.get(name).ok_or_else(|| {
                    Error::Lookup(format!("unknown {kind} {name:?} at line {lineno}"))
                }),
            }
        };
        let h = resolve(entities, fields[0], "entity")?;
        let r = resolve(relations, fields[1], "relation")?;
        let t = resolve(entities, fields[2], "entity")?;
        out.push(Triple::new(EntityId(h), RelationId::base(r), EntityId(t)));
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Degree {
    pub in_degree: u32,
    pub out_degree: u32,
}

impl Degree {
    pub fn total(self) -> u32 {
        self.in_degree + self.out_degree
    }
}

/// Immutable triple store with head/tail/relation indices and degree statistics.
#[derive(Clone, Debug)]
pub struct KnowledgeGraph {
    entities: Vocab,
    relations: Vocab,
    triples: Vec<Triple>,
    by_head: Vec<Vec<u32>>,
    by_tail: Vec<Vec<u32>>,
    by_relation: Vec<Vec<u32>>,
    degree: Vec<Degree>,
    members: HashSet<Triple>,
    doubled: bool,
}

impl KnowledgeGraph {
    /// Builds the indices. Duplicate triples are dropped with a warning.
    pub fn new(entities: Vocab, relations: Vocab, triples: Vec<Triple>) -> Result<Self> {
        let doubled = triples.iter().any(|t| t.relation.is_inverse());
        Self::build(entities, relations, triples, doubled)
    }

    fn build(entities: Vocab, relations: Vocab, triples: Vec<Triple>, doubled: bool) -> Result<Self> {
        let n = entities.len();
        let nr = relations.len() * 2;
        let mut members = HashSet::with_capacity(triples.len());
        let mut kept = Vec::with_capacity(triples.len());
        let mut dropped = 0usize;
        for t in triples {
            if t.head.index() >= n || t.tail.index() >= n || t.relation.raw() >= nr {
                return Err(Error::Lookup(format!("triple {t} outside vocabulary")));
            }
            if members.insert(t) {
                kept.push(t);
            } else {
                dropped += 1;
            }
        }
        if dropped > 0 {
            log::warn!("dropped {dropped} duplicate triples");
        }
        let mut by_head = vec![Vec::new(); n];
        let mut by_tail = vec![Vec::new(); n];
        let mut by_relation = vec![Vec::new(); nr];
        let mut degree = vec![Degree::default(); n];
        for (i, t) in kept.iter().enumerate() {
            let i = i as u32;
            by_head[t.head.index()].push(i);
            by_tail[t.tail.index()].push(i);
            by_relation[t.relation.raw()].push(i);
            degree[t.head.index()].out_degree += 1;
            degree[t.tail.index()].in_degree += 1;
        }
        Ok(Self { entities, relations, triples: kept, by_head, by_tail, by_relation, degree, members, doubled })
    }

    pub fn empty() -> Self {
        Self::build(Vocab::new(), Vocab::new(), Vec::new(), false).expect("empty graph")
    }

    /// Adds `(t, r^-1, h)` for every `(h, r, t)`.
    pub fn add_inverse_relations(&self) -> Result<KnowledgeGraph> {
        if self.doubled {
            return Err(Error::AlreadyDoubled);
        }
        let mut triples = self.triples.clone();
        triples.extend(self.triples.iter().map(|t| t.inverse()));
        Self::build(self.entities.clone(), self.relations.clone(), triples, true)
    }

    pub fn is_doubled(&self) -> bool {
        self.doubled
    }

    pub fn entities(&self) -> &Vocab {
        &self.entities
    }

    /// Base relation vocabulary (inverse relations are implicit).
    pub fn relations(&self) -> &Vocab {
        &self.relations
    }

    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    /// Relation count in the current graph: base count, doubled after inversion.
    pub fn num_relations(&self) -> usize {
        if self.doubled {
            self.relations.len() * 2
        } else {
            self.relations.len()
        }
    }

    /// Width of per-relation tables (base and inverse slots).
    pub fn relation_slots(&self) -> usize {
        self.relations.len() * 2
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn triple(&self, i: u32) -> Triple {
        self.triples[i as usize]
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    pub fn contains(&self, t: &Triple) -> bool {
        self.members.contains(t)
    }

    pub fn check_entity(&self, e: EntityId) -> Result<()> {
        if e.index() < self.num_entities() {
            Ok(())
        } else {
            Err(Error::Lookup(format!("entity {} not in vocabulary of {}", e.0, self.num_entities())))
        }
    }

    pub fn check_relation(&self, r: RelationId) -> Result<()> {
        let ok = r.index() < self.relations.len() as u32 && (self.doubled || !r.is_inverse());
        if ok {
            Ok(())
        } else {
            Err(Error::Lookup(format!("relation {} not in vocabulary", r.raw())))
        }
    }

    /// Indices of triples whose head is `e`.
    pub fn by_head(&self, e: EntityId) -> &[u32] {
        &self.by_head[e.index()]
    }

    pub fn by_tail(&self, e: EntityId) -> &[u32] {
        &self.by_tail[e.index()]
    }

    pub fn by_relation(&self, r: RelationId) -> &[u32] {
        self.by_relation.get(r.raw()).map_or(&[], Vec::as_slice)
    }

    pub fn degree(&self, e: EntityId) -> Result<Degree> {
        self.check_entity(e)?;
        Ok(self.degree[e.index()])
    }

    /// Total degree, zero for out-of-range ids.
    pub fn total_degree(&self, e: EntityId) -> u32 {
        self.degree.get(e.index()).map_or(0, |d| d.total())
    }

    pub fn entity_name(&self, e: EntityId) -> String {
        self.entities.name(e.0).map_or_else(|| format!("#{}", e.0), str::to_string)
    }

    pub fn relation_name(&self, r: RelationId) -> String {
        let base = self.relations.name(r.index()).map_or_else(|| format!("#{}", r.index()), str::to_string);
        if r.is_inverse() {
            format!("{INVERSE_PREFIX}{base}")
        } else {
            base
        }
    }

    /// Resolves a relation name, accepting the `inverse of ` prefix.
    pub fn resolve_relation(&self, name: &str) -> Result<RelationId> {
        if let Some(i) = self.relations.get(name) {
            return Ok(RelationId::base(i));
        }
        if let Some(base) = name.strip_prefix(INVERSE_PREFIX) {
            if let Some(i) = self.relations.get(base) {
                return Ok(RelationId::new(i, true));
            }
        }
        Err(Error::Lookup(format!("unknown relation {name:?}")))
    }

    pub fn resolve_entity(&self, name: &str) -> Result<EntityId> {
        self.entities.get(name).map(EntityId).ok_or_else(|| Error::Lookup(format!("unknown entity {name:?}")))
    }
}

/// Marker prepended to the surface text of inverse relations.
pub const INVERSE_PREFIX: &str = "inverse of ";

/// Surface text and base-tokenizer token ids for every entity and relation.
#[derive(Clone, Debug, PartialEq)]
pub struct TextCatalog {
    pub entity_text: Vec<String>,
    /// Indexed by [`RelationId::raw`].
    pub relation_text: Vec<String>,
    pub entity_tokens: Vec<Vec<u32>>,
    pub relation_tokens: Vec<Vec<u32>>,
    pub words: Vocab,
}

impl TextCatalog {
    /// Catalog whose descriptions are the vocabulary names themselves.
    pub fn from_names(kg: &KnowledgeGraph) -> Self {
        Self::build(kg, &HashMap::new(), &HashMap::new())
    }

    /// Loads `id<TAB>description` files; ids missing from a file fall back to their name.
    pub fn load(
        kg: &KnowledgeGraph,
        entity_file: Option<&Path>,
        relation_file: Option<&Path>,
    ) -> Result<Self> {
        let ents = match entity_file {
            Some(p) => read_text_map(p)?,
            None => HashMap::new(),
        };
        let rels = match relation_file {
            Some(p) => read_text_map(p)?,
            None => HashMap::new(),
        };
        Ok(Self::build(kg, &ents, &rels))
    }

    fn build(kg: &KnowledgeGraph, ents: &HashMap<String, String>, rels: &HashMap<String, String>) -> Self {
        let mut words = Vocab::new();
        let mut entity_text = Vec::with_capacity(kg.num_entities());
        let mut entity_tokens = Vec::with_capacity(kg.num_entities());
        for name in kg.entities().names() {
            let text = ents.get(name).cloned().unwrap_or_else(|| name.clone());
            entity_tokens.push(tokenize(&text, name, &mut words));
            entity_text.push(text);
        }
        let mut relation_text = Vec::with_capacity(kg.relation_slots());
        let mut relation_tokens = Vec::with_capacity(kg.relation_slots());
        for name in kg.relations().names() {
            let text = rels.get(name).cloned().unwrap_or_else(|| name.clone());
            let inv = format!("{INVERSE_PREFIX}{text}");
            relation_tokens.push(tokenize(&text, name, &mut words));
            relation_tokens.push(tokenize(&inv, name, &mut words));
            relation_text.push(text);
            relation_text.push(inv);
        }
        Self { entity_text, relation_text, entity_tokens, relation_tokens, words }
    }

    pub fn entity_tokens(&self, e: EntityId) -> &[u32] {
        &self.entity_tokens[e.index()]
    }

    pub fn relation_tokens(&self, r: RelationId) -> &[u32] {
        &self.relation_tokens[r.raw()]
    }
}

fn read_text_map(path: &Path) -> Result<HashMap<String, String>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = HashMap::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let (id, text) = line.split_once('\t').ok_or_else(|| Error::Parse {
            line: n + 1,
            message: "expected id<TAB>description".into(),
        })?;
        out.insert(id.to_string(), text.trim().to_string());
    }
    Ok(out)
}

/// Lower-cased word tokenizer: alphanumeric runs become tokens.
pub fn tokenize(text: &str, fallback: &str, words: &mut Vocab) -> Vec<u32> {
    let mut ids: Vec<u32> = split_words(text).iter().map(|w| words.get_or_insert(w)).collect();
    if ids.is_empty() {
        ids.push(words.get_or_insert(&fallback.to_lowercase()));
    }
    ids
}

pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            cur.extend(ch.to_lowercase());
        } else {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            if !ch.is_whitespace() && !ch.is_control() {
                out.push(ch.to_string());
            }
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Train graph (inverse-doubled) plus the held-out splits over one vocabulary.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: KnowledgeGraph,
    pub valid: Vec<Triple>,
    pub test: Vec<Triple>,
}

impl Dataset {
    /// Vocabulary order follows first appearance in the train split, then valid, then test.
    pub fn from_files(train: &Path, valid: Option<&Path>, test: Option<&Path>) -> Result<Self> {
        let mut ents = Vocab::new();
        let mut rels = Vocab::new();
        let tr = load_triples(train, &mut ents, &mut rels, VocabMode::Grow)?;
        let va = match valid {
            Some(p) => load_triples(p, &mut ents, &mut rels, VocabMode::Grow)?,
            None => Vec::new(),
        };
        let te = match test {
            Some(p) => load_triples(p, &mut ents, &mut rels, VocabMode::Grow)?,
            None => Vec::new(),
        };
        Self::from_triples(ents, rels, tr, va, te)
    }

    pub fn from_triples(
        entities: Vocab,
        relations: Vocab,
        train: Vec<Triple>,
        valid: Vec<Triple>,
        test: Vec<Triple>,
    ) -> Result<Self> {
        let train = KnowledgeGraph::new(entities, relations, train)?.add_inverse_relations()?;
        Ok(Self { train, valid, test })
    }

    pub fn num_entities(&self) -> usize {
        self.train.num_entities()
    }

    /// Every known true triple across splits, in both directions.
    pub fn known_true(&self) -> KnownTrue {
        let mut k = KnownTrue::default();
        for t in self.train.triples() {
            k.insert(*t);
        }
        for t in self.valid.iter().chain(&self.test) {
            k.insert(*t);
            k.insert(t.inverse());
        }
        k
    }
}

/// Known tails per `(head, relation)` query, used for filtered ranking.
#[derive(Clone, Debug, Default)]
pub struct KnownTrue {
    tails: HashMap<(EntityId, RelationId), HashSet<EntityId>>,
}

impl KnownTrue {
    pub fn insert(&mut self, t: Triple) {
        self.tails.entry((t.head, t.relation)).or_default().insert(t.tail);
    }

    pub fn tails(&self, h: EntityId, r: RelationId) -> Option<&HashSet<EntityId>> {
        self.tails.get(&(h, r))
    }
}

const SNAPSHOT_MAGIC: &[u8; 6] = b"IGTKG1";

impl Dataset {
    /// Writes the `IGTKG1` container: magic, then little-endian u64 counts,
    /// vocabularies as length-prefixed UTF-8, and base-relation triples per split.
    pub fn write_snapshot(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_snapshot_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn write_snapshot_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(SNAPSHOT_MAGIC)?;
        write_vocab(w, self.train.entities())?;
        write_vocab(w, self.train.relations())?;
        let base: Vec<Triple> =
            self.train.triples().iter().filter(|t| !t.relation.is_inverse()).copied().collect();
        for split in [&base, &self.valid, &self.test] {
            write_u64(w, split.len() as u64)?;
            for t in split.iter() {
                write_u64(w, t.head.0 as u64)?;
                write_u64(w, t.relation.index() as u64)?;
                write_u64(w, t.tail.0 as u64)?;
            }
        }
        Ok(())
    }

    pub fn read_snapshot(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read_snapshot_from(&mut r)
    }

    pub fn read_snapshot_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 6];
        r.read_exact(&mut magic)?;
        if &magic != SNAPSHOT_MAGIC {
            return Err(Error::Format("not an IGTKG1 snapshot".into()));
        }
        let entities = read_vocab(r)?;
        let relations = read_vocab(r)?;
        let mut splits = Vec::with_capacity(3);
        for _ in 0..3 {
            let n = read_u64(r)? as usize;
            let mut v = Vec::with_capacity(n.min(1 << 24));
            for _ in 0..n {
                let h = read_u64(r)? as u32;
                let rel = read_u64(r)? as u32;
                let t = read_u64(r)? as u32;
                v.push(Triple::new(EntityId(h), RelationId::base(rel), EntityId(t)));
            }
            splits.push(v);
        }
        let test = splits.pop().unwrap_or_default();
        let valid = splits.pop().unwrap_or_default();
        let train = splits.pop().unwrap_or_default();
        Self::from_triples(entities, relations, train, valid, test)
    }
}

fn write_u64<W: Write>(w: &mut W, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn write_vocab<W: Write>(w: &mut W, v: &Vocab) -> Result<()> {
    write_u64(w, v.len() as u64)?;
    for name in v.names() {
        write_u64(w, name.len() as u64)?;
        w.write_all(name.as_bytes())?;
    }
    Ok(())
}

fn read_vocab<R: Read>(r: &mut R) -> Result<Vocab> {
    let n = read_u64(r)? as usize;
    let mut v = Vocab::new();
    for _ in 0..n {
        let len = read_u64(r)? as usize;
        let mut buf = vec![0u8; len];
        r.read_exact(&mut buf)?;
        let s = String::from_utf8(buf).map_err(|e| Error::Format(e.to_string()))?;
        v.get_or_insert(&s);
    }
    if v.len() != n {
        return Err(Error::Format("duplicate vocabulary entry".into()));
    }
    Ok(v)
}
