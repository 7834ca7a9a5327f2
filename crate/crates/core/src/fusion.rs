//! Coupling between encoder outputs and a prompt-embedding provider.
//!
//! The provider sees the KG language prompt for `(h, r, ?)`. Its `h` and `r`
//! slot embeddings are convex mixtures of its own base embeddings and adapted
//! encoder states; the last-token state it returns is prepended to every
//! classifier input.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::encoder::{linear, PoolingOperator};
use crate::error::{Error, Result};
use crate::kg::{split_words, EntityId, RelationId, TextCatalog, Vocab};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::sampler::{Subgraph, Token};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Relation occurrences pooled into the relation context vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RelationScope {
    /// The target relation token alone.
    R,
    /// Occurrences of `r` in the target, `T_hr` and `T_h`.
    MrL,
    /// Occurrences of `r` anywhere in the subgraph.
    MrG,
}

impl std::str::FromStr for RelationScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "r" => Ok(Self::R),
            "mr_l" => Ok(Self::MrL),
            "mr_g" => Ok(Self::MrG),
            other => Err(Error::Config(format!("unknown relation scope {other:?} (expected r, mr_l or mr_g)"))),
        }
    }
}

impl std::fmt::Display for RelationScope {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::R => "r",
            Self::MrL => "mr_l",
            Self::MrG => "mr_g",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProviderKind {
    Stub,
    Cache,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub lambda: f64,
    pub scope: RelationScope,
    pub provider: ProviderKind,
    pub stub: StubConfig,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self { lambda: 0.5, scope: RelationScope::MrG, provider: ProviderKind::Stub, stub: StubConfig::default() }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if self.provider == ProviderKind::Cache && self.lambda != 0.0 {
            return Err(Error::Config("the embedding cache provider only supports lambda = 0".into()));
        }
        self.stub.validate()
    }
}

/// Source of `t_h^llm`, `t_r^llm` and `t_hr^llm`.
pub trait PromptEmbeddingProvider<T: Scalar>: Send + Sync {
    fn d_llm(&self) -> usize;

    /// Unfused `(t_h^llm, t_r^llm)`, each `1 x d_llm`.
    fn base_embeddings(&self, tape: &mut Tape<'_, T>, h: EntityId, r: RelationId) -> Result<(Var, Var)>;

    /// Last-token state for the prompt whose slots hold `h_slot` and `r_slot`.
    fn pair_embedding(&self, tape: &mut Tape<'_, T>, h: EntityId, r: RelationId, h_slot: Var, r_slot: Var)
        -> Result<Var>;
}

/// Linear map from encoder width to provider width.
#[derive(Clone, Debug)]
pub struct Adapter {
    pub w: ParamId,
    pub b: ParamId,
}

impl Adapter {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, d_model: usize, d_llm: usize, rng: &mut R) -> Self {
        let w = store.add_normal("fusion.adapter.w", ParamGroup::Other, d_model, d_llm, (1.0 / d_model as f64).sqrt(), rng);
        let b = store.add_no_decay("fusion.adapter.b", ParamGroup::Other, Tensor::zeros(1, d_llm));
        Self { w, b }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Var {
        linear(tape, x, self.w, self.b)
    }
}

/// Token positions of the relation occurrences selected by `scope`.
pub fn relation_context_tokens(subgraph: &Subgraph, scope: RelationScope) -> Vec<usize> {
    let target = subgraph.triple_tokens[0][1];
    if scope == RelationScope::R {
        return vec![target];
    }
    subgraph
        .tokens
        .iter()
        .enumerate()
        .filter_map(|(pos, tok)| match *tok {
            Token::Relation { relation, triple } if relation == subgraph.relation => {
                let set = subgraph.triples[triple].set;
                (scope == RelationScope::MrG || set.is_local()).then_some(pos)
            }
            _ => None,
        })
        .collect()
}

/// `t_bar_r`: the target relation state for scope `r`, else a pooled occurrence set.
pub fn pool_relation_context<T: Scalar>(
    tape: &mut Tape<'_, T>,
    states: Var,
    subgraph: &Subgraph,
    scope: RelationScope,
    pooler: Option<&PoolingOperator>,
) -> Result<Var> {
    let rows = relation_context_tokens(subgraph, scope);
    match (scope, pooler) {
        (RelationScope::R, _) => Ok(tape.gather_rows(states, &rows)),
        (_, Some(p)) => Ok(p.forward(tape, states, &[rows])),
        (_, None) => Err(Error::Config(format!("scope {scope} needs a relation pooler"))),
    }
}

/// `(1 - lambda) base + lambda adapted`; the endpoints return one side untouched.
pub fn fuse<T: Scalar>(tape: &mut Tape<'_, T>, base: Var, adapted: impl FnOnce(&mut Tape<'_, T>) -> Var, lambda: f64) -> Result<Var> {
    if lambda == 0.0 {
        return Ok(base);
    }
    let a = adapted(tape);
    if tape.shape(a) != tape.shape(base) {
        return Err(Error::Contract(format!("adapter output {:?} vs base {:?}", tape.shape(a), tape.shape(base))));
    }
    if lambda == 1.0 {
        return Ok(a);
    }
    Ok(tape.weighted_sum(&[(base, T::c(1.0 - lambda)), (a, T::c(lambda))]))
}

/// Entity fusion on plain tensors.
pub fn fuse_entity<T: Scalar>(
    store: &ParamStore<T>,
    t_h_llm: &Tensor<T>,
    t_h: &Tensor<T>,
    adapter: &Adapter,
    lambda: f64,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new(store);
    let base = tape.constant(t_h_llm.clone());
    let x = tape.constant(t_h.clone());
    let adapter_in = store.value(adapter.w).rows();
    if t_h.cols() != adapter_in {
        return Err(Error::Contract(format!("adapter expects width {adapter_in}, got {}", t_h.cols())));
    }
    let out = fuse(&mut tape, base, |tape| adapter.forward(tape, x), lambda)?;
    Ok(tape.value(out).clone())
}

/// Relation fusion has the same form as entity fusion, applied to `t_bar_r`.
pub fn fuse_relation<T: Scalar>(
    store: &ParamStore<T>,
    t_r_llm: &Tensor<T>,
    t_bar_r: &Tensor<T>,
    adapter: &Adapter,
    lambda: f64,
) -> Result<Tensor<T>> {
    fuse_entity(store, t_r_llm, t_bar_r, adapter, lambda)
}

/// Prepends the provider state to every pooled row.
pub fn concat_classifier_input<T: Scalar>(tape: &mut Tape<'_, T>, t_hr: Option<Var>, pooled: Var) -> Var {
    match t_hr {
        None => pooled,
        Some(v) => {
            let rows = tape.shape(pooled).0;
            let prefix = tape.repeat_row(v, rows);
            tape.concat_cols(&[prefix, pooled])
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StubConfig {
    pub d_llm: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub init_std: f64,
}

impl Default for StubConfig {
    fn default() -> Self {
        Self { d_llm: 64, n_layers: 2, n_heads: 2, init_std: 0.02 }
    }
}

impl StubConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_llm == 0 || self.n_heads == 0 || !self.d_llm.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!("stub width {} must be a positive multiple of {} heads", self.d_llm, self.n_heads)));
        }
        Ok(())
    }
}

/// One prompt position.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PromptToken {
    Word(u32),
    HeadSlot,
    RelationSlot,
}

/// KG language prompt, as a list of pieces between which descriptions and slots are spliced.
const PROMPT_INTRO: &str = "### Instruction\nSuppose that you are an excellent linguist studying a three-word language. \
Given the following dictionary:\nInput Type Description";
const PROMPT_HEAD: &str = "Head entity";
const PROMPT_RELATION: &str = "Relation";
const PROMPT_ASK: &str = "Please complete the last word (?) of the sentence:";
const PROMPT_RESPONSE: &str = "?\n\n### Response:";

/// Prompt layout for `(h, r)`, with the positions of the description words of `h` and `r`.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptLayout {
    pub tokens: Vec<PromptToken>,
    pub head_words: Vec<usize>,
    pub relation_words: Vec<usize>,
}

#[derive(Clone, Debug)]
struct StubLayer {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wqkv: [ParamId; 3],
    bqkv: [ParamId; 3],
    wo: ParamId,
    bo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// Small trainable causal transformer standing in for a language model.
#[derive(Clone, Debug)]
pub struct StubProvider {
    config: StubConfig,
    words: Vocab,
    entity_words: Vec<Vec<u32>>,
    relation_words: Vec<Vec<u32>>,
    template: [Vec<u32>; 5],
    word_table: ParamId,
    pos_table: ParamId,
    max_len: usize,
    layers: Vec<StubLayer>,
    final_g: ParamId,
    final_b: ParamId,
}

impl StubProvider {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        config: StubConfig,
        catalog: &TextCatalog,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let mut words = catalog.words.clone();
        let template = [PROMPT_INTRO, PROMPT_HEAD, PROMPT_RELATION, PROMPT_ASK, PROMPT_RESPONSE]
            .map(|text| split_words(text).iter().map(|w| words.get_or_insert(w)).collect::<Vec<u32>>());
        let longest = |v: &[Vec<u32>]| v.iter().map(Vec::len).max().unwrap_or(0);
        let max_len = template.iter().map(Vec::len).sum::<usize>()
            + longest(&catalog.entity_tokens)
            + longest(&catalog.relation_tokens)
            + 6;
        let g = ParamGroup::Provider;
        let d = config.d_llm;
        let std = config.init_std;
        let word_table = store.add_normal("provider.words", g, words.len().max(1), d, std, rng);
        let pos_table = store.add_normal("provider.positions", g, max_len, d, std, rng);
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let p = format!("provider.layer{l}");
            let ones = || Tensor::filled(1, d, T::one());
            let zeros = |m| Tensor::zeros(1, m);
            let mut lin = |name: &str, rows, cols, store: &mut ParamStore<T>| {
                (
                    store.add_normal(format!("{p}.{name}.w"), g, rows, cols, std, rng),
                    store.add_no_decay(format!("{p}.{name}.b"), g, zeros(cols)),
                )
            };
            let (wq, bq) = lin("q", d, d, store);
            let (wk, bk) = lin("k", d, d, store);
            let (wv, bv) = lin("v", d, d, store);
            let (wo, bo) = lin("o", d, d, store);
            let (w1, b1) = lin("ffn1", d, 2 * d, store);
            let (w2, b2) = lin("ffn2", 2 * d, d, store);
            layers.push(StubLayer {
                ln1_g: store.add_no_decay(format!("{p}.ln1.gamma"), g, ones()),
                ln1_b: store.add_no_decay(format!("{p}.ln1.beta"), g, zeros(d)),
                wqkv: [wq, wk, wv],
                bqkv: [bq, bk, bv],
                wo,
                bo,
                ln2_g: store.add_no_decay(format!("{p}.ln2.gamma"), g, ones()),
                ln2_b: store.add_no_decay(format!("{p}.ln2.beta"), g, zeros(d)),
                w1,
                b1,
                w2,
                b2,
            });
        }
        let final_g = store.add_no_decay("provider.final_ln.gamma", g, Tensor::filled(1, d, T::one()));
        let final_b = store.add_no_decay("provider.final_ln.beta", g, Tensor::zeros(1, d));
        Ok(Self {
            config,
            words,
            entity_words: catalog.entity_tokens.clone(),
            relation_words: catalog.relation_tokens.clone(),
            template,
            word_table,
            pos_table,
            max_len,
            layers,
            final_g,
            final_b,
        })
    }

    pub fn words(&self) -> &Vocab {
        &self.words
    }

    pub fn layout(&self, h: EntityId, r: RelationId) -> Result<PromptLayout> {
        let hw = self
            .entity_words
            .get(h.index())
            .ok_or_else(|| Error::Lookup(format!("no prompt text for entity {}", h.0)))?;
        let rw = self
            .relation_words
            .get(r.raw())
            .ok_or_else(|| Error::Lookup(format!("no prompt text for relation {}", r.raw())))?;
        let mut tokens = Vec::new();
        let words = |tokens: &mut Vec<PromptToken>, ws: &[u32]| tokens.extend(ws.iter().map(|&w| PromptToken::Word(w)));
        words(&mut tokens, &self.template[0]);
        tokens.push(PromptToken::HeadSlot);
        words(&mut tokens, &self.template[1]);
        let start = tokens.len();
        words(&mut tokens, hw);
        let head_words = (start..tokens.len()).collect();
        tokens.push(PromptToken::RelationSlot);
        words(&mut tokens, &self.template[2]);
        let start = tokens.len();
        words(&mut tokens, rw);
        let relation_words = (start..tokens.len()).collect();
        words(&mut tokens, &self.template[3]);
        tokens.extend([PromptToken::HeadSlot, PromptToken::RelationSlot]);
        words(&mut tokens, &self.template[4]);
        tokens.extend([PromptToken::HeadSlot, PromptToken::RelationSlot]);
        debug_assert!(tokens.len() <= self.max_len);
        Ok(PromptLayout { tokens, head_words, relation_words })
    }

    fn word_rows(layout: &PromptLayout, positions: &[usize]) -> Vec<usize> {
        positions
            .iter()
            .map(|&p| match layout.tokens[p] {
                PromptToken::Word(w) => w as usize,
                _ => unreachable!("description positions hold words"),
            })
            .collect()
    }
}

impl<T: Scalar> PromptEmbeddingProvider<T> for StubProvider {
    fn d_llm(&self) -> usize {
        self.config.d_llm
    }

    /// Mean input embedding of the description words.
    fn base_embeddings(&self, tape: &mut Tape<'_, T>, h: EntityId, r: RelationId) -> Result<(Var, Var)> {
        let layout = self.layout(h, r)?;
        let table = tape.param(self.word_table);
        let hr = Self::word_rows(&layout, &layout.head_words);
        let rr = Self::word_rows(&layout, &layout.relation_words);
        Ok((tape.mean_rows(table, &hr), tape.mean_rows(table, &rr)))
    }

    fn pair_embedding(&self, tape: &mut Tape<'_, T>, h: EntityId, r: RelationId, h_slot: Var, r_slot: Var) -> Result<Var> {
        let d = self.config.d_llm;
        for slot in [h_slot, r_slot] {
            if tape.shape(slot) != (1, d) {
                return Err(Error::Contract(format!("slot embedding {:?}, expected (1, {d})", tape.shape(slot))));
            }
        }
        let layout = self.layout(h, r)?;
        let n = layout.tokens.len();
        let table = tape.param(self.word_table);
        let sources: Vec<(Var, usize)> = layout
            .tokens
            .iter()
            .map(|t| match *t {
                PromptToken::Word(w) => (table, w as usize),
                PromptToken::HeadSlot => (h_slot, 0),
                PromptToken::RelationSlot => (r_slot, 0),
            })
            .collect();
        let x = tape.stack_rows(&sources);
        let pos_table = tape.param(self.pos_table);
        let pos = tape.gather_rows(pos_table, &(0..n).collect::<Vec<_>>());
        let mut x = tape.add(x, pos);
        let mask = Tensor::from_fn(n, n, |i, j| if j > i { T::c(-1e9) } else { T::zero() });
        let heads = self.config.n_heads;
        let dh = d / heads;
        let scale = T::one() / T::count(dh).sqrt();
        for layer in &self.layers {
            let (g, b) = (tape.param(layer.ln1_g), tape.param(layer.ln1_b));
            let hdn = tape.layer_norm(x, g, b);
            let q = linear(tape, hdn, layer.wqkv[0], layer.bqkv[0]);
            let k = linear(tape, hdn, layer.wqkv[1], layer.bqkv[1]);
            let v = linear(tape, hdn, layer.wqkv[2], layer.bqkv[2]);
            let outs: Vec<Var> = (0..heads)
                .map(|hd| {
                    let qh = tape.slice_cols(q, hd * dh, dh);
                    let kh = tape.slice_cols(k, hd * dh, dh);
                    let vh = tape.slice_cols(v, hd * dh, dh);
                    let s = tape.matmul_nt(qh, kh);
                    let s = tape.scale(s, scale);
                    let s = tape.add_const(s, &mask);
                    let a = tape.softmax_rows(s);
                    tape.matmul(a, vh)
                })
                .collect();
            let att = if outs.len() == 1 { outs[0] } else { tape.concat_cols(&outs) };
            let o = linear(tape, att, layer.wo, layer.bo);
            x = tape.add(x, o);
            let (g, b) = (tape.param(layer.ln2_g), tape.param(layer.ln2_b));
            let hdn = tape.layer_norm(x, g, b);
            let f = linear(tape, hdn, layer.w1, layer.b1);
            let f = tape.gelu(f);
            let f = linear(tape, f, layer.w2, layer.b2);
            x = tape.add(x, f);
        }
        let last = tape.gather_rows(x, &[n - 1]);
        let (g, b) = (tape.param(self.final_g), tape.param(self.final_b));
        Ok(tape.layer_norm(last, g, b))
    }
}

pub const CACHE_MAGIC: &[u8; 7] = b"IGTEMB1";
/// Header flag: entity and relation vectors are plain means over surface tokens.
pub const FLAG_MEAN_POOLED: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CacheKey {
    Entity(u32),
    Relation(u32),
    Pair(u32, u32),
}

impl CacheKey {
    fn encode(self) -> (u8, u32, u32) {
        match self {
            CacheKey::Entity(e) => (0, e, 0),
            CacheKey::Relation(r) => (1, r, 0),
            CacheKey::Pair(h, r) => (2, h, r),
        }
    }

    fn decode(kind: u8, a: u32, b: u32) -> Result<Self> {
        match (kind, b) {
            (0, 0) => Ok(CacheKey::Entity(a)),
            (1, 0) => Ok(CacheKey::Relation(a)),
            (2, _) => Ok(CacheKey::Pair(a, b)),
            (0 | 1, _) => Err(Error::Format(format!("record kind {kind} must have a zero second id"))),
            _ => Err(Error::Format(format!("unknown record kind {kind}"))),
        }
    }
}

/// Contents of an `IGTEMB1` file.
///
/// Layout (little-endian): magic `IGTEMB1`, `u32` width, `u32` flags, `u64`
/// record count, then per record `u8` kind (0 entity, 1 relation, 2 pair),
/// `u32` id, `u32` second id (relation of a pair, else 0) and `width` `f32`s.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EmbeddingCache {
    pub d_llm: usize,
    pub flags: u32,
    pub records: Vec<(CacheKey, Vec<f32>)>,
}

impl EmbeddingCache {
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(CACHE_MAGIC)?;
        w.write_all(&(self.d_llm as u32).to_le_bytes())?;
        w.write_all(&self.flags.to_le_bytes())?;
        w.write_all(&(self.records.len() as u64).to_le_bytes())?;
        for (key, v) in &self.records {
            if v.len() != self.d_llm {
                return Err(Error::Format(format!("record {key:?} has width {}, header says {}", v.len(), self.d_llm)));
            }
            let (kind, a, b) = key.encode();
            w.write_all(&[kind])?;
            w.write_all(&a.to_le_bytes())?;
            w.write_all(&b.to_le_bytes())?;
            for x in v {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    /// Strict reader: bad magic, unknown kinds, duplicate keys, truncation and
    /// trailing bytes are all format errors.
    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let mut cur = Cursor { bytes: &bytes, pos: 0 };
        if cur.take(7)? != CACHE_MAGIC {
            return Err(Error::Format("missing IGTEMB1 magic".into()));
        }
        let d_llm = cur.u32()? as usize;
        let flags = cur.u32()?;
        let count = cur.u64()?;
        let record_len = 9 + 4 * d_llm;
        if (bytes.len() - cur.pos) as u64 != count.saturating_mul(record_len as u64) {
            return Err(Error::Format(format!(
                "header declares {count} records of {record_len} bytes, body has {} bytes",
                bytes.len() - cur.pos
            )));
        }
        let mut records = Vec::with_capacity(count as usize);
        let mut seen = std::collections::HashSet::new();
        for _ in 0..count {
            let kind = cur.take(1)?[0];
            let a = cur.u32()?;
            let b = cur.u32()?;
            let key = CacheKey::decode(kind, a, b)?;
            if !seen.insert(key) {
                return Err(Error::Format(format!("duplicate record {key:?}")));
            }
            let v: Vec<f32> = (0..d_llm).map(|_| cur.f32()).collect::<Result<_>>()?;
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Format(format!("non-finite value in record {key:?}")));
            }
            records.push((key, v));
        }
        Ok(Self { d_llm, flags, records })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let mut f = std::fs::File::open(path)?;
        Self::read_from(&mut f)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("truncated embedding cache".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Read-only provider backed by precomputed vectors; valid only with `lambda = 0`.
#[derive(Clone, Debug)]
pub struct CacheProvider {
    d_llm: usize,
    vectors: HashMap<CacheKey, Vec<f32>>,
}

impl CacheProvider {
    pub fn new(cache: EmbeddingCache) -> Self {
        Self { d_llm: cache.d_llm, vectors: cache.records.into_iter().collect() }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(Self::new(EmbeddingCache::read(path)?))
    }

    fn vector<T: Scalar>(&self, key: CacheKey) -> Result<Tensor<T>> {
        let v = self.vectors.get(&key).ok_or_else(|| Error::Lookup(format!("embedding cache has no record {key:?}")))?;
        Ok(Tensor::row(v.iter().map(|&x| T::c(f64::from(x))).collect()))
    }
}

impl<T: Scalar> PromptEmbeddingProvider<T> for CacheProvider {
    fn d_llm(&self) -> usize {
        self.d_llm
    }

    fn base_embeddings(&self, tape: &mut Tape<'_, T>, h: EntityId, r: RelationId) -> Result<(Var, Var)> {
        let he = self.vector(CacheKey::Entity(h.0))?;
        let re = self.vector(CacheKey::Relation(r.raw() as u32))?;
        Ok((tape.constant(he), tape.constant(re)))
    }

    fn pair_embedding(&self, tape: &mut Tape<'_, T>, h: EntityId, r: RelationId, _h_slot: Var, _r_slot: Var) -> Result<Var> {
        let v = self.vector(CacheKey::Pair(h.0, r.raw() as u32))?;
        Ok(tape.constant(v))
    }
}
