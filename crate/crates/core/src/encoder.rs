//! Graph Transformer encoder with bucketed relative-position attention bias.

use std::collections::HashMap;
use std::io::BufRead;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BiasLookup, Tape, Var};
use crate::error::{Error, Result};
use crate::kg::{EntityId, RelationId, TextCatalog};
use crate::params::{normal_tensor, ParamGroup, ParamId, ParamStore};
use crate::positions::{
    bucketize_distance, bucketize_distinction, build_distance_matrix, build_distinction_matrix, BucketMap,
    DISTINCTION_BUCKETS, DISTINCTION_G2G,
};
use crate::sampler::{Subgraph, Token};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub buckets: BucketMap,
    /// D is G2G wherever P is; when false D always carries a kind code.
    pub shared_g2g: bool,
    pub dropout: f64,
    pub init_std: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_model: 256,
            n_heads: 4,
            n_layers: 4,
            d_ff: 1024,
            buckets: BucketMap::default(),
            shared_g2g: true,
            dropout: 0.0,
            init_std: 0.02,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 {
            return Err(Error::Config("d_model, n_heads and d_ff must be positive".into()));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        self.buckets.validate()
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Mean/max/min/std aggregation followed by a learned linear map `4 d_in -> d_out`.
#[derive(Clone, Debug)]
pub struct PoolingOperator {
    pub proj: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl PoolingOperator {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        prefix: &str,
        group: ParamGroup,
        d_in: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Self {
        let std = (1.0 / (4 * d_in) as f64).sqrt();
        let proj = store.add_normal(format!("{prefix}.proj"), group, 4 * d_in, d_out, std, rng);
        let bias = store.add_no_decay(format!("{prefix}.bias"), group, Tensor::zeros(1, d_out));
        Self { proj, bias, d_in, d_out }
    }

    /// One pooled row per group of rows of `x`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var, groups: &[Vec<usize>]) -> Var {
        let agg = tape.pna(x, groups);
        let w = tape.param(self.proj);
        let b = tape.param(self.bias);
        let y = tape.matmul(agg, w);
        tape.add_row(y, b)
    }

    /// Pools a whole sequence outside any training graph.
    pub fn apply<T: Scalar>(&self, store: &ParamStore<T>, seq: &Tensor<T>) -> Result<Tensor<T>> {
        if seq.rows() == 0 {
            return Err(Error::Contract("pooling over an empty sequence".into()));
        }
        if seq.cols() != self.d_in {
            return Err(Error::Contract(format!("pooler expects width {}, got {}", self.d_in, seq.cols())));
        }
        let mut tape = Tape::new(store);
        let x = tape.constant(seq.clone());
        let out = self.forward(&mut tape, x, &[(0..seq.rows()).collect()]);
        Ok(tape.value(out).clone())
    }
}

/// Text pooling of one entity or relation description (`E_e -> t_e`).
pub fn pool_text_embedding<T: Scalar>(
    pooler: &PoolingOperator,
    store: &ParamStore<T>,
    token_vectors: &Tensor<T>,
) -> Result<Tensor<T>> {
    pooler.apply(store, token_vectors)
}

/// Pretrained word vectors in the plain text format `word v1 v2 ...`, with an
/// optional `count dim` header line.
#[derive(Clone, Debug, Default)]
pub struct WordVectors {
    pub dim: usize,
    pub vectors: HashMap<String, Vec<f32>>,
}

impl WordVectors {
    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::parse(std::io::BufReader::new(file))
    }

    pub fn parse<R: BufRead>(reader: R) -> Result<Self> {
        let mut out = WordVectors::default();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.is_empty() {
                continue;
            }
            if i == 0 && fields.len() == 2 && fields.iter().all(|f| f.parse::<usize>().is_ok()) {
                continue;
            }
            let values: std::result::Result<Vec<f32>, _> = fields[1..].iter().map(|f| f.parse::<f32>()).collect();
            let values = values.map_err(|e| Error::Parse { line: i + 1, message: e.to_string() })?;
            if out.dim == 0 {
                out.dim = values.len();
            }
            if values.len() != out.dim || out.dim == 0 {
                return Err(Error::Parse {
                    line: i + 1,
                    message: format!("expected {} components, got {}", out.dim, values.len()),
                });
            }
            out.vectors.insert(fields[0].to_lowercase(), values);
        }
        Ok(out)
    }

    pub fn lookup<'a, T: Scalar>(&self, words: impl IntoIterator<Item = &'a str>) -> Option<Tensor<T>> {
        let rows: Vec<Vec<T>> = words
            .into_iter()
            .filter_map(|w| self.vectors.get(w))
            .map(|v| v.iter().map(|&x| T::c(f64::from(x))).collect())
            .collect();
        if rows.is_empty() {
            None
        } else {
            Tensor::from_rows(&rows).ok()
        }
    }
}

/// Source of the initial vocabulary rows.
#[derive(Clone, Copy, Debug, Default)]
pub enum VocabInit<'a> {
    #[default]
    Random,
    /// Rows pooled from the descriptions' word vectors; words without vectors
    /// fall back to random rows.
    Pretrained { words: &'a WordVectors, catalog: &'a TextCatalog },
}

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

/// Bucketized P and D for one subgraph.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionInputs {
    pub n: usize,
    pub distance: Vec<u16>,
    pub distinction: Vec<u16>,
    pub beyond_range: usize,
}

/// Bias tables shared by every layer. Rows of `f1` are exact distance buckets,
/// rows of `f2` are distinction codes, `g2g` is one value per head.
#[derive(Clone, Copy, Debug)]
pub struct BiasTables {
    pub f1: Var,
    pub f2: Var,
    pub g2g: Var,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub num_entities: usize,
    pub num_relation_slots: usize,
    pub embedding: ParamId,
    pub layers: Vec<EncoderLayer>,
    pub final_ln_g: ParamId,
    pub final_ln_b: ParamId,
    pub f1: ParamId,
    pub f2: ParamId,
    pub g2g: ParamId,
    /// Present only when rows were pooled from pretrained word vectors.
    pub text_pooler: Option<PoolingOperator>,
}

impl Encoder {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        config: EncoderConfig,
        num_entities: usize,
        num_relation_slots: usize,
        init: VocabInit<'_>,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let g = ParamGroup::Encoder;
        let d = config.d_model;
        let rows = num_entities + num_relation_slots + 1;
        let mut table: Tensor<T> = normal_tensor(rows, d, config.init_std, rng);
        let mut text_pooler = None;
        if let VocabInit::Pretrained { words, catalog } = init {
            let pooler = PoolingOperator::new(store, "text_pooler", g, words.dim, d, rng);
            for e in 0..num_entities {
                let tokens = catalog.entity_tokens(EntityId(e as u32)).iter();
                if let Some(seq) = words.lookup::<T>(tokens.filter_map(|&w| catalog.words.name(w))) {
                    let row = pool_text_embedding(&pooler, store, &seq)?;
                    table.row_slice_mut(e).copy_from_slice(row.as_slice());
                }
            }
            for r in 0..num_relation_slots {
                let tokens = catalog.relation_tokens(RelationId::from_raw(r as u32)).iter();
                if let Some(seq) = words.lookup::<T>(tokens.filter_map(|&w| catalog.words.name(w))) {
                    let row = pool_text_embedding(&pooler, store, &seq)?;
                    table.row_slice_mut(num_entities + r).copy_from_slice(row.as_slice());
                }
            }
            text_pooler = Some(pooler);
        }
        let embedding = store.add("encoder.embedding", g, table);

        let std = config.init_std;
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let p = format!("encoder.layer{l}");
            let ones = || Tensor::filled(1, d, T::one());
            let zeros = |m| Tensor::zeros(1, m);
            layers.push(EncoderLayer {
                ln1_g: store.add_no_decay(format!("{p}.ln1.gamma"), g, ones()),
                ln1_b: store.add_no_decay(format!("{p}.ln1.beta"), g, zeros(d)),
                wq: store.add_normal(format!("{p}.attn.wq"), g, d, d, std, rng),
                bq: store.add_no_decay(format!("{p}.attn.bq"), g, zeros(d)),
                wk: store.add_normal(format!("{p}.attn.wk"), g, d, d, std, rng),
                bk: store.add_no_decay(format!("{p}.attn.bk"), g, zeros(d)),
                wv: store.add_normal(format!("{p}.attn.wv"), g, d, d, std, rng),
                bv: store.add_no_decay(format!("{p}.attn.bv"), g, zeros(d)),
                wo: store.add_normal(format!("{p}.attn.wo"), g, d, d, std, rng),
                bo: store.add_no_decay(format!("{p}.attn.bo"), g, zeros(d)),
                ln2_g: store.add_no_decay(format!("{p}.ln2.gamma"), g, ones()),
                ln2_b: store.add_no_decay(format!("{p}.ln2.beta"), g, zeros(d)),
                w1: store.add_normal(format!("{p}.ffn.w1"), g, d, config.d_ff, std, rng),
                b1: store.add_no_decay(format!("{p}.ffn.b1"), g, zeros(config.d_ff)),
                w2: store.add_normal(format!("{p}.ffn.w2"), g, config.d_ff, d, std, rng),
                b2: store.add_no_decay(format!("{p}.ffn.b2"), g, zeros(d)),
            });
        }
        let final_ln_g = store.add_no_decay("encoder.final_ln.gamma", g, Tensor::filled(1, d, T::one()));
        let final_ln_b = store.add_no_decay("encoder.final_ln.beta", g, Tensor::zeros(1, d));

        let h = config.n_heads;
        let exact = config.buckets.num_distance_buckets - 1;
        let f1_table: Tensor<T> = normal_tensor(exact, h, std, rng);
        let f2_table: Tensor<T> = normal_tensor(DISTINCTION_BUCKETS - 1, h, std, rng);
        // G2G starts at the bias of the farthest positive exact distance
        let (far, _) = config.buckets.bucket(config.buckets.max_exact_distance);
        let g2g_row = Tensor::from_vec(1, h, f1_table.row_slice(far as usize).to_vec())?;
        let f1 = store.add_no_decay("encoder.bias.f1", g, f1_table);
        let f2 = store.add_no_decay("encoder.bias.f2", g, f2_table);
        let g2g = store.add_no_decay("encoder.bias.g2g", g, g2g_row);

        Ok(Self {
            config,
            num_entities,
            num_relation_slots,
            embedding,
            layers,
            final_ln_g,
            final_ln_b,
            f1,
            f2,
            g2g,
            text_pooler,
        })
    }

    pub fn vocab_rows(&self) -> usize {
        self.num_entities + self.num_relation_slots + 1
    }

    pub fn mask_row(&self) -> usize {
        self.num_entities + self.num_relation_slots
    }

    pub fn token_row(&self, token: Token) -> Result<usize> {
        match token {
            Token::Entity(e) if (e.0 as usize) < self.num_entities => Ok(e.0 as usize),
            Token::Entity(e) => Err(Error::Lookup(format!("entity id {} has no vocabulary row", e.0))),
            Token::Relation { relation, .. } if relation.raw() < self.num_relation_slots => {
                Ok(self.num_entities + relation.raw())
            }
            Token::Relation { relation, .. } => {
                Err(Error::Lookup(format!("relation id {} has no vocabulary row", relation.raw())))
            }
            Token::Mask => Ok(self.mask_row()),
        }
    }

    /// Layer-0 token states: one vocabulary row per token, the mask row at `?`.
    pub fn embed_subgraph<T: Scalar>(&self, tape: &mut Tape<'_, T>, subgraph: &Subgraph) -> Result<Var> {
        let rows = subgraph.tokens.iter().map(|&t| self.token_row(t)).collect::<Result<Vec<_>>>()?;
        let table = tape.param(self.embedding);
        Ok(tape.gather_rows(table, &rows))
    }

    pub fn positions(&self, subgraph: &Subgraph) -> Result<PositionInputs> {
        let p = build_distance_matrix(subgraph);
        let d = build_distinction_matrix(subgraph, &p, self.config.shared_g2g)?;
        let pb = bucketize_distance(&p, &self.config.buckets);
        let db = bucketize_distinction(&d);
        Ok(PositionInputs { n: p.size(), distance: pb.buckets, distinction: db.buckets, beyond_range: pb.beyond_range })
    }

    pub fn bias_tables<T: Scalar>(&self, tape: &mut Tape<'_, T>) -> BiasTables {
        BiasTables { f1: tape.param(self.f1), f2: tape.param(self.f2), g2g: tape.param(self.g2g) }
    }

    /// Final-layer token states. `dropout_rng` enables dropout when the rate is positive.
    pub fn encode<T: Scalar, R: Rng>(
        &self,
        tape: &mut Tape<'_, T>,
        subgraph: &Subgraph,
        positions: &PositionInputs,
        mut dropout_rng: Option<&mut R>,
    ) -> Result<Var> {
        let x0 = self.embed_subgraph(tape, subgraph)?;
        if positions.n != subgraph.num_tokens() {
            return Err(Error::Contract(format!(
                "position inputs for {} tokens, layout has {}",
                positions.n,
                subgraph.num_tokens()
            )));
        }
        if self.layers.is_empty() {
            return Ok(x0);
        }
        let tables = self.bias_tables(tape);
        let biases = head_biases(tape, tables, positions, &self.config.buckets, self.config.n_heads);
        let mut x = x0;
        for layer in &self.layers {
            x = self.layer_forward(tape, layer, x, &biases, dropout_rng.as_deref_mut());
        }
        let g = tape.param(self.final_ln_g);
        let b = tape.param(self.final_ln_b);
        Ok(tape.layer_norm(x, g, b))
    }

    fn layer_forward<T: Scalar, R: Rng>(
        &self,
        tape: &mut Tape<'_, T>,
        layer: &EncoderLayer,
        x: Var,
        biases: &[Var],
        mut rng: Option<&mut R>,
    ) -> Var {
        let p = |tape: &mut Tape<'_, T>, id| tape.param(id);
        let (g1, b1) = (p(tape, layer.ln1_g), p(tape, layer.ln1_b));
        let h = tape.layer_norm(x, g1, b1);
        let q = linear(tape, h, layer.wq, layer.bq);
        let k = linear(tape, h, layer.wk, layer.bk);
        let v = linear(tape, h, layer.wv, layer.bv);
        let att = attention_with_bias(tape, q, k, v, self.config.n_heads, biases);
        let o = linear(tape, att, layer.wo, layer.bo);
        let o = self.dropout(tape, o, rng.as_deref_mut());
        let x = tape.add(x, o);

        let (g2, b2) = (p(tape, layer.ln2_g), p(tape, layer.ln2_b));
        let h = tape.layer_norm(x, g2, b2);
        let f = linear(tape, h, layer.w1, layer.b1);
        let f = tape.gelu(f);
        let f = linear(tape, f, layer.w2, layer.b2);
        let f = self.dropout(tape, f, rng);
        tape.add(x, f)
    }

    fn dropout<T: Scalar, R: Rng>(&self, tape: &mut Tape<'_, T>, x: Var, rng: Option<&mut R>) -> Var {
        let rate = self.config.dropout;
        let Some(rng) = rng else { return x };
        if rate <= 0.0 {
            return x;
        }
        let (n, m) = tape.shape(x);
        let keep = T::c(1.0 / (1.0 - rate));
        let mask = Tensor::from_fn(n, m, |_, _| if rng.random::<f64>() < rate { T::zero() } else { keep });
        tape.mul_const(x, mask)
    }
}

pub(crate) fn linear<T: Scalar>(tape: &mut Tape<'_, T>, x: Var, w: ParamId, b: ParamId) -> Var {
    let wv = tape.param(w);
    let bv = tape.param(b);
    let y = tape.matmul(x, wv);
    tape.add_row(y, bv)
}

/// Per-head `n x n` bias matrices `0.5 (f1[P] + f2[D])`, built once and reused by every layer.
pub fn head_biases<T: Scalar>(
    tape: &mut Tape<'_, T>,
    tables: BiasTables,
    positions: &PositionInputs,
    buckets: &BucketMap,
    n_heads: usize,
) -> Vec<Var> {
    (0..n_heads)
        .map(|head| {
            let lookup = BiasLookup {
                n: positions.n,
                distance_buckets: positions.distance.clone(),
                distinction_buckets: positions.distinction.clone(),
                head,
                distance_g2g: buckets.g2g_bucket(),
                distinction_g2g: DISTINCTION_G2G,
            };
            tape.pair_bias(tables.f1, tables.f2, tables.g2g, lookup)
        })
        .collect()
}

/// Multi-head `softmax(Q K^T / sqrt(d_head) + B) V`, one bias matrix per head.
pub fn attention_with_bias<T: Scalar>(
    tape: &mut Tape<'_, T>,
    q: Var,
    k: Var,
    v: Var,
    n_heads: usize,
    biases: &[Var],
) -> Var {
    let d = tape.shape(q).1;
    let dh = d / n_heads;
    let scale = T::one() / T::count(dh).sqrt();
    let heads: Vec<Var> = (0..n_heads)
        .map(|head| {
            let qh = tape.slice_cols(q, head * dh, dh);
            let kh = tape.slice_cols(k, head * dh, dh);
            let vh = tape.slice_cols(v, head * dh, dh);
            let s = tape.matmul_nt(qh, kh);
            let s = tape.scale(s, scale);
            let s = tape.add(s, biases[head]);
            let a = tape.softmax_rows(s);
            tape.matmul(a, vh)
        })
        .collect();
    if heads.len() == 1 {
        heads[0]
    } else {
        tape.concat_cols(&heads)
    }
}

/// Value-level attention with bias tables, for inspection and tests.
#[allow(clippy::too_many_arguments)]
pub fn attention_with_bias_values<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    n_heads: usize,
    positions: &PositionInputs,
    buckets: &BucketMap,
    f1: &Tensor<T>,
    f2: &Tensor<T>,
    g2g: &Tensor<T>,
) -> Result<Tensor<T>> {
    let n = q.rows();
    let d = q.cols();
    if k.shape() != (n, d) || v.rows() != n || v.cols() != d {
        return Err(Error::Contract("Q, K, V shapes disagree".into()));
    }
    if n_heads == 0 || !d.is_multiple_of(n_heads) {
        return Err(Error::Contract(format!("width {d} not divisible into {n_heads} heads")));
    }
    if positions.n != n || positions.distance.len() != n * n || positions.distinction.len() != n * n {
        return Err(Error::Contract(format!("bucket matrices do not match {n} tokens")));
    }
    let exact = buckets.num_distance_buckets - 1;
    if f1.shape() != (exact, n_heads) || f2.shape() != (DISTINCTION_BUCKETS - 1, n_heads) || g2g.shape() != (1, n_heads) {
        return Err(Error::Contract("bias table shapes do not match bucket counts and heads".into()));
    }
    let store = ParamStore::new();
    let mut tape = Tape::new(&store);
    let (qv, kv, vv) = (tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()));
    let tables = BiasTables { f1: tape.constant(f1.clone()), f2: tape.constant(f2.clone()), g2g: tape.constant(g2g.clone()) };
    let biases = head_biases(&mut tape, tables, positions, buckets, n_heads);
    let out = attention_with_bias(&mut tape, qv, kv, vv, n_heads, &biases);
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::{EntityId, RelationId};
    use crate::sampler::{SubgraphTriple, TripleSet};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_config(layers: usize) -> EncoderConfig {
        EncoderConfig {
            d_model: 8,
            n_heads: 2,
            n_layers: layers,
            d_ff: 16,
            buckets: BucketMap { num_distance_buckets: 8, max_exact_distance: 3 },
            ..EncoderConfig::default()
        }
    }

    fn one_triple() -> Subgraph {
        let t = SubgraphTriple { head: EntityId(0), relation: RelationId::base(0), tail: None, set: TripleSet::Target };
        Subgraph::assemble(EntityId(0), RelationId::base(0), None, vec![t], false)
    }

    fn with_relation_thrice() -> Subgraph {
        let r = RelationId::base(1);
        let mk = |h, t: Option<u32>, set| SubgraphTriple { head: EntityId(h), relation: r, tail: t.map(EntityId), set };
        Subgraph::assemble(
            EntityId(0),
            r,
            None,
            vec![mk(0, None, TripleSet::Target), mk(0, Some(1), TripleSet::Hr { ring: 1 }), mk(2, Some(3), TripleSet::R)],
            false,
        )
    }

    #[test]
    fn config_validation() {
        assert!(EncoderConfig::default().validate().is_ok());
        let bad = EncoderConfig { d_model: 10, n_heads: 4, ..EncoderConfig::default() };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn embed_layout() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = Encoder::new(&mut store, small_config(1), 5, 4, VocabInit::Random, &mut rng).unwrap();
        let sg = one_triple();
        let mut tape = Tape::new(&store);
        let x = enc.embed_subgraph(&mut tape, &sg).unwrap();
        let xv = tape.value(x).clone();
        assert_eq!(xv.rows(), 3);
        assert_eq!(xv.row_slice(2), store.value(enc.embedding).row_slice(enc.mask_row()));

        let sg = with_relation_thrice();
        let x = enc.embed_subgraph(&mut tape, &sg).unwrap();
        let xv = tape.value(x).clone();
        let rel_rows: Vec<usize> = sg.tokens.iter().enumerate().filter(|(_, t)| t.is_relation()).map(|(i, _)| i).collect();
        assert_eq!(rel_rows.len(), 3);
        for w in rel_rows.windows(2) {
            assert_eq!(xv.row_slice(w[0]), xv.row_slice(w[1]));
        }
    }

    #[test]
    fn unknown_row_is_lookup_error() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = Encoder::new(&mut store, small_config(1), 1, 2, VocabInit::Random, &mut rng).unwrap();
        let t = SubgraphTriple { head: EntityId(4), relation: RelationId::base(0), tail: None, set: TripleSet::Target };
        let sg = Subgraph::assemble(EntityId(4), RelationId::base(0), None, vec![t], false);
        let mut tape = Tape::new(&store);
        assert!(matches!(enc.embed_subgraph(&mut tape, &sg), Err(Error::Lookup(_))));
    }

    #[test]
    fn zero_layers_is_embedding() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = Encoder::new(&mut store, small_config(0), 5, 4, VocabInit::Random, &mut rng).unwrap();
        let sg = with_relation_thrice();
        let pos = enc.positions(&sg).unwrap();
        let mut tape = Tape::new(&store);
        let e = enc.embed_subgraph(&mut tape, &sg).unwrap();
        let out = enc.encode::<f64, ChaCha8Rng>(&mut tape, &sg, &pos, None).unwrap();
        assert_eq!(tape.value(e), tape.value(out));
    }

    #[test]
    fn g2g_starts_at_farthest_bucket() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = small_config(1);
        let enc = Encoder::new(&mut store, cfg.clone(), 3, 2, VocabInit::Random, &mut rng).unwrap();
        let far = cfg.buckets.bucket(cfg.buckets.max_exact_distance).0 as usize;
        assert_eq!(store.value(enc.g2g).row_slice(0), store.value(enc.f1).row_slice(far));
        assert_eq!(store.value(enc.f1).rows() + 1, cfg.buckets.num_distance_buckets);
        assert_eq!(store.value(enc.f2).rows() + 1, DISTINCTION_BUCKETS);
    }

    #[test]
    fn bias_shifts_attention_weights() {
        // Q = K = 0, V = identity, bias row [0, ln 3] -> weights [0.25, 0.75]
        let q = Tensor::<f64>::zeros(2, 2);
        let v = Tensor::<f64>::identity(2);
        let buckets = BucketMap { num_distance_buckets: 4, max_exact_distance: 1 };
        // bucket of distance 0 -> row 1, distance +1 -> row 2; D code 0 everywhere
        let positions = PositionInputs { n: 2, distance: vec![1, 2, 0, 1], distinction: vec![0; 4], beyond_range: 0 };
        let ln3 = 3f64.ln();
        let f1 = Tensor::from_rows(&[vec![0.0], vec![0.0], vec![ln3]]).unwrap();
        let f2 = Tensor::from_rows(&[vec![0.0], vec![0.0], vec![0.0], vec![0.0]]).unwrap();
        let g2g = Tensor::zeros(1, 1);
        // B = 0.5 (f1 + f2) halves the table value, so double it
        let f1 = f1.map(|x| 2.0 * x);
        let out = attention_with_bias_values(&q, &q, &v, 1, &positions, &buckets, &f1, &f2, &g2g).unwrap();
        assert!((out.get(0, 0) - 0.25).abs() < 1e-12);
        assert!((out.get(0, 1) - 0.75).abs() < 1e-12);
    }

    #[test]
    fn singleton_attention_returns_value() {
        let q = Tensor::<f64>::from_rows(&[vec![0.3, -1.0]]).unwrap();
        let v = Tensor::<f64>::from_rows(&[vec![2.0, 5.0]]).unwrap();
        let buckets = BucketMap { num_distance_buckets: 4, max_exact_distance: 1 };
        let positions = PositionInputs { n: 1, distance: vec![1], distinction: vec![0], beyond_range: 0 };
        let f1 = Tensor::filled(3, 2, 0.7);
        let f2 = Tensor::filled(4, 2, -0.2);
        let g2g = Tensor::zeros(1, 2);
        let out = attention_with_bias_values(&q, &q, &v, 2, &positions, &buckets, &f1, &f2, &g2g).unwrap();
        assert_eq!(out, v);
    }

    #[test]
    fn attention_shape_errors() {
        let q = Tensor::<f64>::zeros(2, 4);
        let k = Tensor::<f64>::zeros(3, 4);
        let buckets = BucketMap { num_distance_buckets: 4, max_exact_distance: 1 };
        let positions = PositionInputs { n: 2, distance: vec![1; 4], distinction: vec![0; 4], beyond_range: 0 };
        let f1 = Tensor::zeros(3, 2);
        let f2 = Tensor::zeros(4, 2);
        let g = Tensor::zeros(1, 2);
        assert!(attention_with_bias_values(&q, &k, &q, 2, &positions, &buckets, &f1, &f2, &g).is_err());
        let bad_pos = PositionInputs { n: 3, distance: vec![1; 9], distinction: vec![0; 9], beyond_range: 0 };
        assert!(attention_with_bias_values(&q, &q, &q, 2, &bad_pos, &buckets, &f1, &f2, &g).is_err());
    }

    #[test]
    fn pooling_aggregates() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pooler = PoolingOperator::new(&mut store, "p", ParamGroup::Other, 1, 4, &mut rng);
        *store.value_mut(pooler.proj) = Tensor::identity(4);
        let seq = Tensor::from_rows(&[vec![0.0], vec![2.0]]).unwrap();
        let out = pool_text_embedding(&pooler, &store, &seq).unwrap();
        assert_eq!(out.as_slice(), &[1.0, 2.0, 0.0, 1.0]);
        let seq = Tensor::from_rows(&[vec![0.0], vec![6.0], vec![3.0]]).unwrap();
        let out = pooler.apply(&store, &seq).unwrap();
        assert!((out.get(0, 3) - 6f64.sqrt()).abs() < 1e-12);
        assert!(matches!(pooler.apply(&store, &Tensor::zeros(0, 1)), Err(Error::Contract(_))));
    }

    #[test]
    fn word_vectors_parse_and_init() {
        let text = "2 3\nblack 1 0 0\npoodle 0 1 0\n";
        let wv = WordVectors::parse(std::io::Cursor::new(text)).unwrap();
        assert_eq!(wv.dim, 3);
        assert!(wv.lookup::<f64>(["black", "cat"]).is_some());
        assert!(wv.lookup::<f64>(["cat"]).is_none());
        assert!(WordVectors::parse(std::io::Cursor::new("a 1 2\nb 1\n")).is_err());
    }
}
