//! Full link-prediction model: encoder, triple pooler, optional fusion, classifier.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Var};
use crate::encoder::{Encoder, EncoderConfig, PoolingOperator, PositionInputs, VocabInit, WordVectors};
use crate::error::{Error, Result};
use crate::fusion::{
    concat_classifier_input, fuse, pool_relation_context, Adapter, CacheProvider, EmbeddingCache, FusionConfig,
    PromptEmbeddingProvider, ProviderKind, RelationScope, StubProvider,
};
use crate::kg::{EntityId, TextCatalog};
use crate::objective::{adaptive_beta2, combine, softmax, ClassifierHead, LossBreakdown, ObjectiveConfig, RelationChoice};
use crate::params::{ParamGroup, ParamStore};
use crate::sampler::{rng_for, Subgraph};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub objective: ObjectiveConfig,
    /// `None` trains the encoder path alone.
    pub fusion: Option<FusionConfig>,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.objective.validate()?;
        if let Some(f) = &self.fusion {
            f.validate()?;
        }
        Ok(())
    }
}

/// External inputs some configurations need.
#[derive(Default)]
pub struct ModelResources<'a> {
    pub catalog: Option<&'a TextCatalog>,
    pub word_vectors: Option<&'a WordVectors>,
    pub cache: Option<EmbeddingCache>,
}

pub struct FusionParts<T: Scalar> {
    pub config: FusionConfig,
    pub adapter: Adapter,
    pub relation_pooler: Option<PoolingOperator>,
    pub provider: Box<dyn PromptEmbeddingProvider<T>>,
}

pub struct Model<T: Scalar> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub encoder: Encoder,
    pub triple_pooler: PoolingOperator,
    pub classifier: ClassifierHead,
    pub fusion: Option<FusionParts<T>>,
    pub num_entities: usize,
    pub num_relation_slots: usize,
}

/// Knobs for one training forward pass.
#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions {
    /// Holds `beta2` at a fixed value instead of recomputing it.
    pub beta2_override: Option<f64>,
}

pub struct ItemLoss {
    pub loss: Var,
    pub breakdown: LossBreakdown,
}

impl<T: Scalar> Model<T> {
    pub fn new(
        config: ModelConfig,
        num_entities: usize,
        num_relation_slots: usize,
        resources: ModelResources<'_>,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if num_entities == 0 {
            return Err(Error::Config("the model needs at least one entity".into()));
        }
        let mut rng = rng_for(seed);
        let mut store = ParamStore::new();
        let init = match (resources.word_vectors, resources.catalog) {
            (Some(words), Some(catalog)) => VocabInit::Pretrained { words, catalog },
            (Some(_), None) => return Err(Error::Config("word vectors need a text catalog".into())),
            _ => VocabInit::Random,
        };
        let encoder = Encoder::new(&mut store, config.encoder.clone(), num_entities, num_relation_slots, init, &mut rng)?;
        let d = config.encoder.d_model;
        let d_pool = config.objective.d_pool;
        let triple_pooler = PoolingOperator::new(&mut store, "triple_pooler", ParamGroup::Other, d, d_pool, &mut rng);

        let mut fusion = None;
        let mut d_llm = 0;
        if let Some(fc) = &config.fusion {
            let provider: Box<dyn PromptEmbeddingProvider<T>> = match fc.provider {
                ProviderKind::Stub => {
                    let catalog = resources
                        .catalog
                        .ok_or_else(|| Error::Config("the stub provider needs a text catalog".into()))?;
                    Box::new(StubProvider::new(&mut store, fc.stub.clone(), catalog, &mut rng)?)
                }
                ProviderKind::Cache => {
                    let cache = resources
                        .cache
                        .ok_or_else(|| Error::Config("the cache provider needs an embedding cache file".into()))?;
                    Box::new(CacheProvider::new(cache))
                }
            };
            d_llm = provider.d_llm();
            let adapter = Adapter::new(&mut store, d, d_llm, &mut rng);
            let relation_pooler = (fc.scope != RelationScope::R)
                .then(|| PoolingOperator::new(&mut store, "relation_pooler", ParamGroup::Other, d, d, &mut rng));
            fusion = Some(FusionParts { config: fc.clone(), adapter, relation_pooler, provider });
        }
        let classifier =
            ClassifierHead::new(&mut store, d_llm + d_pool, config.objective.classifier_hidden, num_entities, &mut rng);
        Ok(Self { config, store, encoder, triple_pooler, classifier, fusion, num_entities, num_relation_slots })
    }

    /// SHA-256 over the configuration and vocabulary sizes.
    pub fn digest(&self) -> String {
        config_digest(&self.config, self.num_entities, self.num_relation_slots)
    }

    pub fn positions(&self, subgraph: &Subgraph) -> Result<PositionInputs> {
        self.encoder.positions(subgraph)
    }

    /// Token groups `[h, r, x]`: the target first, then Pos, then Neg constructions.
    pub fn triple_groups(&self, subgraph: &Subgraph) -> Result<Vec<Vec<usize>>> {
        let [h_pos, r_pos, mask_pos] = subgraph.triple_tokens[0];
        let mut groups = vec![vec![h_pos, r_pos, mask_pos]];
        for &e in subgraph.pos_entities.iter().chain(&subgraph.neg_entities) {
            let pos = subgraph
                .entity_position(e)
                .ok_or_else(|| Error::Contract(format!("entity {} missing from the token layout", e.0)))?;
            let rel = match self.config.objective.relation_choice {
                RelationChoice::Target => r_pos,
                RelationChoice::Occurrence => occurrence_relation(subgraph, e).unwrap_or(r_pos),
            };
            groups.push(vec![h_pos, rel, pos]);
        }
        Ok(groups)
    }

    /// Classifier inputs for the given groups, with fusion prefix when enabled.
    fn classifier_logits<R: Rng>(
        &self,
        tape: &mut Tape<'_, T>,
        subgraph: &Subgraph,
        positions: &PositionInputs,
        groups: &[Vec<usize>],
        dropout_rng: Option<&mut R>,
    ) -> Result<Var> {
        let states = self.encoder.encode(tape, subgraph, positions, dropout_rng)?;
        let pooled = self.triple_pooler.forward(tape, states, groups);
        let t_hr = match &self.fusion {
            None => None,
            Some(f) => Some(self.provider_state(tape, f, states, subgraph)?),
        };
        let input = concat_classifier_input(tape, t_hr, pooled);
        self.classifier.forward(tape, input)
    }

    fn provider_state(&self, tape: &mut Tape<'_, T>, f: &FusionParts<T>, states: Var, subgraph: &Subgraph) -> Result<Var> {
        let (h, r) = (subgraph.head, subgraph.relation);
        let (base_h, base_r) = f.provider.base_embeddings(tape, h, r)?;
        let lambda = f.config.lambda;
        let h_pos = subgraph.triple_tokens[0][0];
        let fused_h = fuse(
            tape,
            base_h,
            |tape| {
                let th = tape.gather_rows(states, &[h_pos]);
                f.adapter.forward(tape, th)
            },
            lambda,
        )?;
        let fused_r = if lambda == 0.0 {
            base_r
        } else {
            let t_bar = pool_relation_context(tape, states, subgraph, f.config.scope, f.relation_pooler.as_ref())?;
            fuse(tape, base_r, |tape| f.adapter.forward(tape, t_bar), lambda)?
        };
        f.provider.pair_embedding(tape, h, r, fused_h, fused_r)
    }

    /// Training loss of one subgraph whose gold tail is known.
    pub fn item_loss<R: Rng>(
        &self,
        tape: &mut Tape<'_, T>,
        subgraph: &Subgraph,
        positions: &PositionInputs,
        options: ForwardOptions,
        dropout_rng: Option<&mut R>,
    ) -> Result<ItemLoss> {
        let gold = subgraph.gold.ok_or_else(|| Error::Contract("training needs the gold tail".into()))?;
        if gold.index() >= self.num_entities {
            return Err(Error::Lookup(format!("gold entity {} outside {} classes", gold.0, self.num_entities)));
        }
        let groups = self.triple_groups(subgraph)?;
        let mut labels = vec![gold.index()];
        labels.extend(subgraph.pos_entities.iter().chain(&subgraph.neg_entities).map(|e| e.index()));
        let logits = self.classifier_logits(tape, subgraph, positions, &groups, dropout_rng)?;
        let ce = tape.cross_entropy_rows(logits, &labels);
        let n_pos = subgraph.pos_entities.len();
        let n_neg = subgraph.neg_entities.len();
        let l_ce = tape.mean_rows(ce, &[0]);
        let l_pos = tape.mean_rows(ce, &(1..1 + n_pos).collect::<Vec<_>>());
        let l_neg = tape.mean_rows(ce, &(1 + n_pos..1 + n_pos + n_neg).collect::<Vec<_>>());
        let (vce, vpos, vneg) = (tape.scalar(l_ce).as_f64(), tape.scalar(l_pos).as_f64(), tape.scalar(l_neg).as_f64());
        let beta1 = self.config.objective.beta1;
        let beta2 = match options.beta2_override {
            Some(b) => b,
            None if vpos.is_finite() && vneg.is_finite() => adaptive_beta2(vpos, vneg)?,
            None => f64::NAN,
        };
        let loss = tape.weighted_sum(&[(l_ce, T::one()), (l_pos, T::c(beta1)), (l_neg, T::c(-beta1 * beta2))]);
        let breakdown = LossBreakdown {
            l_ce: vce,
            l_pos: vpos,
            l_neg: vneg,
            beta2,
            total: combine(vce, vpos, vneg, beta1, beta2),
            pos_count: n_pos,
            neg_count: n_neg,
        };
        Ok(ItemLoss { loss, breakdown })
    }

    /// Class probabilities for the masked tail of `subgraph`.
    pub fn predict(&self, subgraph: &Subgraph) -> Result<Vec<f64>> {
        let positions = self.positions(subgraph)?;
        let mut tape = Tape::new(&self.store);
        let [h, r, m] = subgraph.triple_tokens[0];
        let logits =
            self.classifier_logits::<rand_chacha::ChaCha8Rng>(&mut tape, subgraph, &positions, &[vec![h, r, m]], None)?;
        let row: Vec<f64> = tape.value(logits).row_slice(0).iter().map(|v| v.as_f64()).collect();
        Ok(softmax(&row))
    }

    /// Evaluation-mode class probabilities for every classifier input of
    /// [`Model::triple_groups`]: the target row first, then Pos, then Neg.
    pub fn group_probabilities(&self, subgraph: &Subgraph) -> Result<Vec<Vec<f64>>> {
        let positions = self.positions(subgraph)?;
        let groups = self.triple_groups(subgraph)?;
        let mut tape = Tape::new(&self.store);
        let logits = self.classifier_logits::<rand_chacha::ChaCha8Rng>(&mut tape, subgraph, &positions, &groups, None)?;
        let v = tape.value(logits);
        Ok((0..v.rows()).map(|i| softmax(&v.row_slice(i).iter().map(|x| x.as_f64()).collect::<Vec<_>>())).collect())
    }

    /// Evaluation-mode loss breakdown (no dropout, no gradient use).
    pub fn loss_breakdown(&self, subgraph: &Subgraph) -> Result<LossBreakdown> {
        let positions = self.positions(subgraph)?;
        let mut tape = Tape::new(&self.store);
        let out = self.item_loss::<rand_chacha::ChaCha8Rng>(&mut tape, subgraph, &positions, ForwardOptions::default(), None)?;
        Ok(out.breakdown)
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_checkpoint(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load_checkpoint(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        self.read_checkpoint(&mut f)
    }

    /// Layout (little-endian): magic `IGTCKPT1`, digest length `u32` and UTF-8
    /// hex digest, `u64` tensor count, then per tensor a `u32`-prefixed name,
    /// `u32` rows, `u32` cols and row-major `f32` values.
    pub fn write_checkpoint<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        let digest = self.digest();
        w.write_all(&(digest.len() as u32).to_le_bytes())?;
        w.write_all(digest.as_bytes())?;
        w.write_all(&(self.store.len() as u64).to_le_bytes())?;
        for (_, p) in self.store.iter() {
            w.write_all(&(p.name.len() as u32).to_le_bytes())?;
            w.write_all(p.name.as_bytes())?;
            w.write_all(&(p.value.rows() as u32).to_le_bytes())?;
            w.write_all(&(p.value.cols() as u32).to_le_bytes())?;
            for &v in p.value.as_slice() {
                w.write_all(&v.as_f32().to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Replaces every parameter; the file must come from an identically configured model.
    pub fn read_checkpoint<R: Read>(&mut self, r: &mut R) -> Result<()> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let dlen = read_u32(r)? as usize;
        let mut digest = vec![0u8; dlen];
        r.read_exact(&mut digest)?;
        let found = String::from_utf8(digest).map_err(|_| Error::Format("checkpoint digest is not UTF-8".into()))?;
        let expected = self.digest();
        if found != expected {
            return Err(Error::DigestMismatch { expected, found });
        }
        let count = read_u64(r)? as usize;
        if count != self.store.len() {
            return Err(Error::Format(format!("checkpoint holds {count} tensors, model has {}", self.store.len())));
        }
        let mut values = Vec::with_capacity(count);
        for (_, p) in self.store.iter() {
            let nlen = read_u32(r)? as usize;
            let mut name = vec![0u8; nlen];
            r.read_exact(&mut name)?;
            if name != p.name.as_bytes() {
                return Err(Error::Format(format!("expected tensor {}, found {}", p.name, String::from_utf8_lossy(&name))));
            }
            let rows = read_u32(r)? as usize;
            let cols = read_u32(r)? as usize;
            if (rows, cols) != p.value.shape() {
                return Err(Error::Format(format!("tensor {} has shape {rows}x{cols}, expected {:?}", p.name, p.value.shape())));
            }
            let mut buf = vec![0u8; rows * cols * 4];
            r.read_exact(&mut buf)?;
            let data = buf
                .chunks_exact(4)
                .map(|c| T::c(f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes")))))
                .collect();
            values.push(Tensor::from_vec(rows, cols, data)?);
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes after checkpoint", rest.len())));
        }
        for (id, v) in self.store.ids().collect::<Vec<_>>().into_iter().zip(values) {
            *self.store.value_mut(id) = v;
        }
        Ok(())
    }
}

/// Relation token of the first sampled triple that introduced `e` (as tail, else as head).
fn occurrence_relation(subgraph: &Subgraph, e: EntityId) -> Option<usize> {
    let rest = || subgraph.triples.iter().zip(&subgraph.triple_tokens).skip(1);
    rest()
        .find(|(t, _)| t.tail == Some(e))
        .or_else(|| rest().find(|(t, _)| t.head == e))
        .map(|(_, tok)| tok[1])
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"IGTCKPT1";

pub fn config_digest(config: &ModelConfig, num_entities: usize, num_relation_slots: usize) -> String {
    let json = serde_json::to_string(&(config, num_entities, num_relation_slots)).expect("config serializes");
    let hash = Sha256::digest(json.as_bytes());
    hash.iter().map(|b| format!("{b:02x}")).collect()
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}
