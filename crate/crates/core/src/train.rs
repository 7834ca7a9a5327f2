//! Training loop: per-group AdamW with linear warm-up/decay, deterministic
//! sampling and accumulation, JSONL step log, validation and checkpoints.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalConfig, Metrics};
use crate::kg::{Dataset, Triple};
use crate::model::{ForwardOptions, Model};
use crate::params::{Gradients, ParamGroup, ParamStore};
use crate::sampler::{derive_seed, extract_subgraph, rng_for, SamplerConfig};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupSchedule {
    pub lr: f64,
    pub warmup: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Indexed by [`ParamGroup::index`].
    pub schedules: [GroupSchedule; 3],
    pub batch_size: usize,
    pub grad_accum: usize,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub sampler: SamplerConfig,
    pub seed: u64,
    /// Validate every this many epochs; 0 disables validation.
    pub eval_every: usize,
    pub valid_max_queries: Option<usize>,
    pub filtered: bool,
    /// Reload the best validated parameters at the end.
    pub restore_best: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            schedules: [
                GroupSchedule { lr: 1e-4, warmup: 0.02 },
                GroupSchedule { lr: 1e-5, warmup: 0.04 },
                GroupSchedule { lr: 1e-3, warmup: 0.01 },
            ],
            batch_size: 16,
            grad_accum: 4,
            weight_decay: 0.01,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            sampler: SamplerConfig::default(),
            seed: 0,
            eval_every: 1,
            valid_max_queries: None,
            filtered: true,
            restore_best: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (g, s) in ParamGroup::ALL.iter().zip(&self.schedules) {
            if !(s.lr > 0.0 && s.lr.is_finite()) {
                return Err(Error::Config(format!("{} learning rate must be positive, got {}", g.name(), s.lr)));
            }
            if !(0.0..1.0).contains(&s.warmup) {
                return Err(Error::Config(format!("{} warm-up fraction {} outside [0, 1)", g.name(), s.warmup)));
            }
        }
        if self.batch_size == 0 || self.grad_accum == 0 {
            return Err(Error::Config("batch_size and grad_accum must be positive".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        self.sampler.validate()
    }

    pub fn items_per_step(&self) -> usize {
        self.batch_size * self.grad_accum
    }

    pub fn schedule(&self, group: ParamGroup) -> GroupSchedule {
        self.schedules[group.index()]
    }
}

/// Linear ramp from 0 to `base_lr` over `warmup_fraction * total_steps`, then linear decay to 0.
pub fn lr_at(step: usize, total_steps: usize, base_lr: f64, warmup_fraction: f64) -> f64 {
    if total_steps == 0 {
        return 0.0;
    }
    let s = step.min(total_steps) as f64;
    let total = total_steps as f64;
    let warm = warmup_fraction * total;
    if s < warm {
        base_lr * s / warm
    } else {
        base_lr * (total - s) / (total - warm)
    }
}

/// Decoupled-weight-decay Adam with one schedule per parameter group.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    pub step: usize,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(store: &ParamStore<T>, config: &TrainConfig) -> Self {
        let zeros = || store.iter().map(|(_, p)| Tensor::zeros(p.value.rows(), p.value.cols())).collect();
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
            beta1: config.adam_beta1,
            beta2: config.adam_beta2,
            eps: config.adam_eps,
            weight_decay: config.weight_decay,
        }
    }

    /// Applies one update with per-group learning rates.
    pub fn update(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>, lrs: [f64; 3]) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::c(self.beta1), T::c(self.beta2));
        let (one_b1, one_b2) = (T::c(1.0 - self.beta1), T::c(1.0 - self.beta2));
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let (group, no_decay) = {
                let p = store.get(id);
                (p.group, p.no_decay)
            };
            let lr = lrs[group.index()];
            let i = id.index();
            if let Some(g) = grads.get(id) {
                for ((m, v), &gv) in self.m[i].as_mut_slice().iter_mut().zip(self.v[i].as_mut_slice()).zip(g.as_slice()) {
                    *m = b1 * *m + one_b1 * gv;
                    *v = b2 * *v + one_b2 * gv * gv;
                }
            } else {
                for (m, v) in self.m[i].as_mut_slice().iter_mut().zip(self.v[i].as_mut_slice()) {
                    *m *= b1;
                    *v *= b2;
                }
            }
            let step_size = T::c(lr / bc1);
            let denom_scale = T::c(1.0 / bc2.sqrt());
            let decay = if no_decay { T::zero() } else { T::c(lr * self.weight_decay) };
            let eps = T::c(self.eps);
            let (m, v) = (&self.m[i], &self.v[i]);
            for ((w, &mv), &vv) in store.value_mut(id).as_mut_slice().iter_mut().zip(m.as_slice()).zip(v.as_slice()) {
                *w -= decay * *w;
                *w -= step_size * mv / ((vv.sqrt() * denom_scale) + eps);
            }
        }
    }
}

/// One JSONL line per optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub items: usize,
    pub l_ce: f64,
    pub l_pos: f64,
    pub l_neg: f64,
    pub beta2: f64,
    pub total: f64,
    pub pos_count: f64,
    pub neg_count: f64,
    pub lr: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub mean_total: f64,
    pub valid: Option<Metrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub epochs: Vec<EpochSummary>,
    pub best_epoch: Option<usize>,
    pub best_valid_mrr: Option<f64>,
}

/// Where checkpoints go; `None` keeps everything in memory.
#[derive(Clone, Debug, Default)]
pub struct TrainOutputs {
    pub dir: Option<PathBuf>,
}

impl TrainOutputs {
    pub fn path(&self, name: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(name))
    }
}

pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";

/// Gradient of the mean item loss over `items`, summed in the given order.
pub fn batch_gradients<T: Scalar>(
    model: &Model<T>,
    train: &crate::kg::KnowledgeGraph,
    items: &[(usize, Triple)],
    sampler: &SamplerConfig,
    seed: u64,
    epoch: usize,
    options: ForwardOptions,
) -> Result<(Gradients<T>, Vec<crate::objective::LossBreakdown>)> {
    let mut acc = Gradients::new(model.store.len());
    let mut parts = Vec::with_capacity(items.len());
    for &(index, t) in items {
        let item_seed = derive_seed(seed, &[epoch as u64, index as u64]);
        let mut rng = rng_for(item_seed);
        let sub = extract_subgraph(train, t.head, t.relation, Some(t.tail), sampler, &mut rng)?;
        let positions = model.positions(&sub)?;
        let mut tape = Tape::new(&model.store);
        let mut drop_rng = rng_for(item_seed ^ 0xD5A6_1266_F0C9_392C);
        let out = model.item_loss(&mut tape, &sub, &positions, options, Some(&mut drop_rng))?;
        if !out.breakdown.total.is_finite() {
            let dump = serde_json::json!({
                "query": {"head": t.head.0, "relation": t.relation.raw(), "tail": t.tail.0},
                "losses": out.breakdown,
                "subgraph_triples": sub.num_triples(),
            });
            return Err(Error::NonFiniteLoss { step: 0, dump: dump.to_string() });
        }
        let g = tape.backward(out.loss);
        acc.merge(&g);
        parts.push(out.breakdown);
    }
    if !items.is_empty() {
        acc.scale(T::one() / T::count(items.len()));
    }
    Ok((acc, parts))
}

pub fn train<T: Scalar>(
    model: &mut Model<T>,
    data: &Dataset,
    config: &TrainConfig,
    outputs: &TrainOutputs,
    log: &mut dyn Write,
) -> Result<TrainSummary> {
    config.validate()?;
    let train_graph = &data.train;
    let items: Vec<(usize, Triple)> = train_graph.triples().iter().copied().enumerate().collect();
    let per_step = config.items_per_step();
    let steps_per_epoch = items.len().div_ceil(per_step);
    let total_steps = steps_per_epoch * config.epochs;
    let known = data.known_true();
    let mut opt = AdamW::new(&model.store, config);
    let mut summary = TrainSummary { steps: 0, epochs: Vec::new(), best_epoch: None, best_valid_mrr: None };
    let mut best_params: Option<Vec<Tensor<T>>> = None;

    if let Some(p) = outputs.path(LAST_CHECKPOINT) {
        model.save_checkpoint(p)?;
    }
    if config.epochs == 0 || items.is_empty() {
        return Ok(summary);
    }

    for epoch in 0..config.epochs {
        let mut order = items.clone();
        order.shuffle(&mut rng_for(derive_seed(config.seed, &[u64::MAX, epoch as u64])));
        let mut epoch_total = 0.0;
        for chunk in order.chunks(per_step) {
            let (grads, parts) =
                batch_gradients(model, train_graph, chunk, &config.sampler, config.seed, epoch, ForwardOptions::default())
                    .map_err(|e| match e {
                        Error::NonFiniteLoss { dump, .. } => Error::NonFiniteLoss { step: summary.steps + 1, dump },
                        other => other,
                    })?;
            let step = summary.steps + 1;
            let lrs = ParamGroup::ALL.map(|g| {
                let s = config.schedule(g);
                lr_at(step, total_steps, s.lr, s.warmup)
            });
            opt.update(&mut model.store, &grads, lrs);
            if !model.store.all_finite() {
                return Err(Error::NonFiniteLoss { step, dump: "parameters became non-finite after the update".into() });
            }
            summary.steps = step;
            let n = parts.len() as f64;
            let mean = |f: fn(&crate::objective::LossBreakdown) -> f64| parts.iter().map(f).sum::<f64>() / n;
            let entry = StepLog {
                step,
                epoch,
                items: parts.len(),
                l_ce: mean(|b| b.l_ce),
                l_pos: mean(|b| b.l_pos),
                l_neg: mean(|b| b.l_neg),
                beta2: mean(|b| b.beta2),
                total: mean(|b| b.total),
                pos_count: mean(|b| b.pos_count as f64),
                neg_count: mean(|b| b.neg_count as f64),
                lr: lrs,
            };
            epoch_total += entry.total * n;
            writeln!(log, "{}", serde_json::to_string(&entry).expect("log line serializes"))?;
        }
        let mut epoch_summary = EpochSummary { epoch, mean_total: epoch_total / items.len() as f64, valid: None };
        let validate = config.eval_every > 0 && (epoch + 1) % config.eval_every == 0 && !data.valid.is_empty();
        if validate {
            let eval_cfg = EvalConfig {
                filtered: config.filtered,
                sampler: config.sampler.clone(),
                seed: derive_seed(config.seed, &[u64::MAX - 1]),
                max_queries: config.valid_max_queries,
                keep_rankings: false,
            };
            let report = evaluate(model, train_graph, &data.valid, &known, &eval_cfg, "valid")?;
            log::info!("epoch {epoch}: valid MRR {:.4} Hits@10 {:.4}", report.overall.mrr, report.overall.hits10);
            let improved = summary.best_valid_mrr.is_none_or(|b| report.overall.mrr > b);
            if improved {
                summary.best_valid_mrr = Some(report.overall.mrr);
                summary.best_epoch = Some(epoch);
                if config.restore_best {
                    best_params = Some(model.store.iter().map(|(_, p)| p.value.clone()).collect());
                }
                if let Some(p) = outputs.path(BEST_CHECKPOINT) {
                    model.save_checkpoint(p)?;
                }
            }
            epoch_summary.valid = Some(report.overall);
        }
        summary.epochs.push(epoch_summary);
    }
    if let Some(p) = outputs.path(LAST_CHECKPOINT) {
        model.save_checkpoint(p)?;
    }
    if let Some(best) = best_params {
        let ids: Vec<_> = model.store.ids().collect();
        for (id, v) in ids.into_iter().zip(best) {
            *model.store.value_mut(id) = v;
        }
    }
    Ok(summary)
}

/// Reads a JSONL step log back.
pub fn read_log(path: &Path) -> Result<Vec<StepLog>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Parse { line: i + 1, message: e.to_string() }))
        .collect()
}
