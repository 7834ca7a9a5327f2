mod common;

use common::toy_run_config;
use igt_core::eval::{evaluate, EvalConfig};
use igt_core::fusion::FusionConfig;
use igt_core::kg::{Dataset, TextCatalog, Triple};
use igt_core::model::{ForwardOptions, Model, ModelResources};
use igt_core::params::ParamGroup;
use igt_core::synthetic::toy_dataset;
use igt_core::Scalar;
use igt_core::train::{batch_gradients, lr_at, read_log, train, AdamW, TrainOutputs, LAST_CHECKPOINT};
use proptest::prelude::*;

fn toy_model<T: Scalar>(cfg: &igt_core::config::RunConfig, data: &Dataset) -> Model<T> {
    let catalog = TextCatalog::from_names(&data.train);
    let resources = ModelResources { catalog: Some(&catalog), ..ModelResources::default() };
    Model::new(cfg.model_config(), data.num_entities(), data.train.relation_slots(), resources, cfg.train.seed).unwrap()
}

fn small_config() -> igt_core::config::RunConfig {
    let mut cfg = toy_run_config();
    cfg.apply_text("d_model = 8\nn_heads = 2\nn_layers = 1\nd_ff = 16\nd_pool = 8\nclassifier_hidden = 16\nepochs = 1\n").unwrap();
    cfg
}

fn params<T: Scalar>(m: &Model<T>) -> Vec<Vec<f64>> {
    m.store.iter().map(|(_, p)| p.value.as_slice().iter().map(|x| x.as_f64()).collect()).collect()
}

#[test]
fn runs_are_deterministic() {
    let data = toy_dataset().unwrap();
    let cfg = small_config();
    let run = || {
        let mut m = toy_model::<f64>(&cfg, &data);
        let mut log = Vec::new();
        train(&mut m, &data, &cfg.train, &TrainOutputs::default(), &mut log).unwrap();
        (log, params(&m))
    };
    let (a_log, a_params) = run();
    let (b_log, b_params) = run();
    assert!(!a_log.is_empty());
    assert_eq!(a_log, b_log);
    assert_eq!(a_params, b_params);
}

#[test]
fn accumulated_gradient_equals_big_batch() {
    let data = toy_dataset().unwrap();
    let cfg = small_config();
    let model = toy_model::<f64>(&cfg, &data);
    let items: Vec<(usize, Triple)> = data.train.triples().iter().copied().enumerate().take(8).collect();
    let opts = ForwardOptions::default();
    let (big, _) = batch_gradients(&model, &data.train, &items, &cfg.train.sampler, 3, 0, opts).unwrap();
    let (a, _) = batch_gradients(&model, &data.train, &items[..4], &cfg.train.sampler, 3, 0, opts).unwrap();
    let (b, _) = batch_gradients(&model, &data.train, &items[4..], &cfg.train.sampler, 3, 0, opts).unwrap();
    let mut max_diff: f64 = 0.0;
    for (id, g) in big.iter() {
        let ga = a.get(id).map(|t| t.as_slice().to_vec());
        let gb = b.get(id).map(|t| t.as_slice().to_vec());
        for (k, &x) in g.as_slice().iter().enumerate() {
            let y = 0.5 * (ga.as_ref().map_or(0.0, |v| v[k]) + gb.as_ref().map_or(0.0, |v| v[k]));
            max_diff = max_diff.max((x - y).abs());
        }
    }
    assert!(max_diff <= 1e-6, "max difference {max_diff}");

    // the same items per step through either split of the batch give the same run
    let mut one = small_config();
    one.apply_text("batch_size = 8\ngrad_accum = 1\n").unwrap();
    let mut two = small_config();
    two.apply_text("batch_size = 4\ngrad_accum = 2\n").unwrap();
    let mut ma = toy_model::<f64>(&one, &data);
    let mut mb = toy_model::<f64>(&two, &data);
    train(&mut ma, &data, &one.train, &TrainOutputs::default(), &mut std::io::sink()).unwrap();
    train(&mut mb, &data, &two.train, &TrainOutputs::default(), &mut std::io::sink()).unwrap();
    for (x, y) in params(&ma).iter().flatten().zip(params(&mb).iter().flatten()) {
        assert!((x - y).abs() <= 1e-6);
    }
}

#[test]
fn checkpoint_reproduces_metrics() {
    let data = toy_dataset().unwrap();
    let cfg = small_config();
    let dir = tempfile::tempdir().unwrap();
    let outputs = TrainOutputs { dir: Some(dir.path().to_path_buf()) };
    let mut trained = toy_model::<f32>(&cfg, &data);
    let mut log = Vec::new();
    let summary = train(&mut trained, &data, &cfg.train, &outputs, &mut log).unwrap();
    std::fs::write(dir.path().join("log.jsonl"), &log).unwrap();
    let steps = read_log(&dir.path().join("log.jsonl")).unwrap();
    assert_eq!(steps.len(), summary.steps);
    assert_eq!(steps.last().unwrap().step, summary.steps);

    let mut reloaded = toy_model::<f32>(&small_config(), &data);
    reloaded.load_checkpoint(dir.path().join(LAST_CHECKPOINT)).unwrap();
    let eval_cfg = EvalConfig { sampler: cfg.train.sampler.clone(), keep_rankings: true, ..EvalConfig::default() };
    let known = data.known_true();
    let a = evaluate(&trained, &data.train, &data.test, &known, &eval_cfg, "toy").unwrap();
    let b = evaluate(&reloaded, &data.train, &data.test, &known, &eval_cfg, "toy").unwrap();
    assert_eq!(a, b);
}

#[test]
fn zero_epochs_writes_initial_checkpoint() {
    let data = toy_dataset().unwrap();
    let mut cfg = small_config();
    cfg.train.epochs = 0;
    let dir = tempfile::tempdir().unwrap();
    let outputs = TrainOutputs { dir: Some(dir.path().to_path_buf()) };
    let mut model = toy_model::<f32>(&cfg, &data);
    let initial = params(&model);
    let mut log = Vec::new();
    let summary = train(&mut model, &data, &cfg.train, &outputs, &mut log).unwrap();
    assert_eq!(summary.steps, 0);
    assert!(log.is_empty());
    let mut reloaded = toy_model::<f32>(&cfg, &data);
    reloaded.load_checkpoint(dir.path().join(LAST_CHECKPOINT)).unwrap();
    assert_eq!(params(&reloaded), initial);
}

#[test]
fn param_groups_are_exhaustive_and_disjoint() {
    let data = toy_dataset().unwrap();
    let mut cfg = small_config();
    cfg.apply_text("fusion = stub\nlambda = 0.5\nd_llm = 8\nstub_layers = 1\nstub_heads = 2\n").unwrap();
    let model = toy_model::<f64>(&cfg, &data);
    let mut counts = [0usize; 3];
    for (_, p) in model.store.iter() {
        counts[p.group.index()] += 1;
    }
    assert!(counts.iter().all(|&c| c > 0), "{counts:?}");
    assert_eq!(counts.iter().sum::<usize>(), model.store.len());

    let items: Vec<(usize, Triple)> = data.train.triples().iter().copied().enumerate().take(4).collect();
    let (grads, _) =
        batch_gradients(&model, &data.train, &items, &cfg.train.sampler, 0, 0, ForwardOptions::default()).unwrap();
    for group in ParamGroup::ALL {
        let mut m = toy_model::<f64>(&cfg, &data);
        let before = params(&m);
        let mut lrs = [0.0; 3];
        lrs[group.index()] = 1e-2;
        AdamW::new(&m.store, &cfg.train).update(&mut m.store, &grads, lrs);
        let after = params(&m);
        for ((_, p), (b, a)) in m.store.iter().zip(before.iter().zip(&after)) {
            if p.group != group {
                assert_eq!(b, a, "{} moved under the {} schedule", p.name, group.name());
            }
        }
        assert_ne!(before, after);
    }
}

#[test]
fn toy_validation_improves() {
    let data = toy_dataset().unwrap();
    let mut cfg = toy_run_config();
    cfg.apply_text("epochs = 20\neval_every = 1\n").unwrap();
    let catalog = TextCatalog::from_names(&data.train);
    let resources = ModelResources { catalog: Some(&catalog), ..ModelResources::default() };
    let mut model =
        Model::<f32>::new(cfg.model_config(), data.num_entities(), data.train.relation_slots(), resources, 0).unwrap();
    let summary = train(&mut model, &data, &cfg.train, &TrainOutputs::default(), &mut std::io::sink()).unwrap();
    let first = summary.epochs[0].valid.as_ref().unwrap().hits10;
    let last = summary.epochs[19].valid.as_ref().unwrap().hits10;
    assert!(last > first, "Hits@10 {first} -> {last}");
}

#[test]
fn fusion_config_round_trips_through_text() {
    let mut cfg = small_config();
    cfg.apply_text("fusion = stub\nlambda = 0.25\n").unwrap();
    let mut back = igt_core::config::RunConfig::default();
    back.apply_text(&cfg.to_text()).unwrap();
    assert_eq!(back.model_config(), cfg.model_config());
    assert_eq!(back.model_config().fusion.unwrap().lambda, FusionConfig { lambda: 0.25, ..FusionConfig::default() }.lambda);
}

proptest! {
    #[test]
    fn lr_schedule_bounds(total in 1usize..500, step in 0usize..600, base in 1e-6f64..1.0, warm in 0.0f64..0.9) {
        let lr = lr_at(step, total, base, warm);
        prop_assert!((0.0..=base * (1.0 + 1e-12)).contains(&lr));
        if step >= total {
            prop_assert_eq!(lr, 0.0);
        }
        // non-decreasing during warm-up, non-increasing afterwards
        let next = lr_at(step + 1, total, base, warm);
        if ((step + 1) as f64) < warm * total as f64 {
            prop_assert!(next >= lr);
        } else if (step as f64) >= warm * total as f64 {
            prop_assert!(next <= lr);
        }
    }
}

/// Published learning rates, warm-up fractions, epochs and accumulation steps.
#[test]
fn defaults_match_reference_schedule() {
    let cfg = igt_core::train::TrainConfig::default();
    let expect = [(ParamGroup::Encoder, 1e-4, 0.02), (ParamGroup::Provider, 1e-5, 0.04), (ParamGroup::Other, 1e-3, 0.01)];
    for (g, lr, warm) in expect {
        assert_eq!(cfg.schedule(g).lr, lr);
        assert_eq!(cfg.schedule(g).warmup, warm);
    }
    assert_eq!(cfg.epochs, 10);
    assert_eq!(cfg.grad_accum, 4);
}
