//! Training loop behaviour on the synthetic corpus.

use automlm_core::corpus::{generate_synthetic_corpus, pairs_from_sessions, Pairing, SessionPair, DEFAULT_MAX_PAIRS};
use automlm_core::model::{init_params, load_checkpoint, ModelConfig};
use automlm_core::objectives::{evaluate_batch, ObjectiveConfig, ObjectiveMode};
use automlm_core::tokenizer::{build_vocab, Vocab};
use automlm_core::trainer::{
    make_batches, masking_rng, sampler_rng, train, train_step, EncodedPairs, EvalBundle, MetricsRecord, TrainConfig,
    CHECKPOINT_FILE, METRICS_FILE,
};
use automlm_core::Error;

struct Setup {
    pairs: Vec<SessionPair>,
    vocab: Vocab,
    model: ModelConfig,
    eval: EvalBundle,
}

fn setup(seed: u64) -> Setup {
    let corpus = generate_synthetic_corpus(20, 10, 0.1, seed).unwrap();
    let pairs = pairs_from_sessions(&corpus.sessions, DEFAULT_MAX_PAIRS, Pairing::Nearest);
    let vocab = build_vocab(pairs.iter().flat_map(|p| [&p.agent_query, &p.user_query]), 8000, 1).unwrap();
    let model = ModelConfig {
        n_layers: 1,
        hidden_dim: 32,
        n_heads: 2,
        ffn_dim: 64,
        max_len: 12,
        vocab_size: vocab.len(),
        dropout_rate: 0.0,
        seed,
    };
    Setup {
        pairs,
        vocab,
        model,
        eval: EvalBundle {
            knowledge: corpus.knowledge,
            tests: corpus.tests,
        },
    }
}

fn config(mode: ObjectiveMode, lambda: f64, steps: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        objective: ObjectiveConfig {
            mode,
            lambda,
            ..ObjectiveConfig::default()
        },
        batch_size: 8,
        max_steps: steps,
        learning_rate: 1e-3,
        seed,
        ..TrainConfig::default()
    }
}

#[test]
fn zero_lambda_reproduces_contrastive_training() {
    let s = setup(1);
    for steps in [1, 5, 20] {
        let joint = train(&s.pairs, &config(ObjectiveMode::ClAutomlm, 0.0, steps, 4), &s.vocab, &s.model, None, None)
            .unwrap();
        let cl = train(&s.pairs, &config(ObjectiveMode::Cl, 0.0, steps, 4), &s.vocab, &s.model, None, None).unwrap();
        assert_eq!(joint.params, cl.params, "trajectories diverged within {steps} steps");
        for (a, b) in joint.losses.iter().zip(&cl.losses) {
            assert_eq!(a.cl.to_bits(), b.cl.to_bits());
            assert_eq!(a.joint.to_bits(), b.joint.to_bits());
        }
    }
}

#[test]
fn zero_gradient_step_leaves_params_unchanged() {
    let s = setup(2);
    let mut cfg = config(ObjectiveMode::Cl, 1.0, 1, 2);
    // Every hinge term is inactive: max(0, neg - pos - 10) = 0 for cosines.
    cfg.objective.margin = -10.0;
    let mut params = init_params::<f32>(&s.model).unwrap();
    let before = params.clone();
    let mut opt = cfg.optimizer(&params);
    let encoded = EncodedPairs::new(&s.pairs, &s.vocab, s.model.max_len);
    let mut sampler = make_batches(&s.pairs, cfg.batch_size, sampler_rng(cfg.seed)).unwrap();
    for step in 0..3 {
        let batch = encoded.batch(&sampler.next().unwrap(), &cfg, s.vocab.len(), &mut masking_rng(0, step)).unwrap();
        let loss = train_step(&mut params, &mut opt, &batch, &cfg, step, None).unwrap();
        assert_eq!(loss.cl, 0.0);
    }
    assert_eq!(params, before);
    assert_eq!(opt.step, 3);
}

#[test]
fn single_step_descends_on_the_same_batch() {
    let mut descents = 0;
    let trials = 100;
    for trial in 0..trials {
        let s = setup(1000 + trial);
        let mut cfg = config(ObjectiveMode::ClAutomlm, 1.0, 1, trial);
        cfg.learning_rate = 1e-4;
        let mut params = init_params::<f32>(&s.model).unwrap();
        let mut opt = cfg.optimizer(&params);
        let encoded = EncodedPairs::new(&s.pairs, &s.vocab, s.model.max_len);
        let indices = make_batches(&s.pairs, cfg.batch_size, sampler_rng(trial)).unwrap().next().unwrap();
        let batch = encoded.batch(&indices, &cfg, s.vocab.len(), &mut masking_rng(trial, 0)).unwrap();
        let before = train_step(&mut params, &mut opt, &batch, &cfg, 0, None).unwrap();
        let (after, _, _) = evaluate_batch(&params, &batch, &cfg.objective, None, false).unwrap();
        if after.joint < before.joint {
            descents += 1;
        }
    }
    assert!(descents >= 95, "only {descents}/{trials} steps reduced the loss");
}

#[test]
fn identical_seeds_give_identical_checkpoints() {
    let s = setup(3);
    let mut cfg = config(ObjectiveMode::ClAutomlm, 1.0, 12, 9);
    cfg.eval_every = 5;
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        train(&s.pairs, &cfg, &s.vocab, &s.model, Some(&s.eval), Some(d.path())).unwrap();
    }
    let read = |d: &tempfile::TempDir, f: &str| std::fs::read(d.path().join(f)).unwrap();
    assert_eq!(read(&dirs[0], CHECKPOINT_FILE), read(&dirs[1], CHECKPOINT_FILE));
    assert_eq!(read(&dirs[0], METRICS_FILE), read(&dirs[1], METRICS_FILE));

    let metrics = String::from_utf8(read(&dirs[0], METRICS_FILE)).unwrap();
    let records: Vec<MetricsRecord> = metrics.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.iter().map(|r| r.step).collect::<Vec<_>>(), vec![5, 10, 12]);
    assert!(records.iter().all(|r| r.top1.is_some() && r.top5.unwrap() >= r.top1.unwrap()));

    let mut other = cfg.clone();
    other.seed = 10;
    let d = tempfile::tempdir().unwrap();
    train(&s.pairs, &other, &s.vocab, &s.model, None, Some(d.path())).unwrap();
    assert_ne!(read(&dirs[0], CHECKPOINT_FILE), read(&d, CHECKPOINT_FILE));
}

#[test]
fn zero_steps_checkpoints_initial_params() {
    let s = setup(4);
    let d = tempfile::tempdir().unwrap();
    let report = train(&s.pairs, &config(ObjectiveMode::Cl, 1.0, 0, 0), &s.vocab, &s.model, None, Some(d.path())).unwrap();
    assert!(report.losses.is_empty());
    let (params, model, vocab) = load_checkpoint(&d.path().join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(params, init_params::<f32>(&s.model).unwrap());
    assert_eq!(model, s.model);
    assert_eq!(vocab, s.vocab);
}

#[test]
fn series_length_matches_steps() {
    let s = setup(5);
    for mode in [
        ObjectiveMode::Cl,
        ObjectiveMode::Mlm,
        ObjectiveMode::Automlm,
        ObjectiveMode::ClMlm,
        ObjectiveMode::ClAutomlm,
    ] {
        let report = train(&s.pairs, &config(mode, 1.0, 7, 1), &s.vocab, &s.model, None, None).unwrap();
        assert_eq!(report.losses.len(), 7);
        assert!(report.losses.iter().all(|l| l.is_finite()));
        assert_eq!(report.losses[0].mlm.is_some(), mode.uses_mlm());
    }
}

#[test]
fn non_finite_loss_aborts_without_update() {
    let s = setup(6);
    let cfg = config(ObjectiveMode::ClAutomlm, 1.0, 1, 0);
    let mut params = init_params::<f32>(&s.model).unwrap();
    params.output_bias[5] = f32::NAN;
    let mut opt = cfg.optimizer(&params);
    let encoded = EncodedPairs::new(&s.pairs, &s.vocab, s.model.max_len);
    let indices = make_batches(&s.pairs, 8, sampler_rng(0)).unwrap().next().unwrap();
    let batch = encoded.batch(&indices, &cfg, s.vocab.len(), &mut masking_rng(0, 0)).unwrap();
    let before_bits: Vec<u32> = params.token_embedding.iter().map(|x| x.to_bits()).collect();
    let err = train_step(&mut params, &mut opt, &batch, &cfg, 17, None).unwrap_err();
    assert!(matches!(err, Error::NonFiniteLoss { step: 17, .. }), "{err}");
    let after_bits: Vec<u32> = params.token_embedding.iter().map(|x| x.to_bits()).collect();
    assert_eq!(before_bits, after_bits);
    assert_eq!(opt.step, 0);
}

#[test]
fn rejects_inconsistent_inputs() {
    let s = setup(7);
    let mut model = s.model.clone();
    model.vocab_size += 1;
    let cfg = config(ObjectiveMode::Cl, 1.0, 1, 0);
    assert!(matches!(train(&s.pairs, &cfg, &s.vocab, &model, None, None), Err(Error::Config(_))));
    let mut small = cfg.clone();
    small.batch_size = 1;
    assert!(matches!(train(&s.pairs, &small, &s.vocab, &s.model, None, None), Err(Error::Config(_))));
    let mut big = cfg.clone();
    big.batch_size = 10_000;
    assert!(matches!(
        train(&s.pairs, &big, &s.vocab, &s.model, None, None),
        Err(Error::NotEnoughSessions { .. })
    ));
    let mut neg = cfg;
    neg.objective.lambda = -1.0;
    assert!(train(&s.pairs, &neg, &s.vocab, &s.model, None, None).is_err());
}

#[test]
fn adam_moments_stay_finite_over_long_runs() {
    let s = setup(8);
    let model = ModelConfig {
        hidden_dim: 16,
        ffn_dim: 32,
        ..s.model.clone()
    };
    let mut cfg = config(ObjectiveMode::ClAutomlm, 1.0, 10_000, 8);
    cfg.learning_rate = 1e-3;
    let mut params = init_params::<f32>(&model).unwrap();
    let mut opt = cfg.optimizer(&params);
    let encoded = EncodedPairs::new(&s.pairs, &s.vocab, model.max_len);
    let mut sampler = make_batches(&s.pairs, cfg.batch_size, sampler_rng(cfg.seed)).unwrap();
    for step in 0..cfg.max_steps {
        let batch = encoded
            .batch(&sampler.next().unwrap(), &cfg, s.vocab.len(), &mut masking_rng(cfg.seed, step))
            .unwrap();
        train_step(&mut params, &mut opt, &batch, &cfg, step, None).unwrap();
    }
    assert!(opt.is_finite());
    assert!(params.is_finite());
}

#[test]
fn warmup_ramps_linearly() {
    let cfg = TrainConfig {
        learning_rate: 1e-3,
        warmup_steps: 4,
        ..TrainConfig::default()
    };
    let rates: Vec<f64> = (0..6).map(|s| cfg.learning_rate_at(s)).collect();
    let expected = [2.5e-4, 5e-4, 7.5e-4, 1e-3, 1e-3, 1e-3];
    for (r, e) in rates.iter().zip(expected) {
        assert!((r - e).abs() < 1e-18);
    }
}
