#![allow(dead_code)]

use automlm_core::model::{ModelConfig, Objective, Params};
use automlm_core::objectives::{AutoMlmSide, MaskingConfig, TrainingBatch};
use automlm_core::tokenizer::{EncodedSentence, CLS, PAD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// 1 layer, width 16, 50-token vocabulary.
pub fn small_config(seed: u64) -> ModelConfig {
    ModelConfig {
        n_layers: 1,
        hidden_dim: 16,
        n_heads: 2,
        ffn_dim: 64,
        max_len: 10,
        vocab_size: 50,
        dropout_rate: 0.0,
        seed,
    }
}

pub fn random_sentence(rng: &mut ChaCha8Rng, max_len: usize, vocab: usize) -> EncodedSentence {
    let len = rng.gen_range(3..=max_len);
    let mut ids = vec![CLS];
    ids.extend((1..len).map(|_| rng.gen_range(4..vocab as u32)));
    ids.resize(max_len, PAD);
    EncodedSentence { ids, true_len: len }
}

pub fn random_batch(cfg: &ModelConfig, n_pairs: usize, seed: u64) -> TrainingBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let agents = (0..n_pairs).map(|_| random_sentence(&mut rng, cfg.max_len, cfg.vocab_size)).collect();
    let users = (0..n_pairs).map(|_| random_sentence(&mut rng, cfg.max_len, cfg.vocab_size)).collect();
    let masking = MaskingConfig {
        mask_prob: 0.3,
        ..MaskingConfig::default()
    };
    TrainingBatch::new(agents, users, AutoMlmSide::Both, &masking, cfg.vocab_size, &mut rng).unwrap()
}

pub struct GradCheck {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub nonzero_checked: usize,
}

/// Relative error with a small floor so coordinates whose true gradient is
/// zero are judged on absolute error.
pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-7)
}

/// Compares reverse-mode gradients with central differences at `samples`
/// uniformly drawn parameter coordinates.
pub fn finite_difference_check(
    params: &Params<f64>,
    objective: &impl Objective<f64>,
    samples: usize,
    h: f64,
    seed: u64,
) -> GradCheck {
    let (_, grads) = objective.loss_and_gradients(params).unwrap();
    let n = params.num_scalars();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = params.clone();
    let mut out = GradCheck {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        nonzero_checked: 0,
    };
    for _ in 0..samples {
        let idx = rng.gen_range(0..n);
        let x = params.get_flat(idx);
        probe.set_flat(idx, x + h);
        let plus = objective.loss(&probe).unwrap();
        probe.set_flat(idx, x - h);
        let minus = objective.loss(&probe).unwrap();
        probe.set_flat(idx, x);
        let numeric = (plus - minus) / (2.0 * h);
        let analytic = grads.get_flat(idx);
        if analytic != 0.0 {
            out.nonzero_checked += 1;
        }
        let err = rel_error(analytic, numeric);
        if err > out.max_rel_error {
            out.max_rel_error = err;
            out.worst_index = idx;
            out.analytic = analytic;
            out.numeric = numeric;
        }
    }
    out
}
