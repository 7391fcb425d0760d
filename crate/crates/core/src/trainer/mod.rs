//! Batch training loop: session-distinct batching, joint loss, Adam updates,
//! checkpoints and periodic evaluation.

mod batching;
mod optimizer;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use batching::{make_batches, BatchSampler};
pub use optimizer::Adam;

use crate::corpus::{KnowledgeEntry, SessionPair, TestCase};
use crate::error::{Error, Result};
use crate::model::{init_params, save_checkpoint, ModelConfig, Params};
use crate::objectives::{evaluate_batch, LossBreakdown, MaskingConfig, ObjectiveConfig, TrainingBatch};
use crate::retrieval::evaluate;
use crate::tokenizer::{encode, EncodedSentence, Vocab};

pub type OptimizerState = Adam<f32>;

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const METRICS_FILE: &str = "metrics.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    #[serde(flatten)]
    pub objective: ObjectiveConfig,
    pub batch_size: usize,
    pub max_steps: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    /// Checkpoint and evaluate every this many steps; 0 means only at the end.
    pub eval_every: usize,
    pub masking: MaskingConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            objective: ObjectiveConfig::default(),
            batch_size: 128,
            max_steps: 1000,
            learning_rate: 1e-4,
            warmup_steps: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            eval_every: 0,
            masking: MaskingConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.objective.validate()?;
        self.masking.validate()?;
        let min_batch = if self.objective.mode.uses_cl() { 2 } else { 1 };
        if self.batch_size < min_batch {
            return Err(Error::Config(format!(
                "batch_size must be at least {min_batch} for mode {:?}",
                self.objective.mode
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return Err(Error::Config("adam betas must lie in [0, 1)".into()));
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return Err(Error::Config("adam epsilon must be positive".into()));
        }
        Ok(())
    }

    /// Linear warmup to the base rate, then constant.
    pub fn learning_rate_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            self.learning_rate * (step + 1) as f64 / self.warmup_steps as f64
        } else {
            self.learning_rate
        }
    }

    pub fn optimizer(&self, params: &Params<f32>) -> OptimizerState {
        Adam::new(params, self.beta1, self.beta2, self.epsilon)
    }
}

/// Held-out data scored during training.
#[derive(Debug, Clone, Default)]
pub struct EvalBundle {
    pub knowledge: Vec<KnowledgeEntry>,
    pub tests: Vec<TestCase>,
}

/// One line of `metrics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub cl: f64,
    pub automlm: f64,
    pub joint: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub top1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub top5: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub losses: Vec<LossBreakdown>,
    pub wall_clock_secs: f64,
    pub checkpoint_path: Option<PathBuf>,
    pub evals: Vec<MetricsRecord>,
    pub params: Params<f32>,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Generator for the masking of step `step`.
pub fn masking_rng(seed: u64, step: usize) -> ChaCha8Rng {
    stream_rng(seed, 2 * step as u64 + 1)
}

/// Generator for the dropout of step `step`.
pub fn dropout_rng(seed: u64, step: usize) -> ChaCha8Rng {
    stream_rng(seed, 2 * step as u64 + 2)
}

/// Generator for the batch sampler.
pub fn sampler_rng(seed: u64) -> ChaCha8Rng {
    stream_rng(seed, 0)
}

/// All pairs encoded once up front.
#[derive(Debug, Clone)]
pub struct EncodedPairs {
    pub agents: Vec<EncodedSentence>,
    pub users: Vec<EncodedSentence>,
}

impl EncodedPairs {
    pub fn new(pairs: &[SessionPair], vocab: &Vocab, max_len: usize) -> Self {
        EncodedPairs {
            agents: pairs.iter().map(|p| encode(vocab, &p.agent_query, max_len)).collect(),
            users: pairs.iter().map(|p| encode(vocab, &p.user_query, max_len)).collect(),
        }
    }

    /// Gathers the selected pairs and draws fresh masks.
    pub fn batch(
        &self,
        indices: &[usize],
        cfg: &TrainConfig,
        vocab_size: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<TrainingBatch> {
        TrainingBatch::new(
            indices.iter().map(|&i| self.agents[i].clone()).collect(),
            indices.iter().map(|&i| self.users[i].clone()).collect(),
            cfg.objective.automlm_side,
            &cfg.masking,
            vocab_size,
            rng,
        )
    }
}

/// One optimizer update on `batch`; aborts on a non-finite loss without
/// touching the parameters.
pub fn train_step(
    params: &mut Params<f32>,
    opt: &mut OptimizerState,
    batch: &TrainingBatch,
    cfg: &TrainConfig,
    step: usize,
    dropout: Option<&mut ChaCha8Rng>,
) -> Result<LossBreakdown> {
    let (breakdown, _, grads) = evaluate_batch(params, batch, &cfg.objective, dropout, true)?;
    let grads = grads.expect("gradients requested");
    if !breakdown.is_finite() || !grads.is_finite() {
        return Err(Error::NonFiniteLoss {
            step,
            cl: breakdown.cl,
            automlm: breakdown.automlm,
            mlm: breakdown.mlm.unwrap_or(0.0),
            joint: breakdown.joint,
        });
    }
    opt.update(params, &grads, cfg.learning_rate_at(step) as f32);
    Ok(breakdown)
}

fn eval_metrics(params: &Params<f32>, vocab: &Vocab, bundle: &EvalBundle) -> Result<(f64, f64)> {
    let report = evaluate(params, vocab, &bundle.knowledge, &bundle.tests, &[1, 5], &[])?;
    Ok((report.k_accuracy[&1], report.k_accuracy[&5]))
}

/// Runs `cfg.max_steps` steps from freshly initialized parameters. With an
/// output directory, writes the checkpoint and metrics stream there.
pub fn train(
    pairs: &[SessionPair],
    cfg: &TrainConfig,
    vocab: &Vocab,
    model_config: &ModelConfig,
    eval: Option<&EvalBundle>,
    out_dir: Option<&Path>,
) -> Result<TrainReport> {
    cfg.validate()?;
    model_config.validate()?;
    if vocab.len() != model_config.vocab_size {
        return Err(Error::Config(format!(
            "vocabulary has {} tokens but model vocab_size is {}",
            vocab.len(),
            model_config.vocab_size
        )));
    }
    let mut sampler = if cfg.max_steps > 0 {
        Some(make_batches(pairs, cfg.batch_size, sampler_rng(cfg.seed))?)
    } else {
        None
    };
    let checkpoint_path = out_dir.map(|d| d.join(CHECKPOINT_FILE));
    let mut metrics = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(METRICS_FILE);
            Some((std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?, path))
        }
        None => None,
    };

    let start = Instant::now();
    let mut params = init_params::<f32>(model_config)?;
    let mut opt = cfg.optimizer(&params);
    let encoded = EncodedPairs::new(pairs, vocab, model_config.max_len);
    let mut losses = Vec::with_capacity(cfg.max_steps);
    let mut evals = Vec::new();

    for step in 0..cfg.max_steps {
        let indices = sampler.as_mut().and_then(Iterator::next).expect("sampler is endless");
        let batch = encoded.batch(&indices, cfg, model_config.vocab_size, &mut masking_rng(cfg.seed, step))?;
        let mut drop_rng = dropout_rng(cfg.seed, step);
        let dropout = (model_config.dropout_rate > 0.0).then_some(&mut drop_rng);
        let breakdown = train_step(&mut params, &mut opt, &batch, cfg, step, dropout)?;

        let done = step + 1;
        if done == cfg.max_steps || (cfg.eval_every > 0 && done % cfg.eval_every == 0) {
            let (top1, top5) = match eval {
                Some(bundle) => {
                    let (a, b) = eval_metrics(&params, vocab, bundle)?;
                    (Some(a), Some(b))
                }
                None => (None, None),
            };
            let record = MetricsRecord {
                step: done,
                cl: breakdown.cl,
                automlm: breakdown.mlm.unwrap_or(breakdown.automlm),
                joint: breakdown.joint,
                top1,
                top5,
            };
            if let Some((file, path)) = metrics.as_mut() {
                let line = serde_json::to_string(&record).map_err(|e| Error::Invalid(e.to_string()))?;
                writeln!(file, "{line}").map_err(|e| Error::io(path.as_path(), e))?;
            }
            if let Some(path) = &checkpoint_path {
                save_checkpoint(&params, model_config, vocab, path)?;
            }
            evals.push(record);
        }
        losses.push(breakdown);
    }
    if cfg.max_steps == 0 {
        if let Some(path) = &checkpoint_path {
            save_checkpoint(&params, model_config, vocab, path)?;
        }
    }
    if let Some((file, path)) = metrics.as_mut() {
        file.flush().map_err(|e| Error::io(path.as_path(), e))?;
    }

    Ok(TrainReport {
        losses,
        wall_clock_secs: start.elapsed().as_secs_f64(),
        checkpoint_path,
        evals,
        params,
    })
}
