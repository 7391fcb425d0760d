use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use automlm_core::corpus::{
    generate_synthetic_corpus, load_knowledge, load_pairs, load_sessions, load_testset, pairs_from_sessions, Pairing,
    SessionPair, DEFAULT_MAX_PAIRS,
};
use automlm_core::model::load_checkpoint;
use automlm_core::retrieval::{build_index, evaluate_index, retrieve_top_k, SentenceEncoder};
use automlm_core::tokenizer::{build_vocab, load_vocab, save_vocab, Vocab, DEFAULT_MAX_VOCAB, DEFAULT_MIN_FREQ};
use automlm_core::trainer::{train, EvalBundle, MetricsRecord};
use clap::{Parser, Subcommand};
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::config::{RunConfig, SEED_ENV};
use crate::failure::Failure;
use crate::output::{write_atomic, Staging};

pub const CONFIG_FILE: &str = "config.json";
pub const VOCAB_FILE: &str = "vocab.json";
pub const TRAIN_REPORT_FILE: &str = "train_report.json";

const TRAIN_HELP: &str = "\
Configuration keys (flat JSON object in --config, or --set key=value):
  seed                       0      also read from AMLM_SEED
  model.n_layers             4      reference setting
  model.hidden_dim           128
  model.n_heads              4
  model.ffn_dim              512
  model.max_len              64     reference setting
  model.dropout_rate         0.0
  train.mode                 cl_automlm   cl | mlm | automlm | cl_mlm | cl_automlm
  train.lambda               1.0    reference setting; weight of the token loss
  train.margin               0.1    reference setting; contrastive hinge margin
  train.index_mode           full   full | paper_literal
  train.hinge_mode           conventional   conventional | paper_literal
  train.cl_symmetric         false
  train.automlm_side         both   user | agent | both
  train.batch_size           128    reference setting
  train.max_steps            1000
  train.learning_rate        0.0001
  train.warmup_steps         0
  train.beta1 / beta2        0.9 / 0.999
  train.epsilon              1e-8
  train.eval_every           0      0 = only at the end
  train.masking.mask_prob    0.15
  train.masking.sub_mask     0.8
  train.masking.sub_random   0.1
  train.masking.force_min_one  true
  vocab.max_size             8000
  vocab.min_freq             1
  data.sessions | data.pairs        training data (one required)
  data.vocab                         prebuilt vocabulary (optional)
  data.knowledge + data.testset      evaluated during training (optional)
  data.max_pairs             8
  data.pairing               nearest   nearest | all_cross
  output_dir                         required
Precedence: --set > AMLM_SEED > --config > built-in default.";

#[derive(Debug, Parser)]
#[command(name = "automlm", version, about = "Contrastive + Auto-MLM training and dense FAQ retrieval")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Extract (agent query, user query) pairs from dialog sessions.
    ExtractPairs {
        #[arg(long)]
        sessions: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_MAX_PAIRS)]
        max_pairs: usize,
        #[arg(long, default_value = "nearest", value_parser = parse_pairing)]
        pairing: Pairing,
    },
    /// Build a word vocabulary from extracted pairs.
    BuildVocab {
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_MAX_VOCAB)]
        max_size: usize,
        #[arg(long, default_value_t = DEFAULT_MIN_FREQ)]
        min_freq: usize,
    },
    /// Train an encoder; writes checkpoint.bin, metrics.jsonl and reports to output_dir.
    #[command(after_help = TRAIN_HELP)]
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override one config key, e.g. --set train.lambda=0.5 (repeatable).
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Embed every knowledge-base question into an index file.
    Embed {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        knowledge: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the k most similar knowledge entries as `rank<TAB>id<TAB>score`.
    Retrieve {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        knowledge: PathBuf,
        #[arg(long)]
        query: String,
        #[arg(long, default_value_t = 10)]
        k: usize,
    },
    /// Top-K accuracy and P@K of a checkpoint on a test set.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        knowledge: PathBuf,
        #[arg(long)]
        testset: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "10,20,30")]
        ks: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "1,5")]
        p_ks: Vec<usize>,
        /// Write report.json here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also dump per-query rankings as JSON lines.
        #[arg(long)]
        results: Option<PathBuf>,
    },
    /// Generate a synthetic intent corpus (sessions, knowledge base, test set).
    Synth {
        #[arg(long, default_value_t = 20)]
        n_intents: usize,
        #[arg(long, default_value_t = 10)]
        paraphrases: usize,
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
        /// Defaults to AMLM_SEED, then 0.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn parse_pairing(s: &str) -> std::result::Result<Pairing, String> {
    serde_json::from_value(json!(s)).map_err(|_| format!("unknown pairing `{s}` (nearest | all_cross)"))
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if !path.is_file() {
        return Err(Failure::io(format!("{what} file {} does not exist", path.display())).into());
    }
    Ok(())
}

fn require(cond: bool, message: impl FnOnce() -> String) -> Result<()> {
    if !cond {
        return Err(Failure::usage(message()).into());
    }
    Ok(())
}

fn to_json<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    Ok(bytes)
}

fn jsonl<T: Serialize>(items: &[T]) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    for item in items {
        serde_json::to_writer(&mut bytes, item)?;
        bytes.push(b'\n');
    }
    Ok(bytes)
}

fn checkpoint_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Failure::io(format!("{}: {e}", path.display())))?;
    Ok(format!("sha256:{:x}", Sha256::digest(&bytes)))
}

pub fn run(cli: Cli, env_seed: Option<&str>, stdout: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::ExtractPairs {
            sessions,
            out,
            max_pairs,
            pairing,
        } => cmd_extract_pairs(&sessions, &out, max_pairs, pairing, stdout),
        Command::BuildVocab {
            pairs,
            out,
            max_size,
            min_freq,
        } => cmd_build_vocab(&pairs, &out, max_size, min_freq, stdout),
        Command::Train { config, overrides } => {
            let cfg = RunConfig::resolve(config.as_deref(), env_seed, &overrides)?;
            cmd_train(&cfg, stdout)
        }
        Command::Embed {
            checkpoint,
            knowledge,
            out,
        } => cmd_embed(&checkpoint, &knowledge, &out, stdout),
        Command::Retrieve {
            checkpoint,
            knowledge,
            query,
            k,
        } => cmd_retrieve(&checkpoint, &knowledge, &query, k, stdout),
        Command::Eval {
            checkpoint,
            knowledge,
            testset,
            ks,
            p_ks,
            out,
            results,
        } => cmd_eval(
            &checkpoint,
            &knowledge,
            &testset,
            &ks,
            &p_ks,
            out.as_deref(),
            results.as_deref(),
            stdout,
        ),
        Command::Synth {
            n_intents,
            paraphrases,
            noise,
            seed,
            out_dir,
        } => {
            let seed = match (seed, env_seed) {
                (Some(s), _) => s,
                (None, Some(env)) => env
                    .trim()
                    .parse()
                    .map_err(|_| Failure::config(format!("{SEED_ENV}={env:?} is not an unsigned integer")))?,
                (None, None) => 0,
            };
            cmd_synth(n_intents, paraphrases, noise, seed, &out_dir, stdout)
        }
    }
}

pub fn cmd_extract_pairs(
    sessions: &Path,
    out: &Path,
    max_pairs: usize,
    pairing: Pairing,
    stdout: &mut dyn Write,
) -> Result<()> {
    require_file(sessions, "sessions")?;
    require(max_pairs >= 1, || "--max-pairs must be at least 1".into())?;
    let sessions = load_sessions(sessions)?;
    let pairs = pairs_from_sessions(&sessions, max_pairs, pairing);
    write_atomic(out, &jsonl(&pairs)?)?;
    writeln!(stdout, "{}", json!({ "sessions": sessions.len(), "pairs": pairs.len(), "out": out }))?;
    Ok(())
}

fn pair_texts(pairs: &[SessionPair]) -> impl Iterator<Item = &str> {
    pairs.iter().flat_map(|p| [p.agent_query.as_str(), p.user_query.as_str()])
}

pub fn cmd_build_vocab(
    pairs: &Path,
    out: &Path,
    max_size: usize,
    min_freq: usize,
    stdout: &mut dyn Write,
) -> Result<()> {
    require_file(pairs, "pairs")?;
    require(max_size >= 5, || "--max-size must be at least 5".into())?;
    require(min_freq >= 1, || "--min-freq must be at least 1".into())?;
    let pairs = load_pairs(pairs)?;
    let vocab = build_vocab(pair_texts(&pairs), max_size, min_freq)?;
    let staging = Staging::for_file(out)?;
    save_vocab(&vocab, &staging.path().join(VOCAB_FILE))?;
    staging.commit_file(VOCAB_FILE, out)?;
    writeln!(stdout, "{}", json!({ "tokens": vocab.len(), "out": out }))?;
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    steps: usize,
    losses: &'a [automlm_core::objectives::LossBreakdown],
    evals: &'a [MetricsRecord],
    wall_clock_secs: f64,
}

pub fn cmd_train(cfg: &RunConfig, stdout: &mut dyn Write) -> Result<()> {
    let out_dir = cfg
        .output_dir
        .as_deref()
        .ok_or_else(|| Failure::config("output_dir is required"))?;
    let data = &cfg.data;
    match (&data.pairs, &data.sessions) {
        (Some(p), _) => require_file(p, "pairs")?,
        (None, Some(s)) => require_file(s, "sessions")?,
        (None, None) => return Err(Failure::config("one of data.pairs or data.sessions is required").into()),
    }
    if let Some(v) = &data.vocab {
        require_file(v, "vocab")?;
    }
    let eval_paths = match (&data.knowledge, &data.testset) {
        (Some(k), Some(t)) => {
            require_file(k, "knowledge")?;
            require_file(t, "testset")?;
            Some((k, t))
        }
        (None, None) => None,
        _ => return Err(Failure::config("data.knowledge and data.testset must be given together").into()),
    };

    let pairs = match (&data.pairs, &data.sessions) {
        (Some(p), _) => load_pairs(p)?,
        (None, Some(s)) => pairs_from_sessions(&load_sessions(s)?, data.max_pairs, data.pairing),
        (None, None) => unreachable!("checked above"),
    };
    let vocab = match &data.vocab {
        Some(v) => load_vocab(v)?,
        None => build_vocab(pair_texts(&pairs), cfg.vocab.max_size, cfg.vocab.min_freq)?,
    };
    let mut model = cfg.model.clone();
    model.vocab_size = vocab.len();
    model.validate()?;
    let eval = match eval_paths {
        Some((k, t)) => {
            let knowledge = load_knowledge(k)?;
            let tests = load_testset(t, &knowledge)?;
            Some(EvalBundle { knowledge, tests })
        }
        None => None,
    };

    let staging = Staging::for_dir(out_dir)?;
    let report = train(&pairs, &cfg.train, &vocab, &model, eval.as_ref(), Some(staging.path()))
        .context("training")?;
    save_vocab(&vocab, &staging.path().join(VOCAB_FILE))?;
    std::fs::write(staging.path().join(CONFIG_FILE), to_json(&cfg.to_flat())?)?;
    let summary = TrainSummary {
        steps: report.losses.len(),
        losses: &report.losses,
        evals: &report.evals,
        wall_clock_secs: report.wall_clock_secs,
    };
    std::fs::write(staging.path().join(TRAIN_REPORT_FILE), to_json(&summary)?)?;
    staging.commit_dir(out_dir)?;

    let last = report.losses.last();
    writeln!(
        stdout,
        "{}",
        json!({
            "checkpoint": out_dir.join(automlm_core::trainer::CHECKPOINT_FILE),
            "steps": report.losses.len(),
            "joint": last.map(|l| l.joint),
            "top1": report.evals.last().and_then(|e| e.top1),
        })
    )?;
    Ok(())
}

fn load_model(checkpoint: &Path) -> Result<(automlm_core::model::Params<f32>, Vocab)> {
    let (params, _, vocab) =
        load_checkpoint(checkpoint).with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    Ok((params, vocab))
}

pub fn cmd_embed(checkpoint: &Path, knowledge: &Path, out: &Path, stdout: &mut dyn Write) -> Result<()> {
    require_file(checkpoint, "checkpoint")?;
    require_file(knowledge, "knowledge")?;
    let (params, vocab) = load_model(checkpoint)?;
    let kb = load_knowledge(knowledge)?;
    let index = build_index(&params, &vocab, &kb, checkpoint_digest(checkpoint)?)?;
    write_atomic(out, &to_json(&index)?)?;
    writeln!(stdout, "{}", json!({ "entries": index.len(), "dim": index.dim(), "out": out }))?;
    Ok(())
}

pub fn cmd_retrieve(checkpoint: &Path, knowledge: &Path, query: &str, k: usize, stdout: &mut dyn Write) -> Result<()> {
    require_file(checkpoint, "checkpoint")?;
    require_file(knowledge, "knowledge")?;
    require(k >= 1, || "--k must be at least 1".into())?;
    let (params, vocab) = load_model(checkpoint)?;
    let kb = load_knowledge(knowledge)?;
    let index = build_index(&params, &vocab, &kb, checkpoint_digest(checkpoint)?)?;
    let result = retrieve_top_k(&index, query, k, &params, &vocab)?;
    for (rank, (id, score)) in result.ranked.iter().enumerate() {
        writeln!(stdout, "{}\t{}\t{:.6}", rank + 1, id, score)?;
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_eval(
    checkpoint: &Path,
    knowledge: &Path,
    testset: &Path,
    ks: &[usize],
    p_ks: &[usize],
    out: Option<&Path>,
    results: Option<&Path>,
    stdout: &mut dyn Write,
) -> Result<()> {
    require_file(checkpoint, "checkpoint")?;
    require_file(knowledge, "knowledge")?;
    require_file(testset, "testset")?;
    require(!ks.is_empty(), || "--ks must list at least one k".into())?;
    require(ks.iter().chain(p_ks).all(|&k| k >= 1), || "every k must be at least 1".into())?;
    let (params, vocab) = load_model(checkpoint)?;
    let kb = load_knowledge(knowledge)?;
    let tests = load_testset(testset, &kb)?;
    let index = build_index(&params, &vocab, &kb, checkpoint_digest(checkpoint)?)?;
    let encoder = SentenceEncoder::new(&params, &vocab)?;
    let report = evaluate_index(&encoder, &index, &tests, ks, p_ks)?;

    let rendered = to_json(&report)?;
    if let Some(path) = results {
        let rows: Vec<_> = report
            .results
            .iter()
            .zip(&tests)
            .map(|(r, c)| json!({ "query": r.query, "gold_ids": c.gold_ids, "ranked": r.ranked }))
            .collect();
        write_atomic(path, &jsonl(&rows)?)?;
    }
    match out {
        Some(path) => {
            write_atomic(path, &rendered)?;
            writeln!(stdout, "{}", serde_json::to_string(&report)?)?;
        }
        None => stdout.write_all(&rendered)?,
    }
    Ok(())
}

pub fn cmd_synth(
    n_intents: usize,
    paraphrases: usize,
    noise: f64,
    seed: u64,
    out_dir: &Path,
    stdout: &mut dyn Write,
) -> Result<()> {
    require(n_intents >= 2, || "--n-intents must be at least 2".into())?;
    require(paraphrases >= 3, || "--paraphrases must be at least 3".into())?;
    require((0.0..=1.0).contains(&noise), || "--noise must lie in [0, 1]".into())?;
    let corpus = generate_synthetic_corpus(n_intents, paraphrases, noise, seed)?;
    let staging = Staging::for_dir(out_dir)?;
    corpus.write_to(staging.path())?;
    staging.commit_dir(out_dir)?;
    writeln!(
        stdout,
        "{}",
        json!({
            "sessions": corpus.sessions.len(),
            "knowledge": corpus.knowledge.len(),
            "tests": corpus.tests.len(),
            "out_dir": out_dir,
        })
    )?;
    Ok(())
}
