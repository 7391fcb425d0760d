//! Exact cosine top-K retrieval over an embedded knowledge base and the
//! Top-K accuracy / P@K metrics.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::corpus::{KnowledgeEntry, TestCase};
use crate::error::{Error, Result};
use crate::model::{forward, normalize_vector, Params};
use crate::tokenizer::{encode, EncodedSentence, Vocab};

const ENCODE_CHUNK: usize = 64;

/// Turns text into unit-norm `[CLS]` vectors with a fixed model.
#[derive(Debug, Clone, Copy)]
pub struct SentenceEncoder<'a> {
    pub params: &'a Params<f32>,
    pub vocab: &'a Vocab,
}

impl<'a> SentenceEncoder<'a> {
    pub fn new(params: &'a Params<f32>, vocab: &'a Vocab) -> Result<Self> {
        if vocab.len() != params.config.vocab_size {
            return Err(Error::Config(format!(
                "vocabulary has {} tokens but the model expects {}",
                vocab.len(),
                params.config.vocab_size
            )));
        }
        Ok(SentenceEncoder { params, vocab })
    }

    /// One unit-norm row per text, in input order.
    pub fn embed(&self, texts: &[&str]) -> Result<Array2<f32>> {
        let d = self.params.config.hidden_dim;
        let mut out = Array2::zeros((texts.len(), d));
        for (chunk_index, chunk) in texts.chunks(ENCODE_CHUNK).enumerate() {
            let batch: Vec<EncodedSentence> = chunk
                .iter()
                .map(|t| encode(self.vocab, t, self.params.config.max_len))
                .collect();
            let cache = forward(self.params, &batch, None)?;
            for s in 0..batch.len() {
                let unit = normalize_vector(cache.output.row(cache.cls_row(s)))?;
                out.row_mut(chunk_index * ENCODE_CHUNK + s).assign(&unit);
            }
        }
        Ok(out)
    }

    pub fn embed_one(&self, text: &str) -> Result<Array1<f32>> {
        Ok(self.embed(&[text])?.index_axis_move(Axis(0), 0))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingIndex {
    pub ids: Vec<String>,
    pub vectors: Array2<f32>,
    /// Identifies the checkpoint the vectors came from.
    pub provenance: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub query: String,
    pub ranked: Vec<(String, f32)>,
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub k_accuracy: BTreeMap<usize, f64>,
    pub p_at_k: BTreeMap<usize, f64>,
    pub n_queries: usize,
    #[serde(skip)]
    pub results: Vec<RetrievalResult>,
}

impl EmbeddingIndex {
    pub fn new(ids: Vec<String>, vectors: Array2<f32>, provenance: impl Into<String>) -> Result<Self> {
        if ids.len() != vectors.nrows() {
            return Err(Error::Shape(format!("{} ids for {} index rows", ids.len(), vectors.nrows())));
        }
        for (id, row) in ids.iter().zip(vectors.rows()) {
            let norm = row.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-6 {
                return Err(Error::Invalid(format!("index row for {id} has norm {norm}")));
            }
        }
        Ok(EmbeddingIndex {
            ids,
            vectors,
            provenance: provenance.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    /// Row indices and scores of the `k` best rows: score descending, then
    /// index ascending.
    pub fn search(&self, query: ArrayView1<f32>, k: usize) -> Vec<(usize, f32)> {
        let scores = self.vectors.dot(&query);
        let order = |&a: &usize, &b: &usize| scores[b].total_cmp(&scores[a]).then(a.cmp(&b));
        let mut indices: Vec<usize> = (0..scores.len()).collect();
        let k = k.min(indices.len());
        if k == 0 {
            return Vec::new();
        }
        if k < indices.len() {
            indices.select_nth_unstable_by(k - 1, order);
            indices.truncate(k);
        }
        indices.sort_unstable_by(order);
        indices.into_iter().map(|i| (i, scores[i])).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self).map_err(|e| Error::Invalid(e.to_string()))?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let raw: EmbeddingIndex = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })?;
        EmbeddingIndex::new(raw.ids, raw.vectors, raw.provenance)
    }
}

pub fn build_index(
    params: &Params<f32>,
    vocab: &Vocab,
    kb: &[KnowledgeEntry],
    provenance: impl Into<String>,
) -> Result<EmbeddingIndex> {
    if kb.is_empty() {
        return Err(Error::Invalid("knowledge base is empty".into()));
    }
    if let Some(e) = kb.iter().find(|e| e.question.trim().is_empty()) {
        return Err(Error::Invalid(format!("knowledge entry {} has an empty question", e.knowledge_id)));
    }
    let encoder = SentenceEncoder::new(params, vocab)?;
    let texts: Vec<&str> = kb.iter().map(|e| e.question.as_str()).collect();
    let vectors = encoder.embed(&texts)?;
    EmbeddingIndex::new(kb.iter().map(|e| e.knowledge_id.clone()).collect(), vectors, provenance)
}

pub fn retrieve_with_vector(index: &EmbeddingIndex, query: &str, vector: ArrayView1<f32>, k: usize) -> RetrievalResult {
    let ranked = index
        .search(vector, k)
        .into_iter()
        .map(|(i, s)| (index.ids[i].clone(), s))
        .collect();
    RetrievalResult {
        query: query.to_string(),
        ranked,
        k,
    }
}

pub fn retrieve_top_k(
    index: &EmbeddingIndex,
    query: &str,
    k: usize,
    params: &Params<f32>,
    vocab: &Vocab,
) -> Result<RetrievalResult> {
    if k == 0 {
        return Err(Error::Invalid("k must be at least 1".into()));
    }
    let vector = SentenceEncoder::new(params, vocab)?.embed_one(query)?;
    Ok(retrieve_with_vector(index, query, vector.view(), k))
}

fn check_aligned(results: &[RetrievalResult], cases: &[TestCase], k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::Invalid("k must be at least 1".into()));
    }
    if cases.is_empty() {
        return Err(Error::Invalid("no test cases".into()));
    }
    if results.len() != cases.len() {
        return Err(Error::Invalid(format!("{} results for {} test cases", results.len(), cases.len())));
    }
    if let Some((r, c)) = results.iter().zip(cases).find(|(r, c)| r.query != c.query) {
        return Err(Error::Invalid(format!("result for {:?} aligned with case {:?}", r.query, c.query)));
    }
    // A ranking shorter than its own k already covers the whole index.
    if let Some(r) = results.iter().find(|r| r.k < k && r.ranked.len() >= r.k) {
        return Err(Error::Invalid(format!("result for {:?} was retrieved with k={} < {k}", r.query, r.k)));
    }
    Ok(())
}

fn gold_hits(result: &RetrievalResult, case: &TestCase, k: usize) -> usize {
    result.ranked.iter().take(k).filter(|(id, _)| case.gold_ids.contains(id)).count()
}

/// Fraction of cases with at least one gold id among the first `k` results.
pub fn top_k_accuracy(results: &[RetrievalResult], cases: &[TestCase], k: usize) -> Result<f64> {
    check_aligned(results, cases, k)?;
    let hits = results.iter().zip(cases).filter(|(r, c)| gold_hits(r, c, k) > 0).count();
    Ok(hits as f64 / cases.len() as f64)
}

/// Mean over cases of the fraction of the first `k` positions holding a gold id.
pub fn precision_at_k(results: &[RetrievalResult], cases: &[TestCase], k: usize) -> Result<f64> {
    check_aligned(results, cases, k)?;
    let total: f64 = results
        .iter()
        .zip(cases)
        .map(|(r, c)| gold_hits(r, c, k) as f64 / k as f64)
        .sum();
    Ok(total / cases.len() as f64)
}

/// Retrieves once per case with the largest requested k and derives every
/// metric from that single ranking.
pub fn evaluate_index(
    encoder: &SentenceEncoder<'_>,
    index: &EmbeddingIndex,
    cases: &[TestCase],
    ks: &[usize],
    p_ks: &[usize],
) -> Result<EvalReport> {
    if ks.is_empty() {
        return Err(Error::Invalid("no k values requested".into()));
    }
    if cases.is_empty() {
        return Err(Error::Invalid("no test cases".into()));
    }
    let k_max = ks.iter().chain(p_ks).copied().max().unwrap_or(1);
    let queries: Vec<&str> = cases.iter().map(|c| c.query.as_str()).collect();
    let vectors = encoder.embed(&queries)?;
    let results: Vec<RetrievalResult> = queries
        .iter()
        .zip(vectors.rows())
        .map(|(q, v)| retrieve_with_vector(index, q, v, k_max))
        .collect();
    let mut k_accuracy = BTreeMap::new();
    for &k in ks {
        k_accuracy.insert(k, top_k_accuracy(&results, cases, k)?);
    }
    let mut p_at_k = BTreeMap::new();
    for &k in p_ks {
        p_at_k.insert(k, precision_at_k(&results, cases, k)?);
    }
    Ok(EvalReport {
        k_accuracy,
        p_at_k,
        n_queries: cases.len(),
        results,
    })
}

pub fn evaluate(
    params: &Params<f32>,
    vocab: &Vocab,
    kb: &[KnowledgeEntry],
    cases: &[TestCase],
    ks: &[usize],
    p_ks: &[usize],
) -> Result<EvalReport> {
    if ks.is_empty() {
        return Err(Error::Invalid("no k values requested".into()));
    }
    if cases.is_empty() {
        return Err(Error::Invalid("no test cases".into()));
    }
    let index = build_index(params, vocab, kb, "in-memory")?;
    let encoder = SentenceEncoder::new(params, vocab)?;
    evaluate_index(&encoder, &index, cases, ks, p_ks)
}
