use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView2, Axis};

use super::masking::MaskedSentence;
use crate::error::{Error, Result};
use crate::model::{forward, project_to_vocab, ForwardCache, Params, SentenceVector};
use crate::real::Real;
use crate::tokenizer::EncodedSentence;

pub(crate) struct MaskedLmGrads<F> {
    /// Gradient with respect to the corrupted pass output.
    pub d_output: Array2<F>,
    /// Gradient with respect to each sentence's injected vector.
    pub d_injection: Array2<F>,
}

/// Mean negative log-likelihood of the original tokens at every masked
/// position in the batch. `injections`, when present, holds one row per
/// sentence that is added to that sentence's masked hidden rows before the
/// tied output projection.
///
/// With `grad_scale = Some((w, grads))` the gradient of `w * loss` is
/// accumulated into the projection tensors of `grads` and returned for the
/// encoder output and the injected rows.
pub(crate) fn masked_lm<F: Real>(
    params: &Params<F>,
    cache: &ForwardCache<F>,
    masked: &[MaskedSentence],
    injections: Option<ArrayView2<F>>,
    grad_scale: Option<(F, &mut Params<F>)>,
) -> Result<(F, Option<MaskedLmGrads<F>>)> {
    let d = params.config.hidden_dim;
    let mut rows = Vec::new();
    let mut owners = Vec::new();
    let mut targets = Vec::new();
    for (s, m) in masked.iter().enumerate() {
        for (&p, &t) in m.mask_positions.iter().zip(&m.target_ids) {
            rows.push(cache.spans()[s].0 + p);
            owners.push(s);
            targets.push(t as usize);
        }
    }
    if rows.is_empty() {
        return Err(Error::Invalid("batch has no masked positions".into()));
    }
    let mut z = cache.output.select(Axis(0), &rows);
    if let Some(inj) = injections {
        if inj.dim() != (masked.len(), d) {
            return Err(Error::Shape("one injected vector per sentence required".into()));
        }
        for (mut row, &s) in z.rows_mut().into_iter().zip(&owners) {
            row += &inj.row(s);
        }
    }
    let mut logits = project_to_vocab(params, z.view());

    let count = F::lit(rows.len() as f64);
    let mut total = F::zero();
    for (mut row, &t) in logits.rows_mut().into_iter().zip(&targets) {
        let max = row.fold(F::neg_infinity(), |a, &b| a.max(b));
        let target_logit = row[t];
        row.mapv_inplace(|x| (x - max).exp());
        let sum = row.sum();
        total += max + sum.ln() - target_logit;
        // Leave softmax probabilities behind for the backward pass.
        row /= sum;
    }
    let loss = total / count;

    let Some((weight, grads)) = grad_scale else {
        return Ok((loss, None));
    };
    let mut dlogits = logits;
    for (mut row, &t) in dlogits.rows_mut().into_iter().zip(&targets) {
        row[t] -= F::one();
    }
    dlogits *= weight / count;
    grads.output_bias += &dlogits.sum_axis(Axis(0));
    general_mat_mul(F::one(), &dlogits.t(), &z, F::one(), &mut grads.token_embedding);
    let dz = dlogits.dot(&params.token_embedding);

    let mut d_output = Array2::zeros(cache.output.raw_dim());
    let mut d_injection = Array2::zeros((masked.len(), d));
    for ((dz_row, &r), &s) in dz.rows().into_iter().zip(&rows).zip(&owners) {
        let mut out = d_output.row_mut(r);
        out += &dz_row;
        let mut inj = d_injection.row_mut(s);
        inj += &dz_row;
    }
    Ok((
        loss,
        Some(MaskedLmGrads {
            d_output,
            d_injection,
        }),
    ))
}

/// Standard masked language model loss: no sentence vector is injected.
pub fn mlm_loss<F: Real>(params: &Params<F>, masked: &[MaskedSentence]) -> Result<F> {
    if masked.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    let corrupted: Vec<EncodedSentence> = masked.iter().map(|m| m.corrupted.clone()).collect();
    let cache = forward(params, &corrupted, None)?;
    Ok(masked_lm(params, &cache, masked, None, None)?.0)
}

/// Masked token loss where the raw `[CLS]` vector of each original sentence
/// is added to the hidden state at every masked position of its corrupted
/// copy. `inject = false` is exactly [`mlm_loss`].
pub fn auto_mlm_loss<F: Real>(
    params: &Params<F>,
    originals: &[EncodedSentence],
    masked: &[MaskedSentence],
    inject: bool,
) -> Result<F> {
    if originals.len() != masked.len() {
        return Err(Error::Shape(format!(
            "{} originals vs {} masked sentences",
            originals.len(),
            masked.len()
        )));
    }
    if !inject {
        return mlm_loss(params, masked);
    }
    let source = forward(params, originals, None)?;
    let vectors: Vec<SentenceVector<F>> = (0..originals.len())
        .map(|s| SentenceVector {
            values: source.cls(s).to_owned(),
            normalized: false,
        })
        .collect();
    auto_mlm_loss_with_vectors(params, masked, &vectors)
}

/// [`auto_mlm_loss`] with caller-supplied sentence vectors.
pub fn auto_mlm_loss_with_vectors<F: Real>(
    params: &Params<F>,
    masked: &[MaskedSentence],
    vectors: &[SentenceVector<F>],
) -> Result<F> {
    if masked.is_empty() || vectors.len() != masked.len() {
        return Err(Error::Shape("one sentence vector per masked sentence required".into()));
    }
    let d = params.config.hidden_dim;
    if vectors.iter().any(|v| v.values.len() != d) {
        return Err(Error::Shape("sentence vector dimension mismatch".into()));
    }
    let injections = Array2::from_shape_fn((vectors.len(), d), |(s, j)| vectors[s].values[j]);
    let corrupted: Vec<EncodedSentence> = masked.iter().map(|m| m.corrupted.clone()).collect();
    let cache = forward(params, &corrupted, None)?;
    Ok(masked_lm(params, &cache, masked, Some(injections.view()), None)?.0)
}
