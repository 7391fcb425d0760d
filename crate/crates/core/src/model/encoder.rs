//! Batched forward pass with cached activations, and its exact backward pass.
//!
//! Tokens of every sentence in a batch are stacked into one `(tokens, dim)`
//! matrix so the position-wise layers run as single matrix products.
//! Attention runs per sentence over its non-PAD positions only, which is the
//! same as giving PAD keys an additive `-inf` score.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{LayerParams, Params};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tokenizer::{EncodedSentence, TokenId};

const LN_EPS: f64 = 1e-5;

struct LnCache<F> {
    xhat: Array2<F>,
    rstd: Array1<F>,
}

struct LayerCache<F> {
    ln1: LnCache<F>,
    h1: Array2<F>,
    q: Array2<F>,
    k: Array2<F>,
    v: Array2<F>,
    /// `[sentence][head]` softmax matrices.
    probs: Vec<Vec<Array2<F>>>,
    ctx: Array2<F>,
    attn_keep: Option<Array2<F>>,
    ln2: LnCache<F>,
    h2: Array2<F>,
    pre_act: Array2<F>,
    act: Array2<F>,
    ffn_keep: Option<Array2<F>>,
}

/// Activations of one forward pass, kept for the backward pass.
pub struct ForwardCache<F> {
    spans: Vec<(usize, usize)>,
    ids: Vec<TokenId>,
    positions: Vec<usize>,
    layers: Vec<LayerCache<F>>,
    final_ln: LnCache<F>,
    /// Final-layer hidden states, one row per non-PAD token.
    pub output: Array2<F>,
}

impl<F: Real> ForwardCache<F> {
    /// `(first row, length)` of each sentence inside [`Self::output`].
    pub fn spans(&self) -> &[(usize, usize)] {
        &self.spans
    }

    pub fn num_sentences(&self) -> usize {
        self.spans.len()
    }

    /// Row index of the `[CLS]` token of sentence `s`.
    pub fn cls_row(&self, s: usize) -> usize {
        self.spans[s].0
    }

    pub fn cls(&self, s: usize) -> ArrayView1<'_, F> {
        self.output.row(self.spans[s].0)
    }

    /// Attention weights of `layer`, sentence `s`, `head` (`len x len`).
    pub fn attention(&self, layer: usize, s: usize, head: usize) -> ArrayView2<'_, F> {
        self.layers[layer].probs[s][head].view()
    }
}

fn layer_norm<F: Real>(x: &Array2<F>, scale: &Array1<F>, offset: &Array1<F>) -> (Array2<F>, LnCache<F>) {
    let n = F::lit(x.ncols() as f64);
    let eps = F::lit(LN_EPS);
    let mut xhat = x.clone();
    let mut rstd = Array1::zeros(x.nrows());
    for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
        let mean = row.sum() / n;
        row -= mean;
        let var = row.dot(&row) / n;
        *r = F::one() / (var + eps).sqrt();
        row *= *r;
    }
    let out = &xhat * &scale.view().insert_axis(Axis(0)) + offset.view().insert_axis(Axis(0));
    (out, LnCache { xhat, rstd })
}

fn layer_norm_backward<F: Real>(
    dout: &Array2<F>,
    cache: &LnCache<F>,
    scale: &Array1<F>,
    dscale: &mut Array1<F>,
    doffset: &mut Array1<F>,
) -> Array2<F> {
    *dscale += &(dout * &cache.xhat).sum_axis(Axis(0));
    *doffset += &dout.sum_axis(Axis(0));
    let n = F::lit(dout.ncols() as f64);
    let mut dx = dout * &scale.view().insert_axis(Axis(0));
    for ((mut row, xhat), &r) in dx.rows_mut().into_iter().zip(cache.xhat.rows()).zip(cache.rstd.iter()) {
        let m1 = row.sum() / n;
        let m2 = row.dot(&xhat) / n;
        Zip::from(&mut row).and(&xhat).for_each(|g, &xh| *g = r * (*g - m1 - xh * m2));
    }
    dx
}

fn affine<F: Real>(x: &Array2<F>, w: &Array2<F>, b: &Array1<F>) -> Array2<F> {
    let mut y = x.dot(w);
    y += &b.view().insert_axis(Axis(0));
    y
}

/// `dW += xᵀ dy`, `db += Σ dy`, returns `dy Wᵀ`.
fn affine_backward<F: Real>(
    x: &Array2<F>,
    w: &Array2<F>,
    dy: &Array2<F>,
    dw: &mut Array2<F>,
    db: &mut Array1<F>,
) -> Array2<F> {
    general_mat_mul(F::one(), &x.t(), dy, F::one(), dw);
    *db += &dy.sum_axis(Axis(0));
    dy.dot(&w.t())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

fn gelu<F: Real>(u: F) -> F {
    let half = F::lit(0.5);
    let inner = F::lit(GELU_C) * (u + F::lit(GELU_A) * u * u * u);
    half * u * (F::one() + inner.tanh())
}

fn gelu_grad<F: Real>(u: F) -> F {
    let half = F::lit(0.5);
    let c = F::lit(GELU_C);
    let a = F::lit(GELU_A);
    let t = (c * (u + a * u * u * u)).tanh();
    half * (F::one() + t) + half * u * (F::one() - t * t) * c * (F::one() + F::lit(3.0) * a * u * u)
}

fn softmax_rows<F: Real>(m: &mut Array2<F>) {
    for mut row in m.rows_mut() {
        let max = row.fold(F::neg_infinity(), |a, &b| a.max(b));
        row.mapv_inplace(|x| (x - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}

fn dropout_mask<F: Real>(rows: usize, cols: usize, rate: f64, rng: &mut ChaCha8Rng) -> Array2<F> {
    let keep = F::lit(1.0 / (1.0 - rate));
    Array2::from_shape_simple_fn((rows, cols), || if rng.gen_bool(rate) { F::zero() } else { keep })
}

fn attention<F: Real>(
    q: &Array2<F>,
    k: &Array2<F>,
    v: &Array2<F>,
    spans: &[(usize, usize)],
    n_heads: usize,
) -> (Array2<F>, Vec<Vec<Array2<F>>>) {
    let d = q.ncols();
    let dh = d / n_heads;
    let scale = F::lit(1.0 / (dh as f64).sqrt());
    let mut ctx = Array2::zeros(q.raw_dim());
    let mut probs = Vec::with_capacity(spans.len());
    for &(start, len) in spans {
        let rows = start..start + len;
        let mut per_head = Vec::with_capacity(n_heads);
        for h in 0..n_heads {
            let cols = h * dh..(h + 1) * dh;
            let qs = q.slice(s![rows.clone(), cols.clone()]);
            let ks = k.slice(s![rows.clone(), cols.clone()]);
            let vs = v.slice(s![rows.clone(), cols.clone()]);
            let mut p = qs.dot(&ks.t());
            p *= scale;
            softmax_rows(&mut p);
            general_mat_mul(F::one(), &p, &vs, F::zero(), &mut ctx.slice_mut(s![rows.clone(), cols]));
            per_head.push(p);
        }
        probs.push(per_head);
    }
    (ctx, probs)
}

fn attention_backward<F: Real>(
    cache: &LayerCache<F>,
    dctx: &Array2<F>,
    spans: &[(usize, usize)],
    n_heads: usize,
) -> (Array2<F>, Array2<F>, Array2<F>) {
    let d = dctx.ncols();
    let dh = d / n_heads;
    let scale = F::lit(1.0 / (dh as f64).sqrt());
    let mut dq = Array2::zeros(dctx.raw_dim());
    let mut dk = Array2::zeros(dctx.raw_dim());
    let mut dv = Array2::zeros(dctx.raw_dim());
    for (s_idx, &(start, len)) in spans.iter().enumerate() {
        let rows = start..start + len;
        for h in 0..n_heads {
            let cols = h * dh..(h + 1) * dh;
            let p = &cache.probs[s_idx][h];
            let qs = cache.q.slice(s![rows.clone(), cols.clone()]);
            let ks = cache.k.slice(s![rows.clone(), cols.clone()]);
            let vs = cache.v.slice(s![rows.clone(), cols.clone()]);
            let dc = dctx.slice(s![rows.clone(), cols.clone()]);

            let dp = dc.dot(&vs.t());
            general_mat_mul(F::one(), &p.t(), &dc, F::zero(), &mut dv.slice_mut(s![rows.clone(), cols.clone()]));
            let mut dscore = p * &dp;
            for (mut row, (prow, dprow)) in dscore.rows_mut().into_iter().zip(p.rows().into_iter().zip(dp.rows())) {
                let inner = prow.dot(&dprow);
                Zip::from(&mut row).and(&prow).for_each(|g, &pp| *g -= pp * inner);
            }
            dscore *= scale;
            general_mat_mul(F::one(), &dscore, &ks, F::zero(), &mut dq.slice_mut(s![rows.clone(), cols.clone()]));
            general_mat_mul(F::one(), &dscore.t(), &qs, F::zero(), &mut dk.slice_mut(s![rows.clone(), cols]));
        }
    }
    (dq, dk, dv)
}

/// Runs the encoder over the non-PAD tokens of every sentence.
///
/// Dropout is applied on the two residual branches of every layer only when
/// `dropout_rng` is supplied and the configured rate is positive.
pub fn forward<F: Real>(
    params: &Params<F>,
    batch: &[EncodedSentence],
    mut dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<ForwardCache<F>> {
    let cfg = &params.config;
    let d = cfg.hidden_dim;
    let mut spans = Vec::with_capacity(batch.len());
    let mut ids = Vec::new();
    let mut positions = Vec::new();
    for sentence in batch {
        if sentence.ids.len() != cfg.max_len {
            return Err(Error::Shape(format!(
                "sentence has length {}, model expects {}",
                sentence.ids.len(),
                cfg.max_len
            )));
        }
        if sentence.true_len == 0 || sentence.true_len > cfg.max_len {
            return Err(Error::Shape(format!("invalid true_len {}", sentence.true_len)));
        }
        spans.push((ids.len(), sentence.true_len));
        for (p, &id) in sentence.tokens().iter().enumerate() {
            if id as usize >= cfg.vocab_size {
                return Err(Error::TokenOutOfRange {
                    id,
                    vocab_size: cfg.vocab_size,
                });
            }
            ids.push(id);
            positions.push(p);
        }
    }

    let mut x = Array2::zeros((ids.len(), d));
    for (t, (&id, &p)) in ids.iter().zip(&positions).enumerate() {
        let mut row = x.row_mut(t);
        row.assign(&params.token_embedding.row(id as usize));
        row += &params.position_embedding.row(p);
    }

    let rate = cfg.dropout_rate;
    let mut layers = Vec::with_capacity(params.layers.len());
    for layer in &params.layers {
        let (h1, ln1) = layer_norm(&x, &layer.ln1_scale, &layer.ln1_offset);
        let q = affine(&h1, &layer.wq, &layer.bq);
        let k = affine(&h1, &layer.wk, &layer.bk);
        let v = affine(&h1, &layer.wv, &layer.bv);
        let (ctx, probs) = attention(&q, &k, &v, &spans, cfg.n_heads);
        let mut attn_out = affine(&ctx, &layer.wo, &layer.bo);
        let attn_keep = match dropout_rng.as_deref_mut() {
            Some(rng) if rate > 0.0 => {
                let m = dropout_mask(attn_out.nrows(), d, rate, rng);
                attn_out *= &m;
                Some(m)
            }
            _ => None,
        };
        x += &attn_out;

        let (h2, ln2) = layer_norm(&x, &layer.ln2_scale, &layer.ln2_offset);
        let pre_act = affine(&h2, &layer.w_in, &layer.b_in);
        let act = pre_act.mapv(gelu);
        let mut ffn_out = affine(&act, &layer.w_out, &layer.b_out);
        let ffn_keep = match dropout_rng.as_deref_mut() {
            Some(rng) if rate > 0.0 => {
                let m = dropout_mask(ffn_out.nrows(), d, rate, rng);
                ffn_out *= &m;
                Some(m)
            }
            _ => None,
        };
        x += &ffn_out;

        layers.push(LayerCache {
            ln1,
            h1,
            q,
            k,
            v,
            probs,
            ctx,
            attn_keep,
            ln2,
            h2,
            pre_act,
            act,
            ffn_keep,
        });
    }
    let (output, final_ln) = layer_norm(&x, &params.final_ln_scale, &params.final_ln_offset);
    Ok(ForwardCache {
        spans,
        ids,
        positions,
        layers,
        final_ln,
        output,
    })
}

/// Accumulates into `grads` the gradient of a loss whose derivative with
/// respect to [`ForwardCache::output`] is `d_output`.
pub fn backward<F: Real>(params: &Params<F>, cache: &ForwardCache<F>, d_output: &Array2<F>, grads: &mut Params<F>) {
    assert_eq!(d_output.dim(), cache.output.dim(), "d_output shape");
    let mut dx = layer_norm_backward(
        d_output,
        &cache.final_ln,
        &params.final_ln_scale,
        &mut grads.final_ln_scale,
        &mut grads.final_ln_offset,
    );
    for ((layer, lc), g) in params
        .layers
        .iter()
        .zip(&cache.layers)
        .zip(grads.layers.iter_mut())
        .rev()
    {
        layer_backward(layer, lc, g, &mut dx, &cache.spans, params.config.n_heads);
    }
    for (t, (&id, &p)) in cache.ids.iter().zip(&cache.positions).enumerate() {
        let row = dx.row(t);
        let mut tok = grads.token_embedding.row_mut(id as usize);
        tok += &row;
        let mut pos = grads.position_embedding.row_mut(p);
        pos += &row;
    }
}

fn layer_backward<F: Real>(
    layer: &LayerParams<F>,
    lc: &LayerCache<F>,
    g: &mut LayerParams<F>,
    dx: &mut Array2<F>,
    spans: &[(usize, usize)],
    n_heads: usize,
) {
    let mut dffn = dx.clone();
    if let Some(m) = &lc.ffn_keep {
        dffn *= m;
    }
    let mut dact = affine_backward(&lc.act, &layer.w_out, &dffn, &mut g.w_out, &mut g.b_out);
    Zip::from(&mut dact).and(&lc.pre_act).for_each(|d, &u| *d *= gelu_grad(u));
    let dh2 = affine_backward(&lc.h2, &layer.w_in, &dact, &mut g.w_in, &mut g.b_in);
    *dx += &layer_norm_backward(&dh2, &lc.ln2, &layer.ln2_scale, &mut g.ln2_scale, &mut g.ln2_offset);

    let mut dattn = dx.clone();
    if let Some(m) = &lc.attn_keep {
        dattn *= m;
    }
    let dctx = affine_backward(&lc.ctx, &layer.wo, &dattn, &mut g.wo, &mut g.bo);
    let (dq, dk, dv) = attention_backward(lc, &dctx, spans, n_heads);
    let mut dh1 = affine_backward(&lc.h1, &layer.wq, &dq, &mut g.wq, &mut g.bq);
    dh1 += &affine_backward(&lc.h1, &layer.wk, &dk, &mut g.wk, &mut g.bk);
    dh1 += &affine_backward(&lc.h1, &layer.wv, &dv, &mut g.wv, &mut g.bv);
    *dx += &layer_norm_backward(&dh1, &lc.ln1, &layer.ln1_scale, &mut g.ln1_scale, &mut g.ln1_offset);
}
