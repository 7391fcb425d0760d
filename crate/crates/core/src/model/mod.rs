//! Pre-norm transformer encoder with hand-written reverse-mode gradients.
//!
//! One shared network serves both the sentence-vector pass and the masked
//! token prediction pass. The output projection is tied to the token
//! embedding matrix and carries its own bias.

mod checkpoint;
mod encoder;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tokenizer::EncodedSentence;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use encoder::{backward, forward, ForwardCache};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub hidden_dim: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub dropout_rate: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_layers: 4,
            hidden_dim: 128,
            n_heads: 4,
            ffn_dim: 512,
            max_len: 64,
            vocab_size: 5,
            dropout_rate: 0.0,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_layers == 0 {
            return fail("n_layers must be positive");
        }
        if self.n_heads == 0 || self.hidden_dim == 0 || !self.hidden_dim.is_multiple_of(self.n_heads) {
            return fail("hidden_dim must be a positive multiple of n_heads");
        }
        if self.ffn_dim == 0 {
            return fail("ffn_dim must be positive");
        }
        if self.vocab_size < 5 {
            return fail("vocab_size must be at least 5");
        }
        if self.max_len < 2 {
            return fail("max_len must be at least 2");
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return fail("dropout_rate must lie in [0, 1)");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.n_heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<F> {
    pub ln1_scale: Array1<F>,
    pub ln1_offset: Array1<F>,
    pub wq: Array2<F>,
    pub bq: Array1<F>,
    pub wk: Array2<F>,
    pub bk: Array1<F>,
    pub wv: Array2<F>,
    pub bv: Array1<F>,
    pub wo: Array2<F>,
    pub bo: Array1<F>,
    pub ln2_scale: Array1<F>,
    pub ln2_offset: Array1<F>,
    pub w_in: Array2<F>,
    pub b_in: Array1<F>,
    pub w_out: Array2<F>,
    pub b_out: Array1<F>,
}

/// Every trainable tensor of the encoder plus the output bias. The same type
/// holds gradients and optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<F> {
    pub config: ModelConfig,
    pub token_embedding: Array2<F>,
    pub position_embedding: Array2<F>,
    pub layers: Vec<LayerParams<F>>,
    pub final_ln_scale: Array1<F>,
    pub final_ln_offset: Array1<F>,
    pub output_bias: Array1<F>,
}

pub type Gradients<F> = Params<F>;

/// Visits every tensor in a fixed order (the checkpoint manifest order).
macro_rules! for_each_tensor {
    ($params:expr, [$($m:tt)?], |$name:ident, $t:ident| $body:block) => {{
        macro_rules! visit {
            ($n:expr, $field:expr) => {{
                let $name: String = $n;
                let $t = & $($m)? $field;
                $body
            }};
        }
        visit!("token_embedding".to_string(), $params.token_embedding);
        visit!("position_embedding".to_string(), $params.position_embedding);
        for (l, layer) in (& $($m)? $params.layers).into_iter().enumerate() {
            visit!(format!("layers.{l}.ln1_scale"), layer.ln1_scale);
            visit!(format!("layers.{l}.ln1_offset"), layer.ln1_offset);
            visit!(format!("layers.{l}.wq"), layer.wq);
            visit!(format!("layers.{l}.bq"), layer.bq);
            visit!(format!("layers.{l}.wk"), layer.wk);
            visit!(format!("layers.{l}.bk"), layer.bk);
            visit!(format!("layers.{l}.wv"), layer.wv);
            visit!(format!("layers.{l}.bv"), layer.bv);
            visit!(format!("layers.{l}.wo"), layer.wo);
            visit!(format!("layers.{l}.bo"), layer.bo);
            visit!(format!("layers.{l}.ln2_scale"), layer.ln2_scale);
            visit!(format!("layers.{l}.ln2_offset"), layer.ln2_offset);
            visit!(format!("layers.{l}.w_in"), layer.w_in);
            visit!(format!("layers.{l}.b_in"), layer.b_in);
            visit!(format!("layers.{l}.w_out"), layer.w_out);
            visit!(format!("layers.{l}.b_out"), layer.b_out);
        }
        visit!("final_ln_scale".to_string(), $params.final_ln_scale);
        visit!("final_ln_offset".to_string(), $params.final_ln_offset);
        visit!("output_bias".to_string(), $params.output_bias);
    }};
}

/// Name and shape of one tensor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

impl<F: Real> Params<F> {
    /// All-zero tensors shaped for `config`.
    pub fn zeros(config: &ModelConfig) -> Self {
        let d = config.hidden_dim;
        let f = config.ffn_dim;
        let layer = || LayerParams {
            ln1_scale: Array1::zeros(d),
            ln1_offset: Array1::zeros(d),
            wq: Array2::zeros((d, d)),
            bq: Array1::zeros(d),
            wk: Array2::zeros((d, d)),
            bk: Array1::zeros(d),
            wv: Array2::zeros((d, d)),
            bv: Array1::zeros(d),
            wo: Array2::zeros((d, d)),
            bo: Array1::zeros(d),
            ln2_scale: Array1::zeros(d),
            ln2_offset: Array1::zeros(d),
            w_in: Array2::zeros((d, f)),
            b_in: Array1::zeros(f),
            w_out: Array2::zeros((f, d)),
            b_out: Array1::zeros(d),
        };
        Params {
            config: config.clone(),
            token_embedding: Array2::zeros((config.vocab_size, d)),
            position_embedding: Array2::zeros((config.max_len, d)),
            layers: (0..config.n_layers).map(|_| layer()).collect(),
            final_ln_scale: Array1::zeros(d),
            final_ln_offset: Array1::zeros(d),
            output_bias: Array1::zeros(config.vocab_size),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.config)
    }

    pub fn manifest(&self) -> Vec<TensorSpec> {
        let mut out = Vec::new();
        for_each_tensor!(self, [], |name, t| {
            out.push(TensorSpec {
                name,
                shape: t.shape().to_vec(),
            });
        });
        out
    }

    pub fn slices(&self) -> Vec<&[F]> {
        let mut out = Vec::new();
        for_each_tensor!(self, [], |_name, t| {
            out.push(t.as_slice().expect("parameters are contiguous"));
        });
        out
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [F]> {
        let mut out = Vec::new();
        for_each_tensor!(self, [mut], |_name, t| {
            out.push(t.as_slice_mut().expect("parameters are contiguous"));
        });
        out
    }

    pub fn num_scalars(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    /// Reads the scalar at a flat index over all tensors in manifest order.
    pub fn get_flat(&self, mut index: usize) -> F {
        for s in self.slices() {
            if index < s.len() {
                return s[index];
            }
            index -= s.len();
        }
        panic!("flat parameter index out of range");
    }

    pub fn set_flat(&mut self, mut index: usize, value: F) {
        for s in self.slices_mut() {
            if index < s.len() {
                s[index] = value;
                return;
            }
            index -= s.len();
        }
        panic!("flat parameter index out of range");
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|x| x.is_finite()))
    }

    pub fn cast<G: Real>(&self) -> Params<G> {
        let mut out = Params::<G>::zeros(&self.config);
        for (dst, src) in out.slices_mut().into_iter().zip(self.slices()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d = G::lit(s.as_f64());
            }
        }
        out
    }
}

/// Deterministic initialization from `config.seed`: scaled uniform weights
/// with bound `sqrt(6 / (fan_in + fan_out))`, zero biases and offsets, unit
/// layer-norm scales.
pub fn init_params<F: Real>(config: &ModelConfig) -> Result<Params<F>> {
    config.validate()?;
    let mut params = Params::<F>::zeros(config);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    for_each_tensor!(params, [mut], |name, t| {
        let shape = t.shape().to_vec();
        let slice = t.as_slice_mut().expect("parameters are contiguous");
        if name.ends_with("_scale") {
            slice.fill(F::one());
        } else if shape.len() == 2 {
            let bound = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
            for x in slice.iter_mut() {
                *x = F::lit(rng.gen_range(-bound..bound));
            }
        }
    });
    Ok(params)
}

/// Final-layer hidden states of one sentence. Rows at PAD positions are zero
/// and carry no information.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStates<F> {
    pub states: Array2<F>,
    pub true_len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SentenceVector<F> {
    pub values: Array1<F>,
    pub normalized: bool,
}

impl<F: Real> SentenceVector<F> {
    pub fn norm(&self) -> f64 {
        self.values.iter().map(|x| x.as_f64() * x.as_f64()).sum::<f64>().sqrt()
    }
}

/// Runs the encoder over a batch and returns one padded hidden-state matrix
/// per sentence.
pub fn encode_forward<F: Real>(params: &Params<F>, batch: &[EncodedSentence]) -> Result<Vec<HiddenStates<F>>> {
    let cache = forward(params, batch, None)?;
    let d = params.config.hidden_dim;
    Ok(cache
        .spans()
        .iter()
        .map(|&(start, len)| {
            let mut states = Array2::zeros((params.config.max_len, d));
            states
                .slice_mut(ndarray::s![..len, ..])
                .assign(&cache.output.slice(ndarray::s![start..start + len, ..]));
            HiddenStates { states, true_len: len }
        })
        .collect())
}

/// The `[CLS]` row, optionally scaled to unit Euclidean norm.
pub fn sentence_vector<F: Real>(hidden: &HiddenStates<F>, normalize: bool) -> Result<SentenceVector<F>> {
    let cls = hidden.states.row(0).to_owned();
    if !normalize {
        return Ok(SentenceVector {
            values: cls,
            normalized: false,
        });
    }
    normalize_vector(cls.view()).map(|values| SentenceVector {
        values,
        normalized: true,
    })
}

/// Unit-normalizes with the norm accumulated in `f64`.
pub fn normalize_vector<F: Real>(v: ndarray::ArrayView1<F>) -> Result<Array1<F>> {
    let norm = v.iter().map(|x| x.as_f64() * x.as_f64()).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::Invalid("cannot normalize a zero or non-finite vector".into()));
    }
    Ok(v.mapv(|x| F::lit(x.as_f64() / norm)))
}

/// Token logits for hidden rows; when `injected` is present every row first
/// has the sentence vector added element-wise.
pub fn output_logits<F: Real>(
    params: &Params<F>,
    hidden_rows: ArrayView2<F>,
    injected: Option<&SentenceVector<F>>,
) -> Result<Array2<F>> {
    let d = params.config.hidden_dim;
    if hidden_rows.ncols() != d {
        return Err(Error::Shape(format!("hidden rows have {} columns, expected {d}", hidden_rows.ncols())));
    }
    let mut rows = hidden_rows.to_owned();
    if let Some(s) = injected {
        if s.values.len() != d {
            return Err(Error::Shape(format!("sentence vector has {} entries, expected {d}", s.values.len())));
        }
        rows += &s.values.view().insert_axis(Axis(0));
    }
    Ok(project_to_vocab(params, rows.view()))
}

pub(crate) fn project_to_vocab<F: Real>(params: &Params<F>, rows: ArrayView2<F>) -> Array2<F> {
    let mut logits = rows.dot(&params.token_embedding.t());
    logits += &params.output_bias.view().insert_axis(Axis(0));
    logits
}

/// A scalar function of the parameters with exact gradients.
pub trait Objective<F: Real> {
    fn loss(&self, params: &Params<F>) -> Result<F>;
    fn loss_and_gradients(&self, params: &Params<F>) -> Result<(F, Gradients<F>)>;
}

pub fn compute_gradients<F: Real>(params: &Params<F>, objective: &impl Objective<F>) -> Result<Gradients<F>> {
    let (loss, grads) = objective.loss_and_gradients(params)?;
    if !loss.is_finite() {
        return Err(Error::Invalid(format!("non-finite loss {loss}")));
    }
    Ok(grads)
}
