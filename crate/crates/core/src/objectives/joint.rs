use ndarray::{Array2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::contrastive::{margin_loss_with_grad, HingeMode, IndexMode};
use super::masking::{apply_masking, MaskedSentence, MaskingConfig};
use super::mlm::masked_lm;
use crate::error::{Error, Result};
use crate::model::{backward, forward, Gradients, Objective, Params};
use crate::real::Real;
use crate::tokenizer::EncodedSentence;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveMode {
    Cl,
    Mlm,
    Automlm,
    ClMlm,
    #[default]
    ClAutomlm,
}

impl ObjectiveMode {
    pub fn uses_cl(self) -> bool {
        matches!(self, Self::Cl | Self::ClMlm | Self::ClAutomlm)
    }

    pub fn uses_mlm(self) -> bool {
        matches!(self, Self::Mlm | Self::ClMlm)
    }

    pub fn uses_automlm(self) -> bool {
        matches!(self, Self::Automlm | Self::ClAutomlm)
    }

    fn uses_token_loss(self) -> bool {
        self.uses_mlm() || self.uses_automlm()
    }
}

/// Which side of each pair is corrupted for the token-prediction loss.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AutoMlmSide {
    User,
    Agent,
    #[default]
    Both,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ObjectiveConfig {
    pub mode: ObjectiveMode,
    pub lambda: f64,
    pub margin: f64,
    pub index_mode: IndexMode,
    pub hinge_mode: HingeMode,
    /// Also anchor the margin loss on user rows and average both directions.
    pub cl_symmetric: bool,
    pub automlm_side: AutoMlmSide,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            mode: ObjectiveMode::ClAutomlm,
            lambda: 1.0,
            margin: 0.1,
            index_mode: IndexMode::Full,
            hinge_mode: HingeMode::Conventional,
            cl_symmetric: false,
            automlm_side: AutoMlmSide::Both,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config("lambda must be finite and non-negative".into()));
        }
        if !self.margin.is_finite() {
            return Err(Error::Config("margin must be finite".into()));
        }
        Ok(())
    }
}

/// Per-step loss components. `mlm` is set only in modes that use the plain
/// masked language model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cl: f64,
    pub automlm: f64,
    pub mlm: Option<f64>,
    pub joint: f64,
    pub lambda: f64,
    pub margin: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        self.cl.is_finite() && self.automlm.is_finite() && self.mlm.is_none_or(f64::is_finite) && self.joint.is_finite()
    }
}

pub fn joint_loss<F: Real>(cl: F, automlm: F, lambda: F) -> F {
    cl + lambda * automlm
}

/// One batch of in-batch-negative pairs together with masked copies of the
/// sentences chosen for token prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingBatch {
    pub agents: Vec<EncodedSentence>,
    pub users: Vec<EncodedSentence>,
    pub masked: Vec<MaskedSentence>,
    /// For each masked sentence, its index into `agents ++ users`.
    pub masked_source: Vec<usize>,
}

impl TrainingBatch {
    pub fn new(
        agents: Vec<EncodedSentence>,
        users: Vec<EncodedSentence>,
        side: AutoMlmSide,
        masking: &MaskingConfig,
        vocab_size: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if agents.len() != users.len() || agents.is_empty() {
            return Err(Error::Shape("batch needs equal, non-zero numbers of agent and user sentences".into()));
        }
        let n = agents.len();
        let masked_source: Vec<usize> = match side {
            AutoMlmSide::Agent => (0..n).collect(),
            AutoMlmSide::User => (n..2 * n).collect(),
            AutoMlmSide::Both => (0..2 * n).collect(),
        };
        let masked = masked_source
            .iter()
            .map(|&i| {
                let s = if i < n { &agents[i] } else { &users[i - n] };
                apply_masking(s, masking, vocab_size, rng)
            })
            .collect::<Result<_>>()?;
        Ok(TrainingBatch {
            agents,
            users,
            masked,
            masked_source,
        })
    }

    pub fn len(&self) -> usize {
        self.agents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.agents.is_empty()
    }

    fn sources(&self) -> Vec<EncodedSentence> {
        self.agents.iter().chain(&self.users).cloned().collect()
    }

    fn corrupted(&self) -> Vec<EncodedSentence> {
        self.masked.iter().map(|m| m.corrupted.clone()).collect()
    }
}

/// Normalized `[CLS]` rows and their norms.
fn unit_rows<F: Real>(cls: &Array2<F>) -> (Array2<F>, Vec<F>) {
    let mut unit = cls.clone();
    let mut norms = Vec::with_capacity(cls.nrows());
    for mut row in unit.rows_mut() {
        let norm = row.dot(&row).sqrt();
        row /= norm;
        norms.push(norm);
    }
    (unit, norms)
}

/// Contrastive margin loss over the first `n` (agent) and last `n` (user)
/// `[CLS]` rows; returns the loss and optionally the gradient for `cls`.
fn contrastive<F: Real>(cls: &Array2<F>, cfg: &ObjectiveConfig, want_grad: bool) -> (F, Option<Array2<F>>) {
    let n = cls.nrows() / 2;
    let (unit, norms) = unit_rows(cls);
    let agents = unit.slice(ndarray::s![..n, ..]);
    let users = unit.slice(ndarray::s![n.., ..]);
    let scores = agents.dot(&users.t());
    let margin = F::lit(cfg.margin);
    let (mut loss, mut d_scores) = margin_loss_with_grad(scores.view(), margin, cfg.index_mode, cfg.hinge_mode, want_grad);
    if cfg.cl_symmetric {
        let half = F::lit(0.5);
        let (rev_loss, rev_grad) = margin_loss_with_grad(scores.t(), margin, cfg.index_mode, cfg.hinge_mode, want_grad);
        loss = half * (loss + rev_loss);
        if let (Some(g), Some(r)) = (d_scores.as_mut(), rev_grad) {
            *g += &r.t();
            *g *= half;
        }
    }
    let Some(d_scores) = d_scores else {
        return (loss, None);
    };
    let mut d_unit = Array2::zeros(unit.raw_dim());
    d_unit.slice_mut(ndarray::s![..n, ..]).assign(&d_scores.dot(&users));
    d_unit.slice_mut(ndarray::s![n.., ..]).assign(&d_scores.t().dot(&agents));
    // Through v / |v|: (g - u (u . g)) / |v|.
    let mut d_cls = d_unit;
    for ((mut g, u), &norm) in d_cls.rows_mut().into_iter().zip(unit.rows()).zip(&norms) {
        let along = u.dot(&g);
        g.zip_mut_with(&u, |gi, &ui| *gi = (*gi - ui * along) / norm);
    }
    (loss, Some(d_cls))
}

/// Evaluates every loss active under `cfg.mode` on one batch and, when
/// `want_grads`, the exact gradient of the joint loss.
///
/// The uncorrupted pass supplies both the contrastive sentence vectors and
/// the raw vectors injected into the corrupted pass; gradients flow through
/// both uses. Returns the breakdown and the joint loss in working precision.
pub fn evaluate_batch<F: Real>(
    params: &Params<F>,
    batch: &TrainingBatch,
    cfg: &ObjectiveConfig,
    mut dropout_rng: Option<&mut ChaCha8Rng>,
    want_grads: bool,
) -> Result<(LossBreakdown, F, Option<Gradients<F>>)> {
    cfg.validate()?;
    let mode = cfg.mode;
    if mode.uses_cl() && batch.len() < 2 {
        return Err(Error::Invalid("contrastive loss needs at least two pairs".into()));
    }
    let mut grads = want_grads.then(|| params.zeros_like());
    let lambda = F::lit(cfg.lambda);

    let need_source = mode.uses_cl() || mode.uses_automlm();
    let source = if need_source {
        Some(forward(params, &batch.sources(), dropout_rng.as_deref_mut())?)
    } else {
        None
    };
    let mut d_source = source.as_ref().filter(|_| want_grads).map(|c| Array2::zeros(c.output.raw_dim()));

    let mut cl = F::zero();
    if let Some(src) = source.as_ref().filter(|_| mode.uses_cl()) {
        let cls_rows: Vec<usize> = (0..src.num_sentences()).map(|s| src.cls_row(s)).collect();
        let cls = src.output.select(Axis(0), &cls_rows);
        let (loss, d_cls) = contrastive(&cls, cfg, want_grads);
        cl = loss;
        if let (Some(d_src), Some(d_cls)) = (d_source.as_mut(), d_cls) {
            for (&r, g) in cls_rows.iter().zip(d_cls.rows()) {
                let mut row = d_src.row_mut(r);
                row += &g;
            }
        }
    }

    let mut token = F::zero();
    if mode.uses_token_loss() {
        let corrupted = forward(params, &batch.corrupted(), dropout_rng)?;
        let injections = match (&source, mode.uses_automlm()) {
            (Some(src), true) => {
                let rows: Vec<usize> = batch.masked_source.iter().map(|&i| src.cls_row(i)).collect();
                Some(src.output.select(Axis(0), &rows))
            }
            _ => None,
        };
        // The token loss is scaled by lambda only when combined with CL; at
        // lambda = 0 it contributes nothing to the gradient.
        let weight = if mode.uses_cl() { lambda } else { F::one() };
        let grad_scale = match grads.as_mut() {
            Some(g) if weight != F::zero() => Some((weight, g)),
            _ => None,
        };
        let (loss, token_grads) =
            masked_lm(params, &corrupted, &batch.masked, injections.as_ref().map(|a| a.view()), grad_scale)?;
        token = loss;
        if let Some(tg) = token_grads {
            let g = grads.as_mut().expect("gradients requested");
            backward(params, &corrupted, &tg.d_output, g);
            if let (Some(src), Some(d_src), true) = (&source, d_source.as_mut(), mode.uses_automlm()) {
                for (&i, d) in batch.masked_source.iter().zip(tg.d_injection.rows()) {
                    let mut row = d_src.row_mut(src.cls_row(i));
                    row += &d;
                }
            }
        }
    }

    if let (Some(src), Some(d_src), Some(g)) = (&source, &d_source, grads.as_mut()) {
        backward(params, src, d_src, g);
    }

    let (joint, breakdown) = {
        let cl64 = cl.as_f64();
        let token64 = token.as_f64();
        let (automlm, mlm) = if mode.uses_mlm() { (0.0, Some(token64)) } else { (token64, None) };
        match mode {
            ObjectiveMode::Cl => (cl, breakdown(cl64, 0.0, None, cl64, cfg)),
            ObjectiveMode::Mlm | ObjectiveMode::Automlm => (token, breakdown(0.0, automlm, mlm, token64, cfg)),
            ObjectiveMode::ClMlm | ObjectiveMode::ClAutomlm => (
                joint_loss(cl, token, lambda),
                breakdown(cl64, automlm, mlm, cl64 + cfg.lambda * token64, cfg),
            ),
        }
    };
    Ok((breakdown, joint, grads))
}

fn breakdown(cl: f64, automlm: f64, mlm: Option<f64>, joint: f64, cfg: &ObjectiveConfig) -> LossBreakdown {
    LossBreakdown {
        cl,
        automlm,
        mlm,
        joint,
        lambda: cfg.lambda,
        margin: cfg.margin,
    }
}

/// The joint loss of one fixed batch as a differentiable function of the
/// parameters (no dropout).
pub struct BatchObjective<'a> {
    pub batch: &'a TrainingBatch,
    pub config: &'a ObjectiveConfig,
}

impl<F: Real> Objective<F> for BatchObjective<'_> {
    fn loss(&self, params: &Params<F>) -> Result<F> {
        Ok(evaluate_batch(params, self.batch, self.config, None, false)?.1)
    }

    fn loss_and_gradients(&self, params: &Params<F>) -> Result<(F, Gradients<F>)> {
        let (_, loss, grads) = evaluate_batch(params, self.batch, self.config, None, true)?;
        Ok((loss, grads.expect("gradients requested")))
    }
}
