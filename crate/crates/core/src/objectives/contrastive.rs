use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::SentenceVector;
use crate::real::Real;

/// Pairwise cosine scores between agent rows and user columns; the diagonal
/// holds same-session pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix<F> {
    pub scores: Array2<F>,
}

impl<F: Real> ScoreMatrix<F> {
    pub fn len(&self) -> usize {
        self.scores.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// Which rows contribute to the margin loss.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IndexMode {
    /// Skip the first row, as the sum's lower bound is written.
    PaperLiteral,
    #[default]
    Full,
}

/// Sign of the margin inside the hinge.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HingeMode {
    /// `max(0, neg - pos - margin)`: only negatives beating the positive by
    /// more than the margin are penalized.
    PaperLiteral,
    /// `max(0, neg - pos + margin)`: negatives must trail the positive by at
    /// least the margin.
    #[default]
    Conventional,
}

const NORM_TOLERANCE: f64 = 1e-6;

pub fn score_matrix<F: Real>(agent_vecs: &[SentenceVector<F>], user_vecs: &[SentenceVector<F>]) -> Result<ScoreMatrix<F>> {
    if agent_vecs.len() != user_vecs.len() {
        return Err(Error::Shape(format!(
            "{} agent vectors vs {} user vectors",
            agent_vecs.len(),
            user_vecs.len()
        )));
    }
    if agent_vecs.len() < 2 {
        return Err(Error::Invalid("score matrix needs at least two pairs".into()));
    }
    let dim = agent_vecs[0].values.len();
    for v in agent_vecs.iter().chain(user_vecs) {
        if v.values.len() != dim {
            return Err(Error::Shape("sentence vectors differ in dimension".into()));
        }
        if !v.normalized || (v.norm() - 1.0).abs() > NORM_TOLERANCE {
            return Err(Error::Invalid("score matrix inputs must be unit-normalized".into()));
        }
    }
    let stack = |vs: &[SentenceVector<F>]| Array2::from_shape_fn((vs.len(), dim), |(i, j)| vs[i].values[j]);
    Ok(ScoreMatrix {
        scores: stack(agent_vecs).dot(&stack(user_vecs).t()),
    })
}

pub fn cl_margin_loss<F: Real>(scores: &ScoreMatrix<F>, margin: F, index_mode: IndexMode, hinge_mode: HingeMode) -> F {
    margin_loss_with_grad(scores.scores.view(), margin, index_mode, hinge_mode, false).0
}

/// Loss and, when requested, its gradient with respect to every score.
pub(crate) fn margin_loss_with_grad<F: Real>(
    scores: ArrayView2<F>,
    margin: F,
    index_mode: IndexMode,
    hinge_mode: HingeMode,
    want_grad: bool,
) -> (F, Option<Array2<F>>) {
    let n = scores.nrows();
    let shift = match hinge_mode {
        HingeMode::PaperLiteral => margin,
        HingeMode::Conventional => -margin,
    };
    let first_row = match index_mode {
        IndexMode::PaperLiteral => 1,
        IndexMode::Full => 0,
    };
    let inv_n = F::one() / F::lit(n as f64);
    let mut grad = want_grad.then(|| Array2::zeros(scores.raw_dim()));
    let mut total = F::zero();
    for i in first_row..n {
        let pos = scores[[i, i]];
        for j in (0..n).filter(|&j| j != i) {
            let violation = scores[[i, j]] - pos - shift;
            if violation > F::zero() {
                total += violation;
                if let Some(g) = grad.as_mut() {
                    g[[i, j]] += inv_n;
                    g[[i, i]] -= inv_n;
                }
            }
        }
    }
    (total * inv_n, grad)
}
