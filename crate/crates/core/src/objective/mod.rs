//! The transductive objective: support cross-entropy, query mutual
//! information (conditional and marginal entropies) and a KL anchor to the
//! zero-shot posterior.
//!
//! All functions record onto a [`Tape`](crate::autodiff::Tape) so the combined
//! loss is differentiable. Logarithms clamp at `1e-12`.

mod terms;
pub mod tim;

use serde::{Deserialize, Serialize};

pub use terms::{
    conditional_entropy, cross_entropy, kl_text, limo_loss, logits, marginal_entropy, posterior, LimoBatch,
};

use crate::autodiff::{Tape, Tensor};
use crate::{Error, Result, Scalar};

/// Weights of the information-maximization and text-anchor terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_ent: f64,
    pub lambda_cond: f64,
    pub lambda_text: f64,
}

impl LossWeights {
    pub fn new(lambda_ent: f64, lambda_cond: f64, lambda_text: f64) -> Result<Self> {
        let w = Self {
            lambda_ent,
            lambda_cond,
            lambda_text,
        };
        w.validate()?;
        Ok(w)
    }

    /// Cross-entropy only.
    pub fn zero() -> Self {
        Self {
            lambda_ent: 0.0,
            lambda_cond: 0.0,
            lambda_text: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_ent", self.lambda_ent),
            ("lambda_cond", self.lambda_cond),
            ("lambda_text", self.lambda_text),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be a finite nonnegative number, got {v}")));
            }
        }
        Ok(())
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_ent: 10.0,
            lambda_cond: 1.0,
            lambda_text: 0.1,
        }
    }
}

/// Which loss terms participate. A disabled term contributes nothing to the
/// total; its value is still reported where it is computed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TermToggles {
    pub ce: bool,
    pub mi: bool,
    pub text: bool,
}

impl Default for TermToggles {
    fn default() -> Self {
        Self {
            ce: true,
            mi: true,
            text: true,
        }
    }
}

impl TermToggles {
    /// Weights with disabled terms zeroed.
    pub fn apply(&self, w: LossWeights) -> LossWeights {
        LossWeights {
            lambda_ent: if self.mi { w.lambda_ent } else { 0.0 },
            lambda_cond: if self.mi { w.lambda_cond } else { 0.0 },
            lambda_text: if self.text { w.lambda_text } else { 0.0 },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosteriorSource {
    Live,
    ZeroShotSnapshot,
}

/// Class posterior rows `p_{i,k}`.
#[derive(Clone, Debug, PartialEq)]
pub struct Posterior<T = f64> {
    pub probs: Tensor<T>,
    pub source: PosteriorSource,
}

impl<T: Scalar> Posterior<T> {
    /// Temperature softmax of cosine logits, evaluated off-tape.
    pub fn from_logits(logits: &Tensor<T>, tau: T, source: PosteriorSource) -> Result<Self> {
        let mut tape = Tape::new();
        let l = tape.constant(logits);
        let p = posterior(&mut tape, l, tau)?;
        Ok(Self {
            probs: tape.to_tensor(p),
            source,
        })
    }

    /// Predicted class per row, ties broken toward the lowest index.
    pub fn predictions(&self) -> Vec<usize> {
        self.probs.argmax_rows()
    }
}

/// Per-term values of one loss evaluation.
///
/// `kl_text` is the unweighted KL sum over the query set, or zero when its
/// effective weight is zero; `weights` are the effective weights after term
/// toggles, so that
/// `total = ce − λ_ent·marg_entropy + λ_cond·cond_entropy + λ_text·kl_text`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub ce: f64,
    pub cond_entropy: f64,
    pub marg_entropy: f64,
    pub kl_text: f64,
    pub total: f64,
    pub weights: LossWeights,
    pub tau: f64,
}

impl LossReport {
    /// The total rebuilt from the individual terms.
    pub fn recompose(&self) -> f64 {
        let w = &self.weights;
        self.ce - (w.lambda_ent * self.marg_entropy - w.lambda_cond * self.cond_entropy) + w.lambda_text * self.kl_text
    }

    pub fn is_finite(&self) -> bool {
        [self.ce, self.cond_entropy, self.marg_entropy, self.kl_text, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}
