//! Toy two-tower encoder and its parameter-efficient fine-tuning strategies.

pub mod checkpoint;
mod head;
mod lora;
mod params;
mod tower;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use head::LinearHead;
pub use lora::{lora_forward, LoraAdapter, LoraSettings, LoraVars};
pub use params::{Bound, ParamId, ParamStore};
pub use tower::{build_model, PromptBank, TowerConfig, TwoTowerModel};

use crate::autodiff::{Tape, Tensor, Var};
use crate::{Error, Result, Rng, Scalar};

/// Which parameters a fine-tuning run may update.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Low-rank adapters on every query, key and value matrix of both towers.
    Lora,
    /// The vision tower's final projector only.
    Lvp,
    /// Per-class prompt context vectors only.
    Prompt,
    /// Nothing.
    Frozen,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::Lora, Strategy::Lvp, Strategy::Prompt, Strategy::Frozen];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Lora => "lora",
            Strategy::Lvp => "lvp",
            Strategy::Prompt => "prompt",
            Strategy::Frozen => "frozen",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown strategy {s:?} (expected lora, lvp, prompt or frozen)")))
    }
}

/// Forward-pass mode. Training mode owns the dropout stream.
pub enum Mode<'r> {
    Eval,
    Train(&'r mut Rng),
}

impl Mode<'_> {
    pub fn is_training(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

/// Image-side rows and class-side rows fed to an encoder. For the towers these
/// are raw features and class tokens; for a [`LinearHead`] they are
/// precomputed embeddings.
#[derive(Clone, Copy, Debug)]
pub struct EncoderInputs<'a, T> {
    pub images: &'a Tensor<T>,
    pub classes: &'a Tensor<T>,
}

/// Unit-norm image and class embeddings recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct Embeddings {
    pub images: Var,
    pub classes: Var,
}

/// A model the trainer can adapt.
pub trait Encoder<T: Scalar> {
    fn params(&self) -> &ParamStore<T>;
    fn params_mut(&mut self) -> &mut ParamStore<T>;
    fn strategy(&self) -> Strategy;
    /// Softmax temperature; frozen.
    fn tau(&self) -> T;
    fn adapters(&self) -> &[LoraAdapter] {
        &[]
    }
    /// True when no trainable parameter can change the class embeddings.
    fn text_frozen(&self) -> bool;

    fn embed(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        inputs: &EncoderInputs<'_, T>,
        mode: &mut Mode<'_>,
    ) -> Result<Embeddings>;

    /// Evaluation-mode embeddings as plain tensors.
    fn embed_eval(&self, inputs: &EncoderInputs<'_, T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut tape = Tape::new();
        let bound = self.params().bind(&mut tape);
        let e = self.embed(&mut tape, &bound, inputs, &mut Mode::Eval)?;
        Ok((tape.to_tensor(e.images), tape.to_tensor(e.classes)))
    }
}
