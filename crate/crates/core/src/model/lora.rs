use serde::{Deserialize, Serialize};

use super::{Mode, ParamId};
use crate::autodiff::{Tape, Tensor, Var};
use crate::{Error, Result, Scalar};

/// Rank, scale and dropout shared by every adapter of a model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraSettings {
    pub rank: usize,
    /// Scale of the low-rank update; `None` means `1 / rank`.
    pub gamma: Option<f64>,
    pub dropout: f64,
}

impl Default for LoraSettings {
    fn default() -> Self {
        Self {
            rank: 2,
            gamma: None,
            dropout: 0.25,
        }
    }
}

impl LoraSettings {
    pub fn gamma(&self) -> f64 {
        self.gamma.unwrap_or(1.0 / self.rank as f64)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config("LoRA rank must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("LoRA dropout must lie in [0, 1), got {}", self.dropout)));
        }
        if !(self.gamma() >= 0.0) {
            return Err(Error::Config(format!("LoRA gamma must be nonnegative, got {}", self.gamma())));
        }
        Ok(())
    }
}

/// Low-rank update `γ·B·A` attached to a frozen `m×n` weight. `A` is `r×n`
/// and `B` is `m×r`; both live in the owning model's parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    pub target: String,
    pub target_id: ParamId,
    pub a: ParamId,
    pub b: ParamId,
    pub rank: usize,
    pub gamma: f64,
    pub dropout: f64,
}

/// An adapter's factors bound on a tape.
#[derive(Clone, Copy, Debug)]
pub struct LoraVars {
    pub a: Var,
    pub b: Var,
    pub gamma: f64,
    pub dropout: f64,
}

/// `h·Wᵀ + γ·(dropout(h)·Aᵀ)·Bᵀ` for token rows `h`.
///
/// Rows are tokens, so this is the row-vector form of `W·h + γ·B·A·h`.
/// Dropout (inverted, rate `dropout`) touches only the adapter branch and
/// only in training mode.
pub fn lora_forward<T: Scalar>(
    tape: &mut Tape<T>,
    input: Var,
    weight: Var,
    adapter: Option<&LoraVars>,
    mode: &mut Mode<'_>,
) -> Result<Var> {
    let base = tape.matmul_nt(input, weight)?;
    let Some(ad) = adapter else { return Ok(base) };
    let x = match mode {
        Mode::Train(rng) if ad.dropout > 0.0 => {
            let (r, c) = tape.dims(input);
            let keep = T::lit(1.0 / (1.0 - ad.dropout));
            let mask: Vec<T> = (0..r * c)
                .map(|_| if rng.uniform() < ad.dropout { T::zero() } else { keep })
                .collect();
            let m = tape.constant(&Tensor::new(vec![r, c], mask)?);
            tape.mul(input, m)?
        }
        _ => input,
    };
    let down = tape.matmul_nt(x, ad.a)?;
    let up = tape.matmul_nt(down, ad.b)?;
    let scaled = tape.scale(up, T::lit(ad.gamma));
    tape.add(base, scaled)
}
