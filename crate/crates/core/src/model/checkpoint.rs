//! Named-tensor checkpoints (JSON). Values are stored as `f64`, which holds
//! every `f32` exactly, so a save/restore cycle is lossless for both widths.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Encoder, Strategy};
use crate::{Error, Result, Scalar};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterMeta {
    pub target: String,
    pub rank: usize,
    pub gamma: f64,
    pub dropout: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub strategy: Strategy,
    pub tau: f64,
    pub tensors: Vec<NamedTensor>,
    pub adapters: Vec<AdapterMeta>,
}

impl Checkpoint {
    pub fn capture<T: Scalar, M: Encoder<T>>(model: &M) -> Self {
        let tensors = model
            .params()
            .iter()
            .map(|(_, name, t)| NamedTensor {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                trainable: t.requires_grad(),
                data: t.data().iter().map(|x| x.as_f64()).collect(),
            })
            .collect();
        let adapters = model
            .adapters()
            .iter()
            .map(|a| AdapterMeta {
                target: a.target.clone(),
                rank: a.rank,
                gamma: a.gamma,
                dropout: a.dropout,
            })
            .collect();
        Self {
            strategy: model.strategy(),
            tau: model.tau().as_f64(),
            tensors,
            adapters,
        }
    }

    /// Overwrites the parameter values of a model with the same layout.
    pub fn restore<T: Scalar, M: Encoder<T>>(&self, model: &mut M) -> Result<()> {
        let params = model.params();
        if self.tensors.len() != params.len() {
            return Err(Error::Config(format!(
                "checkpoint holds {} tensors, model has {}",
                self.tensors.len(),
                params.len()
            )));
        }
        for nt in &self.tensors {
            let id = params
                .id(&nt.name)
                .ok_or_else(|| Error::Config(format!("model has no parameter {}", nt.name)))?;
            if params.get(id).shape() != nt.shape.as_slice() || nt.data.len() != params.get(id).numel() {
                return Err(Error::Dimension {
                    op: "checkpoint restore",
                    left: params.get(id).shape().to_vec(),
                    right: nt.shape.clone(),
                });
            }
        }
        let params = model.params_mut();
        for nt in &self.tensors {
            let id = params.id(&nt.name).expect("checked above");
            for (dst, src) in params.get_mut(id).data_mut().iter_mut().zip(&nt.data) {
                *dst = T::lit(*src);
            }
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }
}
