//! Few-shot tasks: synthetic generation, support/query episodes and import of
//! precomputed embeddings.

pub mod container;
mod episode;
mod generator;

use serde::{Deserialize, Serialize};

pub use container::{import_embeddings, EmbeddingFile};
pub use episode::{split_episode, Episode};
pub use generator::{generate_class_means, generate_task, GeneratorSpec};

use crate::autodiff::Tensor;
use crate::model::EncoderInputs;
use crate::{Error, Result, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskMode {
    /// Raw input features, encoded by the two towers.
    Raw,
    /// Image and class embeddings computed elsewhere.
    Precomputed,
}

#[derive(Clone, Debug, PartialEq)]
enum TaskData<T> {
    Raw { inputs: Tensor<T>, class_tokens: Tensor<T> },
    Precomputed { embeddings: Tensor<T>, class_embeddings: Tensor<T> },
}

/// `N` labeled samples over `K` classes plus one class-side row per class.
///
/// Precomputed tasks only ever hold unit-norm rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Task<T = f64> {
    data: TaskData<T>,
    labels: Vec<usize>,
    classes: usize,
}

impl<T: Scalar> Task<T> {
    fn validate_labels(labels: &[usize], classes: usize, samples: usize) -> Result<()> {
        if classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {classes}")));
        }
        if labels.len() != samples {
            return Err(Error::Label(format!("{} labels for {samples} samples", labels.len())));
        }
        let mut seen = vec![false; classes];
        for (i, &y) in labels.iter().enumerate() {
            if y >= classes {
                return Err(Error::Label(format!("sample {i} has label {y}, outside 0..{classes}")));
            }
            seen[y] = true;
        }
        if let Some(k) = seen.iter().position(|s| !s) {
            return Err(Error::Label(format!("class {k} has no samples")));
        }
        Ok(())
    }

    pub fn raw(inputs: Tensor<T>, class_tokens: Tensor<T>, labels: Vec<usize>) -> Result<Self> {
        let classes = class_tokens.rows();
        Self::validate_labels(&labels, classes, inputs.rows())?;
        if inputs.cols() != class_tokens.cols() {
            return Err(Error::Dimension {
                op: "task",
                left: inputs.shape().to_vec(),
                right: class_tokens.shape().to_vec(),
            });
        }
        Ok(Self {
            data: TaskData::Raw { inputs, class_tokens },
            labels,
            classes,
        })
    }

    /// Rows must already be unit-norm within `1e-6`.
    pub fn precomputed(embeddings: Tensor<T>, class_embeddings: Tensor<T>, labels: Vec<usize>) -> Result<Self> {
        let classes = class_embeddings.rows();
        Self::validate_labels(&labels, classes, embeddings.rows())?;
        if embeddings.cols() != class_embeddings.cols() {
            return Err(Error::Dimension {
                op: "task",
                left: embeddings.shape().to_vec(),
                right: class_embeddings.shape().to_vec(),
            });
        }
        for (what, t) in [("image", &embeddings), ("class", &class_embeddings)] {
            for (i, n) in t.row_norms().into_iter().enumerate() {
                if (n.as_f64() - 1.0).abs() > 1e-6 {
                    return Err(Error::Contract(format!("{what} embedding row {i} has norm {n}")));
                }
            }
        }
        Ok(Self {
            data: TaskData::Precomputed {
                embeddings,
                class_embeddings,
            },
            labels,
            classes,
        })
    }

    pub fn mode(&self) -> TaskMode {
        match self.data {
            TaskData::Raw { .. } => TaskMode::Raw,
            TaskData::Precomputed { .. } => TaskMode::Precomputed,
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Feature width of the image-side rows.
    pub fn dim(&self) -> usize {
        self.samples().cols()
    }

    /// Raw inputs or precomputed image embeddings, one row per sample.
    pub fn samples(&self) -> &Tensor<T> {
        match &self.data {
            TaskData::Raw { inputs, .. } => inputs,
            TaskData::Precomputed { embeddings, .. } => embeddings,
        }
    }

    /// Class tokens or precomputed class embeddings, one row per class.
    pub fn class_rows(&self) -> &Tensor<T> {
        match &self.data {
            TaskData::Raw { class_tokens, .. } => class_tokens,
            TaskData::Precomputed { class_embeddings, .. } => class_embeddings,
        }
    }

    /// Encoder inputs restricted to `rows` (in that order).
    pub fn gather(&self, rows: &[usize]) -> Tensor<T> {
        self.samples().select_rows(rows)
    }

    pub fn inputs<'a>(&'a self, images: &'a Tensor<T>) -> EncoderInputs<'a, T> {
        EncoderInputs {
            images,
            classes: self.class_rows(),
        }
    }

    /// Same task with the labels at `rows` replaced, for leak probes.
    pub fn with_labels_overwritten(&self, rows: &[usize], label: usize) -> Self {
        let mut out = self.clone();
        for &r in rows {
            out.labels[r] = label;
        }
        out
    }
}
