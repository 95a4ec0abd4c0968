//! `LIMOEMB1` binary container for precomputed embeddings.
//!
//! Little-endian throughout:
//!
//! ```text
//! offset  size      field
//! 0       8         magic "LIMOEMB1"
//! 8       4         u32 version (= 1)
//! 12      4         u32 N (samples)
//! 16      4         u32 d (embedding width)
//! 20      4         u32 K (classes)
//! 24      4·N·d     f32 image embeddings, row-major
//! ...     4·K·d     f32 class embeddings, row-major
//! ...     4·N       u32 labels
//! ```
//!
//! Decoding is all-or-nothing: every check runs before any value is handed
//! out, and errors carry the byte offset of the offending field.

use std::fs;
use std::path::Path;

use super::Task;
use crate::autodiff::Tensor;
use crate::{Error, Result, Scalar};

pub const MAGIC: &[u8; 8] = b"LIMOEMB1";
pub const VERSION: u32 = 1;
const HEADER_LEN: u64 = 24;

/// Rows whose norm is off by more than this are rejected rather than rescaled.
pub const NORM_TOLERANCE: f64 = 1e-3;

/// Decoded contents of a container, exactly as stored.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingFile {
    pub samples: usize,
    pub dim: usize,
    pub classes: usize,
    pub embeddings: Vec<f32>,
    pub class_embeddings: Vec<f32>,
    pub labels: Vec<u32>,
}

fn format_err(offset: u64, message: impl Into<String>) -> Error {
    Error::Format {
        offset,
        message: message.into(),
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: u64,
}

impl Reader<'_> {
    fn take(&mut self, n: u64, what: &str) -> Result<&[u8]> {
        let start = self.pos;
        let available = self.bytes.len() as u64 - start;
        if n > available {
            return Err(format_err(
                start,
                format!("truncated {what}: need {n} bytes, {available} left"),
            ));
        }
        self.pos += n;
        Ok(&self.bytes[start as usize..self.pos as usize])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn f32s(&mut self, count: u64, what: &str) -> Result<Vec<f32>> {
        let start = self.pos;
        let bytes = count.checked_mul(4).unwrap_or(u64::MAX);
        let b = self.take(bytes, what)?;
        let out: Vec<f32> = b
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        if let Some(i) = out.iter().position(|x| !x.is_finite()) {
            return Err(format_err(start + 4 * i as u64, format!("non-finite value in {what}")));
        }
        Ok(out)
    }
}

/// Checks row norms and returns the rows widened to `f64` and rescaled to unit norm.
fn unit_rows(values: &[f32], dim: usize, base: u64, what: &str) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(values.len());
    for (r, row) in values.chunks_exact(dim).enumerate() {
        let wide: Vec<f64> = row.iter().map(|&x| x as f64).collect();
        let norm = wide.iter().map(|x| x * x).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > NORM_TOLERANCE {
            return Err(format_err(
                base + (r * dim * 4) as u64,
                format!("{what} row {r} has norm {norm}, deviation above {NORM_TOLERANCE}"),
            ));
        }
        out.extend(wide.into_iter().map(|x| x / norm));
    }
    Ok(out)
}

impl EmbeddingFile {
    /// Validates shapes; values are stored as given.
    pub fn new(
        dim: usize,
        classes: usize,
        embeddings: Vec<f32>,
        class_embeddings: Vec<f32>,
        labels: Vec<u32>,
    ) -> Result<Self> {
        let samples = labels.len();
        if dim == 0 || embeddings.len() != samples * dim || class_embeddings.len() != classes * dim {
            return Err(Error::Dimension {
                op: "embedding file",
                left: vec![samples, dim, classes],
                right: vec![embeddings.len(), class_embeddings.len()],
            });
        }
        for v in [samples, dim, classes] {
            if u32::try_from(v).is_err() {
                return Err(Error::Config(format!("extent {v} does not fit in u32")));
            }
        }
        Ok(Self {
            samples,
            dim,
            classes,
            embeddings,
            class_embeddings,
            labels,
        })
    }

    /// Narrows a precomputed task to `f32` storage.
    pub fn from_task<T: Scalar>(task: &Task<T>) -> Result<Self> {
        let narrow = |t: &Tensor<T>| t.data().iter().map(|x| x.as_f64() as f32).collect::<Vec<_>>();
        Self::new(
            task.dim(),
            task.classes(),
            narrow(task.samples()),
            narrow(task.class_rows()),
            task.labels().iter().map(|&y| y as u32).collect(),
        )
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let total = HEADER_LEN as usize + 4 * (self.embeddings.len() + self.class_embeddings.len() + self.labels.len());
        let mut out = Vec::with_capacity(total);
        out.extend_from_slice(MAGIC);
        for v in [VERSION, self.samples as u32, self.dim as u32, self.classes as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for x in self.embeddings.iter().chain(&self.class_embeddings) {
            out.extend_from_slice(&x.to_le_bytes());
        }
        for y in &self.labels {
            out.extend_from_slice(&y.to_le_bytes());
        }
        out
    }

    /// Decodes and fully validates a container, including label range and
    /// row norms.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut rd = Reader { bytes, pos: 0 };
        if rd.take(8, "magic")? != MAGIC {
            return Err(format_err(0, "bad magic, expected LIMOEMB1"));
        }
        let version = rd.u32("version")?;
        if version != VERSION {
            return Err(format_err(8, format!("unsupported version {version}")));
        }
        let n = rd.u32("sample count")? as u64;
        let d = rd.u32("dimension")? as u64;
        let k = rd.u32("class count")? as u64;
        if d == 0 {
            return Err(format_err(16, "dimension is zero"));
        }
        if k < 2 {
            return Err(format_err(20, format!("need at least 2 classes, header says {k}")));
        }
        // u32 extents: the products fit in u128 without overflow.
        let expected = HEADER_LEN as u128 + 4 * (n as u128 * d as u128 + k as u128 * d as u128 + n as u128);
        let actual = bytes.len() as u64;
        if actual as u128 > expected {
            let expected = expected as u64;
            return Err(format_err(expected, format!("{} trailing bytes", actual - expected)));
        }
        let emb_at = rd.pos;
        let embeddings = rd.f32s(n.saturating_mul(d), "image embeddings")?;
        let cls_at = rd.pos;
        let class_embeddings = rd.f32s(k * d, "class embeddings")?;
        let labels_at = rd.pos;
        let mut labels = Vec::with_capacity(n as usize);
        for _ in 0..n {
            labels.push(rd.u32("labels")?);
        }
        for (i, &y) in labels.iter().enumerate() {
            if y as u64 >= k {
                return Err(Error::Label(format!(
                    "label {y} of sample {i} (byte {}) outside 0..{k}",
                    labels_at + 4 * i as u64
                )));
            }
        }
        let (d, k) = (d as usize, k as usize);
        unit_rows(&embeddings, d, emb_at, "image embedding")?;
        unit_rows(&class_embeddings, d, cls_at, "class embedding")?;
        Self::new(d, k, embeddings, class_embeddings, labels)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Widens to `T` and rescales every row to unit norm.
    pub fn to_task<T: Scalar>(&self) -> Result<Task<T>> {
        let emb_at = HEADER_LEN;
        let cls_at = emb_at + 4 * self.embeddings.len() as u64;
        let widen = |v: Vec<f64>| v.into_iter().map(T::lit).collect::<Vec<_>>();
        let embeddings = unit_rows(&self.embeddings, self.dim, emb_at, "image embedding")?;
        let classes = unit_rows(&self.class_embeddings, self.dim, cls_at, "class embedding")?;
        Task::precomputed(
            Tensor::new(vec![self.samples, self.dim], widen(embeddings))?,
            Tensor::new(vec![self.classes, self.dim], widen(classes))?,
            self.labels.iter().map(|&y| y as usize).collect(),
        )
    }
}

/// Reads a container into a precomputed-mode task.
pub fn import_embeddings<T: Scalar>(path: impl AsRef<Path>) -> Result<Task<T>> {
    EmbeddingFile::read(path)?.to_task()
}
