use serde::{Deserialize, Serialize};

use super::Task;
use crate::autodiff::Tensor;
use crate::{Error, Result, Rng, Scalar};

/// Parameters of the synthetic hypersphere task.
///
/// Noise is isotropic Gaussian with expected norm `1 / concentration`,
/// applied before renormalization; this approximates a von Mises–Fisher
/// cluster without its special functions. Class tokens carry half that
/// noise, so zero-shot matching against them is informative but imperfect.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub classes: usize,
    pub input_dim: usize,
    pub samples_per_class: usize,
    pub concentration: f64,
    /// Expected cosine between distinct class means.
    pub class_correlation: f64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            classes: 10,
            input_dim: 16,
            samples_per_class: 29,
            concentration: 2.0,
            class_correlation: 0.0,
        }
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.input_dim < 2 {
            return Err(Error::Config("input_dim must be at least 2".into()));
        }
        if self.samples_per_class < 2 {
            return Err(Error::Config(
                "samples_per_class must leave room for at least one support and one query sample".into(),
            ));
        }
        if !(self.concentration > 0.0) || !self.concentration.is_finite() {
            return Err(Error::Config(format!("concentration must be positive, got {}", self.concentration)));
        }
        if !(0.0..1.0).contains(&self.class_correlation) {
            return Err(Error::Config(format!(
                "class_correlation must lie in [0, 1), got {}",
                self.class_correlation
            )));
        }
        Ok(())
    }
}

fn unit_gaussian(rng: &mut Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn perturb_unit(rng: &mut Rng, center: &[f64], scale: f64) -> Vec<f64> {
    let per_coord = scale / (center.len() as f64).sqrt();
    loop {
        let v: Vec<f64> = center.iter().map(|c| c + per_coord * rng.normal()).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// `K` unit class means mixing a shared direction (weight `√ρ`) with
/// independent ones (weight `√(1−ρ)`), so distinct means have cosine ≈ ρ.
pub fn generate_class_means(spec: &GeneratorSpec, rng: &mut Rng) -> Vec<Vec<f64>> {
    let shared = unit_gaussian(rng, spec.input_dim);
    let (a, b) = (spec.class_correlation.sqrt(), (1.0 - spec.class_correlation).sqrt());
    (0..spec.classes)
        .map(|_| {
            let own = unit_gaussian(rng, spec.input_dim);
            let v: Vec<f64> = shared.iter().zip(&own).map(|(s, o)| a * s + b * o).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / n).collect()
        })
        .collect()
}

/// Draws a raw-mode task: `samples_per_class` points per class, labels in
/// class-major order.
pub fn generate_task<T: Scalar>(spec: &GeneratorSpec, rng: &mut Rng) -> Result<Task<T>> {
    spec.validate()?;
    let means = generate_class_means(spec, rng);
    let noise = 1.0 / spec.concentration;
    let tokens: Vec<Vec<T>> = means
        .iter()
        .map(|m| perturb_unit(rng, m, 0.5 * noise).into_iter().map(T::lit).collect())
        .collect();
    let mut rows = Vec::with_capacity(spec.classes * spec.samples_per_class);
    let mut labels = Vec::with_capacity(rows.capacity());
    for (k, m) in means.iter().enumerate() {
        for _ in 0..spec.samples_per_class {
            rows.push(perturb_unit(rng, m, noise).into_iter().map(T::lit).collect());
            labels.push(k);
        }
    }
    Task::raw(Tensor::from_rows(&rows)?, Tensor::from_rows(&tokens)?, labels)
}
