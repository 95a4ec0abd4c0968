use serde::{Deserialize, Serialize};

use super::optim::Adam;
use crate::autodiff::{Tape, Tensor, Var};
use crate::model::{Bound, Encoder, EncoderInputs, Mode};
use crate::objective::{
    cross_entropy, limo_loss, logits, posterior, LimoBatch, LossReport, LossWeights, Posterior, PosteriorSource,
    TermToggles,
};
use crate::tasks::{Episode, Task};
use crate::{Error, Result, Rng, Scalar};

/// Loss a trainer minimizes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Objective {
    Limo { weights: LossWeights, toggles: TermToggles },
    /// Support cross-entropy alone, built without any of the transductive
    /// terms. Serves as the reference the zero-weight objective must match.
    CrossEntropyOnly,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSettings {
    pub iterations: usize,
    pub lr: f64,
    pub objective: Objective,
    pub trace_every: usize,
    /// Seed of the dropout stream.
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub seed: u64,
    pub step: usize,
    pub lr: f64,
    pub report: LossReport,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub steps_run: usize,
    pub trace: Vec<TraceEntry>,
    pub final_report: LossReport,
}

/// Eval-mode posterior of `images` against the class side.
pub fn posterior_eval<T: Scalar, M: Encoder<T>>(model: &M, images: &Tensor<T>, classes: &Tensor<T>) -> Result<Posterior<T>> {
    let mut tape = Tape::new();
    let bound = model.params().bind(&mut tape);
    let e = model.embed(&mut tape, &bound, &EncoderInputs { images, classes }, &mut Mode::Eval)?;
    let l = logits(&mut tape, e.images, e.classes)?;
    let p = posterior(&mut tape, l, model.tau())?;
    Ok(Posterior {
        probs: tape.to_tensor(p),
        source: PosteriorSource::Live,
    })
}

/// Fraction of rows whose prediction matches `labels`.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> f64 {
    if predictions.is_empty() {
        return 0.0;
    }
    let hits = predictions.iter().zip(labels).filter(|(p, y)| p == y).count();
    hits as f64 / predictions.len() as f64
}

/// Query top-1 accuracy in eval mode. Ties go to the lowest class index.
/// This is the only place query labels are read.
pub fn evaluate<T: Scalar, M: Encoder<T>>(model: &M, episode: &Episode, task: &Task<T>) -> Result<f64> {
    let images = task.gather(&episode.query);
    let post = posterior_eval(model, &images, task.class_rows())?;
    let truth: Vec<usize> = episode.query.iter().map(|&i| task.labels()[i]).collect();
    Ok(accuracy(&post.predictions(), &truth))
}

/// Full-batch trainer over one episode. Every step sees all of S∪Q.
pub struct Trainer<'a, T: Scalar, M: Encoder<T>> {
    model: &'a mut M,
    images: Tensor<T>,
    classes: Tensor<T>,
    support: Vec<usize>,
    query: Vec<usize>,
    labels: Tensor<T>,
    snapshot: Tensor<T>,
    objective: Objective,
    optimizer: Adam<T>,
    rng: Rng,
    step: usize,
    last: Option<LossReport>,
}

impl<'a, T: Scalar, M: Encoder<T>> Trainer<'a, T, M> {
    /// Takes the zero-shot snapshot of the query posterior before any update.
    pub fn new(model: &'a mut M, task: &Task<T>, episode: &Episode, settings: &TrainSettings) -> Result<Self> {
        episode.validate(task.len())?;
        if let Objective::Limo { weights, .. } = settings.objective {
            weights.validate()?;
        }
        let rows: Vec<usize> = episode.support.iter().chain(&episode.query).copied().collect();
        let images = task.gather(&rows);
        let classes = task.class_rows().clone();
        let ns = episode.support.len();
        let support: Vec<usize> = (0..ns).collect();
        let query: Vec<usize> = (ns..rows.len()).collect();
        let snapshot = posterior_eval(&*model, &task.gather(&episode.query), &classes)?.probs;
        let optimizer = Adam::new(model.params(), settings.lr, settings.iterations);
        Ok(Self {
            model,
            images,
            classes,
            support,
            query,
            labels: episode.one_hot(),
            snapshot,
            objective: settings.objective,
            optimizer,
            rng: Rng::new(settings.seed).fork(3),
            step: 0,
            last: None,
        })
    }

    pub fn model(&self) -> &M {
        self.model
    }

    pub fn snapshot(&self) -> &Tensor<T> {
        &self.snapshot
    }

    pub fn current_lr(&self) -> f64 {
        self.optimizer.current_lr()
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    fn record(&self, tape: &mut Tape<T>, bound: &Bound, mode: &mut Mode<'_>) -> Result<(Var, LossReport)> {
        let inputs = EncoderInputs {
            images: &self.images,
            classes: &self.classes,
        };
        let e = self.model.embed(tape, bound, &inputs, mode)?;
        let tau = self.model.tau();
        match self.objective {
            Objective::Limo { weights, toggles } => {
                let batch = LimoBatch {
                    image_emb: e.images,
                    class_emb: e.classes,
                    support: &self.support,
                    labels: &self.labels,
                    query: &self.query,
                    snapshot: &self.snapshot,
                };
                limo_loss(tape, &batch, weights, toggles, tau)
            }
            Objective::CrossEntropyOnly => {
                let l = logits(tape, e.images, e.classes)?;
                let p = posterior(tape, l, tau)?;
                let ps = tape.gather_rows(p, &self.support)?;
                let ce = cross_entropy(tape, ps, &self.labels)?;
                let v = tape.scalar(ce).as_f64();
                let report = LossReport {
                    ce: v,
                    cond_entropy: 0.0,
                    marg_entropy: 0.0,
                    kl_text: 0.0,
                    total: v,
                    weights: LossWeights::zero(),
                    tau: tau.as_f64(),
                };
                Ok((ce, report))
            }
        }
    }

    /// Loss of the current parameters in eval mode, without updating.
    pub fn evaluate_loss(&self) -> Result<LossReport> {
        let mut tape = Tape::new();
        let bound = self.model.params().bind(&mut tape);
        Ok(self.record(&mut tape, &bound, &mut Mode::Eval)?.1)
    }

    /// One forward/backward/update cycle. Returns the loss before the update.
    ///
    /// A forward pass that breaks on non-finite values after an update is
    /// reported as divergence, carrying the last finite report.
    pub fn step(&mut self) -> Result<LossReport> {
        let mut tape = Tape::new();
        let bound = self.model.params().bind(&mut tape);
        let mut rng = self.rng.clone();
        let (total, report) = match self.record(&mut tape, &bound, &mut Mode::Train(&mut rng)) {
            Ok(r) => r,
            Err(Error::DegenerateEmbedding { norm, .. }) if !norm.is_finite() && self.last.is_some() => {
                return Err(Error::Divergence {
                    step: self.step,
                    report: Box::new(self.last.clone().expect("checked above")),
                });
            }
            Err(e) => return Err(e),
        };
        self.rng = rng;
        if !report.is_finite() {
            return Err(Error::Divergence {
                step: self.step,
                report: Box::new(report),
            });
        }
        let grads = tape.backward(total)?;
        let params = self.model.params_mut();
        params.zero_grads();
        params.absorb(&bound, &grads)?;
        self.optimizer.step(params);
        self.step += 1;
        self.last = Some(report.clone());
        Ok(report)
    }
}

/// Runs `settings.iterations` steps and returns the subsampled trace. A
/// model with nothing trainable is left untouched; its trace holds the
/// step-0 loss only.
pub fn train_episode<T: Scalar, M: Encoder<T>>(
    model: &mut M,
    task: &Task<T>,
    episode: &Episode,
    settings: &TrainSettings,
) -> Result<TrainOutcome> {
    if settings.iterations == 0 || settings.trace_every == 0 {
        return Err(Error::Config("iterations and trace_every must be at least 1".into()));
    }
    let frozen = model.params().trainable_count() == 0;
    let mut trainer = Trainer::new(model, task, episode, settings)?;
    if frozen {
        let report = trainer.evaluate_loss()?;
        return Ok(TrainOutcome {
            steps_run: 0,
            trace: vec![TraceEntry {
                seed: settings.seed,
                step: 0,
                lr: 0.0,
                report: report.clone(),
            }],
            final_report: report,
        });
    }
    let mut trace = Vec::new();
    let mut last = None;
    for step in 0..settings.iterations {
        let lr = trainer.current_lr();
        let report = trainer.step()?;
        if step % settings.trace_every == 0 || step + 1 == settings.iterations {
            trace.push(TraceEntry {
                seed: settings.seed,
                step,
                lr,
                report: report.clone(),
            });
        }
        last = Some(report);
    }
    Ok(TrainOutcome {
        steps_run: settings.iterations,
        trace,
        final_report: last.expect("at least one step"),
    })
}
