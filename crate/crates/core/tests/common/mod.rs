#![allow(dead_code)]

use limo_core::autodiff::Tape;
use limo_core::harness::{posterior_eval, RunConfig};
use limo_core::model::{build_model, Encoder, Mode, Strategy, TwoTowerModel};
use limo_core::objective::{limo_loss, LimoBatch, LossWeights, TermToggles};
use limo_core::tasks::{generate_task, split_episode, Episode, Task};
use limo_core::{Rng, Tensor64};

/// A random small instance within the gradient-check envelope:
/// embed_dim ≤ 16, K ≤ 5, one shot per class, |Q| ≤ 12.
pub fn random_instance(seed: u64) -> RunConfig {
    let mut rng = Rng::new(seed).fork(7);
    let pick = |rng: &mut Rng, lo: usize, hi: usize| lo + (rng.uniform() * (hi - lo + 1) as f64) as usize;
    let classes = pick(&mut rng, 2, 5);
    RunConfig {
        classes,
        input_dim: pick(&mut rng, 3, 8),
        hidden_dim: pick(&mut rng, 3, 6),
        embed_dim: pick(&mut rng, 2, 16),
        num_blocks: 2,
        ctx_len: pick(&mut rng, 1, 3),
        shots: 1,
        query_per_class: 12 / classes,
        class_correlation: 0.5 * rng.uniform(),
        concentration: 1.0 + 3.0 * rng.uniform(),
        ..small_config()
    }
}

/// A small, quick configuration: 3-way 2-shot, 4 queries per class.
pub fn small_config() -> RunConfig {
    RunConfig {
        run_id: "small".into(),
        classes: 3,
        input_dim: 6,
        hidden_dim: 8,
        embed_dim: 5,
        concentration: 3.0,
        class_correlation: 0.5,
        shots: 2,
        query_per_class: 4,
        iterations: Some(15),
        seeds: vec![0],
        trace_every: 1,
        ..RunConfig::default()
    }
}

pub fn setup(cfg: &RunConfig, seed: u64, strategy: Strategy) -> (TwoTowerModel, Task, Episode) {
    let task = generate_task(&cfg.generator_spec(), &mut Rng::new(seed).fork(0)).unwrap();
    let episode = split_episode(&task, cfg.shots, cfg.query_per_class, &mut Rng::new(seed).fork(1)).unwrap();
    let model = build_model(&cfg.tower_config(seed), strategy).unwrap();
    (model, task, episode)
}

pub fn snapshot(model: &TwoTowerModel, task: &Task, episode: &Episode) -> Tensor64 {
    posterior_eval(model, &task.gather(&episode.query), task.class_rows()).unwrap().probs
}

/// Full objective in eval mode over S∪Q, as the trainer lays it out.
pub fn limo_total(model: &TwoTowerModel, task: &Task, episode: &Episode, snapshot: &Tensor64, weights: LossWeights) -> f64 {
    let mut tape = Tape::new();
    let bound = model.params().bind(&mut tape);
    let rows: Vec<usize> = episode.support.iter().chain(&episode.query).copied().collect();
    let images = task.gather(&rows);
    let e = model.embed(&mut tape, &bound, &task.inputs(&images), &mut Mode::Eval).unwrap();
    let ns = episode.support.len();
    let support: Vec<usize> = (0..ns).collect();
    let query: Vec<usize> = (ns..rows.len()).collect();
    let labels = episode.one_hot();
    let batch = LimoBatch {
        image_emb: e.images,
        class_emb: e.classes,
        support: &support,
        labels: &labels,
        query: &query,
        snapshot,
    };
    let (total, _) = limo_loss(&mut tape, &batch, weights, TermToggles::default(), model.tau()).unwrap();
    tape.scalar(total)
}

/// Analytic gradient of [`limo_total`] with respect to every trainable tensor,
/// in `trainable()` order.
pub fn limo_gradient(
    model: &TwoTowerModel,
    task: &Task,
    episode: &Episode,
    snapshot: &Tensor64,
    weights: LossWeights,
) -> Vec<Vec<f64>> {
    let mut tape = Tape::new();
    let bound = model.params().bind(&mut tape);
    let rows: Vec<usize> = episode.support.iter().chain(&episode.query).copied().collect();
    let images = task.gather(&rows);
    let e = model.embed(&mut tape, &bound, &task.inputs(&images), &mut Mode::Eval).unwrap();
    let ns = episode.support.len();
    let support: Vec<usize> = (0..ns).collect();
    let query: Vec<usize> = (ns..rows.len()).collect();
    let labels = episode.one_hot();
    let batch = LimoBatch {
        image_emb: e.images,
        class_emb: e.classes,
        support: &support,
        labels: &labels,
        query: &query,
        snapshot,
    };
    let (total, _) = limo_loss(&mut tape, &batch, weights, TermToggles::default(), model.tau()).unwrap();
    let grads = tape.backward(total).unwrap();
    model
        .params()
        .trainable()
        .into_iter()
        .map(|id| {
            let n = model.params().get(id).numel();
            grads.wrt(bound[id]).map(<[f64]>::to_vec).unwrap_or(vec![0.0; n])
        })
        .collect()
}

/// Five-point central difference of `f` at step `h`.
fn five_point(f: &mut impl FnMut(f64) -> f64, h: f64) -> f64 {
    (-f(2.0 * h) + 8.0 * f(h) - 8.0 * f(-h) + f(-2.0 * h)) / (12.0 * h)
}

/// Numeric derivative from a ladder of step sizes: the estimate from the
/// consecutive pair that agrees best, which trades truncation against
/// roundoff without looking at the analytic value.
pub fn stable_derivative(mut f: impl FnMut(f64) -> f64) -> f64 {
    let est: Vec<f64> = (0..6).map(|k| five_point(&mut f, 3e-3 / 3f64.powi(k))).collect();
    let best = (1..est.len())
        .min_by(|&a, &b| (est[a] - est[a - 1]).abs().total_cmp(&(est[b] - est[b - 1]).abs()))
        .unwrap();
    est[best]
}

/// Worst relative error between the analytic gradient of the full objective
/// and central differences, over every trainable scalar. The denominator is
/// floored at `floor` so that vanishing components are judged on an
/// absolute scale.
pub fn limo_gradient_error(model: &mut TwoTowerModel, task: &Task, episode: &Episode, floor: f64) -> f64 {
    let weights = LossWeights::default();
    let snap = snapshot(model, task, episode);
    // move every adapter off its B = 0 start so both factors carry gradient
    let mut rng = Rng::new(0xfeed);
    for id in model.params().trainable() {
        let t = model.params_mut().get_mut(id);
        for x in t.data_mut() {
            *x += 0.3 * rng.normal();
        }
    }
    let analytic = limo_gradient(model, task, episode, &snap, weights);
    let mut worst = 0.0f64;
    for (slot, id) in model.params().trainable().into_iter().enumerate() {
        for j in 0..model.params().get(id).numel() {
            let orig = model.params().get(id).data()[j];
            let numeric = stable_derivative(|delta| {
                model.params_mut().get_mut(id).data_mut()[j] = orig + delta;
                let v = limo_total(model, task, episode, &snap, weights);
                model.params_mut().get_mut(id).data_mut()[j] = orig;
                v
            });
            let a = analytic[slot][j];
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(floor));
        }
    }
    worst
}
