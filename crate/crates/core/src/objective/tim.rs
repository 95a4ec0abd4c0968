//! Vision-only transductive information maximization, computed directly in
//! `f64` without the tape.
//!
//! The classifier rows play the role of fixed class weights. This is the
//! objective the full loss collapses to when the text anchor is off and the
//! class embeddings are frozen, and serves as an independent reference for it.

use super::LossWeights;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimTerms {
    pub ce: f64,
    pub cond_entropy: f64,
    pub marg_entropy: f64,
    pub total: f64,
}

fn clamped_ln(p: f64) -> f64 {
    p.max(1e-12).ln()
}

fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
    scores.iter().map(|s| (s - lse).exp()).collect()
}

/// `features` is `n×d` row-major, `classifier` is `K×d`. Support labels are
/// class indices parallel to `support`. `lambda_text` is ignored.
#[allow(clippy::too_many_arguments)]
pub fn tim_objective(
    features: &[f64],
    classifier: &[f64],
    dim: usize,
    support: &[usize],
    labels: &[usize],
    query: &[usize],
    weights: &LossWeights,
    tau: f64,
) -> TimTerms {
    let k = classifier.len() / dim;
    let probs = |i: usize| {
        let f = &features[i * dim..(i + 1) * dim];
        let scores: Vec<f64> = classifier
            .chunks_exact(dim)
            .map(|w| w.iter().zip(f).map(|(a, b)| a * b).sum::<f64>() / tau)
            .collect();
        softmax(&scores)
    };

    let ce = if support.is_empty() {
        0.0
    } else {
        -support
            .iter()
            .zip(labels)
            .map(|(&i, &y)| clamped_ln(probs(i)[y]))
            .sum::<f64>()
            / support.len() as f64
    };

    let mut marginal = vec![0.0; k];
    let mut cond = 0.0;
    for &i in query {
        let p = probs(i);
        cond -= p.iter().map(|v| v * clamped_ln(*v)).sum::<f64>();
        for (m, v) in marginal.iter_mut().zip(&p) {
            *m += v;
        }
    }
    let nq = query.len() as f64;
    cond /= nq;
    let marg = -marginal
        .iter()
        .map(|m| {
            let m = m / nq;
            m * clamped_ln(m)
        })
        .sum::<f64>();

    TimTerms {
        ce,
        cond_entropy: cond,
        marg_entropy: marg,
        total: ce - weights.lambda_ent * marg + weights.lambda_cond * cond,
    }
}
