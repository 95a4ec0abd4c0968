use super::{LossReport, LossWeights, TermToggles};
use crate::autodiff::{Tape, Tensor, Var};
use crate::{Error, Result, Scalar};

const UNIT_NORM_TOL: f64 = 1e-6;

fn check_unit_rows<T: Scalar>(tape: &Tape<T>, v: Var, what: &str) -> Result<()> {
    let (_, c) = tape.dims(v);
    for (i, row) in tape.value(v).chunks_exact(c).enumerate() {
        let norm = row.iter().map(|x| *x * *x).sum::<T>().sqrt().as_f64();
        if (norm - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::Contract(format!("{what} row {i} has norm {norm}, expected 1")));
        }
    }
    Ok(())
}

/// Cosine logits `l_{i,k} = f_i · t_k` between unit-norm image and class rows.
pub fn logits<T: Scalar>(tape: &mut Tape<T>, image_emb: Var, class_emb: Var) -> Result<Var> {
    check_unit_rows(tape, image_emb, "image embedding")?;
    check_unit_rows(tape, class_emb, "class embedding")?;
    tape.matmul_nt(image_emb, class_emb)
}

pub fn posterior<T: Scalar>(tape: &mut Tape<T>, logits: Var, tau: T) -> Result<Var> {
    tape.softmax_rows(logits, tau)
}

/// Mean negative log-likelihood of the one-hot `labels` under `post`.
pub fn cross_entropy<T: Scalar>(tape: &mut Tape<T>, post: Var, labels: &Tensor<T>) -> Result<Var> {
    let (n, k) = tape.dims(post);
    if (labels.rows(), labels.cols()) != (n, k) {
        return Err(Error::Dimension {
            op: "cross_entropy",
            left: vec![n, k],
            right: labels.shape().to_vec(),
        });
    }
    if n == 0 {
        return Err(Error::Contract("cross-entropy over an empty support set".into()));
    }
    for i in 0..n {
        let row = labels.row(i);
        let ones = row.iter().filter(|x| **x == T::one()).count();
        let zeros = row.iter().filter(|x| **x == T::zero()).count();
        if ones != 1 || ones + zeros != k {
            return Err(Error::Label(format!("support label row {i} is not one-hot")));
        }
    }
    let z = tape.constant(labels);
    let lp = tape.log(post)?;
    let picked = tape.mul(z, lp)?;
    let s = tape.sum(picked);
    Ok(tape.scale(s, -T::one() / T::lit(n as f64)))
}

fn require_rows<T: Scalar>(tape: &Tape<T>, post: Var, what: &str) -> Result<usize> {
    let (n, _) = tape.dims(post);
    if n == 0 {
        return Err(Error::Contract(format!("{what} needs a non-empty query set")));
    }
    Ok(n)
}

/// `−(1/|Q|) Σ_i Σ_k p_{i,k} ln p_{i,k}` over the query posterior rows.
pub fn conditional_entropy<T: Scalar>(tape: &mut Tape<T>, post: Var) -> Result<Var> {
    let n = require_rows(tape, post, "conditional entropy")?;
    let lp = tape.log(post)?;
    let plp = tape.mul(post, lp)?;
    let s = tape.sum(plp);
    Ok(tape.scale(s, -T::one() / T::lit(n as f64)))
}

/// `−Σ_k p̄_k ln p̄_k` with `p̄` the mean query posterior.
pub fn marginal_entropy<T: Scalar>(tape: &mut Tape<T>, post: Var) -> Result<Var> {
    require_rows(tape, post, "marginal entropy")?;
    let pbar = tape.mean_rows(post)?;
    let lp = tape.log(pbar)?;
    let plp = tape.mul(pbar, lp)?;
    let s = tape.sum(plp);
    Ok(tape.neg(s))
}

/// `λ Σ_i KL(p_i ‖ ŷ_i)`, summed (not averaged) over the query rows. The
/// snapshot enters as a constant.
pub fn kl_text<T: Scalar>(tape: &mut Tape<T>, post: Var, snapshot: &Tensor<T>, lambda: T) -> Result<Var> {
    let (n, k) = tape.dims(post);
    if (snapshot.rows(), snapshot.cols()) != (n, k) {
        return Err(Error::Contract(format!(
            "KL snapshot shape {:?} does not match posterior {n}×{k}",
            snapshot.shape()
        )));
    }
    let y = tape.constant(snapshot);
    let ly = tape.log(y)?;
    let lp = tape.log(post)?;
    let ratio = tape.sub(lp, ly)?;
    let terms = tape.mul(post, ratio)?;
    let s = tape.sum(terms);
    Ok(tape.scale(s, lambda))
}

/// Inputs of one objective evaluation. `support` and `query` index rows of
/// `image_emb`; `labels` is one-hot with one row per support index and
/// `snapshot` holds the zero-shot posterior with one row per query index.
pub struct LimoBatch<'a, T> {
    pub image_emb: Var,
    pub class_emb: Var,
    pub support: &'a [usize],
    pub labels: &'a Tensor<T>,
    pub query: &'a [usize],
    pub snapshot: &'a Tensor<T>,
}

/// Full objective `CE − (λ_ent·H(C) − λ_cond·H(C|X)) + λ_text·KL`.
///
/// With the CE toggle off (or an empty support set, a diagnostic mode) the
/// cross-entropy is reported as zero and left out of the graph. The KL term
/// is likewise dropped, and reported as zero, when its effective weight is 0.
pub fn limo_loss<T: Scalar>(
    tape: &mut Tape<T>,
    batch: &LimoBatch<'_, T>,
    weights: LossWeights,
    toggles: TermToggles,
    tau: T,
) -> Result<(Var, LossReport)> {
    weights.validate()?;
    if let Some(i) = batch.support.iter().find(|i| batch.query.contains(i)) {
        return Err(Error::Episode(format!("row {i} is in both support and query sets")));
    }
    let w = toggles.apply(weights);
    let l = logits(tape, batch.image_emb, batch.class_emb)?;
    let p = posterior(tape, l, tau)?;

    let ce = if toggles.ce && !batch.support.is_empty() {
        let ps = tape.gather_rows(p, batch.support)?;
        Some(cross_entropy(tape, ps, batch.labels)?)
    } else {
        None
    };
    let pq = tape.gather_rows(p, batch.query)?;
    let cond = conditional_entropy(tape, pq)?;
    let marg = marginal_entropy(tape, pq)?;
    let kl = if w.lambda_text > 0.0 {
        Some(kl_text(tape, pq, batch.snapshot, T::one())?)
    } else {
        None
    };

    let ent_term = tape.scale(marg, T::lit(-w.lambda_ent));
    let cond_term = tape.scale(cond, T::lit(w.lambda_cond));
    let mut total = match ce {
        Some(ce) => tape.add(ce, ent_term)?,
        None => ent_term,
    };
    total = tape.add(total, cond_term)?;
    if let Some(kl) = kl {
        let kl_term = tape.scale(kl, T::lit(w.lambda_text));
        total = tape.add(total, kl_term)?;
    }

    let report = LossReport {
        ce: ce.map_or(0.0, |v| tape.scalar(v).as_f64()),
        cond_entropy: tape.scalar(cond).as_f64(),
        marg_entropy: tape.scalar(marg).as_f64(),
        kl_text: kl.map_or(0.0, |v| tape.scalar(v).as_f64()),
        total: tape.scalar(total).as_f64(),
        weights: w,
        tau: tau.as_f64(),
    };
    Ok((total, report))
}
