use crate::arch::{ModelParams, Session};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

use super::optim::bpc;

/// `ln p(target)` for each row of a `B × V` logit matrix, in f64.
pub fn log_probs<T: Scalar>(logits: &Tensor<T>, targets: &[usize]) -> Vec<f64> {
    let (_, v) = logits.rows_cols();
    targets
        .iter()
        .enumerate()
        .map(|(r, &y)| {
            let row = &logits.data()[r * v..(r + 1) * v];
            let max = row.iter().fold(f64::NEG_INFINITY, |m, x| m.max(x.as_f64()));
            let sum: f64 = row.iter().map(|x| (x.as_f64() - max).exp()).sum();
            row[y].as_f64() - max - sum.ln()
        })
        .collect()
}

/// Softmax of each row, in f64.
pub fn probabilities<T: Scalar>(logits: &Tensor<T>) -> Vec<Vec<f64>> {
    let (b, v) = logits.rows_cols();
    (0..b)
        .map(|r| {
            let row = &logits.data()[r * v..(r + 1) * v];
            let max = row.iter().fold(f64::NEG_INFINITY, |m, x| m.max(x.as_f64()));
            let e: Vec<f64> = row.iter().map(|x| (x.as_f64() - max).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|x| x / s).collect()
        })
        .collect()
}

/// Worker threads for evaluation: `FSRNN_THREADS` if set, otherwise the
/// available parallelism.
pub fn eval_threads() -> usize {
    std::env::var("FSRNN_THREADS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

pub(crate) fn check_vocab(params_vocab: usize, tokens: &[usize]) -> Result<()> {
    match tokens.iter().find(|&&t| t >= params_vocab) {
        Some(t) => Err(Error::Data(format!(
            "token id {t} is outside the model vocabulary of {params_vocab}"
        ))),
        None => Ok(()),
    }
}

/// Per-position negative log-likelihood in nats, lane-major: entry
/// `l·(L−1) + i` scores lane `l`'s token `i+1` given its prefix. Lanes of
/// length `L = ⌊N/B⌋` run from a zero state with regularizers in eval mode.
pub fn score_positions<T: Scalar>(
    params: &ModelParams<T>,
    tokens: &[usize],
    batch: usize,
    threads: usize,
) -> Result<Vec<f64>> {
    check_vocab(params.spec.vocab, tokens)?;
    if batch == 0 || tokens.len() < 2 * batch {
        return Err(Error::Data(format!(
            "{} tokens cannot fill {batch} evaluation lanes",
            tokens.len()
        )));
    }
    let lane_len = tokens.len() / batch;
    let lanes: Vec<&[usize]> = (0..batch)
        .map(|l| &tokens[l * lane_len..(l + 1) * lane_len])
        .collect();
    let threads = threads.clamp(1, batch);
    let chunk = batch.div_ceil(threads);
    let run = |group: &[&[usize]]| -> Result<Vec<Vec<f64>>> {
        let mut session = Session::new(params, group.len());
        let mut out = vec![Vec::with_capacity(lane_len - 1); group.len()];
        for t in 0..lane_len - 1 {
            let inputs: Vec<usize> = group.iter().map(|l| l[t]).collect();
            let targets: Vec<usize> = group.iter().map(|l| l[t + 1]).collect();
            let step = session.step(&inputs)?;
            for (o, lp) in out.iter_mut().zip(log_probs(&step.logits, &targets)) {
                o.push(-lp);
            }
        }
        Ok(out)
    };
    let groups: Vec<&[&[usize]]> = lanes.chunks(chunk).collect();
    let results: Vec<Result<Vec<Vec<f64>>>> = if groups.len() == 1 {
        vec![run(groups[0])]
    } else {
        std::thread::scope(|s| {
            let handles: Vec<_> = groups.iter().map(|g| s.spawn(|| run(g))).collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("evaluation worker panicked"))
                .collect()
        })
    };
    let mut all = Vec::with_capacity(batch * (lane_len - 1));
    for r in results {
        for lane in r? {
            all.extend(lane);
        }
    }
    Ok(all)
}

/// Mean BPC over every predicted position of `tokens`.
pub fn evaluate<T: Scalar>(params: &ModelParams<T>, tokens: &[usize], batch: usize) -> Result<f64> {
    let nll = score_positions(params, tokens, batch, eval_threads())?;
    let total: f64 = nll.iter().sum();
    let mean = bpc(total / nll.len() as f64);
    if !mean.is_finite() {
        return Err(Error::NonFinite(format!("evaluation BPC is {mean}")));
    }
    Ok(mean)
}
