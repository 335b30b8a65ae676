use std::path::Path;

use crate::arch::{ModelParams, Session};
use crate::error::{Error, Result};
use crate::report::{g12, write_csv};
use crate::tensor::Scalar;
use crate::training::{bpc, check_vocab};

/// Drift of the averaged distribution's total mass tolerated before it is
/// renormalized.
pub const SUM_TOLERANCE: f64 = 1e-12;

/// `ln Σ_m exp(x_m)` without overflow.
fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

fn log_softmax_row<T: Scalar>(row: &[T]) -> Vec<f64> {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, x| m.max(x.as_f64()));
    let lse = row.iter().map(|x| (x.as_f64() - max).exp()).sum::<f64>().ln();
    row.iter().map(|x| x.as_f64() - max - lse).collect()
}

/// Averages the models' next-symbol distributions at every position and
/// scores the target under the average. Returns `(bpc, worst mass drift)`.
pub fn ensemble_eval<T: Scalar>(
    models: &[&ModelParams<T>],
    tokens: &[usize],
    batch: usize,
) -> Result<(f64, f64)> {
    let Some(first) = models.first() else {
        return Err(Error::Config("an ensemble needs at least one model".into()));
    };
    let vocab = first.spec.vocab;
    if models.iter().any(|m| m.spec.vocab != vocab) {
        return Err(Error::Data("ensemble members disagree on the vocabulary size".into()));
    }
    check_vocab(vocab, tokens)?;
    if batch == 0 || tokens.len() < 2 * batch {
        return Err(Error::Data(format!("{} tokens cannot fill {batch} lanes", tokens.len())));
    }
    let lane = tokens.len() / batch;
    let mut sessions: Vec<Session<T>> = models.iter().map(|m| Session::new(m, batch)).collect();
    let ln_m = (models.len() as f64).ln();
    let mut nll = vec![Vec::with_capacity(lane - 1); batch];
    let mut worst_drift = 0.0f64;
    for t in 0..lane - 1 {
        let inputs: Vec<usize> = (0..batch).map(|l| tokens[l * lane + t]).collect();
        let per_model: Vec<Vec<Vec<f64>>> = sessions
            .iter_mut()
            .map(|s| {
                let out = s.step(&inputs)?;
                Ok((0..batch).map(|r| log_softmax_row(out.logits.row(r))).collect())
            })
            .collect::<Result<_>>()?;
        for l in 0..batch {
            let y = tokens[l * lane + t + 1];
            // log of the averaged distribution, per symbol
            let avg: Vec<f64> = (0..vocab)
                .map(|v| {
                    let lps: Vec<f64> = per_model.iter().map(|m| m[l][v]).collect();
                    log_sum_exp(&lps) - ln_m
                })
                .collect();
            let mass: f64 = avg.iter().map(|x| x.exp()).sum();
            let drift = (mass - 1.0).abs();
            worst_drift = worst_drift.max(drift);
            let lp = if drift > SUM_TOLERANCE { avg[y] - mass.ln() } else { avg[y] };
            nll[l].push(-lp);
        }
    }
    // lane-major summation, matching single-model evaluation
    let total: f64 = nll.iter().flatten().sum();
    let result = bpc(total / (batch * (lane - 1)) as f64);
    if !result.is_finite() {
        return Err(Error::NonFinite(format!("ensemble BPC is {result}")));
    }
    Ok((result, worst_drift))
}

pub fn write_ensemble_csv(path: &Path, models: &[String], bpc: f64) -> Result<()> {
    write_csv(path, "models,bpc", &[vec![models.join(";"), g12(bpc)]])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::ArchitectureSpec;
    use crate::training::evaluate;

    fn tokens() -> Vec<usize> {
        (0..600).map(|i| (i * i / 3 + i) % 6).collect()
    }

    #[test]
    fn single_model_equals_evaluation() {
        let spec = ArchitectureSpec::fast_slow(2, 5, 4, 6, 3);
        let p = ModelParams::<f64>::init(&spec, 3).unwrap();
        let (e, drift) = ensemble_eval(&[&p], &tokens(), 2).unwrap();
        assert_eq!(e, evaluate(&p, &tokens(), 2).unwrap());
        assert!(drift < SUM_TOLERANCE);
    }

    #[test]
    fn duplicates_equal_single() {
        let spec = ArchitectureSpec::stacked(2, 5, 6, 3);
        let p = ModelParams::<f64>::init(&spec, 3).unwrap();
        let single = evaluate(&p, &tokens(), 1).unwrap();
        let (e, _) = ensemble_eval(&[&p, &p], &tokens(), 1).unwrap();
        assert!((e - single).abs() < 1e-9);
    }

    #[test]
    fn average_of_two_models_is_a_distribution() {
        let spec = ArchitectureSpec::stacked(2, 5, 6, 3);
        let a = ModelParams::<f64>::init(&spec, 3).unwrap();
        let b = ModelParams::<f64>::init(&spec, 4).unwrap();
        let (e, drift) = ensemble_eval(&[&a, &b], &tokens(), 2).unwrap();
        assert!(drift < SUM_TOLERANCE, "{drift}");
        let worst = evaluate(&a, &tokens(), 2).unwrap().max(evaluate(&b, &tokens(), 2).unwrap());
        // the log loss is convex, so the mixture never loses to both members
        assert!(e <= worst + 1e-12);
    }

    #[test]
    fn vocab_mismatch_rejected() {
        let a = ModelParams::<f64>::init(&ArchitectureSpec::stacked(1, 4, 6, 2), 1).unwrap();
        let b = ModelParams::<f64>::init(&ArchitectureSpec::stacked(1, 4, 7, 2), 1).unwrap();
        assert!(matches!(ensemble_eval(&[&a, &b], &tokens(), 1), Err(Error::Data(_))));
    }
}
