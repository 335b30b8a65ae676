use std::path::Path;

use crate::arch::{ModelParams, Session};
use crate::error::{Error, Result};
use crate::report::{g12, write_csv};
use crate::tensor::Scalar;
use crate::training::check_vocab;

/// `(1/n) Σ_i (c_{t,i} − c_{t−1,i})²` averaged over consecutive pairs.
pub fn change_rate_of_trace(trace: &[Vec<f64>]) -> Result<f64> {
    if trace.len() < 2 {
        return Err(Error::Config("a change rate needs at least 2 steps".into()));
    }
    let pairs = trace.windows(2).map(|w| mean_sq_diff(&w[0], &w[1]));
    Ok(pairs.sum::<f64>() / (trace.len() - 1) as f64)
}

fn mean_sq_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (y - x).powi(2)).sum::<f64>() / a.len() as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChangeRateReport {
    pub labels: Vec<String>,
    pub values: Vec<f64>,
}

impl ChangeRateReport {
    pub fn value(&self, label: &str) -> Option<f64> {
        self.labels.iter().position(|l| l == label).map(|i| self.values[i])
    }

    pub fn rows(&self) -> Vec<Vec<String>> {
        self.labels
            .iter()
            .zip(&self.values)
            .map(|(l, v)| vec![l.clone(), g12(*v)])
            .collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_csv(path, "layer,value", &self.rows())
    }
}

/// Runs the model in eval mode over the first `steps` tokens from a zero
/// state and reports each analysis layer's mean squared per-unit change.
pub fn cell_change_rate<T: Scalar>(
    params: &ModelParams<T>,
    tokens: &[usize],
    steps: usize,
) -> Result<ChangeRateReport> {
    if steps < 2 {
        return Err(Error::Config("a change rate needs at least 2 steps".into()));
    }
    if tokens.len() < steps {
        return Err(Error::Data(format!("{steps} steps requested from {} tokens", tokens.len())));
    }
    check_vocab(params.spec.vocab, tokens)?;
    let labels = params.spec.layer_labels();
    let mut session = Session::new(params, 1);
    let mut prev: Option<Vec<Vec<f64>>> = None;
    let mut sums = vec![0.0; labels.len()];
    for &tok in &tokens[..steps] {
        let out = session.step(&[tok])?;
        let now: Vec<Vec<f64>> = out.cell_states.iter().map(|c| c.to_f64_vec()).collect();
        if let Some(p) = &prev {
            for ((s, a), b) in sums.iter_mut().zip(p).zip(&now) {
                *s += mean_sq_diff(a, b);
            }
        }
        prev = Some(now);
    }
    let values = sums.into_iter().map(|s| s / (steps - 1) as f64).collect();
    Ok(ChangeRateReport { labels, values })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::ArchitectureSpec;
    use crate::cells::RegularizerConfig;

    #[test]
    fn hand_trace() {
        let r = change_rate_of_trace(&[vec![0.0, 0.0], vec![1.0, -1.0]]).unwrap();
        assert_eq!(r, 1.0);
        assert!(change_rate_of_trace(&[vec![1.0]]).is_err());
    }

    #[test]
    fn frozen_state_is_zero() {
        let spec = ArchitectureSpec::fast_slow(3, 5, 4, 6, 3).with_regularization(RegularizerConfig {
            dropout_keep: 1.0,
            zoneout_cell: 1.0,
            zoneout_hidden: 1.0,
            training: true,
        });
        let p = ModelParams::<f64>::init(&spec, 8).unwrap();
        let toks: Vec<usize> = (0..50).map(|i| i % 6).collect();
        let r = cell_change_rate(&p, &toks, 50).unwrap();
        assert_eq!(r.labels, ["Fast-1", "Fast-2", "Fast-3", "Slow"]);
        assert!(r.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sequential_reports_first_cell() {
        let spec = ArchitectureSpec::sequential(3, 5, 6, 3);
        let p = ModelParams::<f64>::init(&spec, 8).unwrap();
        let toks: Vec<usize> = (0..50).map(|i| (i * 7) % 6).collect();
        let r = cell_change_rate(&p, &toks, 40).unwrap();
        assert_eq!(r.labels, ["Sequential-1"]);
        assert!(r.values[0] > 0.0);
    }
}
