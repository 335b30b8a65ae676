use std::path::Path;

use crate::arch::{self, ModelParams, ModelState, Perturbation};
use crate::cells::Noise;
use crate::error::{Error, Result};
use crate::report::{g12, write_csv};
use crate::rng::{Purpose, Rng};
use crate::tensor::{Graph, Scalar, Tensor};
use crate::training::check_vocab;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeConfig {
    /// Steps run before each anchor, anchor included. Must exceed `max_lag`.
    pub window: usize,
    pub max_lag: usize,
    pub samples: usize,
    /// Anchors processed together as lanes.
    pub lanes: usize,
    pub seed: u64,
}

impl ProbeConfig {
    pub fn new(max_lag: usize, samples: usize, seed: u64) -> Self {
        Self {
            window: max_lag + 51,
            max_lag,
            samples,
            lanes: 50,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeReport {
    pub labels: Vec<String>,
    /// `norms[layer][lag][sample]` = ‖∂L_t/∂c_{t−lag}‖ for that anchor.
    pub norms: Vec<Vec<Vec<f64>>>,
}

impl ProbeReport {
    pub fn samples(&self) -> usize {
        self.norms.first().and_then(|l| l.first()).map_or(0, |s| s.len())
    }

    pub fn mean(&self, layer: usize, lag: usize) -> f64 {
        let s = &self.norms[layer][lag];
        s.iter().sum::<f64>() / s.len() as f64
    }

    pub fn layer(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn rows(&self) -> Vec<Vec<String>> {
        let mut rows = Vec::new();
        for (i, label) in self.labels.iter().enumerate() {
            for lag in 0..self.norms[i].len() {
                rows.push(vec![
                    label.clone(),
                    lag.to_string(),
                    g12(self.mean(i, lag)),
                    self.samples().to_string(),
                ]);
            }
        }
        rows
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_csv(path, "layer,lag,mean_norm,samples", &self.rows())
    }
}

/// A perturbation of one layer's cell state at one step of a window.
#[derive(Clone, Copy, Debug)]
pub struct CellPerturbation<'a, T> {
    pub layer: usize,
    pub step: usize,
    pub delta: &'a Tensor<T>,
}

/// Loss at the last step of each lane window, summed over lanes, with
/// regularizers in eval mode. `windows[l]` holds the inputs followed by the
/// final target.
pub fn anchor_loss<T: Scalar>(
    params: &ModelParams<T>,
    windows: &[&[usize]],
    perturbation: Option<CellPerturbation<'_, T>>,
) -> Result<f64> {
    let (g, loss, _) = anchor_graph(params, windows, perturbation)?;
    Ok(g.value(loss).data()[0].as_f64() * windows.len() as f64)
}

/// Gradient of the summed anchor losses with respect to every analysis
/// layer's cell state at every step: `out[layer][step]` is `B × n`.
pub fn cell_state_gradients<T: Scalar>(
    params: &ModelParams<T>,
    windows: &[&[usize]],
) -> Result<Vec<Vec<Tensor<T>>>> {
    let (mut g, loss, cells) = anchor_graph(params, windows, None)?;
    g.backward(loss, Some(&Tensor::scalar(T::of(windows.len() as f64))))?;
    cells
        .into_iter()
        .map(|layer| {
            layer
                .into_iter()
                .map(|v| {
                    let value = g.value(v);
                    let grad = match g.grad(v) {
                        Some(gr) => gr.to_vec(),
                        None => vec![T::zero(); value.len()],
                    };
                    Tensor::new(value.shape(), grad)
                })
                .collect()
        })
        .collect()
}

type AnchorGraph<T> = (Graph<T>, crate::tensor::Var, Vec<Vec<crate::tensor::Var>>);

fn anchor_graph<T: Scalar>(
    params: &ModelParams<T>,
    windows: &[&[usize]],
    perturbation: Option<CellPerturbation<'_, T>>,
) -> Result<AnchorGraph<T>> {
    let len = windows.first().map_or(0, |w| w.len());
    if len < 2 || windows.iter().any(|w| w.len() != len) {
        return Err(Error::Config("anchor windows must share a length of at least 2".into()));
    }
    let spec = &params.spec;
    let mut g = Graph::new();
    g.retain_all_grads(true);
    let vars = params.bind(&mut g);
    let state = ModelState::<T>::zeros(spec, windows.len());
    let mut sv = state.detach_into(&mut g);
    let reg = spec.regularization.eval();
    let mut noise = Noise::new(0);
    let layers = spec.layer_labels().len();
    let mut cells = vec![Vec::with_capacity(len - 1); layers];
    let mut logits = None;
    for t in 0..len - 1 {
        let tokens: Vec<usize> = windows.iter().map(|w| w[t]).collect();
        let p = perturbation.filter(|p| p.step == t).map(|p| Perturbation {
            layer: p.layer,
            delta: p.delta,
        });
        let out = arch::step(&mut g, spec, &vars, &sv, &tokens, &reg, &mut noise, p.as_ref())?;
        for (dst, c) in cells.iter_mut().zip(out.cell_states) {
            dst.push(c);
        }
        sv = out.state;
        logits = Some(out.logits);
    }
    let targets: Vec<usize> = windows.iter().map(|w| w[len - 1]).collect();
    let (loss, _) = g.softmax_xent(logits.expect("at least one step"), &targets)?;
    Ok((g, loss, cells))
}

/// Anchor positions spread evenly over `[lo, hi)` with a seeded jitter
/// inside each stride.
pub fn anchors(lo: usize, hi: usize, samples: usize, seed: u64) -> Vec<usize> {
    let mut rng = Rng::new(seed, Purpose::Analysis);
    let span = (hi - lo) as f64;
    let stride = span / samples as f64;
    (0..samples)
        .map(|i| lo + ((i as f64 + rng.uniform()) * stride).floor().min(span - 1.0) as usize)
        .collect()
}

/// Average ‖∂L_t/∂c_{t−k}‖ per layer and lag over anchors spread through
/// `tokens`.
pub fn gradient_probe<T: Scalar>(
    params: &ModelParams<T>,
    tokens: &[usize],
    cfg: &ProbeConfig,
) -> Result<ProbeReport> {
    if cfg.window <= cfg.max_lag {
        return Err(Error::Config(format!(
            "probe window {} must exceed max lag {}",
            cfg.window, cfg.max_lag
        )));
    }
    if cfg.samples == 0 || cfg.lanes == 0 {
        return Err(Error::Config("probe needs at least one sample and lane".into()));
    }
    check_vocab(params.spec.vocab, tokens)?;
    // anchor a reads inputs a−window+1 ..= a and target a+1
    if tokens.len() < cfg.window + 2 {
        return Err(Error::Data(format!(
            "probe window {} needs more than {} tokens",
            cfg.window,
            tokens.len()
        )));
    }
    let anchor_list = anchors(cfg.window - 1, tokens.len() - 1, cfg.samples, cfg.seed);
    let labels = params.spec.layer_labels();
    let mut norms = vec![vec![Vec::with_capacity(cfg.samples); cfg.max_lag + 1]; labels.len()];
    for chunk in anchor_list.chunks(cfg.lanes) {
        let windows: Vec<&[usize]> = chunk
            .iter()
            .map(|&a| &tokens[a + 1 - cfg.window..a + 2])
            .collect();
        let grads = cell_state_gradients(params, &windows)?;
        for (layer, steps) in grads.iter().enumerate() {
            let last = steps.len() - 1;
            for lag in 0..=cfg.max_lag {
                let g = &steps[last - lag];
                for lane in 0..windows.len() {
                    let n: f64 = g.row(lane).iter().map(|x| x.as_f64().powi(2)).sum::<f64>().sqrt();
                    norms[layer][lag].push(n);
                }
            }
        }
    }
    Ok(ProbeReport { labels, norms })
}

/// Fraction of paired bootstrap resamples of the anchors in which the mean of
/// `target` exceeds the mean of every series in `others`.
pub fn bootstrap_dominance(target: &[f64], others: &[&[f64]], resamples: usize, seed: u64) -> f64 {
    let n = target.len();
    if n == 0 || resamples == 0 {
        return 0.0;
    }
    let mut rng = Rng::new(seed, Purpose::Analysis);
    let mut wins = 0usize;
    for _ in 0..resamples {
        let idx: Vec<usize> = (0..n).map(|_| rng.below(n)).collect();
        let mean = |s: &[f64]| idx.iter().map(|&i| s[i]).sum::<f64>() / n as f64;
        let t = mean(target);
        if others.iter().all(|o| t > mean(o)) {
            wins += 1;
        }
    }
    wins as f64 / resamples as f64
}

fn ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len(), "spearman needs equal lengths");
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    sxy / (sxx * syy).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::ArchitectureSpec;
    use crate::cells::RegularizerConfig;

    fn model() -> ModelParams<f64> {
        let spec = ArchitectureSpec::fast_slow(2, 5, 4, 7, 3);
        ModelParams::init(&spec, 21).unwrap()
    }

    #[test]
    fn report_shape() {
        let p = model();
        let toks: Vec<usize> = (0..300).map(|i| (i * 5 + i / 7) % 7).collect();
        let mut cfg = ProbeConfig::new(6, 9, 1);
        cfg.lanes = 4;
        let r = gradient_probe(&p, &toks, &cfg).unwrap();
        assert_eq!(r.samples(), 9);
        assert_eq!(r.rows().len(), 3 * 7);
        assert!(r.norms.iter().flatten().flatten().all(|&x| x >= 0.0 && x.is_finite()));
        assert_eq!(r, gradient_probe(&p, &toks, &cfg).unwrap());
    }

    #[test]
    fn lane_batching_does_not_change_norms() {
        let p = model();
        let toks: Vec<usize> = (0..300).map(|i| (i * 3 + i / 5) % 7).collect();
        let mut a = ProbeConfig::new(4, 6, 2);
        a.lanes = 1;
        let mut b = a;
        b.lanes = 6;
        let (ra, rb) = (gradient_probe(&p, &toks, &a).unwrap(), gradient_probe(&p, &toks, &b).unwrap());
        for (x, y) in ra.norms.iter().flatten().flatten().zip(rb.norms.iter().flatten().flatten()) {
            assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()));
        }
    }

    #[test]
    fn window_must_exceed_lag() {
        let p = model();
        let mut cfg = ProbeConfig::new(5, 2, 0);
        cfg.window = 5;
        assert!(gradient_probe(&p, &[0; 100], &cfg).is_err());
    }

    #[test]
    fn copied_cell_has_constant_norm() {
        // zoneout 1 on c and no recurrent weights: the only route from an
        // earlier c to the loss is the identity copy chain.
        let spec = ArchitectureSpec::sequential(1, 4, 5, 2).with_regularization(RegularizerConfig {
            dropout_keep: 1.0,
            zoneout_cell: 1.0,
            zoneout_hidden: 0.0,
            training: true,
        });
        let mut p = ModelParams::<f64>::init(&spec, 3).unwrap();
        p.cells[0].w_h.data_mut().fill(0.0);
        let toks: Vec<usize> = (0..200).map(|i| i % 5).collect();
        let r = gradient_probe(&p, &toks, &ProbeConfig::new(10, 5, 0)).unwrap();
        // the carried c_t only reaches the loss through later steps
        assert_eq!(r.mean(0, 0), 0.0);
        assert!(r.mean(0, 1) > 0.0);
        for lag in 2..=10 {
            assert_eq!(r.norms[0][lag], r.norms[0][1]);
        }
    }

    #[test]
    fn bootstrap_and_spearman() {
        let hi = vec![2.0; 50];
        let lo = vec![1.0; 50];
        assert_eq!(bootstrap_dominance(&hi, &[&lo], 200, 1), 1.0);
        assert_eq!(bootstrap_dominance(&lo, &[&hi], 200, 1), 0.0);
        let x: Vec<f64> = (0..10).map(f64::from).collect();
        let y: Vec<f64> = x.iter().map(|v| -v * v).collect();
        assert!((spearman(&x, &y) + 1.0).abs() < 1e-15);
        assert!((spearman(&[1.0, 2.0, 2.0, 3.0], &[1.0, 2.0, 2.0, 3.0]) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn anchors_are_spread_and_seeded() {
        let a = anchors(10, 1010, 100, 4);
        assert_eq!(a, anchors(10, 1010, 100, 4));
        assert_ne!(a, anchors(10, 1010, 100, 5));
        for (i, &x) in a.iter().enumerate() {
            assert!((10 + i * 10..10 + (i + 1) * 10).contains(&x));
        }
    }
}
