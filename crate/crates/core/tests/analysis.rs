use fsrnn::analysis::{anchor_loss, anchors, cell_state_gradients, gradient_probe, CellPerturbation, ProbeConfig};
use fsrnn::arch::{ArchitectureSpec, ModelParams};
use fsrnn::cells::{NormConfig, RegularizerConfig};
use fsrnn::rng::{Purpose, Rng};
use fsrnn::tensor::Tensor;

fn model() -> ModelParams<f64> {
    let spec = ArchitectureSpec::fast_slow(3, 7, 6, 9, 4)
        .with_norm(NormConfig::FULL)
        .with_regularization(RegularizerConfig {
            dropout_keep: 0.8,
            zoneout_cell: 0.3,
            zoneout_hidden: 0.1,
            training: true,
        });
    let mut p = ModelParams::<f64>::init(&spec, 12).unwrap();
    let mut rng = Rng::new(13, Purpose::Analysis);
    for t in p.tensors_mut() {
        for x in t.data_mut() {
            *x += 0.3 * (2.0 * rng.uniform() - 1.0);
        }
    }
    p
}

fn tokens() -> Vec<usize> {
    (0..400).map(|i| (i * i + 3 * i / 2) % 9).collect()
}

#[test]
fn probe_gradients_match_directional_finite_differences() {
    let p = model();
    let toks = tokens();
    let windows: Vec<&[usize]> = vec![&toks[10..41], &toks[100..131], &toks[250..281]];
    let grads = cell_state_gradients(&p, &windows).unwrap();
    let mut rng = Rng::new(14, Purpose::Analysis);
    let eps = 1e-5;
    for _ in 0..10 {
        let layer = rng.below(grads.len());
        let step = rng.below(grads[layer].len());
        let g = &grads[layer][step];
        let d: Vec<f64> = (0..g.len()).map(|_| 2.0 * rng.uniform() - 1.0).collect();
        let analytic: f64 = g.data().iter().zip(&d).map(|(a, b)| a * b).sum();
        let at = |s: f64| {
            let delta = Tensor::new(g.shape(), d.iter().map(|x| s * x).collect()).unwrap();
            let pert = CellPerturbation { layer, step, delta: &delta };
            anchor_loss(&p, &windows, Some(pert)).unwrap()
        };
        let numeric = (at(eps) - at(-eps)) / (2.0 * eps);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-9);
        assert!(rel < 1e-4, "layer {layer} step {step}: {analytic} vs {numeric}");
    }
}

#[test]
fn single_anchor_probe_is_the_direct_gradient() {
    let p = model();
    let toks = tokens();
    let mut cfg = ProbeConfig::new(6, 1, 21);
    cfg.window = 20;
    let report = gradient_probe(&p, &toks, &cfg).unwrap();
    assert_eq!(report.samples(), 1);
    let a = anchors(cfg.window - 1, toks.len() - 1, 1, 21)[0];
    let window = &toks[a + 1 - cfg.window..a + 2];
    let grads = cell_state_gradients(&p, &[window]).unwrap();
    for (layer, steps) in grads.iter().enumerate() {
        for lag in 0..=6 {
            let g = &steps[steps.len() - 1 - lag];
            let norm = g.data().iter().map(|x| x * x).sum::<f64>().sqrt();
            assert_eq!(report.norms[layer][lag][0], norm);
        }
    }
    // the first Fast cell feeds the current output through the chain
    assert!(report.mean(0, 0) > 0.0);
}
