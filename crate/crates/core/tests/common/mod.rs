//! Scalar-loop reference models and shared end-to-end checks.
#![allow(dead_code)]

use fsrnn::arch::{ArchKind, ArchitectureSpec, ModelParams, ModelState, Session};
use fsrnn::cells::{lstm_step, CellShape, LstmParams, LstmState, NormConfig, Noise, RegularizerConfig, StateVars, LAYER_NORM_EPS};
use fsrnn::data::{synthetic_text, Corpus, Split, SplitRule, TokenMode, Window};
use fsrnn::error::Result;
use fsrnn::rng::{Purpose, Rng};
use fsrnn::tensor::{Graph, Tensor};
use fsrnn::training::{window_gradients, window_loss, AdamConfig, MetricRow, Precision, ScheduleKind, TrainConfig, TrainHooks, Trainer};

pub const DEMO_REG: RegularizerConfig = RegularizerConfig {
    dropout_keep: 0.7,
    zoneout_cell: 0.3,
    zoneout_hidden: 0.1,
    training: false,
};

#[derive(Clone)]
pub struct S {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

fn sigma(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn ln(x: &[f64], gain: &[f64], bias: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let sd = (var + LAYER_NORM_EPS).sqrt();
    (0..x.len()).map(|i| (x[i] - mean) / sd * gain[i] + bias[i]).collect()
}

pub fn cell(p: &LstmParams<f64>, s: &S, x: Option<&[f64]>, reg: &RegularizerConfig, stored_norm: bool) -> S {
    let n = p.shape.n_out;
    let mut pre = vec![0.0; 4 * n];
    for (row, v) in pre.iter_mut().enumerate() {
        for k in 0..n {
            *v += p.w_h.data()[row * n + k] * s.h[k];
        }
        if let (Some(w), Some(x)) = (&p.w_x, x) {
            for (k, xk) in x.iter().enumerate() {
                *v += w.data()[row * x.len() + k] * xk;
            }
        }
    }
    let b = p.b.data();
    let mut gates = Vec::new();
    for q in 0..4 {
        let slice = &pre[q * n..(q + 1) * n];
        let z: Vec<f64> = match &p.gate_norm {
            Some(norms) => ln(slice, norms[q].gain.data(), norms[q].bias.data())
                .iter()
                .zip(&b[q * n..(q + 1) * n])
                .map(|(a, b)| a + b)
                .collect(),
            None => slice.iter().zip(&b[q * n..(q + 1) * n]).map(|(a, b)| a + b).collect(),
        };
        gates.push(z);
    }
    let mut c_new: Vec<f64> = (0..n)
        .map(|i| sigma(gates[0][i]) * s.c[i] + sigma(gates[1][i]) * gates[3][i].tanh())
        .collect();
    let c_out = match &p.cell_norm {
        Some(l) => ln(&c_new, l.gain.data(), l.bias.data()),
        None => c_new.clone(),
    };
    if stored_norm {
        c_new = c_out.clone();
    }
    let h_new: Vec<f64> = (0..n).map(|i| sigma(gates[2][i]) * c_out[i].tanh()).collect();
    let (zc, zh) = (reg.zoneout_cell, reg.zoneout_hidden);
    S {
        c: (0..n).map(|i| zc * s.c[i] + (1.0 - zc) * c_new[i]).collect(),
        h: (0..n).map(|i| zh * s.h[i] + (1.0 - zh) * h_new[i]).collect(),
    }
}

/// One step of the whole model; returns logits and the analysis cell states.
pub fn model_step(p: &ModelParams<f64>, state: &mut [S], tok: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    let spec = &p.spec;
    let reg = spec.regularization;
    let sn = spec.norm.normalize_stored_cell;
    let e = spec.embed_dim;
    let emb = &p.embedding.data()[tok * e..(tok + 1) * e];
    let mut cells = Vec::new();
    let top = match spec.kind {
        ArchKind::FastSlow => {
            let k = spec.cells;
            let f1 = cell(&p.cells[0], &state[0], Some(emb), &reg, sn);
            let slow = cell(&p.cells[k], &state[1], Some(&f1.h), &reg, sn);
            let mut fast = cell(&p.cells[1], &f1, Some(&slow.h), &reg, sn);
            cells.push(f1.c.clone());
            cells.push(fast.c.clone());
            for i in 2..k {
                fast = cell(&p.cells[i], &fast, None, &reg, sn);
                cells.push(fast.c.clone());
            }
            cells.push(slow.c.clone());
            state[0] = fast.clone();
            state[1] = slow;
            fast.h
        }
        ArchKind::Stacked => {
            let mut below = emb.to_vec();
            for i in 0..spec.cells {
                state[i] = cell(&p.cells[i], &state[i], Some(&below), &reg, sn);
                cells.push(state[i].c.clone());
                below = state[i].h.clone();
            }
            below
        }
        ArchKind::Sequential => {
            let mut s = cell(&p.cells[0], &state[0], Some(emb), &reg, sn);
            cells.push(s.c.clone());
            for i in 1..spec.cells {
                s = cell(&p.cells[i], &s, None, &reg, sn);
            }
            state[0] = s.clone();
            s.h
        }
    };
    let w = top.len();
    let logits = (0..spec.vocab)
        .map(|v| p.out_b.data()[v] + (0..w).map(|k| p.out_w.data()[v * w + k] * top[k]).sum::<f64>())
        .collect();
    (logits, cells)
}

pub fn jitter(p: &mut ModelParams<f64>, seed: u64) {
    let mut rng = Rng::new(seed, Purpose::Analysis);
    for t in p.tensors_mut() {
        for x in t.data_mut() {
            *x += 0.2 * (2.0 * rng.uniform() - 1.0);
        }
    }
}

/// Largest deviation between the library's eval-mode session and the
/// scalar-loop model over 12 steps of 3 lanes.
pub fn oracle_deviation(spec: ArchitectureSpec, seed: u64) -> f64 {
    let spec = spec.with_regularization(DEMO_REG);
    let mut p = ModelParams::<f64>::init(&spec, seed).unwrap();
    jitter(&mut p, seed + 100);
    let batch = 3;
    let mut session = Session::new(&p, batch);
    let mut oracle: Vec<Vec<S>> = (0..batch)
        .map(|_| spec.state_widths().iter().map(|&n| S { h: vec![0.0; n], c: vec![0.0; n] }).collect())
        .collect();
    let mut worst = 0.0f64;
    for t in 0..12 {
        let toks: Vec<usize> = (0..batch).map(|b| (t * 5 + b * 3 + t * t) % spec.vocab).collect();
        let out = session.step(&toks).unwrap();
        for (b, &tok) in toks.iter().enumerate() {
            let (logits, cells) = model_step(&p, &mut oracle[b], tok);
            for (x, y) in out.logits.row(b).iter().zip(&logits) {
                worst = worst.max((x - y).abs());
            }
            assert_eq!(cells.len(), out.cell_states.len());
            for (mine, theirs) in out.cell_states.iter().zip(&cells) {
                for (x, y) in mine.row(b).iter().zip(theirs) {
                    worst = worst.max((x - y).abs());
                }
            }
        }
    }
    worst
}


/// Largest deviation of one `lstm_step` (layer norm on, eval zoneout) from
/// the scalar cell over a few random states.
pub fn lstm_step_deviation(seed: u64) -> f64 {
    let mut rng = Rng::new(seed, Purpose::Init);
    let shape = CellShape { n_in: 5, n_out: 7 };
    let mut p = LstmParams::<f64>::init(shape, NormConfig::FULL, &mut rng).unwrap();
    for t in p.tensors_mut() {
        for x in t.data_mut() {
            *x += 0.3 * (2.0 * rng.uniform() - 1.0);
        }
    }
    let batch = 4;
    let rand = |rng: &mut Rng, n: usize| -> Vec<f64> { (0..n).map(|_| 2.0 * rng.uniform() - 1.0).collect() };
    let h = rand(&mut rng, batch * 7);
    let c = rand(&mut rng, batch * 7);
    let x = rand(&mut rng, batch * 5);
    let mut g = Graph::new();
    let vars = p.bind(&mut g);
    let state = LstmState {
        h: Tensor::new(&[batch, 7], h.clone()).unwrap(),
        c: Tensor::new(&[batch, 7], c.clone()).unwrap(),
    };
    let sv = StateVars::detached(&mut g, &state);
    let xv = g.constant(Tensor::new(&[batch, 5], x.clone()).unwrap());
    let out = lstm_step(&mut g, &vars, sv, Some(xv), &DEMO_REG, false, &mut Noise::new(0).zoneout).unwrap();
    let mut worst = 0.0f64;
    for b in 0..batch {
        let s = S {
            h: h[b * 7..(b + 1) * 7].to_vec(),
            c: c[b * 7..(b + 1) * 7].to_vec(),
        };
        let r = cell(&p, &s, Some(&x[b * 5..(b + 1) * 5]), &DEMO_REG, false);
        for (a, e) in g.value(out.h).row(b).iter().zip(&r.h).chain(g.value(out.c).row(b).iter().zip(&r.c)) {
            worst = worst.max((a - e).abs());
        }
    }
    worst
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-7)
}

/// Central differences (h = 1e-5) against the analytic gradient of one
/// FS-LSTM-2 training window: fast 8, slow 6, V 11, B 2, T 4, layer norm
/// on, regularizers off. Returns (worst relative error, coordinates).
pub fn fs2_gradient_check() -> (f64, usize) {
    const H: f64 = 1e-5;
    let spec = ArchitectureSpec::fast_slow(2, 8, 6, 11, 5)
        .with_norm(NormConfig::FULL)
        .with_regularization(RegularizerConfig::OFF);
    let mut params = ModelParams::<f64>::init(&spec, 21).unwrap();
    // move gains and biases off their identity values
    let mut rng = Rng::new(22, Purpose::Analysis);
    for t in params.tensors_mut() {
        for x in t.data_mut() {
            *x += 0.3 * (2.0 * rng.uniform() - 1.0);
        }
    }
    let mut state = ModelState::<f64>::zeros(&spec, 2);
    for s in &mut state.cells {
        for x in s.h.data_mut().iter_mut().chain(s.c.data_mut()) {
            *x = 0.5 * (2.0 * rng.uniform() - 1.0);
        }
    }
    let window = Window {
        inputs: vec![vec![1, 7], vec![3, 3], vec![10, 0], vec![4, 9]],
        targets: vec![vec![3, 3], vec![10, 0], vec![4, 9], vec![2, 5]],
    };
    let reg = RegularizerConfig::OFF;
    window_gradients(&mut params, &state, &window, &reg, &mut Noise::new(0)).unwrap();
    let analytic: Vec<Vec<f64>> = params.tensors().iter().map(|(_, t)| t.grad().unwrap().to_vec()).collect();
    params.clear_grads();

    let mut checked = 0;
    let mut worst = 0.0f64;
    for (ti, grads) in analytic.iter().enumerate() {
        for (j, &a) in grads.iter().enumerate() {
            let mut p = params.clone();
            p.tensors_mut()[ti].data_mut()[j] += H;
            let up = window_loss(&p, &state, &window, &reg, &mut Noise::new(0)).unwrap();
            p.tensors_mut()[ti].data_mut()[j] -= 2.0 * H;
            let down = window_loss(&p, &state, &window, &reg, &mut Noise::new(0)).unwrap();
            worst = worst.max(rel_err(a, (up - down) / (2.0 * H)));
            checked += 1;
        }
    }
    (worst, checked)
}

pub fn small_config(batch: usize, window: usize, epochs: usize, lr: f64) -> TrainConfig {
    TrainConfig {
        batch,
        window,
        epochs,
        lr,
        schedule: ScheduleKind::Constant,
        adam: AdamConfig::default(),
        clip_norm: 1.0,
        seed: 5,
        precision: Precision::F64,
        valid_batch: None,
        log_every: 0,
        checkpoint_every: 0,
    }
}

/// Trains a small FS-LSTM-2 on the first 100 characters of synthetic text
/// (one lane, three 33-step windows per epoch) and returns the update count
/// at which the epoch's train BPC first fell below 0.2.
pub fn overfit_steps(max_steps: u64) -> Option<u64> {
    let text: String = synthetic_text(5, 400).chars().take(100).collect();
    let symbols = TokenMode::PtbChars.tokenize(text.as_bytes()).unwrap();
    let rule = SplitRule::Sizes { train: 100, valid: 0, test: 0 };
    let corpus = Corpus::new(TokenMode::PtbChars, &symbols, rule, false).unwrap();
    let spec = ArchitectureSpec::fast_slow(2, 48, 48, corpus.vocab.size(), 16).with_norm(NormConfig::FULL);
    let epochs = max_steps.div_ceil(3) as usize;
    let mut trainer = Trainer::<f64>::new(&spec, small_config(1, 33, epochs, 0.01)).unwrap();
    struct Until(Option<u64>);
    impl TrainHooks<f64> for Until {
        fn on_row(&mut self, row: &MetricRow) -> Result<()> {
            if row.split == "train" && row.bpc < 0.2 && self.0.is_none() {
                self.0 = Some(row.step);
            }
            Ok(())
        }
        fn should_stop(&mut self, _: &Trainer<f64>) -> bool {
            self.0.is_some()
        }
    }
    let mut hooks = Until(None);
    trainer.fit(corpus.tokens(Split::Train), &[], &mut hooks).unwrap();
    hooks.0.filter(|&s| s <= max_steps)
}
