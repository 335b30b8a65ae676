//! A single in-browser model the page drives step by step.

use wasm_bindgen::prelude::*;

use fsrnn::analysis::{cell_change_rate, gradient_probe, ProbeConfig};
use fsrnn::arch::ArchitectureSpec;
use fsrnn::data::{batch_windows, Corpus, Split, SplitRule, TokenMode};
use fsrnn::training::{bpc, evaluate, AdamConfig, Precision, ScheduleKind, TrainConfig, Trainer};

const BATCH: usize = 8;
const WINDOW: usize = 40;

fn js(e: fsrnn::Error) -> JsValue {
    JsValue::from_str(&e.to_string())
}

#[wasm_bindgen]
pub struct Lab {
    corpus: Corpus,
    trainer: Trainer<f32>,
    /// Next window of the current pass over the training text.
    cursor: usize,
}

impl Lab {
    pub fn build(text: &str, arch: &str, width: usize, seed: u64) -> fsrnn::Result<Lab> {
        let symbols = TokenMode::PtbChars.tokenize(text.as_bytes())?;
        let rule = SplitRule::Proportional { valid: 0.1, test: 0.0 };
        let corpus = Corpus::new(TokenMode::PtbChars, &symbols, rule, false)?;
        let v = corpus.vocab.size();
        let embed = (width / 2).max(4);
        let spec = match arch {
            "fs" => ArchitectureSpec::fast_slow(2, width, width, v, embed),
            "stacked" => ArchitectureSpec::stacked(2, width, v, embed),
            "sequential" => ArchitectureSpec::sequential(2, width, v, embed),
            other => return Err(fsrnn::Error::Config(format!("unknown architecture {other:?}"))),
        };
        let config = TrainConfig {
            batch: BATCH,
            window: WINDOW,
            epochs: usize::MAX,
            lr: 3e-3,
            schedule: ScheduleKind::Constant,
            adam: AdamConfig::default(),
            clip_norm: 1.0,
            seed,
            precision: Precision::F32,
            valid_batch: Some(1),
            log_every: 0,
            checkpoint_every: 0,
        };
        // fails early if the text is too short to train on
        batch_windows(corpus.tokens(Split::Train), BATCH, WINDOW)?;
        let trainer = Trainer::new(&spec, config)?;
        Ok(Lab { corpus, trainer, cursor: 0 })
    }

    pub fn train_windows(&mut self, n: usize) -> fsrnn::Result<f64> {
        let stream = batch_windows(self.corpus.tokens(Split::Train), BATCH, WINDOW)?;
        let mut total = 0.0;
        for _ in 0..n {
            if self.cursor == stream.len() {
                self.cursor = 0;
                self.trainer.state = fsrnn::arch::ModelState::zeros(&self.trainer.params.spec, BATCH);
            }
            total += self.trainer.train_window(&stream.window(self.cursor))?.loss;
            self.cursor += 1;
        }
        Ok(bpc(total / n.max(1) as f64))
    }

    pub fn probe_norms(&self, max_lag: usize, samples: usize) -> fsrnn::Result<Vec<f64>> {
        let cfg = ProbeConfig::new(max_lag, samples, 1);
        let report = gradient_probe(&self.trainer.params, self.corpus.tokens(Split::Valid), &cfg)?;
        let layers = report.labels.len();
        Ok((0..layers)
            .flat_map(|l| (0..=max_lag).map(move |k| (l, k)))
            .map(|(l, k)| report.mean(l, k))
            .collect())
    }
}

#[wasm_bindgen]
impl Lab {
    /// `arch` is `fs`, `stacked` or `sequential`.
    #[wasm_bindgen(constructor)]
    pub fn new(text: &str, arch: &str, width: usize, seed: u32) -> Result<Lab, JsValue> {
        Lab::build(text, arch, width, seed as u64).map_err(js)
    }

    pub fn vocab(&self) -> usize {
        self.corpus.vocab.size()
    }

    pub fn params(&self) -> usize {
        self.trainer.params.param_count()
    }

    pub fn steps(&self) -> f64 {
        self.trainer.progress.step as f64
    }

    pub fn labels(&self) -> Vec<String> {
        self.trainer.params.spec.layer_labels()
    }

    /// Runs `n` updates and returns their mean train BPC.
    pub fn train(&mut self, n: usize) -> Result<f64, JsValue> {
        self.train_windows(n).map_err(js)
    }

    pub fn valid_bpc(&self) -> Result<f64, JsValue> {
        evaluate(&self.trainer.params, self.corpus.tokens(Split::Valid), 1).map_err(js)
    }

    /// Mean gradient norm per layer and lag, layer-major, `max_lag + 1`
    /// values per layer.
    pub fn probe(&self, max_lag: usize, samples: usize) -> Result<Vec<f64>, JsValue> {
        self.probe_norms(max_lag, samples).map_err(js)
    }

    /// Mean squared per-step change of each layer's cell state.
    pub fn change_rates(&self, steps: usize) -> Result<Vec<f64>, JsValue> {
        let valid = self.corpus.tokens(Split::Valid);
        cell_change_rate(&self.trainer.params, valid, steps.min(valid.len()))
            .map(|r| r.values)
            .map_err(js)
    }
}

#[wasm_bindgen]
pub fn sample_text(seed: u32, len: usize) -> String {
    fsrnn::data::synthetic_text(seed as u64, len)
}
