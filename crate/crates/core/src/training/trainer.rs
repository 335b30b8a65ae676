use serde::{Deserialize, Serialize};

use crate::arch::{self, ArchitectureSpec, ModelParams, ModelState, ModelVars};
use crate::cells::{Noise, RegularizerConfig, StateVars};
use crate::data::{batch_windows, Window};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Var};

use super::eval::evaluate;
use super::optim::{bpc, clip_gradients, Adam, AdamConfig, LrSchedule, ScheduleKind};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

impl Precision {
    pub fn as_str(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch: usize,
    /// TBPTT length.
    pub window: usize,
    pub epochs: usize,
    pub lr: f64,
    #[serde(default)]
    pub schedule: ScheduleKind,
    #[serde(default)]
    pub adam: AdamConfig,
    #[serde(default = "unit")]
    pub clip_norm: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub precision: Precision,
    /// Validation lanes; the minibatch size when absent.
    #[serde(default)]
    pub valid_batch: Option<usize>,
    /// Extra train rows every this many windows; 0 logs per epoch only.
    #[serde(default)]
    pub log_every: usize,
    /// Resumable checkpoint every this many windows; 0 saves at epoch ends only.
    #[serde(default)]
    pub checkpoint_every: usize,
}

fn unit() -> f64 {
    1.0
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.window == 0 || self.epochs == 0 {
            return Err(Error::Config("batch, window and epochs must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} is invalid", self.lr)));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        let AdamConfig { beta1, beta2, eps } = self.adam;
        if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) {
            return Err(Error::Config("Adam needs β in [0,1) and ε > 0".into()));
        }
        if self.valid_batch == Some(0) {
            return Err(Error::Config("valid_batch must be positive".into()));
        }
        Ok(())
    }
}

/// Position in the run plus the running sums behind the next metrics rows.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Progress {
    pub epoch: usize,
    /// Next window within the epoch.
    pub window: usize,
    /// Optimizer updates applied.
    pub step: u64,
    pub skipped: u64,
    pub consecutive_skips: u32,
    pub best_valid: Option<f64>,
    pub best_epoch: Option<usize>,
    pub epoch_loss: f64,
    pub epoch_grad_norm: f64,
    pub epoch_windows: usize,
    pub log_loss: f64,
    pub log_grad_norm: f64,
    pub log_windows: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub epoch: usize,
    pub step: u64,
    pub split: &'static str,
    pub bpc: f64,
    pub lr: f64,
    pub grad_norm: Option<f64>,
}

impl MetricRow {
    pub const HEADER: &'static str = "epoch,step,split,bpc,lr,grad_norm,seconds";

    pub fn csv(&self, seconds: f64) -> Vec<String> {
        use crate::report::g12;
        vec![
            self.epoch.to_string(),
            self.step.to_string(),
            self.split.to_string(),
            g12(self.bpc),
            g12(self.lr),
            self.grad_norm.map(g12).unwrap_or_default(),
            format!("{seconds:.3}"),
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WindowReport {
    /// Mean cross-entropy over the window in nats.
    pub loss: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    /// Global gradient norm measured after clipping.
    pub clipped_norm: f64,
    pub skipped: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Event {
    /// `checkpoint_every` windows elapsed.
    Periodic,
    EpochEnd,
    /// Validation improved on the best so far.
    NewBest,
}

/// Callbacks from [`Trainer::fit`]. Defaults ignore everything.
pub trait TrainHooks<T: Scalar> {
    fn on_row(&mut self, _row: &MetricRow) -> Result<()> {
        Ok(())
    }
    fn on_window(&mut self, _trainer: &Trainer<T>, _report: &WindowReport) -> Result<()> {
        Ok(())
    }
    fn on_event(&mut self, _trainer: &Trainer<T>, _event: Event) -> Result<()> {
        Ok(())
    }
    /// Checked after every window; returning true ends `fit` early.
    fn should_stop(&mut self, _trainer: &Trainer<T>) -> bool {
        false
    }
}

pub struct NoHooks;
impl<T: Scalar> TrainHooks<T> for NoHooks {}

/// Builds the graph for one window: mean loss over all `B·T` positions and
/// the outgoing state.
pub fn forward_window<T: Scalar>(
    g: &mut Graph<T>,
    spec: &ArchitectureSpec,
    vars: &ModelVars,
    state: &ModelState<T>,
    window: &Window,
    reg: &RegularizerConfig,
    noise: &mut Noise,
) -> Result<(Var, Vec<StateVars>)> {
    let mut sv = state.detach_into(g);
    let mut losses = Vec::with_capacity(window.inputs.len());
    for (x, y) in window.inputs.iter().zip(&window.targets) {
        let out = arch::step(g, spec, vars, &sv, x, reg, noise, None)?;
        let (loss, _) = g.softmax_xent(out.logits, y)?;
        losses.push(loss);
        sv = out.state;
    }
    let total = g.sum_scalars(&losses)?;
    let mean = g.scale(total, T::of(1.0 / losses.len() as f64))?;
    Ok((mean, sv))
}

/// Loss and parameter gradients for one window. Gradients land in the
/// parameter grad slots; returns the mean loss in nats and the outgoing state.
pub fn window_gradients<T: Scalar>(
    params: &mut ModelParams<T>,
    state: &ModelState<T>,
    window: &Window,
    reg: &RegularizerConfig,
    noise: &mut Noise,
) -> Result<(f64, ModelState<T>)> {
    let mut g = Graph::new();
    let vars = params.bind(&mut g);
    let spec = params.spec.clone();
    let (loss, sv) = forward_window(&mut g, &spec, &vars, state, window, reg, noise)?;
    g.backward(loss, None)?;
    params.pull_grads(&g, &vars)?;
    let next = ModelState::read(&g, &sv);
    Ok((g.value(loss).data()[0].as_f64(), next))
}

/// Mean window loss without gradients.
pub fn window_loss<T: Scalar>(
    params: &ModelParams<T>,
    state: &ModelState<T>,
    window: &Window,
    reg: &RegularizerConfig,
    noise: &mut Noise,
) -> Result<f64> {
    let mut g = Graph::new();
    let vars = params.bind(&mut g);
    let (loss, _) = forward_window(&mut g, &params.spec, &vars, state, window, reg, noise)?;
    Ok(g.value(loss).data()[0].as_f64())
}

const MAX_CONSECUTIVE_SKIPS: u32 = 10;

/// Resumable training state.
pub struct Trainer<T: Scalar> {
    pub params: ModelParams<T>,
    pub config: TrainConfig,
    pub adam: Adam<T>,
    pub schedule: LrSchedule,
    pub noise: Noise,
    pub state: ModelState<T>,
    pub progress: Progress,
    /// Parameters with the best validation BPC seen by this process.
    pub best: Option<ModelParams<T>>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(spec: &ArchitectureSpec, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let params = ModelParams::init(spec, config.seed)?;
        Ok(Self::with_params(params, config))
    }

    pub fn with_params(params: ModelParams<T>, config: TrainConfig) -> Self {
        let sizes: Vec<usize> = params.tensors().iter().map(|(_, t)| t.len()).collect();
        Self {
            adam: Adam::new(config.adam, &sizes),
            schedule: LrSchedule::new(config.schedule, config.lr, config.epochs),
            noise: Noise::new(config.seed),
            state: ModelState::zeros(&params.spec, config.batch),
            progress: Progress::default(),
            best: None,
            params,
            config,
        }
    }

    pub fn lr(&self) -> f64 {
        self.schedule.lr(self.progress.epoch)
    }

    pub fn is_finished(&self) -> bool {
        self.progress.epoch >= self.config.epochs
    }

    /// One TBPTT update. Non-finite losses or gradients skip the update and
    /// reset the carried state; ten in a row abort with a numeric error.
    pub fn train_window(&mut self, window: &Window) -> Result<WindowReport> {
        let reg = self.params.spec.regularization.train();
        let outcome = window_gradients(&mut self.params, &self.state, window, &reg, &mut self.noise)
            .and_then(|(loss, next)| {
                if !loss.is_finite() {
                    return Err(Error::NonFinite(format!("window loss is {loss}")));
                }
                let clip = clip_gradients(&mut self.params.tensors_mut(), self.config.clip_norm)?;
                Ok((loss, next, clip))
            });
        let report = match outcome {
            Ok((loss, next, clip)) => {
                let lr = self.lr();
                self.adam.step(&mut self.params.tensors_mut(), lr)?;
                self.state = next;
                self.progress.step += 1;
                self.progress.consecutive_skips = 0;
                WindowReport {
                    loss,
                    grad_norm: clip.norm,
                    clipped_norm: clip.applied,
                    skipped: false,
                }
            }
            Err(Error::NonFinite(msg)) => {
                self.progress.skipped += 1;
                self.progress.consecutive_skips += 1;
                if self.progress.consecutive_skips >= MAX_CONSECUTIVE_SKIPS {
                    return Err(Error::NonFinite(format!(
                        "{MAX_CONSECUTIVE_SKIPS} consecutive updates skipped, last: {msg}"
                    )));
                }
                self.state = ModelState::zeros(&self.params.spec, self.config.batch);
                WindowReport {
                    loss: f64::NAN,
                    grad_norm: f64::NAN,
                    clipped_norm: f64::NAN,
                    skipped: true,
                }
            }
            Err(e) => return Err(e),
        };
        self.params.clear_grads();
        Ok(report)
    }

    fn log_row(&mut self, hooks: &mut dyn TrainHooks<T>, epoch_end: bool) -> Result<()> {
        let p = &mut self.progress;
        let (loss, norm, n) = if epoch_end {
            (p.epoch_loss, p.epoch_grad_norm, p.epoch_windows)
        } else {
            (p.log_loss, p.log_grad_norm, p.log_windows)
        };
        if n == 0 {
            return Ok(());
        }
        let row = MetricRow {
            epoch: p.epoch,
            step: p.step,
            split: "train",
            bpc: bpc(loss / n as f64),
            lr: self.schedule.lr(p.epoch),
            grad_norm: Some(norm / n as f64),
        };
        p.log_loss = 0.0;
        p.log_grad_norm = 0.0;
        p.log_windows = 0;
        hooks.on_row(&row)
    }

    /// Runs (or resumes) the epoch loop. Validation runs at each epoch end on
    /// `valid` when it is non-empty.
    pub fn fit(&mut self, train: &[usize], valid: &[usize], hooks: &mut dyn TrainHooks<T>) -> Result<()> {
        let stream = batch_windows(train, self.config.batch, self.config.window)?;
        let valid_batch = self.config.valid_batch.unwrap_or(self.config.batch);
        while !self.is_finished() {
            if self.progress.window == 0 {
                self.state = ModelState::zeros(&self.params.spec, self.config.batch);
            }
            while self.progress.window < stream.len() {
                let report = self.train_window(&stream.window(self.progress.window))?;
                self.progress.window += 1;
                if !report.skipped {
                    let p = &mut self.progress;
                    p.epoch_loss += report.loss;
                    p.epoch_grad_norm += report.grad_norm;
                    p.epoch_windows += 1;
                    p.log_loss += report.loss;
                    p.log_grad_norm += report.grad_norm;
                    p.log_windows += 1;
                }
                hooks.on_window(self, &report)?;
                let every = self.config.log_every;
                if every > 0 && self.progress.window.is_multiple_of(every) && self.progress.window < stream.len() {
                    self.log_row(hooks, false)?;
                }
                let every = self.config.checkpoint_every;
                if every > 0 && self.progress.window.is_multiple_of(every) && self.progress.window < stream.len() {
                    hooks.on_event(self, Event::Periodic)?;
                }
                if hooks.should_stop(self) {
                    return Ok(());
                }
            }
            self.log_row(hooks, true)?;
            let lr = self.lr();
            if valid.len() >= 2 * valid_batch {
                let v = evaluate(&self.params, valid, valid_batch)?;
                hooks.on_row(&MetricRow {
                    epoch: self.progress.epoch,
                    step: self.progress.step,
                    split: "valid",
                    bpc: v,
                    lr,
                    grad_norm: None,
                })?;
                self.schedule.observe(v);
                if self.progress.best_valid.is_none_or(|b| v < b) {
                    self.progress.best_valid = Some(v);
                    self.progress.best_epoch = Some(self.progress.epoch);
                    self.best = Some(self.params.clone());
                    hooks.on_event(self, Event::NewBest)?;
                }
            } else {
                self.progress.best_epoch = Some(self.progress.epoch);
                self.best = Some(self.params.clone());
            }
            let p = &mut self.progress;
            p.epoch += 1;
            p.window = 0;
            p.epoch_loss = 0.0;
            p.epoch_grad_norm = 0.0;
            p.epoch_windows = 0;
            p.log_loss = 0.0;
            p.log_grad_norm = 0.0;
            p.log_windows = 0;
            hooks.on_event(self, Event::EpochEnd)?;
            if hooks.should_stop(self) {
                return Ok(());
            }
        }
        Ok(())
    }
}

/// Trains from scratch and returns the trainer, whose `best` holds the
/// parameters with the lowest validation BPC.
pub fn train<T: Scalar>(
    spec: &ArchitectureSpec,
    config: TrainConfig,
    train: &[usize],
    valid: &[usize],
    hooks: &mut dyn TrainHooks<T>,
) -> Result<Trainer<T>> {
    let mut trainer = Trainer::new(spec, config)?;
    trainer.fit(train, valid, hooks)?;
    Ok(trainer)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cells::NormConfig;

    fn config(batch: usize, window: usize, epochs: usize, lr: f64) -> TrainConfig {
        TrainConfig {
            batch,
            window,
            epochs,
            lr,
            schedule: ScheduleKind::Constant,
            adam: AdamConfig::default(),
            clip_norm: 1.0,
            seed: 4,
            precision: Precision::F64,
            valid_batch: None,
            log_every: 0,
            checkpoint_every: 0,
        }
    }

    struct Rows(Vec<MetricRow>);
    impl<T: Scalar> TrainHooks<T> for Rows {
        fn on_row(&mut self, row: &MetricRow) -> Result<()> {
            self.0.push(row.clone());
            Ok(())
        }
    }

    #[test]
    fn window_loss_matches_gradient_pass() {
        let spec = ArchitectureSpec::fast_slow(2, 5, 4, 6, 3);
        let mut p = ModelParams::<f64>::init(&spec, 1).unwrap();
        let toks: Vec<usize> = (0..60).map(|i| (i * 7 + 1) % 6).collect();
        let w = batch_windows(&toks, 2, 5).unwrap().window(0);
        let s = ModelState::zeros(&spec, 2);
        let reg = RegularizerConfig::OFF;
        let a = window_loss(&p, &s, &w, &reg, &mut Noise::new(0)).unwrap();
        let (b, _) = window_gradients(&mut p, &s, &w, &reg, &mut Noise::new(0)).unwrap();
        assert_eq!(a, b);
        assert!((a - 6f64.ln()).abs() < 0.5);
    }

    #[test]
    fn learns_repeating_pattern() {
        let spec = ArchitectureSpec::sequential(1, 16, 5, 8).with_norm(NormConfig::NONE);
        let toks: Vec<usize> = (0..2000).map(|i| i % 5).collect();
        let mut rows = Rows(Vec::new());
        let t: Trainer<f64> = train(&spec, config(4, 10, 3, 0.01), &toks, &toks[..400], &mut rows).unwrap();
        let valid: Vec<f64> = rows.0.iter().filter(|r| r.split == "valid").map(|r| r.bpc).collect();
        assert_eq!(valid.len(), 3);
        assert!(valid[2] < 0.5, "{valid:?}");
        assert!(t.best.is_some());
        assert_eq!(t.progress.epoch, 3);
    }

    #[test]
    fn invalid_config_rejected() {
        assert!(config(0, 5, 1, 0.1).validate().is_err());
        let mut c = config(1, 5, 1, 0.1);
        c.adam.eps = 0.0;
        assert!(c.validate().is_err());
    }
}
