use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Nats to bits.
pub fn bpc(loss_nats: f64) -> f64 {
    loss_nats / std::f64::consts::LN_2
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClipReport {
    /// Global norm before clipping.
    pub norm: f64,
    pub scale: f64,
    /// Norm measured after rescaling.
    pub applied: f64,
}

/// Euclidean norm of all gradients together, accumulated in f64. Tensors
/// without a gradient count as zero.
pub fn global_grad_norm<T: Scalar>(tensors: &[&mut Tensor<T>]) -> f64 {
    let mut sq = 0.0f64;
    for t in tensors {
        if let Some(g) = t.grad() {
            for &x in g {
                let x = x.as_f64();
                sq += x * x;
            }
        }
    }
    sq.sqrt()
}

/// Rescales all gradients so their global Euclidean norm is at most
/// `max_norm`.
pub fn clip_gradients<T: Scalar>(tensors: &mut [&mut Tensor<T>], max_norm: f64) -> Result<ClipReport> {
    let norm = global_grad_norm(tensors);
    if !norm.is_finite() {
        return Err(Error::NonFinite(format!("gradient norm is {norm}")));
    }
    let scale = if norm > max_norm { max_norm / norm } else { 1.0 };
    let mut applied = norm;
    if scale != 1.0 {
        let s = T::of(scale);
        for t in tensors.iter_mut() {
            if let Some(g) = t.grad() {
                let scaled: Vec<T> = g.iter().map(|&x| x * s).collect();
                t.set_grad(scaled)?;
            }
        }
        applied = global_grad_norm(tensors);
    }
    Ok(ClipReport { norm, scale, applied })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments per parameter tensor plus the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub t: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, sizes: &[usize]) -> Self {
        Self {
            config,
            t: 0,
            m: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor<T>], lr: f64) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::Graph(format!(
                "optimizer tracks {} tensors, got {}",
                self.m.len(),
                params.len()
            )));
        }
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powf(self.t as f64);
        let c2 = 1.0 - beta2.powf(self.t as f64);
        let (b1, b2, eps) = (T::of(beta1), T::of(beta2), T::of(eps));
        let (one_b1, one_b2) = (T::of(1.0 - beta1), T::of(1.0 - beta2));
        let (c1, c2, lr) = (T::of(c1), T::of(c2), T::of(lr));
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            if p.len() != m.len() {
                return Err(Error::shape("adam", &[m.len()], p.shape()));
            }
            let Some(g) = p.grad().map(|g| g.to_vec()) else {
                continue;
            };
            for (i, x) in p.data_mut().iter_mut().enumerate() {
                m[i] = b1 * m[i] + one_b1 * g[i];
                v[i] = b2 * v[i] + one_b2 * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                *x -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    /// Divide by 10 for the final 20 epochs.
    PtbLast20,
    /// Divide by 10 after two consecutive epochs without a validation
    /// improvement, then start counting again.
    PlateauDiv10,
    #[default]
    Constant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub kind: ScheduleKind,
    pub lr0: f64,
    pub epochs: usize,
    pub current: f64,
    pub best: Option<f64>,
    pub stale_epochs: usize,
}

impl LrSchedule {
    pub fn new(kind: ScheduleKind, lr0: f64, epochs: usize) -> Self {
        Self {
            kind,
            lr0,
            epochs,
            current: lr0,
            best: None,
            stale_epochs: 0,
        }
    }

    /// Learning rate for 0-based `epoch`.
    pub fn lr(&self, epoch: usize) -> f64 {
        match self.kind {
            ScheduleKind::PtbLast20 if epoch + 20 >= self.epochs => self.lr0 / 10.0,
            ScheduleKind::PtbLast20 | ScheduleKind::Constant => self.lr0,
            ScheduleKind::PlateauDiv10 => self.current,
        }
    }

    /// Feeds the validation BPC of a finished epoch. Returns true when the
    /// rate was divided.
    pub fn observe(&mut self, valid_bpc: f64) -> bool {
        if self.best.is_none_or(|b| valid_bpc < b) {
            self.best = Some(valid_bpc);
            self.stale_epochs = 0;
            return false;
        }
        self.stale_epochs += 1;
        if self.kind == ScheduleKind::PlateauDiv10 && self.stale_epochs >= 2 {
            self.current /= 10.0;
            self.stale_epochs = 0;
            return true;
        }
        false
    }
}
