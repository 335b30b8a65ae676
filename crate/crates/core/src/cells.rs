//! LSTM cell with optional per-gate and cell-state layer normalization,
//! plus the zoneout and dropout regularizers.
//!
//! Preactivations are stacked in the gate order (f, i, o, g):
//!
//! ```text
//! [f; i; o; g] = W_h h_{t-1} + W_x x_t + b
//! c_t = σ(f) ⊙ c_{t-1} + σ(i) ⊙ tanh(g)
//! h_t = σ(o) ⊙ tanh(c_t)
//! ```
//!
//! With gate normalization on, each gate slice of `W_h h + W_x x` is layer
//! normalized with its own gain/bias and `b` is added afterwards, so the
//! forget bias keeps its effect. With cell normalization on, `c_t` is
//! normalized on its way into `tanh` for `h_t`; the carried `c_t` stays
//! unnormalized unless `normalize_stored_cell` is set.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{orthogonal_init, Graph, Scalar, Tensor, Var};

pub const GATES: usize = 4;
/// Gate block indices inside the stacked preactivation.
pub const FORGET: usize = 0;
pub const INPUT: usize = 1;
pub const OUTPUT: usize = 2;
pub const CANDIDATE: usize = 3;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Structural options shared by every cell of a model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormConfig {
    pub gate_norm: bool,
    pub cell_norm: bool,
    #[serde(default)]
    pub normalize_stored_cell: bool,
}

impl NormConfig {
    pub const NONE: NormConfig = NormConfig {
        gate_norm: false,
        cell_norm: false,
        normalize_stored_cell: false,
    };
    pub const FULL: NormConfig = NormConfig {
        gate_norm: true,
        cell_norm: true,
        normalize_stored_cell: false,
    };
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CellShape {
    /// Width of the external input, 0 when the cell takes none.
    pub n_in: usize,
    pub n_out: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams<T> {
    pub gain: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> LayerNormParams<T> {
    pub fn identity(n: usize) -> Self {
        Self {
            gain: Tensor::full(&[n], T::one()),
            bias: Tensor::zeros(&[n]),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LstmParams<T> {
    pub shape: CellShape,
    /// `4n × n`
    pub w_h: Tensor<T>,
    /// `4n × n_in`, absent when the cell has no external input.
    pub w_x: Option<Tensor<T>>,
    /// `4n`
    pub b: Tensor<T>,
    /// One per gate, in gate order.
    pub gate_norm: Option<Vec<LayerNormParams<T>>>,
    pub cell_norm: Option<LayerNormParams<T>>,
}

impl<T: Scalar> LstmParams<T> {
    /// Orthogonal weights, forget-gate bias 1, other biases 0, unit LN gains.
    pub fn init(shape: CellShape, norm: NormConfig, rng: &mut Rng) -> Result<Self> {
        let n = shape.n_out;
        if n == 0 {
            return Err(Error::Config("cell width must be positive".into()));
        }
        let w_h = orthogonal_init(GATES * n, n, rng)?;
        let w_x = match shape.n_in {
            0 => None,
            n_in => Some(orthogonal_init(GATES * n, n_in, rng)?),
        };
        let mut b = Tensor::zeros(&[GATES * n]);
        b.data_mut()[FORGET * n..(FORGET + 1) * n].fill(T::one());
        Ok(Self {
            shape,
            w_h,
            w_x,
            b,
            gate_norm: norm
                .gate_norm
                .then(|| (0..GATES).map(|_| LayerNormParams::identity(n)).collect()),
            cell_norm: norm.cell_norm.then(|| LayerNormParams::identity(n)),
        })
    }

    /// All-zero weights and biases except a forget bias of `forget_bias`;
    /// no normalization.
    pub fn constant(shape: CellShape, forget_bias: f64) -> Self {
        let n = shape.n_out;
        let mut b = Tensor::zeros(&[GATES * n]);
        b.data_mut()[FORGET * n..(FORGET + 1) * n].fill(T::of(forget_bias));
        Self {
            shape,
            w_h: Tensor::zeros(&[GATES * n, n]),
            w_x: (shape.n_in > 0).then(|| Tensor::zeros(&[GATES * n, shape.n_in])),
            b,
            gate_norm: None,
            cell_norm: None,
        }
    }

    pub fn norm_config(&self) -> NormConfig {
        NormConfig {
            gate_norm: self.gate_norm.is_some(),
            cell_norm: self.cell_norm.is_some(),
            normalize_stored_cell: false,
        }
    }

    /// Every learnable tensor with a stable name, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![("w_h".to_string(), &self.w_h)];
        if let Some(w) = &self.w_x {
            out.push(("w_x".into(), w));
        }
        out.push(("b".into(), &self.b));
        if let Some(norms) = &self.gate_norm {
            for (q, ln) in norms.iter().enumerate() {
                let gate = ["f", "i", "o", "g"][q];
                out.push((format!("ln_{gate}.gain"), &ln.gain));
                out.push((format!("ln_{gate}.bias"), &ln.bias));
            }
        }
        if let Some(ln) = &self.cell_norm {
            out.push(("ln_c.gain".into(), &ln.gain));
            out.push(("ln_c.bias".into(), &ln.bias));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![&mut self.w_h];
        if let Some(w) = &mut self.w_x {
            out.push(w);
        }
        out.push(&mut self.b);
        if let Some(norms) = &mut self.gate_norm {
            for ln in norms {
                out.push(&mut ln.gain);
                out.push(&mut ln.bias);
            }
        }
        if let Some(ln) = &mut self.cell_norm {
            out.push(&mut ln.gain);
            out.push(&mut ln.bias);
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Registers every tensor as a differentiable leaf of `g`.
    pub fn bind(&self, g: &mut Graph<T>) -> LstmVars {
        LstmVars {
            shape: self.shape,
            w_h: g.leaf(self.w_h.clone()),
            w_x: self.w_x.as_ref().map(|w| g.leaf(w.clone())),
            b: g.leaf(self.b.clone()),
            gate_norm: self.gate_norm.as_ref().map(|norms| {
                norms
                    .iter()
                    .map(|ln| (g.leaf(ln.gain.clone()), g.leaf(ln.bias.clone())))
                    .collect()
            }),
            cell_norm: self
                .cell_norm
                .as_ref()
                .map(|ln| (g.leaf(ln.gain.clone()), g.leaf(ln.bias.clone()))),
        }
    }
}

/// Closed-form parameter count of one cell.
pub fn cell_param_count(shape: CellShape, norm: NormConfig) -> usize {
    let n = shape.n_out;
    let mut count = GATES * n * n + GATES * n * shape.n_in + GATES * n;
    if norm.gate_norm {
        count += 2 * GATES * n;
    }
    if norm.cell_norm {
        count += 2 * n;
    }
    count
}

/// Graph handles of a bound [`LstmParams`], in the order of
/// [`LstmParams::tensors`].
#[derive(Clone, Debug)]
pub struct LstmVars {
    pub shape: CellShape,
    pub w_h: Var,
    pub w_x: Option<Var>,
    pub b: Var,
    pub gate_norm: Option<Vec<(Var, Var)>>,
    pub cell_norm: Option<(Var, Var)>,
}

impl LstmVars {
    pub fn all(&self) -> Vec<Var> {
        let mut out = vec![self.w_h];
        out.extend(self.w_x);
        out.push(self.b);
        if let Some(norms) = &self.gate_norm {
            for &(gn, bn) in norms {
                out.push(gn);
                out.push(bn);
            }
        }
        if let Some((gn, bn)) = self.cell_norm {
            out.push(gn);
            out.push(bn);
        }
        out
    }
}

/// Plain-value LSTM state for a batch: `h` and `c` are `B×n`.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmState<T> {
    pub h: Tensor<T>,
    pub c: Tensor<T>,
}

impl<T: Scalar> LstmState<T> {
    pub fn zeros(batch: usize, n: usize) -> Self {
        Self {
            h: Tensor::zeros(&[batch, n]),
            c: Tensor::zeros(&[batch, n]),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.h.is_finite() && self.c.is_finite()
    }
}

/// LSTM state as graph handles.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StateVars {
    pub h: Var,
    pub c: Var,
}

impl StateVars {
    /// Enters a plain state into the graph without gradient history.
    pub fn detached<T: Scalar>(g: &mut Graph<T>, s: &LstmState<T>) -> Self {
        Self {
            h: g.constant(s.h.clone()),
            c: g.constant(s.c.clone()),
        }
    }

    pub fn read<T: Scalar>(&self, g: &Graph<T>) -> LstmState<T> {
        LstmState {
            h: g.value(self.h).clone(),
            c: g.value(self.c).clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegularizerConfig {
    /// Keep probability of non-recurrent dropout; 1 disables it.
    pub dropout_keep: f64,
    pub zoneout_cell: f64,
    pub zoneout_hidden: f64,
    #[serde(skip, default = "default_training")]
    pub training: bool,
}

fn default_training() -> bool {
    true
}

impl RegularizerConfig {
    pub const OFF: RegularizerConfig = RegularizerConfig {
        dropout_keep: 1.0,
        zoneout_cell: 0.0,
        zoneout_hidden: 0.0,
        training: true,
    };

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("zoneout_cell", self.zoneout_cell),
            ("zoneout_hidden", self.zoneout_hidden),
            ("dropout_keep", self.dropout_keep),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} is not a probability")));
            }
        }
        if self.dropout_keep == 0.0 {
            return Err(Error::Config("dropout_keep must be positive".into()));
        }
        Ok(())
    }

    pub fn eval(self) -> Self {
        Self {
            training: false,
            ..self
        }
    }

    pub fn train(self) -> Self {
        Self {
            training: true,
            ..self
        }
    }
}

/// Random streams consumed by the regularizers.
#[derive(Clone, Debug)]
pub struct Noise {
    pub dropout: Rng,
    pub zoneout: Rng,
}

impl Noise {
    pub fn new(seed: u64) -> Self {
        Self {
            dropout: Rng::new(seed, crate::rng::Purpose::Dropout),
            zoneout: Rng::new(seed, crate::rng::Purpose::Zoneout),
        }
    }
}

/// Inverted dropout mask: 0 with probability `1 − keep`, else `1/keep`.
/// Evaluation masks are all ones.
pub fn dropout_mask<T: Scalar>(
    shape: &[usize],
    keep: f64,
    training: bool,
    rng: &mut Rng,
) -> Result<Tensor<T>> {
    if !(keep > 0.0 && keep <= 1.0) {
        return Err(Error::Config(format!("dropout keep {keep} must be in (0, 1]")));
    }
    if !training || keep == 1.0 {
        return Ok(Tensor::full(shape, T::one()));
    }
    let scale = T::of(1.0 / keep);
    let len: usize = shape.iter().product();
    let data = (0..len)
        .map(|_| if rng.bernoulli(keep) { scale } else { T::zero() })
        .collect();
    Tensor::new(shape, data)
}

/// Applies a fresh dropout mask to `x` (no-op when disabled).
pub fn dropout<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    reg: &RegularizerConfig,
    rng: &mut Rng,
) -> Result<Var> {
    if !reg.training || reg.dropout_keep >= 1.0 {
        return Ok(x);
    }
    let mask = dropout_mask(g.value(x).shape(), reg.dropout_keep, true, rng)?;
    g.mul_const(x, &mask)
}

/// Zoneout: while training each unit keeps its previous value with
/// probability `rate`; at evaluation the expectation
/// `rate·prev + (1 − rate)·new` is used.
pub fn zoneout_apply<T: Scalar>(
    g: &mut Graph<T>,
    prev: Var,
    new: Var,
    rate: f64,
    training: bool,
    rng: &mut Rng,
) -> Result<Var> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::Config(format!("zoneout rate {rate} is not a probability")));
    }
    if rate == 0.0 {
        return Ok(new);
    }
    let shape = g.value(new).shape().to_vec();
    let mask = if training {
        let len: usize = shape.iter().product();
        let data = (0..len)
            .map(|_| if rng.bernoulli(rate) { T::one() } else { T::zero() })
            .collect();
        Tensor::new(&shape, data)?
    } else {
        Tensor::full(&shape, T::of(rate))
    };
    g.blend(prev, new, &mask)
}

/// One LSTM update. `x` must be given exactly when the cell has an
/// external input.
pub fn lstm_step<T: Scalar>(
    g: &mut Graph<T>,
    p: &LstmVars,
    state: StateVars,
    x: Option<Var>,
    reg: &RegularizerConfig,
    normalize_stored_cell: bool,
    rng: &mut Rng,
) -> Result<StateVars> {
    let n = p.shape.n_out;
    let hs = g.try_value(state.h)?.shape().to_vec();
    if hs.len() != 2 || hs[1] != n {
        return Err(Error::shape("lstm_step h_prev", &hs, &[hs[0], n]));
    }
    let cs = g.try_value(state.c)?.shape();
    if cs != hs.as_slice() {
        return Err(Error::shape("lstm_step c_prev", cs, &hs));
    }
    let mut terms = vec![(p.w_h, state.h)];
    match (p.w_x, x) {
        (Some(w), Some(x)) => {
            let xs = g.try_value(x)?.shape();
            if xs.len() != 2 || xs[0] != hs[0] || xs[1] != p.shape.n_in {
                return Err(Error::shape("lstm_step x", xs, &[hs[0], p.shape.n_in]));
            }
            terms.push((w, x));
        }
        (None, None) => {}
        (Some(_), None) => return Err(Error::Config("lstm_step: cell expects an input".into())),
        (None, Some(_)) => return Err(Error::Config("lstm_step: cell takes no input".into())),
    }

    let gates: Vec<Var> = match &p.gate_norm {
        None => {
            let pre = g.affine_sum(&terms, Some(p.b))?;
            (0..GATES)
                .map(|q| g.columns(pre, q * n, n))
                .collect::<Result<_>>()?
        }
        Some(norms) => {
            let pre = g.affine_sum(&terms, None)?;
            let mut out = Vec::with_capacity(GATES);
            for (q, &(gain, bias)) in norms.iter().enumerate() {
                let slice = g.columns(pre, q * n, n)?;
                let normed = g.layer_norm(slice, gain, bias, LAYER_NORM_EPS)?;
                let b_q = g.columns(p.b, q * n, n)?;
                out.push(g.add_row(normed, b_q)?);
            }
            out
        }
    };

    let f = g.sigmoid(gates[FORGET])?;
    let i = g.sigmoid(gates[INPUT])?;
    let o = g.sigmoid(gates[OUTPUT])?;
    let cand = g.tanh(gates[CANDIDATE])?;
    let keep = g.mul(f, state.c)?;
    let write = g.mul(i, cand)?;
    let mut c_new = g.add(keep, write)?;
    let c_out = match p.cell_norm {
        Some((gain, bias)) => {
            let normed = g.layer_norm(c_new, gain, bias, LAYER_NORM_EPS)?;
            if normalize_stored_cell {
                c_new = normed;
            }
            normed
        }
        None => c_new,
    };
    let squashed = g.tanh(c_out)?;
    let h_new = g.mul(o, squashed)?;

    let c = zoneout_apply(g, state.c, c_new, reg.zoneout_cell, reg.training, rng)?;
    let h = zoneout_apply(g, state.h, h_new, reg.zoneout_hidden, reg.training, rng)?;
    Ok(StateVars { h, c })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Purpose;

    fn sigma(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    /// Scalar-loop reference for the bare cell equations.
    fn reference_step(
        p: &LstmParams<f64>,
        h: &[f64],
        c: &[f64],
        x: &[f64],
        batch: usize,
    ) -> (Vec<f64>, Vec<f64>) {
        let n = p.shape.n_out;
        let n_in = p.shape.n_in;
        let mut h_out = vec![0.0; batch * n];
        let mut c_out = vec![0.0; batch * n];
        for r in 0..batch {
            let mut pre = vec![0.0; GATES * n];
            for (row, pre_v) in pre.iter_mut().enumerate() {
                let mut acc = p.b.data()[row];
                for k in 0..n {
                    acc += p.w_h.data()[row * n + k] * h[r * n + k];
                }
                if let Some(w) = &p.w_x {
                    for k in 0..n_in {
                        acc += w.data()[row * n_in + k] * x[r * n_in + k];
                    }
                }
                *pre_v = acc;
            }
            for j in 0..n {
                let f = sigma(pre[j]);
                let i = sigma(pre[n + j]);
                let o = sigma(pre[2 * n + j]);
                let gg = pre[3 * n + j].tanh();
                let cn = f * c[r * n + j] + i * gg;
                c_out[r * n + j] = cn;
                h_out[r * n + j] = o * cn.tanh();
            }
        }
        (h_out, c_out)
    }

    fn random(len: usize, rng: &mut Rng) -> Vec<f64> {
        (0..len).map(|_| 2.0 * rng.uniform() - 1.0).collect()
    }

    #[test]
    fn matches_scalar_loop_reference() {
        let mut rng = Rng::new(21, Purpose::Init);
        let shape = CellShape { n_in: 5, n_out: 8 };
        let mut p = LstmParams::<f64>::init(shape, NormConfig::NONE, &mut rng).unwrap();
        for v in p.b.data_mut() {
            *v += rng.uniform() - 0.5;
        }
        let batch = 2;
        let h = random(batch * 8, &mut rng);
        let c = random(batch * 8, &mut rng);
        let x = random(batch * 5, &mut rng);
        let mut g = Graph::new();
        let vars = p.bind(&mut g);
        let s = StateVars {
            h: g.constant(Tensor::new(&[batch, 8], h.clone()).unwrap()),
            c: g.constant(Tensor::new(&[batch, 8], c.clone()).unwrap()),
        };
        let xv = g.constant(Tensor::new(&[batch, 5], x.clone()).unwrap());
        let out = lstm_step(&mut g, &vars, s, Some(xv), &RegularizerConfig::OFF, false, &mut rng)
            .unwrap();
        let (rh, rc) = reference_step(&p, &h, &c, &x, batch);
        for (a, b) in g.value(out.h).data().iter().zip(&rh) {
            assert!((a - b).abs() <= 1e-12);
        }
        for (a, b) in g.value(out.c).data().iter().zip(&rc) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn origin_is_fixed_point() {
        let shape = CellShape { n_in: 3, n_out: 4 };
        let p = LstmParams::<f64>::constant(shape, 1.0);
        let mut g = Graph::new();
        let vars = p.bind(&mut g);
        let mut rng = Rng::new(0, Purpose::Zoneout);
        let s = StateVars::detached(&mut g, &LstmState::zeros(2, 4));
        let x = g.constant(Tensor::zeros(&[2, 3]));
        let out =
            lstm_step(&mut g, &vars, s, Some(x), &RegularizerConfig::OFF, false, &mut rng).unwrap();
        assert!(g.value(out.h).data().iter().all(|&v| v == 0.0));
        assert!(g.value(out.c).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forget_bias_decays_cell_geometrically() {
        let shape = CellShape { n_in: 0, n_out: 3 };
        let p = LstmParams::<f64>::constant(shape, 1.0);
        let mut g = Graph::new();
        let vars = p.bind(&mut g);
        let mut rng = Rng::new(0, Purpose::Zoneout);
        let v = [0.5, -2.0, 3.0];
        let mut s = StateVars {
            h: g.constant(Tensor::zeros(&[1, 3])),
            c: g.constant(Tensor::from_f64(&[1, 3], &v).unwrap()),
        };
        let factor = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((factor - 0.731_058_578_630_004_9).abs() < 1e-15);
        for step in 1..=10 {
            s = lstm_step(&mut g, &vars, s, None, &RegularizerConfig::OFF, false, &mut rng)
                .unwrap();
            for (a, &v0) in g.value(s.c).data().iter().zip(&v) {
                let expected = v0 * factor.powi(step);
                assert!((a - expected).abs() <= 1e-12 * v0.abs().max(1.0), "step {step}");
            }
        }
    }

    #[test]
    fn init_sets_forget_bias_and_orthogonality() {
        let mut rng = Rng::new(4, Purpose::Init);
        let shape = CellShape { n_in: 6, n_out: 5 };
        let p = LstmParams::<f64>::init(shape, NormConfig::FULL, &mut rng).unwrap();
        let b = p.b.data();
        assert!(b[..5].iter().all(|&v| v == 1.0));
        assert!(b[5..].iter().all(|&v| v == 0.0));
        let dev = crate::tensor::gram_deviation(20, 5, p.w_h.data());
        assert!(dev <= 1e-6);
        let dev = crate::tensor::gram_deviation(20, 6, p.w_x.as_ref().unwrap().data());
        assert!(dev <= 1e-6);
        assert_eq!(p.param_count(), cell_param_count(shape, NormConfig::FULL));
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let mut rng = Rng::new(4, Purpose::Init);
        let p = LstmParams::<f64>::init(CellShape { n_in: 3, n_out: 4 }, NormConfig::NONE, &mut rng)
            .unwrap();
        let mut g = Graph::new();
        let vars = p.bind(&mut g);
        let s = StateVars::detached(&mut g, &LstmState::zeros(2, 4));
        let x = g.constant(Tensor::zeros(&[2, 5]));
        let err = lstm_step(&mut g, &vars, s, Some(x), &RegularizerConfig::OFF, false, &mut rng)
            .unwrap_err();
        assert!(err.to_string().contains("lstm_step x"), "{err}");
        assert!(lstm_step(&mut g, &vars, s, None, &RegularizerConfig::OFF, false, &mut rng).is_err());
    }

    #[test]
    fn zoneout_degenerate_rates() {
        let mut g = Graph::<f64>::new();
        let mut rng = Rng::new(1, Purpose::Zoneout);
        let prev = g.leaf(Tensor::from_f64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap());
        let new = g.leaf(Tensor::from_f64(&[2, 2], &[-1.0, -2.0, -3.0, -4.0]).unwrap());
        for training in [true, false] {
            let z0 = zoneout_apply(&mut g, prev, new, 0.0, training, &mut rng).unwrap();
            assert_eq!(g.value(z0).data(), g.value(new).data());
            let z1 = zoneout_apply(&mut g, prev, new, 1.0, training, &mut rng).unwrap();
            assert_eq!(g.value(z1).data(), g.value(prev).data());
            assert_eq!(g.value(z1).shape(), &[2, 2]);
        }
        let ze = zoneout_apply(&mut g, prev, new, 0.25, false, &mut rng).unwrap();
        assert_eq!(g.value(ze).data()[0], 0.25 * 1.0 + -0.75);
    }

    #[test]
    fn zoneout_gradient_follows_mask() {
        let mut g = Graph::<f64>::new();
        let mut rng = Rng::new(8, Purpose::Zoneout);
        let prev = g.leaf(Tensor::full(&[1, 64], 1.0));
        let new = g.leaf(Tensor::full(&[1, 64], 2.0));
        let z = zoneout_apply(&mut g, prev, new, 0.5, true, &mut rng).unwrap();
        let s = g.sum(z).unwrap();
        g.backward(s, None).unwrap();
        let (gp, gn) = (g.grad(prev).unwrap(), g.grad(new).unwrap());
        for ((&a, &b), &v) in gp.iter().zip(gn).zip(g.value(z).data()) {
            assert_eq!(a + b, 1.0);
            assert_eq!(v, if a == 1.0 { 1.0 } else { 2.0 });
        }
    }

    #[test]
    fn zoneout_monte_carlo_matches_expectation() {
        let rate = 0.3;
        let draws = 100_000;
        let mut rng = Rng::new(2024, Purpose::Zoneout);
        let prev = [1.0, -2.0, 0.5];
        let new = [3.0, 4.0, -1.5];
        let mut g = Graph::<f64>::new();
        let pv = g.constant(Tensor::from_f64(&[draws, 3], &prev.repeat(draws)).unwrap());
        let nv = g.constant(Tensor::from_f64(&[draws, 3], &new.repeat(draws)).unwrap());
        let z = zoneout_apply(&mut g, pv, nv, rate, true, &mut rng).unwrap();
        let out = g.value(z);
        for u in 0..3 {
            let mean = (0..draws).map(|r| out.data()[r * 3 + u]).sum::<f64>() / draws as f64;
            let expect = rate * prev[u] + (1.0 - rate) * new[u];
            let sd = (rate * (1.0 - rate) / draws as f64).sqrt() * (prev[u] - new[u]).abs();
            assert!((mean - expect).abs() <= 3.0 * sd, "unit {u}: {mean} vs {expect}");
        }
    }

    #[test]
    fn dropout_masks() {
        let mut rng = Rng::new(3, Purpose::Dropout);
        let ones: Tensor<f64> = dropout_mask(&[4, 5], 1.0, true, &mut rng).unwrap();
        assert!(ones.data().iter().all(|&v| v == 1.0));
        let eval: Tensor<f64> = dropout_mask(&[4, 5], 0.2, false, &mut rng).unwrap();
        assert!(eval.data().iter().all(|&v| v == 1.0));
        assert!(dropout_mask::<f64>(&[2], 0.0, true, &mut rng).is_err());

        let n = 200_000;
        let m: Tensor<f64> = dropout_mask(&[n], 0.5, true, &mut rng).unwrap();
        assert!(m.data().iter().all(|&v| v == 0.0 || v == 2.0));
        let mean = m.data().iter().sum::<f64>() / n as f64;
        // each entry has variance (1-keep)/keep = 1
        let sd = (1.0 / n as f64).sqrt();
        assert!((mean - 1.0).abs() <= 3.0 * sd, "{mean}");
    }

    #[test]
    fn regularizer_validation() {
        assert!(RegularizerConfig::OFF.validate().is_ok());
        let bad = RegularizerConfig {
            zoneout_cell: 1.5,
            ..RegularizerConfig::OFF
        };
        assert!(bad.validate().is_err());
        let bad = RegularizerConfig {
            dropout_keep: 0.0,
            ..RegularizerConfig::OFF
        };
        assert!(bad.validate().is_err());
    }
}
