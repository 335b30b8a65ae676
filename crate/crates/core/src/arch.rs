//! Model wiring: the Fast-Slow network and the stacked and sequential
//! baselines, all built from [`crate::cells`] LSTM cells with a learned
//! input embedding and an affine output head.
//!
//! Per time step the Fast-Slow network runs
//!
//! ```text
//! F1(state carried from Fk at t-1, embed(x_t))
//! S (own state at t-1, h of F1)
//! F2(state of F1, h of S)
//! Fi(state of F(i-1))            for 3 ≤ i ≤ k
//! logits = W h(Fk) + b
//! ```
//!
//! The Fast cells share one (h, c) pair threaded through the chain; each
//! has its own parameters. The sequential baseline is the same chain with
//! the Slow cell removed, and the stacked baseline gives every layer its
//! own recurrent state with the layer below as input.

use serde::{Deserialize, Serialize};

use crate::cells::{
    cell_param_count, dropout, lstm_step, CellShape, LstmParams, LstmState, LstmVars, Noise,
    NormConfig, RegularizerConfig, StateVars,
};
use crate::error::{Error, Result};
use crate::rng::{Purpose, Rng};
use crate::tensor::{orthogonal_init, Graph, Scalar, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchKind {
    FastSlow,
    Stacked,
    Sequential,
}

impl ArchKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ArchKind::FastSlow => "fast_slow",
            ArchKind::Stacked => "stacked",
            ArchKind::Sequential => "sequential",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureSpec {
    pub kind: ArchKind,
    /// Fast cells for `fast_slow`, layers or chained cells otherwise.
    pub cells: usize,
    #[serde(default)]
    pub fast_size: usize,
    #[serde(default)]
    pub slow_size: usize,
    #[serde(default)]
    pub cell_size: usize,
    /// Filled in from the corpus when left at 0 in a config file.
    #[serde(default)]
    pub vocab: usize,
    pub embed_dim: usize,
    /// Apply dropout to the Fast-to-Slow edge as well.
    #[serde(default = "yes")]
    pub slow_input_dropout: bool,
    pub norm: NormConfig,
    pub regularization: RegularizerConfig,
}

fn yes() -> bool {
    true
}

impl ArchitectureSpec {
    pub fn fast_slow(k: usize, fast: usize, slow: usize, vocab: usize, embed: usize) -> Self {
        Self {
            kind: ArchKind::FastSlow,
            cells: k,
            fast_size: fast,
            slow_size: slow,
            cell_size: 0,
            vocab,
            embed_dim: embed,
            slow_input_dropout: true,
            norm: NormConfig::FULL,
            regularization: RegularizerConfig::OFF,
        }
    }

    pub fn stacked(layers: usize, size: usize, vocab: usize, embed: usize) -> Self {
        Self {
            kind: ArchKind::Stacked,
            cell_size: size,
            ..Self::fast_slow(layers, 0, 0, vocab, embed)
        }
    }

    pub fn sequential(cells: usize, size: usize, vocab: usize, embed: usize) -> Self {
        Self {
            kind: ArchKind::Sequential,
            cell_size: size,
            ..Self::fast_slow(cells, 0, 0, vocab, embed)
        }
    }

    pub fn with_norm(mut self, norm: NormConfig) -> Self {
        self.norm = norm;
        self
    }

    pub fn with_regularization(mut self, reg: RegularizerConfig) -> Self {
        self.regularization = reg;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab == 0 {
            return Err(Error::Config("vocabulary size must be positive".into()));
        }
        if self.embed_dim == 0 || self.cells == 0 {
            return Err(Error::Config("embedding size and cell count must be positive".into()));
        }
        match self.kind {
            ArchKind::FastSlow => {
                if self.cells < 2 {
                    return Err(Error::Config(format!(
                        "fast_slow needs at least 2 Fast cells, got {}",
                        self.cells
                    )));
                }
                if self.fast_size == 0 || self.slow_size == 0 {
                    return Err(Error::Config("fast_size and slow_size must be positive".into()));
                }
            }
            ArchKind::Stacked | ArchKind::Sequential => {
                if self.cell_size == 0 {
                    return Err(Error::Config("cell_size must be positive".into()));
                }
            }
        }
        if self.norm.normalize_stored_cell && !self.norm.cell_norm {
            return Err(Error::Config("normalize_stored_cell requires cell_norm".into()));
        }
        self.regularization.validate()
    }

    /// Cell shapes in parameter order: `[F1, …, Fk, S]` for Fast-Slow,
    /// bottom-up layers for stacked, chain order for sequential.
    pub fn cell_shapes(&self) -> Vec<CellShape> {
        let e = self.embed_dim;
        match self.kind {
            ArchKind::FastSlow => {
                let (f, s) = (self.fast_size, self.slow_size);
                let mut v = vec![
                    CellShape { n_in: e, n_out: f },
                    CellShape { n_in: s, n_out: f },
                ];
                v.extend((2..self.cells).map(|_| CellShape { n_in: 0, n_out: f }));
                v.push(CellShape { n_in: f, n_out: s });
                v
            }
            ArchKind::Stacked => (0..self.cells)
                .map(|i| CellShape {
                    n_in: if i == 0 { e } else { self.cell_size },
                    n_out: self.cell_size,
                })
                .collect(),
            ArchKind::Sequential => (0..self.cells)
                .map(|i| CellShape {
                    n_in: if i == 0 { e } else { 0 },
                    n_out: self.cell_size,
                })
                .collect(),
        }
    }

    pub fn top_width(&self) -> usize {
        match self.kind {
            ArchKind::FastSlow => self.fast_size,
            _ => self.cell_size,
        }
    }

    /// Widths of the carried states, in [`ModelState`] order.
    pub fn state_widths(&self) -> Vec<usize> {
        match self.kind {
            ArchKind::FastSlow => vec![self.fast_size, self.slow_size],
            ArchKind::Stacked => vec![self.cell_size; self.cells],
            ArchKind::Sequential => vec![self.cell_size],
        }
    }

    /// Layers reported by the dynamics analyses. For the sequential model
    /// only the first cell is reported.
    pub fn layer_labels(&self) -> Vec<String> {
        match self.kind {
            ArchKind::FastSlow => (1..=self.cells)
                .map(|i| format!("Fast-{i}"))
                .chain(std::iter::once("Slow".to_string()))
                .collect(),
            ArchKind::Stacked => (1..=self.cells).map(|i| format!("Stacked-{i}")).collect(),
            ArchKind::Sequential => vec!["Sequential-1".to_string()],
        }
    }

    /// Exact number of learnable scalars.
    pub fn param_count(&self) -> Result<usize> {
        self.validate()?;
        let cells: usize = self
            .cell_shapes()
            .into_iter()
            .map(|s| cell_param_count(s, self.norm))
            .sum();
        Ok(self.vocab * self.embed_dim + cells + self.vocab * self.top_width() + self.vocab)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub spec: ArchitectureSpec,
    /// `V × embed_dim`
    pub embedding: Tensor<T>,
    pub cells: Vec<LstmParams<T>>,
    /// `V × top_width`
    pub out_w: Tensor<T>,
    pub out_b: Tensor<T>,
}

impl<T: Scalar> ModelParams<T> {
    /// Orthogonal matrices, forget biases 1, everything else zero or one as
    /// appropriate. Consumes the `Init` stream of `seed`.
    pub fn init(spec: &ArchitectureSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = Rng::new(seed, Purpose::Init);
        let embedding = orthogonal_init(spec.vocab, spec.embed_dim, &mut rng)?;
        let cells = spec
            .cell_shapes()
            .into_iter()
            .map(|s| LstmParams::init(s, spec.norm, &mut rng))
            .collect::<Result<_>>()?;
        let out_w = orthogonal_init(spec.vocab, spec.top_width(), &mut rng)?;
        Ok(Self {
            spec: spec.clone(),
            embedding,
            cells,
            out_w,
            out_b: Tensor::zeros(&[spec.vocab]),
        })
    }

    /// Every weight zero, forget biases set to `forget_bias`, no layer norm.
    pub fn constant(spec: &ArchitectureSpec, forget_bias: f64) -> Result<Self> {
        let spec = spec.clone().with_norm(NormConfig::NONE);
        spec.validate()?;
        Ok(Self {
            embedding: Tensor::zeros(&[spec.vocab, spec.embed_dim]),
            cells: spec
                .cell_shapes()
                .into_iter()
                .map(|s| LstmParams::constant(s, forget_bias))
                .collect(),
            out_w: Tensor::zeros(&[spec.vocab, spec.top_width()]),
            out_b: Tensor::zeros(&[spec.vocab]),
            spec,
        })
    }

    /// Named tensors in canonical order (checkpoints and optimizer rely on it).
    pub fn tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![("embedding".to_string(), &self.embedding)];
        for (i, cell) in self.cells.iter().enumerate() {
            for (name, t) in cell.tensors() {
                out.push((format!("cell{i}.{name}"), t));
            }
        }
        out.push(("out.w".into(), &self.out_w));
        out.push(("out.b".into(), &self.out_b));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![&mut self.embedding];
        for cell in &mut self.cells {
            out.extend(cell.tensors_mut());
        }
        out.push(&mut self.out_w);
        out.push(&mut self.out_b);
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn bind(&self, g: &mut Graph<T>) -> ModelVars {
        ModelVars {
            embedding: g.leaf(self.embedding.clone()),
            cells: self.cells.iter().map(|c| c.bind(g)).collect(),
            out_w: g.leaf(self.out_w.clone()),
            out_b: g.leaf(self.out_b.clone()),
        }
    }

    /// Copies gradients of the bound leaves into the parameter grad slots
    /// (tensors without a gradient get zeros).
    pub fn pull_grads(&mut self, g: &Graph<T>, vars: &ModelVars) -> Result<()> {
        let handles = vars.all();
        let mut tensors = self.tensors_mut();
        if handles.len() != tensors.len() {
            return Err(Error::Graph("bound variables do not match parameters".into()));
        }
        for (t, v) in tensors.iter_mut().zip(handles) {
            let grad = match g.grad(v) {
                Some(gr) => gr.to_vec(),
                None => vec![T::zero(); t.len()],
            };
            t.set_grad(grad)?;
        }
        Ok(())
    }

    pub fn clear_grads(&mut self) {
        for t in self.tensors_mut() {
            t.clear_grad();
        }
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        let cast_ln = |ln: &crate::cells::LayerNormParams<T>| crate::cells::LayerNormParams {
            gain: ln.gain.cast(),
            bias: ln.bias.cast(),
        };
        ModelParams {
            spec: self.spec.clone(),
            embedding: self.embedding.cast(),
            cells: self
                .cells
                .iter()
                .map(|c| LstmParams {
                    shape: c.shape,
                    w_h: c.w_h.cast(),
                    w_x: c.w_x.as_ref().map(|w| w.cast()),
                    b: c.b.cast(),
                    gate_norm: c.gate_norm.as_ref().map(|v| v.iter().map(cast_ln).collect()),
                    cell_norm: c.cell_norm.as_ref().map(cast_ln),
                })
                .collect(),
            out_w: self.out_w.cast(),
            out_b: self.out_b.cast(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.is_finite())
    }
}

#[derive(Clone, Debug)]
pub struct ModelVars {
    pub embedding: Var,
    pub cells: Vec<LstmVars>,
    pub out_w: Var,
    pub out_b: Var,
}

impl ModelVars {
    /// Handles in the order of [`ModelParams::tensors`].
    pub fn all(&self) -> Vec<Var> {
        let mut out = vec![self.embedding];
        for c in &self.cells {
            out.extend(c.all());
        }
        out.push(self.out_w);
        out.push(self.out_b);
        out
    }
}

/// Carried recurrent state: `[fast, slow]` for Fast-Slow, one entry per
/// layer for stacked, a single chain state for sequential.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState<T> {
    pub cells: Vec<LstmState<T>>,
}

impl<T: Scalar> ModelState<T> {
    pub fn zeros(spec: &ArchitectureSpec, batch: usize) -> Self {
        Self {
            cells: spec
                .state_widths()
                .into_iter()
                .map(|n| LstmState::zeros(batch, n))
                .collect(),
        }
    }

    pub fn batch(&self) -> usize {
        self.cells[0].h.shape()[0]
    }

    pub fn detach_into(&self, g: &mut Graph<T>) -> Vec<StateVars> {
        self.cells.iter().map(|s| StateVars::detached(g, s)).collect()
    }

    pub fn read(g: &Graph<T>, vars: &[StateVars]) -> Self {
        Self {
            cells: vars.iter().map(|v| v.read(g)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.cells.iter().all(|s| s.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> ModelState<U> {
        ModelState {
            cells: self
                .cells
                .iter()
                .map(|s| LstmState {
                    h: s.h.cast(),
                    c: s.c.cast(),
                })
                .collect(),
        }
    }
}

pub struct StepOutput {
    pub logits: Var,
    pub state: Vec<StateVars>,
    /// Cell state of each analysis layer, in [`ArchitectureSpec::layer_labels`] order.
    pub cell_states: Vec<Var>,
}

/// Optional additive perturbation of one analysis layer's cell state.
pub struct Perturbation<'a, T> {
    pub layer: usize,
    pub delta: &'a Tensor<T>,
}

fn perturb<T: Scalar>(
    g: &mut Graph<T>,
    s: StateVars,
    layer: usize,
    p: Option<&Perturbation<'_, T>>,
) -> Result<StateVars> {
    match p {
        Some(p) if p.layer == layer => Ok(StateVars {
            h: s.h,
            c: g.add_const(s.c, p.delta)?,
        }),
        _ => Ok(s),
    }
}

/// One time step of any architecture.
#[allow(clippy::too_many_arguments)]
pub fn step<T: Scalar>(
    g: &mut Graph<T>,
    spec: &ArchitectureSpec,
    vars: &ModelVars,
    state: &[StateVars],
    tokens: &[usize],
    reg: &RegularizerConfig,
    noise: &mut Noise,
    perturbation: Option<&Perturbation<'_, T>>,
) -> Result<StepOutput> {
    if state.len() != spec.state_widths().len() {
        return Err(Error::Config(format!(
            "{} model expects {} carried states, got {}",
            spec.kind.as_str(),
            spec.state_widths().len(),
            state.len()
        )));
    }
    let stored = spec.norm.normalize_stored_cell;
    let embedded = g.embedding(vars.embedding, tokens)?;
    let input = dropout(g, embedded, reg, &mut noise.dropout)?;
    let mut cell_states = Vec::new();
    let (top, new_state) = match spec.kind {
        ArchKind::FastSlow => {
            let k = spec.cells;
            let (fast_cells, slow) = (&vars.cells[..k], &vars.cells[k]);
            let f1 = lstm_step(g, &fast_cells[0], state[0], Some(input), reg, stored, &mut noise.zoneout)?;
            let f1 = perturb(g, f1, 0, perturbation)?;
            let slow_in = if spec.slow_input_dropout {
                dropout(g, f1.h, reg, &mut noise.dropout)?
            } else {
                f1.h
            };
            let s = lstm_step(g, slow, state[1], Some(slow_in), reg, stored, &mut noise.zoneout)?;
            let s = perturb(g, s, k, perturbation)?;
            let slow_out = dropout(g, s.h, reg, &mut noise.dropout)?;
            let mut fast = lstm_step(g, &fast_cells[1], f1, Some(slow_out), reg, stored, &mut noise.zoneout)?;
            fast = perturb(g, fast, 1, perturbation)?;
            cell_states.push(f1.c);
            cell_states.push(fast.c);
            for (i, cell) in fast_cells.iter().enumerate().skip(2) {
                fast = lstm_step(g, cell, fast, None, reg, stored, &mut noise.zoneout)?;
                fast = perturb(g, fast, i, perturbation)?;
                cell_states.push(fast.c);
            }
            cell_states.push(s.c);
            (fast.h, vec![fast, s])
        }
        ArchKind::Stacked => {
            let mut below = input;
            let mut new_state = Vec::with_capacity(spec.cells);
            for (i, cell) in vars.cells.iter().enumerate() {
                if i > 0 {
                    below = dropout(g, below, reg, &mut noise.dropout)?;
                }
                let s = lstm_step(g, cell, state[i], Some(below), reg, stored, &mut noise.zoneout)?;
                let s = perturb(g, s, i, perturbation)?;
                cell_states.push(s.c);
                below = s.h;
                new_state.push(s);
            }
            (below, new_state)
        }
        ArchKind::Sequential => {
            let mut s = lstm_step(g, &vars.cells[0], state[0], Some(input), reg, stored, &mut noise.zoneout)?;
            s = perturb(g, s, 0, perturbation)?;
            cell_states.push(s.c);
            for cell in &vars.cells[1..] {
                s = lstm_step(g, cell, s, None, reg, stored, &mut noise.zoneout)?;
            }
            (s.h, vec![s])
        }
    };
    let top = dropout(g, top, reg, &mut noise.dropout)?;
    let logits = g.affine(vars.out_w, top, Some(vars.out_b))?;
    Ok(StepOutput {
        logits,
        state: new_state,
        cell_states,
    })
}

/// Values produced by one [`Session::step`].
pub struct StepValues<T> {
    pub logits: Tensor<T>,
    pub cell_states: Vec<Tensor<T>>,
}

/// Forward-only stepping with carried state, for evaluation and analysis.
/// Parameters are bound once; each step's nodes are discarded afterwards.
pub struct Session<T: Scalar> {
    spec: ArchitectureSpec,
    graph: Graph<T>,
    vars: ModelVars,
    base: usize,
    state: ModelState<T>,
    reg: RegularizerConfig,
    noise: Noise,
}

impl<T: Scalar> Session<T> {
    /// Regularizers run in evaluation mode.
    pub fn new(params: &ModelParams<T>, batch: usize) -> Self {
        let mut graph = Graph::new();
        let vars = params.bind(&mut graph);
        Self {
            spec: params.spec.clone(),
            base: graph.len(),
            graph,
            vars,
            state: ModelState::zeros(&params.spec, batch),
            reg: params.spec.regularization.eval(),
            noise: Noise::new(0),
        }
    }

    pub fn reset(&mut self) {
        self.state = ModelState::zeros(&self.spec, self.state.batch());
    }

    pub fn state(&self) -> &ModelState<T> {
        &self.state
    }

    pub fn step(&mut self, tokens: &[usize]) -> Result<StepValues<T>> {
        let g = &mut self.graph;
        let sv = self.state.detach_into(g);
        let out = step(g, &self.spec, &self.vars, &sv, tokens, &self.reg, &mut self.noise, None)?;
        let values = StepValues {
            logits: g.value(out.logits).clone(),
            cell_states: out.cell_states.iter().map(|&c| g.value(c).clone()).collect(),
        };
        self.state = ModelState::read(g, &out.state);
        g.truncate(self.base);
        Ok(values)
    }
}
