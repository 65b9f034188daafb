//! Layers assembled from graph primitives: linear maps, embeddings, LSTMs,
//! the projected bidirectional encoder stack, conv/batch-norm blocks and
//! location-aware attention.

use std::cell::{RefCell, RefMut};
use std::collections::HashMap;
use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

use super::graph::{Graph, SeqLayout, Var};
use super::params::{ParamId, ParamStore};

/// Which stochastic and statistics behaviours a forward pass uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Mode {
    /// Batch-norm uses batch statistics (and records running-average updates).
    pub train: bool,
    pub dropout: bool,
    pub zoneout: bool,
    /// Prenet dropout, which stays on at generation time.
    pub prenet_dropout: bool,
}

impl Mode {
    pub const TRAIN: Mode = Mode {
        train: true,
        dropout: true,
        zoneout: true,
        prenet_dropout: true,
    };
    /// Training statistics with every stochastic layer off (gradient checks).
    pub const DETERMINISTIC_TRAIN: Mode = Mode {
        train: true,
        dropout: false,
        zoneout: false,
        prenet_dropout: false,
    };
    pub const EVAL: Mode = Mode {
        train: false,
        dropout: false,
        zoneout: false,
        prenet_dropout: false,
    };
    pub const GENERATE: Mode = Mode {
        train: false,
        dropout: false,
        zoneout: false,
        prenet_dropout: true,
    };
}

pub(crate) struct BnUpdate<T> {
    pub mean: ParamId,
    pub var: ParamId,
    pub batch_mean: Vec<T>,
    pub batch_var: Vec<T>,
}

/// One forward pass: the tape, the parameters it reads, and the pass's mode.
pub struct Session<'a, T: Scalar> {
    pub graph: &'a Graph<T>,
    pub store: &'a ParamStore<T>,
    pub mode: Mode,
    rng: RefCell<ChaCha8Rng>,
    bound: RefCell<HashMap<ParamId, Var>>,
    bn_updates: RefCell<Vec<BnUpdate<T>>>,
}

impl<'a, T: Scalar> Session<'a, T> {
    pub fn new(graph: &'a Graph<T>, store: &'a ParamStore<T>, mode: Mode, rng: ChaCha8Rng) -> Self {
        Self {
            graph,
            store,
            mode,
            rng: RefCell::new(rng),
            bound: RefCell::new(HashMap::new()),
            bn_updates: RefCell::new(Vec::new()),
        }
    }

    /// The parameter bound onto this tape (each parameter is bound once).
    pub fn p(&self, id: ParamId) -> Var {
        if let Some(&v) = self.bound.borrow().get(&id) {
            return v;
        }
        let v = self.graph.param(self.store, id);
        self.bound.borrow_mut().insert(id, v);
        v
    }

    pub fn rng(&self) -> RefMut<'_, ChaCha8Rng> {
        self.rng.borrow_mut()
    }

    pub fn constant(&self, t: Tensor<T>) -> Var {
        self.graph.constant(t)
    }

    /// Detaches the batch-norm statistics recorded during this pass.
    pub fn take_bn_updates(&self) -> RunningStatsUpdate<T> {
        RunningStatsUpdate(std::mem::take(&mut *self.bn_updates.borrow_mut()))
    }
}

/// Batch statistics from a training pass, pending merge into running averages.
pub struct RunningStatsUpdate<T>(Vec<BnUpdate<T>>);

impl<T: Scalar> RunningStatsUpdate<T> {
    /// `running = (1 - momentum) * running + momentum * batch`.
    pub fn apply(self, store: &mut ParamStore<T>, momentum: f64) {
        let m = T::from_f64(momentum);
        for u in self.0 {
            for (id, batch) in [(u.mean, &u.batch_mean), (u.var, &u.batch_var)] {
                let p = store.get_mut(id);
                for (r, &b) in p.value.data_mut().iter_mut().zip(batch.iter()) {
                    *r = (T::one() - m) * *r + m * b;
                }
            }
        }
    }
}

/// Inverted-dropout mask: each entry is `1/(1-rate)` with probability
/// `1-rate`, else 0.
pub fn dropout_mask<T: Scalar>(rows: usize, cols: usize, rate: f64, rng: &mut impl Rng) -> Tensor<T> {
    assert!((0.0..1.0).contains(&rate), "dropout rate must be in [0, 1)");
    let keep = T::from_f64(1.0 / (1.0 - rate));
    Tensor::from_fn(rows, cols, |_, _| {
        if rng.gen::<f64>() < rate {
            T::zero()
        } else {
            keep
        }
    })
}

/// Applies dropout when `active`; identity otherwise.
pub fn dropout<T: Scalar>(s: &Session<'_, T>, x: Var, rate: f64, active: bool) -> Var {
    if !active || rate == 0.0 {
        return x;
    }
    let (r, c) = s.graph.shape(x);
    let mask = dropout_mask(r, c, rate, &mut *s.rng());
    s.graph.mul_const(x, Rc::new(mask))
}

fn init_scale(fan_in: usize) -> f64 {
    1.0 / (fan_in.max(1) as f64).sqrt()
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        input: usize,
        output: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let scale = init_scale(input);
        let w = store.add_uniform(&format!("{name}.weight"), input, output, scale, rng);
        let b = bias.then(|| store.add_uniform(&format!("{name}.bias"), 1, output, scale, rng));
        Self { w, b }
    }

    /// `y = x W + b`.
    pub fn forward<T: Scalar>(&self, s: &Session<'_, T>, x: Var) -> Var {
        let y = s.graph.matmul(x, s.p(self.w));
        match self.b {
            Some(b) => s.graph.add_row(y, s.p(b)),
            None => y,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
}

impl Embedding {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        vocab: usize,
        dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            table: store.add_uniform(&format!("{name}.weight"), vocab, dim, 1.0, rng),
        }
    }

    pub fn forward<T: Scalar>(&self, s: &Session<'_, T>, ids: &[usize]) -> Var {
        s.graph.gather_rows(s.p(self.table), ids)
    }
}

fn lstm_params<T: Scalar>(
    store: &mut ParamStore<T>,
    name: &str,
    input: usize,
    hidden: usize,
    rng: &mut impl Rng,
) -> (ParamId, ParamId, ParamId) {
    let scale = init_scale(hidden);
    let wx = store.add_uniform(&format!("{name}.weight_ih"), input, 4 * hidden, scale, rng);
    let wh = store.add_uniform(&format!("{name}.weight_hh"), hidden, 4 * hidden, scale, rng);
    // forget gate starts open
    let bias = Tensor::from_fn(1, 4 * hidden, |_, c| {
        if (hidden..2 * hidden).contains(&c) {
            T::one()
        } else {
            T::zero()
        }
    });
    let b = store.add(&format!("{name}.bias"), bias);
    (wx, wh, b)
}

/// Single LSTM cell stepped manually (decoders).
#[derive(Clone, Debug)]
pub struct LstmCell {
    pub wx: ParamId,
    pub wh: ParamId,
    pub b: ParamId,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let (wx, wh, b) = lstm_params(store, name, input, hidden, rng);
        Self { wx, wh, b, hidden }
    }

    /// One step. With `zoneout > 0` each state unit keeps its previous value
    /// with that probability when zoneout sampling is on, and mixes by the
    /// expectation otherwise.
    pub fn step<T: Scalar>(
        &self,
        s: &Session<'_, T>,
        x: Var,
        h: Var,
        c: Var,
        zoneout: f64,
    ) -> (Var, Var) {
        let g = s.graph;
        let gates = g.add(g.matmul(x, s.p(self.wx)), g.matmul(h, s.p(self.wh)));
        let gates = g.add_row(gates, s.p(self.b));
        let out = g.lstm_cell(gates, c);
        let h_new = g.slice_cols(out, 0, self.hidden);
        let c_new = g.slice_cols(out, self.hidden, self.hidden);
        if zoneout == 0.0 {
            return (h_new, c_new);
        }
        assert!((0.0..1.0).contains(&zoneout), "zoneout rate must be in [0, 1)");
        let (rows, cols) = g.shape(h_new);
        let mix = |_: ()| -> Rc<Tensor<T>> {
            if s.mode.zoneout {
                let mut rng = s.rng();
                Rc::new(Tensor::from_fn(rows, cols, |_, _| {
                    if rng.gen::<f64>() < zoneout {
                        T::one()
                    } else {
                        T::zero()
                    }
                }))
            } else {
                Rc::new(Tensor::full(rows, cols, T::from_f64(zoneout)))
            }
        };
        let h_out = g.blend(h, h_new, mix(()));
        let c_out = g.blend(c, c_new, mix(()));
        (h_out, c_out)
    }

    pub fn zero_state<T: Scalar>(&self, s: &Session<'_, T>, batch: usize) -> (Var, Var) {
        (
            s.constant(Tensor::zeros(batch, self.hidden)),
            s.constant(Tensor::zeros(batch, self.hidden)),
        )
    }
}

/// Unidirectional LSTM over a whole padded batch.
#[derive(Clone, Debug)]
pub struct LstmLayer {
    pub cell: LstmCell,
}

impl LstmLayer {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            cell: LstmCell::new(store, name, input, hidden, rng),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        s: &Session<'_, T>,
        x: Var,
        layout: &Rc<SeqLayout>,
        reverse: bool,
    ) -> Var {
        let g = s.graph;
        let proj = g.add_row(g.matmul(x, s.p(self.cell.wx)), s.p(self.cell.b));
        g.lstm_sequence(proj, s.p(self.cell.wh), layout.clone(), reverse)
    }
}

/// Bidirectional LSTM; output is `[forward | backward]`.
#[derive(Clone, Debug)]
pub struct Blstm {
    pub fwd: LstmLayer,
    pub bwd: LstmLayer,
}

impl Blstm {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        input: usize,
        hidden_per_direction: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            fwd: LstmLayer::new(store, &format!("{name}.fwd"), input, hidden_per_direction, rng),
            bwd: LstmLayer::new(store, &format!("{name}.bwd"), input, hidden_per_direction, rng),
        }
    }

    pub fn output_dim(&self) -> usize {
        2 * self.fwd.cell.hidden
    }

    pub fn forward<T: Scalar>(&self, s: &Session<'_, T>, x: Var, layout: &Rc<SeqLayout>) -> Var {
        let f = self.fwd.forward(s, x, layout, false);
        let b = self.bwd.forward(s, x, layout, true);
        s.graph.concat_cols(&[f, b])
    }
}

/// Keeps rows of even time index: length `T` becomes `ceil(T / 2)`.
pub fn subsample_even<T: Scalar>(g: &Graph<T>, x: Var, layout: &SeqLayout) -> (Var, SeqLayout) {
    let batch = layout.batch;
    let parts: Vec<Var> = (0..layout.steps)
        .step_by(2)
        .map(|t| g.slice_rows(x, t * batch, batch))
        .collect();
    (g.concat_rows(&parts), layout.subsampled())
}

/// Stacked BLSTM layers, each followed by a linear projection and tanh, with
/// even-frame subsampling after selected layers.
#[derive(Clone, Debug)]
pub struct BlstmpEncoder {
    pub layers: Vec<(Blstm, Linear)>,
    pub subsample: Vec<bool>,
    pub projection: usize,
}

impl BlstmpEncoder {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        input: usize,
        units: usize,
        projection: usize,
        layers: usize,
        subsample_layers: &[usize],
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if let Some(&bad) = subsample_layers.iter().find(|&&l| l >= layers) {
            return Err(Error::Config(format!(
                "subsample layer {bad} outside a {layers}-layer encoder"
            )));
        }
        let mut out = Vec::with_capacity(layers);
        let mut dim = input;
        for l in 0..layers {
            let blstm = Blstm::new(store, &format!("{name}.blstm{l}"), dim, units, rng);
            let proj = Linear::new(store, &format!("{name}.proj{l}"), 2 * units, projection, true, rng);
            out.push((blstm, proj));
            dim = projection;
        }
        Ok(Self {
            layers: out,
            subsample: (0..layers).map(|l| subsample_layers.contains(&l)).collect(),
            projection,
        })
    }

    /// Encodes a padded time-major batch. Returns the states and the
    /// subsampled layout; padded state rows are zero.
    pub fn forward<T: Scalar>(
        &self,
        s: &Session<'_, T>,
        x: Var,
        layout: &SeqLayout,
    ) -> Result<(Var, SeqLayout)> {
        if layout.steps == 0 || layout.lens.iter().any(|&l| l == 0) {
            return Err(Error::invalid("encoder input is empty"));
        }
        let g = s.graph;
        let mut layout = Rc::new(layout.clone());
        let mut h = x;
        for ((blstm, proj), &sub) in self.layers.iter().zip(&self.subsample) {
            h = blstm.forward(s, h, &layout);
            h = g.tanh(proj.forward(s, h));
            if sub {
                let (next, next_layout) = subsample_even(g, h, &layout);
                h = next;
                layout = Rc::new(next_layout);
            }
        }
        let mask = layout.row_mask::<T>();
        let mask = Tensor::from_fn(mask.rows(), self.projection, |r, _| mask.get(r, 0));
        let h = g.mul_const(h, Rc::new(mask));
        Ok((h, (*layout).clone()))
    }

    pub fn output_length(&self, input_len: usize) -> usize {
        self.subsample
            .iter()
            .filter(|&&s| s)
            .fold(input_len, |len, _| len.div_ceil(2))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Linear,
    Relu,
    Tanh,
}

/// Same-length convolution over time, optional batch norm, activation, dropout.
#[derive(Clone, Debug)]
pub struct ConvBnBlock {
    pub w: ParamId,
    pub bn: Option<(ParamId, ParamId, ParamId, ParamId)>,
    pub width: usize,
    pub activation: Activation,
    pub dropout: f64,
}

const BN_EPS: f64 = 1e-5;

impl ConvBnBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        input: usize,
        filters: usize,
        width: usize,
        activation: Activation,
        batch_norm: bool,
        dropout: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if width % 2 == 0 {
            return Err(Error::Config(format!(
                "convolution width {width} must be odd for same-length padding"
            )));
        }
        let w = store.add_uniform(
            &format!("{name}.conv"),
            width * input,
            filters,
            init_scale(width * input),
            rng,
        );
        let bn = batch_norm.then(|| {
            (
                store.add(&format!("{name}.bn.gamma"), Tensor::full(1, filters, T::one())),
                store.add_zeros(&format!("{name}.bn.beta"), 1, filters),
                store.add_buffer(&format!("{name}.bn.running_mean"), Tensor::zeros(1, filters)),
                store.add_buffer(
                    &format!("{name}.bn.running_var"),
                    Tensor::full(1, filters, T::one()),
                ),
            )
        });
        Ok(Self {
            w,
            bn,
            width,
            activation,
            dropout,
        })
    }

    pub fn forward<T: Scalar>(&self, s: &Session<'_, T>, x: Var, layout: &Rc<SeqLayout>) -> Var {
        let g = s.graph;
        let mut y = g.conv1d(x, s.p(self.w), layout.clone(), self.width);
        if let Some((gamma, beta, mean, var)) = self.bn {
            let eps = T::from_f64(BN_EPS);
            if s.mode.train {
                let (out, bm, bv) = g.batch_norm(y, s.p(gamma), s.p(beta), layout.clone(), None, eps);
                s.bn_updates.borrow_mut().push(BnUpdate {
                    mean,
                    var,
                    batch_mean: bm,
                    batch_var: bv,
                });
                y = out;
            } else {
                let (rm, rv) = (s.store.get(mean).value.data(), s.store.get(var).value.data());
                y = g
                    .batch_norm(y, s.p(gamma), s.p(beta), layout.clone(), Some((rm, rv)), eps)
                    .0;
            }
        }
        y = match self.activation {
            Activation::Linear => y,
            Activation::Relu => g.relu(y),
            Activation::Tanh => g.tanh(y),
        };
        dropout(s, y, self.dropout, s.mode.dropout)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    /// Convolve the previous step's weights.
    Previous,
    /// Convolve the running sum of all past weights.
    Cumulative,
}

/// Location-aware attention:
/// `e_t = wᵀ tanh(W_q q + W_h h_t + W_f f_t + b)` with `f = conv(feedback)`.
#[derive(Clone, Debug)]
pub struct LocationAttention {
    pub w_query: ParamId,
    pub w_state: ParamId,
    pub bias: ParamId,
    pub w_loc: ParamId,
    pub conv: ParamId,
    pub w_energy: ParamId,
    pub width: usize,
    pub mode: AttentionMode,
}

/// Encoder states prepared for repeated attention queries.
pub struct AttentionMemory {
    pub states: Var,
    pub proj: Var,
    pub layout: Rc<SeqLayout>,
    pub mask: Vec<bool>,
}

/// Attention weights of the last step plus their running sum.
#[derive(Clone, Copy, Debug)]
pub struct AttentionState {
    pub weights: Var,
    pub accumulated: Var,
}

impl LocationAttention {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        query_dim: usize,
        state_dim: usize,
        att_dim: usize,
        filters: usize,
        width: usize,
        mode: AttentionMode,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if width % 2 == 0 {
            return Err(Error::Config(format!("attention filter width {width} must be odd")));
        }
        Ok(Self {
            w_query: store.add_uniform(&format!("{name}.query"), query_dim, att_dim, init_scale(query_dim), rng),
            w_state: store.add_uniform(&format!("{name}.state"), state_dim, att_dim, init_scale(state_dim), rng),
            bias: store.add_zeros(&format!("{name}.bias"), 1, att_dim),
            w_loc: store.add_uniform(&format!("{name}.loc"), filters, att_dim, init_scale(filters), rng),
            conv: store.add_uniform(&format!("{name}.conv"), width, filters, init_scale(width), rng),
            w_energy: store.add_uniform(&format!("{name}.energy"), att_dim, 1, init_scale(att_dim), rng),
            width,
            mode,
        })
    }

    /// Projects the (T·B)×H states once per utterance batch.
    pub fn prepare<T: Scalar>(
        &self,
        s: &Session<'_, T>,
        states: Var,
        layout: &SeqLayout,
    ) -> Result<AttentionMemory> {
        if layout.steps == 0 || layout.lens.iter().any(|&l| l == 0) {
            return Err(Error::invalid("attention over an empty state sequence"));
        }
        let g = s.graph;
        let proj = g.add_row(g.matmul(states, s.p(self.w_state)), s.p(self.bias));
        Ok(AttentionMemory {
            states,
            proj,
            layout: Rc::new(layout.clone()),
            mask: layout.bt_mask(),
        })
    }

    /// Previous-mode feedback starts uniform over valid positions; the running
    /// sum starts at zero.
    pub fn initial_state<T: Scalar>(&self, s: &Session<'_, T>, mem: &AttentionMemory) -> AttentionState {
        let layout = &mem.layout;
        let uniform = Tensor::from_fn(layout.batch, layout.steps, |b, t| {
            if t < layout.lens[b] {
                T::one() / T::from_f64(layout.lens[b] as f64)
            } else {
                T::zero()
            }
        });
        let weights = match self.mode {
            AttentionMode::Previous => uniform,
            AttentionMode::Cumulative => Tensor::zeros(layout.batch, layout.steps),
        };
        AttentionState {
            weights: s.constant(weights),
            accumulated: s.constant(Tensor::zeros(layout.batch, layout.steps)),
        }
    }

    /// Energies (B×T) for a query; exposed for testing softmax properties.
    pub fn energies<T: Scalar>(
        &self,
        s: &Session<'_, T>,
        mem: &AttentionMemory,
        query: Var,
        state: &AttentionState,
    ) -> Var {
        let g = s.graph;
        let (batch, steps) = (mem.layout.batch, mem.layout.steps);
        let feedback = match self.mode {
            AttentionMode::Previous => state.weights,
            AttentionMode::Cumulative => state.accumulated,
        };
        let fb = g.reshape(g.transpose(feedback), steps * batch, 1);
        let loc = g.conv1d(fb, s.p(self.conv), mem.layout.clone(), self.width);
        let loc = g.matmul(loc, s.p(self.w_loc));
        let q = g.tile_rows(g.matmul(query, s.p(self.w_query)), steps);
        let pre = g.add(g.add(mem.proj, q), loc);
        let e = g.matmul(g.tanh(pre), s.p(self.w_energy));
        g.transpose(g.reshape(e, steps, batch))
    }

    /// One attention step. Returns the context vectors (B×H) and the new state.
    pub fn attend<T: Scalar>(
        &self,
        s: &Session<'_, T>,
        mem: &AttentionMemory,
        query: Var,
        state: &AttentionState,
    ) -> (Var, AttentionState) {
        let g = s.graph;
        let e = self.energies(s, mem, query, state);
        let weights = g.masked_softmax(e, &mem.mask);
        let context = g.weighted_sum(weights, mem.states);
        let accumulated = g.add(state.accumulated, weights);
        (context, AttentionState { weights, accumulated })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn session_parts() -> (Graph<f64>, ParamStore<f64>, ChaCha8Rng) {
        (Graph::new(), ParamStore::new(), ChaCha8Rng::seed_from_u64(7))
    }

    #[test]
    fn linear_identity_and_zero_weight() {
        let (g, mut store, mut rng) = session_parts();
        let lin = Linear::new(&mut store, "l", 3, 3, true, &mut rng);
        store.get_mut(lin.w).value = Tensor::from_fn(3, 3, |i, j| if i == j { 1.0 } else { 0.0 });
        store.get_mut(lin.b.unwrap()).value = Tensor::zeros(1, 3);
        let zero_w = Linear::new(&mut store, "z", 3, 2, true, &mut rng);
        store.get_mut(zero_w.w).value = Tensor::zeros(3, 2);
        let s = Session::new(&g, &store, Mode::EVAL, rng);
        let x = Tensor::from_vec(2, 3, vec![0.5, -1.0, 2.0, 3.0, 0.0, -0.25]);
        let y = lin.forward(&s, s.constant(x.clone()));
        assert_eq!(*g.value(y), x);
        let z = zero_w.forward(&s, s.constant(x));
        let b = store.get(zero_w.b.unwrap()).value.clone();
        assert_eq!(g.value(z).row(0), b.row(0));
        assert_eq!(g.value(z).row(1), b.row(0));
    }

    #[test]
    fn zero_weight_lstm_halves_the_cell() {
        let (g, mut store, mut rng) = session_parts();
        let cell = LstmCell::new(&mut store, "c", 4, 3, &mut rng);
        for id in [cell.wx, cell.wh, cell.b] {
            store.get_mut(id).value.fill(0.0);
        }
        let s = Session::new(&g, &store, Mode::EVAL, rng);
        let x = s.constant(Tensor::full(2, 4, 0.7));
        let (h0, c0) = (s.constant(Tensor::full(2, 3, 0.3)), s.constant(Tensor::full(2, 3, -0.4)));
        let (h, c) = cell.step(&s, x, h0, c0, 0.0);
        // every gate is sigmoid(0) = 0.5 and the candidate is tanh(0) = 0
        assert!(g.value(c).data().iter().all(|&v| (v + 0.2).abs() < 1e-15));
        let expect = 0.5 * (-0.2f64).tanh();
        assert!(g.value(h).data().iter().all(|&v| (v - expect).abs() < 1e-15));
    }

    #[test]
    fn zoneout_near_one_keeps_previous_state() {
        let (g, mut store, mut rng) = session_parts();
        let cell = LstmCell::new(&mut store, "c", 2, 3, &mut rng);
        let s = Session::new(&g, &store, Mode::EVAL, rng);
        let x = s.constant(Tensor::full(1, 2, 1.0));
        let h0 = Tensor::from_vec(1, 3, vec![0.2, -0.5, 0.9]);
        let (hv, cv) = (s.constant(h0.clone()), s.constant(Tensor::full(1, 3, 0.1)));
        let (h, _) = cell.step(&s, x, hv, cv, 1.0 - 1e-9);
        for (a, b) in g.value(h).data().iter().zip(h0.data()) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn even_width_conv_is_rejected() {
        let (_, mut store, mut rng) = session_parts();
        let err = ConvBnBlock::new(&mut store, "c", 2, 2, 4, Activation::Relu, true, 0.0, &mut rng);
        assert!(err.is_err());
    }

    #[test]
    fn identity_kernel_conv_without_bn_is_identity() {
        let (g, mut store, mut rng) = session_parts();
        let block =
            ConvBnBlock::new(&mut store, "c", 2, 2, 3, Activation::Linear, false, 0.0, &mut rng).unwrap();
        // center tap (k = 1) is the 2x2 identity
        store.get_mut(block.w).value =
            Tensor::from_fn(6, 2, |r, c| if r >= 2 && r < 4 && r - 2 == c { 1.0 } else { 0.0 });
        let s = Session::new(&g, &store, Mode::EVAL, rng);
        let layout = Rc::new(SeqLayout::new(vec![3, 2]));
        let x = Tensor::from_fn(6, 2, |r, c| if layout.row_valid(r) { (r * 2 + c) as f64 } else { 0.0 });
        let y = block.forward(&s, s.constant(x.clone()), &layout);
        assert_eq!(*g.value(y), x);
    }

    #[test]
    fn zero_input_relu_block_outputs_zero() {
        let (g, mut store, mut rng) = session_parts();
        let block =
            ConvBnBlock::new(&mut store, "c", 3, 4, 5, Activation::Relu, true, 0.0, &mut rng).unwrap();
        let s = Session::new(&g, &store, Mode::TRAIN, rng);
        let layout = Rc::new(SeqLayout::new(vec![4, 2]));
        let y = block.forward(&s, s.constant(Tensor::zeros(8, 3)), &layout);
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn blstmp_length_rule_and_range() {
        let (g, mut store, mut rng) = session_parts();
        let enc = BlstmpEncoder::new(&mut store, "enc", 3, 4, 5, 2, &[0, 1], &mut rng).unwrap();
        let s = Session::new(&g, &store, Mode::EVAL, rng.clone());
        for (t, expect) in [(7, 2), (8, 2), (1, 1), (9, 3)] {
            let layout = SeqLayout::new(vec![t]);
            let x = Tensor::from_fn(t, 3, |_, _| rng.gen_range(-3.0..3.0));
            let (h, out) = enc.forward(&s, s.constant(x), &layout).unwrap();
            assert_eq!(out.lens, vec![expect]);
            assert_eq!(g.shape(h), (expect, 5));
            assert!(g.value(h).data().iter().all(|v| v.abs() < 1.0));
        }
        assert!(enc
            .forward(&s, s.constant(Tensor::zeros(0, 3)), &SeqLayout::new(vec![0]))
            .is_err());
    }

    #[test]
    fn dropout_rate_zero_and_eval_are_identity() {
        let (g, store, rng) = session_parts();
        let s = Session::new(&g, &store, Mode::TRAIN, rng);
        let x = s.constant(Tensor::full(3, 3, 2.0));
        assert_eq!(dropout(&s, x, 0.0, true), x);
        assert_eq!(dropout(&s, x, 0.5, false), x);
    }

    #[test]
    fn dropout_keep_fraction_within_three_sigma() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let n = 100_000usize;
        for rate in [0.1, 0.5, 0.8] {
            let m: Tensor<f64> = dropout_mask(1, n, rate, &mut rng);
            let kept = m.data().iter().filter(|&&v| v > 0.0).count() as f64;
            let p = 1.0 - rate;
            let sigma = (n as f64 * p * (1.0 - p)).sqrt();
            assert!((kept - n as f64 * p).abs() < 3.0 * sigma, "rate {rate}: kept {kept}");
            let scaled = m.data().iter().find(|&&v| v > 0.0).copied().unwrap();
            assert!((scaled - 1.0 / p).abs() < 1e-12);
        }
    }

    #[test]
    fn single_state_attention_has_unit_weight() {
        let (g, mut store, mut rng) = session_parts();
        let att = LocationAttention::new(&mut store, "a", 3, 2, 4, 2, 3, AttentionMode::Previous, &mut rng).unwrap();
        let s = Session::new(&g, &store, Mode::EVAL, rng);
        let h = Tensor::from_vec(1, 2, vec![0.3, -0.6]);
        let mem = att.prepare(&s, s.constant(h.clone()), &SeqLayout::new(vec![1])).unwrap();
        let st = att.initial_state(&s, &mem);
        let q = s.constant(Tensor::full(1, 3, 0.5));
        let (ctx, next) = att.attend(&s, &mem, q, &st);
        assert_eq!(g.value(next.weights).data(), &[1.0]);
        assert_eq!(*g.value(ctx), h);
    }
}
