//! Text-to-encoder model: predicts recognizer encoder states and per-frame
//! stop probabilities from characters.
//!
//! Characters are embedded, passed through convolution blocks and a BLSTM,
//! then decoded autoregressively with cumulative location-aware attention,
//! a prenet on the feedback path, a two-layer LSTM, a shared tanh output
//! head and a convolutional postnet residual.

use std::path::{Path, PathBuf};
use std::rc::Rc;

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::corpus::batch::{Dataset, InputKind};
use crate::corpus::manifest::{Entry, EntryKind, Manifest};
use crate::corpus::tensor_io::{read_tensor, write_tensor};
use crate::corpus::vocab::Vocabulary;
use crate::decode::heatmap::diagonality;
use crate::error::{Error, Result};
use crate::nn::layers::dropout;
use crate::nn::{
    Activation, AttentionMemory, AttentionMode, AttentionState, Blstm, ConvBnBlock,
    Embedding, Graph, Linear, LocationAttention, LstmCell, Mode, ParamStore, SeqLayout, Session,
    Var,
};
use crate::optim::{clip_grad_norm, Adam, AdamConfig};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TteConfig {
    /// Dimension of the predicted states (the recognizer's encoder output).
    pub state_dim: usize,
    pub embedding_dim: usize,
    pub encoder_convs: usize,
    pub encoder_filters: usize,
    pub encoder_width: usize,
    /// Total BLSTM units, split evenly between the two directions.
    pub encoder_units: usize,
    pub attention_dim: usize,
    pub attention_filters: usize,
    pub attention_width: usize,
    pub prenet_layers: usize,
    pub prenet_units: usize,
    pub decoder_layers: usize,
    pub decoder_units: usize,
    pub postnet_layers: usize,
    pub postnet_filters: usize,
    pub postnet_width: usize,
    /// Dropout after each convolution of the encoder and postnet.
    pub dropout: f64,
    /// Dropout after each prenet layer, also active while generating.
    pub prenet_dropout: f64,
    pub zoneout: f64,
    pub stop_threshold: f64,
}

impl Default for TteConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TteConfig {
    pub fn desk() -> Self {
        Self {
            state_dim: 64,
            embedding_dim: 64,
            encoder_convs: 3,
            encoder_filters: 64,
            encoder_width: 5,
            encoder_units: 64,
            attention_dim: 64,
            attention_filters: 8,
            attention_width: 15,
            prenet_layers: 2,
            prenet_units: 32,
            decoder_layers: 2,
            decoder_units: 128,
            postnet_layers: 5,
            postnet_filters: 64,
            postnet_width: 5,
            dropout: 0.1,
            prenet_dropout: 0.5,
            zoneout: 0.1,
            stop_threshold: 0.75,
        }
    }

    pub fn full_scale() -> Self {
        Self {
            state_dim: 320,
            embedding_dim: 512,
            encoder_convs: 3,
            encoder_filters: 512,
            encoder_width: 5,
            encoder_units: 512,
            attention_dim: 128,
            attention_filters: 32,
            attention_width: 31,
            prenet_layers: 2,
            prenet_units: 256,
            decoder_layers: 2,
            decoder_units: 1024,
            postnet_layers: 5,
            postnet_filters: 512,
            postnet_width: 5,
            dropout: 0.5,
            prenet_dropout: 0.5,
            zoneout: 0.1,
            stop_threshold: 0.75,
        }
    }

    /// A very small model for gradient checks.
    pub fn tiny(state_dim: usize) -> Self {
        Self {
            state_dim,
            embedding_dim: 3,
            encoder_convs: 3,
            encoder_filters: 3,
            encoder_width: 3,
            encoder_units: 4,
            attention_dim: 3,
            attention_filters: 2,
            attention_width: 3,
            prenet_layers: 2,
            prenet_units: 3,
            decoder_layers: 2,
            decoder_units: 4,
            postnet_layers: 5,
            postnet_filters: 3,
            postnet_width: 3,
            dropout: 0.5,
            prenet_dropout: 0.5,
            zoneout: 0.1,
            stop_threshold: 0.75,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.state_dim == 0 || self.decoder_layers == 0 || self.decoder_units == 0 || self.postnet_layers == 0 {
            return Err(Error::Config("text-to-encoder dimensions must be positive".into()));
        }
        if self.encoder_units < 2 || self.encoder_units % 2 != 0 {
            return Err(Error::Config("encoder_units must be a positive even number".into()));
        }
        if [self.dropout, self.prenet_dropout, self.zoneout].iter().any(|r| !(0.0..1.0).contains(r)) {
            return Err(Error::Config("dropout and zoneout rates must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Loss terms of one batch, each a 1×1 node.
pub struct TteLoss {
    pub total: Var,
    pub mse_after: Var,
    pub mse_before: Var,
    pub l1_after: Var,
    pub l1_before: Var,
    pub bce: Var,
    /// Attention weights per decoder step (batch × characters).
    pub attention: Vec<Var>,
}

/// Loss terms as plain numbers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub mse_after: f64,
    pub mse_before: f64,
    pub l1_after: f64,
    pub l1_before: f64,
    pub bce: f64,
}

impl TteLoss {
    pub fn breakdown<T: Scalar>(&self, g: &Graph<T>) -> LossBreakdown {
        let v = |x: Var| g.value(x).item().as_f64();
        LossBreakdown {
            total: v(self.total),
            mse_after: v(self.mse_after),
            mse_before: v(self.mse_before),
            l1_after: v(self.l1_after),
            l1_before: v(self.l1_before),
            bce: v(self.bce),
        }
    }
}

/// Recurrent decoder state between steps.
#[derive(Clone, Debug)]
pub struct TteCarry {
    pub h: Vec<Var>,
    pub c: Vec<Var>,
    pub attention: AttentionState,
}

/// Per-step decoder outputs.
pub struct TteStep {
    /// Raw decoder output `q_t` (batch × decoder_units).
    pub q: Var,
    /// `tanh(LinB(q_t))`, the pre-postnet prediction.
    pub before: Var,
    pub stop_logit: Var,
    pub carry: TteCarry,
}

/// Free-running generation result.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedStates {
    /// Postnet-refined states, one row per generated frame.
    pub states: Tensor<f32>,
    /// True when generation hit `max_frames` without the stop probability
    /// crossing the threshold.
    pub truncated: bool,
    /// Attention weights, one row per frame.
    pub attention: Tensor<f32>,
    /// Stop probability predicted at each frame.
    pub stop_probabilities: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct TteModel {
    pub config: TteConfig,
    pub vocab: Vocabulary,
    embed: Embedding,
    convs: Vec<ConvBnBlock>,
    blstm: Blstm,
    attention: LocationAttention,
    prenet: Vec<Linear>,
    decoder: Vec<LstmCell>,
    head: Linear,
    stop: Linear,
    postnet: Vec<ConvBnBlock>,
}

impl TteModel {
    pub fn build<T: Scalar>(
        config: &TteConfig,
        vocab: Vocabulary,
        store: &mut ParamStore<T>,
        seed: u64,
    ) -> Result<Self> {
        let c = config;
        c.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embed = Embedding::new(store, "encoder.embed", vocab.len(), c.embedding_dim, &mut rng);
        let mut convs = Vec::with_capacity(c.encoder_convs);
        let mut dim = c.embedding_dim;
        for i in 0..c.encoder_convs {
            convs.push(ConvBnBlock::new(
                store,
                &format!("encoder.conv{i}"),
                dim,
                c.encoder_filters,
                c.encoder_width,
                Activation::Relu,
                true,
                c.dropout,
                &mut rng,
            )?);
            dim = c.encoder_filters;
        }
        let blstm = Blstm::new(store, "encoder.blstm", dim, c.encoder_units / 2, &mut rng);
        let attention = LocationAttention::new(
            store,
            "attention",
            c.decoder_units,
            blstm.output_dim(),
            c.attention_dim,
            c.attention_filters,
            c.attention_width,
            AttentionMode::Cumulative,
            &mut rng,
        )?;
        let mut prenet = Vec::with_capacity(c.prenet_layers);
        let mut dim = c.state_dim;
        for i in 0..c.prenet_layers {
            prenet.push(Linear::new(store, &format!("prenet.{i}"), dim, c.prenet_units, true, &mut rng));
            dim = c.prenet_units;
        }
        let mut decoder = Vec::with_capacity(c.decoder_layers);
        let mut input = blstm.output_dim() + dim;
        for i in 0..c.decoder_layers {
            decoder.push(LstmCell::new(store, &format!("decoder.lstm{i}"), input, c.decoder_units, &mut rng));
            input = c.decoder_units;
        }
        let head = Linear::new(store, "head", c.decoder_units, c.state_dim, true, &mut rng);
        let stop = Linear::new(store, "stop", c.decoder_units, 1, true, &mut rng);
        let mut postnet = Vec::with_capacity(c.postnet_layers);
        let mut dim = c.decoder_units;
        for i in 0..c.postnet_layers {
            let last = i + 1 == c.postnet_layers;
            postnet.push(ConvBnBlock::new(
                store,
                &format!("postnet.{i}"),
                dim,
                if last { c.state_dim } else { c.postnet_filters },
                c.postnet_width,
                if last { Activation::Linear } else { Activation::Tanh },
                true,
                c.dropout,
                &mut rng,
            )?);
            dim = c.postnet_filters;
        }
        Ok(Self {
            config: c.clone(),
            vocab,
            embed,
            convs,
            blstm,
            attention,
            prenet,
            decoder,
            head,
            stop,
            postnet,
        })
    }

    pub fn encoder_dim(&self) -> usize {
        self.blstm.output_dim()
    }

    /// Encodes padded character batches: `ids` is time-major with layout `layout`.
    pub fn encode<T: Scalar>(&self, s: &Session<'_, T>, ids: &[usize], layout: &Rc<SeqLayout>) -> Result<Var> {
        if layout.steps == 0 || layout.lens.iter().any(|&l| l == 0) {
            return Err(Error::invalid("text-to-encoder input is empty"));
        }
        let mut x = self.embed.forward(s, ids);
        for conv in &self.convs {
            x = conv.forward(s, x, layout);
        }
        Ok(self.blstm.forward(s, x, layout))
    }

    /// Encodes a list of character sequences (batch order preserved).
    pub fn encode_texts<T: Scalar>(&self, s: &Session<'_, T>, texts: &[Vec<usize>]) -> Result<(Var, Rc<SeqLayout>)> {
        let layout = Rc::new(SeqLayout::new(texts.iter().map(Vec::len).collect()));
        let b = texts.len();
        let mut ids = vec![0usize; layout.rows()];
        for (j, t) in texts.iter().enumerate() {
            for (l, &c) in t.iter().enumerate() {
                ids[l * b + j] = c;
            }
        }
        Ok((self.encode(s, &ids, &layout)?, layout))
    }

    pub fn prenet<T: Scalar>(&self, s: &Session<'_, T>, x: Var) -> Var {
        let mut x = x;
        for layer in &self.prenet {
            x = s.graph.relu(layer.forward(s, x));
            x = dropout(s, x, self.config.prenet_dropout, s.mode.prenet_dropout);
        }
        x
    }

    pub fn prepare_memory<T: Scalar>(&self, s: &Session<'_, T>, enc: Var, layout: &SeqLayout) -> Result<AttentionMemory> {
        self.attention.prepare(s, enc, layout)
    }

    pub fn initial_carry<T: Scalar>(&self, s: &Session<'_, T>, mem: &AttentionMemory) -> TteCarry {
        let b = mem.layout.batch;
        let (h, c) = self
            .decoder
            .iter()
            .map(|cell| cell.zero_state(s, b))
            .unzip();
        TteCarry {
            h,
            c,
            attention: self.attention.initial_state(s, mem),
        }
    }

    /// One decoder step given the prenet output of the previous frame.
    pub fn decode_step<T: Scalar>(
        &self,
        s: &Session<'_, T>,
        mem: &AttentionMemory,
        prenet_out: Var,
        carry: &TteCarry,
    ) -> TteStep {
        let g = s.graph;
        let query = *carry.h.last().expect("decoder has layers");
        let (context, attention) = self.attention.attend(s, mem, query, &carry.attention);
        let mut x = g.concat_cols(&[context, prenet_out]);
        let mut h = Vec::with_capacity(self.decoder.len());
        let mut c = Vec::with_capacity(self.decoder.len());
        for (i, cell) in self.decoder.iter().enumerate() {
            let (hn, cn) = cell.step(s, x, carry.h[i], carry.c[i], self.config.zoneout);
            h.push(hn);
            c.push(cn);
            x = hn;
        }
        let q = x;
        TteStep {
            q,
            before: g.tanh(self.head.forward(s, q)),
            stop_logit: self.stop.forward(s, q),
            carry: TteCarry { h, c, attention },
        }
    }

    /// Refines a full decoder-output sequence: returns `(before, after)` where
    /// `before = tanh(LinB(q))` and `after = tanh(LinB(q) + Postnet(q))`.
    pub fn postnet<T: Scalar>(&self, s: &Session<'_, T>, q: Var, layout: &Rc<SeqLayout>) -> (Var, Var) {
        let g = s.graph;
        let lin = self.head.forward(s, q);
        let mut d = q;
        for block in &self.postnet {
            d = block.forward(s, d, layout);
        }
        (g.tanh(lin), g.tanh(g.add(lin, d)))
    }

    /// Teacher-forced loss over a batch of character sequences and target
    /// state sequences. Every term is averaged over non-padded frames (and
    /// state dimensions for the regression terms).
    pub fn loss<T: Scalar>(
        &self,
        s: &Session<'_, T>,
        texts: &[Vec<usize>],
        targets: &[Tensor<T>],
        use_l1: bool,
    ) -> Result<TteLoss> {
        let g = s.graph;
        let h = self.config.state_dim;
        if texts.len() != targets.len() || texts.is_empty() {
            return Err(Error::invalid("texts and targets must be nonempty and equally many"));
        }
        if let Some(t) = targets.iter().find(|t| t.cols() != h) {
            return Err(Error::Shape(format!(
                "target states have {} dimensions, model predicts {h}",
                t.cols()
            )));
        }
        if targets.iter().any(|t| t.rows() == 0) {
            return Err(Error::invalid("empty target state sequence"));
        }
        let (enc, enc_layout) = self.encode_texts(s, texts)?;
        let mem = self.prepare_memory(s, enc, &enc_layout)?;
        let layout = Rc::new(SeqLayout::new(targets.iter().map(Tensor::rows).collect()));
        let b = targets.len();
        let steps = layout.steps;
        let mut padded = Tensor::zeros(steps * b, h);
        for (j, t) in targets.iter().enumerate() {
            for r in 0..t.rows() {
                padded.row_mut(r * b + j).copy_from_slice(t.row(r));
            }
        }
        // previous target frame for every step, zero at the first
        let mut shifted = Tensor::zeros(steps * b, h);
        for r in b..steps * b {
            if layout.row_valid(r) {
                shifted.row_mut(r).copy_from_slice(padded.row(r - b));
            }
        }
        let pre = self.prenet(s, s.constant(shifted));
        let mut carry = self.initial_carry(s, &mem);
        let mut qs = Vec::with_capacity(steps);
        let mut stops = Vec::with_capacity(steps);
        let mut attention = Vec::with_capacity(steps);
        for t in 0..steps {
            let step = self.decode_step(s, &mem, g.slice_rows(pre, t * b, b), &carry);
            qs.push(step.q);
            stops.push(step.stop_logit);
            attention.push(step.carry.attention.weights);
            carry = step.carry;
        }
        let q = g.concat_rows(&qs);
        let (before, after) = self.postnet(s, q, &layout);

        let n = layout.valid_count();
        let row_mask = layout.row_mask::<T>();
        let mask = Rc::new(Tensor::from_fn(steps * b, h, |r, _| row_mask.get(r, 0)));
        let target = s.constant(padded);
        let norm = T::one() / T::from_f64((n * h) as f64);
        let diff = |pred: Var| g.mul_const(g.sub(pred, target), mask.clone());
        let mse = |d: Var| g.scale(g.sum(g.mul(d, d)), norm);
        let l1 = |d: Var| g.scale(g.sum(g.abs(d)), norm);
        let (da, db) = (diff(after), diff(before));
        let mse_after = mse(da);
        let mse_before = mse(db);
        let (l1_after, l1_before) = if use_l1 {
            (l1(da), l1(db))
        } else {
            (s.constant(Tensor::scalar(T::zero())), s.constant(Tensor::scalar(T::zero())))
        };
        let mut labels = vec![T::one(); steps * b];
        let mut weights = vec![T::zero(); steps * b];
        let w = T::one() / T::from_f64(n as f64);
        for (j, &len) in layout.lens.iter().enumerate() {
            for t in 0..len {
                labels[t * b + j] = if t + 1 == len { T::one() } else { T::zero() };
                weights[t * b + j] = w;
            }
        }
        let bce = g.bce_logits(g.concat_rows(&stops), &labels, &weights);
        let mut total = g.add(g.add(mse_after, mse_before), bce);
        if use_l1 {
            total = g.add(total, g.add(l1_after, l1_before));
        }
        Ok(TteLoss {
            total,
            mse_after,
            mse_before,
            l1_after,
            l1_before,
            bce,
            attention,
        })
    }

    /// Free-running generation for one text. The previous frame's pre-postnet
    /// prediction is fed back; prenet dropout follows `s.mode`.
    pub fn generate<T: Scalar>(&self, s: &Session<'_, T>, text: &[usize], max_frames: usize) -> Result<GeneratedStates> {
        if max_frames == 0 {
            return Err(Error::invalid("max_frames must be positive"));
        }
        let g = s.graph;
        let (enc, layout) = self.encode_texts(s, &[text.to_vec()])?;
        let mem = self.prepare_memory(s, enc, &layout)?;
        let mut carry = self.initial_carry(s, &mem);
        let mut prev = s.constant(Tensor::zeros(1, self.config.state_dim));
        let mut qs = Vec::new();
        let mut weights = Vec::new();
        let mut truncated = true;
        let mut stop_probabilities = Vec::new();
        for _ in 0..max_frames {
            let step = self.decode_step(s, &mem, self.prenet(s, prev), &carry);
            qs.push(step.q);
            weights.push(step.carry.attention.weights);
            prev = step.before;
            carry = step.carry;
            let logit = g.value(step.stop_logit).item().as_f64();
            let p = 1.0 / (1.0 + (-logit).exp());
            stop_probabilities.push(p);
            if p > self.config.stop_threshold {
                truncated = false;
                break;
            }
        }
        let frames = qs.len();
        let q = g.concat_rows(&qs);
        let (_, after) = self.postnet(s, q, &Rc::new(SeqLayout::new(vec![frames])));
        let att = g.concat_rows(&weights);
        let states = g.value(after).cast();
        let attention = g.value(att).cast();
        Ok(GeneratedStates {
            states,
            truncated,
            attention,
            stop_probabilities,
        })
    }

    pub fn save(&self, store: &ParamStore<f32>, path: &Path) -> Result<()> {
        Checkpoint::new("tte", &self.config, &self.vocab, store)?.save(path)
    }

    pub fn load(path: &Path) -> Result<(Self, ParamStore<f32>)> {
        let ck = Checkpoint::load(path)?;
        ck.expect_model("tte")?;
        let config: TteConfig = ck.config()?;
        let mut store = ParamStore::new();
        let model = Self::build(&config, ck.vocab()?, &mut store, 0)?;
        ck.restore(&mut store)?;
        Ok((model, store))
    }
}

/// Stable per-utterance seed so generation does not depend on ordering.
pub fn utterance_seed(seed: u64, id: &str) -> u64 {
    let digest = Sha256::new().chain_update(seed.to_le_bytes()).chain_update(id.as_bytes()).finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// Generates states for one text in generation mode (prenet dropout on).
pub fn generate_states(
    model: &TteModel,
    store: &ParamStore<f32>,
    text: &str,
    max_frames: usize,
    seed: u64,
) -> Result<GeneratedStates> {
    let ids = model.vocab.encode(text)?;
    if ids.is_empty() {
        return Err(Error::invalid("cannot generate from empty text"));
    }
    let g = Graph::new();
    let s = Session::new(&g, store, Mode::GENERATE, ChaCha8Rng::seed_from_u64(seed));
    model.generate(&s, &ids, max_frames)
}

/// Frame budget for a text of `chars` characters.
pub fn max_frames_for(chars: usize, frames_per_char: f64) -> usize {
    ((chars as f64 * frames_per_char).ceil() as usize).max(1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TteTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub clip_norm: f64,
    pub use_l1: bool,
    pub bn_momentum: f64,
    pub optimizer: AdamConfig,
    /// Diagonality level reported as the attention-learned epoch.
    pub diagonality_threshold: f64,
}

impl Default for TteTrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TteTrainConfig {
    pub fn desk() -> Self {
        Self {
            epochs: 70,
            batch_size: 10,
            ..Self::full_scale()
        }
    }

    pub fn full_scale() -> Self {
        Self {
            epochs: 100,
            batch_size: 50,
            clip_norm: 1.0,
            use_l1: true,
            bn_momentum: 0.1,
            optimizer: AdamConfig::default(),
            diagonality_threshold: 0.6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TteEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid: LossBreakdown,
    pub diagonality: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TteTrainLog {
    pub initial_valid: LossBreakdown,
    pub initial_diagonality: f64,
    pub epochs: Vec<TteEpoch>,
    /// First epoch whose validation diagonality reached the threshold.
    pub attention_epoch: Option<usize>,
}

impl TteTrainLog {
    pub fn final_valid_mse(&self) -> f64 {
        self.epochs.last().map(|e| e.valid.mse_after).unwrap_or(self.initial_valid.mse_after)
    }
}

/// Character ids and target states of a dataset whose inputs are states.
pub fn state_pairs(data: &Dataset, vocab: &Vocabulary) -> Result<Vec<(Vec<usize>, Tensor<f32>)>> {
    data.examples
        .iter()
        .map(|e| {
            if e.input.kind != InputKind::States {
                return Err(Error::invalid(format!("utterance {} has no stored states", e.id)));
            }
            Ok((vocab.encode(&e.text)?, e.input.data.clone()))
        })
        .collect()
}

/// Eval-mode teacher-forced validation: mean loss terms (frame-weighted)
/// and mean attention diagonality over utterances.
pub fn evaluate_tte(
    model: &TteModel,
    store: &ParamStore<f32>,
    pairs: &[(Vec<usize>, Tensor<f32>)],
    batch_size: usize,
    use_l1: bool,
) -> Result<(LossBreakdown, f64)> {
    let mut acc = LossBreakdown::default();
    let mut frames = 0usize;
    let mut diag = 0.0;
    for chunk in pairs.chunks(batch_size.max(1)) {
        let g = Graph::new();
        let s = Session::new(&g, store, Mode::EVAL, ChaCha8Rng::seed_from_u64(0));
        let texts: Vec<Vec<usize>> = chunk.iter().map(|p| p.0.clone()).collect();
        let targets: Vec<Tensor<f32>> = chunk.iter().map(|p| p.1.clone()).collect();
        let out = model.loss(&s, &texts, &targets, use_l1)?;
        let n: usize = targets.iter().map(Tensor::rows).sum();
        let b = out.breakdown(&g);
        acc.total += b.total * n as f64;
        acc.mse_after += b.mse_after * n as f64;
        acc.mse_before += b.mse_before * n as f64;
        acc.l1_after += b.l1_after * n as f64;
        acc.l1_before += b.l1_before * n as f64;
        acc.bce += b.bce * n as f64;
        frames += n;
        for (j, (text, target)) in chunk.iter().enumerate() {
            let w = Tensor::from_fn(target.rows(), text.len(), |t, l| g.value(out.attention[t]).get(j, l));
            diag += diagonality(&w);
        }
    }
    let k = 1.0 / frames.max(1) as f64;
    let avg = LossBreakdown {
        total: acc.total * k,
        mse_after: acc.mse_after * k,
        mse_before: acc.mse_before * k,
        l1_after: acc.l1_after * k,
        l1_before: acc.l1_before * k,
        bce: acc.bce * k,
    };
    Ok((avg, diag / pairs.len().max(1) as f64))
}

/// Adam training with teacher forcing, dropout and zoneout.
pub fn train_tte(
    model: &TteModel,
    store: &mut ParamStore<f32>,
    train: &Dataset,
    valid: &Dataset,
    config: &TteTrainConfig,
    seed: u64,
) -> Result<TteTrainLog> {
    if train.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let train_pairs = state_pairs(train, &model.vocab)?;
    let valid_pairs = if valid.is_empty() {
        train_pairs.clone()
    } else {
        state_pairs(valid, &model.vocab)?
    };
    let (initial_valid, initial_diagonality) =
        evaluate_tte(model, store, &valid_pairs, config.batch_size, config.use_l1)?;
    let mut log = TteTrainLog {
        initial_valid,
        initial_diagonality,
        ..Default::default()
    };
    let mut opt = Adam::new(&config.optimizer, store);
    for epoch in 1..=config.epochs {
        let mut total = 0.0;
        let mut frames = 0usize;
        let epoch_seed = seed ^ ((epoch as u64) << 32);
        for (i, batch) in train.batches(config.batch_size, epoch_seed)?.iter().enumerate() {
            let texts = batch
                .texts
                .iter()
                .map(|t| model.vocab.encode(t))
                .collect::<Result<Vec<_>>>()?;
            let targets: Vec<Tensor<f32>> = batch.inputs.iter().map(|u| u.data.clone()).collect();
            store.zero_grad();
            let g = Graph::new();
            let (loss, stats) = {
                let rng = ChaCha8Rng::seed_from_u64(epoch_seed ^ (i as u64 + 1).wrapping_mul(0x9e37_79b9));
                let s = Session::new(&g, store, Mode::TRAIN, rng);
                let out = model.loss(&s, &texts, &targets, config.use_l1)?;
                (out.total, s.take_bn_updates())
            };
            let value = g.value(loss).item() as f64;
            if !value.is_finite() {
                return Err(Error::invalid(format!("training loss diverged at epoch {epoch}")));
            }
            g.backward_into(loss, store);
            stats.apply(store, config.bn_momentum);
            clip_grad_norm(store, config.clip_norm);
            opt.step(store);
            let n: usize = targets.iter().map(Tensor::rows).sum();
            total += value * n as f64;
            frames += n;
        }
        let (valid, diag) = evaluate_tte(model, store, &valid_pairs, config.batch_size, config.use_l1)?;
        info!(
            "tte epoch {epoch}: train {:.4} valid mse {:.4} diagonality {diag:.3}",
            total / frames.max(1) as f64,
            valid.mse_after
        );
        if log.attention_epoch.is_none() && diag >= config.diagonality_threshold {
            log.attention_epoch = Some(epoch);
        }
        log.epochs.push(TteEpoch {
            epoch,
            train_loss: total / frames.max(1) as f64,
            valid,
            diagonality: diag,
        });
    }
    Ok(log)
}

/// Generates states for every entry and writes them under `out_dir`, on up
/// to `jobs` threads. Returned entries are `generated` with `states` set;
/// the count is the number of utterances cut off at the frame budget.
pub fn generate_manifest(
    model: &TteModel,
    store: &ParamStore<f32>,
    manifest: &Manifest,
    out_dir: &Path,
    frames_per_char: f64,
    seed: u64,
    jobs: usize,
) -> Result<(Manifest, usize)> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let generate_one = |i: usize| -> Result<(Entry, bool)> {
        let e = &manifest.entries[i];
        let wrap = |err: Error| Error::Utterance {
            id: e.id.clone(),
            source: Box::new(err),
        };
        let max_frames = max_frames_for(e.text.chars().count(), frames_per_char);
        let out = generate_states(model, store, &e.text, max_frames, utterance_seed(seed, &e.id)).map_err(wrap)?;
        let path = out_dir.join(format!("{}.bin", e.id));
        write_tensor(&path, &out.states).map_err(wrap)?;
        let entry = Entry {
            id: e.id.clone(),
            text: e.text.clone(),
            audio: None,
            states: Some(path),
            kind: EntryKind::Generated,
        };
        Ok((entry, out.truncated))
    };
    let results = crate::parallel::map_indexed(manifest.len(), jobs, generate_one)
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let truncated = results.iter().filter(|r| r.1).count();
    let entries = results.into_iter().map(|r| r.0).collect();
    Ok((Manifest::new(entries, PathBuf::new())?, truncated))
}

/// Reads every generated states file of a manifest (existence and parse check).
pub fn check_states(manifest: &Manifest) -> Result<usize> {
    let mut n = 0;
    for e in &manifest.entries {
        if let Some(p) = manifest.states_path(e) {
            read_tensor(&p).map_err(|err| Error::Utterance {
                id: e.id.clone(),
                source: Box::new(err),
            })?;
            n += 1;
        }
    }
    Ok(n)
}
