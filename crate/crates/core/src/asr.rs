//! Attention-based recognizer: projected BLSTM encoder, location-aware
//! attention over the previous step's weights, and a one-layer LSTM decoder.

use std::path::{Path, PathBuf};

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::corpus::batch::{BatchInput, Dataset, InputKind, PaddedGroup};
use crate::corpus::features::FrameConfig;
use crate::corpus::manifest::{Entry, Manifest};
use crate::corpus::tensor_io::write_tensor;
use crate::corpus::vocab::Vocabulary;
use crate::corpus::{audio::read_wav, LogMel};
use crate::error::{Error, Result};
use crate::nn::{
    AttentionMemory, AttentionMode, AttentionState, BlstmpEncoder, Embedding, Graph, Linear,
    LocationAttention, LstmCell, Mode, ParamId, ParamStore, SeqLayout, Session, Var,
};
use crate::optim::{clip_grad_norm, AdadeltaConfig, AdamConfig, Optimizer, OptimizerConfig};
use crate::tensor::{Scalar, Tensor};

/// Parameter groups that can be frozen independently.
pub const GROUPS: [&str; 4] = ["encoder", "attention", "decoder", "output"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AsrConfig {
    pub feature_dim: usize,
    pub encoder_layers: usize,
    /// LSTM units per direction in each encoder layer.
    pub encoder_units: usize,
    /// Encoder output dimension (the state size seen by the decoder).
    pub projection: usize,
    /// Zero-based encoder layers followed by even-frame subsampling.
    pub subsample_layers: Vec<usize>,
    pub attention_dim: usize,
    pub attention_filters: usize,
    pub attention_width: usize,
    pub embedding_dim: usize,
    pub decoder_units: usize,
}

impl Default for AsrConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl AsrConfig {
    pub fn desk() -> Self {
        Self {
            feature_dim: 20,
            encoder_layers: 2,
            encoder_units: 64,
            projection: 64,
            subsample_layers: vec![0, 1],
            attention_dim: 64,
            attention_filters: 10,
            attention_width: 15,
            embedding_dim: 32,
            decoder_units: 128,
        }
    }

    pub fn full_scale() -> Self {
        Self {
            feature_dim: 80,
            encoder_layers: 8,
            encoder_units: 320,
            projection: 320,
            subsample_layers: vec![0, 1],
            attention_dim: 300,
            attention_filters: 10,
            attention_width: 201,
            embedding_dim: 320,
            decoder_units: 320,
        }
    }

    /// A very small model for gradient checks.
    pub fn tiny(feature_dim: usize) -> Self {
        Self {
            feature_dim,
            encoder_layers: 2,
            encoder_units: 3,
            projection: 4,
            subsample_layers: vec![0, 1],
            attention_dim: 3,
            attention_filters: 2,
            attention_width: 3,
            embedding_dim: 3,
            decoder_units: 4,
        }
    }
}

/// Decoder recurrent state plus the attention feedback.
#[derive(Clone, Copy, Debug)]
pub struct DecoderCarry {
    pub h: Var,
    pub c: Var,
    pub attention: AttentionState,
}

pub struct AsrLoss {
    /// Mean negative log-likelihood per target token (1×1).
    pub loss: Var,
    pub token_counts: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct AsrModel {
    pub config: AsrConfig,
    pub vocab: Vocabulary,
    encoder: BlstmpEncoder,
    attention: LocationAttention,
    embed: Embedding,
    decoder: LstmCell,
    output: Linear,
    cmvn_mean: ParamId,
    cmvn_std: ParamId,
}

impl AsrModel {
    /// Registers every parameter in `store` with a seeded initialization.
    pub fn build<T: Scalar>(
        config: &AsrConfig,
        vocab: Vocabulary,
        store: &mut ParamStore<T>,
        seed: u64,
    ) -> Result<Self> {
        let c = config;
        if c.feature_dim == 0 || c.encoder_layers == 0 || c.projection == 0 || c.decoder_units == 0 {
            return Err(Error::Config("recognizer dimensions must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = BlstmpEncoder::new(
            store,
            "encoder",
            c.feature_dim,
            c.encoder_units,
            c.projection,
            c.encoder_layers,
            &c.subsample_layers,
            &mut rng,
        )?;
        let cmvn_mean = store.add_buffer("encoder.cmvn.mean", Tensor::zeros(1, c.feature_dim));
        let cmvn_std = store.add_buffer("encoder.cmvn.std", Tensor::full(1, c.feature_dim, T::one()));
        let attention = LocationAttention::new(
            store,
            "attention",
            c.decoder_units,
            c.projection,
            c.attention_dim,
            c.attention_filters,
            c.attention_width,
            AttentionMode::Previous,
            &mut rng,
        )?;
        let embed = Embedding::new(store, "decoder.embed", vocab.len(), c.embedding_dim, &mut rng);
        let decoder = LstmCell::new(
            store,
            "decoder.lstm",
            c.projection + c.embedding_dim,
            c.decoder_units,
            &mut rng,
        );
        let output = Linear::new(store, "output", c.decoder_units, vocab.len(), true, &mut rng);
        Ok(Self {
            config: c.clone(),
            vocab,
            encoder,
            attention,
            embed,
            decoder,
            output,
            cmvn_mean,
            cmvn_std,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.config.projection
    }

    pub fn output_length(&self, frames: usize) -> usize {
        self.encoder.output_length(frames)
    }

    /// Sets per-dimension feature normalization from the frames in `data`.
    pub fn fit_cmvn<T: Scalar>(&self, store: &mut ParamStore<T>, data: &Dataset) {
        let d = self.config.feature_dim;
        let mut sum = vec![0.0f64; d];
        let mut sq = vec![0.0f64; d];
        let mut n = 0usize;
        for e in data.examples.iter().filter(|e| e.input.kind == InputKind::Features) {
            if e.input.data.cols() != d {
                continue;
            }
            for t in 0..e.input.data.rows() {
                for (j, &v) in e.input.data.row(t).iter().enumerate() {
                    sum[j] += v as f64;
                    sq[j] += (v as f64) * (v as f64);
                }
            }
            n += e.input.data.rows();
        }
        if n == 0 {
            return;
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let std: Vec<f64> = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| (s / n as f64 - m * m).max(0.0).sqrt().max(1e-3))
            .collect();
        store.get_mut(self.cmvn_mean).value = Tensor::from_fn(1, d, |_, j| T::from_f64(mean[j]));
        store.get_mut(self.cmvn_std).value = Tensor::from_fn(1, d, |_, j| T::from_f64(std[j]));
    }

    fn normalized<T: Scalar>(&self, s: &Session<'_, T>, group: &PaddedGroup) -> Result<Tensor<T>> {
        if group.data.cols() != self.config.feature_dim {
            return Err(Error::Shape(format!(
                "features have {} dimensions, recognizer expects {}",
                group.data.cols(),
                self.config.feature_dim
            )));
        }
        let mean = &s.store.get(self.cmvn_mean).value;
        let std = &s.store.get(self.cmvn_std).value;
        let mut x = Tensor::zeros(group.data.rows(), group.data.cols());
        for r in 0..x.rows() {
            if !group.layout.row_valid(r) {
                continue;
            }
            for (j, (o, &v)) in x.row_mut(r).iter_mut().zip(group.data.row(r)).enumerate() {
                *o = (T::from_f64(v as f64) - mean.get(0, j)) / std.get(0, j);
            }
        }
        Ok(x)
    }

    /// Encodes a padded feature group; returns states and their layout.
    pub fn encode<T: Scalar>(&self, s: &Session<'_, T>, group: &PaddedGroup) -> Result<(Var, SeqLayout)> {
        let x = self.normalized(s, group)?;
        self.encoder.forward(s, s.constant(x), &group.layout)
    }

    /// Eval-mode encoding of one utterance's frames.
    pub fn encode_utterance(&self, store: &ParamStore<f32>, frames: &Tensor<f32>) -> Result<Tensor<f32>> {
        let group = PaddedGroup::pad(&[frames], vec![0])?;
        let g = Graph::new();
        let s = Session::new(&g, store, Mode::EVAL, ChaCha8Rng::seed_from_u64(0));
        let (h, _) = self.encode(&s, &group)?;
        let out = g.value(h).clone();
        Ok(out)
    }

    /// Decoder-side states for a whole batch in batch order, routing feature
    /// utterances through the encoder and passing stored states through.
    pub fn batch_states<T: Scalar>(&self, s: &Session<'_, T>, batch: &BatchInput) -> Result<(Var, SeqLayout)> {
        let g = s.graph;
        let h = self.state_dim();
        let mut parts: Vec<(Var, SeqLayout, &[usize])> = Vec::new();
        if let Some(f) = &batch.features {
            let (v, layout) = self.encode(s, f)?;
            parts.push((v, layout, &f.members));
        }
        if let Some(st) = &batch.states {
            if st.data.cols() != h {
                return Err(Error::Shape(format!(
                    "stored states have {} dimensions, decoder expects {h}",
                    st.data.cols()
                )));
            }
            parts.push((s.constant(st.data.cast()), st.layout.clone(), &st.members));
        }
        let n = batch.size;
        if parts.len() == 1 && parts[0].2.iter().copied().eq(0..n) {
            let (v, layout, _) = parts.pop().unwrap();
            return Ok((v, layout));
        }
        let mut lens = vec![0usize; n];
        let mut source = vec![(0usize, 0usize, 0usize); n];
        let mut offset = 0;
        for (_, layout, members) in &parts {
            for (j, &b) in members.iter().enumerate() {
                lens[b] = layout.lens[j];
                source[b] = (offset, j, layout.batch);
            }
            offset += layout.rows();
        }
        let zero_row = offset;
        let layout = SeqLayout::new(lens);
        let mut ids = Vec::with_capacity(layout.rows());
        for t in 0..layout.steps {
            for b in 0..n {
                let (off, j, width) = source[b];
                ids.push(if t < layout.lens[b] { off + t * width + j } else { zero_row });
            }
        }
        let mut tables: Vec<Var> = parts.iter().map(|p| p.0).collect();
        tables.push(s.constant(Tensor::zeros(1, h)));
        let table = g.concat_rows(&tables);
        Ok((g.gather_rows(table, &ids), layout))
    }

    pub fn prepare_memory<T: Scalar>(
        &self,
        s: &Session<'_, T>,
        states: Var,
        layout: &SeqLayout,
    ) -> Result<AttentionMemory> {
        self.attention.prepare(s, states, layout)
    }

    pub fn initial_carry<T: Scalar>(&self, s: &Session<'_, T>, mem: &AttentionMemory) -> DecoderCarry {
        let (h, c) = self.decoder.zero_state(s, mem.layout.batch);
        DecoderCarry {
            h,
            c,
            attention: self.attention.initial_state(s, mem),
        }
    }

    /// One decoder step: attend with the previous decoder output as query,
    /// run the LSTM on `[context ; embed(prev)]`, and project to logits.
    pub fn decode_step<T: Scalar>(
        &self,
        s: &Session<'_, T>,
        mem: &AttentionMemory,
        prev: &[usize],
        carry: &DecoderCarry,
    ) -> (Var, DecoderCarry) {
        let g = s.graph;
        let (context, attention) = self.attention.attend(s, mem, carry.h, &carry.attention);
        let x = g.concat_cols(&[context, self.embed.forward(s, prev)]);
        let (h, c) = self.decoder.step(s, x, carry.h, carry.c, 0.0);
        let logits = self.output.forward(s, h);
        (logits, DecoderCarry { h, c, attention })
    }

    /// Teacher-forced cross-entropy averaged over every non-padded target token.
    pub fn loss<T: Scalar>(&self, s: &Session<'_, T>, batch: &BatchInput) -> Result<AsrLoss> {
        let g = s.graph;
        let (states, layout) = self.batch_states(s, batch)?;
        let mem = self.prepare_memory(s, states, &layout)?;
        let targets = &batch.targets;
        let n = targets.batch();
        let mut carry = self.initial_carry(s, &mem);
        let mut logits = Vec::with_capacity(targets.steps);
        for l in 0..targets.steps {
            let (y, next) = self.decode_step(s, &mem, &targets.inputs[l * n..(l + 1) * n], &carry);
            logits.push(y);
            carry = next;
        }
        let all = g.concat_rows(&logits);
        let w = T::one() / T::from_f64(targets.total_tokens() as f64);
        let weights: Vec<T> = targets.valid.iter().map(|&v| if v { w } else { T::zero() }).collect();
        Ok(AsrLoss {
            loss: g.softmax_xent(all, &targets.outputs, &weights),
            token_counts: targets.token_counts.clone(),
        })
    }

    /// Sets the trainable flag for named groups (`encoder`, `attention`,
    /// `decoder`, `output`).
    pub fn set_trainable<T: Scalar>(&self, store: &mut ParamStore<T>, spec: &[(&str, bool)]) -> Result<()> {
        for (group, _) in spec {
            if !GROUPS.contains(group) {
                return Err(Error::Config(format!(
                    "unknown parameter group {group:?}; expected one of {GROUPS:?}"
                )));
            }
        }
        for (group, flag) in spec {
            store.set_trainable_prefix(&format!("{group}."), *flag);
        }
        Ok(())
    }

    pub fn save(&self, store: &ParamStore<f32>, path: &Path) -> Result<()> {
        Checkpoint::new("asr", &self.config, &self.vocab, store)?.save(path)
    }

    pub fn load(path: &Path) -> Result<(Self, ParamStore<f32>)> {
        let ck = Checkpoint::load(path)?;
        ck.expect_model("asr")?;
        let config: AsrConfig = ck.config()?;
        let mut store = ParamStore::new();
        let model = Self::build(&config, ck.vocab()?, &mut store, 0)?;
        ck.restore(&mut store)?;
        Ok((model, store))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AsrTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub clip_norm: f64,
    pub optimizer: OptimizerConfig,
}

impl Default for AsrTrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl AsrTrainConfig {
    /// Small batches and Adam: a few hundred utterances need many updates
    /// before attention locks on.
    pub fn desk() -> Self {
        Self {
            epochs: 60,
            batch_size: 10,
            clip_norm: 5.0,
            optimizer: OptimizerConfig::Adam(AdamConfig::default()),
        }
    }

    pub fn full_scale() -> Self {
        Self {
            epochs: 30,
            batch_size: 50,
            clip_norm: 5.0,
            optimizer: OptimizerConfig::Adadelta(AdadeltaConfig::default()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AsrEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: f64,
    pub eps: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AsrTrainLog {
    /// Validation loss of the starting parameters.
    pub initial_valid_loss: f64,
    pub epochs: Vec<AsrEpoch>,
    /// Epoch whose parameters were kept (0 = the starting parameters).
    pub best_epoch: usize,
    pub best_valid_loss: f64,
}

/// Token-weighted mean loss over a dataset in eval mode.
pub fn evaluate_loss(model: &AsrModel, store: &ParamStore<f32>, data: &Dataset, batch_size: usize) -> Result<f64> {
    let mut total = 0.0;
    let mut tokens = 0usize;
    for batch in data.ordered_batches(batch_size)? {
        let input = BatchInput::from_batch(&batch, &model.vocab)?;
        let g = Graph::new();
        let s = Session::new(&g, store, Mode::EVAL, ChaCha8Rng::seed_from_u64(0));
        let out = model.loss(&s, &input)?;
        let n = input.targets.total_tokens();
        total += g.value(out.loss).item() as f64 * n as f64;
        tokens += n;
    }
    Ok(if tokens == 0 { f64::NAN } else { total / tokens as f64 })
}

fn step_seed(seed: u64, epoch: usize, batch: usize) -> u64 {
    seed ^ ((epoch as u64) << 32) ^ (batch as u64).wrapping_mul(0x9e37_79b9)
}

/// Training with global-norm clipping. Parameters with the best
/// validation loss are restored at the end. Feature normalization is fitted
/// first when the encoder is trainable and the data contains features.
pub fn train_asr(
    model: &AsrModel,
    store: &mut ParamStore<f32>,
    train: &Dataset,
    valid: &Dataset,
    config: &AsrTrainConfig,
    seed: u64,
) -> Result<AsrTrainLog> {
    if train.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let encoder_trainable = store.iter().any(|(_, p)| p.trainable && p.name.starts_with("encoder."));
    if encoder_trainable && train.examples.iter().any(|e| e.input.kind == InputKind::Features) {
        model.fit_cmvn(store, train);
    }
    let select = if valid.is_empty() { train } else { valid };
    let mut log = AsrTrainLog {
        initial_valid_loss: evaluate_loss(model, store, select, config.batch_size)?,
        ..Default::default()
    };
    log.best_valid_loss = log.initial_valid_loss;
    let mut best = store.named_values();
    let mut opt = Optimizer::new(&config.optimizer, store);
    for epoch in 1..=config.epochs {
        let mut total = 0.0;
        let mut tokens = 0usize;
        for (i, batch) in train.batches(config.batch_size, step_seed(seed, epoch, 0))?.iter().enumerate() {
            let input = BatchInput::from_batch(batch, &model.vocab)?;
            store.zero_grad();
            let g = Graph::new();
            let loss = {
                let rng = ChaCha8Rng::seed_from_u64(step_seed(seed, epoch, i + 1));
                let s = Session::new(&g, store, Mode::TRAIN, rng);
                model.loss(&s, &input)?.loss
            };
            let value = g.value(loss).item();
            g.backward_into(loss, store);
            if !value.is_finite() {
                return Err(Error::invalid(format!("training loss diverged at epoch {epoch}")));
            }
            clip_grad_norm(store, config.clip_norm);
            opt.step(store);
            let n = input.targets.total_tokens();
            total += value as f64 * n as f64;
            tokens += n;
        }
        let valid_loss = evaluate_loss(model, store, select, config.batch_size)?;
        let train_loss = total / tokens.max(1) as f64;
        info!("asr epoch {epoch}: train {train_loss:.4} valid {valid_loss:.4} eps {:.1e}", opt.eps());
        log.epochs.push(AsrEpoch {
            epoch,
            train_loss,
            valid_loss,
            eps: opt.eps(),
        });
        if valid_loss < log.best_valid_loss {
            log.best_valid_loss = valid_loss;
            log.best_epoch = epoch;
            best = store.named_values();
        } else {
            opt.on_plateau(&config.optimizer);
        }
    }
    store.load_values(&best)?;
    Ok(log)
}

/// Eval-mode encoder states for every entry, written as `<id>.bin` under
/// `out_dir`, on up to `jobs` threads. Returns the manifest with state paths
/// filled in.
pub fn extract_states(
    model: &AsrModel,
    store: &ParamStore<f32>,
    manifest: &Manifest,
    out_dir: &Path,
    frames: &FrameConfig,
    jobs: usize,
) -> Result<Manifest> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let extract_one = |i: usize| -> Result<Entry> {
        let e = &manifest.entries[i];
        let wrap = |err: Error| Error::Utterance {
            id: e.id.clone(),
            source: Box::new(err),
        };
        let audio = manifest
            .audio_path(e)
            .ok_or_else(|| wrap(Error::invalid("entry has no audio")))?;
        let wave = read_wav(&audio).map_err(wrap)?;
        let feats = LogMel::new(frames, wave.sample_rate_hz)?.compute(&wave).map_err(wrap)?;
        let states = model.encode_utterance(store, &feats.frames).map_err(wrap)?;
        let path = out_dir.join(format!("{}.bin", e.id));
        write_tensor(&path, &states).map_err(wrap)?;
        Ok(Entry {
            audio: Some(audio),
            states: Some(path),
            ..e.clone()
        })
    };
    let entries = crate::parallel::map_indexed(manifest.len(), jobs, extract_one)
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Manifest::new(entries, PathBuf::new())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::batch::{Batch, UtteranceInput};

    fn feats(t: usize, d: usize, k: f32) -> Tensor<f32> {
        Tensor::from_fn(t, d, |r, c| ((r * d + c) as f32 * 0.37 + k).sin())
    }

    fn tiny() -> (AsrModel, ParamStore<f32>) {
        let mut store = ParamStore::new();
        let m = AsrModel::build(&AsrConfig::tiny(4), Vocabulary::default(), &mut store, 3).unwrap();
        (m, store)
    }

    #[test]
    fn encode_length_range_and_determinism() {
        let (m, store) = tiny();
        let f = feats(16, 4, 0.0);
        let a = m.encode_utterance(&store, &f).unwrap();
        assert_eq!(a.shape(), (4, 4));
        assert!(a.data().iter().all(|v| v.abs() < 1.0));
        assert_eq!(a, m.encode_utterance(&store, &f).unwrap());
        assert!(matches!(m.encode_utterance(&store, &feats(5, 3, 0.0)), Err(Error::Shape(_))));
    }

    #[test]
    fn unknown_group_is_rejected() {
        let (m, mut store) = tiny();
        assert!(m.set_trainable(&mut store, &[("encoder", false)]).is_ok());
        assert!(m.set_trainable(&mut store, &[("prenet", false)]).is_err());
    }

    #[test]
    fn uniform_output_gives_log_vocab_loss() {
        let (m, mut store) = tiny();
        store.get_mut(m.output.w).value.fill(0.0);
        store.get_mut(m.output.b.unwrap()).value.fill(0.0);
        let batch = Batch {
            ids: vec!["a".into(), "b".into()],
            texts: vec!["ab".into(), "c".into()],
            inputs: vec![
                UtteranceInput { kind: InputKind::Features, data: feats(7, 4, 0.0) },
                UtteranceInput { kind: InputKind::Features, data: feats(3, 4, 1.0) },
            ],
        };
        let input = BatchInput::from_batch(&batch, &m.vocab).unwrap();
        let g = Graph::new();
        let s = Session::new(&g, &store, Mode::EVAL, ChaCha8Rng::seed_from_u64(0));
        let l = g.value(m.loss(&s, &input).unwrap().loss).item();
        assert!((l - (m.vocab.len() as f32).ln()).abs() < 1e-5);
    }
}
