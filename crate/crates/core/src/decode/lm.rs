//! Character-level LSTM language model for shallow fusion.

use std::path::Path;
use std::rc::Rc;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::corpus::batch::TargetBatch;
use crate::corpus::vocab::Vocabulary;
use crate::error::{Error, Result};
use crate::nn::layers::LstmLayer;
use crate::nn::{Embedding, Graph, Linear, Mode, ParamStore, SeqLayout, Session, Var};
use crate::optim::{clip_grad_norm, Adam, AdamConfig};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CharLmConfig {
    pub embedding_dim: usize,
    pub units: usize,
}

impl Default for CharLmConfig {
    fn default() -> Self {
        Self {
            embedding_dim: 32,
            units: 128,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CharLm {
    pub config: CharLmConfig,
    pub vocab: Vocabulary,
    embed: Embedding,
    lstm: LstmLayer,
    output: Linear,
}

/// Recurrent state of the language model for a batch of prefixes.
#[derive(Clone, Copy, Debug)]
pub struct LmCarry {
    pub h: Var,
    pub c: Var,
}

impl CharLm {
    pub fn build<T: Scalar>(
        config: &CharLmConfig,
        vocab: Vocabulary,
        store: &mut ParamStore<T>,
        seed: u64,
    ) -> Result<Self> {
        if config.embedding_dim == 0 || config.units == 0 {
            return Err(Error::Config("language model dimensions must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embed = Embedding::new(store, "lm.embed", vocab.len(), config.embedding_dim, &mut rng);
        let lstm = LstmLayer::new(store, "lm.lstm", config.embedding_dim, config.units, &mut rng);
        let output = Linear::new(store, "lm.output", config.units, vocab.len(), true, &mut rng);
        Ok(Self {
            config: config.clone(),
            vocab,
            embed,
            lstm,
            output,
        })
    }

    pub fn initial_carry<T: Scalar>(&self, s: &Session<'_, T>, batch: usize) -> LmCarry {
        let (h, c) = self.lstm.cell.zero_state(s, batch);
        LmCarry { h, c }
    }

    /// Next-character logits after consuming `prev` (one id per row).
    pub fn step<T: Scalar>(&self, s: &Session<'_, T>, prev: &[usize], carry: LmCarry) -> (Var, LmCarry) {
        let x = self.embed.forward(s, prev);
        let (h, c) = self.lstm.cell.step(s, x, carry.h, carry.c, 0.0);
        (self.output.forward(s, h), LmCarry { h, c })
    }

    /// Mean next-character cross-entropy (nats per predicted token, `<eos>` included).
    pub fn loss<T: Scalar>(&self, s: &Session<'_, T>, targets: &TargetBatch) -> Var {
        let g = s.graph;
        let b = targets.batch();
        let layout = Rc::new(SeqLayout::new(targets.token_counts.clone()));
        let x = self.embed.forward(s, &targets.inputs);
        let h = self.lstm.forward(s, x, &layout, false);
        let logits = self.output.forward(s, h);
        let w = T::one() / T::from_f64(targets.total_tokens() as f64);
        let weights: Vec<T> = targets.valid.iter().map(|&v| if v { w } else { T::zero() }).collect();
        assert_eq!(targets.outputs.len(), layout.steps * b);
        g.softmax_xent(logits, &targets.outputs, &weights)
    }

    /// Per-row next-character distributions for a single prefix batch.
    pub fn distribution(&self, store: &ParamStore<f32>, prefix: &[usize]) -> Tensor<f32> {
        let g = Graph::new();
        let s = Session::new(&g, store, Mode::EVAL, ChaCha8Rng::seed_from_u64(0));
        let mut carry = self.initial_carry(&s, 1);
        let mut logits = None;
        for &c in std::iter::once(&crate::corpus::vocab::SOS).chain(prefix) {
            let (y, next) = self.step(&s, &[c], carry);
            logits = Some(y);
            carry = next;
        }
        let v = g.value(logits.expect("at least one step"));
        crate::nn::graph::log_softmax_rows(&v).map(f32::exp)
    }

    pub fn save(&self, store: &ParamStore<f32>, path: &Path) -> Result<()> {
        Checkpoint::new("lm", &self.config, &self.vocab, store)?.save(path)
    }

    pub fn load(path: &Path) -> Result<(Self, ParamStore<f32>)> {
        let ck = Checkpoint::load(path)?;
        ck.expect_model("lm")?;
        let config: CharLmConfig = ck.config()?;
        let mut store = ParamStore::new();
        let lm = Self::build(&config, ck.vocab()?, &mut store, 0)?;
        ck.restore(&mut store)?;
        Ok((lm, store))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub clip_norm: f64,
    /// Fraction of texts held out for validation perplexity.
    pub valid_fraction: f64,
    pub optimizer: AdamConfig,
}

impl Default for LmTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 50,
            clip_norm: 5.0,
            valid_fraction: 0.1,
            optimizer: AdamConfig {
                lr: 3e-3,
                ..AdamConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LmTrainLog {
    pub initial_perplexity: f64,
    /// Validation perplexity after each epoch.
    pub perplexity: Vec<f64>,
}

fn mean_nll(lm: &CharLm, store: &ParamStore<f32>, texts: &[Vec<usize>], batch_size: usize) -> Result<f64> {
    let mut total = 0.0;
    let mut tokens = 0usize;
    for chunk in texts.chunks(batch_size.max(1)) {
        let targets = TargetBatch::new(chunk)?;
        let g = Graph::new();
        let s = Session::new(&g, store, Mode::EVAL, ChaCha8Rng::seed_from_u64(0));
        let loss = lm.loss(&s, &targets);
        total += g.value(loss).item() as f64 * targets.total_tokens() as f64;
        tokens += targets.total_tokens();
    }
    Ok(total / tokens.max(1) as f64)
}

/// Trains on `texts` with a deterministic validation split; returns the model,
/// its parameters and the perplexity log.
pub fn train_char_lm(
    texts: &[String],
    vocab: &Vocabulary,
    config: &CharLmConfig,
    train: &LmTrainConfig,
    seed: u64,
) -> Result<(CharLm, ParamStore<f32>, LmTrainLog)> {
    let mut encoded = texts
        .iter()
        .map(|t| vocab.encode(t))
        .collect::<Result<Vec<_>>>()?;
    encoded.retain(|t| !t.is_empty());
    if encoded.is_empty() {
        return Err(Error::invalid("language model corpus is empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    encoded.shuffle(&mut rng);
    let n_valid = ((encoded.len() as f64 * train.valid_fraction).round() as usize).min(encoded.len() - 1);
    let valid: Vec<Vec<usize>> = encoded.drain(..n_valid).collect();
    let valid = if valid.is_empty() { encoded.clone() } else { valid };

    let mut store = ParamStore::new();
    let lm = CharLm::build(config, vocab.clone(), &mut store, seed)?;
    let mut log = LmTrainLog {
        initial_perplexity: mean_nll(&lm, &store, &valid, train.batch_size)?.exp(),
        ..Default::default()
    };
    let mut opt = Adam::new(&train.optimizer, &store);
    for epoch in 1..=train.epochs {
        encoded.shuffle(&mut rng);
        for chunk in encoded.chunks(train.batch_size.max(1)) {
            let targets = TargetBatch::new(chunk)?;
            store.zero_grad();
            let g = Graph::new();
            let loss = {
                let s = Session::new(&g, &store, Mode::TRAIN, ChaCha8Rng::seed_from_u64(0));
                lm.loss(&s, &targets)
            };
            g.backward_into(loss, &mut store);
            clip_grad_norm(&mut store, train.clip_norm);
            opt.step(&mut store);
        }
        let ppl = mean_nll(&lm, &store, &valid, train.batch_size)?.exp();
        info!("lm epoch {epoch}: validation perplexity {ppl:.3}");
        log.perplexity.push(ppl);
    }
    Ok((lm, store, log))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus() -> Vec<String> {
        ["the cat", "the hat", "a cat sat", "the mat", "a hat sat on the mat"]
            .iter()
            .cycle()
            .take(60)
            .map(|s| s.to_string())
            .collect()
    }

    #[test]
    fn distribution_sums_to_one() {
        let vocab = Vocabulary::default();
        let mut store = ParamStore::new();
        let lm = CharLm::build(&CharLmConfig::default(), vocab.clone(), &mut store, 3).unwrap();
        let p = lm.distribution(&store, &vocab.encode("ab").unwrap());
        assert_eq!(p.cols(), vocab.len());
        assert!((p.sum() - 1.0).abs() < 1e-5);
    }

    #[test]
    fn training_beats_uniform_and_is_reproducible() {
        let vocab = Vocabulary::default();
        let cfg = CharLmConfig {
            embedding_dim: 16,
            units: 32,
        };
        let train = LmTrainConfig {
            epochs: 8,
            batch_size: 10,
            ..Default::default()
        };
        let (_, a, log) = train_char_lm(&corpus(), &vocab, &cfg, &train, 5).unwrap();
        let last = *log.perplexity.last().unwrap();
        assert!(last < vocab.len() as f64, "perplexity {last}");
        assert!(last < log.initial_perplexity);
        let (_, b, _) = train_char_lm(&corpus(), &vocab, &cfg, &train, 5).unwrap();
        assert_eq!(a.named_values(), b.named_values());
    }

    #[test]
    fn empty_corpus_is_rejected() {
        let vocab = Vocabulary::default();
        let r = train_char_lm(&[], &vocab, &CharLmConfig::default(), &LmTrainConfig::default(), 0);
        assert!(r.is_err());
    }
}
