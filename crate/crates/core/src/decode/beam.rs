//! Length-constrained beam search over the recognizer with optional shallow
//! fusion of a character language model.

use std::collections::HashMap;
use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::asr::{AsrModel, DecoderCarry};
use crate::corpus::batch::{Dataset, InputKind, UtteranceInput};
use crate::corpus::vocab::{EOS, SOS};
use crate::error::{Error, Result};
use crate::nn::graph::log_softmax_rows;
use crate::nn::{AttentionMemory, AttentionState, Graph, Mode, ParamStore, SeqLayout, Session, Var};
use crate::tensor::Tensor;

use super::lm::{CharLm, LmCarry};
use super::metrics::{score, ScoreSummary, UtteranceScore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BeamConfig {
    pub beam_size: usize,
    /// Shortest allowed output, as a fraction of the encoder output length.
    pub min_ratio: f64,
    /// Longest allowed output, as a fraction of the encoder output length.
    pub max_ratio: f64,
    /// Weight of the language model log-probability.
    pub lm_weight: f64,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self {
            beam_size: 20,
            min_ratio: 0.3,
            max_ratio: 0.8,
            lm_weight: 0.0,
        }
    }
}

impl BeamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 {
            return Err(Error::invalid("beam size must be at least 1"));
        }
        if !(self.min_ratio > 0.0 && self.min_ratio <= self.max_ratio) {
            return Err(Error::invalid(format!(
                "length ratios must satisfy 0 < min ({}) <= max ({})",
                self.min_ratio, self.max_ratio
            )));
        }
        if !self.lm_weight.is_finite() {
            return Err(Error::invalid("language model weight must be finite"));
        }
        Ok(())
    }

    /// `(ceil(min_ratio·T), floor(max_ratio·T))` for `T` encoder states.
    pub fn length_bounds(&self, states: usize) -> Result<(usize, usize)> {
        self.validate()?;
        if states == 0 {
            return Err(Error::invalid("cannot decode an empty input"));
        }
        let lo = (self.min_ratio * states as f64).ceil() as usize;
        let hi = (self.max_ratio * states as f64).floor() as usize;
        if hi < 1 {
            return Err(Error::invalid(format!(
                "maximum output length is zero for {states} encoder states"
            )));
        }
        Ok((lo.min(hi), hi))
    }
}

/// A decoded token sequence with its accumulated score.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Emitted tokens; a finished hypothesis ends with `<eos>`.
    pub tokens: Vec<usize>,
    /// Sum of per-step recognizer log-probabilities plus the weighted
    /// language model log-probabilities.
    pub log_score: f64,
    /// Attention weights per emitted token (steps × encoder states).
    pub attention: Vec<Vec<f32>>,
}

impl Hypothesis {
    pub fn finished(&self) -> bool {
        self.tokens.last() == Some(&EOS)
    }

    /// Number of emitted characters, `<eos>` excluded.
    pub fn len(&self) -> usize {
        self.tokens.len() - usize::from(self.finished())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn attention_matrix(&self) -> Tensor<f32> {
        let cols = self.attention.first().map_or(0, Vec::len);
        Tensor::from_fn(self.attention.len(), cols, |r, c| self.attention[r][c])
    }
}

/// A language model together with its parameters.
#[derive(Clone, Copy)]
pub struct Fusion<'a> {
    pub lm: &'a CharLm,
    pub store: &'a ParamStore<f32>,
}

/// Eval-mode encoder states of an utterance (stored states pass through).
pub fn encoder_states(model: &AsrModel, store: &ParamStore<f32>, input: &UtteranceInput) -> Result<Tensor<f32>> {
    match input.kind {
        InputKind::Features => model.encode_utterance(store, &input.data),
        InputKind::States => {
            if input.data.cols() != model.state_dim() {
                return Err(Error::Shape(format!(
                    "stored states have {} dimensions, decoder expects {}",
                    input.data.cols(),
                    model.state_dim()
                )));
            }
            Ok(input.data.clone())
        }
    }
}

/// Decoder context for one utterance, replicated for each live hypothesis.
struct Stepper<'g, 'a> {
    s: Session<'g, f32>,
    model: &'a AsrModel,
    states: Var,
    steps: usize,
    memories: HashMap<usize, AttentionMemory>,
    lm: Option<(&'a CharLm, Session<'g, f32>)>,
}

impl<'g, 'a> Stepper<'g, 'a> {
    fn ensure_memory(&mut self, n: usize) -> Result<()> {
        if !self.memories.contains_key(&n) {
            let ids: Vec<usize> = (0..self.steps).flat_map(|t| std::iter::repeat(t).take(n)).collect();
            let tiled = self.s.graph.gather_rows(self.states, &ids);
            let layout = SeqLayout::new(vec![self.steps; n]);
            let mem = self.model.prepare_memory(&self.s, tiled, &layout)?;
            self.memories.insert(n, mem);
        }
        Ok(())
    }

    fn reorder(&self, carry: &DecoderCarry, parents: &[usize]) -> DecoderCarry {
        let g = self.s.graph;
        DecoderCarry {
            h: g.gather_rows(carry.h, parents),
            c: g.gather_rows(carry.c, parents),
            attention: AttentionState {
                weights: g.gather_rows(carry.attention.weights, parents),
                accumulated: g.gather_rows(carry.attention.accumulated, parents),
            },
        }
    }
}

fn log_probs(g: &Graph<f32>, logits: Var) -> Tensor<f64> {
    log_softmax_rows(&g.value(logits).cast::<f64>())
}

struct Live {
    tokens: Vec<usize>,
    score: f64,
    attention: Vec<Vec<f32>>,
}

/// Ranks hypotheses by descending score, ties by ascending token sequence.
fn rank(a: &(f64, Vec<usize>), b: &(f64, Vec<usize>)) -> std::cmp::Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1))
}

/// Beam search over precomputed encoder states. Returns up to `beam_size`
/// finished hypotheses sorted best first.
pub fn beam_search(
    model: &AsrModel,
    store: &ParamStore<f32>,
    states: &Tensor<f32>,
    config: &BeamConfig,
    fusion: Option<Fusion<'_>>,
) -> Result<Vec<Hypothesis>> {
    let (min_len, max_len) = config.length_bounds(states.rows())?;
    let k = config.beam_size;
    let g = Graph::new();
    let lm_graph = Graph::new();
    let s = Session::new(&g, store, Mode::EVAL, ChaCha8Rng::seed_from_u64(0));
    let states_var = s.constant(states.clone());
    let mut stepper = Stepper {
        s,
        model,
        states: states_var,
        steps: states.rows(),
        memories: HashMap::new(),
        lm: fusion.map(|f| {
            (
                f.lm,
                Session::new(&lm_graph, f.store, Mode::EVAL, ChaCha8Rng::seed_from_u64(0)),
            )
        }),
    };
    stepper.ensure_memory(1)?;
    let mut carry = model.initial_carry(&stepper.s, &stepper.memories[&1]);
    let mut lm_carry: Option<LmCarry> = stepper.lm.as_ref().map(|(lm, ls)| lm.initial_carry(ls, 1));
    let mut live = vec![Live {
        tokens: Vec::new(),
        score: 0.0,
        attention: Vec::new(),
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    while !live.is_empty() {
        let n = live.len();
        let prev: Vec<usize> = live.iter().map(|h| *h.tokens.last().unwrap_or(&SOS)).collect();
        stepper.ensure_memory(n)?;
        let (logits, next) = model.decode_step(&stepper.s, &stepper.memories[&n], &prev, &carry);
        let asr = log_probs(&g, logits);
        let weights = g.value(next.attention.weights).clone();
        let (lm_lp, lm_next) = match (&stepper.lm, lm_carry) {
            (Some((lm, ls)), Some(c)) => {
                let (y, c2) = lm.step(ls, &prev, c);
                (Some(log_probs(&lm_graph, y)), Some(c2))
            }
            _ => (None, None),
        };
        let mut candidates: Vec<(f64, Vec<usize>, usize, usize)> = Vec::new();
        for (i, h) in live.iter().enumerate() {
            let len = h.tokens.len();
            for v in 0..asr.cols() {
                let allowed = if len >= max_len {
                    v == EOS
                } else {
                    v != SOS && (v != EOS || len >= min_len)
                };
                if !allowed {
                    continue;
                }
                let mut sc = h.score + asr.get(i, v);
                if let Some(lp) = &lm_lp {
                    sc += config.lm_weight * lp.get(i, v);
                }
                let mut tokens = h.tokens.clone();
                tokens.push(v);
                candidates.push((sc, tokens, i, v));
            }
        }
        candidates.sort_by(|a, b| rank(&(a.0, a.1.clone()), &(b.0, b.1.clone())));
        candidates.truncate(k);
        let mut survivors = Vec::new();
        let mut parents = Vec::new();
        for (sc, tokens, i, v) in candidates {
            let mut attention = live[i].attention.clone();
            attention.push(weights.row(i).to_vec());
            if v == EOS {
                finished.push(Hypothesis {
                    tokens,
                    log_score: sc,
                    attention,
                });
            } else {
                survivors.push(Live {
                    tokens,
                    score: sc,
                    attention,
                });
                parents.push(i);
            }
        }
        // scores only decrease, so live prefixes cannot overtake a full beam
        if finished.len() >= k {
            finished.sort_by(|a, b| rank(&(a.log_score, a.tokens.clone()), &(b.log_score, b.tokens.clone())));
            finished.truncate(k);
            let worst = finished[k - 1].log_score;
            let kept: Vec<(Live, usize)> = survivors
                .into_iter()
                .zip(parents)
                .filter(|(h, _)| h.score > worst)
                .collect();
            (survivors, parents) = kept.into_iter().unzip();
        }
        if survivors.is_empty() {
            break;
        }
        carry = stepper.reorder(&next, &parents);
        lm_carry = lm_next.map(|c| LmCarry {
            h: lm_graph.gather_rows(c.h, &parents),
            c: lm_graph.gather_rows(c.c, &parents),
        });
        live = survivors;
    }
    finished.sort_by(|a, b| rank(&(a.log_score, a.tokens.clone()), &(b.log_score, b.tokens.clone())));
    finished.truncate(k);
    Ok(finished)
}

/// Argmax decoding under the same length constraints as [`beam_search`].
pub fn greedy_decode(
    model: &AsrModel,
    store: &ParamStore<f32>,
    states: &Tensor<f32>,
    config: &BeamConfig,
) -> Result<Hypothesis> {
    let (min_len, max_len) = config.length_bounds(states.rows())?;
    let g = Graph::new();
    let s = Session::new(&g, store, Mode::EVAL, ChaCha8Rng::seed_from_u64(0));
    let layout = Rc::new(SeqLayout::new(vec![states.rows()]));
    let mem = model.prepare_memory(&s, s.constant(states.clone()), &layout)?;
    let mut carry = model.initial_carry(&s, &mem);
    let mut hyp = Hypothesis {
        tokens: Vec::new(),
        log_score: 0.0,
        attention: Vec::new(),
    };
    loop {
        let prev = *hyp.tokens.last().unwrap_or(&SOS);
        let (logits, next) = model.decode_step(&s, &mem, &[prev], &carry);
        let lp = log_probs(&g, logits);
        let len = hyp.tokens.len();
        let mut best: Option<usize> = None;
        for v in 0..lp.cols() {
            let allowed = if len >= max_len {
                v == EOS
            } else {
                v != SOS && (v != EOS || len >= min_len)
            };
            if allowed && best.map_or(true, |b| lp.get(0, v) > lp.get(0, b)) {
                best = Some(v);
            }
        }
        let v = best.expect("at least one token is allowed");
        hyp.log_score += lp.get(0, v);
        hyp.tokens.push(v);
        hyp.attention.push(g.value(next.attention.weights).row(0).to_vec());
        carry = next;
        if v == EOS {
            return Ok(hyp);
        }
    }
}

/// One decoded utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub id: String,
    pub reference: String,
    pub hypothesis: Hypothesis,
    pub text: String,
}

/// Decodes every example, splitting the work over `jobs` threads. Output
/// order follows the dataset.
pub fn decode_dataset(
    model: &AsrModel,
    store: &ParamStore<f32>,
    data: &Dataset,
    config: &BeamConfig,
    fusion: Option<Fusion<'_>>,
    jobs: usize,
) -> Result<Vec<Decoded>> {
    config.validate()?;
    let decode_one = |i: usize| -> Result<Decoded> {
        let e = &data.examples[i];
        let wrap = |err: Error| Error::Utterance {
            id: e.id.clone(),
            source: Box::new(err),
        };
        let states = encoder_states(model, store, &e.input).map_err(wrap)?;
        let best = beam_search(model, store, &states, config, fusion)
            .map_err(wrap)?
            .into_iter()
            .next()
            .ok_or_else(|| wrap(Error::invalid("beam search produced no hypothesis")))?;
        Ok(Decoded {
            id: e.id.clone(),
            reference: e.text.clone(),
            text: model.vocab.decode(&best.tokens),
            hypothesis: best,
        })
    };
    crate::parallel::map_indexed(data.examples.len(), jobs, decode_one)
        .into_iter()
        .collect()
}

/// Scores decoded utterances against their references.
pub fn score_decoded(decoded: &[Decoded]) -> Result<(Vec<UtteranceScore>, ScoreSummary)> {
    let triples: Vec<(String, String, String)> = decoded
        .iter()
        .map(|d| (d.id.clone(), d.reference.clone(), d.text.clone()))
        .collect();
    score(&triples)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionTuning {
    pub best_weight: f64,
    /// `(weight, corpus CER)` for every grid point, in ascending weight order.
    pub grid: Vec<(f64, f64)>,
}

/// Picks the language model weight with the lowest development CER; ties go
/// to the smaller weight.
pub fn tune_fusion_weight(
    model: &AsrModel,
    store: &ParamStore<f32>,
    fusion: Fusion<'_>,
    dev: &Dataset,
    grid: &[f64],
    config: &BeamConfig,
    jobs: usize,
) -> Result<FusionTuning> {
    if grid.is_empty() {
        return Err(Error::invalid("fusion weight grid is empty"));
    }
    let mut weights = grid.to_vec();
    weights.sort_by(f64::total_cmp);
    weights.dedup();
    let mut results = Vec::with_capacity(weights.len());
    let mut best: Option<(f64, f64)> = None;
    for &w in &weights {
        let cfg = BeamConfig {
            lm_weight: w,
            ..config.clone()
        };
        let decoded = decode_dataset(model, store, dev, &cfg, Some(fusion), jobs)?;
        let cer = score_decoded(&decoded)?.1.cer;
        results.push((w, cer));
        if best.map_or(true, |(_, c)| cer < c) {
            best = Some((w, cer));
        }
    }
    Ok(FusionTuning {
        best_weight: best.expect("grid is nonempty").0,
        grid: results,
    })
}
