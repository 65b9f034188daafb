//! Utterance loading, shuffling, and padded batch assembly.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::SeqLayout;
use crate::tensor::Tensor;

use super::audio::read_wav;
use super::features::{FrameConfig, LogMel};
use super::manifest::{Entry, EntryKind, Manifest};
use super::tensor_io::read_tensor;
use super::vocab::{Vocabulary, EOS, SOS};

/// Which stored representation each utterance is read from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputSource {
    Features,
    StoredStates,
    /// Paired entries use features, generated entries use stored states.
    Mixed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputKind {
    /// Log-mel frames, routed through the recognizer's encoder.
    Features,
    /// Encoder states, fed to the decoder directly.
    States,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UtteranceInput {
    pub kind: InputKind,
    /// One row per frame (features) or per encoder step (states).
    pub data: Tensor<f32>,
}

impl UtteranceInput {
    pub fn len(&self) -> usize {
        self.data.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.data.rows() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: String,
    pub text: String,
    pub input: UtteranceInput,
}

/// Decides which source an entry is read from under `source`.
pub fn route(entry: &Entry, source: InputSource) -> Result<InputKind> {
    let kind = match source {
        InputSource::Features => entry.audio.as_ref().map(|_| InputKind::Features),
        InputSource::StoredStates => entry.states.as_ref().map(|_| InputKind::States),
        InputSource::Mixed => match entry.kind {
            EntryKind::Paired => Some(InputKind::Features),
            EntryKind::Generated => Some(InputKind::States),
            EntryKind::Unpaired => {
                if entry.audio.is_some() {
                    Some(InputKind::Features)
                } else if entry.states.is_some() {
                    Some(InputKind::States)
                } else {
                    None
                }
            }
        },
    };
    kind.ok_or_else(|| {
        Error::invalid(format!(
            "entry {} has no input usable under source {source:?}",
            entry.id
        ))
    })
}

/// All utterances of a manifest, read into memory once.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn load(manifest: &Manifest, source: InputSource, frames: &FrameConfig) -> Result<Self> {
        let mut extractor: Option<LogMel> = None;
        let mut examples = Vec::with_capacity(manifest.len());
        for e in &manifest.entries {
            let wrap = |err: Error| Error::Utterance {
                id: e.id.clone(),
                source: Box::new(err),
            };
            let kind = route(e, source)?;
            let data = match kind {
                InputKind::Features => {
                    let path = manifest.audio_path(e).expect("routed entry has audio");
                    let wave = read_wav(&path).map_err(wrap)?;
                    if extractor.as_ref().map(|x| x.sample_rate()) != Some(wave.sample_rate_hz) {
                        extractor = Some(LogMel::new(frames, wave.sample_rate_hz)?);
                    }
                    extractor.as_ref().unwrap().compute(&wave).map_err(wrap)?.frames
                }
                InputKind::States => {
                    let path = manifest.states_path(e).expect("routed entry has states");
                    read_tensor(&path).map_err(wrap)?
                }
            };
            if data.rows() == 0 {
                return Err(wrap(Error::invalid("input has no frames")));
            }
            examples.push(Example {
                id: e.id.clone(),
                text: e.text.clone(),
                input: UtteranceInput { kind, data },
            });
        }
        Ok(Self { examples })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Seeded shuffle into consecutive batches; each batch is sorted by
    /// input length, longest first.
    pub fn batches(&self, batch_size: usize, seed: u64) -> Result<Vec<Batch>> {
        if batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        let mut order: Vec<usize> = (0..self.examples.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        Ok(order
            .chunks(batch_size)
            .map(|chunk| {
                let mut idx = chunk.to_vec();
                idx.sort_by_key(|&i| std::cmp::Reverse(self.examples[i].input.len()));
                Batch::from_examples(idx.iter().map(|&i| &self.examples[i]))
            })
            .collect())
    }

    /// Fixed-order batches without shuffling, for evaluation.
    pub fn ordered_batches(&self, batch_size: usize) -> Result<Vec<Batch>> {
        if batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        Ok(self
            .examples
            .chunks(batch_size)
            .map(|c| Batch::from_examples(c.iter()))
            .collect())
    }
}

/// Reads a manifest and partitions it into shuffled batches.
pub fn make_batches(
    manifest: &Manifest,
    batch_size: usize,
    source: InputSource,
    seed: u64,
    frames: &FrameConfig,
) -> Result<Vec<Batch>> {
    Dataset::load(manifest, source, frames)?.batches(batch_size, seed)
}

/// Unpadded utterances of one batch, each tagged with its input kind.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub ids: Vec<String>,
    pub texts: Vec<String>,
    pub inputs: Vec<UtteranceInput>,
}

impl Batch {
    pub fn from_examples<'a>(examples: impl Iterator<Item = &'a Example>) -> Self {
        let mut b = Batch {
            ids: Vec::new(),
            texts: Vec::new(),
            inputs: Vec::new(),
        };
        for e in examples {
            b.ids.push(e.id.clone());
            b.texts.push(e.text.clone());
            b.inputs.push(e.input.clone());
        }
        b
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// The utterances of one input kind, padded with zeros into a time-major matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct PaddedGroup {
    /// `(steps · members) × dim`, row `t * members + j`.
    pub data: Tensor<f32>,
    pub layout: SeqLayout,
    /// Position of each member within the batch.
    pub members: Vec<usize>,
}

impl PaddedGroup {
    pub fn pad(seqs: &[&Tensor<f32>], members: Vec<usize>) -> Result<Self> {
        let dim = seqs.first().map(|t| t.cols()).unwrap_or(0);
        if seqs.iter().any(|t| t.cols() != dim) {
            return Err(Error::Shape("utterances in a batch differ in feature dimension".into()));
        }
        let layout = SeqLayout::new(seqs.iter().map(|t| t.rows()).collect());
        let b = seqs.len();
        let mut data = Tensor::zeros(layout.steps * b, dim);
        for (j, s) in seqs.iter().enumerate() {
            for t in 0..s.rows() {
                data.row_mut(t * b + j).copy_from_slice(s.row(t));
            }
        }
        Ok(Self {
            data,
            layout,
            members,
        })
    }
}

/// Teacher-forcing targets in time-major order: entry `l * batch + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetBatch {
    pub steps: usize,
    /// Previous character fed to the decoder (`<sos>` first, `<eos>` on padding).
    pub inputs: Vec<usize>,
    /// Character to predict (`<eos>` last and on padding).
    pub outputs: Vec<usize>,
    pub valid: Vec<bool>,
    /// Target tokens per utterance, counting the final `<eos>`.
    pub token_counts: Vec<usize>,
}

impl TargetBatch {
    pub fn new(seqs: &[Vec<usize>]) -> Result<Self> {
        if seqs.iter().any(|s| s.is_empty()) {
            return Err(Error::invalid("empty target text"));
        }
        let b = seqs.len();
        let steps = seqs.iter().map(|s| s.len() + 1).max().unwrap_or(0);
        let mut inputs = vec![EOS; steps * b];
        let mut outputs = vec![EOS; steps * b];
        let mut valid = vec![false; steps * b];
        for (j, s) in seqs.iter().enumerate() {
            for l in 0..=s.len() {
                inputs[l * b + j] = if l == 0 { SOS } else { s[l - 1] };
                outputs[l * b + j] = if l < s.len() { s[l] } else { EOS };
                valid[l * b + j] = true;
            }
        }
        Ok(Self {
            steps,
            inputs,
            outputs,
            valid,
            token_counts: seqs.iter().map(|s| s.len() + 1).collect(),
        })
    }

    pub fn batch(&self) -> usize {
        self.token_counts.len()
    }

    pub fn total_tokens(&self) -> usize {
        self.token_counts.iter().sum()
    }
}

/// Numeric form of a batch: inputs split by kind and padded, plus targets.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchInput {
    pub size: usize,
    pub features: Option<PaddedGroup>,
    pub states: Option<PaddedGroup>,
    pub targets: TargetBatch,
}

impl BatchInput {
    pub fn from_batch(batch: &Batch, vocab: &Vocabulary) -> Result<Self> {
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let mut groups: [(Vec<&Tensor<f32>>, Vec<usize>); 2] = Default::default();
        for (i, u) in batch.inputs.iter().enumerate() {
            if u.is_empty() {
                return Err(Error::invalid(format!("utterance {} has no frames", batch.ids[i])));
            }
            let g = match u.kind {
                InputKind::Features => 0,
                InputKind::States => 1,
            };
            groups[g].0.push(&u.data);
            groups[g].1.push(i);
        }
        let [(fs, fm), (ss, sm)] = groups;
        let features = (!fs.is_empty()).then(|| PaddedGroup::pad(&fs, fm)).transpose()?;
        let states = (!ss.is_empty()).then(|| PaddedGroup::pad(&ss, sm)).transpose()?;
        let seqs = batch
            .texts
            .iter()
            .map(|t| vocab.encode(t))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            size: batch.len(),
            features,
            states,
            targets: TargetBatch::new(&seqs)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n: usize) -> Dataset {
        Dataset {
            examples: (0..n)
                .map(|i| Example {
                    id: format!("u{i}"),
                    text: "ab".into(),
                    input: UtteranceInput {
                        kind: if i % 2 == 0 { InputKind::Features } else { InputKind::States },
                        data: Tensor::full(1 + i % 4, 2, i as f32),
                    },
                })
                .collect(),
        }
    }

    #[test]
    fn partition_sizes_and_coverage() {
        let d = toy(10);
        let b = d.batches(4, 1).unwrap();
        assert_eq!(b.iter().map(Batch::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        let mut ids: Vec<_> = b.iter().flat_map(|x| x.ids.clone()).collect();
        ids.sort();
        let mut all: Vec<_> = d.examples.iter().map(|e| e.id.clone()).collect();
        all.sort();
        assert_eq!(ids, all);
        assert_eq!(b, d.batches(4, 1).unwrap());
        for batch in &b {
            assert!(batch.inputs.windows(2).all(|w| w[0].len() >= w[1].len()));
        }
    }

    #[test]
    fn padding_and_targets() {
        let d = toy(3);
        let batch = Batch::from_examples(d.examples.iter());
        let bi = BatchInput::from_batch(&batch, &Vocabulary::default()).unwrap();
        let f = bi.features.unwrap();
        assert_eq!(f.members, vec![0, 2]);
        assert_eq!(f.layout.lens, vec![1, 3]);
        assert_eq!(f.data.row(0), &[0.0, 0.0]);
        assert_eq!(f.data.row(2), &[0.0, 0.0]);
        assert_eq!(f.data.row(5), &[2.0, 2.0]);
        assert_eq!(bi.states.unwrap().members, vec![1]);
        let t = bi.targets;
        assert_eq!(t.steps, 3);
        assert_eq!(t.inputs[..3], [SOS, SOS, SOS]);
        assert_eq!(t.outputs[6..], [EOS, EOS, EOS]);
        assert_eq!(t.total_tokens(), 9);
    }
}
