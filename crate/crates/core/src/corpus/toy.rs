//! Seeded toy corpus: synthesized paired utterances, unpaired text that
//! introduces words never heard in the paired set, and held-out test sets.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::audio::write_wav;
use super::manifest::{Entry, EntryKind, Manifest};
use super::synth::{synth_utterance, SynthConfig};
use super::vocab::Vocabulary;

/// Words that may appear in paired speech.
pub const COMMON_WORDS: &[&str] = &[
    "a", "about", "after", "all", "and", "any", "are", "as", "at", "back", "be", "been", "big", "but", "by", "came",
    "can", "cold", "come", "could", "day", "did", "do", "dog", "down", "each", "eye", "far", "few", "find", "first",
    "for", "from", "get", "go", "good", "had", "has", "have", "he", "her", "him", "his", "how", "i", "if", "in",
    "into", "is", "it", "just", "know", "last", "left", "like", "long", "look", "made", "make", "man", "many", "me",
    "more", "most", "my", "new", "no", "not", "now", "of", "old", "on", "one", "only", "or", "other", "our", "out",
    "over", "put", "red", "said", "saw", "see", "she", "so", "some", "take", "than", "that", "the", "them", "then",
    "there", "they", "this", "time", "to", "two", "up", "us", "very", "was", "way", "we", "well", "went", "were",
    "what", "when", "which", "who", "will", "with", "would", "year", "you", "your",
];

/// Words that occur only in unpaired text and the test sets.
pub const HELD_OUT_WORDS: &[&str] = &[
    "rigidly", "lantern", "quiver", "meadow", "justice", "harbor", "velvet", "thimble", "gravel", "pilgrim",
    "orchard", "tundra", "whisker", "bramble", "copper", "falcon", "saddle", "ember", "nectar", "zephyr",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyCorpusConfig {
    pub paired: usize,
    pub unpaired: usize,
    pub valid: usize,
    pub eval: usize,
    pub held_out_words: usize,
    pub min_words: usize,
    pub max_words: usize,
    /// Fraction of validation and evaluation sentences containing a held-out word.
    pub held_out_fraction: f64,
    pub synth: SynthConfig,
}

impl Default for ToyCorpusConfig {
    fn default() -> Self {
        Self {
            paired: 200,
            unpaired: 800,
            valid: 60,
            eval: 60,
            held_out_words: 20,
            min_words: 2,
            max_words: 4,
            held_out_fraction: 0.5,
            synth: SynthConfig::default(),
        }
    }
}

/// Manifests of a generated toy corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyCorpus {
    pub paired: Manifest,
    pub unpaired: Manifest,
    /// The unpaired texts with synthesized audio, for oracle comparisons.
    pub unpaired_audio: Manifest,
    pub valid: Manifest,
    pub eval: Manifest,
    pub held_out: Vec<String>,
}

pub const PAIRED_MANIFEST: &str = "paired.jsonl";
pub const UNPAIRED_MANIFEST: &str = "unpaired.jsonl";
pub const UNPAIRED_AUDIO_MANIFEST: &str = "unpaired_audio.jsonl";
pub const VALID_MANIFEST: &str = "valid.jsonl";
pub const EVAL_MANIFEST: &str = "eval.jsonl";
pub const HELD_OUT_LIST: &str = "held_out_words.txt";

impl ToyCorpusConfig {
    fn validate(&self) -> Result<()> {
        if self.paired == 0 {
            return Err(Error::Config("toy corpus needs paired utterances".into()));
        }
        if self.held_out_words > HELD_OUT_WORDS.len() {
            return Err(Error::Config(format!(
                "at most {} held-out words are available",
                HELD_OUT_WORDS.len()
            )));
        }
        if self.min_words == 0 || self.min_words > self.max_words {
            return Err(Error::Config("sentence word counts must satisfy 1 <= min <= max".into()));
        }
        if !(0.0..=1.0).contains(&self.held_out_fraction) {
            return Err(Error::Config("held_out_fraction must lie in [0, 1]".into()));
        }
        self.synth.validate()
    }
}

fn sentence(rng: &mut ChaCha8Rng, cfg: &ToyCorpusConfig, held_out: Option<&str>) -> String {
    let n = rng.gen_range(cfg.min_words..=cfg.max_words);
    let mut words: Vec<&str> = (0..n).map(|_| *COMMON_WORDS.choose(rng).unwrap()).collect();
    if let Some(w) = held_out {
        let at = rng.gen_range(0..n);
        words[at] = w;
    }
    words.join(" ")
}

/// Sentence texts for each split, before any audio is synthesized.
pub fn toy_texts(cfg: &ToyCorpusConfig, seed: u64) -> Result<(Vec<String>, Vec<String>, Vec<String>, Vec<String>, Vec<String>)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let held: Vec<&str> = HELD_OUT_WORDS[..cfg.held_out_words].to_vec();
    let paired = (0..cfg.paired).map(|_| sentence(&mut rng, cfg, None)).collect();
    let unpaired = (0..cfg.unpaired)
        .map(|i| {
            let w = (!held.is_empty()).then(|| held[i % held.len()]);
            sentence(&mut rng, cfg, w)
        })
        .collect();
    let mut test = |n: usize| -> Vec<String> {
        (0..n)
            .map(|_| {
                let w = (!held.is_empty() && rng.gen_bool(cfg.held_out_fraction)).then(|| *held.choose(&mut rng).unwrap());
                sentence(&mut rng, cfg, w)
            })
            .collect()
    };
    let valid = test(cfg.valid);
    let eval = test(cfg.eval);
    Ok((paired, unpaired, valid, eval, held.iter().map(|s| s.to_string()).collect()))
}

/// Synthesizes the toy corpus under `dir` (audio in `dir/audio`) and writes
/// one manifest per split plus the held-out word list.
pub fn make_toy_corpus(dir: &Path, cfg: &ToyCorpusConfig, vocab: &Vocabulary, seed: u64) -> Result<ToyCorpus> {
    let (paired, unpaired, valid, eval, held_out) = toy_texts(cfg, seed)?;
    let audio_dir = dir.join("audio");
    std::fs::create_dir_all(&audio_dir).map_err(|e| Error::io(&audio_dir, e))?;
    let spoken = |prefix: &str, texts: &[String]| -> Result<Manifest> {
        let mut entries = Vec::with_capacity(texts.len());
        for (i, text) in texts.iter().enumerate() {
            let id = format!("{prefix}{i:04}");
            let rel = Path::new("audio").join(format!("{id}.wav"));
            write_wav(&dir.join(&rel), &synth_utterance(text, &cfg.synth, vocab)?)?;
            entries.push(Entry {
                id,
                text: text.clone(),
                audio: Some(rel),
                states: None,
                kind: EntryKind::Paired,
            });
        }
        Manifest::new(entries, dir)
    };
    let corpus = ToyCorpus {
        paired: spoken("tr", &paired)?,
        unpaired: Manifest::new(
            unpaired
                .iter()
                .enumerate()
                .map(|(i, text)| Entry {
                    id: format!("un{i:04}"),
                    text: text.clone(),
                    audio: None,
                    states: None,
                    kind: EntryKind::Unpaired,
                })
                .collect(),
            dir,
        )?,
        unpaired_audio: spoken("un", &unpaired)?,
        valid: spoken("dv", &valid)?,
        eval: spoken("ev", &eval)?,
        held_out,
    };
    corpus.paired.save(&dir.join(PAIRED_MANIFEST))?;
    corpus.unpaired.save(&dir.join(UNPAIRED_MANIFEST))?;
    corpus.unpaired_audio.save(&dir.join(UNPAIRED_AUDIO_MANIFEST))?;
    corpus.valid.save(&dir.join(VALID_MANIFEST))?;
    corpus.eval.save(&dir.join(EVAL_MANIFEST))?;
    let list = dir.join(HELD_OUT_LIST);
    std::fs::write(&list, corpus.held_out.join("\n") + "\n").map_err(|e| Error::io(&list, e))?;
    Ok(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn held_out_words_never_in_paired_text() {
        let cfg = ToyCorpusConfig::default();
        let (paired, unpaired, valid, _, held) = toy_texts(&cfg, 3).unwrap();
        assert_eq!(paired.len(), 200);
        assert_eq!(unpaired.len(), 800);
        assert_eq!(held.len(), 20);
        for t in &paired {
            assert!(t.split(' ').all(|w| !held.iter().any(|h| h == w)), "{t}");
        }
        for h in &held {
            assert!(unpaired.iter().any(|t| t.split(' ').any(|w| w == h)));
        }
        assert!(valid.iter().any(|t| t.split(' ').any(|w| held.iter().any(|h| h == w))));
        assert!(COMMON_WORDS.iter().all(|w| !HELD_OUT_WORDS.contains(w)));
    }

    #[test]
    fn texts_are_seeded() {
        let cfg = ToyCorpusConfig::default();
        assert_eq!(toy_texts(&cfg, 9).unwrap(), toy_texts(&cfg, 9).unwrap());
        assert_ne!(toy_texts(&cfg, 9).unwrap().0, toy_texts(&cfg, 10).unwrap().0);
    }

    #[test]
    fn writes_manifests_and_audio() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ToyCorpusConfig {
            paired: 3,
            unpaired: 4,
            valid: 2,
            eval: 1,
            ..Default::default()
        };
        let c = make_toy_corpus(dir.path(), &cfg, &Vocabulary::default(), 1).unwrap();
        let back = super::super::manifest::load_manifest(&dir.path().join(PAIRED_MANIFEST)).unwrap();
        assert_eq!(back.len(), 3);
        assert!(back.audio_path(&back.entries[0]).unwrap().exists());
        assert_eq!(c.unpaired.len(), 4);
        assert_eq!(c.unpaired_audio.texts(), c.unpaired.texts());
        assert!(c.unpaired.entries.iter().all(|e| e.audio.is_none()));
    }
}
