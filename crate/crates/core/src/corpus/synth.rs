//! Deterministic character-tone synthesizer used as a stand-in for speech.
//!
//! Every ordinary vocabulary character owns a base frequency; an utterance is
//! the concatenation of fixed-length tone segments, one per character. A small
//! per-position frequency jitter and optional low-level noise make neighbouring
//! characters partially confusable, so a recognizer also has to lean on
//! textual context.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::vocab::Vocabulary;

#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate_hz: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate_hz: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid("waveform is empty"));
        }
        if sample_rate_hz == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        if samples.iter().any(|s| !s.is_finite() || s.abs() > 1.0) {
            return Err(Error::invalid("waveform samples must be finite and within [-1, 1]"));
        }
        Ok(Self {
            samples,
            sample_rate_hz,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub sample_rate_hz: u32,
    pub char_duration_ms: f64,
    /// Lowest and highest character base frequencies; the others are spaced
    /// evenly on the mel scale in between.
    pub min_freq_hz: f64,
    pub max_freq_hz: f64,
    /// Peak amplitude of each tone.
    pub amplitude: f64,
    /// Frequency jitter as a fraction of the mel spacing between neighbouring
    /// characters.
    pub jitter: f64,
    /// Peak amplitude of the additive noise.
    pub noise: f64,
    /// Raised-cosine fade at both ends of each segment.
    pub fade_ms: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            sample_rate_hz: 16_000,
            char_duration_ms: 60.0,
            min_freq_hz: 250.0,
            max_freq_hz: 3800.0,
            amplitude: 0.5,
            jitter: 0.35,
            noise: 0.0,
            fade_ms: 5.0,
        }
    }
}

impl SynthConfig {
    pub fn samples_per_char(&self) -> usize {
        (self.char_duration_ms * self.sample_rate_hz as f64 / 1000.0).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let nyquist = self.sample_rate_hz as f64 / 2.0;
        if self.sample_rate_hz == 0 || self.samples_per_char() == 0 {
            return Err(Error::Config("synth: sample rate and char duration must be positive".into()));
        }
        if !(self.min_freq_hz > 0.0 && self.min_freq_hz < self.max_freq_hz && self.max_freq_hz < nyquist) {
            return Err(Error::Config(format!(
                "synth: need 0 < min_freq_hz < max_freq_hz < {nyquist}"
            )));
        }
        if self.amplitude < 0.0 || self.noise < 0.0 || self.amplitude + self.noise > 1.0 {
            return Err(Error::Config("synth: amplitude + noise must lie in [0, 1]".into()));
        }
        if self.jitter < 0.0 || self.fade_ms < 0.0 {
            return Err(Error::Config("synth: jitter and fade_ms must be nonnegative".into()));
        }
        Ok(())
    }
}

pub(crate) fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub(crate) fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// SplitMix64 finalizer; a stable integer hash independent of platform.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Uniform value in `[-1, 1)` derived from `key`.
fn unit(key: u64) -> f64 {
    (mix64(key) >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
}

/// Base frequency of the `k`-th ordinary character out of `n`.
pub fn char_frequency(config: &SynthConfig, k: usize, n: usize) -> f64 {
    let lo = hz_to_mel(config.min_freq_hz);
    let hi = hz_to_mel(config.max_freq_hz);
    let step = if n > 1 { (hi - lo) / (n - 1) as f64 } else { 0.0 };
    mel_to_hz(lo + step * k as f64)
}

/// Renders `text` as a sequence of character tones.
pub fn synth_utterance(text: &str, config: &SynthConfig, vocab: &Vocabulary) -> Result<Waveform> {
    config.validate()?;
    if text.is_empty() {
        return Err(Error::invalid("cannot synthesize empty text"));
    }
    let ids = vocab.encode(text)?;
    let first = vocab.char_ids().start;
    let n_chars = vocab.char_ids().len();
    let seg = config.samples_per_char();
    let rate = config.sample_rate_hz as f64;
    let fade = ((config.fade_ms * rate / 1000.0).round() as usize).min(seg / 2);
    let lo = hz_to_mel(config.min_freq_hz);
    let hi = hz_to_mel(config.max_freq_hz);
    let spacing = if n_chars > 1 { (hi - lo) / (n_chars - 1) as f64 } else { 0.0 };
    let nyquist = rate / 2.0;

    let mut samples = Vec::with_capacity(seg * ids.len());
    for (pos, &id) in ids.iter().enumerate() {
        let k = id - first;
        let key = (pos as u64) << 16 | id as u64;
        let mel = lo + spacing * (k as f64 + config.jitter * unit(key));
        let freq = mel_to_hz(mel).clamp(1.0, nyquist * 0.98);
        let phase = PI * unit(key ^ 0x5eed);
        for i in 0..seg {
            let env = if fade > 0 && i < fade {
                0.5 - 0.5 * (PI * i as f64 / fade as f64).cos()
            } else if fade > 0 && i >= seg - fade {
                0.5 - 0.5 * (PI * (seg - 1 - i) as f64 / fade as f64).cos()
            } else {
                1.0
            };
            let tone = config.amplitude * env * (2.0 * PI * freq * i as f64 / rate + phase).sin();
            let noise = if config.noise > 0.0 {
                config.noise * unit(((pos as u64) << 32) ^ (i as u64) ^ 0xa11ce)
            } else {
                0.0
            };
            samples.push((tone + noise) as f32);
        }
    }
    Waveform::new(samples, config.sample_rate_hz)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lengths_follow_character_count() {
        let v = Vocabulary::default();
        let c = SynthConfig::default();
        let one = synth_utterance("a", &c, &v).unwrap();
        assert_eq!(one.len(), (c.char_duration_ms * c.sample_rate_hz as f64 / 1000.0) as usize);
        let two = synth_utterance("ab", &c, &v).unwrap();
        assert_eq!(two.len(), 2 * one.len());
    }

    #[test]
    fn synthesis_is_deterministic_and_bounded() {
        let v = Vocabulary::default();
        let c = SynthConfig {
            noise: 0.1,
            ..SynthConfig::default()
        };
        let a = synth_utterance("abc", &c, &v).unwrap();
        let b = synth_utterance("abc", &c, &v).unwrap();
        assert_eq!(a, b);
        assert!(a.samples.iter().all(|s| s.abs() <= 1.0));
    }

    #[test]
    fn rejects_unknown_characters_and_empty_text() {
        let v = Vocabulary::default();
        let c = SynthConfig::default();
        assert!(matches!(synth_utterance("a!", &c, &v), Err(Error::InvalidInput(_))));
        assert!(synth_utterance("", &c, &v).is_err());
    }

    #[test]
    fn mel_scale_round_trips() {
        for f in [0.0, 100.0, 1000.0, 7999.0] {
            assert!((mel_to_hz(hz_to_mel(f)) - f).abs() < 1e-9);
        }
    }
}
