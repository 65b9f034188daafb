//! Log-mel filterbank features.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::synth::{hz_to_mel, mel_to_hz, Waveform};

/// Floor applied to filter energies before the logarithm.
pub const LOG_FLOOR: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrameConfig {
    pub frame_length_ms: f64,
    pub frame_shift_ms: f64,
    pub num_mel_bins: usize,
    pub min_freq_hz: f64,
    /// Upper edge of the filterbank; `None` means the Nyquist frequency.
    pub max_freq_hz: Option<f64>,
}

impl Default for FrameConfig {
    fn default() -> Self {
        Self {
            frame_length_ms: 25.0,
            frame_shift_ms: 10.0,
            num_mel_bins: 20,
            min_freq_hz: 0.0,
            max_freq_hz: None,
        }
    }
}

impl FrameConfig {
    pub fn frame_length(&self, rate: u32) -> usize {
        (self.frame_length_ms * rate as f64 / 1000.0).round() as usize
    }

    pub fn frame_shift(&self, rate: u32) -> usize {
        (self.frame_shift_ms * rate as f64 / 1000.0).round() as usize
    }

    /// Number of frames produced from `n` samples, or `None` if shorter than one frame.
    pub fn num_frames(&self, n: usize, rate: u32) -> Option<usize> {
        let len = self.frame_length(rate);
        let shift = self.frame_shift(rate);
        (n >= len).then(|| 1 + (n - len) / shift)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AcousticFeatureSequence {
    /// T×D matrix, one row per frame.
    pub frames: Tensor<f32>,
    pub frame_shift_ms: f64,
    pub frame_length_ms: f64,
}

impl AcousticFeatureSequence {
    pub fn num_frames(&self) -> usize {
        self.frames.rows()
    }

    pub fn dim(&self) -> usize {
        self.frames.cols()
    }
}

/// Triangular filters equally spaced on the mel scale.
#[derive(Clone, Debug)]
pub struct MelFilterbank {
    /// `num_mel_bins × (fft_size/2 + 1)` weights.
    weights: Vec<Vec<f64>>,
    centers_hz: Vec<f64>,
    fft_size: usize,
}

impl MelFilterbank {
    pub fn new(config: &FrameConfig, rate: u32, fft_size: usize) -> Result<Self> {
        let nyquist = rate as f64 / 2.0;
        let max_hz = config.max_freq_hz.unwrap_or(nyquist);
        if config.num_mel_bins == 0 {
            return Err(Error::Config("num_mel_bins must be positive".into()));
        }
        if !(config.min_freq_hz >= 0.0 && config.min_freq_hz < max_hz && max_hz <= nyquist) {
            return Err(Error::Config(format!(
                "filterbank range [{}, {max_hz}] Hz is not within [0, {nyquist}]",
                config.min_freq_hz
            )));
        }
        let d = config.num_mel_bins;
        let lo = hz_to_mel(config.min_freq_hz);
        let hi = hz_to_mel(max_hz);
        let edges: Vec<f64> = (0..d + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (d + 1) as f64))
            .collect();
        let bins = fft_size / 2 + 1;
        let bin_hz = rate as f64 / fft_size as f64;
        let weights = (0..d)
            .map(|m| {
                let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
                (0..bins)
                    .map(|k| {
                        let f = k as f64 * bin_hz;
                        if f <= left || f >= right {
                            0.0
                        } else if f <= center {
                            (f - left) / (center - left)
                        } else {
                            (right - f) / (right - center)
                        }
                    })
                    .collect()
            })
            .collect();
        Ok(Self {
            weights,
            centers_hz: edges[1..=d].to_vec(),
            fft_size,
        })
    }

    pub fn centers_hz(&self) -> &[f64] {
        &self.centers_hz
    }

    pub fn fft_size(&self) -> usize {
        self.fft_size
    }

    pub fn apply(&self, magnitude: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .map(|w| w.iter().zip(magnitude).map(|(a, b)| a * b).sum())
            .collect()
    }
}

/// Reusable feature extractor for one sample rate.
pub struct LogMel {
    config: FrameConfig,
    rate: u32,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
    filterbank: MelFilterbank,
}

impl LogMel {
    pub fn new(config: &FrameConfig, rate: u32) -> Result<Self> {
        let len = config.frame_length(rate);
        let shift = config.frame_shift(rate);
        if len < 2 || shift == 0 {
            return Err(Error::Config(format!(
                "frame length {len} and shift {shift} samples are too small"
            )));
        }
        let fft_size = len.next_power_of_two();
        let window = (0..len)
            .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / (len - 1) as f64).cos())
            .collect();
        Ok(Self {
            config: config.clone(),
            rate,
            window,
            fft: FftPlanner::new().plan_fft_forward(fft_size),
            filterbank: MelFilterbank::new(config, rate, fft_size)?,
        })
    }

    pub fn sample_rate(&self) -> u32 {
        self.rate
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.filterbank
    }

    pub fn compute(&self, wave: &Waveform) -> Result<AcousticFeatureSequence> {
        if wave.sample_rate_hz != self.rate {
            return Err(Error::invalid(format!(
                "waveform sample rate {} differs from extractor rate {}",
                wave.sample_rate_hz, self.rate
            )));
        }
        let len = self.window.len();
        let shift = self.config.frame_shift(self.rate);
        let t = self.config.num_frames(wave.len(), self.rate).ok_or_else(|| {
            Error::invalid(format!(
                "waveform of {} samples is shorter than one {len}-sample frame",
                wave.len()
            ))
        })?;
        let d = self.config.num_mel_bins;
        let n_fft = self.filterbank.fft_size();
        let mut frames = Tensor::zeros(t, d);
        let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
        let mut magnitude = vec![0.0; n_fft / 2 + 1];
        for f in 0..t {
            let start = f * shift;
            for (i, slot) in buf.iter_mut().enumerate() {
                *slot = if i < len {
                    Complex::new(wave.samples[start + i] as f64 * self.window[i], 0.0)
                } else {
                    Complex::new(0.0, 0.0)
                };
            }
            self.fft.process(&mut buf);
            for (m, c) in magnitude.iter_mut().zip(&buf) {
                *m = c.norm();
            }
            for (j, e) in self.filterbank.apply(&magnitude).into_iter().enumerate() {
                frames.set(f, j, e.max(LOG_FLOOR).ln() as f32);
            }
        }
        Ok(AcousticFeatureSequence {
            frames,
            frame_shift_ms: self.config.frame_shift_ms,
            frame_length_ms: self.config.frame_length_ms,
        })
    }
}

/// One-shot log-mel extraction.
pub fn logmel(wave: &Waveform, config: &FrameConfig) -> Result<AcousticFeatureSequence> {
    LogMel::new(config, wave.sample_rate_hz)?.compute(wave)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn silence_hits_the_floor() {
        let w = Waveform::new(vec![0.0; 1600], 16_000).unwrap();
        let f = logmel(&w, &FrameConfig::default()).unwrap();
        let floor = (LOG_FLOOR.ln()) as f32;
        assert!(f.frames.data().iter().all(|&x| x == floor));
    }

    #[test]
    fn frame_count_arithmetic() {
        let cfg = FrameConfig::default();
        let w = Waveform::new(vec![0.1; 400], 16_000).unwrap();
        assert_eq!(logmel(&w, &cfg).unwrap().num_frames(), 1);
        let w = Waveform::new(vec![0.1; 399], 16_000).unwrap();
        assert!(logmel(&w, &cfg).is_err());
        assert_eq!(cfg.num_frames(400 + 160 * 7 + 159, 16_000), Some(8));
    }

    #[test]
    fn sine_at_filter_center_peaks_in_that_filter() {
        let cfg = FrameConfig::default();
        let rate = 16_000;
        let lm = LogMel::new(&cfg, rate).unwrap();
        for (i, &fc) in lm.filterbank().centers_hz().iter().enumerate() {
            let samples: Vec<f32> = (0..1200)
                .map(|n| (0.5 * (2.0 * std::f64::consts::PI * fc * n as f64 / rate as f64).sin()) as f32)
                .collect();
            let f = lm.compute(&Waveform::new(samples, rate).unwrap()).unwrap();
            for t in 0..f.num_frames() {
                assert_eq!(f.frames.argmax_row(t), i, "filter {i} at {fc:.1} Hz, frame {t}");
            }
        }
    }
}
