//! 16-bit mono PCM WAV files.

use std::path::Path;

use crate::error::{Error, Result};

use super::synth::Waveform;

fn wav_err(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(source) => Error::io(path, source),
        other => Error::Format(format!("{}: {other}", path.display())),
    }
}

pub fn write_wav(path: &Path, wave: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate_hz,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(|e| wav_err(path, e))?;
    for &s in &wave.samples {
        let q = (s.clamp(-1.0, 1.0) * i16::MAX as f32).round() as i16;
        w.write_sample(q).map_err(|e| wav_err(path, e))?;
    }
    w.finalize().map_err(|e| wav_err(path, e))
}

pub fn read_wav(path: &Path) -> Result<Waveform> {
    let mut r = hound::WavReader::open(path).map_err(|e| wav_err(path, e))?;
    let spec = r.spec();
    if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(Error::Format(format!(
            "{}: expected 16-bit mono PCM, found {} channel(s) at {} bits",
            path.display(),
            spec.channels,
            spec.bits_per_sample
        )));
    }
    let samples = r
        .samples::<i16>()
        .map(|s| s.map(|v| v as f32 / i16::MAX as f32).map_err(|e| wav_err(path, e)))
        .collect::<Result<Vec<_>>>()?;
    Waveform::new(samples.into_iter().map(|s| s.max(-1.0)).collect(), spec.sample_rate)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.wav");
        let wave = Waveform::new((0..500).map(|i| ((i as f32) * 0.01).sin() * 0.7).collect(), 16_000).unwrap();
        write_wav(&path, &wave).unwrap();
        let back = read_wav(&path).unwrap();
        assert_eq!(back.sample_rate_hz, 16_000);
        assert_eq!(back.len(), wave.len());
        for (a, b) in wave.samples.iter().zip(&back.samples) {
            assert!((a - b).abs() <= 1.0 / 32767.0);
        }
        write_wav(&path, &back).unwrap();
        assert_eq!(read_wav(&path).unwrap(), back);
    }
}
