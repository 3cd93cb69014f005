use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use crate::error::{Error, Result};

/// Mono PCM samples in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate_hz: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate_hz: u32) -> Result<Self> {
        if let Some(i) = samples.iter().position(|s| !s.is_finite() || s.abs() > 1.0) {
            return Err(Error::invalid(format!(
                "sample {i} = {} is not a finite value in [-1, 1]",
                samples[i]
            )));
        }
        if sample_rate_hz == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        Ok(Self { samples, sample_rate_hz })
    }

    pub fn silence(n: usize, sample_rate_hz: u32) -> Self {
        Self {
            samples: vec![0.0; n],
            sample_rate_hz,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }

    pub fn rms(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        (self.samples.iter().map(|s| s * s).sum::<f64>() / self.samples.len() as f64).sqrt()
    }

    /// Reads a mono 16-bit PCM WAV file.
    pub fn read_wav(path: &Path) -> Result<Self> {
        let wav_err = |source| Error::Wav {
            path: path.to_path_buf(),
            source,
        };
        let reader = WavReader::open(path).map_err(wav_err)?;
        let spec = reader.spec();
        if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != SampleFormat::Int {
            return Err(Error::Format {
                what: "wav",
                detail: format!(
                    "{}: need mono 16-bit PCM, got {} channel(s) at {} bits",
                    path.display(),
                    spec.channels,
                    spec.bits_per_sample
                ),
            });
        }
        let samples = reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(wav_err)?;
        Self::new(samples, spec.sample_rate)
    }

    /// Writes mono 16-bit PCM.
    pub fn write_wav(&self, path: &Path) -> Result<()> {
        let wav_err = |source| Error::Wav {
            path: path.to_path_buf(),
            source,
        };
        let spec = WavSpec {
            channels: 1,
            sample_rate: self.sample_rate_hz,
            bits_per_sample: 16,
            sample_format: SampleFormat::Int,
        };
        let mut writer = WavWriter::create(path, spec).map_err(wav_err)?;
        for &s in &self.samples {
            let v = (s * 32767.0).round().clamp(-32768.0, 32767.0) as i16;
            writer.write_sample(v).map_err(wav_err)?;
        }
        writer.finalize().map_err(wav_err)
    }
}

/// Sine of `freq_hz` at `amplitude` for `n` samples.
pub fn tone(freq_hz: f64, amplitude: f64, n: usize, sample_rate_hz: u32) -> Vec<f64> {
    let w = 2.0 * std::f64::consts::PI * freq_hz / sample_rate_hz as f64;
    (0..n).map(|i| amplitude * (w * i as f64).sin()).collect()
}

/// Deterministic voiced-speech-like test signal: a gliding harmonic source
/// shaped by three moving formants and a syllabic amplitude envelope.
pub fn speech_like(seconds: f64, sample_rate_hz: u32) -> Waveform {
    let sr = sample_rate_hz as f64;
    let n = (seconds * sr) as usize;
    let formants = [(700.0, 130.0), (1200.0, 70.0), (2600.0, 160.0)];
    let mut phase = 0.0;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let t = i as f64 / sr;
        let f0 = 120.0 + 25.0 * (2.0 * std::f64::consts::PI * 0.7 * t).sin();
        phase += 2.0 * std::f64::consts::PI * f0 / sr;
        let shift = 1.0 + 0.25 * (2.0 * std::f64::consts::PI * 0.9 * t).sin();
        let mut s = 0.0;
        let mut h = 1.0;
        while h * f0 < 0.45 * sr && h < 60.0 {
            let fh = h * f0;
            let gain: f64 = formants
                .iter()
                .map(|&(fc, bw)| {
                    let d = (fh - fc * shift) / bw;
                    1.0 / (1.0 + d * d)
                })
                .sum();
            s += gain / h.sqrt() * (h * phase).sin();
            h += 1.0;
        }
        let env = 0.55 + 0.45 * (2.0 * std::f64::consts::PI * 3.0 * t).sin();
        out.push(0.08 * env * s);
    }
    let peak = out.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    if peak > 0.9 {
        out.iter_mut().for_each(|v| *v *= 0.9 / peak);
    }
    Waveform {
        samples: out,
        sample_rate_hz,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wav_round_trip_is_quantised_identity() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.wav");
        let w = Waveform::new(tone(440.0, 0.5, 1600, 16000), 16000).unwrap();
        w.write_wav(&path).unwrap();
        let back = Waveform::read_wav(&path).unwrap();
        assert_eq!(back.sample_rate_hz, 16000);
        assert_eq!(back.len(), w.len());
        for (a, b) in back.samples.iter().zip(&w.samples) {
            assert!((a - b).abs() < 1.0 / 16000.0);
        }
    }

    #[test]
    fn rejects_out_of_range_samples() {
        assert!(Waveform::new(vec![0.0, 1.5], 16000).is_err());
        assert!(Waveform::new(vec![f64::NAN], 16000).is_err());
    }

    #[test]
    fn missing_file_names_the_path() {
        let err = Waveform::read_wav(Path::new("/nonexistent/x.wav")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/x.wav"));
    }
}
