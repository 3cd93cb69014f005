use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;

use super::mel::{FrontendConfig, MelFilterbank, Stft};
use super::spectrogram::Spectrogram;
use super::waveform::Waveform;
use crate::error::{Error, Result};

pub const DEFAULT_ITERATIONS: usize = 60;

/// Waveform whose log-mel analysis approximates `spec`.
///
/// Mel magnitudes are mapped back to linear FFT bins with the normalised
/// transpose of the filterbank, then phase is recovered by alternating
/// projections. The initial phase is drawn from `seed`.
pub fn griffin_lim_invert(spec: &Spectrogram, iterations: usize, cfg: &FrontendConfig, seed: u64) -> Result<Waveform> {
    if iterations < 1 {
        return Err(Error::invalid("griffin-lim needs at least one iteration"));
    }
    if spec.n_mels() != cfg.mel_channels {
        return Err(Error::ShapeMismatch {
            op: "griffin_lim_invert",
            lhs: vec![spec.n_frames(), spec.n_mels()],
            rhs: vec![cfg.mel_channels],
        });
    }
    cfg.validate()?;
    let stft = Stft::new(cfg);
    let bank = MelFilterbank::new(cfg);
    let n_bins = stft.n_bins();
    let len = if spec.n_frames() == 0 {
        0
    } else {
        (spec.n_frames() - 1) * stft.hop + stft.window.len()
    };

    let mut mel = vec![0.0; spec.n_mels()];
    let target: Vec<Vec<f64>> = (0..spec.n_frames())
        .map(|t| {
            for (m, &v) in mel.iter_mut().zip(spec.frame(t)) {
                *m = (v.exp() - spec.floor).max(0.0);
            }
            let mut lin = vec![0.0; n_bins];
            bank.pseudo_invert(&mel, &mut lin);
            lin
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut frames: Vec<Vec<Complex<f64>>> = target
        .iter()
        .map(|mag| {
            mag.iter()
                .map(|&a| Complex::from_polar(a, rng.gen_range(0.0..std::f64::consts::TAU)))
                .collect()
        })
        .collect();
    let mut samples = stft.synthesize(&frames, len);
    for _ in 1..iterations {
        let rebuilt = stft.analyze(&samples);
        for ((frame, est), mag) in frames.iter_mut().zip(&rebuilt).zip(&target) {
            for ((c, e), &a) in frame.iter_mut().zip(est).zip(mag) {
                let n = e.norm();
                *c = if n > 0.0 { e * (a / n) } else { Complex::new(a, 0.0) };
            }
        }
        samples = stft.synthesize(&frames, len);
    }

    let peak = samples.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    if peak > 1.0 {
        samples.iter_mut().for_each(|v| *v /= peak);
    }
    Waveform::new(samples, cfg.sample_rate_hz)
}

#[cfg(test)]
mod tests {
    use super::super::mel::stft_logmel;
    use super::super::waveform::{speech_like, tone};
    use super::*;

    fn pearson(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let (mut num, mut da, mut db) = (0.0, 0.0, 0.0);
        for (x, y) in a.iter().zip(b) {
            num += (x - ma) * (y - mb);
            da += (x - ma) * (x - ma);
            db += (y - mb) * (y - mb);
        }
        num / (da * db).sqrt()
    }

    #[test]
    fn rejects_zero_iterations() {
        let cfg = FrontendConfig::default();
        let spec = stft_logmel(&Waveform::silence(1600, 16_000), &cfg).unwrap();
        assert!(griffin_lim_invert(&spec, 0, &cfg, 0).is_err());
    }

    #[test]
    fn floor_spectrogram_is_near_silent() {
        let cfg = FrontendConfig::default();
        let spec = stft_logmel(&Waveform::silence(8000, 16_000), &cfg).unwrap();
        let wave = griffin_lim_invert(&spec, 10, &cfg, 3).unwrap();
        assert_eq!(wave.len(), (spec.n_frames() - 1) * 200 + 800);
        assert!(wave.rms() < 1e-3);
    }

    #[test]
    fn one_khz_tone_survives_inversion() {
        let cfg = FrontendConfig::default();
        let wave = Waveform::new(tone(1000.0, 0.5, 16_000, 16_000), 16_000).unwrap();
        let spec = stft_logmel(&wave, &cfg).unwrap();
        let out = griffin_lim_invert(&spec, DEFAULT_ITERATIONS, &cfg, 1).unwrap();
        assert!(out.samples.iter().all(|v| v.abs() <= 1.0));

        // oracle: 512-point FFT magnitudes averaged over frames of the output
        let n = 512;
        let bins = dominant_bin(&out.samples, n);
        let expected = 1000.0 / (16_000.0 / n as f64);
        assert!((bins as f64 - expected).abs() <= 1.0, "peak bin {bins}, expected {expected}");
    }

    fn dominant_bin(samples: &[f64], n: usize) -> usize {
        let mut planner = rustfft::FftPlanner::<f64>::new();
        let fft = planner.plan_fft_forward(n);
        let mut acc = vec![0.0; n / 2 + 1];
        for chunk in samples.chunks_exact(n) {
            let mut buf: Vec<Complex<f64>> = chunk.iter().map(|&v| Complex::new(v, 0.0)).collect();
            fft.process(&mut buf);
            for (a, c) in acc.iter_mut().zip(&buf) {
                *a += c.norm();
            }
        }
        (0..acc.len()).max_by(|&a, &b| acc[a].total_cmp(&acc[b])).unwrap()
    }

    #[test]
    fn round_trip_correlates_per_frame() {
        let cfg = FrontendConfig::default();
        let wave = speech_like(1.0, 16_000);
        let spec = stft_logmel(&wave, &cfg).unwrap();
        let out = griffin_lim_invert(&spec, DEFAULT_ITERATIONS, &cfg, 7).unwrap();
        let back = stft_logmel(&out, &cfg).unwrap();
        assert_eq!(back.n_frames(), spec.n_frames());
        let mean: f64 = (0..spec.n_frames())
            .map(|t| pearson(spec.frame(t), back.frame(t)))
            .sum::<f64>()
            / spec.n_frames() as f64;
        assert!(mean >= 0.9, "mean per-frame correlation {mean}");
    }
}
