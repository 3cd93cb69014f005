use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::spectrogram::{Spectrogram, SpectrogramMeta};
use super::waveform::Waveform;
use crate::error::{Error, Result};

/// Log-mel analysis settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrontendConfig {
    pub sample_rate_hz: u32,
    pub mel_channels: usize,
    pub mel_lo_hz: f64,
    pub mel_hi_hz: f64,
    pub frame_size_ms: f64,
    pub frame_step_ms: f64,
    pub fft_size: usize,
    /// Additive floor on mel magnitudes before the logarithm.
    pub floor: f64,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self {
            sample_rate_hz: 16_000,
            mel_channels: 128,
            mel_lo_hz: 20.0,
            mel_hi_hz: 8_000.0,
            frame_size_ms: 50.0,
            frame_step_ms: 12.5,
            fft_size: 2048,
            floor: 1e-2,
        }
    }
}

impl FrontendConfig {
    pub fn win_length(&self) -> usize {
        (self.frame_size_ms * self.sample_rate_hz as f64 / 1000.0).round() as usize
    }

    pub fn hop_length(&self) -> usize {
        (self.frame_step_ms * self.sample_rate_hz as f64 / 1000.0).round() as usize
    }

    /// `1 + floor((n - win) / hop)`; frames never extend past the signal.
    pub fn n_frames(&self, n_samples: usize) -> usize {
        let win = self.win_length();
        if n_samples < win {
            0
        } else {
            1 + (n_samples - win) / self.hop_length()
        }
    }

    pub fn meta(&self) -> SpectrogramMeta {
        SpectrogramMeta {
            frame_step_ms: self.frame_step_ms,
            frame_size_ms: self.frame_size_ms,
            mel_lo_hz: self.mel_lo_hz,
            mel_hi_hz: self.mel_hi_hz,
            floor: self.floor,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let win = self.win_length();
        if win == 0 || self.hop_length() == 0 {
            return Err(Error::invalid("frame size and step must cover at least one sample"));
        }
        if self.fft_size < win {
            return Err(Error::invalid(format!("fft_size {} is shorter than the {win}-sample window", self.fft_size)));
        }
        if !(0.0 <= self.mel_lo_hz && self.mel_lo_hz < self.mel_hi_hz && self.mel_hi_hz <= self.sample_rate_hz as f64 / 2.0) {
            return Err(Error::invalid(format!(
                "mel band [{}, {}] Hz invalid for {} Hz audio",
                self.mel_lo_hz, self.mel_hi_hz, self.sample_rate_hz
            )));
        }
        if self.mel_channels == 0 || self.floor <= 0.0 {
            return Err(Error::invalid("mel_channels and floor must be positive"));
        }
        Ok(())
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular mel filters with unit peak, stored sparsely per channel.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    /// `(first_bin, weights)` per channel.
    filters: Vec<(usize, Vec<f64>)>,
    centers_hz: Vec<f64>,
    n_bins: usize,
}

impl MelFilterbank {
    pub fn new(cfg: &FrontendConfig) -> Self {
        let n_bins = cfg.fft_size / 2 + 1;
        let bin_hz = cfg.sample_rate_hz as f64 / cfg.fft_size as f64;
        let (lo, hi) = (hz_to_mel(cfg.mel_lo_hz), hz_to_mel(cfg.mel_hi_hz));
        let points: Vec<f64> = (0..cfg.mel_channels + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.mel_channels + 1) as f64))
            .collect();
        let mut filters = Vec::with_capacity(cfg.mel_channels);
        let mut centers_hz = Vec::with_capacity(cfg.mel_channels);
        for m in 0..cfg.mel_channels {
            let (l, c, r) = (points[m], points[m + 1], points[m + 2]);
            let first = (l / bin_hz).ceil().max(0.0) as usize;
            let last = ((r / bin_hz).floor() as usize).min(n_bins - 1);
            let mut weights = Vec::new();
            for b in first..=last {
                let f = b as f64 * bin_hz;
                let w = ((f - l) / (c - l)).min((r - f) / (r - c)).max(0.0);
                weights.push(w);
            }
            if weights.iter().all(|&w| w == 0.0) {
                // band narrower than one FFT bin: take the nearest bin
                let nearest = ((c / bin_hz).round() as usize).min(n_bins - 1);
                filters.push((nearest, vec![1.0]));
            } else {
                filters.push((first, weights));
            }
            centers_hz.push(c);
        }
        Self {
            filters,
            centers_hz,
            n_bins,
        }
    }

    pub fn n_channels(&self) -> usize {
        self.filters.len()
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn centers_hz(&self) -> &[f64] {
        &self.centers_hz
    }

    /// Channel whose center frequency is closest to `hz`.
    pub fn nearest_channel(&self, hz: f64) -> usize {
        let mut best = 0;
        for (i, c) in self.centers_hz.iter().enumerate() {
            if (c - hz).abs() < (self.centers_hz[best] - hz).abs() {
                best = i;
            }
        }
        best
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.filters.iter().map(|(_, w)| w.iter().sum()).collect()
    }

    pub fn apply(&self, magnitudes: &[f64], out: &mut [f64]) {
        for ((first, w), o) in self.filters.iter().zip(out.iter_mut()) {
            *o = w.iter().zip(&magnitudes[*first..]).map(|(a, b)| a * b).sum();
        }
    }

    /// Approximate inverse: each channel's magnitude is spread evenly over
    /// its filter (normalised by the filter area), then every FFT bin takes
    /// the filter-weighted average of the channels covering it.
    pub fn pseudo_invert(&self, mel: &[f64], out: &mut [f64]) {
        let mut coverage = vec![0.0; self.n_bins];
        out.iter_mut().for_each(|o| *o = 0.0);
        for ((first, w), &m) in self.filters.iter().zip(mel) {
            let area: f64 = w.iter().sum();
            let density = m / area;
            for (k, &wk) in w.iter().enumerate() {
                out[first + k] += wk * density;
                coverage[first + k] += wk;
            }
        }
        for (o, c) in out.iter_mut().zip(coverage) {
            if c > 0.0 {
                *o /= c;
            }
        }
    }
}

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// Framed FFT machinery shared by the analysis and by Griffin-Lim.
pub(crate) struct Stft {
    pub window: Vec<f64>,
    pub hop: usize,
    pub fft_size: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl Stft {
    pub fn new(cfg: &FrontendConfig) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            window: hann(cfg.win_length()),
            hop: cfg.hop_length(),
            fft_size: cfg.fft_size,
            forward: planner.plan_fft_forward(cfg.fft_size),
            inverse: planner.plan_fft_inverse(cfg.fft_size),
        }
    }

    pub fn n_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// Complex spectrum (non-negative frequencies) of every frame.
    pub fn analyze(&self, samples: &[f64]) -> Vec<Vec<Complex<f64>>> {
        let win = self.window.len();
        let n_frames = if samples.len() < win { 0 } else { 1 + (samples.len() - win) / self.hop };
        let mut buf = vec![Complex::new(0.0, 0.0); self.fft_size];
        (0..n_frames)
            .map(|t| {
                buf.iter_mut().for_each(|b| *b = Complex::new(0.0, 0.0));
                let start = t * self.hop;
                for (i, (b, w)) in buf.iter_mut().zip(&self.window).enumerate() {
                    *b = Complex::new(samples[start + i] * w, 0.0);
                }
                self.forward.process(&mut buf);
                buf[..self.n_bins()].to_vec()
            })
            .collect()
    }

    /// Weighted overlap-add inverse of `analyze` for a signal of `len` samples.
    pub fn synthesize(&self, frames: &[Vec<Complex<f64>>], len: usize) -> Vec<f64> {
        let win = self.window.len();
        let mut out = vec![0.0; len];
        let mut norm = vec![0.0; len];
        let mut buf = vec![Complex::new(0.0, 0.0); self.fft_size];
        let half = self.n_bins();
        for (t, spec) in frames.iter().enumerate() {
            buf[..half].copy_from_slice(spec);
            for k in half..self.fft_size {
                buf[k] = buf[self.fft_size - k].conj();
            }
            self.inverse.process(&mut buf);
            let start = t * self.hop;
            for i in 0..win {
                if start + i >= len {
                    break;
                }
                let w = self.window[i];
                out[start + i] += buf[i].re / self.fft_size as f64 * w;
                norm[start + i] += w * w;
            }
        }
        let peak_norm = norm.iter().fold(0.0_f64, |m, &v| m.max(v));
        for (o, n) in out.iter_mut().zip(norm) {
            *o = if n > 1e-3 * peak_norm { *o / n } else { 0.0 };
        }
        out
    }
}

/// Hann-windowed STFT magnitude, mel projection and `ln(mel + floor)`.
pub fn stft_logmel(wave: &Waveform, cfg: &FrontendConfig) -> Result<Spectrogram> {
    cfg.validate()?;
    if wave.sample_rate_hz != cfg.sample_rate_hz {
        return Err(Error::invalid(format!(
            "waveform is {} Hz, analysis expects {} Hz",
            wave.sample_rate_hz, cfg.sample_rate_hz
        )));
    }
    let win = cfg.win_length();
    if wave.len() < win {
        return Err(Error::invalid(format!(
            "waveform of {} samples is shorter than one {win}-sample window",
            wave.len()
        )));
    }
    let stft = Stft::new(cfg);
    let bank = MelFilterbank::new(cfg);
    let spectra = stft.analyze(&wave.samples);
    let f = cfg.mel_channels;
    let mut frames = vec![0.0; spectra.len() * f];
    let mut mags = vec![0.0; stft.n_bins()];
    for (t, spec) in spectra.iter().enumerate() {
        for (m, c) in mags.iter_mut().zip(spec) {
            *m = c.norm();
        }
        let row = &mut frames[t * f..(t + 1) * f];
        bank.apply(&mags, row);
        row.iter_mut().for_each(|v| *v = (*v + cfg.floor).ln());
    }
    Spectrogram::new(frames, spectra.len(), f, cfg.meta())
}

#[cfg(test)]
mod tests {
    use super::super::waveform::tone;
    use super::*;

    #[test]
    fn framing_arithmetic() {
        let cfg = FrontendConfig::default();
        assert_eq!((cfg.win_length(), cfg.hop_length()), (800, 200));
        let s = stft_logmel(&Waveform::silence(16_000, 16_000), &cfg).unwrap();
        assert_eq!(s.n_frames(), 77);
        assert_eq!(s.n_mels(), 128);
        let s2 = stft_logmel(&Waveform::silence(32_000, 16_000), &cfg).unwrap();
        assert_eq!(s2.n_frames(), 1 + (32_000 - 800) / 200);
    }

    #[test]
    fn silence_sits_on_the_floor() {
        let cfg = FrontendConfig::default();
        let s = stft_logmel(&Waveform::silence(16_000, 16_000), &cfg).unwrap();
        let floor = cfg.floor.ln();
        assert!(s.data().iter().all(|&v| v == floor));
    }

    #[test]
    fn short_wave_is_rejected() {
        let cfg = FrontendConfig::default();
        assert!(stft_logmel(&Waveform::silence(799, 16_000), &cfg).is_err());
    }

    #[test]
    fn filterbank_covers_band_without_empty_channels() {
        let cfg = FrontendConfig::default();
        let bank = MelFilterbank::new(&cfg);
        assert_eq!(bank.n_channels(), 128);
        assert!(bank.row_sums().iter().all(|&s| s > 0.0));
        let c = bank.centers_hz();
        assert!(c[0] > 20.0 && c[127] < 8000.0);
        assert!(c.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn one_khz_tone_peaks_at_nearest_channel() {
        let cfg = FrontendConfig::default();
        let wave = Waveform::new(tone(1000.0, 0.5, 16_000, 16_000), 16_000).unwrap();
        let s = stft_logmel(&wave, &cfg).unwrap();
        let means = s.channel_means();
        let argmax = (0..means.len()).max_by(|&a, &b| means[a].total_cmp(&means[b])).unwrap();

        // oracle: centers straight from the mel formula
        let (lo, hi) = (hz_to_mel(20.0), hz_to_mel(8000.0));
        let nearest = (0..128)
            .min_by(|&a, &b| {
                let ca = mel_to_hz(lo + (hi - lo) * (a + 1) as f64 / 129.0);
                let cb = mel_to_hz(lo + (hi - lo) * (b + 1) as f64 / 129.0);
                (ca - 1000.0).abs().total_cmp(&(cb - 1000.0).abs())
            })
            .unwrap();
        assert_eq!(argmax, nearest);
    }

    #[test]
    fn entries_respect_floor() {
        let cfg = FrontendConfig::default();
        let wave = super::super::waveform::speech_like(0.5, 16_000);
        let s = stft_logmel(&wave, &cfg).unwrap();
        assert!(s.data().iter().all(|&v| v >= cfg.floor.ln()));
    }
}
