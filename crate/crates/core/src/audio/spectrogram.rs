use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numeric::{Real, Tensor};

/// `T x F` log-mel matrix plus the analysis settings that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    frames: Vec<f64>,
    n_frames: usize,
    n_mels: usize,
    pub frame_step_ms: f64,
    pub frame_size_ms: f64,
    pub mel_lo_hz: f64,
    pub mel_hi_hz: f64,
    /// Additive energy floor; every entry is `>= ln(floor)`.
    pub floor: f64,
}

/// Analysis settings shared by every spectrogram of a run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectrogramMeta {
    pub frame_step_ms: f64,
    pub frame_size_ms: f64,
    pub mel_lo_hz: f64,
    pub mel_hi_hz: f64,
    pub floor: f64,
}

impl Spectrogram {
    pub fn new(frames: Vec<f64>, n_frames: usize, n_mels: usize, meta: SpectrogramMeta) -> Result<Self> {
        if frames.len() != n_frames * n_mels {
            return Err(Error::ShapeMismatch {
                op: "spectrogram",
                lhs: vec![n_frames, n_mels],
                rhs: vec![frames.len()],
            });
        }
        if frames.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "spectrogram" });
        }
        Ok(Self {
            frames,
            n_frames,
            n_mels,
            frame_step_ms: meta.frame_step_ms,
            frame_size_ms: meta.frame_size_ms,
            mel_lo_hz: meta.mel_lo_hz,
            mel_hi_hz: meta.mel_hi_hz,
            floor: meta.floor,
        })
    }

    /// Same metadata, different frames.
    pub fn with_frames(&self, frames: Vec<f64>, n_frames: usize) -> Result<Self> {
        Self::new(frames, n_frames, self.n_mels, self.meta())
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

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn log_floor(&self) -> f64 {
        self.floor.ln()
    }

    pub fn data(&self) -> &[f64] {
        &self.frames
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.frames
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.frames[t * self.n_mels..(t + 1) * self.n_mels]
    }

    pub fn at(&self, t: usize, f: usize) -> f64 {
        self.frames[t * self.n_mels + f]
    }

    pub fn duration_s(&self) -> f64 {
        self.n_frames as f64 * self.frame_step_ms / 1000.0
    }

    /// Frames `[start, end)`.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        if start > end || end > self.n_frames {
            return Err(Error::invalid(format!(
                "frame range {start}..{end} out of bounds for {} frames",
                self.n_frames
            )));
        }
        self.with_frames(self.frames[start * self.n_mels..end * self.n_mels].to_vec(), end - start)
    }

    pub fn concat(&self, other: &Self) -> Result<Self> {
        if other.n_mels != self.n_mels {
            return Err(Error::ShapeMismatch {
                op: "spectrogram concat",
                lhs: vec![self.n_frames, self.n_mels],
                rhs: vec![other.n_frames, other.n_mels],
            });
        }
        let mut frames = self.frames.clone();
        frames.extend_from_slice(&other.frames);
        self.with_frames(frames, self.n_frames + other.n_frames)
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_f64(vec![self.n_frames, self.n_mels], &self.frames).expect("shape checked at construction")
    }

    /// Mean over frames of each mel channel.
    pub fn channel_means(&self) -> Vec<f64> {
        let mut acc = vec![0.0; self.n_mels];
        for t in 0..self.n_frames {
            for (a, &v) in acc.iter_mut().zip(self.frame(t)) {
                *a += v;
            }
        }
        let n = self.n_frames.max(1) as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        acc
    }

    /// Writes the debug dump: a text line `T F frame_step_ms` followed by
    /// row-major little-endian `f32` values.
    pub fn write_dump(&self, path: &Path) -> Result<()> {
        let mut out = Vec::with_capacity(32 + self.frames.len() * 4);
        writeln!(out, "{} {} {}", self.n_frames, self.n_mels, self.frame_step_ms).expect("in-memory write");
        for &v in &self.frames {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Reads a debug dump. Metadata other than the frame step is taken from
    /// `meta`.
    pub fn read_dump(path: &Path, meta: SpectrogramMeta) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut reader = BufReader::new(file);
        let mut header = String::new();
        reader.read_line(&mut header).map_err(|e| Error::io(path, e))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        let bad = |detail: String| Error::Format {
            what: "spectrogram dump",
            detail,
        };
        if fields.len() != 3 {
            return Err(bad(format!("header {header:?}")));
        }
        let t: usize = fields[0].parse().map_err(|_| bad(format!("frame count {:?}", fields[0])))?;
        let f: usize = fields[1].parse().map_err(|_| bad(format!("mel count {:?}", fields[1])))?;
        let step: f64 = fields[2].parse().map_err(|_| bad(format!("frame step {:?}", fields[2])))?;
        let mut payload = Vec::new();
        reader.read_to_end(&mut payload).map_err(|e| Error::io(path, e))?;
        if payload.len() != t * f * 4 {
            return Err(bad(format!("expected {} payload bytes, found {}", t * f * 4, payload.len())));
        }
        let frames = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Self::new(frames, t, f, SpectrogramMeta { frame_step_ms: step, ..meta })
    }
}

/// Splits into prompt frames `[0, s)` and continuation frames `[s, T)` where
/// `s = round(split_seconds * 1000 / frame_step_ms)`.
pub fn split_prompt(spec: &Spectrogram, split_seconds: f64) -> Result<(Spectrogram, Spectrogram)> {
    let s = prompt_frames(split_seconds, spec.frame_step_ms);
    if spec.n_frames() <= s {
        return Err(Error::TooShort {
            duration_s: spec.duration_s(),
            required_s: split_seconds,
        });
    }
    Ok((spec.slice(0, s)?, spec.slice(s, spec.n_frames())?))
}

pub fn prompt_frames(split_seconds: f64, frame_step_ms: f64) -> usize {
    (split_seconds * 1000.0 / frame_step_ms).round() as usize
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta() -> SpectrogramMeta {
        SpectrogramMeta {
            frame_step_ms: 12.5,
            frame_size_ms: 50.0,
            mel_lo_hz: 20.0,
            mel_hi_hz: 8000.0,
            floor: 1e-2,
        }
    }

    fn ramp(t: usize, f: usize) -> Spectrogram {
        Spectrogram::new((0..t * f).map(|i| i as f64 * 0.01).collect(), t, f, meta()).unwrap()
    }

    #[test]
    fn split_three_seconds() {
        let s = ramp(500, 4);
        let (p, c) = split_prompt(&s, 3.0).unwrap();
        assert_eq!(p.n_frames(), 240);
        assert_eq!(c.n_frames(), 260);
        assert_eq!(p.concat(&c).unwrap(), s);
    }

    #[test]
    fn split_rejects_short_input() {
        let s = ramp(200, 4);
        assert!(matches!(split_prompt(&s, 3.0), Err(Error::TooShort { .. })));
        // exactly the prompt length leaves no continuation
        assert!(split_prompt(&ramp(240, 2), 3.0).is_err());
    }

    #[test]
    fn dump_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.mel");
        let s = ramp(7, 3);
        s.write_dump(&path).unwrap();
        let back = Spectrogram::read_dump(&path, meta()).unwrap();
        assert_eq!(back.n_frames(), 7);
        for (a, b) in back.data().iter().zip(s.data()) {
            assert_eq!(*a, *b as f32 as f64);
        }
        let raw = std::fs::read(&path).unwrap();
        assert!(raw.starts_with(b"7 3 12.5\n"));
    }
}
