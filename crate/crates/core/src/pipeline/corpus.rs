use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audio::{FrontendConfig, MelFilterbank, Spectrogram, Waveform};
use crate::error::{Error, Result};

pub const DEFAULT_SPLIT_SECONDS: f64 = 3.0;

/// Audio paired with its transcript and prompt split point.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub wave: Waveform,
    pub transcript: String,
    pub split_seconds: f64,
}

impl Utterance {
    pub fn new(wave: Waveform, transcript: impl Into<String>, split_seconds: f64) -> Result<Self> {
        if wave.duration_s() <= split_seconds {
            return Err(Error::TooShort {
                duration_s: wave.duration_s(),
                required_s: split_seconds,
            });
        }
        Ok(Self {
            wave,
            transcript: transcript.into(),
            split_seconds,
        })
    }
}

/// Synthetic language: each symbol is a fixed-frequency tone segment and
/// every symbol is followed by its successor in `alphabet` (cyclically).
#[derive(Debug, Clone, PartialEq)]
pub struct ToneGrammar {
    pub alphabet: Vec<char>,
    /// Frequency of the first symbol; symbol `k` sounds at `base_hz * ratio^k`.
    pub base_hz: f64,
    pub ratio: f64,
    pub segment_s: f64,
    pub symbols_per_utterance: usize,
    /// Per-utterance pitch factor is drawn from `[1 - jitter, 1 + jitter]`.
    pub pitch_jitter: f64,
    pub amplitude: f64,
    /// Linear fade at both ends of each segment.
    pub ramp_s: f64,
    pub sample_rate_hz: u32,
}

impl Default for ToneGrammar {
    fn default() -> Self {
        Self {
            alphabet: "abcdef".chars().collect(),
            base_hz: 300.0,
            ratio: 1.5,
            segment_s: 0.25,
            symbols_per_utterance: 16,
            pitch_jitter: 0.04,
            amplitude: 0.5,
            ramp_s: 0.01,
            sample_rate_hz: 16_000,
        }
    }
}

impl ToneGrammar {
    pub fn validate(&self) -> Result<()> {
        let mut sorted = self.alphabet.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.alphabet.len() || self.alphabet.is_empty() {
            return Err(Error::invalid("grammar alphabet must be non-empty with distinct symbols"));
        }
        if self.ratio <= 1.0 || self.base_hz <= 0.0 {
            return Err(Error::invalid("tone frequencies must be positive and strictly increasing"));
        }
        let top = self.base_hz * self.ratio.powi(self.alphabet.len() as i32 - 1) * (1.0 + self.pitch_jitter);
        if top >= self.sample_rate_hz as f64 / 2.0 {
            return Err(Error::invalid(format!("highest tone {top:.0} Hz exceeds Nyquist")));
        }
        if !(0.0..1.0).contains(&self.pitch_jitter) || self.segment_s <= 2.0 * self.ramp_s || self.symbols_per_utterance == 0 {
            return Err(Error::invalid("invalid grammar timing or jitter"));
        }
        Ok(())
    }

    pub fn index_of(&self, c: char) -> Result<usize> {
        self.alphabet.iter().position(|&a| a == c).ok_or(Error::OutOfVocabulary(c))
    }

    /// The deterministic continuation rule.
    pub fn next(&self, c: char) -> Result<char> {
        let i = self.index_of(c)?;
        Ok(self.alphabet[(i + 1) % self.alphabet.len()])
    }

    /// Nominal tone of `c` (before the speaker pitch factor).
    pub fn frequency(&self, c: char) -> Result<f64> {
        Ok(self.base_hz * self.ratio.powi(self.index_of(c)? as i32))
    }

    /// `len` symbols starting at `first` and following the rule.
    pub fn sequence(&self, first: char, len: usize) -> Result<String> {
        let mut out = String::with_capacity(len);
        let mut c = first;
        for _ in 0..len {
            out.push(c);
            c = self.next(c)?;
        }
        Ok(out)
    }

    pub fn samples_per_segment(&self) -> usize {
        (self.segment_s * self.sample_rate_hz as f64).round() as usize
    }

    /// Renders `transcript` as consecutive tone segments.
    pub fn render(&self, transcript: &str, pitch_factor: f64) -> Result<Waveform> {
        let seg = self.samples_per_segment();
        let ramp = (self.ramp_s * self.sample_rate_hz as f64).round() as usize;
        let sr = self.sample_rate_hz as f64;
        let mut samples = Vec::with_capacity(seg * transcript.chars().count());
        for c in transcript.chars() {
            let f = self.frequency(c)? * pitch_factor;
            for i in 0..seg {
                let env = if ramp == 0 {
                    1.0
                } else {
                    (i.min(seg - 1 - i) as f64 / ramp as f64).min(1.0)
                };
                samples.push(self.amplitude * env * (std::f64::consts::TAU * f * i as f64 / sr).sin());
            }
        }
        Waveform::new(samples, self.sample_rate_hz)
    }
}

impl ToneGrammar {
    /// Symbol whose nominal tone is closest (in log frequency) to `hz`.
    pub fn classify_hz(&self, hz: f64) -> char {
        let mut best = (f64::INFINITY, self.alphabet[0]);
        for &c in &self.alphabet {
            let d = (hz.ln() - self.frequency(c).expect("own symbol").ln()).abs();
            if d < best.0 {
                best = (d, c);
            }
        }
        best.1
    }

    /// Majority symbol of every tone segment that has at least one frame
    /// lying entirely inside it. `first_frame` is the absolute index of
    /// `spec`'s first frame in the utterance; frames are classified by
    /// their loudest mel channel. Returns `(segment index, symbol)`.
    pub fn classify_segments(&self, spec: &Spectrogram, first_frame: usize, cfg: &FrontendConfig) -> Vec<(usize, char)> {
        let bank = MelFilterbank::new(cfg);
        let (seg, hop, win) = (self.samples_per_segment(), cfg.hop_length(), cfg.win_length());
        let mut votes: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
        for t in 0..spec.n_frames() {
            let start = (first_frame + t) * hop;
            let i = start / seg;
            if start + win > (i + 1) * seg {
                continue;
            }
            let row = spec.frame(t);
            let arg = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap_or(0);
            let sym = self.classify_hz(bank.centers_hz()[arg]);
            let k = self.index_of(sym).expect("own symbol");
            votes.entry(i).or_insert_with(|| vec![0; self.alphabet.len()])[k] += 1;
        }
        votes
            .into_iter()
            .map(|(i, v)| {
                let k = (0..v.len()).max_by_key(|&k| (v[k], std::cmp::Reverse(k))).unwrap_or(0);
                (i, self.alphabet[k])
            })
            .collect()
    }
}

/// `n_utts` grammar-consistent utterances with random first symbols and
/// speaker pitch factors.
pub fn synth_dataset(seed: u64, n_utts: usize, grammar: &ToneGrammar, split_seconds: f64) -> Result<Vec<Utterance>> {
    if n_utts < 1 {
        return Err(Error::invalid("synth_dataset needs at least one utterance"));
    }
    grammar.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_utts)
        .map(|_| {
            let first = grammar.alphabet[rng.gen_range(0..grammar.alphabet.len())];
            let pitch = 1.0 + rng.gen_range(-grammar.pitch_jitter..=grammar.pitch_jitter);
            let text = grammar.sequence(first, grammar.symbols_per_utterance)?;
            Utterance::new(grammar.render(&text, pitch)?, text, split_seconds)
        })
        .collect()
}

/// Writes `utt_NNNN.wav` files and a tab-separated `manifest.tsv` into `dir`.
pub fn write_corpus(dir: &Path, utts: &[Utterance]) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::new();
    for (i, u) in utts.iter().enumerate() {
        let name = format!("utt_{i:04}.wav");
        u.wave.write_wav(&dir.join(&name))?;
        manifest.push_str(&format!("{name}\t{}\n", u.transcript));
    }
    let path = dir.join("manifest.tsv");
    std::fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Utterances read from a manifest, plus how many failed the length filter.
#[derive(Debug, Clone)]
pub struct ManifestLoad {
    pub utterances: Vec<Utterance>,
    pub skipped_short: usize,
}

/// Reads `path<TAB>transcript` lines; relative paths resolve against the
/// manifest's directory. Utterances not longer than `split_seconds` are
/// skipped and counted.
pub fn load_manifest(path: &Path, split_seconds: f64) -> Result<ManifestLoad> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut utterances = Vec::new();
    let mut skipped_short = 0;
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (audio, transcript) = line.split_once('\t').ok_or_else(|| Error::Format {
            what: "manifest",
            detail: format!("line {} has no tab separator", n + 1),
        })?;
        let audio_path = base.join(audio);
        let wave = Waveform::read_wav(&audio_path)?;
        match Utterance::new(wave, transcript, split_seconds) {
            Ok(u) => utterances.push(u),
            Err(Error::TooShort { .. }) => skipped_short += 1,
            Err(e) => return Err(e),
        }
    }
    Ok(ManifestLoad {
        utterances,
        skipped_short,
    })
}
