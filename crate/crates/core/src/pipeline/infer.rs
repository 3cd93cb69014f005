use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::example::TrainingExample;
use crate::audio::{griffin_lim_invert, FrontendConfig, Spectrogram, Waveform, DEFAULT_ITERATIONS};
use crate::error::{Error, Result};
use crate::model::{decoder_forward, Ctx, DecodeSession, DecoderCache, Model};
use crate::numeric::{Graph, Real, Tensor};
use crate::tokenizer::{EOS_ID, SOS_ID};

#[derive(Debug, Clone, PartialEq)]
pub struct InferConfig {
    pub max_text: usize,
    pub max_frames: usize,
    /// 0 selects greedy decoding.
    pub temperature: f64,
    pub seed: u64,
    /// Consecutive quiet frames that end the continuation.
    pub silence_frames: usize,
    /// A frame is quiet when its mean log-mel is below `log(floor) + margin`.
    pub silence_margin: f64,
    pub griffin_lim_iterations: usize,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self {
            max_text: 64,
            max_frames: 400,
            temperature: 0.0,
            seed: 0,
            silence_frames: 10,
            silence_margin: 0.1,
            griffin_lim_iterations: DEFAULT_ITERATIONS,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TextStop {
    Eos,
    MaxText,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameStop {
    Silence,
    MaxFrames,
}

#[derive(Debug, Clone)]
pub struct InferenceResult {
    /// Generated tokens; ends with `eos` unless `text_stop` is `MaxText`.
    pub tokens: Vec<usize>,
    pub frames: Spectrogram,
    pub wave: Waveform,
    pub text_stop: TextStop,
    pub frame_stop: FrameStop,
}

impl InferenceResult {
    /// Tokens without the trailing `eos`.
    pub fn text_ids(&self) -> &[usize] {
        match self.tokens.last() {
            Some(&EOS_ID) => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }
}

fn pick_token<T: Real>(logits: &[T], temperature: f64, rng: &mut ChaCha8Rng) -> Result<usize> {
    if temperature <= 0.0 {
        let (arg, _) = logits
            .iter()
            .enumerate()
            .fold((0, T::neg_infinity()), |best, (i, &v)| if v > best.1 { (i, v) } else { best });
        return Ok(arg);
    }
    let max = logits.iter().map(|v| v.to_f64_lossy()).fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits
        .iter()
        .map(|v| ((v.to_f64_lossy() - max) / temperature).exp())
        .collect();
    let dist = WeightedIndex::new(&weights).map_err(|e| Error::invalid(format!("sampling: {e}")))?;
    Ok(dist.sample(rng))
}

/// Phase 1: tokens decoded after `[prefix, sos]`. The final token is
/// pushed into the session so that frame decoding can follow.
fn decode_text<T: Real>(session: &mut DecodeSession<'_, T>, cfg: &InferConfig) -> Result<(Vec<usize>, TextStop)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut tokens = Vec::new();
    let mut logits = session.push_tokens(&[SOS_ID])?;
    loop {
        let row = logits.row(logits.dims2()?.0 - 1);
        let next = pick_token(row, cfg.temperature, &mut rng)?;
        tokens.push(next);
        if next == EOS_ID {
            // training inputs are [sos, y]; eos is only ever a target, so the
            // frame region opens right after the last transcript token
            return Ok((tokens, TextStop::Eos));
        }
        logits = session.push_tokens(&[next])?;
        if tokens.len() == cfg.max_text {
            return Ok((tokens, TextStop::MaxText));
        }
    }
}

/// Phase 2: frames predicted from the go vector onwards.
fn decode_frames<T: Real>(
    session: &mut DecodeSession<'_, T>,
    cfg: &InferConfig,
    log_floor: f64,
    n_mels: usize,
) -> Result<(Vec<f64>, usize, FrameStop)> {
    let mut out = Vec::new();
    let mut quiet = 0;
    let mut pred = session.push_frames(true, None)?;
    for t in 0..cfg.max_frames {
        let frame: Vec<f64> = pred.data().iter().map(|v| v.to_f64_lossy()).collect();
        if frame.len() != n_mels {
            return Err(Error::ShapeMismatch {
                op: "infer frames",
                lhs: vec![frame.len()],
                rhs: vec![n_mels],
            });
        }
        let mean = frame.iter().sum::<f64>() / n_mels as f64;
        out.extend_from_slice(&frame);
        quiet = if mean < log_floor + cfg.silence_margin { quiet + 1 } else { 0 };
        if cfg.silence_frames > 0 && quiet >= cfg.silence_frames {
            return Ok((out, t + 1, FrameStop::Silence));
        }
        if t + 1 < cfg.max_frames {
            pred = session.push_frames(false, Some(&pred))?;
        }
    }
    Ok((out, cfg.max_frames, FrameStop::MaxFrames))
}

/// Transcript continuation, then spectrogram continuation, then vocoding.
pub fn infer<T: Real>(model: &Model<T>, x_p: &Spectrogram, cfg: &InferConfig, frontend: &FrontendConfig) -> Result<InferenceResult> {
    if cfg.max_text == 0 || cfg.max_frames == 0 {
        return Err(Error::invalid("max_text and max_frames must be at least 1"));
    }
    let prefix = model.encode_prompt(&x_p.to_tensor())?;
    let mut session = DecodeSession::new(model, Some(&prefix))?;
    let (tokens, text_stop) = decode_text(&mut session, cfg)?;
    let (data, n, frame_stop) = decode_frames(&mut session, cfg, x_p.log_floor(), x_p.n_mels())?;
    let frames = x_p.with_frames(data, n)?;
    let wave = griffin_lim_invert(&frames, cfg.griffin_lim_iterations.max(1), frontend, cfg.seed)?;
    Ok(InferenceResult {
        tokens,
        frames,
        wave,
        text_stop,
        frame_stop,
    })
}

/// Phase 1 only.
pub fn infer_text<T: Real>(model: &Model<T>, x_p: &Spectrogram, cfg: &InferConfig) -> Result<(Vec<usize>, TextStop)> {
    let prefix = model.encode_prompt(&x_p.to_tensor())?;
    let mut session = DecodeSession::new(model, Some(&prefix))?;
    decode_text(&mut session, cfg)
}

/// Phase 2 given a fixed transcript `text` (without `sos`, with or without
/// `eos`); no vocoding.
pub fn infer_frames<T: Real>(model: &Model<T>, x_p: &Spectrogram, text: &[usize], cfg: &InferConfig) -> Result<(Spectrogram, FrameStop)> {
    let prefix = model.encode_prompt(&x_p.to_tensor())?;
    let mut session = DecodeSession::new(model, Some(&prefix))?;
    let mut ids = vec![SOS_ID];
    ids.extend(text.iter().copied().filter(|&t| t != EOS_ID));
    session.push_tokens(&ids)?;
    let (data, n, stop) = decode_frames(&mut session, cfg, x_p.log_floor(), x_p.n_mels())?;
    Ok((x_p.with_frames(data, n)?, stop))
}

/// Largest absolute difference between a single teacher-forced decoder
/// pass and token-by-token / frame-by-frame decoding with cached keys and
/// values. `tamper` runs on the cache after every incremental step.
pub fn cache_equivalence_gap<T: Real>(
    model: &Model<T>,
    prefix: Option<&Tensor<T>>,
    text_in: &[usize],
    frames: Option<&Tensor<T>>,
    mut tamper: impl FnMut(usize, &mut DecoderCache<T>),
) -> Result<f64> {
    let mut g = Graph::inference();
    let pv = prefix.map(|p| g.constant(p.clone())).transpose()?;
    let fv = frames.map(|f| g.constant(f.clone())).transpose()?;
    let full = decoder_forward(&mut g, model, pv, text_in, fv, &mut Ctx::eval())?;
    let full_text = g.value(full.text_logits).clone();

    let mut session = DecodeSession::new(model, prefix)?;
    let mut step = 0;
    let mut after_step = |session: &mut DecodeSession<'_, T>| {
        if let Some(c) = session.cache_mut() {
            tamper(step, c);
        }
        step += 1;
    };
    let mut gap = 0.0f64;
    for (i, &id) in text_in.iter().enumerate() {
        let logits = session.push_tokens(&[id])?;
        let want = full_text.slice_rows(i, i + 1)?;
        gap = gap.max(logits.max_abs_diff(&want)?);
        after_step(&mut session);
    }
    if let (Some(frames), Some(fp)) = (frames, full.frame_preds) {
        let full_frames = g.value(fp).clone();
        let n = frames.dims2()?.0;
        let mut pred = session.push_frames(true, None)?;
        for t in 0..n {
            gap = gap.max(pred.max_abs_diff(&full_frames.slice_rows(t, t + 1)?)?);
            after_step(&mut session);
            if t + 1 < n {
                pred = session.push_frames(false, Some(&frames.slice_rows(t, t + 1)?))?;
            }
        }
    }
    Ok(gap)
}

/// [`cache_equivalence_gap`] on a prepared example (prompt, text and frames).
pub fn incremental_decode_equivalence<T: Real>(model: &Model<T>, ex: &TrainingExample) -> Result<f64> {
    let prefix = model.encode_prompt(&ex.x_p.to_tensor())?;
    cache_equivalence_gap(model, Some(&prefix), &ex.text_in, Some(&ex.x_c.to_tensor()), |_, _| {})
}
