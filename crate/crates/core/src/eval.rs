//! Evaluation proxies: transcript accuracy, perplexity of generated text
//! under a text-only reference model, and spectral similarity between a
//! prompt and its generated continuation.

use std::fmt::Write as _;

use crate::audio::Spectrogram;
use crate::error::{Error, Result};
use crate::losses::{ce_loss, recon_loss};
use crate::model::{decoder_forward, Ctx, Model};
use crate::numeric::{Graph, Real, Tensor};
use crate::pipeline::{infer_frames, infer_text, InferConfig, TrainingExample};
use crate::tokenizer::SOS_ID;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    /// Position-wise agreement of the generated transcript (with `eos`)
    /// against the reference, pooled over items.
    pub token_accuracy: f64,
    /// Mean per-token cross-entropy (nats) of the generated transcripts
    /// under the reference model.
    pub proxy_perplexity: f64,
    /// Mean cosine between pooled prompt and continuation statistics.
    pub spectral_similarity: f64,
    pub n_items: usize,
}

impl EvalReport {
    /// `key=value` lines; every metric is labelled as a proxy.
    pub fn to_kv_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "proxy_token_accuracy={}", self.token_accuracy);
        let _ = writeln!(s, "proxy_log_perplexity={}", self.proxy_perplexity);
        let _ = writeln!(s, "proxy_spectral_similarity={}", self.spectral_similarity);
        let _ = writeln!(s, "n_items={}", self.n_items);
        s
    }
}

/// Per-channel mean and standard deviation of `spec - log(floor)`,
/// concatenated.
fn pooled_stats(spec: &Spectrogram) -> Vec<f64> {
    let f = spec.n_mels();
    let n = spec.n_frames() as f64;
    let base = spec.log_floor();
    let mut mean = vec![0.0; f];
    for t in 0..spec.n_frames() {
        for (m, &v) in mean.iter_mut().zip(spec.frame(t)) {
            *m += (v - base) / n;
        }
    }
    let mut var = vec![0.0; f];
    for t in 0..spec.n_frames() {
        for ((s, &v), m) in var.iter_mut().zip(spec.frame(t)).zip(&mean) {
            *s += (v - base - m).powi(2) / n;
        }
    }
    mean.extend(var.into_iter().map(f64::sqrt));
    mean
}

/// Cosine between mean-and-deviation pooled statistics; 0 when either side
/// has no frames or no energy above the floor.
pub fn spectral_similarity(a: &Spectrogram, b: &Spectrogram) -> Result<f64> {
    if a.n_mels() != b.n_mels() {
        return Err(Error::ShapeMismatch {
            op: "spectral_similarity",
            lhs: vec![a.n_mels()],
            rhs: vec![b.n_mels()],
        });
    }
    if a.n_frames() == 0 || b.n_frames() == 0 {
        return Ok(0.0);
    }
    let (u, v) = (pooled_stats(a), pooled_stats(b));
    let dot: f64 = u.iter().zip(&v).map(|(x, y)| x * y).sum();
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Ok(0.0);
    }
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

/// `(correct, compared)` where `compared` is the longer of the two lengths,
/// so missing and surplus tokens both count as errors.
pub fn token_matches(predicted: &[usize], reference: &[usize]) -> (usize, usize) {
    let correct = predicted.iter().zip(reference).filter(|(a, b)| a == b).count();
    (correct, predicted.len().max(reference.len()))
}

/// Summed cross-entropy and token count of `tokens` under a text-only
/// model, scoring every token after `sos`.
pub fn text_log_likelihood<T: Real>(reference: &Model<T>, tokens: &[usize]) -> Result<(f64, usize)> {
    if tokens.is_empty() {
        return Ok((0.0, 0));
    }
    let mut inputs = vec![SOS_ID];
    inputs.extend_from_slice(&tokens[..tokens.len() - 1]);
    let mut g = Graph::inference();
    let out = decoder_forward(&mut g, reference, None, &inputs, None, &mut Ctx::eval())?;
    Ok((ce_loss(g.value(out.text_logits), tokens)?, tokens.len()))
}

/// Teacher-forced text logits and frame predictions for one example.
pub fn teacher_forced<T: Real>(model: &Model<T>, ex: &TrainingExample) -> Result<(Tensor<T>, Tensor<T>)> {
    let prefix = model.encode_prompt(&ex.x_p.to_tensor())?;
    let mut g = Graph::inference();
    let p = g.constant(prefix)?;
    let f = g.constant(ex.x_c.to_tensor())?;
    let out = decoder_forward(&mut g, model, Some(p), &ex.text_in, Some(f), &mut Ctx::eval())?;
    let frames = out.frame_preds.ok_or_else(|| Error::invalid("no frame predictions"))?;
    Ok((g.value(out.text_logits).clone(), g.value(frames).clone()))
}

/// Mean absolute error per log-mel cell of teacher-forced frame predictions.
pub fn teacher_forced_mae<T: Real>(model: &Model<T>, ex: &TrainingExample) -> Result<f64> {
    let (_, pred) = teacher_forced(model, ex)?;
    let n = ex.x_c.data().len();
    let sum: f64 = pred.data().iter().zip(ex.x_c.data()).map(|(p, t)| (p.to_f64_lossy() - t).abs()).sum();
    Ok(sum / n.max(1) as f64)
}

/// Greedy (or configured) continuation of every item's prompt, scored
/// against its transcript and under `reference`. Items are evaluated in
/// parallel when enabled and pooled in order.
pub fn eval_continuations<T: Real>(
    model: &Model<T>,
    reference: &Model<T>,
    items: &[TrainingExample],
    cfg: &InferConfig,
) -> Result<EvalReport> {
    if items.is_empty() {
        return Err(Error::invalid("evaluation set is empty"));
    }
    let per_item = crate::par::map_slice(items, |ex| -> Result<(usize, usize, f64, usize, f64)> {
        let (tokens, _) = infer_text(model, &ex.x_p, cfg)?;
        let (correct, compared) = token_matches(&tokens, &ex.targets);
        let (ce, n_tok) = text_log_likelihood(reference, &tokens)?;
        let (frames, _) = infer_frames(model, &ex.x_p, &tokens, cfg)?;
        let sim = spectral_similarity(&ex.x_p, &frames)?;
        Ok((correct, compared, ce, n_tok, sim))
    });
    let (mut correct, mut compared, mut ce, mut n_tok, mut sim) = (0, 0, 0.0, 0, 0.0);
    for r in per_item {
        let (c, n, e, t, s) = r?;
        correct += c;
        compared += n;
        ce += e;
        n_tok += t;
        sim += s;
    }
    Ok(EvalReport {
        token_accuracy: correct as f64 / compared.max(1) as f64,
        proxy_perplexity: ce / n_tok.max(1) as f64,
        spectral_similarity: sim / items.len() as f64,
        n_items: items.len(),
    })
}

/// Free-running continuation quality on items with known continuations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContinuationQuality {
    pub token_accuracy: f64,
    /// Items whose generated transcript (with `eos`) is exactly right.
    pub exact_rate: f64,
    /// Reconstruction loss (spectral plus delta terms) of the generated
    /// frames against the true continuation, per cell.
    pub frame_recon: f64,
    /// Spectral term only, per cell.
    pub frame_recon_s: f64,
    /// Like `frame_recon`, but the frames follow the reference transcript,
    /// so text errors do not leak into the acoustic score.
    pub acoustic_recon: f64,
    pub n_items: usize,
}

/// Decodes each prompt's transcript, then exactly as many frames as the
/// true continuation has, and scores both. Frames are also decoded once more
/// after the reference transcript.
pub fn continuation_quality<T: Real>(
    model: &Model<T>,
    items: &[TrainingExample],
    max_text: usize,
    delta_order: usize,
) -> Result<ContinuationQuality> {
    if items.is_empty() {
        return Err(Error::invalid("evaluation set is empty"));
    }
    let per_item = crate::par::map_slice(items, |ex| -> Result<(usize, usize, bool, f64, f64, f64, usize)> {
        let cfg = InferConfig {
            max_text,
            max_frames: ex.x_c.n_frames(),
            silence_frames: 0,
            ..InferConfig::default()
        };
        let (tokens, _) = infer_text(model, &ex.x_p, &cfg)?;
        let (correct, compared) = token_matches(&tokens, &ex.targets);
        let (frames, _) = infer_frames(model, &ex.x_p, &tokens, &cfg)?;
        let target = ex.x_c.to_tensor::<f64>();
        let r = recon_loss(&target, &frames.to_tensor::<f64>(), delta_order)?;
        let (given, _) = infer_frames(model, &ex.x_p, &ex.targets, &cfg)?;
        let a = recon_loss(&target, &given.to_tensor::<f64>(), delta_order)?;
        Ok((correct, compared, tokens == ex.targets, r.total, r.s, a.total, ex.x_c.data().len()))
    });
    let (mut correct, mut compared, mut exact, mut recon, mut recon_s, mut acoustic, mut cells) =
        (0, 0, 0, 0.0, 0.0, 0.0, 0);
    for r in per_item {
        let (c, n, e, t, s, a, k) = r?;
        correct += c;
        compared += n;
        exact += usize::from(e);
        recon += t;
        recon_s += s;
        acoustic += a;
        cells += k;
    }
    Ok(ContinuationQuality {
        token_accuracy: correct as f64 / compared.max(1) as f64,
        exact_rate: exact as f64 / items.len() as f64,
        frame_recon: recon / cells.max(1) as f64,
        frame_recon_s: recon_s / cells.max(1) as f64,
        acoustic_recon: acoustic / cells.max(1) as f64,
        n_items: items.len(),
    })
}

/// Fraction of transcripts (with `eos`) recovered exactly by greedy
/// decoding from the prompt.
pub fn exact_transcript_rate<T: Real>(model: &Model<T>, items: &[TrainingExample], max_text: usize) -> Result<f64> {
    let cfg = InferConfig {
        max_text,
        ..InferConfig::default()
    };
    let hits = crate::par::map_slice(items, |ex| infer_text(model, &ex.x_p, &cfg).map(|(t, _)| t == ex.targets))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / items.len().max(1) as f64)
}
