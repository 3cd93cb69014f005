use super::layers::{feed_forward, layer_norm, linear, self_attention, Ctx};
use super::Model;
use crate::error::{Error, Result};
use crate::numeric::{Graph, Real, Tensor, Var};

/// Spectrogram frames `[n, F]` → decoder inputs `[n, lm_dim]` through a
/// narrow hidden layer.
pub fn prenet<T: Real>(g: &mut Graph<T>, model: &Model<T>, frames: Var) -> Result<Var> {
    let f = model.config.decoder.output_mels;
    if g.shape(frames).len() != 2 || g.shape(frames)[1] != f {
        return Err(Error::ShapeMismatch {
            op: "prenet",
            lhs: g.shape(frames).to_vec(),
            rhs: vec![f],
        });
    }
    let h = linear(g, &model.params, "prenet.l1", frames)?;
    let h = g.gelu(h)?;
    linear(g, &model.params, "prenet.l2", h)
}

/// Decoder states `[n, lm_dim]` → predicted frames `[n, F]`.
pub fn postnet<T: Real>(g: &mut Graph<T>, model: &Model<T>, h: Var) -> Result<Var> {
    let d = model.config.decoder.lm_dim;
    if g.shape(h).len() != 2 || g.shape(h)[1] != d {
        return Err(Error::ShapeMismatch {
            op: "postnet",
            lhs: g.shape(h).to_vec(),
            rhs: vec![d],
        });
    }
    let h = linear(g, &model.params, "postnet.l1", h)?;
    let h = g.gelu(h)?;
    linear(g, &model.params, "postnet.l2", h)
}

pub fn text_head<T: Real>(g: &mut Graph<T>, model: &Model<T>, h: Var) -> Result<Var> {
    linear(g, &model.params, "text_head", h)
}

/// Token embeddings plus position embeddings starting at `pos`.
pub(crate) fn embed_tokens<T: Real>(g: &mut Graph<T>, model: &Model<T>, ids: &[usize], pos: usize) -> Result<Var> {
    let table = model.params.var(g, "embed.tokens")?;
    let e = g.gather_rows(table, ids)?;
    add_positions(g, model, e, pos)
}

/// Frame-region inputs: optionally the learned go vector, then the prenet
/// image of `frames`; position embeddings start at `pos`.
pub(crate) fn embed_frames<T: Real>(
    g: &mut Graph<T>,
    model: &Model<T>,
    with_go: bool,
    frames: Option<Var>,
    pos: usize,
) -> Result<Var> {
    let mut parts = Vec::with_capacity(2);
    if with_go {
        let go = model.params.var(g, "decoder.go")?;
        parts.push(g.reshape(go, &[1, model.config.decoder.lm_dim])?);
    }
    if let Some(f) = frames {
        if g.shape(f)[0] > 0 {
            parts.push(prenet(g, model, f)?);
        }
    }
    let x = match parts.len() {
        0 => return Err(Error::invalid("empty frame region")),
        1 => parts[0],
        _ => g.concat_rows(&parts)?,
    };
    add_positions(g, model, x, pos)
}

fn add_positions<T: Real>(g: &mut Graph<T>, model: &Model<T>, x: Var, pos: usize) -> Result<Var> {
    let n = g.shape(x)[0];
    let max = model.config.decoder.max_positions;
    if pos + n > max {
        return Err(Error::SequenceTooLong { len: pos + n, max });
    }
    let table = model.params.var(g, "decoder.pos")?;
    let ids: Vec<usize> = (pos..pos + n).collect();
    let pe = g.gather_rows(table, &ids)?;
    g.add(x, pe)
}

/// Runs the causal stack over `x`, optionally continuing from cached keys
/// and values. Returns the final normalised states and the per-layer
/// keys/values covering every position.
pub(crate) fn decoder_stack<T: Real>(
    g: &mut Graph<T>,
    model: &Model<T>,
    x: Var,
    past: Option<&[(Var, Var)]>,
    ctx: &mut Ctx,
) -> Result<(Var, Vec<(Var, Var)>)> {
    let cfg = &model.config.decoder;
    let p = &model.params;
    let mut h = x;
    let mut kv = Vec::with_capacity(cfg.num_layers);
    for i in 0..cfg.num_layers {
        let prefix = format!("decoder.layer{i}");
        let n = layer_norm(g, p, &format!("{prefix}.attn.ln"), h)?;
        let a = self_attention(g, p, &format!("{prefix}.attn"), n, cfg.attn_heads, true, past.map(|c| c[i]))?;
        kv.push((a.keys, a.values));
        let y = ctx.dropout(g, a.out)?;
        h = g.add(h, y)?;
        let n = layer_norm(g, p, &format!("{prefix}.ff.ln"), h)?;
        let y = feed_forward(g, p, &format!("{prefix}.ff"), n, ctx)?;
        let y = ctx.dropout(g, y)?;
        h = g.add(h, y)?;
    }
    Ok((layer_norm(g, p, "decoder.final_ln", h)?, kv))
}

/// Head outputs of one teacher-forced pass.
#[derive(Debug, Clone, Copy)]
pub struct DecoderOutputs {
    /// `[text_len, V]`: row `i` predicts token `i + 1` of `[y..., eos]`.
    pub text_logits: Var,
    /// `[frame_len, F]`: row `j` predicts continuation frame `j`.
    pub frame_preds: Option<Var>,
}

/// Teacher-forced pass over `[prefix | sos y... | go prenet(frames[..n-1])]`.
///
/// `text_ids` must start with sos. `frames` are the target continuation
/// frames `[n, F]`; the frame region holds the go vector followed by the
/// first `n - 1` of them, so its length is `n`.
pub fn decoder_forward<T: Real>(
    g: &mut Graph<T>,
    model: &Model<T>,
    prefix: Option<Var>,
    text_ids: &[usize],
    frames: Option<Var>,
    ctx: &mut Ctx,
) -> Result<DecoderOutputs> {
    let cfg = &model.config.decoder;
    if text_ids.first() != Some(&crate::tokenizer::SOS_ID) {
        return Err(Error::invalid("decoder text input must start with sos"));
    }
    let prefix_len = match prefix {
        Some(pv) => {
            if g.shape(pv).len() != 2 || g.shape(pv)[1] != cfg.lm_dim {
                return Err(Error::ShapeMismatch {
                    op: "decoder prefix",
                    lhs: g.shape(pv).to_vec(),
                    rhs: vec![cfg.lm_dim],
                });
            }
            g.shape(pv)[0]
        }
        None => 0,
    };
    let frame_len = frames.map_or(0, |f| g.shape(f)[0]);
    let total = prefix_len + text_ids.len() + frame_len;
    if total > cfg.max_positions {
        return Err(Error::SequenceTooLong {
            len: total,
            max: cfg.max_positions,
        });
    }

    let mut parts = Vec::with_capacity(3);
    if let Some(pv) = prefix {
        parts.push(pv);
    }
    parts.push(embed_tokens(g, model, text_ids, 0)?);
    if let Some(f) = frames.filter(|_| frame_len > 0) {
        let shifted = g.slice_rows(f, 0, frame_len - 1)?;
        parts.push(embed_frames(g, model, true, Some(shifted), text_ids.len())?);
    }
    let x = if parts.len() == 1 { parts[0] } else { g.concat_rows(&parts)? };
    let (h, _) = decoder_stack(g, model, x, None, ctx)?;

    let text_end = prefix_len + text_ids.len();
    let ht = g.slice_rows(h, prefix_len, text_end)?;
    let text_logits = text_head(g, model, ht)?;
    let frame_preds = if frame_len > 0 {
        let hf = g.slice_rows(h, text_end, text_end + frame_len)?;
        Some(postnet(g, model, hf)?)
    } else {
        None
    };
    Ok(DecoderOutputs { text_logits, frame_preds })
}

/// Per-layer key/value cache for step-by-step decoding.
#[derive(Debug, Clone)]
pub struct DecoderCache<T> {
    layers: Vec<(Tensor<T>, Tensor<T>)>,
    len: usize,
}

impl<T: Real> DecoderCache<T> {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Mutable access to cached tensors; only meant for fault-injection tests.
    pub fn layers_mut(&mut self) -> &mut [(Tensor<T>, Tensor<T>)] {
        &mut self.layers
    }
}

/// Autoregressive decoding state over one mixed sequence.
pub struct DecodeSession<'m, T: Real> {
    model: &'m Model<T>,
    cache: Option<DecoderCache<T>>,
    /// Positions consumed after the prefix (text and frames).
    pos: usize,
    frames_started: bool,
}

impl<'m, T: Real> DecodeSession<'m, T> {
    /// Starts a session, feeding the projected prompt `[P, lm_dim]` if any.
    pub fn new(model: &'m Model<T>, prefix: Option<&Tensor<T>>) -> Result<Self> {
        let mut s = Self {
            model,
            cache: None,
            pos: 0,
            frames_started: false,
        };
        if let Some(pfx) = prefix {
            if pfx.shape().len() != 2 || pfx.shape()[1] != model.config.decoder.lm_dim {
                return Err(Error::ShapeMismatch {
                    op: "decoder prefix",
                    lhs: pfx.shape().to_vec(),
                    rhs: vec![model.config.decoder.lm_dim],
                });
            }
            if pfx.shape()[0] > 0 {
                s.run(|g, _| g.constant(pfx.clone()))?;
            }
        }
        Ok(s)
    }

    pub fn cache(&self) -> Option<&DecoderCache<T>> {
        self.cache.as_ref()
    }

    pub fn cache_mut(&mut self) -> Option<&mut DecoderCache<T>> {
        self.cache.as_mut()
    }

    /// Total positions consumed, including the prefix.
    pub fn len(&self) -> usize {
        self.cache.as_ref().map_or(0, |c| c.len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn run(&mut self, build: impl FnOnce(&mut Graph<T>, &Model<T>) -> Result<Var>) -> Result<(Graph<T>, Var)> {
        let model = self.model;
        let mut g = Graph::inference();
        let x = build(&mut g, model)?;
        let n = g.shape(x)[0];
        let max = model.config.decoder.max_positions;
        if self.len() + n > max {
            return Err(Error::SequenceTooLong { len: self.len() + n, max });
        }
        let past = match &self.cache {
            Some(c) => Some(
                c.layers
                    .iter()
                    .map(|(k, v)| Ok((g.constant(k.clone())?, g.constant(v.clone())?)))
                    .collect::<Result<Vec<_>>>()?,
            ),
            None => None,
        };
        let (h, kv) = decoder_stack(&mut g, model, x, past.as_deref(), &mut Ctx::eval())?;
        let layers = kv.iter().map(|&(k, v)| (g.value(k).clone(), g.value(v).clone())).collect();
        let len = self.len() + n;
        self.cache = Some(DecoderCache { layers, len });
        Ok((g, h))
    }

    /// Feeds text tokens; returns logits `[n, V]` at their positions.
    pub fn push_tokens(&mut self, ids: &[usize]) -> Result<Tensor<T>> {
        if self.frames_started {
            return Err(Error::invalid("text cannot follow frames in a mixed sequence"));
        }
        let pos = self.pos;
        let (mut g, h) = self.run(|g, m| embed_tokens(g, m, ids, pos))?;
        self.pos += ids.len();
        let logits = text_head(&mut g, self.model, h)?;
        Ok(g.value(logits).clone())
    }

    /// Feeds frame-region inputs: the go vector on the first call (when
    /// `with_go`), then prenet images of `frames`. Returns the predicted
    /// frames at those positions.
    pub fn push_frames(&mut self, with_go: bool, frames: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        if with_go == self.frames_started {
            return Err(Error::invalid("the go vector must open the frame region exactly once"));
        }
        let pos = self.pos;
        let (mut g, h) = self.run(|g, m| {
            let fv = match frames {
                Some(f) => Some(g.constant(f.clone())?),
                None => None,
            };
            embed_frames(g, m, with_go, fv, pos)
        })?;
        self.frames_started = true;
        self.pos += g.shape(h)[0];
        let out = postnet(&mut g, self.model, h)?;
        Ok(g.value(out).clone())
    }
}
