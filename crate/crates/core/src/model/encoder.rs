use super::layers::{feed_forward, layer_norm, linear, self_attention, Ctx};
use super::Model;
use crate::error::{Error, Result};
use crate::numeric::{Graph, Real, Tensor, Var};

/// Convolutional subsampling followed by the conformer blocks.
/// `x`: `[T, F]` log-mel frames → `[ceil(T / stride), conformer_dim]`.
pub fn encode_speech<T: Real>(g: &mut Graph<T>, model: &Model<T>, x: Var, ctx: &mut Ctx) -> Result<Var> {
    let cfg = &model.config.encoder;
    let (t, f) = match *g.shape(x) {
        [t, f] => (t, f),
        ref s => return Err(Error::invalid(format!("encode_speech: expected [T, F], got {s:?}"))),
    };
    if t == 0 {
        return Err(Error::invalid("encode_speech: empty prompt"));
    }
    if f != cfg.input_mels {
        return Err(Error::ShapeMismatch {
            op: "encode_speech",
            lhs: vec![t, f],
            rhs: vec![t, cfg.input_mels],
        });
    }
    let p = &model.params;
    let img = g.reshape(x, &[1, t, f])?;
    let w = p.var(g, "encoder.subsample.conv.w")?;
    let b = p.var(g, "encoder.subsample.conv.b")?;
    let c = g.conv2d(img, w, b, cfg.conv_stride)?;
    let c = g.gelu(c)?;
    let c = g.swap_axes01(c)?;
    let (tt, ch, ff) = (g.shape(c)[0], g.shape(c)[1], g.shape(c)[2]);
    let flat = g.reshape(c, &[tt, ch * ff])?;
    let h = linear(g, p, "encoder.subsample.linear", flat)?;
    let d = g.shape(h)[1];
    let pe = g.constant(sinusoidal_positions(tt, d))?;
    let mut h = g.add(h, pe)?;
    for i in 0..cfg.num_blocks {
        h = conformer_block(g, model, &format!("encoder.block{i}"), h, ctx)?;
    }
    Ok(h)
}

/// Fixed sine/cosine position table `[n, d]`, geometric wavelengths from
/// 2π to 10000·2π.
pub(crate) fn sinusoidal_positions<T: Real>(n: usize, d: usize) -> Tensor<T> {
    let mut v = vec![0.0; n * d];
    for pos in 0..n {
        for i in 0..d {
            let rate = 10000f64.powf(-((i / 2 * 2) as f64) / d as f64);
            let a = pos as f64 * rate;
            v[pos * d + i] = if i % 2 == 0 { a.sin() } else { a.cos() };
        }
    }
    Tensor::from_f64(vec![n, d], &v).expect("shape matches data")
}

fn conformer_block<T: Real>(g: &mut Graph<T>, model: &Model<T>, prefix: &str, x: Var, ctx: &mut Ctx) -> Result<Var> {
    let p = &model.params;
    let half = T::c(0.5);

    let n = layer_norm(g, p, &format!("{prefix}.ff1.ln"), x)?;
    let y = feed_forward(g, p, &format!("{prefix}.ff1"), n, ctx)?;
    let y = g.scale(y, half)?;
    let x = g.add(x, y)?;

    let n = layer_norm(g, p, &format!("{prefix}.attn.ln"), x)?;
    let a = self_attention(g, p, &format!("{prefix}.attn"), n, model.config.encoder.attn_heads, false, None)?;
    let y = ctx.dropout(g, a.out)?;
    let x = g.add(x, y)?;

    let n = layer_norm(g, p, &format!("{prefix}.conv.ln"), x)?;
    let w = p.var(g, &format!("{prefix}.conv.dw.w"))?;
    let b = p.var(g, &format!("{prefix}.conv.dw.b"))?;
    let y = g.depthwise_conv1d(n, w, b, 1)?;
    let y = g.gelu(y)?;
    let y = linear(g, p, &format!("{prefix}.conv.pw"), y)?;
    let x = g.add(x, y)?;

    let n = layer_norm(g, p, &format!("{prefix}.ff2.ln"), x)?;
    let y = feed_forward(g, p, &format!("{prefix}.ff2"), n, ctx)?;
    let y = g.scale(y, half)?;
    let x = g.add(x, y)?;

    layer_norm(g, p, &format!("{prefix}.out_ln"), x)
}

/// Affine map from the encoder width to the decoder width.
pub fn project_to_lm<T: Real>(g: &mut Graph<T>, model: &Model<T>, h: Var) -> Result<Var> {
    let d = model.config.encoder.conformer_dim;
    if g.shape(h).len() != 2 || g.shape(h)[1] != d {
        return Err(Error::ShapeMismatch {
            op: "project_to_lm",
            lhs: g.shape(h).to_vec(),
            rhs: vec![d, model.config.decoder.lm_dim],
        });
    }
    linear(g, &model.params, "proj", h)
}
