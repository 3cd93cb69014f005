use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::params::ParamStore;
use crate::error::Result;
use crate::numeric::{Graph, Real, Tensor, Var};

pub(crate) const LN_EPS: f64 = 1e-5;

/// Forward-pass mode: dropout on (training) or off.
pub struct Ctx {
    dropout: f64,
    rng: Option<ChaCha8Rng>,
}

impl Ctx {
    pub fn eval() -> Self {
        Self { dropout: 0.0, rng: None }
    }

    pub fn train(dropout: f64, seed: u64) -> Self {
        Self {
            dropout,
            rng: (dropout > 0.0).then(|| ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub(crate) fn dropout<T: Real>(&mut self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let Some(rng) = self.rng.as_mut() else {
            return Ok(x);
        };
        let keep = 1.0 - self.dropout;
        let scale = T::c(1.0 / keep);
        let shape = g.shape(x).to_vec();
        let n: usize = shape.iter().product();
        let mask: Vec<T> = (0..n)
            .map(|_| if rng.gen_bool(keep) { scale } else { T::zero() })
            .collect();
        let m = g.constant(Tensor::new(shape, mask)?)?;
        g.mul(x, m)
    }
}

pub(crate) fn linear<T: Real>(g: &mut Graph<T>, p: &ParamStore<T>, prefix: &str, x: Var) -> Result<Var> {
    let w = p.var(g, &format!("{prefix}.w"))?;
    let b = p.var(g, &format!("{prefix}.b"))?;
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

pub(crate) fn layer_norm<T: Real>(g: &mut Graph<T>, p: &ParamStore<T>, prefix: &str, x: Var) -> Result<Var> {
    let gain = p.var(g, &format!("{prefix}.g"))?;
    let bias = p.var(g, &format!("{prefix}.b"))?;
    let n = g.layer_norm(x, LN_EPS)?;
    let s = g.mul_row(n, gain)?;
    g.add_row(s, bias)
}

/// `w2(gelu(w1 x))`.
pub(crate) fn feed_forward<T: Real>(
    g: &mut Graph<T>,
    p: &ParamStore<T>,
    prefix: &str,
    x: Var,
    ctx: &mut Ctx,
) -> Result<Var> {
    let h = linear(g, p, &format!("{prefix}.l1"), x)?;
    let h = g.gelu(h)?;
    let h = ctx.dropout(g, h)?;
    linear(g, p, &format!("{prefix}.l2"), h)
}

pub(crate) struct AttnOut {
    pub out: Var,
    /// Keys and values of every position seen so far (past + new).
    pub keys: Var,
    pub values: Var,
}

/// Multi-head scaled dot-product self-attention. With `causal`, query row
/// `i` sees key rows `0..=past_len + i`, where `past` supplies cached keys
/// and values for earlier positions.
pub(crate) fn self_attention<T: Real>(
    g: &mut Graph<T>,
    p: &ParamStore<T>,
    prefix: &str,
    x: Var,
    heads: usize,
    causal: bool,
    past: Option<(Var, Var)>,
) -> Result<AttnOut> {
    let q = linear(g, p, &format!("{prefix}.q"), x)?;
    let k_new = linear(g, p, &format!("{prefix}.k"), x)?;
    let v_new = linear(g, p, &format!("{prefix}.v"), x)?;
    let (keys, values, past_len) = match past {
        Some((pk, pv)) => {
            let n = g.shape(pk)[0];
            (g.concat_rows(&[pk, k_new])?, g.concat_rows(&[pv, v_new])?, n)
        }
        None => (k_new, v_new, 0),
    };
    let dim = g.shape(q)[1];
    let dh = dim / heads;
    let scale = T::c(1.0 / (dh as f64).sqrt());
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * dh, (h + 1) * dh)?;
        let kh = g.slice_cols(keys, h * dh, (h + 1) * dh)?;
        let vh = g.slice_cols(values, h * dh, (h + 1) * dh)?;
        let s = g.matmul_t(qh, kh)?;
        let s = g.scale(s, scale)?;
        let a = if causal { g.causal_softmax(s, past_len)? } else { g.softmax(s)? };
        outs.push(g.matmul(a, vh)?);
    }
    let cat = if heads == 1 { outs[0] } else { g.concat_cols(&outs)? };
    let out = linear(g, p, &format!("{prefix}.o"), cat)?;
    Ok(AttnOut { out, keys, values })
}
