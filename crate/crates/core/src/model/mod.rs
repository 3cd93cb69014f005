//! Speech encoder, projection, prefix-conditioned causal decoder and the
//! acoustic pre/post-nets.

mod checkpoint;
mod config;
mod decoder;
mod encoder;
mod layers;
mod params;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC};
pub use config::{DecoderConfig, EncoderConfig, ModelConfig};
pub use decoder::{decoder_forward, postnet, prenet, text_head, DecodeSession, DecoderCache, DecoderOutputs};
pub use encoder::{encode_speech, project_to_lm};
pub use layers::Ctx;
pub use params::{ParamGroup, ParamStore};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numeric::{Graph, Real, Tensor};

/// Configuration plus weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
}

const BIAS_STD: f64 = 0.02;

enum Init {
    Zeros,
    Ones,
    /// Normal with the given standard deviation.
    Normal(f64),
    /// Normal with the given mean and the bias standard deviation.
    Shifted(f64),
}

fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let e = &cfg.encoder;
    let d = &cfg.decoder;
    let mut out: Vec<(String, Vec<usize>, Init)> = Vec::new();
    let lin = |out: &mut Vec<(String, Vec<usize>, Init)>, name: String, fan_in: usize, fan_out: usize, std: f64| {
        out.push((format!("{name}.w"), vec![fan_in, fan_out], Init::Normal(std)));
        out.push((format!("{name}.b"), vec![fan_out], Init::Normal(BIAS_STD)));
    };
    let ln = |out: &mut Vec<(String, Vec<usize>, Init)>, name: String, dim: usize| {
        out.push((format!("{name}.g"), vec![dim], Init::Ones));
        out.push((format!("{name}.b"), vec![dim], Init::Zeros));
    };
    let fan = |n: usize| 1.0 / (n as f64).sqrt();

    let (kh, kw) = e.conv_kernel;
    out.push((
        "encoder.subsample.conv.w".into(),
        vec![e.conv_channels, 1, kh, kw],
        Init::Normal(fan(kh * kw)),
    ));
    out.push(("encoder.subsample.conv.b".into(), vec![e.conv_channels], Init::Normal(BIAS_STD)));
    let flat = e.conv_channels * e.subsampled_mels();
    lin(&mut out, "encoder.subsample.linear".into(), flat, e.conformer_dim, fan(flat));
    let cd = e.conformer_dim;
    for i in 0..e.num_blocks {
        let b = format!("encoder.block{i}");
        for ff in ["ff1", "ff2"] {
            ln(&mut out, format!("{b}.{ff}.ln"), cd);
            lin(&mut out, format!("{b}.{ff}.l1"), cd, e.ff_dim, fan(cd));
            lin(&mut out, format!("{b}.{ff}.l2"), e.ff_dim, cd, fan(e.ff_dim));
        }
        ln(&mut out, format!("{b}.attn.ln"), cd);
        for m in ["q", "k", "v", "o"] {
            lin(&mut out, format!("{b}.attn.{m}"), cd, cd, fan(cd));
        }
        ln(&mut out, format!("{b}.conv.ln"), cd);
        out.push((format!("{b}.conv.dw.w"), vec![cd, e.depthwise_kernel], Init::Normal(fan(e.depthwise_kernel))));
        out.push((format!("{b}.conv.dw.b"), vec![cd], Init::Normal(BIAS_STD)));
        lin(&mut out, format!("{b}.conv.pw"), cd, cd, fan(cd));
        ln(&mut out, format!("{b}.out_ln"), cd);
    }
    lin(&mut out, "proj".into(), cd, d.lm_dim, fan(cd));

    out.push(("embed.tokens".into(), vec![d.vocab_size, d.lm_dim], Init::Normal(0.02)));
    out.push(("decoder.pos".into(), vec![d.max_positions, d.lm_dim], Init::Normal(0.02)));
    out.push(("decoder.go".into(), vec![d.lm_dim], Init::Normal(0.02)));
    for i in 0..d.num_layers {
        let b = format!("decoder.layer{i}");
        ln(&mut out, format!("{b}.attn.ln"), d.lm_dim);
        for m in ["q", "k", "v", "o"] {
            lin(&mut out, format!("{b}.attn.{m}"), d.lm_dim, d.lm_dim, fan(d.lm_dim));
        }
        ln(&mut out, format!("{b}.ff.ln"), d.lm_dim);
        lin(&mut out, format!("{b}.ff.l1"), d.lm_dim, d.hidden_dim, fan(d.lm_dim));
        lin(&mut out, format!("{b}.ff.l2"), d.hidden_dim, d.lm_dim, fan(d.hidden_dim));
    }
    ln(&mut out, "decoder.final_ln".into(), d.lm_dim);
    lin(&mut out, "text_head".into(), d.lm_dim, d.vocab_size, 0.02);
    lin(&mut out, "prenet.l1".into(), d.output_mels, d.prenet_bottleneck_dim, fan(d.output_mels));
    lin(&mut out, "prenet.l2".into(), d.prenet_bottleneck_dim, d.lm_dim, fan(d.prenet_bottleneck_dim));
    lin(&mut out, "postnet.l1".into(), d.lm_dim, d.postnet_hidden_dim, fan(d.lm_dim));
    out.push(("postnet.l2.w".into(), vec![d.postnet_hidden_dim, d.output_mels], Init::Normal(fan(d.postnet_hidden_dim))));
    out.push(("postnet.l2.b".into(), vec![d.output_mels], Init::Shifted(d.frame_bias_init)));
    out
}

impl<T: Real> Model<T> {
    /// Randomly initialised model; values depend only on the config
    /// (including `init_seed`), not on `T` beyond rounding.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut params = ParamStore::new();
        for (name, shape, init) in layout(&config) {
            let n: usize = shape.iter().product();
            let values: Vec<f64> = match init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::Normal(std) => {
                    let dist = Normal::new(0.0, std).map_err(|e| Error::invalid(e.to_string()))?;
                    (0..n).map(|_| dist.sample(&mut rng)).collect()
                }
                Init::Shifted(mean) => {
                    let dist = Normal::new(mean, BIAS_STD).map_err(|e| Error::invalid(e.to_string()))?;
                    (0..n).map(|_| dist.sample(&mut rng)).collect()
                }
            };
            params.insert(name, Tensor::from_f64(shape, &values)?)?;
        }
        Ok(Self { config, params })
    }

    /// Wraps existing weights, checking names and shapes against `config`.
    pub fn from_parts(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let expected = layout(&config);
        if expected.len() != params.len() {
            return Err(Error::Format {
                what: "model parameters",
                detail: format!("expected {} tensors, found {}", expected.len(), params.len()),
            });
        }
        for ((name, shape, _), (have_name, have)) in expected.iter().zip(params.names().iter().zip(params.tensors())) {
            if name != have_name || shape.as_slice() != have.shape() {
                return Err(Error::Format {
                    what: "model parameters",
                    detail: format!("expected {name} {shape:?}, found {have_name} {:?}", have.shape()),
                });
            }
        }
        Ok(Self { config, params })
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config,
            params: self.params.cast(),
        }
    }

    /// Encoder followed by the projection, without gradients: `[T, F]` →
    /// `[ceil(T / 2), lm_dim]`.
    pub fn encode_prompt(&self, x_p: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::inference();
        let x = g.constant(x_p.clone())?;
        let h = encode_speech(&mut g, self, x, &mut Ctx::eval())?;
        let p = project_to_lm(&mut g, self, h)?;
        Ok(g.value(p).clone())
    }
}
