use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Speech encoder shape.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncoderConfig {
    pub conformer_dim: usize,
    pub num_blocks: usize,
    pub attn_heads: usize,
    pub conv_kernel: (usize, usize),
    pub conv_stride: (usize, usize),
    /// Output channels of the subsampling convolution.
    pub conv_channels: usize,
    pub input_mels: usize,
    pub ff_dim: usize,
    /// Kernel of the depthwise convolution inside each block.
    pub depthwise_kernel: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            conformer_dim: 64,
            num_blocks: 2,
            attn_heads: 4,
            conv_kernel: (3, 3),
            conv_stride: (2, 2),
            conv_channels: 4,
            input_mels: 128,
            ff_dim: 256,
            depthwise_kernel: 3,
        }
    }
}

impl EncoderConfig {
    /// Mel bins left after the subsampling convolution.
    pub fn subsampled_mels(&self) -> usize {
        self.input_mels.div_ceil(self.conv_stride.1)
    }

    pub fn output_frames(&self, input_frames: usize) -> usize {
        input_frames.div_ceil(self.conv_stride.0)
    }
}

/// Decoder, embedding, head and pre/post-net shape.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecoderConfig {
    pub lm_dim: usize,
    pub num_layers: usize,
    pub attn_heads: usize,
    pub hidden_dim: usize,
    pub vocab_size: usize,
    pub prenet_bottleneck_dim: usize,
    pub postnet_hidden_dim: usize,
    /// Longest mixed sequence (prefix + text + frames) accepted.
    pub max_positions: usize,
    pub output_mels: usize,
    /// Initial mean of the post-net output bias, in log-mel units. Starting
    /// predictions at the silence level instead of 0 saves many early steps.
    pub frame_bias_init: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            lm_dim: 64,
            num_layers: 2,
            attn_heads: 4,
            hidden_dim: 256,
            vocab_size: 9,
            prenet_bottleneck_dim: 16,
            postnet_hidden_dim: 256,
            max_positions: 512,
            output_mels: 128,
            frame_bias_init: 0.01f64.ln(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub dropout: f64,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            decoder: DecoderConfig::default(),
            dropout: 0.1,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    /// Small configuration used by gradient and causality tests.
    pub fn tiny(vocab_size: usize, mels: usize) -> Self {
        Self {
            encoder: EncoderConfig {
                conformer_dim: 8,
                num_blocks: 2,
                attn_heads: 2,
                conv_channels: 2,
                input_mels: mels,
                ff_dim: 16,
                ..EncoderConfig::default()
            },
            decoder: DecoderConfig {
                lm_dim: 8,
                num_layers: 2,
                attn_heads: 2,
                hidden_dim: 16,
                vocab_size,
                prenet_bottleneck_dim: 4,
                postnet_hidden_dim: 12,
                max_positions: 128,
                output_mels: mels,
                frame_bias_init: 0.01f64.ln(),
            },
            dropout: 0.0,
            init_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.encoder;
        let d = &self.decoder;
        let positive = [
            ("conformer_dim", e.conformer_dim),
            ("attn_heads", e.attn_heads),
            ("conv_channels", e.conv_channels),
            ("input_mels", e.input_mels),
            ("ff_dim", e.ff_dim),
            ("depthwise_kernel", e.depthwise_kernel),
            ("conv_kernel", e.conv_kernel.0.min(e.conv_kernel.1)),
            ("conv_stride", e.conv_stride.0.min(e.conv_stride.1)),
            ("lm_dim", d.lm_dim),
            ("lm_attn_heads", d.attn_heads),
            ("hidden_dim", d.hidden_dim),
            ("prenet_bottleneck_dim", d.prenet_bottleneck_dim),
            ("postnet_hidden_dim", d.postnet_hidden_dim),
            ("max_positions", d.max_positions),
            ("output_mels", d.output_mels),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be positive")));
            }
        }
        if e.conformer_dim % e.attn_heads != 0 {
            return Err(Error::invalid(format!(
                "conformer_dim {} not divisible by {} heads",
                e.conformer_dim, e.attn_heads
            )));
        }
        if d.lm_dim % d.attn_heads != 0 {
            return Err(Error::invalid(format!("lm_dim {} not divisible by {} heads", d.lm_dim, d.attn_heads)));
        }
        if d.prenet_bottleneck_dim >= d.lm_dim {
            return Err(Error::invalid(format!(
                "prenet bottleneck {} must be narrower than lm_dim {}",
                d.prenet_bottleneck_dim, d.lm_dim
            )));
        }
        if d.vocab_size < 4 {
            return Err(Error::invalid(format!("vocab_size {} below the minimum of 4", d.vocab_size)));
        }
        if !d.frame_bias_init.is_finite() {
            return Err(Error::invalid("frame_bias_init must be finite"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// Flat `key -> value` echo used by checkpoints.
    pub fn to_kv(&self) -> BTreeMap<String, String> {
        let e = &self.encoder;
        let d = &self.decoder;
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("encoder.conformer_dim", e.conformer_dim.to_string());
        put("encoder.num_blocks", e.num_blocks.to_string());
        put("encoder.attn_heads", e.attn_heads.to_string());
        put("encoder.conv_kernel", format!("{},{}", e.conv_kernel.0, e.conv_kernel.1));
        put("encoder.conv_stride", format!("{},{}", e.conv_stride.0, e.conv_stride.1));
        put("encoder.conv_channels", e.conv_channels.to_string());
        put("encoder.input_mels", e.input_mels.to_string());
        put("encoder.ff_dim", e.ff_dim.to_string());
        put("encoder.depthwise_kernel", e.depthwise_kernel.to_string());
        put("decoder.lm_dim", d.lm_dim.to_string());
        put("decoder.num_layers", d.num_layers.to_string());
        put("decoder.attn_heads", d.attn_heads.to_string());
        put("decoder.hidden_dim", d.hidden_dim.to_string());
        put("decoder.vocab_size", d.vocab_size.to_string());
        put("decoder.prenet_bottleneck_dim", d.prenet_bottleneck_dim.to_string());
        put("decoder.postnet_hidden_dim", d.postnet_hidden_dim.to_string());
        put("decoder.max_positions", d.max_positions.to_string());
        put("decoder.output_mels", d.output_mels.to_string());
        put("decoder.frame_bias_init", format!("{:?}", d.frame_bias_init));
        put("model.dropout", format!("{:?}", self.dropout));
        put("model.init_seed", self.init_seed.to_string());
        m
    }

    pub fn from_kv(m: &BTreeMap<String, String>) -> Result<Self> {
        fn get<'a>(m: &'a BTreeMap<String, String>, k: &str) -> Result<&'a str> {
            m.get(k).map(String::as_str).ok_or_else(|| Error::Format {
                what: "model config",
                detail: format!("missing key {k}"),
            })
        }
        fn num<T: std::str::FromStr>(m: &BTreeMap<String, String>, k: &str) -> Result<T> {
            let v = get(m, k)?;
            v.parse().map_err(|_| Error::Format {
                what: "model config",
                detail: format!("{k}={v:?}"),
            })
        }
        fn pair(m: &BTreeMap<String, String>, k: &str) -> Result<(usize, usize)> {
            let v = get(m, k)?;
            let bad = || Error::Format {
                what: "model config",
                detail: format!("{k}={v:?}"),
            };
            let (a, b) = v.split_once(',').ok_or_else(bad)?;
            Ok((a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?))
        }
        let cfg = Self {
            encoder: EncoderConfig {
                conformer_dim: num(m, "encoder.conformer_dim")?,
                num_blocks: num(m, "encoder.num_blocks")?,
                attn_heads: num(m, "encoder.attn_heads")?,
                conv_kernel: pair(m, "encoder.conv_kernel")?,
                conv_stride: pair(m, "encoder.conv_stride")?,
                conv_channels: num(m, "encoder.conv_channels")?,
                input_mels: num(m, "encoder.input_mels")?,
                ff_dim: num(m, "encoder.ff_dim")?,
                depthwise_kernel: num(m, "encoder.depthwise_kernel")?,
            },
            decoder: DecoderConfig {
                lm_dim: num(m, "decoder.lm_dim")?,
                num_layers: num(m, "decoder.num_layers")?,
                attn_heads: num(m, "decoder.attn_heads")?,
                hidden_dim: num(m, "decoder.hidden_dim")?,
                vocab_size: num(m, "decoder.vocab_size")?,
                prenet_bottleneck_dim: num(m, "decoder.prenet_bottleneck_dim")?,
                postnet_hidden_dim: num(m, "decoder.postnet_hidden_dim")?,
                max_positions: num(m, "decoder.max_positions")?,
                output_mels: num(m, "decoder.output_mels")?,
                frame_bias_init: num(m, "decoder.frame_bias_init")?,
            },
            dropout: num(m, "model.dropout")?,
            init_seed: num(m, "model.init_seed")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_round_trip() {
        let cfg = ModelConfig::default();
        assert_eq!(ModelConfig::from_kv(&cfg.to_kv()).unwrap(), cfg);
    }

    #[test]
    fn bottleneck_must_be_narrower() {
        let mut cfg = ModelConfig::default();
        cfg.decoder.prenet_bottleneck_dim = cfg.decoder.lm_dim;
        assert!(cfg.validate().is_err());
        cfg.decoder.prenet_bottleneck_dim = 16;
        cfg.encoder.attn_heads = 3;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn subsampled_shapes() {
        let e = EncoderConfig::default();
        assert_eq!(e.output_frames(240), 120);
        assert_eq!(e.output_frames(7), 4);
        assert_eq!(e.subsampled_mels(), 64);
    }
}
