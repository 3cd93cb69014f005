//! Flat `key=value` run configuration shared by the command-line tools.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::audio::{FrontendConfig, SpecAugmentPolicy};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::pipeline::{InferConfig, TrainConfig, DEFAULT_SPLIT_SECONDS};

/// Everything a run needs besides file paths.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub frontend: FrontendConfig,
    pub augment: SpecAugmentPolicy,
    pub augment_enabled: bool,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub infer: InferConfig,
    pub split_seconds: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            frontend: FrontendConfig::default(),
            augment: SpecAugmentPolicy::default(),
            augment_enabled: true,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            infer: InferConfig::default(),
            split_seconds: DEFAULT_SPLIT_SECONDS,
        }
    }
}

/// Every accepted key, in the order written by [`RunConfig::to_text`].
pub const KEYS: &[&str] = &[
    "sample_rate",
    "mel_channels",
    "mel_lower_band",
    "mel_upper_band",
    "frame_size_ms",
    "frame_step_ms",
    "fft_size",
    "mel_floor",
    "augment",
    "freq_blocks",
    "time_blocks",
    "freq_mask_max_bins",
    "time_mask_max_frames",
    "time_block_max_length_ratio",
    "conformer_dims",
    "conformer_blocks",
    "attention_heads",
    "conv_kernel_size",
    "conv_stride_size",
    "conv_channels",
    "encoder_hidden_dims",
    "depthwise_kernel_size",
    "transformer_dim",
    "transformer_layers",
    "num_heads",
    "hidden_dims",
    "prenet_bottleneck_dims",
    "postnet_hidden_dims",
    "max_positions",
    "frame_bias_init",
    "dropout",
    "init_seed",
    "objective_mode",
    "learning_rate",
    "warmup_steps",
    "batch_size",
    "continuation_loss_weight",
    "derivative_loss_order",
    "max_steps",
    "checkpoint_every",
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
    "split_seconds",
    "max_text",
    "max_frames",
    "temperature",
    "silence_frames",
    "silence_margin",
    "griffin_lim_iterations",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.trim().parse().map_err(|_| Error::Format {
        what: "config",
        detail: format!("{key}={value:?} is not a valid value"),
    })
}

fn parse_pair(key: &str, value: &str) -> Result<(usize, usize)> {
    let v = value.trim().trim_start_matches('(').trim_end_matches(')');
    let (a, b) = v.split_once(',').ok_or_else(|| Error::Format {
        what: "config",
        detail: format!("{key}={value:?} must be a pair like 3,3"),
    })?;
    Ok((parse(key, a)?, parse(key, b)?))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "1" | "true" | "yes" | "on" => Ok(true),
        "0" | "false" | "no" | "off" => Ok(false),
        _ => Err(Error::Format {
            what: "config",
            detail: format!("{key}={value:?} is not a boolean"),
        }),
    }
}

/// Parses `key=value` lines; `#` starts a comment. Later duplicates win.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Format {
            what: "config",
            detail: format!("line {} has no '=': {raw:?}", n + 1),
        })?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

impl RunConfig {
    /// Sets one key; unknown keys are rejected by name.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let fe = &mut self.frontend;
        let au = &mut self.augment;
        let enc = &mut self.model.encoder;
        let dec = &mut self.model.decoder;
        let tr = &mut self.train;
        let inf = &mut self.infer;
        match key {
            "sample_rate" => fe.sample_rate_hz = parse(key, value)?,
            "mel_channels" => {
                fe.mel_channels = parse(key, value)?;
                enc.input_mels = fe.mel_channels;
                dec.output_mels = fe.mel_channels;
            }
            "mel_lower_band" => fe.mel_lo_hz = parse(key, value)?,
            "mel_upper_band" => fe.mel_hi_hz = parse(key, value)?,
            "frame_size_ms" => fe.frame_size_ms = parse(key, value)?,
            "frame_step_ms" => fe.frame_step_ms = parse(key, value)?,
            "fft_size" => fe.fft_size = parse(key, value)?,
            "mel_floor" => fe.floor = parse(key, value)?,
            "augment" => self.augment_enabled = parse_bool(key, value)?,
            "freq_blocks" => au.freq_blocks = parse(key, value)?,
            "time_blocks" => au.time_blocks = parse(key, value)?,
            "freq_mask_max_bins" => au.freq_mask_max_bins = parse(key, value)?,
            "time_mask_max_frames" => au.time_mask_max_frames = parse(key, value)?,
            "time_block_max_length_ratio" => au.time_block_max_length_ratio = parse(key, value)?,
            "conformer_dims" => enc.conformer_dim = parse(key, value)?,
            "conformer_blocks" => enc.num_blocks = parse(key, value)?,
            "attention_heads" => enc.attn_heads = parse(key, value)?,
            "conv_kernel_size" => enc.conv_kernel = parse_pair(key, value)?,
            "conv_stride_size" => enc.conv_stride = parse_pair(key, value)?,
            "conv_channels" => enc.conv_channels = parse(key, value)?,
            "encoder_hidden_dims" => enc.ff_dim = parse(key, value)?,
            "depthwise_kernel_size" => enc.depthwise_kernel = parse(key, value)?,
            "transformer_dim" => dec.lm_dim = parse(key, value)?,
            "transformer_layers" => dec.num_layers = parse(key, value)?,
            "num_heads" => dec.attn_heads = parse(key, value)?,
            "hidden_dims" => dec.hidden_dim = parse(key, value)?,
            "prenet_bottleneck_dims" => dec.prenet_bottleneck_dim = parse(key, value)?,
            "postnet_hidden_dims" => dec.postnet_hidden_dim = parse(key, value)?,
            "max_positions" => dec.max_positions = parse(key, value)?,
            "frame_bias_init" => dec.frame_bias_init = parse(key, value)?,
            "dropout" => self.model.dropout = parse(key, value)?,
            "init_seed" => self.model.init_seed = parse(key, value)?,
            "objective_mode" => tr.mode = parse(key, value)?,
            "learning_rate" => tr.peak_lr = parse(key, value)?,
            "warmup_steps" => tr.warmup_steps = parse(key, value)?,
            "batch_size" => tr.batch_size = parse(key, value)?,
            "continuation_loss_weight" => tr.lambda_r = parse(key, value)?,
            "derivative_loss_order" => tr.delta_order = parse(key, value)?,
            "max_steps" => tr.max_steps = parse(key, value)?,
            "checkpoint_every" => tr.checkpoint_every = parse(key, value)?,
            "adam_beta1" => tr.adam.beta1 = parse(key, value)?,
            "adam_beta2" => tr.adam.beta2 = parse(key, value)?,
            "adam_eps" => tr.adam.eps = parse(key, value)?,
            "split_seconds" => self.split_seconds = parse(key, value)?,
            "max_text" => inf.max_text = parse(key, value)?,
            "max_frames" => inf.max_frames = parse(key, value)?,
            "temperature" => inf.temperature = parse(key, value)?,
            "silence_frames" => inf.silence_frames = parse(key, value)?,
            "silence_margin" => inf.silence_margin = parse(key, value)?,
            "griffin_lim_iterations" => inf.griffin_lim_iterations = parse(key, value)?,
            _ => {
                return Err(Error::Format {
                    what: "config",
                    detail: format!("unknown key {key:?}"),
                })
            }
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let fe = &self.frontend;
        let au = &self.augment;
        let enc = &self.model.encoder;
        let dec = &self.model.decoder;
        let tr = &self.train;
        let inf = &self.infer;
        let pair = |p: (usize, usize)| format!("{},{}", p.0, p.1);
        Some(match key {
            "sample_rate" => fe.sample_rate_hz.to_string(),
            "mel_channels" => fe.mel_channels.to_string(),
            "mel_lower_band" => fe.mel_lo_hz.to_string(),
            "mel_upper_band" => fe.mel_hi_hz.to_string(),
            "frame_size_ms" => fe.frame_size_ms.to_string(),
            "frame_step_ms" => fe.frame_step_ms.to_string(),
            "fft_size" => fe.fft_size.to_string(),
            "mel_floor" => fe.floor.to_string(),
            "augment" => self.augment_enabled.to_string(),
            "freq_blocks" => au.freq_blocks.to_string(),
            "time_blocks" => au.time_blocks.to_string(),
            "freq_mask_max_bins" => au.freq_mask_max_bins.to_string(),
            "time_mask_max_frames" => au.time_mask_max_frames.to_string(),
            "time_block_max_length_ratio" => au.time_block_max_length_ratio.to_string(),
            "conformer_dims" => enc.conformer_dim.to_string(),
            "conformer_blocks" => enc.num_blocks.to_string(),
            "attention_heads" => enc.attn_heads.to_string(),
            "conv_kernel_size" => pair(enc.conv_kernel),
            "conv_stride_size" => pair(enc.conv_stride),
            "conv_channels" => enc.conv_channels.to_string(),
            "encoder_hidden_dims" => enc.ff_dim.to_string(),
            "depthwise_kernel_size" => enc.depthwise_kernel.to_string(),
            "transformer_dim" => dec.lm_dim.to_string(),
            "transformer_layers" => dec.num_layers.to_string(),
            "num_heads" => dec.attn_heads.to_string(),
            "hidden_dims" => dec.hidden_dim.to_string(),
            "prenet_bottleneck_dims" => dec.prenet_bottleneck_dim.to_string(),
            "postnet_hidden_dims" => dec.postnet_hidden_dim.to_string(),
            "max_positions" => dec.max_positions.to_string(),
            "frame_bias_init" => dec.frame_bias_init.to_string(),
            "dropout" => self.model.dropout.to_string(),
            "init_seed" => self.model.init_seed.to_string(),
            "objective_mode" => tr.mode.name().to_string(),
            "learning_rate" => tr.peak_lr.to_string(),
            "warmup_steps" => tr.warmup_steps.to_string(),
            "batch_size" => tr.batch_size.to_string(),
            "continuation_loss_weight" => tr.lambda_r.to_string(),
            "derivative_loss_order" => tr.delta_order.to_string(),
            "max_steps" => tr.max_steps.to_string(),
            "checkpoint_every" => tr.checkpoint_every.to_string(),
            "adam_beta1" => tr.adam.beta1.to_string(),
            "adam_beta2" => tr.adam.beta2.to_string(),
            "adam_eps" => tr.adam.eps.to_string(),
            "split_seconds" => self.split_seconds.to_string(),
            "max_text" => inf.max_text.to_string(),
            "max_frames" => inf.max_frames.to_string(),
            "temperature" => inf.temperature.to_string(),
            "silence_frames" => inf.silence_frames.to_string(),
            "silence_margin" => inf.silence_margin.to_string(),
            "griffin_lim_iterations" => inf.griffin_lim_iterations.to_string(),
            _ => return None,
        })
    }

    /// Applies every entry of `kv` in key order.
    pub fn apply(&mut self, kv: &BTreeMap<String, String>) -> Result<()> {
        for (k, v) in kv {
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply(&parse_kv(text)?)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text).map_err(|e| match e {
            Error::Format { what, detail } => Error::Format {
                what,
                detail: format!("{}: {detail}", path.display()),
            },
            other => other,
        })
    }

    pub fn to_text(&self) -> String {
        KEYS.iter()
            .map(|k| format!("{k}={}\n", self.get(k).expect("every listed key is readable")))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.frontend.validate()?;
        self.augment.validate()?;
        self.train.validate()?;
        if self.model.encoder.input_mels != self.frontend.mel_channels
            || self.model.decoder.output_mels != self.frontend.mel_channels
        {
            return Err(Error::invalid("model mel width differs from mel_channels"));
        }
        if !(self.split_seconds > 0.0) {
            return Err(Error::invalid("split_seconds must be positive"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::ObjectiveMode;

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.set("continuation_loss_weight", "0.25").unwrap();
        cfg.set("conv_kernel_size", "(5, 3)").unwrap();
        cfg.set("objective_mode", "no_delta").unwrap();
        let back = RunConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(back.to_text(), cfg.to_text());
        assert_eq!(back.train.lambda_r, 0.25);
        assert_eq!(back.model.encoder.conv_kernel, (5, 3));
        assert_eq!(back.train.mode, ObjectiveMode::NoDelta);
        assert_eq!(KEYS.len(), cfg.to_text().lines().count());
    }

    #[test]
    fn table_names_are_accepted() {
        let cfg = RunConfig::from_text(
            "# desk scale\nmel_channels=64\nframe_step_ms=12.5\ncontinuation_loss_weight=0.1\nderivative_loss_order=3\n",
        )
        .unwrap();
        assert_eq!(cfg.frontend.mel_channels, 64);
        assert_eq!(cfg.model.encoder.input_mels, 64);
        assert_eq!(cfg.model.decoder.output_mels, 64);
        cfg.validate().unwrap();
    }

    #[test]
    fn errors_name_the_key() {
        let e = RunConfig::from_text("bogus_key=1").unwrap_err().to_string();
        assert!(e.contains("bogus_key"), "{e}");
        let e = RunConfig::from_text("batch_size=many").unwrap_err().to_string();
        assert!(e.contains("batch_size"), "{e}");
        assert!(RunConfig::from_text("no equals sign").is_err());
    }
}
