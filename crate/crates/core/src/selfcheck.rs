//! Finite-difference validation suite over the differentiable operators
//! and the complete training objective of a small model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audio::{FrontendConfig, Spectrogram};
use crate::error::Result;
use crate::losses::{ce_loss_var, recon_loss_var};
use crate::model::{Ctx, DecoderConfig, EncoderConfig, Model, ModelConfig};
use crate::numeric::{grad_check_many, GradCheckOptions, GradCheckReport, Graph, Tensor, Var};
use crate::pipeline::{example_loss, ObjectiveMode, TrainingExample};
use crate::tokenizer::SOS_ID;

/// Relative error accepted for every case.
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug)]
pub struct SuiteCase {
    pub name: String,
    pub outcome: Result<GradCheckReport>,
}

impl SuiteCase {
    pub fn passed(&self) -> bool {
        matches!(&self.outcome, Ok(r) if r.max_relative_error < TOLERANCE)
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape matches data")
}

/// Two encoder blocks, two decoder layers, decoder width 32.
pub fn toy_model_config(vocab_size: usize, mels: usize) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            conformer_dim: 16,
            num_blocks: 2,
            attn_heads: 2,
            conv_channels: 2,
            input_mels: mels,
            ff_dim: 32,
            ..EncoderConfig::default()
        },
        decoder: DecoderConfig {
            lm_dim: 32,
            num_layers: 2,
            attn_heads: 4,
            hidden_dim: 64,
            vocab_size,
            prenet_bottleneck_dim: 8,
            postnet_hidden_dim: 32,
            max_positions: 64,
            output_mels: mels,
            ..DecoderConfig::default()
        },
        dropout: 0.0,
        init_seed: 0,
    }
}

/// Random log-mel prompt and continuation with a short transcript.
pub fn toy_example(seed: u64, mels: usize, vocab_size: usize) -> TrainingExample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let meta = FrontendConfig::default().meta();
    let mut spec = |frames: usize| {
        let v = (0..frames * mels).map(|_| rng.gen_range(-4.0..2.0)).collect();
        Spectrogram::new(v, frames, mels, meta).expect("finite values")
    };
    let x_p = spec(12);
    let x_c = spec(7);
    let y: Vec<usize> = (0..4).map(|i| 3 + (seed as usize + i) % (vocab_size - 3)).collect();
    let mut text_in = vec![SOS_ID];
    text_in.extend_from_slice(&y);
    let mut targets = y;
    targets.push(crate::tokenizer::EOS_ID);
    TrainingExample {
        x_p,
        x_c,
        text_in,
        targets,
    }
}

/// Checks d(objective)/d(parameters) for every parameter tensor of `model`,
/// sampling `coords_per_tensor` coordinates from each.
pub fn objective_grad_check(
    model: &Model<f64>,
    ex: &TrainingExample,
    mode: ObjectiveMode,
    lambda_r: f64,
    delta_order: usize,
    coords_per_tensor: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let points: Vec<Tensor<f64>> = model.params.tensors().to_vec();
    let opts = GradCheckOptions {
        epsilon: 1e-5,
        max_coords_per_input: Some(coords_per_tensor),
        seed,
    };
    grad_check_many(
        |g, vars| {
            for (id, &v) in vars.iter().enumerate() {
                g.bind_param(id, v)?;
            }
            let (loss, _) = example_loss(g, model, ex, mode, lambda_r, delta_order, &mut Ctx::eval())?;
            Ok(loss)
        },
        &points,
        &opts,
    )
}

type OpCase = (&'static str, Vec<Vec<usize>>, fn(&mut Graph<f64>, &[Var]) -> Result<Var>);

fn weighted(g: &mut Graph<f64>, y: Var) -> Result<Var> {
    // fixed, non-uniform weights so that sums of normalised outputs still
    // carry a gradient
    let shape = g.shape(y).to_vec();
    let n: usize = shape.iter().product();
    let w = Tensor::new(shape, (0..n).map(|i| ((i * 7 % 11) as f64 - 5.0) / 5.0).collect())?;
    let w = g.constant(w)?;
    let p = g.mul(y, w)?;
    g.sum(p)
}

fn op_cases() -> Vec<OpCase> {
    vec![
        ("matmul", vec![vec![3, 4], vec![4, 5]], |g, v| {
            let y = g.matmul(v[0], v[1])?;
            weighted(g, y)
        }),
        ("matmul_t", vec![vec![3, 4], vec![5, 4]], |g, v| {
            let y = g.matmul_t(v[0], v[1])?;
            weighted(g, y)
        }),
        ("add_row/mul_row", vec![vec![3, 4], vec![4], vec![4]], |g, v| {
            let y = g.mul_row(v[0], v[1])?;
            let y = g.add_row(y, v[2])?;
            let y = g.square(y)?;
            g.sum(y)
        }),
        ("gelu", vec![vec![4, 5]], |g, v| {
            let y = g.gelu(v[0])?;
            weighted(g, y)
        }),
        ("sigmoid", vec![vec![4, 5]], |g, v| {
            let y = g.sigmoid(v[0])?;
            weighted(g, y)
        }),
        ("softmax", vec![vec![3, 6]], |g, v| {
            let y = g.softmax(v[0])?;
            weighted(g, y)
        }),
        ("causal_softmax", vec![vec![3, 5]], |g, v| {
            let y = g.causal_softmax(v[0], 2)?;
            weighted(g, y)
        }),
        ("log_softmax/pick", vec![vec![3, 6]], |g, v| {
            let y = g.log_softmax(v[0])?;
            let p = g.pick(y, &[1, 4, 0])?;
            g.sum(p)
        }),
        ("layer_norm", vec![vec![3, 6]], |g, v| {
            let y = g.layer_norm(v[0], 1e-5)?;
            weighted(g, y)
        }),
        ("conv2d", vec![vec![1, 5, 6], vec![2, 1, 3, 3], vec![2]], |g, v| {
            let y = g.conv2d(v[0], v[1], v[2], (2, 2))?;
            weighted(g, y)
        }),
        ("depthwise_conv1d", vec![vec![6, 3], vec![3, 3], vec![3]], |g, v| {
            let y = g.depthwise_conv1d(v[0], v[1], v[2], 1)?;
            weighted(g, y)
        }),
        ("reshape/swap/transpose", vec![vec![2, 3, 4]], |g, v| {
            let y = g.swap_axes01(v[0])?;
            let y = g.reshape(y, &[3, 8])?;
            let y = g.transpose(y)?;
            weighted(g, y)
        }),
        ("slice/concat", vec![vec![4, 3], vec![2, 3]], |g, v| {
            let a = g.slice_rows(v[0], 1, 3)?;
            let c = g.concat_rows(&[a, v[1]])?;
            let d = g.slice_cols(c, 0, 2)?;
            let e = g.concat_cols(&[d, c])?;
            weighted(g, e)
        }),
        ("gather_rows", vec![vec![5, 3]], |g, v| {
            let y = g.gather_rows(v[0], &[4, 0, 4, 2])?;
            weighted(g, y)
        }),
        ("cross_entropy", vec![vec![4, 6]], |g, v| ce_loss_var(g, v[0], &[1, 5, 2, 2])),
        ("reconstruction", vec![vec![6, 5], vec![6, 5]], |g, v| {
            let r = recon_loss_var(g, v[0], v[1], 3)?;
            Ok(r.total)
        }),
    ]
}

/// Every operator case plus the full objective in two modes.
pub fn gradient_suite(seed: u64) -> Vec<SuiteCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (name, shapes, f) in op_cases() {
        let points: Vec<Tensor<f64>> = shapes.iter().map(|s| uniform(&mut rng, s, -1.5, 1.5)).collect();
        let opts = GradCheckOptions {
            seed,
            ..GradCheckOptions::default()
        };
        out.push(SuiteCase {
            name: name.to_string(),
            outcome: grad_check_many(f, &points, &opts),
        });
    }
    let cfg = toy_model_config(9, 8);
    let ex = toy_example(seed, 8, 9);
    for mode in [ObjectiveMode::Full, ObjectiveMode::NoDelta] {
        let outcome = Model::new(cfg).and_then(|m| objective_grad_check(&m, &ex, mode, 0.1, 3, 2, seed));
        out.push(SuiteCase {
            name: format!("objective ({mode})"),
            outcome,
        });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes() {
        for case in gradient_suite(1) {
            assert!(case.passed(), "{}: {:?}", case.name, case.outcome);
        }
    }
}
