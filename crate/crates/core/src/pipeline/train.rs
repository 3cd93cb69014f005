use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::example::{derive_seed, TrainingExample};
use crate::audio::{spec_augment, SpecAugmentPolicy};
use crate::error::{Error, Result};
use crate::losses::{ce_loss_var, l1_plus_l2_var, recon_loss_var, LossBreakdown, ReconTerms, DEFAULT_DELTA_ORDER, DEFAULT_LAMBDA_R};
use crate::model::{decoder_forward, encode_speech, project_to_lm, Checkpoint, Ctx, Model, ParamGroup};
use crate::numeric::{adam_step, lr_schedule, AdamConfig, Graph, OptimizerState, Real, Tensor, Var};

/// Which terms of the objective are trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ObjectiveMode {
    /// Cross-entropy plus weighted reconstruction.
    Full,
    /// Text only, no speech prefix or frames (decoder pretraining).
    LmOnly,
    /// Cross-entropy on transcripts given the speech prefix, no frames.
    AsrOnly,
    /// Reconstruction only; the text region is still present.
    NoCe,
    /// Cross-entropy plus the spectral term only (no delta terms).
    NoDelta,
}

impl ObjectiveMode {
    pub const ALL: [ObjectiveMode; 5] = [
        ObjectiveMode::Full,
        ObjectiveMode::LmOnly,
        ObjectiveMode::AsrOnly,
        ObjectiveMode::NoCe,
        ObjectiveMode::NoDelta,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ObjectiveMode::Full => "full",
            ObjectiveMode::LmOnly => "lm_only",
            ObjectiveMode::AsrOnly => "asr_only",
            ObjectiveMode::NoCe => "no_ce",
            ObjectiveMode::NoDelta => "no_delta",
        }
    }

    fn uses_prefix(self) -> bool {
        self != ObjectiveMode::LmOnly
    }

    fn uses_frames(self) -> bool {
        matches!(self, ObjectiveMode::Full | ObjectiveMode::NoCe | ObjectiveMode::NoDelta)
    }
}

impl fmt::Display for ObjectiveMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ObjectiveMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown objective mode {s:?}")))
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub mode: ObjectiveMode,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub lambda_r: f64,
    /// Highest time-delta order in the reconstruction loss.
    pub delta_order: usize,
    pub seed: u64,
    pub max_steps: u64,
    pub adam: AdamConfig,
    pub checkpoint_every: u64,
    pub out_dir: Option<PathBuf>,
    /// Checkpoint whose encoder and projection initialise this run.
    pub init_encoder: Option<PathBuf>,
    /// Checkpoint whose decoder, embeddings and text head initialise this run.
    pub init_decoder: Option<PathBuf>,
    pub augment: Option<SpecAugmentPolicy>,
    /// Log `wall_ms` as 0 so metrics files are reproducible byte for byte.
    pub deterministic: bool,
    /// Extra metadata stored in every checkpoint.
    pub checkpoint_meta: BTreeMap<String, String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: ObjectiveMode::Full,
            batch_size: 8,
            peak_lr: 3.5e-4,
            warmup_steps: 100,
            lambda_r: DEFAULT_LAMBDA_R,
            delta_order: DEFAULT_DELTA_ORDER,
            seed: 0,
            max_steps: 2000,
            adam: AdamConfig::default(),
            checkpoint_every: 500,
            out_dir: None,
            init_encoder: None,
            init_decoder: None,
            augment: None,
            deterministic: false,
            checkpoint_meta: BTreeMap::new(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.warmup_steps == 0 || self.delta_order == 0 {
            return Err(Error::invalid("batch_size, warmup_steps and delta order must be positive"));
        }
        if !(self.peak_lr > 0.0) || !(self.lambda_r >= 0.0) {
            return Err(Error::invalid("peak_lr must be positive and lambda_r non-negative"));
        }
        Ok(())
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub loss: LossBreakdown,
    pub lr: f64,
    pub wall_ms: u64,
}

pub const METRICS_HEADER: &str = "step,ce,recon_s,recon_f,recon_t,total,lr,wall_ms";

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        let l = &self.loss;
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step, l.ce, l.recon_s, l.recon_f, l.recon_t, l.total, self.lr, self.wall_ms
        )
    }
}

fn non_finite(step: u64, e: Error) -> Error {
    match e {
        Error::NonFinite { op } => Error::NonFiniteLoss {
            step: step as usize,
            component: op,
        },
        other => other,
    }
}

/// Builds the objective for one example on `g`; returns the scalar to
/// minimise and the component values.
pub fn example_loss<T: Real>(
    g: &mut Graph<T>,
    model: &Model<T>,
    ex: &TrainingExample,
    mode: ObjectiveMode,
    lambda_r: f64,
    delta_order: usize,
    ctx: &mut Ctx,
) -> Result<(Var, LossBreakdown)> {
    let prefix = if mode.uses_prefix() {
        let x = g.constant(ex.x_p.to_tensor())?;
        let h = encode_speech(g, model, x, ctx)?;
        Some(project_to_lm(g, model, h)?)
    } else {
        None
    };
    let target = if mode.uses_frames() {
        Some(g.constant(ex.x_c.to_tensor())?)
    } else {
        None
    };
    let out = decoder_forward(g, model, prefix, &ex.text_in, target, ctx)?;
    let ce = ce_loss_var(g, out.text_logits, &ex.targets)?;
    let ce_value = g.value(ce).item()?.to_f64_lossy();
    let lambda = T::c(lambda_r);

    let (total, ce_reported, terms) = match (mode, target, out.frame_preds) {
        (ObjectiveMode::LmOnly | ObjectiveMode::AsrOnly, _, _) => (ce, ce_value, ReconTerms::default()),
        (ObjectiveMode::NoDelta, Some(t), Some(p)) => {
            let s = l1_plus_l2_var(g, t, p)?;
            let sv = g.value(s).item()?.to_f64_lossy();
            let w = g.scale(s, lambda)?;
            (g.add(ce, w)?, ce_value, ReconTerms { s: sv, f: 0.0, t: 0.0, total: sv })
        }
        (ObjectiveMode::Full | ObjectiveMode::NoCe, Some(t), Some(p)) => {
            let r = recon_loss_var(g, t, p, delta_order)?;
            let val = |v: Var, g: &Graph<T>| -> Result<f64> { Ok(g.value(v).item()?.to_f64_lossy()) };
            let terms = ReconTerms {
                s: val(r.s, g)?,
                f: match r.f {
                    Some(f) => val(f, g)?,
                    None => 0.0,
                },
                t: val(r.t, g)?,
                total: val(r.total, g)?,
            };
            let w = g.scale(r.total, lambda)?;
            if mode == ObjectiveMode::NoCe {
                (w, 0.0, terms)
            } else {
                (g.add(ce, w)?, ce_value, terms)
            }
        }
        _ => return Err(Error::invalid(format!("{mode} needs continuation frames"))),
    };
    let mut b = LossBreakdown::new(ce_reported, terms, lambda_r, delta_order);
    // the graph value is what is optimised; keep it authoritative
    b.total = g.value(total).item()?.to_f64_lossy();
    Ok((total, b))
}

/// Mean loss and mean gradient (one tensor per parameter, in store order)
/// over `batch`. Examples are evaluated independently, in parallel when
/// enabled, and reduced in index order.
pub fn batch_gradients<T: Real>(
    model: &Model<T>,
    batch: &[TrainingExample],
    mode: ObjectiveMode,
    lambda_r: f64,
    delta_order: usize,
    dropout_seed: Option<u64>,
) -> Result<(LossBreakdown, Vec<Tensor<T>>)> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let results = crate::par::map_indexed(batch.len(), |i| -> Result<(LossBreakdown, Vec<Option<Tensor<T>>>)> {
        let mut ctx = match dropout_seed {
            Some(s) if model.config.dropout > 0.0 => Ctx::train(model.config.dropout, derive_seed(s, i as u64)),
            _ => Ctx::eval(),
        };
        let mut g = Graph::new();
        let (root, breakdown) = example_loss(&mut g, model, &batch[i], mode, lambda_r, delta_order, &mut ctx)?;
        let grads = g.backward(root)?;
        let mut per_param: Vec<Option<Tensor<T>>> = vec![None; model.params.len()];
        for (id, var) in g.param_vars() {
            per_param[id] = grads.wrt(var).cloned();
        }
        Ok((breakdown, per_param))
    });

    let mut sums: Vec<Tensor<T>> = model.params.tensors().iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
    let mut losses = Vec::with_capacity(batch.len());
    for r in results {
        let (b, grads) = r?;
        losses.push(b);
        for (acc, g) in sums.iter_mut().zip(grads) {
            if let Some(g) = g {
                for (a, &v) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a = *a + v;
                }
            }
        }
    }
    let inv = T::c(1.0 / batch.len() as f64);
    for s in &mut sums {
        s.data_mut().iter_mut().for_each(|v| *v = *v * inv);
    }
    Ok((LossBreakdown::mean(&losses), sums))
}

/// L2 norm of the gradient per parameter group.
pub fn group_gradient_norms<T: Real>(model: &Model<T>, grads: &[Tensor<T>]) -> BTreeMap<ParamGroup, f64> {
    let mut out = BTreeMap::new();
    for group in ParamGroup::ALL {
        let sq: f64 = model
            .params
            .group_ids(group)
            .into_iter()
            .flat_map(|i| grads[i].data().iter().map(|v| v.to_f64_lossy().powi(2)))
            .sum();
        out.insert(group, sq.sqrt());
    }
    out
}

/// Stateful training loop over a fixed set of prepared examples.
pub struct Trainer<'a, T: Real> {
    pub config: TrainConfig,
    pub model: Model<T>,
    pub optimizer: OptimizerState<T>,
    examples: &'a [TrainingExample],
    step: u64,
    order: Vec<usize>,
    cursor: usize,
    shuffle_rng: ChaCha8Rng,
    metrics: Vec<MetricsRow>,
    best: Option<(f64, PathBuf)>,
}

impl<'a, T: Real> Trainer<'a, T> {
    /// Applies any warm starts from `config` to `model`.
    pub fn new(config: TrainConfig, mut model: Model<T>, examples: &'a [TrainingExample]) -> Result<Self> {
        config.validate()?;
        if examples.is_empty() {
            return Err(Error::invalid("training set is empty"));
        }
        if let Some(path) = &config.init_encoder {
            let ck = Checkpoint::<T>::load(path)?;
            model.params.copy_groups_from(&ck.model.params, &[ParamGroup::Encoder, ParamGroup::Projection])?;
        }
        if let Some(path) = &config.init_decoder {
            let ck = Checkpoint::<T>::load(path)?;
            model.params.copy_groups_from(
                &ck.model.params,
                &[ParamGroup::Decoder, ParamGroup::Embedding, ParamGroup::TextHead],
            )?;
        }
        if let Some(dir) = &config.out_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("metrics.csv");
            std::fs::write(&path, format!("{METRICS_HEADER}\n")).map_err(|e| Error::io(&path, e))?;
        }
        let optimizer = OptimizerState::new(model.params.tensors());
        let shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, u64::MAX));
        Ok(Self {
            config,
            model,
            optimizer,
            examples,
            step: 0,
            order: Vec::new(),
            cursor: 0,
            shuffle_rng,
            metrics: Vec::new(),
            best: None,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn metrics(&self) -> &[MetricsRow] {
        &self.metrics
    }

    fn next_batch(&mut self) -> Vec<usize> {
        let n = self.examples.len();
        if self.config.batch_size >= n {
            return (0..n).collect();
        }
        let mut batch = Vec::with_capacity(self.config.batch_size);
        while batch.len() < self.config.batch_size {
            if self.cursor == self.order.len() {
                self.order = (0..n).collect();
                self.order.shuffle(&mut self.shuffle_rng);
                self.cursor = 0;
            }
            batch.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        batch
    }

    /// One optimiser update.
    pub fn step(&mut self) -> Result<MetricsRow> {
        let started = Instant::now();
        let step = self.step + 1;
        let idx = self.next_batch();
        let batch: Vec<TrainingExample> = idx
            .iter()
            .map(|&i| {
                let mut ex = self.examples[i].clone();
                if let Some(policy) = &self.config.augment {
                    let s = derive_seed(self.config.seed, step.wrapping_mul(1 << 20) + i as u64);
                    ex.x_p = spec_augment(&ex.x_p, policy, s)?;
                }
                Ok(ex)
            })
            .collect::<Result<_>>()?;
        let (loss, grads) = batch_gradients(
            &self.model,
            &batch,
            self.config.mode,
            self.config.lambda_r,
            self.config.delta_order,
            Some(derive_seed(self.config.seed ^ 0x5EED, step)),
        )
        .map_err(|e| non_finite(step, e))?;
        for (v, component) in [(loss.ce, "ce"), (loss.recon, "recon"), (loss.total, "total")] {
            if !v.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step: step as usize,
                    component,
                });
            }
        }
        let lr = lr_schedule(step, self.config.warmup_steps, self.config.peak_lr)?;
        let names = self.model.params.names().to_vec();
        adam_step(
            self.model.params.tensors_mut(),
            &grads,
            &mut self.optimizer,
            &names,
            lr,
            &self.config.adam,
        )?;
        self.step = step;
        let row = MetricsRow {
            step,
            loss,
            lr,
            wall_ms: if self.config.deterministic {
                0
            } else {
                started.elapsed().as_millis() as u64
            },
        };
        self.metrics.push(row);
        if let Some(dir) = &self.config.out_dir {
            let path = dir.join("metrics.csv");
            let mut f = std::fs::OpenOptions::new()
                .append(true)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            writeln!(f, "{}", row.to_csv()).map_err(|e| Error::io(&path, e))?;
            if self.config.checkpoint_every > 0 && step % self.config.checkpoint_every == 0 {
                self.save_checkpoint(loss.total)?;
            }
        }
        Ok(row)
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        let mut ck = Checkpoint::new(self.model.clone(), Some(self.optimizer.clone()), self.step);
        ck.meta = self.config.checkpoint_meta.clone();
        ck.meta.insert("mode".into(), self.config.mode.name().into());
        ck
    }

    fn save_checkpoint(&mut self, loss: f64) -> Result<PathBuf> {
        let dir = self
            .config
            .out_dir
            .clone()
            .ok_or_else(|| Error::invalid("no output directory configured"))?;
        let path = dir.join(format!("ckpt_{:07}.bin", self.step));
        self.checkpoint().save(&path)?;
        if self.best.as_ref().is_none_or(|(b, _)| loss < *b) {
            self.best = Some((loss, path.clone()));
            link_best(&dir, &path)?;
        }
        Ok(path)
    }

    /// Runs until `max_steps`, writing the final checkpoint. Returns the
    /// final checkpoint path when an output directory is configured.
    pub fn run(&mut self) -> Result<Option<PathBuf>> {
        while self.step < self.config.max_steps {
            self.step()?;
        }
        self.finish()
    }

    /// Writes the final checkpoint (if not just written) and returns its path.
    pub fn finish(&mut self) -> Result<Option<PathBuf>> {
        if self.config.out_dir.is_none() {
            return Ok(None);
        }
        let dir = self.config.out_dir.clone().expect("checked");
        let path = dir.join(format!("ckpt_{:07}.bin", self.step));
        if !path.exists() {
            let loss = self.metrics.last().map_or(f64::INFINITY, |m| m.loss.total);
            self.save_checkpoint(loss)?;
        }
        let last = dir.join("last.bin");
        std::fs::copy(&path, &last).map_err(|e| Error::io(&last, e))?;
        Ok(Some(path))
    }
}

fn link_best(dir: &Path, target: &Path) -> Result<()> {
    let link = dir.join("best.bin");
    if link.symlink_metadata().is_ok() {
        std::fs::remove_file(&link).map_err(|e| Error::io(&link, e))?;
    }
    let name = target.file_name().expect("checkpoint path has a file name");
    #[cfg(unix)]
    std::os::unix::fs::symlink(name, &link).map_err(|e| Error::io(&link, e))?;
    #[cfg(not(unix))]
    std::fs::copy(dir.join(name), &link).map_err(|e| Error::io(&link, e)).map(|_| ())?;
    Ok(())
}

/// Trains `model` for `config.max_steps` steps.
pub fn train<T: Real>(config: TrainConfig, model: Model<T>, examples: &[TrainingExample]) -> Result<(Model<T>, Vec<MetricsRow>)> {
    let mut t = Trainer::new(config, model, examples)?;
    t.run()?;
    Ok((t.model, t.metrics))
}
