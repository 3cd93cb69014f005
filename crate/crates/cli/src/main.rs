use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use speechcont::audio::{prompt_frames, stft_logmel, Waveform};
use speechcont::config::{parse_kv, RunConfig, KEYS};
use speechcont::eval::{continuation_quality, eval_continuations};
use speechcont::model::{Checkpoint, Model};
use speechcont::numeric::Real;
use speechcont::pipeline::{
    infer, load_manifest, prepare_examples, synth_dataset, write_corpus, ObjectiveMode, ToneGrammar, Trainer,
    TrainingExample,
};
use speechcont::selfcheck::{gradient_suite, TOLERANCE};
use speechcont::tokenizer::{build_vocab, Vocabulary};
use speechcont::Error;

#[derive(Parser)]
#[command(name = "speechcont", version, about = "Spoken prompt continuation on log-mel spectrograms")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic tone-grammar corpus and its manifest.
    SynthData(SynthArgs),
    /// Train a model on a manifest.
    Train(TrainArgs),
    /// Continue a spoken prompt: transcript, mel frames and audio.
    Infer(InferArgs),
    /// Score continuations of held-out items.
    Eval(EvalArgs),
    /// Run the finite-difference gradient suite.
    GradCheck(GradCheckArgs),
    /// Train every objective mode on one corpus and tabulate the results.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key (repeatable), e.g. --set batch_size=4.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    /// `base`, then the config file, then each `--set` in order.
    fn resolve_onto(&self, mut cfg: RunConfig) -> Result<RunConfig> {
        if let Some(p) = &self.config {
            let text = fs::read_to_string(p).with_context(|| format!("--config {}", p.display()))?;
            let kv = parse_kv(&text).with_context(|| format!("--config {}", p.display()))?;
            cfg.apply(&kv).with_context(|| format!("--config {}", p.display()))?;
        }
        for o in &self.overrides {
            let (k, v) = o
                .split_once('=')
                .with_context(|| format!("--set {o:?}: expected KEY=VALUE"))?;
            cfg.set(k.trim(), v.trim()).with_context(|| format!("--set {o}"))?;
        }
        Ok(cfg)
    }

    fn resolve(&self) -> Result<RunConfig> {
        self.resolve_onto(RunConfig::default())
    }
}

const CONFIG_META_PREFIX: &str = "config.";

fn config_meta(cfg: &RunConfig) -> BTreeMap<String, String> {
    KEYS.iter()
        .filter_map(|k| cfg.get(k).map(|v| (format!("{CONFIG_META_PREFIX}{k}"), v)))
        .collect()
}

/// The configuration a checkpoint was trained with, or defaults for keys
/// it does not record.
fn config_from_checkpoint(meta: &BTreeMap<String, String>) -> Result<RunConfig> {
    let kv: BTreeMap<String, String> = meta
        .iter()
        .filter_map(|(k, v)| k.strip_prefix(CONFIG_META_PREFIX).map(|k| (k.to_string(), v.clone())))
        .collect();
    let mut cfg = RunConfig::default();
    cfg.apply(&kv).context("checkpoint configuration")?;
    Ok(cfg)
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    seed: u64,
    /// Output directory for WAV files and manifest.tsv.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    n_utts: usize,
    /// Symbols per utterance (each is one tone segment).
    #[arg(long, default_value_t = 16)]
    symbols: usize,
    #[arg(long, default_value_t = 3.0)]
    split_seconds: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Precision {
    F32,
    F64,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    manifest: PathBuf,
    /// Directory for checkpoints and metrics.csv.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    /// Objective mode: full, lm_only, asr_only, no_ce, no_delta.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    max_steps: Option<u64>,
    /// Checkpoint providing the encoder and projection.
    #[arg(long)]
    init_encoder: Option<PathBuf>,
    /// Checkpoint providing the decoder, embeddings and text head.
    #[arg(long)]
    init_decoder: Option<PathBuf>,
    /// Log wall_ms as 0 so that reruns produce identical files.
    #[arg(long)]
    deterministic: bool,
    #[arg(long, value_enum, default_value_t = Precision::F32)]
    precision: Precision,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// WAV file whose first split_seconds are the prompt.
    #[arg(long)]
    prompt: PathBuf,
    /// Output prefix: writes PREFIX.txt, PREFIX.mel and PREFIX.wav.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    max_text: Option<usize>,
    #[arg(long)]
    max_frames: Option<usize>,
    /// 0 for greedy decoding.
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Text-only (lm_only) checkpoint used to score generated transcripts.
    #[arg(long)]
    reference: PathBuf,
    /// Held-out manifest.
    #[arg(long)]
    manifest: PathBuf,
    /// Report file (key=value lines).
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    manifest: PathBuf,
    /// Directory for per-mode runs and ablation.tsv.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    max_steps: Option<u64>,
    /// Comma-separated modes to compare.
    #[arg(long, default_value = "full,no_delta,no_ce")]
    modes: String,
}

fn vocab_meta(vocab: &Vocabulary) -> String {
    vocab.symbols().iter().collect()
}

fn vocab_from_checkpoint(meta: &BTreeMap<String, String>, path: &Path) -> Result<Vocabulary> {
    let symbols = meta
        .get("vocab")
        .with_context(|| format!("{}: checkpoint has no vocabulary", path.display()))?;
    Ok(Vocabulary::from_symbols(symbols.chars())?)
}

fn load_examples(manifest: &Path, cfg: &RunConfig, vocab: Option<&Vocabulary>, seed: u64) -> Result<(Vocabulary, Vec<TrainingExample>)> {
    let loaded = load_manifest(manifest, cfg.split_seconds).with_context(|| format!("--manifest {}", manifest.display()))?;
    if loaded.skipped_short > 0 {
        eprintln!(
            "skipped {} utterance(s) not longer than the {} s prompt",
            loaded.skipped_short, cfg.split_seconds
        );
    }
    if loaded.utterances.is_empty() {
        bail!("{}: no utterance is longer than {} s", manifest.display(), cfg.split_seconds);
    }
    let vocab = match vocab {
        Some(v) => v.clone(),
        None => build_vocab(&loaded.utterances.iter().map(|u| u.transcript.as_str()).collect::<Vec<_>>())?,
    };
    if vocab.symbols().contains(&'\n') {
        bail!("{}: transcripts must not contain line breaks", manifest.display());
    }
    let augment = cfg.augment_enabled.then_some(&cfg.augment);
    let examples = prepare_examples(&loaded.utterances, &cfg.frontend, &vocab, augment, seed)?;
    Ok((vocab, examples))
}

fn synth(args: &SynthArgs) -> Result<()> {
    let grammar = ToneGrammar {
        symbols_per_utterance: args.symbols,
        ..ToneGrammar::default()
    };
    let utts = synth_dataset(args.seed, args.n_utts, &grammar, args.split_seconds)?;
    let manifest = write_corpus(&args.out, &utts)?;
    println!("wrote {} utterances, manifest {}", utts.len(), manifest.display());
    Ok(())
}

fn run_train<T: Real>(args: &TrainArgs, mut cfg: RunConfig) -> Result<()> {
    if let Some(m) = &args.mode {
        cfg.train.mode = m.parse().with_context(|| format!("--mode {m}"))?;
    }
    if let Some(n) = args.max_steps {
        cfg.train.max_steps = n;
    }
    cfg.train.seed = args.seed;
    cfg.train.deterministic = args.deterministic;
    cfg.train.out_dir = Some(args.out.clone());
    cfg.train.init_encoder = args.init_encoder.clone();
    cfg.train.init_decoder = args.init_decoder.clone();
    for p in [&args.init_encoder, &args.init_decoder].into_iter().flatten() {
        if !p.exists() {
            bail!("--init-encoder/--init-decoder: {} does not exist", p.display());
        }
    }
    // the examples are prepared once; augmentation is redrawn every step
    let mut prep = cfg.clone();
    prep.augment_enabled = false;
    let (vocab, examples) = load_examples(&args.manifest, &prep, None, args.seed)?;
    cfg.train.augment = cfg.augment_enabled.then_some(cfg.augment.clone());
    cfg.model.decoder.vocab_size = vocab.size();
    cfg.validate()?;
    cfg.train.checkpoint_meta = config_meta(&cfg);
    cfg.train.checkpoint_meta.insert("vocab".into(), vocab_meta(&vocab));
    fs::create_dir_all(&args.out).with_context(|| format!("--out {}", args.out.display()))?;
    fs::write(args.out.join("config.txt"), cfg.to_text()).with_context(|| format!("--out {}", args.out.display()))?;
    vocab.save(&args.out.join("vocab.txt"))?;

    let model = Model::<T>::new(cfg.model)?;
    println!("{} parameters, {} examples, mode {}", model.param_count(), examples.len(), cfg.train.mode);
    let mut trainer = Trainer::new(cfg.train.clone(), model, &examples)?;
    let every = (cfg.train.max_steps / 20).max(1);
    while trainer.step_count() < cfg.train.max_steps {
        let row = trainer.step()?;
        if row.step % every == 0 || row.step == 1 {
            println!(
                "step {:>6}  ce {:.4}  recon {:.3}  total {:.3}  lr {:.2e}",
                row.step, row.loss.ce, row.loss.recon, row.loss.total, row.lr
            );
        }
    }
    if let Some(path) = trainer.finish()? {
        println!("final checkpoint {}", path.display());
    }
    Ok(())
}

fn run_infer(args: &InferArgs) -> Result<()> {
    let ck = Checkpoint::<f32>::load(&args.checkpoint).with_context(|| format!("--checkpoint {}", args.checkpoint.display()))?;
    let mut cfg = args.config.resolve_onto(config_from_checkpoint(&ck.meta)?)?;
    let vocab = vocab_from_checkpoint(&ck.meta, &args.checkpoint)?;
    let wave = Waveform::read_wav(&args.prompt).with_context(|| format!("--prompt {}", args.prompt.display()))?;
    if wave.duration_s() < cfg.split_seconds {
        return Err(Error::TooShort {
            duration_s: wave.duration_s(),
            required_s: cfg.split_seconds,
        })
        .with_context(|| format!("--prompt {}: prompts must be at least {} s long", args.prompt.display(), cfg.split_seconds));
    }
    let spec = stft_logmel(&wave, &cfg.frontend)?;
    let n = prompt_frames(cfg.split_seconds, cfg.frontend.frame_step_ms).min(spec.n_frames());
    let x_p = spec.slice(0, n)?;
    if let Some(v) = args.max_text {
        cfg.infer.max_text = v;
    }
    if let Some(v) = args.max_frames {
        cfg.infer.max_frames = v;
    }
    if let Some(v) = args.temperature {
        cfg.infer.temperature = v;
    }
    cfg.infer.seed = args.seed;
    let r = infer(&ck.model, &x_p, &cfg.infer, &cfg.frontend)?;
    let text = vocab.decode(&r.tokens)?;
    let with_ext = |ext: &str| {
        let mut p = args.out.clone().into_os_string();
        p.push(ext);
        PathBuf::from(p)
    };
    let txt = with_ext(".txt");
    fs::write(&txt, format!("{text}\n")).with_context(|| format!("--out {}", txt.display()))?;
    r.frames.write_dump(&with_ext(".mel"))?;
    r.wave.write_wav(&with_ext(".wav"))?;
    println!("transcript: {text}");
    println!(
        "{} frames ({:?} / {:?}), outputs at {}.{{txt,mel,wav}}",
        r.frames.n_frames(),
        r.text_stop,
        r.frame_stop,
        args.out.display()
    );
    Ok(())
}

fn run_eval(args: &EvalArgs) -> Result<()> {
    let ck = Checkpoint::<f32>::load(&args.checkpoint).with_context(|| format!("--checkpoint {}", args.checkpoint.display()))?;
    let cfg = args.config.resolve_onto(config_from_checkpoint(&ck.meta)?)?;
    let reference = Checkpoint::<f32>::load(&args.reference).with_context(|| format!("--reference {}", args.reference.display()))?;
    let vocab = vocab_from_checkpoint(&ck.meta, &args.checkpoint)?;
    let mut prep = cfg.clone();
    prep.augment_enabled = false;
    let (_, items) = load_examples(&args.manifest, &prep, Some(&vocab), 0)?;
    let report = eval_continuations(&ck.model, &reference.model, &items, &cfg.infer)?;
    fs::write(&args.out, report.to_kv_text()).with_context(|| format!("--out {}", args.out.display()))?;
    print!("{}", report.to_kv_text());
    Ok(())
}

fn run_grad_check(args: &GradCheckArgs) -> Result<bool> {
    let mut ok = true;
    for case in gradient_suite(args.seed) {
        match &case.outcome {
            Ok(r) => println!(
                "{:<8} {:<28} max rel err {:.2e} over {} coords",
                if case.passed() { "PASS" } else { "FAIL" },
                case.name,
                r.max_relative_error,
                r.coords_checked
            ),
            Err(e) => println!("{:<8} {:<28} {e}", "FAIL", case.name),
        }
        ok &= case.passed();
    }
    println!("tolerance {TOLERANCE:e}: {}", if ok { "all passed" } else { "failures" });
    Ok(ok)
}

fn run_ablate(args: &AblateArgs) -> Result<()> {
    let mut cfg = args.config.resolve()?;
    if let Some(n) = args.max_steps {
        cfg.train.max_steps = n;
    }
    let modes: Vec<ObjectiveMode> = args
        .modes
        .split(',')
        .map(|m| m.trim().parse().with_context(|| format!("--modes {m}")))
        .collect::<Result<_>>()?;
    let mut prep = cfg.clone();
    prep.augment_enabled = false;
    let (vocab, examples) = load_examples(&args.manifest, &prep, None, args.seed)?;
    cfg.model.decoder.vocab_size = vocab.size();
    cfg.validate()?;
    let mut table = String::from("mode\tce\trecon_s\trecon_f\trecon_t\ttotal\ttoken_accuracy\texact_rate\tframe_recon\n");
    for mode in modes {
        let mut run_cfg = cfg.clone();
        run_cfg.train.mode = mode;
        run_cfg.train.seed = args.seed;
        let mut tc = run_cfg.train.clone();
        tc.augment = cfg.augment_enabled.then_some(cfg.augment.clone());
        tc.out_dir = Some(args.out.join(mode.name()));
        tc.checkpoint_meta = config_meta(&run_cfg);
        tc.checkpoint_meta.insert("vocab".into(), vocab_meta(&vocab));
        let mut trainer = Trainer::new(tc, Model::<f32>::new(cfg.model)?, &examples)?;
        trainer.run()?;
        let last = *trainer.metrics().last().expect("at least one step");
        let q = continuation_quality(&trainer.model, &examples, cfg.infer.max_text, cfg.train.delta_order)?;
        let l = last.loss;
        let line = format!(
            "{mode}\t{:.4}\t{:.2}\t{:.2}\t{:.2}\t{:.3}\t{:.4}\t{:.3}\t{:.4}\n",
            l.ce, l.recon_s, l.recon_f, l.recon_t, l.total, q.token_accuracy, q.exact_rate, q.frame_recon
        );
        print!("{line}");
        table.push_str(&line);
    }
    let path = args.out.join("ablation.tsv");
    fs::write(&path, &table).with_context(|| format!("--out {}", args.out.display()))?;
    println!("table written to {}", path.display());
    Ok(())
}

/// Joins the error chain, skipping causes whose text the outer message
/// already ends with.
fn render_chain(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if out.ends_with(&msg) {
            continue;
        }
        if !out.is_empty() {
            out.push_str(": ");
        }
        out.push_str(&msg);
    }
    out
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::SynthData(a) => synth(a).map(|_| true),
        Command::Train(a) => a.config.resolve().and_then(|cfg| match a.precision {
            Precision::F32 => run_train::<f32>(a, cfg),
            Precision::F64 => run_train::<f64>(a, cfg),
        })
        .map(|_| true),
        Command::Infer(a) => run_infer(a).map(|_| true),
        Command::Eval(a) => run_eval(a).map(|_| true),
        Command::GradCheck(a) => run_grad_check(a),
        Command::Ablate(a) => run_ablate(a).map(|_| true),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {}", render_chain(&e));
            ExitCode::FAILURE
        }
    }
}
