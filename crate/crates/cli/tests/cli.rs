use std::path::Path;
use std::process::{Command, Output};

const SMALL: &[&str] = &[
    "--set",
    "conformer_dims=16",
    "--set",
    "transformer_dim=32",
    "--set",
    "hidden_dims=64",
    "--set",
    "batch_size=2",
    "--set",
    "mel_channels=32",
];

fn speechcont(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_speechcont"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = speechcont(args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn stderr_of_failure(args: &[&str]) -> String {
    let out = speechcont(args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    String::from_utf8(out.stderr).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path) -> std::path::PathBuf {
    let data = dir.join("data");
    ok(&["synth-data", "--seed", "3", "--out", p(&data), "--n-utts", "3", "--symbols", "14"]);
    data.join("manifest.tsv")
}

fn train(manifest: &Path, out: &Path, extra: &[&str]) -> String {
    let mut args = vec!["train", "--seed", "1", "--manifest", p(manifest), "--out", p(out), "--max-steps", "3"];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(extra);
    ok(&args)
}

#[test]
fn train_infer_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path());
    let run = dir.path().join("run");
    train(&manifest, &run, &["--set", "checkpoint_every=2"]);
    for f in ["metrics.csv", "config.txt", "vocab.txt", "last.bin", "ckpt_0000002.bin", "ckpt_0000003.bin"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let metrics = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().next(), Some("step,ce,recon_s,recon_f,recon_t,total,lr,wall_ms"));
    assert_eq!(metrics.lines().count(), 4);

    let wav = std::fs::read_dir(dir.path().join("data"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.extension().is_some_and(|e| e == "wav"))
        .unwrap();
    let prefix = dir.path().join("cont");
    let stdout = ok(&[
        "infer",
        "--checkpoint",
        p(&run.join("last.bin")),
        "--prompt",
        p(&wav),
        "--out",
        p(&prefix),
        "--max-frames",
        "12",
        "--max-text",
        "6",
    ]);
    assert!(stdout.contains("transcript:"));
    for ext in ["txt", "mel", "wav"] {
        assert!(dir.path().join(format!("cont.{ext}")).exists(), "missing .{ext}");
    }

    let reference = dir.path().join("ref");
    train(&manifest, &reference, &["--mode", "lm_only"]);
    let report = dir.path().join("report.txt");
    ok(&[
        "eval",
        "--checkpoint",
        p(&run.join("last.bin")),
        "--reference",
        p(&reference.join("last.bin")),
        "--manifest",
        p(&manifest),
        "--out",
        p(&report),
        "--set",
        "max_text=6",
        "--set",
        "max_frames=8",
    ]);
    let text = std::fs::read_to_string(report).unwrap();
    for key in ["proxy_token_accuracy=", "proxy_log_perplexity=", "proxy_spectral_similarity=", "n_items=3"] {
        assert!(text.contains(key), "{key} missing from {text}");
    }
}

#[test]
fn deterministic_runs_write_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        train(&manifest, out, &["--deterministic", "--precision", "f64"]);
    }
    for f in ["metrics.csv", "last.bin"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn short_prompt_is_rejected_with_the_rule() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path());
    let run = dir.path().join("run");
    train(&manifest, &run, &[]);
    let wav = dir.path().join("short.wav");
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: 16_000,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(&wav, spec).unwrap();
    for _ in 0..16_000 {
        w.write_sample(0i16).unwrap();
    }
    w.finalize().unwrap();
    let err = stderr_of_failure(&[
        "infer",
        "--checkpoint",
        p(&run.join("last.bin")),
        "--prompt",
        p(&wav),
        "--out",
        p(&dir.path().join("x")),
    ]);
    assert!(err.contains("at least 3 s"), "{err}");
}

#[test]
fn bad_inputs_name_the_offending_argument() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path());
    let out = dir.path().join("x");
    let err = stderr_of_failure(&["train", "--seed", "1", "--manifest", p(&manifest), "--out", p(&out), "--mode", "nope"]);
    assert!(err.contains("--mode") && err.contains("nope"), "{err}");
    let err = stderr_of_failure(&["train", "--seed", "1", "--manifest", p(&manifest), "--out", p(&out), "--set", "no_such_key=1"]);
    assert!(err.contains("no_such_key"), "{err}");
    let err = stderr_of_failure(&["train", "--seed", "1", "--manifest", p(&dir.path().join("missing.tsv")), "--out", p(&out)]);
    assert!(err.contains("--manifest"), "{err}");
    let err = stderr_of_failure(&["infer", "--checkpoint", p(&manifest), "--prompt", p(&manifest), "--out", p(&out)]);
    assert!(err.contains("--checkpoint"), "{err}");
}

#[test]
fn grad_check_passes() {
    let stdout = ok(&["grad-check", "--seed", "2"]);
    assert!(stdout.contains("all passed"), "{stdout}");
    assert!(!stdout.contains("FAIL"));
}

#[test]
fn ablate_tabulates_each_mode() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path());
    let out = dir.path().join("abl");
    let mut args = vec![
        "ablate",
        "--seed",
        "1",
        "--manifest",
        p(&manifest),
        "--out",
        p(&out),
        "--max-steps",
        "2",
        "--modes",
        "full,no_ce",
        "--set",
        "max_text=6",
    ];
    args.extend_from_slice(SMALL);
    ok(&args);
    let table = std::fs::read_to_string(out.join("ablation.tsv")).unwrap();
    let rows: Vec<&str> = table.lines().collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[1].starts_with("full\t") && rows[2].starts_with("no_ce\t"));
}
