use std::path::Path;
use std::process::{Command, Output};

fn htp(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_htp"))
        .args(args)
        .arg("--dir")
        .arg(dir)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) {
    let o = htp(dir, args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
}

/// A tiny configuration so the whole pipeline runs in seconds.
const TINY: &str = r#"
[city]
rows = 6
cols = 6
[sim]
count = 60
[rqvae.model]
channels = [16, 16, 16, 32]
d_q = 8
head_dim = 8
codebook_sizes = [4, 8, 16, 32]
road_dim = 16
road_layers = 1
road_ff = 32
head_hidden = 16
[rqvae.train]
epochs = 2
batch_size = 16
lr = 1e-3
[lm.model]
layers = 1
dim = 16
heads = 2
ff_hidden = 32
[lm.train]
epochs = 1
"#;

fn tiny(dir: &Path) -> String {
    let p = dir.join("tiny.toml");
    std::fs::write(&p, TINY).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn synthesis_is_deterministic_per_seed() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [a.path(), b.path()] {
        let cfg = tiny(d);
        ok(d, &["--config", &cfg, "--seed", "7", "synth-city"]);
        ok(d, &["--config", &cfg, "--seed", "7", "synth-data"]);
    }
    for f in ["network.json", "train.jsonl", "test.jsonl"] {
        let x = std::fs::read(a.path().join(f)).unwrap();
        let y = std::fs::read(b.path().join(f)).unwrap();
        assert!(x == y, "{f} differs between identical runs");
    }
}

#[test]
fn full_pipeline_runs_and_generate_honours_count() {
    let d = tempfile::tempdir().unwrap();
    let dir = d.path();
    let cfg = tiny(dir);
    for cmd in ["synth-city", "synth-data", "make-labels", "train-rqvae", "tokenize", "export-sft", "train-lm"] {
        ok(dir, &["--config", &cfg, cmd]);
    }
    ok(dir, &["--config", &cfg, "generate", "--count", "5", "--temperature", "0.8"]);
    let lines = std::fs::read_to_string(dir.join("generated.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 5);
    for cmd in [&["reconstruct"][..], &["evaluate"], &["plot", "--svg"]] {
        let mut args = vec!["--config", cfg.as_str()];
        args.extend_from_slice(cmd);
        ok(dir, &args);
    }
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.join("report.json")).unwrap()).unwrap();
    for k in ["t_dist", "s_dist", "radius", "g_den", "g_pat", "r_den", "r_pat", "pr_dist"] {
        assert!(report[k].is_number(), "{k} missing");
    }
    assert!(dir.join("plots/length_hist.svg").exists());
}

#[test]
fn sft_export_is_stable_across_runs() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [a.path(), b.path()] {
        let cfg = tiny(d);
        for cmd in ["synth-city", "synth-data", "make-labels", "train-rqvae", "tokenize", "export-sft"] {
            ok(d, &["--config", &cfg, "--seed", "3", cmd]);
        }
    }
    let x = std::fs::read(a.path().join("sft_train.jsonl")).unwrap();
    let y = std::fs::read(b.path().join("sft_train.jsonl")).unwrap();
    assert!(x == y);
}

#[test]
fn exit_codes() {
    let d = tempfile::tempdir().unwrap();
    let dir = d.path();
    assert_eq!(htp(dir, &["no-such-command"]).status.code(), Some(1));
    assert_eq!(htp(dir, &["--help"]).status.code(), Some(0));
    // Missing inputs are data errors.
    assert_eq!(htp(dir, &["make-labels"]).status.code(), Some(2));
    let bad = dir.join("bad.toml");
    std::fs::write(&bad, "[city]\nrowz = 3\n").unwrap();
    assert_eq!(htp(dir, &["--config", bad.to_str().unwrap(), "synth-city"]).status.code(), Some(1));
    std::fs::write(dir.join("network.json"), "{ not json").unwrap();
    assert_eq!(htp(dir, &["synth-data"]).status.code(), Some(2));
    assert_eq!(htp(dir, &["generate", "--temperature", "-1"]).status.code(), Some(1));
}

#[test]
fn gradcheck_command_passes() {
    let d = tempfile::tempdir().unwrap();
    let o = htp(d.path(), &["gradcheck"]);
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(o.status.success(), "{out}");
    assert!(out.contains("encoder -> quantizer -> decoder"));
}
