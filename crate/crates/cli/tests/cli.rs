use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &str = r#"
[stage1]
epochs = 2
lr = 0.001
weight_decay = 0.0001
batch_size = 64

[stage2]
epochs = 2
lr = 0.001
weight_decay = 0.0001
batch_size = 64

[vit]
image_size = 32
patch_size = 8
channels = 3
depth = 1
embed_dim = 16
heads = 2
mlp_ratio = 2
embed_out = 16

[text]
vocab_size = 256
width = 16
depth = 1
heads = 2
mlp_ratio = 2
max_len = 77
embed_out = 16
seed = 32327
"#;

fn dval(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dval")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A generated benchmark plus a small training config. The config keeps the
/// mandatory `[db]` section of the defaults and overrides the model size.
fn workspace() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = dval(&["generate", "--out", s(&data)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let defaults = String::from_utf8(dval(&["default-config"]).stdout).unwrap();
    let mut cfg: toml::Table = defaults.parse().unwrap();
    for (k, v) in SMALL.parse::<toml::Table>().unwrap() {
        cfg.insert(k, v);
    }
    let cfg_path = dir.path().join("small.toml");
    std::fs::write(&cfg_path, toml::to_string(&cfg).unwrap()).unwrap();
    (dir, cfg_path)
}

#[test]
fn generate_is_deterministic_and_manifested() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        assert_eq!(code(&dval(&["generate", "--out", s(d), "--seed", "5"])), 0);
    }
    for f in ["train.dvds", "test.dvds", "stats.json", "spec.toml"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let man: serde_json::Value = serde_json::from_slice(&std::fs::read(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(man["seed"], 5);
    let outputs = man["outputs"].as_array().unwrap();
    assert_eq!(outputs.len(), 4);
    assert!(outputs.iter().all(|o| o["sha256"].as_str().unwrap().len() == 64));

    let c = dir.path().join("c");
    dval(&["generate", "--out", s(&c), "--seed", "6"]);
    assert_ne!(std::fs::read(a.join("train.dvds")).unwrap(), std::fs::read(c.join("train.dvds")).unwrap());
}

#[test]
fn usage_errors_exit_two() {
    let (dir, cfg) = workspace();
    let data = dir.path().join("data");
    let out = dval(&["train", "--stage", "2", "--data", s(&data), "--config", s(&cfg)]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("stage-1"), "{}", stderr(&out));

    let out = dval(&["train", "--stage", "1", "--data", s(&data), "--config", s(&cfg), "--alpha", "1.5"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("alpha"), "{}", stderr(&out));

    let out = dval(&["sweep", "--param", "k", "--values", "4,99", "--data", s(&data), "--out", "x.csv"]);
    assert_eq!(code(&out), 2);
    assert!(!Path::new("x.csv").exists());

    let out = dval(&["gradcheck", "--module", "nonsense", "--manifest", s(&dir.path().join("m.json"))]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("pipeline"), "{}", stderr(&out));
}

#[test]
fn format_errors_exit_three() {
    let (dir, _) = workspace();
    let data = dir.path().join("data");
    let out = dval(&["eval", "--ckpt", s(&dir.path().join("missing.dvck")), "--data", s(&data), "--report", "r"]);
    assert_eq!(code(&out), 3);
    assert!(stderr(&out).contains("missing.dvck"));

    let mut bytes = std::fs::read(data.join("test.dvds")).unwrap();
    let n = bytes.len();
    bytes[n / 3] ^= 1;
    let bad = dir.path().join("bad.dvds");
    std::fs::write(&bad, bytes).unwrap();
    let preds = dir.path().join("p.txt");
    std::fs::write(&preds, "0 0 0 0 0 0 0 0 0 0 0 0 0\n").unwrap();
    let out = dval(&["score", "--predictions", s(&preds), "--labels", s(&bad), "--counts-from", s(&data.join("train.dvds"))]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
}

#[test]
fn gradcheck_passes_and_negative_control_exits_five() {
    let dir = tempfile::tempdir().unwrap();
    let man = dir.path().join("gc.json");
    let out = dval(&["gradcheck", "--trials", "2", "--manifest", s(&man)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.matches("PASS").count(), 10);
    assert!(text.contains("wrong gradient detected"));
    assert!(man.exists());

    let out = dval(&["gradcheck", "--module", "broken-square", "--trials", "2", "--manifest", s(&man)]);
    assert_eq!(code(&out), 5);
    assert!(String::from_utf8(out.stdout).unwrap().contains("FAIL"));
}

#[test]
fn train_resume_eval_and_score_agree() {
    let (dir, cfg) = workspace();
    let data = dir.path().join("data");
    let p = |f: &str| dir.path().join(f);
    let train = |extra: &[&str]| {
        let mut args = vec!["train", "--data", s(&data), "--config", s(&cfg)];
        args.extend_from_slice(extra);
        let out = dval(&args);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    };

    train(&["--stage", "1", "--out", s(&p("s1.dvck"))]);
    train(&["--stage", "1", "--out", s(&p("half.dvck")), "--stop-at-step", "7"]);
    train(&["--stage", "1", "--resume", s(&p("half.dvck")), "--out", s(&p("s1b.dvck"))]);
    assert_eq!(std::fs::read(p("s1.dvck")).unwrap(), std::fs::read(p("s1b.dvck")).unwrap());

    // A half-finished stage 1 cannot seed stage 2.
    let out = dval(&["train", "--stage", "2", "--data", s(&data), "--resume", s(&p("half.dvck"))]);
    assert_eq!(code(&out), 2);

    let out = dval(&["train", "--stage", "1", "--data", s(&data), "--resume", s(&p("half.dvck")), "--seed", "9"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("mismatch"), "{}", stderr(&out));

    train(&["--stage", "2", "--resume", s(&p("s1.dvck")), "--out", s(&p("s2.dvck"))]);
    let man: serde_json::Value =
        serde_json::from_slice(&std::fs::read(p("s2.dvck.manifest.json")).unwrap()).unwrap();
    assert_eq!(man["inputs"].as_array().unwrap().len(), 3);
    let log = std::fs::read_to_string(p("s2.dvck.log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2 * 611usize.div_ceil(64));

    let out = dval(&[
        "eval", "--ckpt", s(&p("s2.dvck")), "--data", s(&data), "--report", s(&p("eval.txt")),
        "--predictions", s(&p("pred.txt")),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let out = dval(&[
        "score", "--predictions", s(&p("pred.txt")), "--labels", s(&data.join("test.dvds")),
        "--report", s(&p("score.txt")),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(std::fs::read(p("eval.txt")).unwrap(), std::fs::read(p("score.txt")).unwrap());
    assert_eq!(std::fs::read(p("eval.json")).unwrap(), std::fs::read(p("score.json")).unwrap());

    // Shuffled rows score identically; a NaN is a numeric failure.
    let text = std::fs::read_to_string(p("pred.txt")).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    lines.reverse();
    std::fs::write(p("rev.txt"), lines.join("\n")).unwrap();
    dval(&["score", "--predictions", s(&p("rev.txt")), "--labels", s(&data.join("test.dvds")), "--report", s(&p("rev.report"))]);
    assert_eq!(std::fs::read(p("eval.json")).unwrap(), std::fs::read(p("rev.json")).unwrap());

    let first = lines.last().unwrap().to_string();
    let mut fields: Vec<&str> = first.split(' ').collect();
    fields[3] = "NaN";
    let nan_line = fields.join(" ");
    *lines.last_mut().unwrap() = &nan_line;
    std::fs::write(p("nan.txt"), lines.join("\n")).unwrap();
    let out = dval(&["score", "--predictions", s(&p("nan.txt")), "--labels", s(&data.join("test.dvds"))]);
    assert_eq!(code(&out), 4, "{}", stderr(&out));
}

#[test]
fn sweep_writes_one_row_per_value() {
    let (dir, cfg) = workspace();
    let data = dir.path().join("data");
    let csv = dir.path().join("alpha.csv");
    let out = dval(&[
        "sweep", "--param", "alpha", "--values", "0.0,1.0", "--data", s(&data), "--out", s(&csv), "--config", s(&cfg),
        "--stage1-epochs", "1", "--stage2-epochs", "1",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = std::fs::read_to_string(&csv).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[1].starts_with("alpha,0.0,"));
    assert!(rows[2].starts_with("alpha,1.0,"));
    assert!(csv.with_extension("csv.manifest.json").exists());
}
