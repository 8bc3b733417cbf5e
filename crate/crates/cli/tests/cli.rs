use gridsec::fdia::read_campaign;
use std::io::BufReader;
use std::path::Path;
use std::process::{Command, Output};

fn gridsec(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gridsec"))
        .args(args)
        .env_remove("GRIDSEC_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = gridsec(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn missing_case_file_exits_with_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = gridsec(&["gen-data", "--case", "/no/such/case.json", "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("/no/such/case.json"));
}

#[test]
fn unknown_variant_lists_the_valid_ones() {
    let dir = tempfile::tempdir().unwrap();
    let out = gridsec(&["train", "--variant", "cnn", "--corpus", "c.csv", "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("chimera, lstm_ref, mlp"), "{}", stderr(&out));
}

#[test]
fn help_exits_zero() {
    assert_eq!(gridsec(&["--help"]).status.code(), Some(0));
    assert_eq!(gridsec(&[]).status.code(), Some(2));
}

#[test]
fn gen_data_is_byte_identical_on_rerun() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        ok(&["gen-data", "--epochs", "120", "--seed", "3", "--out", p(d.path())]);
    }
    for f in ["corpus.csv", "corpus.json"] {
        let x = std::fs::read(a.path().join(f)).unwrap();
        let y = std::fs::read(b.path().join(f)).unwrap();
        assert!(!x.is_empty());
        assert_eq!(x, y, "{f} differs");
    }
}

#[test]
fn out_dir_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_gridsec"))
        .args(["gen-data", "--epochs", "80"])
        .env("GRIDSEC_OUT_DIR", dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(dir.path().join("corpus.csv").exists());
    assert!(dir.path().join("manifest-gen-data-corpus.json").exists());
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let d = p(dir.path());
    ok(&["gen-data", "--epochs", "80", "--out", d]);
    let cfg = dir.path().join("overlay.json");
    std::fs::write(&cfg, r#"{"hiddn": 4}"#).unwrap();
    let corpus = format!("{d}/corpus.csv");
    let out = gridsec(&["train", "--variant", "mlp", "--corpus", &corpus, "--config", p(&cfg), "--out", d]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("hiddn"), "{}", stderr(&out));
}

#[test]
fn small_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = p(dir.path());
    let corpus = format!("{d}/corpus.csv");
    let model = format!("{d}/mlp.ckpt.json");
    let campaign = format!("{d}/campaign-mlp.jsonl");
    ok(&["gen-data", "--epochs", "200", "--seed", "1", "--out", d]);
    ok(&[
        "train", "--variant", "mlp", "--corpus", &corpus, "--coarse-iterations", "20",
        "--fine-iterations", "20", "--out", d,
    ]);
    assert!(dir.path().join("mlp.log.json").exists());

    // Without a campaign only the attack-free columns are written.
    let table = ok(&["evaluate", "--model", &model, "--corpus", &corpus, "--out", d]);
    let header = table.lines().next().unwrap();
    assert!(header.starts_with("model,"));
    assert!(!header.contains("eps2_a"), "{header}");
    assert_eq!(table.lines().count(), 2);

    // A zero budget leaves every epoch without effect.
    ok(&["attack", "--model", &model, "--corpus", &corpus, "--cap", "0", "--limit", "6", "--out", d]);
    let results = read_campaign(BufReader::new(std::fs::File::open(&campaign).unwrap())).unwrap();
    assert_eq!(results.len(), 6);
    for r in &results {
        assert!(!r.effective);
        assert!(r.a.iter().all(|&v| v == 0.0));
    }
    let table = ok(&[
        "evaluate", "--model", &model, "--campaign", &campaign, "--corpus", &corpus, "--out", d,
    ]);
    assert!(table.lines().next().unwrap().contains("eps2_a"));
    for f in ["metrics.csv", "metrics.json", "histograms.csv", "manifest-evaluate.json"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }

    // Two campaigns for one variant are refused.
    let out = gridsec(&["evaluate", "--model", &model, "--campaign", &campaign, "--campaign", &campaign, "--corpus", &corpus, "--out", d]);
    assert_eq!(out.status.code(), Some(2));
}
