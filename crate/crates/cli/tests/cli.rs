use std::path::Path;
use std::process::{Command, Output};

fn kit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_monoses-kit"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write(path: &Path, text: &str) -> String {
    std::fs::write(path, text).unwrap();
    path.display().to_string()
}

#[test]
fn schedule_prints_three_counts() {
    let o = kit(&["schedule", "--t", "15", "--n", "1000000", "--a", "30"]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).trim(), "500000\t250000\t250000");
    let o = kit(&["schedule", "--t", "0", "--n", "10", "--a", "0"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn bleu_brevity_example() {
    let dir = tempfile::tempdir().unwrap();
    let hyp = write(&dir.path().join("hyp"), "a b c d e f g h\n");
    let reference = write(&dir.path().join("ref"), "a b c d e f g h i j\n");
    let o = kit(&["bleu", "--hyp", &hyp, "--ref", &reference]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).trim(), "0.7788");

    let short = write(&dir.path().join("short"), "");
    let o = kit(&["bleu", "--hyp", &short, "--ref", &reference]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(kit(&["schedule", "--t", "x"]).status.code(), Some(1));
    assert_eq!(kit(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(kit(&["--help"]).status.code(), Some(0));
    let o = kit(&["lm", "entropy", "--model", "/nonexistent/lm.arpa", "--input", "/nonexistent/x"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn corpus_lm_and_translate_chain() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n).display().to_string();
    write(
        &dir.path().join("raw"),
        "The cat sat on the mat .\nthe dog sat on the log .\nA cat and a dog .\n",
    );
    let o = kit(&["corpus", "prep", "--input", &p("raw"), "--output", &p("tok"), "--truecase-model", &p("tc")]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let tok = std::fs::read_to_string(p("tok")).unwrap();
    assert!(tok.starts_with("the cat sat on the mat ."), "{tok}");

    let o = kit(&["corpus", "inventory", "--input", &p("tok"), "--output", &p("inv"), "--max-uni", "5", "--max-bi", "2", "--max-tri", "1"]);
    assert!(o.status.success());
    let inv = std::fs::read_to_string(p("inv")).unwrap();
    assert_eq!(inv.lines().count(), 8);

    assert!(kit(&["lm", "train", "--corpus", &p("tok"), "--order", "3", "--out", &p("lm")]).status.success());
    assert!(std::fs::read_to_string(p("lm")).unwrap().contains("\\data\\"));
    let o = kit(&["lm", "entropy", "--model", &p("lm"), "--input", &p("tok")]);
    let h: f64 = stdout(&o).trim().parse().unwrap();
    assert!(h > 0.0 && h < 10.0);
    let o = kit(&["lm", "score", "--model", &p("lm"), "--input", &p("tok")]);
    assert_eq!(stdout(&o).lines().count(), 3);

    write(
        &dir.path().join("table"),
        "cat ||| chat ||| 0.9 0.9 0.9 0.9 1 1 ||| |||\ndog ||| chien ||| 0.9 0.9 0.9 0.9 1 1 ||| |||\n",
    );
    write(&dir.path().join("in"), "cat dog\n");
    let o = kit(&["translate", "--table", &p("table"), "--lm", &p("lm"), "--input", &p("in"), "--nbest", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    assert!(out.lines().all(|l| l.starts_with("0 ||| ") && l.split(" ||| ").count() == 4), "{out}");
}

#[test]
fn pipeline_default_config_parses_back() {
    let dir = tempfile::tempdir().unwrap();
    let o = kit(&["pipeline", "default-config"]);
    assert!(o.status.success());
    let cfg = write(&dir.path().join("run.conf"), &stdout(&o));
    // default corpus paths are empty, so validation fails before any work
    let o = kit(&["pipeline", "run", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!dir.path().join("artifacts").exists());
}

#[test]
fn pipeline_names_missing_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(&dir.path().join("run.conf"), "corpus_e=/nonexistent/mono.e\ncorpus_f=/nonexistent/mono.f\n");
    let o = kit(&["pipeline", "run", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("/nonexistent/mono.e"));
    let o = kit(&["pipeline", "run", "--config", &cfg, "--set", "colour=blue"]);
    assert_eq!(o.status.code(), Some(1));
}
