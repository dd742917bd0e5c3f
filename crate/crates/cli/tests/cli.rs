use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn drvidal(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_drvidal"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn tiny_config(dir: &Path, realizations: usize) -> std::path::PathBuf {
    let path = dir.join("tiny.toml");
    let text = format!(
        r#"
name = "tiny"
realizations = {realizations}
base_seed = 3
[data]
source = "drvidal"
n = 120
[split]
train = 0.6
validation = 0.2
test = 0.2
[gan]
epochs = 2
batch_size = 32
[dr]
epochs = 2
batch_size = 32
"#
    );
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn help_and_version_exit_zero() {
    for flag in ["--help", "--version"] {
        let o = drvidal(&[flag]);
        assert_eq!(o.status.code(), Some(0), "{flag}");
        assert!(!o.stdout.is_empty());
    }
}

#[test]
fn usage_errors_exit_one() {
    let o = drvidal(&["generate", "--process", "cevae", "--n", "10", "--bogus"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    assert_eq!(drvidal(&[]).status.code(), Some(1));
    assert_eq!(drvidal(&["train", "--config", "a", "--preset", "ihdp"]).status.code(), Some(1));
}

#[test]
fn runtime_errors_exit_two() {
    let o = drvidal(&["metrics", "--pred", "/nonexistent/p.csv", "--truth", "/nonexistent/t.csv"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("/nonexistent/t.csv"));
    assert_eq!(drvidal(&["init-config", "--preset", "nope"]).status.code(), Some(2));
}

#[test]
fn generate_cevae_has_five_covariates() {
    let o = drvidal(&["generate", "--process", "cevae", "--n", "5000", "--seed", "1"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(header.iter().filter(|h| h.starts_with('x')).count(), 5);
    assert_eq!(lines.count(), 5000);
}

#[test]
fn generate_is_seeded() {
    let a = stdout(&drvidal(&["generate", "--process", "drvidal", "--n", "50", "--seed", "9"]));
    let b = stdout(&drvidal(&["generate", "--process", "drvidal", "--n", "50", "--seed", "9"]));
    let c = stdout(&drvidal(&["generate", "--process", "drvidal", "--n", "50", "--seed", "10"]));
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn metrics_scores_without_training() {
    let dir = tempfile::tempdir().unwrap();
    let truth = dir.path().join("truth.csv");
    let o = drvidal(&["generate", "--process", "cevae", "--n", "200", "--seed", "2", "--out", truth.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));

    // Predicting the true conditional means gives zero effect error.
    let mut rdr = csv::Reader::from_path(&truth).unwrap();
    let h = rdr.headers().unwrap().clone();
    let col = |n: &str| h.iter().position(|c| c == n).unwrap();
    let (m0, m1) = (col("mu0"), col("mu1"));
    let pred = dir.path().join("pred.csv");
    let mut wr = csv::Writer::from_path(&pred).unwrap();
    wr.write_record(["y0_hat", "y1_hat"]).unwrap();
    for rec in rdr.records() {
        let rec = rec.unwrap();
        wr.write_record([&rec[m0], &rec[m1]]).unwrap();
    }
    wr.flush().unwrap();

    let o = drvidal(&["metrics", "--pred", pred.to_str().unwrap(), "--truth", truth.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let report: toml::Table = stdout(&o).parse().unwrap();
    assert_eq!(report["sqrt_pehe"].as_float(), Some(0.0));
    assert_eq!(report["ate_error"].as_float(), Some(0.0));
    assert!(report.contains_key("factual_mse"));
}

#[test]
fn experiment_writes_deterministic_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), 2);
    let run = |out: &Path, extra: &[&str]| {
        let mut args = vec!["experiment", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
        args.extend_from_slice(extra);
        let o = drvidal(&args);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    };
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run(&a, &[]);
    run(&b, &["--serial"]);
    for f in ["realizations.csv", "summary.toml"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert!(a.join("timing.toml").exists());
    let rows = fs::read_to_string(a.join("realizations.csv")).unwrap();
    assert_eq!(rows.lines().count(), 3);

    // The emitted config reproduces the run.
    let c = dir.path().join("c");
    let o = drvidal(&[
        "experiment",
        "--config",
        a.join("config.toml").to_str().unwrap(),
        "--out",
        c.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(fs::read(a.join("realizations.csv")).unwrap(), fs::read(c.join("realizations.csv")).unwrap());
}

#[test]
fn train_prints_losses_and_writes_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), 1);
    let pred = dir.path().join("pred.csv");
    let quad = dir.path().join("quad.csv");
    let o = drvidal(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--dr-epochs",
        "3",
        "--predictions",
        pred.to_str().unwrap(),
        "--quadruples",
        quad.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    assert_eq!(out.lines().filter(|l| l.starts_with("gan epoch")).count(), 2);
    assert_eq!(out.lines().filter(|l| l.starts_with("dr epoch")).count(), 3);
    assert!(out.contains("[out_sample]"));
    let p = fs::read_to_string(&pred).unwrap();
    assert!(p.starts_with("y0_hat,y1_hat,propensity,ite"));
    assert_eq!(p.lines().count(), 1 + 24);
    assert_eq!(fs::read_to_string(&quad).unwrap().lines().count(), 1 + 72);
}

#[test]
fn dump_latents_covers_every_row() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), 1);
    let o = drvidal(&["dump-latents", "--config", cfg.to_str().unwrap(), "--gan-epochs", "1"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "z_x1,z_x2,z_x3,z_x4,z_x5,z_t1,z_yf1,z_ycf1"
    );
    assert_eq!(lines.count(), 120);
}

#[test]
fn init_config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    for preset in ["ihdp", "jobs", "twins", "synthetic"] {
        let path = dir.path().join(format!("{preset}.toml"));
        let o = drvidal(&["init-config", "--preset", preset, "--out", path.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0));
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.contains(&format!("name = \"{preset}\"")));
        assert!(text.contains("eps_clip"));
    }
}
