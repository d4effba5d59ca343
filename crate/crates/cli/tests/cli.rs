use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_realmlp"));
    c.env_remove("REALMLP_JOBS");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new(task: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let schema = format!("task,{task}\na,num\nb,num\ncolor,cat\ny,target\n");
        fs::write(dir.path().join("schema.csv"), schema).unwrap();
        let mut data = String::from("a,b,color,y\n");
        for i in 0..90 {
            let a = (i as f64 * 0.37).sin();
            let b = (i as f64 * 0.11).cos();
            let color = ["red", "green", "blue"][i % 3];
            let y = if task == "classification" {
                if a + b > 0.3 { "hi" } else { "lo" }.to_string()
            } else {
                format!("{}", 2.0 * a - b + (i % 3) as f64)
            };
            data.push_str(&format!("{a},{b},{color},{y}\n"));
        }
        fs::write(dir.path().join("data.csv"), data).unwrap();
        fs::write(
            dir.path().join("small.cfg"),
            "# quick run\nepochs = 4\nhidden_sizes = 16,16\n",
        )
        .unwrap();
        Fixture { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn train(&self, out: &str, seed: &str) -> String {
        ok(&[
            "train",
            "--data",
            p(&self.path("data.csv")),
            "--schema",
            p(&self.path("schema.csv")),
            "--config",
            p(&self.path("small.cfg")),
            "--seed",
            seed,
            "--out",
            p(&self.path(out)),
        ])
    }
}

#[test]
fn train_is_byte_reproducible() {
    let f = Fixture::new("classification");
    let report = f.train("a.rmlp", "7");
    f.train("b.rmlp", "7");
    assert!(report.starts_with("selected_epoch,"), "{report}");
    assert!(report.contains("test_metric,"));
    assert_eq!(
        fs::read(f.path("a.rmlp")).unwrap(),
        fs::read(f.path("b.rmlp")).unwrap()
    );
    let log = fs::read_to_string(f.path("a.rmlp.epochs.csv")).unwrap();
    assert_eq!(log.lines().next(), Some("epoch,train_loss,val_metric"));
    assert_eq!(log.lines().count(), 5);

    f.train("c.rmlp", "8");
    assert_ne!(
        fs::read(f.path("a.rmlp")).unwrap(),
        fs::read(f.path("c.rmlp")).unwrap()
    );
}

#[test]
fn predict_and_evaluate_classification() {
    let f = Fixture::new("classification");
    f.train("m.rmlp", "1");
    let model = f.path("m.rmlp");
    ok(&[
        "predict",
        "--model",
        p(&model),
        "--data",
        p(&f.path("data.csv")),
        "--out",
        p(&f.path("pred.csv")),
    ]);
    let pred = fs::read_to_string(f.path("pred.csv")).unwrap();
    let mut lines = pred.lines();
    let header = lines.next().unwrap();
    assert!(
        header.starts_with("prob_") && header.ends_with(",label"),
        "{header}"
    );
    assert_eq!(lines.count(), 90);

    for metric in ["err", "auc-ovr", "ce"] {
        let out = ok(&[
            "evaluate",
            "--model",
            p(&model),
            "--data",
            p(&f.path("data.csv")),
            "--metric",
            metric,
        ]);
        let mut lines = out.lines();
        assert_eq!(lines.next(), Some("metric,value"));
        let (name, value) = lines.next().unwrap().split_once(',').unwrap();
        assert_eq!(name, metric);
        let v: f64 = value.parse().unwrap();
        assert!(v.is_finite() && v >= 0.0);
    }
    // nrmse needs a regression model
    let out = run(&[
        "evaluate",
        "--model",
        p(&model),
        "--data",
        p(&f.path("data.csv")),
        "--metric",
        "nrmse",
    ]);
    assert!(!out.status.success());
}

#[test]
fn evaluate_nrmse_of_perfect_predictions_is_zero() {
    let f = Fixture::new("regression");
    f.train("m.rmlp", "3");
    let model = f.path("m.rmlp");
    ok(&[
        "predict",
        "--model",
        p(&model),
        "--data",
        p(&f.path("data.csv")),
        "--out",
        p(&f.path("pred.csv")),
    ]);
    let pred = fs::read_to_string(f.path("pred.csv")).unwrap();
    let values: Vec<&str> = pred.lines().skip(1).collect();

    // replace the targets by the model's own predictions
    let data = fs::read_to_string(f.path("data.csv")).unwrap();
    let mut perfect = String::from("a,b,color,y\n");
    for (line, v) in data.lines().skip(1).zip(&values) {
        let (features, _) = line.rsplit_once(',').unwrap();
        perfect.push_str(&format!("{features},{v}\n"));
    }
    fs::write(f.path("perfect.csv"), perfect).unwrap();
    let out = ok(&[
        "evaluate",
        "--model",
        p(&model),
        "--data",
        p(&f.path("perfect.csv")),
        "--metric",
        "nrmse",
    ]);
    assert_eq!(out, "metric,value\nnrmse,0\n");
}

#[test]
fn bench_sgm_worked_example() {
    let dir = tempfile::tempdir().unwrap();
    let errors = dir.path().join("errors.csv");
    fs::write(
        &errors,
        "method,dataset,split,error\nm,d1,0,0.01\nm,d2,0,0.04\n",
    )
    .unwrap();
    let out = ok(&["bench", "--errors", p(&errors)]);
    assert_eq!(out, "method,sgm\nm,0.0316227766\n");

    let report = dir.path().join("report.csv");
    ok(&[
        "bench",
        "--errors",
        p(&errors),
        "--agg",
        "arith",
        "--out",
        p(&report),
    ]);
    assert_eq!(
        fs::read_to_string(&report).unwrap(),
        "method,mean_error\nm,0.025\n"
    );
}

#[test]
fn bench_with_intervals() {
    let dir = tempfile::tempdir().unwrap();
    let errors = dir.path().join("errors.csv");
    let mut text = String::from("method,dataset,split,error\n");
    for split in 0..4 {
        for (d, base) in [("d1", 0.1), ("d2", 0.3)] {
            text.push_str(&format!("a,{d},{split},{}\n", base + 0.01 * split as f64));
            text.push_str(&format!("b,{d},{split},{}\n", base * 1.5));
        }
    }
    fs::write(&errors, text).unwrap();
    let out = ok(&["bench", "--errors", p(&errors), "--ci"]);
    let mut lines = out.lines();
    assert_eq!(lines.next(), Some("method,sgm,ci_lower,ci_upper"));
    for line in lines {
        let v: Vec<f64> = line
            .split(',')
            .skip(1)
            .map(|s| s.parse().unwrap())
            .collect();
        assert!(v[1] <= v[0] && v[0] <= v[2], "{line}");
    }
}

#[test]
fn ensemble_trains_and_predicts() {
    let f = Fixture::new("classification");
    let dir = f.path("ens");
    let out = ok(&[
        "--jobs",
        "2",
        "ensemble",
        "--data",
        p(&f.path("data.csv")),
        "--schema",
        p(&f.path("schema.csv")),
        "--config",
        p(&f.path("small.cfg")),
        "--members",
        "3",
        "--stopping",
        "joint",
        "--seed",
        "5",
        "--out-dir",
        p(&dir),
    ]);
    let epochs = out.lines().find_map(|l| l.strip_prefix("epochs,")).unwrap();
    let picked: Vec<&str> = epochs.split(' ').collect();
    assert_eq!(picked.len(), 3);
    assert!(
        picked.iter().all(|e| *e == picked[0]),
        "joint stopping shares one epoch: {epochs}"
    );
    assert!(dir.join("ensemble.json").exists() && dir.join("member_2.rmlp").exists());
    ok(&[
        "predict",
        "--model",
        p(&dir),
        "--data",
        p(&f.path("data.csv")),
        "--out",
        p(&f.path("pred.csv")),
    ]);
    assert_eq!(
        fs::read_to_string(f.path("pred.csv"))
            .unwrap()
            .lines()
            .count(),
        91
    );
}

#[test]
fn hpo_writes_trial_log_and_best_model() {
    let f = Fixture::new("regression");
    let dir = f.path("hpo");
    let out = ok(&[
        "hpo",
        "--data",
        p(&f.path("data.csv")),
        "--schema",
        p(&f.path("schema.csv")),
        "--steps",
        "2",
        "--seed",
        "9",
        "--out-dir",
        p(&dir),
    ]);
    assert!(out.starts_with("best_trial,"), "{out}");
    let log = fs::read_to_string(dir.join("trials.csv")).unwrap();
    assert_eq!(log.lines().count(), 3);
    assert!(log.lines().next().unwrap().starts_with("trial,seed,"));
    assert!(dir.join("best.rmlp").exists() && dir.join("best_config.txt").exists());
}

#[test]
fn failures_exit_nonzero_with_a_message() {
    let f = Fixture::new("classification");
    let cases: Vec<Vec<String>> = vec![
        vec![
            "train".into(),
            "--data".into(),
            "/nonexistent.csv".into(),
            "--schema".into(),
            p(&f.path("schema.csv")).into(),
            "--out".into(),
            p(&f.path("x.rmlp")).into(),
        ],
        vec![
            "train".into(),
            "--data".into(),
            p(&f.path("data.csv")).into(),
            "--schema".into(),
            p(&f.path("schema.csv")).into(),
            "--preset".into(),
            "huge".into(),
            "--out".into(),
            p(&f.path("x.rmlp")).into(),
        ],
        vec![
            "predict".into(),
            "--model".into(),
            p(&f.path("schema.csv")).into(),
            "--data".into(),
            p(&f.path("data.csv")).into(),
            "--out".into(),
            p(&f.path("x.csv")).into(),
        ],
        vec![
            "bench".into(),
            "--errors".into(),
            p(&f.path("schema.csv")).into(),
        ],
    ];
    for args in cases {
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        let out = run(&refs);
        assert!(!out.status.success(), "{refs:?} should fail");
        let err = String::from_utf8_lossy(&out.stderr);
        assert!(err.starts_with("error: "), "{refs:?}: {err}");
    }
    fs::write(f.path("bad.cfg"), "no_such_key = 1\n").unwrap();
    let out = run(&[
        "train",
        "--data",
        p(&f.path("data.csv")),
        "--schema",
        p(&f.path("schema.csv")),
        "--config",
        p(&f.path("bad.cfg")),
        "--out",
        p(&f.path("x.rmlp")),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_key"));
}
