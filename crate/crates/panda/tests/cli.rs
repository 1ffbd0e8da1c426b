use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use panda::io;
use panda_core::{make_synthetic, AdapterParams, SyntheticSpec};

fn panda(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_panda"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn ok(args: &[&str]) -> String {
    let out = panda(args);
    assert_eq!(
        code(&out),
        0,
        "{args:?}\nstderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let data = make_synthetic(&SyntheticSpec {
            samples_per_class: 50,
            ..SyntheticSpec::default()
        })
        .unwrap();
        io::save_feature_file(&data.aux, dir.path().join("aux.pndf")).unwrap();
        io::save_feature_file(&data.train, dir.path().join("train.pndf")).unwrap();
        io::save_feature_file(&data.test, dir.path().join("test.pndf")).unwrap();
        Self { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn s(&self, name: &str) -> String {
        self.path(name).to_string_lossy().into_owned()
    }

    fn pretrain(&self, out: &str, minibatches: &str) {
        ok(&[
            "pretrain",
            "--aux",
            &self.s("aux.pndf"),
            "--out-dir",
            &self.s(out),
            "--minibatches",
            minibatches,
            "--fisher-minibatches",
            "4",
        ]);
    }
}

fn files_in(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                std::fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    v.sort();
    v
}

#[test]
fn pretrain_adapt_score_eval_pipeline() {
    let f = Fixture::new();
    f.pretrain("pre", "150");
    let psi0 = io::load_adapter(f.path("pre/psi0.pndc")).unwrap();
    let head = io::load_head(f.path("pre/head.pndc")).unwrap();
    let fisher = io::load_fisher(f.path("pre/fisher.pndf")).unwrap();
    assert_eq!(psi0.widths(), &[16, 32, 32, 16]);
    assert_eq!(head.num_classes(), 8);
    assert_eq!(fisher.len(), psi0.param_count());

    ok(&[
        "adapt",
        "--psi0",
        &f.s("pre/psi0.pndc"),
        "--train",
        &f.s("train.pndf"),
        "--fisher",
        &f.s("pre/fisher.pndf"),
        "--out-dir",
        &f.s("bank"),
        "--minibatches",
        "40",
        "--ckpt-interval",
        "10",
    ]);
    let bank = io::load_bank(f.path("bank")).unwrap();
    let idx: Vec<u64> = bank.checkpoints().iter().map(|c| c.minibatch_index).collect();
    assert_eq!(idx, [0, 10, 20, 30, 40]);
    let trace = std::fs::read_to_string(f.path("bank/trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 41);

    for scorer in ["knn", "center", "kmeans", "ses"] {
        let out = f.s(&format!("{scorer}.csv"));
        ok(&[
            "score",
            "--bank",
            &f.s("bank"),
            "--gallery",
            &f.s("train.pndf"),
            "--query",
            &f.s("test.pndf"),
            "--scorer",
            scorer,
            "--out",
            &out,
        ]);
        assert_eq!(io::load_scores(&out).unwrap().len(), 100);
        let text = ok(&["eval", "--scores", &out, "--labels", &f.s("test.pndf")]);
        assert!(text.starts_with("AUC "), "{text}");
    }
}

#[test]
fn zero_minibatch_pretrain_keeps_the_initialisation() {
    let f = Fixture::new();
    f.pretrain("pre", "0");
    let psi0 = io::load_adapter(f.path("pre/psi0.pndc")).unwrap();
    // the adapter is initialised from the run seed offset by ten
    let init = AdapterParams::glorot(&AdapterParams::default_widths(16), 10).unwrap();
    assert_eq!(psi0, init);
}

#[test]
fn identical_reruns_write_identical_banks() {
    let f = Fixture::new();
    f.pretrain("pre", "50");
    for out in ["a", "b"] {
        ok(&[
            "adapt",
            "--mode",
            "unregularized",
            "--psi0",
            &f.s("pre/psi0.pndc"),
            "--train",
            &f.s("train.pndf"),
            "--out-dir",
            &f.s(out),
            "--minibatches",
            "30",
            "--seed",
            "9",
        ]);
    }
    let (a, b) = (files_in(&f.path("a")), files_in(&f.path("b")));
    assert!(a.len() >= 3);
    assert_eq!(a, b);
}

#[test]
fn ses_on_a_single_checkpoint_is_rescaled_knn() {
    let f = Fixture::new();
    f.pretrain("pre", "50");
    let mut scores = Vec::new();
    for scorer in ["knn", "ses"] {
        let out = f.s(&format!("{scorer}.csv"));
        ok(&[
            "score",
            "--checkpoint",
            &f.s("pre/psi0.pndc"),
            "--gallery",
            &f.s("train.pndf"),
            "--query",
            &f.s("test.pndf"),
            "--scorer",
            scorer,
            "--out",
            &out,
        ]);
        scores.push(io::load_scores(&out).unwrap());
    }
    let ratio = scores[1][0] / scores[0][0];
    assert!(ratio > 0.0);
    for (k, s) in scores[0].iter().zip(&scores[1]) {
        assert!((s / k - ratio).abs() < 1e-9 * ratio);
    }
}

#[test]
fn eval_matches_hand_count_and_rejects_empty_scores() {
    let dir = tempfile::tempdir().unwrap();
    let scores = dir.path().join("s.csv");
    let labels = dir.path().join("l.csv");
    std::fs::write(&scores, "index,score\n0,0.1\n1,0.4\n2,0.35\n3,0.8\n").unwrap();
    std::fs::write(&labels, "index,label\n0,0\n1,0\n2,1\n3,1\n").unwrap();
    let text = ok(&[
        "eval",
        "--scores",
        scores.to_str().unwrap(),
        "--labels",
        labels.to_str().unwrap(),
    ]);
    assert_eq!(text.trim(), "AUC 0.750000");

    std::fs::write(&scores, "").unwrap();
    let out = panda(&[
        "eval",
        "--scores",
        scores.to_str().unwrap(),
        "--labels",
        labels.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 1);
}

#[test]
fn missing_input_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = panda(&[
        "pretrain",
        "--aux",
        "/nonexistent/aux.pndf",
        "--out-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent/aux.pndf"));
}

#[test]
fn usage_errors_exit_with_two() {
    let f = Fixture::new();
    // outlier exposure without an exposure set
    let oe = panda(&[
        "adapt",
        "--mode",
        "oe",
        "--psi0",
        "p.pndc",
        "--train",
        &f.s("train.pndf"),
        "--out-dir",
        &f.s("o"),
    ]);
    assert_eq!(code(&oe), 2);
    let scorer = panda(&[
        "score",
        "--checkpoint",
        "p.pndc",
        "--gallery",
        "g.pndf",
        "--query",
        "q.pndf",
        "--out",
        "s.csv",
        "--scorer",
        "nearest",
    ]);
    assert_eq!(code(&scorer), 2);
    assert_eq!(code(&panda(&["frobnicate"])), 2);
    assert_eq!(code(&panda(&[])), 2);
}

#[test]
fn config_file_supplies_flags_and_explicit_flags_win() {
    let f = Fixture::new();
    f.pretrain("pre", "20");
    let cfg = f.path("run.cfg");
    std::fs::write(
        &cfg,
        format!(
            "# scoring run\ncheckpoint = {}\ngallery = {}\nquery = {}\nk = 1\n",
            f.s("pre/psi0.pndc"),
            f.s("train.pndf"),
            f.s("test.pndf")
        ),
    )
    .unwrap();
    let cfg_s = cfg.to_string_lossy().into_owned();
    let run = |out: &str, extra: &[&str]| {
        let mut args = vec!["--config", &cfg_s, "score", "--out", out];
        args.extend_from_slice(extra);
        ok(&args);
        io::load_scores(out).unwrap()
    };
    let (k1, k2, k2_flag) = (f.s("k1.csv"), f.s("k2.csv"), f.s("k2f.csv"));
    let from_file = run(&k1, &[]);
    let overridden = run(&k2_flag, &["--k", "2"]);
    ok(&[
        "score",
        "--checkpoint",
        &f.s("pre/psi0.pndc"),
        "--gallery",
        &f.s("train.pndf"),
        "--query",
        &f.s("test.pndf"),
        "--out",
        &k2,
    ]);
    assert_ne!(from_file, overridden);
    assert_eq!(overridden, io::load_scores(&k2).unwrap());

    std::fs::write(&cfg, "bogus = 3\n").unwrap();
    assert_eq!(code(&panda(&["--config", &cfg_s, "score"])), 2);
    assert_eq!(code(&panda(&["--config", "/nonexistent.cfg", "score"])), 1);
}

#[test]
fn help_lists_defaults() {
    let text = ok(&["adapt", "--help"]);
    for needle in [
        "[default: ewc]",
        "[default: 10000]",
        "[default: 32]",
        "[default: 150000]",
    ] {
        assert!(text.contains(needle), "missing {needle} in\n{text}");
    }
    let score = ok(&["score", "--help"]);
    assert!(score.contains("[default: knn]") && score.contains("[default: 2]"));
}

#[test]
fn synthetic_experiment_writes_a_summary() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("summary.csv");
    let text = ok(&[
        "experiment",
        "--synthetic",
        "--variant",
        "unadapted",
        "--pretrain-minibatches",
        "100",
        "--csv",
        csv.to_str().unwrap(),
    ]);
    assert!(text.contains("average"), "{text}");
    let summary = std::fs::read_to_string(&csv).unwrap();
    assert!(summary.starts_with("class,auc\n0,"));
    assert!(summary.lines().last().unwrap().starts_with("average,"));
}
