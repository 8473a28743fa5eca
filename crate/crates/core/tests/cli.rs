use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use prod_core::retrieval::{evaluate, load_qrels, load_run, Metric};

const TINY: &str = "\
model.hidden_dim = 8
model.vocab_size = 512
warmup.student.steps = 15
warmup.teacher.steps = 15
warmup.retrain.steps = 15
warmup.teacher_hidden_dim = 8
mining.depth = 30
stages.count = 2
stage1.teacher_hidden_dim = 8
stage1.steps = 10
stage2.teacher_hidden_dim = 8
stage2.teacher_steps = 10
stage2.steps = 10
stage2.negatives = 4
dpd.negatives = 4
dpd.steps = 5
dpd.batch_size = 4
dpd.lr = 0.001
";

fn prod(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_prod"))
        .args(["--log-level", "warn", "--threads", "2"])
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tiny_dataset(dir: &Path) {
    let o = prod(&[
        "gen-synthetic",
        "--out",
        s(dir),
        "--clusters",
        "3",
        "--passages-per-cluster",
        "20",
        "--queries-per-cluster",
        "10",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn usage_errors_exit_one_and_help_exits_zero() {
    assert_eq!(prod(&[]).status.code(), Some(1));
    assert_eq!(prod(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(prod(&["pipeline", "--out", "x"]).status.code(), Some(1));
    let help = prod(&["--help"]);
    assert_eq!(help.status.code(), Some(0));
    for cmd in [
        "gen-synthetic",
        "warmup",
        "train-teacher",
        "mine",
        "distill",
        "dpd",
        "pipeline",
        "evaluate",
        "baseline",
    ] {
        assert!(stdout(&help).contains(cmd), "help lists {cmd}");
    }
}

#[test]
fn data_and_config_errors_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let o = prod(&[
        "pipeline",
        "--data",
        s(&tmp.path().join("missing")),
        "--out",
        s(&tmp.path().join("o")),
    ]);
    assert_eq!(o.status.code(), Some(2));

    let data = tmp.path().join("data");
    tiny_dataset(&data);
    let cfg = tmp.path().join("bad.cfg");
    fs::write(&cfg, "seed = 1\nloss.tau = warm\n").unwrap();
    let o = prod(&[
        "pipeline",
        "--config",
        s(&cfg),
        "--data",
        s(&data),
        "--out",
        s(&tmp.path().join("o")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains(":2"), "error names the line: {err}");
}

#[test]
fn synthetic_generation_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    tiny_dataset(&a);
    tiny_dataset(&b);
    for f in [
        "corpus.tsv",
        "queries.train.tsv",
        "queries.dev.tsv",
        "queries.test.tsv",
        "qrels.txt",
    ] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let corpus = fs::read_to_string(a.join("corpus.tsv")).unwrap();
    assert_eq!(corpus.lines().count(), 60);
}

#[test]
fn config_dump_is_idempotent() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("tiny.cfg");
    fs::write(&cfg, TINY).unwrap();
    let first = stdout(&prod(&["config", "--config", s(&cfg)]));
    let dumped = tmp.path().join("dumped.cfg");
    fs::write(&dumped, &first).unwrap();
    let second = stdout(&prod(&["config", "--config", s(&dumped)]));
    assert_eq!(first, second);
    assert!(first.contains("dpd.kprime = 15"));
}

#[test]
fn evaluate_run_file_prints_library_value() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("r.trec");
    let qrels = tmp.path().join("q.txt");
    fs::write(
        &run,
        "q1 Q0 d1 1 3.0 t\nq1 Q0 d2 2 2.0 t\nq1 Q0 d3 3 1.0 t\nq2 Q0 d4 1 5.0 t\nq2 Q0 d1 2 4.0 t\n",
    )
    .unwrap();
    fs::write(&qrels, "q1 0 d2 1\nq1 0 d3 2\nq2 0 d9 1\n").unwrap();
    for metric in ["mrr@10", "recall@2", "ndcg@3", "map@10"] {
        let o = prod(&["evaluate", "--run", s(&run), "--qrels", s(&qrels), "--metric", metric]);
        assert_eq!(o.status.code(), Some(0));
        let printed: f64 = stdout(&o).trim().parse().unwrap();
        let m: Metric = metric.parse().unwrap();
        let want = evaluate(m, &load_run(&run).unwrap(), &load_qrels(&qrels).unwrap())
            .unwrap()
            .value;
        assert_eq!(printed, want, "{metric}");
    }
    let o = prod(&["evaluate", "--run", s(&run), "--qrels", s(&qrels), "--metric", "mrr"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn subcommands_compose_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let p = |name: &str| tmp.path().join(name);
    let data = p("data");
    tiny_dataset(&data);
    let cfg = p("tiny.cfg");
    fs::write(&cfg, TINY).unwrap();
    let common = ["--config", s(&cfg), "--data", s(&data)];
    let run = |cmd: &str, extra: &[&str]| {
        let mut args = vec![cmd];
        args.extend_from_slice(&common);
        args.extend_from_slice(extra);
        let o = prod(&args);
        assert_eq!(
            o.status.code(),
            Some(0),
            "{cmd}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
        stdout(&o)
    };

    let out = run("warmup", &["--out", s(&p("w"))]);
    assert!(out.starts_with("stage=warmup "));
    let student = p("w/student.ckpt");

    run(
        "mine",
        &[
            "--student",
            s(&student),
            "--negatives",
            "4",
            "--out",
            s(&p("groups.tsv")),
        ],
    );
    assert!(fs::read_to_string(p("groups.tsv")).unwrap().lines().count() > 0);

    run(
        "distill",
        &[
            "--stage",
            "1",
            "--student",
            s(&student),
            "--teacher",
            s(&p("w/teacher.ckpt")),
            "--out",
            s(&p("s1")),
        ],
    );
    run(
        "train-teacher",
        &[
            "--student",
            s(&p("s1/student.ckpt")),
            "--stage",
            "2",
            "--out",
            s(&p("ce.ckpt")),
        ],
    );
    let out = run(
        "distill",
        &[
            "--stage",
            "2",
            "--student",
            s(&p("s1/student.ckpt")),
            "--teacher",
            s(&p("ce.ckpt")),
            "--groups",
            s(&p("groups.tsv")),
            "--out",
            s(&p("s2")),
        ],
    );
    assert!(out.contains("mrr@10="));
    run(
        "dpd",
        &[
            "--student",
            s(&p("s2/student.ckpt")),
            "--teacher",
            s(&p("ce.ckpt")),
            "--out",
            s(&p("d")),
        ],
    );
    assert!(p("d/report.txt").exists());
    let out = run(
        "baseline",
        &[
            "--strategy",
            "merge_score",
            "--student",
            s(&student),
            "--teachers",
            &format!("{},{}", s(&p("w/teacher.ckpt")), s(&p("ce.ckpt"))),
            "--out",
            s(&p("b")),
        ],
    );
    assert!(out.starts_with("stage=baseline_merge_score teachers=2"));

    let o = prod(&[
        "evaluate",
        "--model",
        s(&p("s2/student.ckpt")),
        "--data",
        s(&data),
        "--metric",
        "recall@20",
        "--run-out",
        s(&p("dev.trec")),
    ]);
    assert_eq!(o.status.code(), Some(0));
    let printed: f64 = stdout(&o).trim().parse().unwrap();
    let runs = load_run(&p("dev.trec")).unwrap();
    let want = evaluate(Metric::Recall(20), &runs, &load_qrels(&data.join("qrels.txt")).unwrap())
        .unwrap()
        .value;
    assert_eq!(printed, want);

    // A dual-encoder teacher cannot drive the data-progressive iterations.
    let o = prod(&[
        "dpd",
        "--config",
        s(&cfg),
        "--data",
        s(&data),
        "--student",
        s(&student),
        "--teacher",
        s(&student),
        "--out",
        s(&p("x")),
    ]);
    assert_eq!(o.status.code(), Some(2));

    let out = run("pipeline", &["--out", s(&p("full"))]);
    let names: Vec<&str> = out.lines().filter_map(|l| l.split_whitespace().next()).collect();
    assert_eq!(
        &names[..4],
        ["stage=warmup_teacher", "stage=warmup", "stage=stage1", "stage=stage2"]
    );
    assert_eq!(fs::read_to_string(p("full/report.txt")).unwrap(), out);
}
