use std::path::Path;
use std::process::Command;

use protohier::data_io::{read_embeddings, read_labels, Format};
use protohier::model::snapshot;
use protohier::prototree::validate_tree;
use protohier::{PrototypeTree, TrainState};

fn protohier(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_protohier"))
        .args(args)
        .env_remove("PROTOHIER_THREADS")
        .output()
        .expect("run binary");
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn ok(args: &[&str]) -> String {
    let (code, stdout, stderr) = protohier(args);
    assert_eq!(code, 0, "{args:?}\nstdout:\n{stdout}\nstderr:\n{stderr}");
    stdout
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn gen_writes_embeddings_and_level_labels() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("data");
    ok(&[
        "gen", "--depth", "2", "--branching", "4,3", "--per-leaf", "50", "--dim", "32", "--seed",
        "1", "--out", p(&out),
    ]);
    let set = read_embeddings(&out.join("embeddings.bin"), Format::Binary).unwrap();
    assert_eq!((set.n(), set.d()), (600, 32));
    let coarse = read_labels(&out.join("labels_level1.bin")).unwrap();
    let fine = read_labels(&out.join("labels_level2.bin")).unwrap();
    assert_eq!(coarse.len(), 600);
    for (c, f) in coarse.iter().zip(&fine) {
        assert_eq!(*c, f / 3);
    }

    // same seed, same bytes
    let again = dir.path().join("again");
    ok(&[
        "gen", "--branching", "4,3", "--per-leaf", "50", "--dim", "32", "--seed", "1", "--out",
        p(&again),
    ]);
    assert_eq!(
        std::fs::read(out.join("embeddings.bin")).unwrap(),
        std::fs::read(again.join("embeddings.bin")).unwrap()
    );
}

#[test]
fn full_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&[
        "gen", "--branching", "2,2", "--per-leaf", "30", "--dim", "8", "--seed", "2", "--out",
        p(&data),
    ]);
    let emb = data.join("embeddings.bin");
    let leaf = data.join("labels_level2.bin");

    let tree_path = dir.path().join("tree.bin");
    let stdout = ok(&["cluster", "--data", p(&emb), "--levels", "4,2", "--seed", "3", "--out", p(&tree_path)]);
    assert!(stdout.contains("paths=4 edges=4"), "{stdout}");
    let tree = PrototypeTree::read(&tree_path).unwrap();
    assert!(validate_tree(&tree).all_pass());
    assert_eq!(tree.bottom_assign.len(), 120);

    let cfg = dir.path().join("run.cfg");
    let ckpt = dir.path().join("run.ckpt");
    let log = dir.path().join("log.csv");
    std::fs::write(
        &cfg,
        format!(
            "# small run\nt1_epochs=1\nt2_epochs=2\nlevel_sizes=4,2\nn_neg=2\nbatch_size=16\nrep_dim=8\nencoder_hidden=16\nhead_hidden=16\ndata={}\n",
            emb.display()
        ),
    )
    .unwrap();
    let (code, stdout, stderr) = protohier(&[
        "train", "--config", p(&cfg), "--checkpoint", p(&ckpt), "--log", p(&log), "--set", "seed=5",
    ]);
    assert_eq!(code, 0, "{stderr}");
    assert!(stdout.contains("refreshes=2"), "{stdout}");
    // the fully resolved config is echoed
    assert!(stderr.contains("seed=5") && stderr.contains("level_sizes=4,2"), "{stderr}");
    let state = TrainState::load(&ckpt).unwrap();
    assert_eq!(state.epoch, 3);
    assert_eq!(state.config.seed, 5);
    assert_eq!(std::fs::read_to_string(&log).unwrap().lines().count(), 4);

    let report = dir.path().join("cluster.csv");
    let stdout = ok(&[
        "eval-cluster", "--ckpt", p(&ckpt), "--data", p(&emb), "--labels", p(&leaf), "--out",
        p(&report),
    ]);
    let csv = std::fs::read_to_string(&report).unwrap();
    assert_eq!(stdout, csv);
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("k,accuracy,nmi,ami"));
    let row: Vec<f64> = lines.next().unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    assert_eq!(row[0], 4.0);
    assert!(row[1..].iter().all(|v| (-1.0..=1.0).contains(v)));

    let knn = dir.path().join("knn.csv");
    ok(&[
        "eval-knn", "--ckpt", p(&ckpt), "--train-data", p(&emb), "--train-labels", p(&leaf),
        "--test-data", p(&emb), "--test-labels", p(&leaf), "--k", "1,5", "--out", p(&knn),
    ]);
    let text = std::fs::read_to_string(&knn).unwrap();
    assert!(text.starts_with("k,accuracy\n1,1\n"), "{text}");

    let exported = dir.path().join("z0.bin");
    ok(&["export", "--ckpt", p(&ckpt), "--data", p(&emb), "--out", p(&exported)]);
    let z = read_embeddings(&exported, Format::Binary).unwrap();
    assert_eq!((z.n(), z.d()), (120, 8));
    let z2 = dir.path().join("z2.bin");
    ok(&["export", "--ckpt", p(&ckpt), "--data", p(&emb), "--level", "2", "--out", p(&z2)]);
    assert_ne!(std::fs::read(&exported).unwrap(), std::fs::read(&z2).unwrap());

    // resume from an interrupted run reproduces the checkpoint
    let part = dir.path().join("part.ckpt");
    ok(&[
        "train", "--config", p(&cfg), "--checkpoint", p(&part), "--set", "seed=5", "--stop-after",
        "1",
    ]);
    ok(&["train", "--resume", p(&part)]);
    let (a, b) = (TrainState::load(&part).unwrap(), TrainState::load(&ckpt).unwrap());
    assert_eq!((a.epoch, a.step), (b.epoch, b.step));
    assert_eq!(snapshot(&a), snapshot(&b));
}

#[test]
fn csv_input() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("points.csv");
    std::fs::write(&csv, "0,0,0\n0,1,0\n10,0,1\n10,1,1\n").unwrap();
    let tree = dir.path().join("t.bin");
    ok(&["cluster", "--data", p(&csv), "--csv-has-labels", "--levels", "2", "--no-normalize", "--out", p(&tree)]);
    let t = PrototypeTree::read(&tree).unwrap();
    assert_eq!(t.bottom_assign[0], t.bottom_assign[1]);
    assert_ne!(t.bottom_assign[0], t.bottom_assign[2]);
    let stdout = ok(&["eval-cluster", "--data", p(&csv), "--csv-has-labels", "--k", "2"]);
    assert!(stdout.contains("\n2,1,1,1\n"), "{stdout}");
}

#[test]
fn grad_check_reports_pass() {
    let stdout = ok(&["grad-check", "--trials", "100"]);
    assert!(stdout.contains("result=PASS"), "{stdout}");
    let (code, stdout, _) = protohier(&["grad-check", "--trials", "3", "--tol", "0"]);
    assert_eq!(code, 1);
    assert!(stdout.contains("result=FAIL"));
}

#[test]
fn ablate_writes_comparison_csv() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["gen", "--branching", "2,2", "--per-leaf", "15", "--dim", "6", "--seed", "4", "--out", p(&data)]);
    let out = dir.path().join("ablate.csv");
    ok(&[
        "ablate",
        "--data", p(&data.join("embeddings.bin")),
        "--labels", p(&data.join("labels_level2.bin")),
        "--test-data", p(&data.join("embeddings.bin")),
        "--test-labels", p(&data.join("labels_level2.bin")),
        "--set", "t1_epochs=1", "--set", "t2_epochs=1", "--set", "batch_size=16",
        "--set", "rep_dim=6", "--set", "encoder_hidden=8", "--set", "head_hidden=8",
        "--set", "level_sizes=4,2",
        "--levels-sweep", "4;4,2", "--n-neg-sweep", "1,3", "--k", "1",
        "--out", p(&out),
    ]);
    let text = std::fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "axis,level_sizes,n_neg,knn_best,cluster_acc,nmi,ami");
    assert_eq!(lines.len(), 5);
    assert!(lines[1].starts_with("levels,4,"));
    assert!(lines[2].starts_with("levels,4 2,"));
    assert!(lines[3].starts_with("n_neg,4 2,1,"));
    assert!(lines[4].starts_with("n_neg,4 2,3,"));
}

#[test]
fn usage_and_runtime_errors() {
    let (code, _, _) = protohier(&["cluster", "--bogus"]);
    assert_eq!(code, 2);
    let (code, _, _) = protohier(&["nonsense"]);
    assert_eq!(code, 2);
    let (code, _, stderr) = protohier(&["cluster", "--data", "/nonexistent/x.bin", "--levels", "2", "--out", "/tmp/x"]);
    assert_eq!(code, 1);
    assert!(stderr.contains("IoError"), "{stderr}");

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.bin");
    std::fs::write(&bad, b"NOTMAGIC\x01\x00\x00\x00").unwrap();
    let (code, _, stderr) = protohier(&["cluster", "--data", p(&bad), "--levels", "2", "--out", p(&dir.path().join("t"))]);
    assert_eq!(code, 1);
    assert!(stderr.contains("FormatError"), "{stderr}");

    let (code, _, stderr) = protohier(&["train", "--set", "nope=1", "--data", p(&bad)]);
    assert_eq!(code, 1);
    assert!(stderr.contains("ConfigError"), "{stderr}");
}

#[test]
fn threads_from_environment() {
    let out = Command::new(env!("CARGO_BIN_EXE_protohier"))
        .args(["grad-check", "--trials", "2"])
        .env("PROTOHIER_THREADS", "2")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("threads=2"));
}
