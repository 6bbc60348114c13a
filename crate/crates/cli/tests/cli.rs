use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data").join(name)
}

fn taxonet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_taxonet"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: Output) -> Output {
    assert!(o.status.success(), "exit {:?}\nstdout:\n{}\nstderr:\n{}", o.status.code(), stdout(&o), stderr(&o));
    o
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn taxonomy_validate_show_and_index() {
    let toy = data("toy.tax");
    let o = ok(taxonet(&["taxonomy", "validate", s(&toy)]));
    assert!(stdout(&o).starts_with("OK, 19 nodes"), "{}", stdout(&o));

    let o = ok(taxonet(&["taxonomy", "show", "--taxonomy", s(&data("covid_subtree.tax"))]));
    let tree = stdout(&o);
    assert!(tree.contains("COVID-19"));
    assert!(tree.contains("└── ") || tree.contains("├── "));
    assert!(tree.contains("Special labels"));

    let o = ok(taxonet(&["taxonomy", "index", s(&toy)]));
    let lines: Vec<String> = stdout(&o).lines().map(String::from).collect();
    assert_eq!(lines.len(), 20);
    assert!(lines[1].starts_with("0\tfindings\t"));
}

#[test]
fn invalid_taxonomy_exits_2_with_line_number() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.tax");
    std::fs::write(&bad, "[findings]\nroot | Root\n  a | A\n  a | Again\n").unwrap();
    let o = taxonet(&["taxonomy", "validate", s(&bad)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 4"), "{}", stderr(&o));
}

fn write_manifest(dir: &Path, rows: &[(&str, &str, &str)]) -> PathBuf {
    let mut text = String::from("image_id,patient_id,path,projection,photometric,labels,split\n");
    for (id, patient, labels) in rows {
        text.push_str(&format!("{id},{patient},{id}.png,PA,MONOCHROME2,{labels},\n"));
    }
    let path = dir.join("manifest.csv");
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn propagate_marks_ancestors_and_counts_columns() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_manifest(
        dir.path(),
        &[("a", "p1", "covid-19"), ("b", "p2", ""), ("c", "p3", "covid-19|tuberculosis")],
    );
    let out = dir.path().join("targets.csv");
    let o = ok(taxonet(&[
        "propagate",
        "--taxonomy",
        s(&data("covid_subtree.tax")),
        "--manifest",
        s(&manifest),
        "--out",
        s(&out),
    ]));
    let text = std::fs::read_to_string(&out).unwrap();
    let mut rows = text.lines().map(|l| l.split(',').map(String::from).collect::<Vec<_>>());
    let header = rows.next().unwrap();
    let rows: Vec<Vec<String>> = rows.collect();
    let col = |id: &str| header.iter().position(|h| h == id).unwrap();
    let on: Vec<&str> = header[1..]
        .iter()
        .filter(|h| rows[0][col(h)] == "1")
        .map(String::as_str)
        .collect();
    assert_eq!(
        on,
        vec!["differential-diagnosis", "pneumonia", "atypical-pneumonia", "viral-pneumonia", "covid-19"]
    );
    assert!(rows[1][1..].iter().all(|v| v == "0"));

    // printed counts equal column sums
    let counts: Vec<(String, usize)> = stdout(&o)
        .lines()
        .skip(1)
        .map(|l| {
            let (id, n) = l.split_once('\t').unwrap();
            (id.to_string(), n.parse().unwrap())
        })
        .collect();
    assert_eq!(counts.len(), header.len() - 1);
    for (id, n) in counts {
        let sum: usize = rows.iter().map(|r| r[col(&id)].parse::<usize>().unwrap()).sum();
        assert_eq!(n, sum, "{id}");
    }
}

#[test]
fn unknown_label_is_rejected_with_row() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_manifest(dir.path(), &[("a", "p1", "covid-19"), ("b", "p2", "made-up")]);
    let o = taxonet(&[
        "propagate",
        "--taxonomy",
        s(&data("covid_subtree.tax")),
        "--manifest",
        s(&manifest),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("row 3"), "{}", stderr(&o));
}

#[test]
fn oracle_predictions_evaluate_to_one() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_manifest(
        dir.path(),
        &[
            ("a", "p1", "covid-19"),
            ("b", "p2", "normal"),
            ("c", "p3", "tuberculosis|consolidation"),
            ("d", "p4", "ground-glass-pattern"),
            ("e", "p5", "lung-metastasis|axilar"),
        ],
    );
    let tax = data("covid_subtree.tax");
    let targets = dir.path().join("targets.csv");
    ok(taxonet(&["propagate", "--taxonomy", s(&tax), "--manifest", s(&manifest), "--out", s(&targets)]));
    let out = dir.path().join("eval");
    let o = ok(taxonet(&[
        "evaluate",
        "--taxonomy",
        s(&tax),
        "--manifest",
        s(&manifest),
        "--predictions",
        s(&targets),
        "--n-boot",
        "200",
        "--out",
        s(&out),
    ]));
    assert!(stdout(&o).contains("# avg_auc=1.000000 std=0.000000"), "{}", stdout(&o));
    let report = std::fs::read_to_string(out.join("report.csv")).unwrap();
    assert!(report.starts_with("node_id,name,support_pos,support_neg,auc,ci_low,ci_high\n"));
    assert!(out.join("plots/roc_all.svg").exists());
    assert!(out.join("roc/covid-19.csv").exists());

    let o = ok(taxonet(&["consistency", "--taxonomy", s(&tax), "--predictions", s(&targets)]));
    assert!(stdout(&o).contains("0 violations"), "{}", stdout(&o));
}

#[test]
fn toy_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let config = data("toy.toml");
    let run = |args: &[&str]| {
        let mut full = vec!["--config", s(&config)];
        full.extend_from_slice(args);
        taxonet(&full)
    };
    let synth = dir.path().join("synth");
    ok(run(&["synth", "--images", "36", "--size", "96", "--out", s(&synth)]));
    let manifest = synth.join("manifest.csv");
    assert!(synth.join("boxes.csv").exists());
    assert!(synth.join("images/syn-000000.png").exists());

    let train_dir = dir.path().join("train");
    ok(run(&["train", "--manifest", s(&manifest), "--epochs", "2", "--out", s(&train_dir)]));
    let ckpt = train_dir.join("model.ckpt");
    assert!(ckpt.exists());
    let history = std::fs::read_to_string(train_dir.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 3);

    let preds = dir.path().join("preds.csv");
    ok(run(&[
        "predict",
        "--manifest",
        s(&manifest),
        "--checkpoint",
        s(&ckpt),
        "--split",
        "test",
        "--out",
        s(&preds),
    ]));
    let first = std::fs::read_to_string(&preds).unwrap();
    assert!(first.starts_with("image_id,findings,"));

    // reruns reproduce predictions byte for byte
    let preds2 = dir.path().join("preds2.csv");
    ok(run(&[
        "predict",
        "--manifest",
        s(&manifest),
        "--checkpoint",
        s(&ckpt),
        "--split",
        "test",
        "--out",
        s(&preds2),
    ]));
    assert_eq!(first, std::fs::read_to_string(&preds2).unwrap());

    let eval = dir.path().join("eval");
    let o = run(&[
        "evaluate",
        "--manifest",
        s(&manifest),
        "--predictions",
        s(&preds),
        "--n-boot",
        "100",
        "--out",
        s(&eval),
    ]);
    // a tiny test split may leave every node degenerate
    assert!(matches!(o.status.code(), Some(0) | Some(5)), "{}", stderr(&o));
    assert!(eval.join("report.csv").exists());

    let explain = dir.path().join("explain");
    let o = ok(run(&[
        "explain",
        "--manifest",
        s(&manifest),
        "--checkpoint",
        s(&ckpt),
        "--nodes",
        "consolidation,infiltrates",
        "--images",
        "syn-000000,syn-000001",
        "--out",
        s(&explain),
    ]));
    assert_eq!(stdout(&o).lines().count(), 4);
    assert!(explain.join("heatmaps/syn-000000__consolidation.png").exists());
    assert!(explain.join("overlays/syn-000001__infiltrates.png").exists());

    // a different taxonomy is refused
    let other = dir.path().join("other.tax");
    std::fs::write(&other, std::fs::read_to_string(data("toy.tax")).unwrap().replace("right-lung", "right")).unwrap();
    let o = run(&[
        "predict",
        "--taxonomy",
        s(&other),
        "--manifest",
        s(&manifest),
        "--checkpoint",
        s(&ckpt),
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn synth_and_split_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let tax = data("toy.tax");
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        ok(taxonet(&["synth", "--taxonomy", s(&tax), "--images", "12", "--size", "48", "--seed", "5", "--out", s(out)]));
    }
    for f in ["manifest.csv", "boxes.csv", "images/syn-000007.png"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let resplit = dir.path().join("resplit.csv");
    let o = ok(taxonet(&[
        "split",
        "--taxonomy",
        s(&tax),
        "--manifest",
        s(&a.join("manifest.csv")),
        "--train",
        "0.5",
        "--val",
        "0.25",
        "--test",
        "0.25",
        "--out",
        s(&resplit),
    ]));
    assert!(stdout(&o).contains("train\t"));
    assert!(resplit.exists());
}
