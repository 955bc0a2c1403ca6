use std::fs;
use std::path::{Path, PathBuf};

use hidec_cli::run;

const SAMPLE: &str = "Root\tA\tB\tC\nA\tD\nD\tI\nB\tF\n";

fn p(path: &Path) -> String {
    path.to_str().unwrap().to_string()
}

fn hidec(args: &[&str]) -> i32 {
    run(std::iter::once("hidec").chain(args.iter().copied()))
}

/// Synthetic data plus a tiny trained model under `root`.
fn trained(root: &Path) -> PathBuf {
    let data = root.join("data");
    assert_eq!(hidec(&["synth-data", "--out", &p(&data), "--depth", "2", "--train", "24", "--dev", "6", "--test", "6"]), 0);
    let model = root.join("model");
    let code = hidec(&[
        "train",
        "--taxonomy",
        &p(&data.join("taxonomy.tsv")),
        "--train",
        &p(&data.join("train.jsonl")),
        "--dev",
        &p(&data.join("dev.jsonl")),
        "--epochs",
        "2",
        "--set",
        "d_model=8",
        "--set",
        "ffn_dim=8",
        "--set",
        "embed_dim=8",
        "--set",
        "hidden=8",
        "--out",
        &p(&model),
    ]);
    assert_eq!(code, 0);
    model
}

#[test]
fn usage_errors_exit_two_and_help_exits_zero() {
    assert_eq!(hidec(&["--help"]), 0);
    assert_eq!(hidec(&["--version"]), 0);
    assert_eq!(hidec(&[]), 2);
    assert_eq!(hidec(&["frobnicate"]), 2);
    assert_eq!(hidec(&["train", "--taxonomy", "x"]), 2);
}

#[test]
fn domain_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(hidec(&["taxonomy", "validate", "--taxonomy", &p(&dir.path().join("missing.tsv"))]), 1);
    let bad = dir.path().join("cycle.tsv");
    fs::write(&bad, "A\tB\nB\tA\n").unwrap();
    assert_eq!(hidec(&["taxonomy", "validate", "--taxonomy", &p(&bad)]), 1);
    let good = dir.path().join("t.tsv");
    fs::write(&good, SAMPLE).unwrap();
    assert_eq!(hidec(&["taxonomy", "validate", "--taxonomy", &p(&good)]), 0);
    assert_eq!(hidec(&["codec", "encode", "--taxonomy", &p(&good), "--labels", "Z"]), 1);
    assert_eq!(hidec(&["codec", "decode", "--taxonomy", &p(&good), "--sequence", "(Root(A"]), 1);
    assert_eq!(hidec(&["codec", "encode", "--taxonomy", &p(&good), "--labels", "C,F,I"]), 0);
    assert_eq!(hidec(&["codec", "decode", "--taxonomy", &p(&good), "--sequence", "(Root(C([END])))"]), 0);
}

#[test]
fn bad_training_config_is_rejected_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let tax = dir.path().join("t.tsv");
    fs::write(&tax, SAMPLE).unwrap();
    let train = dir.path().join("train.jsonl");
    fs::write(&train, "{\"text\":\"a b\",\"labels\":[\"C\"]}\n").unwrap();
    let base = ["train", "--taxonomy", &p(&tax), "--train", &p(&train), "--out", &p(&dir.path().join("m"))];
    let with = |extra: &[&str]| hidec(&[&base[..], extra].concat());
    assert_eq!(with(&["--set", "heads=3"]), 1);
    assert_eq!(with(&["--set", "no_such_key=1"]), 1);
    assert_eq!(with(&["--set", "lr"]), 1);
    assert_eq!(with(&["--threshold", "1.5"]), 1);
    assert_eq!(with(&["--replicas", "2"]), 1);
    assert!(!dir.path().join("m").join(hidec_cli::CHECKPOINT).exists());
}

#[test]
fn full_pipeline_writes_manifested_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let model = trained(dir.path());
    let data = dir.path().join("data");
    for f in ["best.ckpt", "train_log.csv", "config.cfg", "manifest.txt"] {
        assert!(model.join(f).is_file(), "{f}");
    }
    let log = fs::read_to_string(model.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 3);

    let pred = dir.path().join("pred");
    let ckpt = p(&model.join("best.ckpt"));
    assert_eq!(hidec(&["predict", "--checkpoint", &ckpt, "--corpus", &p(&data.join("test.jsonl")), "--out", &p(&pred)]), 0);
    let lines: Vec<serde_json::Value> = fs::read_to_string(pred.join("predictions.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 6);
    assert!(lines.iter().all(|v| !v["labels"].as_array().unwrap().is_empty()));

    // a directory resolves to its best checkpoint, and the taxonomy must match
    let eval = dir.path().join("eval");
    let code = hidec(&[
        "evaluate",
        "--checkpoint",
        &p(&model),
        "--corpus",
        &p(&data.join("test.jsonl")),
        "--taxonomy",
        &p(&data.join("taxonomy.tsv")),
        "--out",
        &p(&eval),
    ]);
    assert_eq!(code, 0);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(eval.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["documents"], 6);
    assert!(report["convention"].as_str().unwrap().contains("macro"));
    assert!(fs::read_to_string(eval.join("levels.csv")).unwrap().starts_with("depth,"));

    let other = dir.path().join("other.tsv");
    fs::write(&other, SAMPLE).unwrap();
    let code = hidec(&["evaluate", "--checkpoint", &ckpt, "--corpus", &p(&data.join("test.jsonl")), "--taxonomy", &p(&other)]);
    assert_eq!(code, 1);

    let att = dir.path().join("att");
    let code = hidec(&["inspect-attention", "--checkpoint", &ckpt, "--corpus", &p(&data.join("test.jsonl")), "--gold", "--out", &p(&att)]);
    assert_eq!(code, 0);
    let mut csvs: Vec<String> = fs::read_dir(&att)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.ends_with(".csv"))
        .collect();
    csvs.sort();
    // 2 layers x 2 heads x {self, cross}
    assert_eq!(csvs.len(), 8);
    assert!(csvs.contains(&"layer0_head1_cross.csv".to_string()));

    // every manifest entry matches the file it names
    for out in [&model, &pred, &eval, &att] {
        let manifest = fs::read_to_string(out.join("manifest.txt")).unwrap();
        assert!(!manifest.is_empty());
        for line in manifest.lines() {
            let cols: Vec<&str> = line.split('\t').collect();
            let bytes = fs::read(out.join(cols[0])).unwrap();
            assert_eq!(bytes.len().to_string(), cols[1]);
            assert_eq!(cols[2].len(), 64);
        }
    }
}

#[test]
fn predict_handles_empty_text() {
    let dir = tempfile::tempdir().unwrap();
    let model = trained(dir.path());
    let corpus = dir.path().join("empty.jsonl");
    fs::write(&corpus, "{\"text\":\"\"}\n{\"text\":\"the of and\"}\n").unwrap();
    let out = dir.path().join("pred");
    assert_eq!(hidec(&["predict", "--checkpoint", &p(&model), "--corpus", &p(&corpus), "--out", &p(&out)]), 0);
    let text = fs::read_to_string(out.join("predictions.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 2);
}

#[test]
fn replicas_report_each_seed() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_eq!(hidec(&["synth-data", "--out", &p(&data), "--depth", "2", "--train", "12", "--dev", "4", "--test", "0"]), 0);
    let out = dir.path().join("rep");
    let code = hidec(&[
        "train",
        "--taxonomy",
        &p(&data.join("taxonomy.tsv")),
        "--train",
        &p(&data.join("train.jsonl")),
        "--dev",
        &p(&data.join("dev.jsonl")),
        "--epochs",
        "1",
        "--seed",
        "3",
        "--replicas",
        "2",
        "--set",
        "d_model=8",
        "--set",
        "ffn_dim=8",
        "--out",
        &p(&out),
    ]);
    assert_eq!(code, 0);
    let csv = fs::read_to_string(out.join("replicas.csv")).unwrap();
    assert!(csv.contains("\n0,3,") && csv.contains("\n1,4,"), "{csv}");
    assert!(csv.contains("\nmean,") && csv.contains("\nstd,"));
    assert!(out.join("replica1").join("best.ckpt").is_file());
}
