//! End-to-end pipeline checks at the command level: corpus builds
//! round-trip through disk, reruns are byte-identical, training leaves a
//! loadable checkpoint with a well-formed log, and configuration
//! mistakes come back as exit code 2 rather than panics.

mod common;

use common::assert_trees_identical;
use seglab::dataset::{load_corpus, store_corpus};
use seglab::harness::{
    build_corpus, evaluate_checkpoint, run_from, GendataSpec, ReportRow, Split, REPORT_HEADER,
};
use seglab::model::{init_xavier, load_checkpoint, save_checkpoint, Checkpoint, NetConfig};
use std::fs;

fn small_spec(seed: u64) -> GendataSpec {
    let mut spec = GendataSpec::default_three_source(seed);
    spec.n = 30;
    spec
}

#[test]
fn corpus_survives_disk_round_trip_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = build_corpus(&small_spec(11)).unwrap();
    store_corpus(dir.path(), &corpus).unwrap();
    let loaded = load_corpus(dir.path()).unwrap();
    assert_eq!(loaded, corpus);
}

#[test]
fn gendata_command_reruns_byte_identical() {
    let root = tempfile::tempdir().unwrap();
    let d1 = root.path().join("c1");
    let d2 = root.path().join("c2");
    let spec_path = root.path().join("spec.json");
    fs::write(&spec_path, serde_json::to_string(&small_spec(4)).unwrap()).unwrap();
    for out in [&d1, &d2] {
        let code = run_from([
            "seglab",
            "gendata",
            "--spec",
            spec_path.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code, 0);
    }
    assert_trees_identical(&d1, &d2);
}

#[test]
fn train_command_leaves_checkpoint_and_log() {
    let root = tempfile::tempdir().unwrap();
    let corpus_dir = root.path().join("corpus");
    store_corpus(&corpus_dir, &build_corpus(&small_spec(2)).unwrap()).unwrap();
    let ckpt_dir = root.path().join("ckpt");
    let code = run_from([
        "seglab",
        "train",
        "--corpus",
        corpus_dir.to_str().unwrap(),
        "--loss",
        "xent_or",
        "--type",
        "generic",
        "--out",
        ckpt_dir.to_str().unwrap(),
        "--steps",
        "6",
        "--batch",
        "4",
        "--lr",
        "1e-3",
        "--seed",
        "3",
    ]);
    assert_eq!(code, 0);

    let ckpt = load_checkpoint(&ckpt_dir).unwrap();
    assert_eq!(ckpt.class_names.len(), 4);
    assert_eq!(ckpt.loss_label, "xent_or");
    assert_eq!(ckpt.seed, 3);

    let log = fs::read_to_string(ckpt_dir.join("log.csv")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines[0], "step,loss,learning_rate,dice_big_oval,dice_small_oval,dice_bar");
    assert_eq!(lines.len(), 7, "header plus one row per step");
    for (i, line) in lines[1..].iter().enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields[0], (i + 1).to_string());
        let loss: f64 = fields[1].parse().unwrap();
        assert!(loss.is_finite() && loss > 0.0);
    }
}

#[test]
fn specific_training_works_end_to_end() {
    let root = tempfile::tempdir().unwrap();
    let corpus_dir = root.path().join("corpus");
    store_corpus(&corpus_dir, &build_corpus(&small_spec(6)).unwrap()).unwrap();
    let ckpt_dir = root.path().join("ckpt");
    let code = run_from([
        "seglab",
        "train",
        "--corpus",
        corpus_dir.to_str().unwrap(),
        "--loss",
        "xent_unmasked",
        "--type",
        "specific",
        "--source",
        "bar_only",
        "--out",
        ckpt_dir.to_str().unwrap(),
        "--steps",
        "4",
        "--batch",
        "4",
        "--seed",
        "1",
    ]);
    assert_eq!(code, 0);
    let ckpt = load_checkpoint(&ckpt_dir).unwrap();
    assert_eq!(ckpt.class_names, vec!["background".to_string(), "bar".to_string()]);
    assert_eq!(ckpt.net.output_channels, 2);

    // the eval command recognizes the single-organ space and scores it
    // against the corpus' complete reference labels
    let csv_path = root.path().join("rows.csv");
    let code = run_from([
        "seglab",
        "eval",
        "--ckpt",
        ckpt_dir.to_str().unwrap(),
        "--corpus",
        corpus_dir.to_str().unwrap(),
        "--split",
        "test",
        "--out",
        csv_path.to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    let text = fs::read_to_string(&csv_path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], REPORT_HEADER);
    for line in &lines[1..] {
        let row = ReportRow::parse_csv_line(line).unwrap();
        assert_eq!(row.classifier, "specific");
        assert_eq!(row.class_name, "bar");
        assert!((0.0..=1.0).contains(&row.mean_dice));
    }
}

#[test]
fn evaluation_is_pure_given_a_checkpoint() {
    let corpus = build_corpus(&small_spec(9)).unwrap();
    let net = NetConfig::for_classes(4, 17);
    let ckpt = Checkpoint {
        net,
        class_names: corpus.class_names.clone(),
        loss_label: "xent_or".to_string(),
        seed: 17,
        shrink_percent: 80.0,
        params: init_xavier(&net).unwrap(),
    };
    let a = evaluate_checkpoint(&ckpt, &corpus, Split::Test).unwrap();
    let b = evaluate_checkpoint(&ckpt, &corpus, Split::Test).unwrap();
    assert_eq!(a, b);
    for row in &a {
        assert!(row.samples > 0, "zero-count classes are omitted");
    }

    // saving and reloading must not change a single output bit
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(dir.path(), &ckpt).unwrap();
    let loaded = load_checkpoint(dir.path()).unwrap();
    let c = evaluate_checkpoint(&loaded, &corpus, Split::Test).unwrap();
    for (x, y) in a.iter().zip(&c) {
        assert_eq!(x.mean_dice.to_bits(), y.mean_dice.to_bits());
    }
}

#[test]
fn configuration_mistakes_exit_with_code_2() {
    let root = tempfile::tempdir().unwrap();
    let corpus_dir = root.path().join("corpus");
    store_corpus(&corpus_dir, &build_corpus(&small_spec(2)).unwrap()).unwrap();
    let out = root.path().join("out");

    // unknown loss preset
    assert_eq!(
        run_from([
            "seglab", "train",
            "--corpus", corpus_dir.to_str().unwrap(),
            "--loss", "made_up_loss",
            "--type", "generic",
            "--out", out.to_str().unwrap(),
        ]),
        2
    );
    // missing corpus directory
    assert_eq!(
        run_from([
            "seglab", "train",
            "--corpus", root.path().join("nope").to_str().unwrap(),
            "--loss", "xent_or",
            "--type", "generic",
            "--out", out.to_str().unwrap(),
        ]),
        2
    );
    // specific without a source
    assert_eq!(
        run_from([
            "seglab", "train",
            "--corpus", corpus_dir.to_str().unwrap(),
            "--loss", "xent_or",
            "--type", "specific",
            "--out", out.to_str().unwrap(),
        ]),
        2
    );
    // unknown subcommand is a usage error
    assert_eq!(run_from(["seglab", "frobnicate"]), 2);
}
