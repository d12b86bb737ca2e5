//! A miniature experiment grid: generic versus specific at a reduced
//! training-set size, the comparison behind the small-data claim. Every
//! cell gets a seed derived from its grid position, so the grid is
//! reproducible cell by cell.
//!
//! Expect a few minutes of training.
//!
//!     cargo run --release --example shrink_experiment

use seglab::harness::{run_from, ExperimentPlan, RosterEntry};
use seglab::Result;
use std::fs;

fn main() -> Result<()> {
    let root = std::env::temp_dir().join("seglab_shrink_experiment");
    let _ = fs::remove_dir_all(&root);
    fs::create_dir_all(&root).expect("create scratch dir");

    // The full default corpus: deep shrinks of a smaller one starve the
    // per-source batch strata and cells start failing (which the grid
    // records per cell and reports with exit code 4).
    assert_eq!(
        run_from([
            "seglab",
            "gendata",
            "--out",
            root.join("corpus").to_str().unwrap(),
        ]),
        0
    );

    // Shrinks nest: the 20% subset is contained in the 40% subset, so a
    // level sweep varies data volume and nothing else. Levels come from
    // the fixed ladder {80, 40, 20, 10, 5, 2.5}.
    let plan = ExperimentPlan {
        corpus: root.join("corpus"),
        roster: vec![
            RosterEntry {
                classifier: "generic".into(),
                source: None,
                loss: "xent_or".into(),
                exclude_empty: false,
            },
            RosterEntry {
                classifier: "specific".into(),
                source: Some("small_oval_only".into()),
                loss: "xent_unmasked".into(),
                exclude_empty: false,
            },
        ],
        shrink_levels: vec![40.0, 20.0],
        seeds: vec![1],
        out_dir: root.join("grid"),
        max_steps: 250,
        batch_size: 10,
        learning_rate: 1e-3,
    };
    let plan_path = root.join("plan.json");
    fs::write(&plan_path, serde_json::to_string_pretty(&plan).unwrap()).unwrap();
    assert_eq!(
        run_from(["seglab", "experiment", "--plan", plan_path.to_str().unwrap()]),
        0
    );

    println!("\nreport rows:");
    for line in fs::read_to_string(root.join("grid/report.csv")).unwrap().lines() {
        println!("  {line}");
    }
    println!("\nsummary best-per-class block:");
    let summary = fs::read_to_string(root.join("grid/summary.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&summary).unwrap();
    println!("{}", serde_json::to_string_pretty(&v["best_per_class"]).unwrap());
    Ok(())
}
