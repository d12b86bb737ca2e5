//! Build the default synthetic corpus and look inside: three sources,
//! each annotating one structure, everything else relabeled background
//! with the presence record keeping score of what is trustworthy.
//!
//!     cargo run --release --example corpus_tour

use seglab::dataset::{load_corpus, store_corpus};
use seglab::harness::{build_corpus, GendataSpec};
use seglab::Result;

fn main() -> Result<()> {
    let spec = GendataSpec::default_three_source(7);
    let corpus = build_corpus(&spec)?;

    println!("classes: {:?}", corpus.class_names);
    println!(
        "samples: {} train / {} test (split by subject)",
        corpus.train_indices().len(),
        corpus.test_indices().len()
    );
    for src in &corpus.sources {
        let n = corpus.samples.iter().filter(|s| s.source == src.id).count();
        println!("  source {:<16} {:>3} samples", src.id, n);
    }

    // Partiality in action: each sample keeps only its source's class;
    // the full reference survives separately for evaluation only.
    let sample = &corpus.samples[0];
    let visible_fg = sample.label.data.iter().filter(|&&v| v != 0).count();
    let oracle_fg = sample
        .oracle_label
        .as_ref()
        .map(|l| l.data.iter().filter(|&&v| v != 0).count())
        .unwrap_or(0);
    println!("\nsample {} from {}:", sample.id, sample.source);
    let presence: Vec<bool> = (0..sample.presence.len()).map(|c| sample.presence.get(c)).collect();
    println!("  presence: {presence:?}");
    println!("  visible foreground pixels: {visible_fg}");
    println!("  reference foreground pixels: {oracle_fg}");
    println!("  (the difference is structure the source never annotated)");

    // How many training images are empty in their visible labels? These
    // drive the soft-dice failure mode that exclude-empty works around.
    let empties = corpus
        .train_indices()
        .iter()
        .filter(|&&i| !corpus.samples[i].has_foreground())
        .count();
    println!(
        "\nvisible-empty training images: {} of {}",
        empties,
        corpus.train_indices().len()
    );

    // Disk round trip is exact: the manifest pins every array.
    let dir = std::env::temp_dir().join("seglab_corpus_tour");
    store_corpus(&dir, &corpus)?;
    let back = load_corpus(&dir)?;
    println!("\nstored to {} and reloaded: identical = {}", dir.display(), back == corpus);
    Ok(())
}
