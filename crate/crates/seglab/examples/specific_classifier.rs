//! Train a class-specific classifier: one source, its one structure
//! against background, annotations taken at face value. The baseline the
//! generic classifier is measured against.
//!
//!     cargo run --release --example specific_classifier

use seglab::dataset::SamplerConfig;
use seglab::harness::{build_corpus, specific_view, GendataSpec};
use seglab::losses::LossConfig;
use seglab::model::{class_dice_report, train, NetConfig, TrainConfig};
use seglab::Result;

fn main() -> Result<()> {
    let mut spec = GendataSpec::default_three_source(7);
    spec.n = 120;
    let corpus = build_corpus(&spec)?;

    // The view keeps only bar_only's samples, relabels its structure to
    // class 1, and declares both remaining classes trusted: within this
    // source the annotations are complete by definition.
    let train_pool: Vec<_> = corpus.train_indices().iter().map(|&i| corpus.samples[i].clone()).collect();
    let test_pool: Vec<_> = corpus.test_indices().iter().map(|&i| corpus.samples[i].clone()).collect();
    let (view, names) = specific_view(&train_pool, &corpus.class_names, &corpus.sources, "bar_only")?;
    let (test_view, _) = specific_view(&test_pool, &corpus.class_names, &corpus.sources, "bar_only")?;
    println!(
        "view over bar_only: {} train / {} test samples, classes {:?}",
        view.len(),
        test_view.len(),
        names
    );
    let sample = &view[0];
    let trusted: Vec<bool> = (0..sample.presence.len()).map(|c| sample.presence.get(c)).collect();
    println!("per-sample presence inside the view: {trusted:?}");

    // Complete annotations make plain unmasked crossentropy the natural
    // objective; masking has nothing to exclude here.
    let loss: LossConfig = "xent_unmasked".parse()?;
    let sampler = SamplerConfig::proportional(&view, 15, 1)?;
    let net = NetConfig::for_classes(names.len(), 1);
    let mut cfg = TrainConfig::new(net, loss, sampler, 1);
    cfg.max_steps = 300;
    cfg.learning_rate = 1e-3;

    let outcome = train(&view, &test_view, &cfg)?;
    let report = class_dice_report(&cfg.net, &outcome.params, &test_view)?;
    let (dice, n) = report[0];
    println!(
        "after {} steps: mean test dice on {} = {:.3} over {} images",
        outcome.completed_steps, names[1], dice, n
    );
    println!("(the generic classifier must match this within a small gap");
    println!(" while also scoring every other structure)");
    Ok(())
}
