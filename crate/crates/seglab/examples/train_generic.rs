//! Train the class-generic classifier on a small merged corpus with the
//! or-mask crossentropy, the configuration that lets partially annotated
//! sources teach one shared network.
//!
//! A few hundred steps on a reduced corpus: expect a couple of minutes.
//!
//!     cargo run --release --example train_generic

use seglab::dataset::SamplerConfig;
use seglab::harness::{build_corpus, GendataSpec};
use seglab::losses::LossConfig;
use seglab::model::{class_dice_report, train, NetConfig, TrainConfig};
use seglab::Result;

fn main() -> Result<()> {
    let mut spec = GendataSpec::default_three_source(7);
    spec.n = 120; // keep the example quick; the defaults build 250
    let corpus = build_corpus(&spec)?;
    let train_samples: Vec<_> = corpus.train_indices().iter().map(|&i| corpus.samples[i].clone()).collect();
    let test_samples: Vec<_> = corpus.test_indices().iter().map(|&i| corpus.samples[i].clone()).collect();
    println!(
        "corpus: {} train / {} test, classes {:?}",
        train_samples.len(),
        test_samples.len(),
        corpus.class_names
    );

    let loss: LossConfig = "xent_or".parse()?;
    let sampler = SamplerConfig::proportional(&train_samples, 15, 1)?;
    let net = NetConfig::for_classes(corpus.class_names.len(), 1);
    let mut cfg = TrainConfig::new(net, loss, sampler, 1);
    cfg.max_steps = 400;
    cfg.learning_rate = 1e-3;
    cfg.eval_cadence = 100;

    let outcome = train(&train_samples, &test_samples, &cfg)?;
    println!(
        "trained {} steps, final learning rate {:.0e}, plateau events {}",
        outcome.completed_steps, outcome.final_learning_rate, outcome.plateau_events
    );
    for eval in &outcome.log.evals {
        let cells: Vec<String> = eval
            .dice
            .iter()
            .zip(&corpus.class_names[1..])
            .map(|(d, n)| format!("{n} {d:.3}"))
            .collect();
        println!("  step {:>4}: test dice {}", eval.step, cells.join(", "));
    }

    // the report covers foreground classes, entry c scoring class c + 1
    let report = class_dice_report(&cfg.net, &outcome.params, &test_samples)?;
    println!("\nfinal per-class mean test dice:");
    for (c, (dice, n)) in report.iter().enumerate() {
        println!("  {:<12} {:.3}  ({} test images contain it)", corpus.class_names[c + 1], dice, n);
    }
    Ok(())
}
