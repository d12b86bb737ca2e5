//! Why pure soft dice collapses on corpora with empty images, shown
//! without any training: the loss landscape around an empty image, and
//! the sampler switch that removes such images from the stream.
//!
//!     cargo run --release --example empty_image_pitfall

use seglab::dataset::{stratified_batches, SamplerConfig};
use seglab::harness::{build_corpus, GendataSpec};
use seglab::labelcore::{LabelMap, Spacing};
use seglab::losses::LossConfig;
use seglab::masking::PresenceArray;
use seglab::ndgrad::{Tape, Tensor};
use seglab::Result;

fn loss_on_empty(preset: &str, leak: f64) -> Result<f64> {
    // all-background labels; the classifier leaks `leak` probability per
    // foreground channel on every pixel
    let (c, h, w) = (3usize, 8usize, 8usize);
    let y = LabelMap::new(h, w, vec![0; h * w], Spacing::isotropic(1.0))?;
    let k = PresenceArray::new(vec![true, true, true]);
    let mut prob = vec![0.0; c * h * w];
    for i in 0..h * w {
        prob[i] = 1.0 - 2.0 * leak;
        prob[h * w + i] = leak;
        prob[2 * h * w + i] = leak;
    }
    let cfg: LossConfig = preset.parse()?;
    let mut tape = Tape::new();
    let p = tape.constant(Tensor::new(vec![c, h, w], prob)?);
    let root = cfg.record(&mut tape, p, &y, &k)?;
    Ok(tape.value(root).item())
}

fn main() -> Result<()> {
    // On an empty image, the soft dice of a foreground class is
    // epsilon / (leaked mass + epsilon): a perfect score demands exactly
    // zero predicted mass, and the tiniest leak costs nearly the whole
    // class term. Crossentropy scales smoothly with the leak instead.
    // Training on many empty images therefore drags every foreground
    // channel toward constant zero, which then loses the real structures.
    println!("loss on an all-background image, by leaked foreground probability:");
    println!("  {:<12} {:>12} {:>12}", "leak/pixel", "dice_soft", "xent_base");
    for leak in [0.2, 0.05, 0.01, 1e-3, 1e-6, 0.0] {
        println!(
            "  {:<12} {:>12.6} {:>12.6}",
            format!("{leak:.0e}"),
            loss_on_empty("dice_soft", leak)?,
            loss_on_empty("xent_base", leak)?
        );
    }

    // The workaround for dice-family training: drop empty images from the
    // batch stream entirely.
    let mut spec = GendataSpec::default_three_source(7);
    spec.n = 100;
    let corpus = build_corpus(&spec)?;
    let pool: Vec<_> = corpus.train_indices().iter().map(|&i| corpus.samples[i].clone()).collect();
    let empties_in_pool = pool.iter().filter(|s| !s.has_foreground()).count();
    println!(
        "\ntraining pool: {} samples, {} visibly empty",
        pool.len(),
        empties_in_pool
    );

    for exclude in [false, true] {
        let mut cfg = SamplerConfig::proportional(&pool, 12, 9)?;
        cfg.exclude_empty = exclude;
        let mut stream = stratified_batches(&pool, &cfg)?;
        let mut empty_draws = 0usize;
        let mut total = 0usize;
        for _ in 0..50 {
            for idx in stream.next().unwrap() {
                empty_draws += usize::from(!pool[idx].has_foreground());
                total += 1;
            }
        }
        println!(
            "  exclude_empty = {exclude:<5} -> {empty_draws:>3} empty draws in {total} ({:.0}%)",
            100.0 * empty_draws as f64 / total as f64
        );
    }
    Ok(())
}
