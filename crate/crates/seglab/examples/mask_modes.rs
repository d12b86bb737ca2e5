//! The three pixel-mask constructions on one tiny scene, and why they
//! differ. A source that never annotated class 2 marks background as
//! untrusted; the masks decide which pixels may teach the classifier.
//!
//!     cargo run --release --example mask_modes

use seglab::labelcore::{predict_labels, LabelMap, ProbabilityMap, Spacing};
use seglab::losses::masked_crossentropy;
use seglab::masking::{build_mask_base, build_mask_or, build_mask_plus, PresenceArray};
use seglab::ndgrad::{Tape, Tensor};
use seglab::Result;

fn show(title: &str, data: &[f64], w: usize) {
    println!("{title}");
    for row in data.chunks(w) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.0}")).collect();
        println!("  {}", cells.join(" "));
    }
}

fn main() -> Result<()> {
    // 4x6 scene from a source that annotated class 1 and nothing else, so
    // k = [background?, class1?, class2?] reads [false, true, false]:
    // background cannot be trusted because unannotated structures hide in
    // it, and class 2 was never marked at all.
    let (h, w) = (4usize, 6usize);
    #[rustfmt::skip]
    let labels = vec![
        0, 1, 1, 0, 0, 0,
        0, 1, 1, 0, 0, 0,
        0, 0, 0, 0, 0, 0,
        0, 0, 0, 0, 0, 0,
    ];
    let y = LabelMap::new(h, w, labels, Spacing::isotropic(1.0))?;
    let k = PresenceArray::new(vec![false, true, false]);

    // The classifier is mid-training. It nails the class-1 blob, fires
    // class 2 in the lower-right corner (plausibly a real structure this
    // source just never annotated), and fires class 1 at the top-right
    // (a mistake about a class this source did annotate).
    let mut prob = vec![0.0; 3 * h * w];
    for i in 0..h * w {
        let (r, c) = (i / w, i % w);
        let (p0, p1, p2) = if y.data[i] == 1 {
            (0.05, 0.90, 0.05)
        } else if r >= 2 && c >= 4 {
            (0.10, 0.05, 0.85)
        } else if (r, c) == (0, 5) {
            (0.05, 0.90, 0.05)
        } else {
            (0.90, 0.05, 0.05)
        };
        prob[i] = p0;
        prob[h * w + i] = p1;
        prob[2 * h * w + i] = p2;
    }
    let pm = ProbabilityMap { channels: 3, h, w, data: prob.clone() };
    let y_hat = predict_labels(&pm);

    let base = build_mask_base(&y, &k)?;
    let or = build_mask_or(&y, &y_hat, &k)?;
    let plus = build_mask_plus(&y, &y_hat, &k)?;

    // base admits a pixel only through its reference label, so untrusted
    // background drops out wholesale: the class-1 mistake at (0,5) goes
    // unpunished. or re-admits pixels the classifier assigns to a trusted
    // class, so that mistake gets corrected, while the corner stays
    // excluded under every mode: predicting an unannotated class there
    // may well be right, and the label offers no evidence either way.
    // plus adds the two votes, weighing label-prediction agreement double.
    show("reference labels:", &y.data.iter().map(|&v| v as f64).collect::<Vec<_>>(), w);
    show("predicted labels:", &y_hat.data.iter().map(|&v| v as f64).collect::<Vec<_>>(), w);
    show("mask, mode base:", &base.data, w);
    show("mask, mode or:", &or.data, w);
    show("mask, mode plus:", &plus.data, w);

    // The loss consequence, unnormalized so the sums are comparable.
    for (name, mask) in [("base", &base), ("or", &or), ("plus", &plus)] {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::new(vec![3, h, w], prob.clone())?);
        let target = seglab::labelcore::one_hot(&y, 3)?;
        let loss = masked_crossentropy(&mut tape, p, &target, mask, false)?;
        println!("crossentropy sum under {name}: {:.4}", tape.value(loss).item());
    }
    Ok(())
}
