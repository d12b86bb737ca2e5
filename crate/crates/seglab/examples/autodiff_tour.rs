//! Tour of the reverse-mode tape: record a computation, pull gradients,
//! confirm them against central differences, then run the full audit
//! table the `gradcheck` command prints.
//!
//!     cargo run --release --example autodiff_tour

use seglab::ndgrad::{finite_difference_check, Tape, Tensor};
use seglab::harness::gradient_check_suite;
use seglab::Result;

fn main() -> Result<()> {
    // A scalar-by-hand warmup: f(a, b) = sum(relu(a * b + 0.5) ^ 2).
    let mut tape = Tape::new();
    let a = tape.param(Tensor::new(vec![2, 2], vec![0.8, -0.4, 0.3, 1.2])?);
    let b = tape.param(Tensor::new(vec![2, 2], vec![0.5, 0.9, -0.7, 0.2])?);
    let prod = tape.mul(a, b)?;
    let shifted = tape.affine(prod, 1.0, 0.5);
    let act = tape.relu(shifted);
    let sq = tape.powf(act, 2.0);
    let f = tape.sum(sq);
    tape.backward(f)?;

    println!("f(a, b)    = {:.6}", tape.value(f).item());
    println!("df/da      = {:?}", tape.gradient(a).unwrap().data());
    println!("df/db      = {:?}", tape.gradient(b).unwrap().data());

    // The same function handed to the checker: it rebuilds the tape with
    // perturbed parameter copies, so the closure must do all the work.
    let pa = Tensor::new(vec![2, 2], vec![0.8, -0.4, 0.3, 1.2])?;
    let pb = Tensor::new(vec![2, 2], vec![0.5, 0.9, -0.7, 0.2])?;
    let report = finite_difference_check(&[pa, pb], 1e-5, |tape, ids| {
        let prod = tape.mul(ids[0], ids[1])?;
        let shifted = tape.affine(prod, 1.0, 0.5);
        let act = tape.relu(shifted);
        let sq = tape.powf(act, 2.0);
        Ok(tape.sum(sq))
    })?;
    println!(
        "\ncentral differences agree to {:.2e} (worst entry: {})",
        report.max_rel_error, report.worst_param
    );

    // The audit every release must pass: each tensor op and every loss
    // preset, plus the whole network end to end.
    println!("\nfull gradient audit:");
    for row in gradient_check_suite()? {
        println!(
            "  {:<28} {:>10.2e}  {}",
            row.name,
            row.max_rel_error,
            if row.passed { "ok" } else { "FAIL" }
        );
    }
    Ok(())
}
