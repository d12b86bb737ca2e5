//! Shared helpers for the integration suites: independent triple-loop
//! oracle implementations of every loss, mask, and score (no code shared
//! with the crate; written straight from the formulas), plus small
//! filesystem assertions.

#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use seglab::labelcore::{LabelMap, Spacing};
use seglab::losses::LossConfig;
use seglab::masking::PresenceArray;
use seglab::ndgrad::{Tape, Tensor};
use std::fs;
use std::path::Path;

// constants restated independently of the crate
pub const EPS: f64 = 1e-7;
pub const FLOOR: f64 = 1e-12;
pub const ALPHA: f64 = 0.7;
pub const BETA: f64 = 0.3;
pub const GAMMA: f64 = 4.0 / 3.0;

pub const PRESETS: [&str; 11] = [
    "dice_soft",
    "dice_log",
    "ftl",
    "xent_unmasked",
    "xent_base",
    "xent_or",
    "xent_plus",
    "mae_base",
    "mae_or",
    "mae_plus",
    "xent_or+0.1*dice_soft",
];

/// One random test case: a distribution over `c` channels on an
/// `h x w` grid, reference labels, and a presence record.
pub struct Instance {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    /// Channel-major probabilities, normalized per pixel.
    pub prob: Vec<f64>,
    pub labels: Vec<u8>,
    pub k: Vec<bool>,
}

pub fn random_instance(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Instance {
    let hw = h * w;
    let mut prob = vec![0.0; c * hw];
    for j in 0..hw {
        // occasionally make one class confident so argmax-driven masks
        // see decisive predictions as well as mushy ones
        let boost = rng.gen::<f64>() < 0.5;
        let winner = rng.gen_range(0..c);
        let mut total = 0.0;
        for ch in 0..c {
            let mut v = 0.05 + rng.gen::<f64>();
            if boost && ch == winner {
                v += 4.0;
            }
            prob[ch * hw + j] = v;
            total += v;
        }
        for ch in 0..c {
            prob[ch * hw + j] /= total;
        }
    }
    let labels: Vec<u8> = (0..hw).map(|_| rng.gen_range(0..c) as u8).collect();
    let k = loop {
        let k: Vec<bool> = (0..c).map(|_| rng.gen::<bool>()).collect();
        if k.iter().any(|&b| b) {
            break k;
        }
    };
    Instance { c, h, w, prob, labels, k }
}

// ------------------------------------------------------------ oracles

pub fn oracle_argmax(inst: &Instance) -> Vec<usize> {
    let hw = inst.h * inst.w;
    let mut out = vec![0usize; hw];
    for row in 0..inst.h {
        for col in 0..inst.w {
            let j = row * inst.w + col;
            let mut best_c = 0;
            for c in 1..inst.c {
                if inst.prob[c * hw + j] > inst.prob[best_c * hw + j] {
                    best_c = c;
                }
            }
            out[j] = best_c;
        }
    }
    out
}

pub fn oracle_one_hot(inst: &Instance) -> Vec<f64> {
    let hw = inst.h * inst.w;
    let mut out = vec![0.0; inst.c * hw];
    for c in 0..inst.c {
        for row in 0..inst.h {
            for col in 0..inst.w {
                let j = row * inst.w + col;
                if inst.labels[j] as usize == c {
                    out[c * hw + j] = 1.0;
                }
            }
        }
    }
    out
}

pub fn oracle_softdice(inst: &Instance, class: usize) -> f64 {
    let hw = inst.h * inst.w;
    let y = oracle_one_hot(inst);
    let mut yp = 0.0;
    let mut ys = 0.0;
    let mut ps = 0.0;
    for row in 0..inst.h {
        for col in 0..inst.w {
            let j = row * inst.w + col;
            yp += y[class * hw + j] * inst.prob[class * hw + j];
            ys += y[class * hw + j];
            ps += inst.prob[class * hw + j];
        }
    }
    (2.0 * yp + EPS) / (ys + ps + EPS)
}

pub fn oracle_dice_soft_loss(inst: &Instance) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for c in 0..inst.c {
        if inst.k[c] {
            num += 1.0 - oracle_softdice(inst, c);
            den += 1.0;
        }
    }
    num / den
}

pub fn oracle_dice_log_loss(inst: &Instance) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for c in 0..inst.c {
        if inst.k[c] {
            num += -(oracle_softdice(inst, c).max(FLOOR).ln());
            den += 1.0;
        }
    }
    num / den
}

pub fn oracle_tversky(inst: &Instance, class: usize) -> f64 {
    let hw = inst.h * inst.w;
    let y = oracle_one_hot(inst);
    let mut tp = 0.0;
    let mut fp = 0.0;
    let mut fne = 0.0;
    for row in 0..inst.h {
        for col in 0..inst.w {
            let j = row * inst.w + col;
            let yv = y[class * hw + j];
            let pv = inst.prob[class * hw + j];
            tp += yv * pv;
            fp += (1.0 - yv) * pv;
            fne += yv * (1.0 - pv);
        }
    }
    (tp + EPS) / (tp + ALPHA * fp + BETA * fne + EPS)
}

pub fn oracle_ftl(inst: &Instance) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for c in 0..inst.c {
        if inst.k[c] {
            num += (1.0 - oracle_tversky(inst, c)).powf(1.0 / GAMMA);
            den += 1.0;
        }
    }
    num / den
}

/// Pixel weights for the three mask constructions; "none" means every
/// pixel weighs 1.
pub fn oracle_mask(inst: &Instance, mode: &str) -> Vec<f64> {
    let hw = inst.h * inst.w;
    let y_hat = oracle_argmax(inst);
    let mut w = vec![0.0; hw];
    for row in 0..inst.h {
        for col in 0..inst.w {
            let j = row * inst.w + col;
            let truth_trusted = inst.k[inst.labels[j] as usize];
            let pred_trusted = inst.k[y_hat[j]];
            w[j] = match mode {
                "none" => 1.0,
                "base" => f64::from(truth_trusted),
                "or" => f64::from(truth_trusted || pred_trusted),
                "plus" => f64::from(truth_trusted) + f64::from(pred_trusted),
                _ => unreachable!(),
            };
        }
    }
    w
}

pub fn oracle_xent(inst: &Instance, mode: &str) -> f64 {
    let hw = inst.h * inst.w;
    let w = oracle_mask(inst, mode);
    let mut total = 0.0;
    let mut wsum = 0.0;
    for row in 0..inst.h {
        for col in 0..inst.w {
            let j = row * inst.w + col;
            let p_true = inst.prob[inst.labels[j] as usize * hw + j];
            total += w[j] * -(p_true.max(FLOOR).ln());
            wsum += w[j];
        }
    }
    total / wsum.max(1.0)
}

pub fn oracle_mae(inst: &Instance, mode: &str) -> f64 {
    let hw = inst.h * inst.w;
    let w = oracle_mask(inst, mode);
    let mut total = 0.0;
    let mut wsum = 0.0;
    for row in 0..inst.h {
        for col in 0..inst.w {
            let j = row * inst.w + col;
            let p_true = inst.prob[inst.labels[j] as usize * hw + j];
            total += w[j] * (2.0 - 2.0 * p_true);
            wsum += w[j];
        }
    }
    total / wsum.max(1.0)
}

pub fn oracle_loss(inst: &Instance, preset: &str) -> f64 {
    match preset {
        "dice_soft" => oracle_dice_soft_loss(inst),
        "dice_log" => oracle_dice_log_loss(inst),
        "ftl" => oracle_ftl(inst),
        "xent_unmasked" => oracle_xent(inst, "none"),
        "xent_base" => oracle_xent(inst, "base"),
        "xent_or" => oracle_xent(inst, "or"),
        "xent_plus" => oracle_xent(inst, "plus"),
        "mae_base" => oracle_mae(inst, "base"),
        "mae_or" => oracle_mae(inst, "or"),
        "mae_plus" => oracle_mae(inst, "plus"),
        "xent_or+0.1*dice_soft" => oracle_xent(inst, "or") + 0.1 * oracle_dice_soft_loss(inst),
        _ => unreachable!("unknown preset {preset}"),
    }
}

/// The crate's value for the same instance: the preset recorded on a
/// tape over a constant distribution.
pub fn crate_loss(inst: &Instance, preset: &str) -> f64 {
    let cfg: LossConfig = preset.parse().expect("preset parses");
    let mut tape = Tape::new();
    let prob = tape.constant(
        Tensor::new(vec![inst.c, inst.h, inst.w], inst.prob.clone()).expect("valid tensor"),
    );
    let y = LabelMap::new(inst.h, inst.w, inst.labels.clone(), Spacing::isotropic(1.0)).unwrap();
    let k = PresenceArray::new(inst.k.clone());
    let root = cfg.record(&mut tape, prob, &y, &k).expect("loss records");
    tape.value(root).item()
}

// ------------------------------------------------------------ filesystem

/// Byte-compare two directory trees (same relative paths, same bytes).
pub fn assert_trees_identical(a: &Path, b: &Path) {
    let list = |root: &Path| -> Vec<String> {
        let mut out = Vec::new();
        let mut stack = vec![root.to_path_buf()];
        while let Some(dir) = stack.pop() {
            for entry in fs::read_dir(&dir).unwrap() {
                let p = entry.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    out.push(p.strip_prefix(root).unwrap().to_string_lossy().into_owned());
                }
            }
        }
        out.sort();
        out
    };
    let files_a = list(a);
    let files_b = list(b);
    assert_eq!(files_a, files_b, "file sets differ");
    for rel in &files_a {
        let ba = fs::read(a.join(rel)).unwrap();
        let bb = fs::read(b.join(rel)).unwrap();
        assert_eq!(ba, bb, "{rel} differs between reruns");
    }
}
