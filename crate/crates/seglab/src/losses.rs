//! Presence-masked training objectives.
//!
//! Every loss is recorded onto the autodiff tape from a channel
//! distribution node (the softmax output, `[C, H, W]`), the sample's
//! labels, and its presence record. Presence acts at two granularities:
//!
//! * Overlap losses (soft dice, log dice, focal Tversky) aggregate
//!   per-class scores over trusted classes only and divide by the trusted
//!   count.
//! * Pixel losses (crossentropy, absolute difference) weight each pixel by
//!   a presence mask built with one of the rules in [`crate::masking`].
//!
//! Pixel masks are rebuilt from the current predictions every step where
//! the rule asks for them, but are constants to the gradient: no
//! derivative flows through mask construction.

use crate::error::{Error, Result};
use crate::labelcore::{one_hot, predict_labels, LabelMap, PredictionMap, ProbabilityMap};
use crate::masking::{build_mask_base, build_mask_or, build_mask_plus, PresenceArray, PresenceMask};
use crate::ndgrad::{Tape, Tensor, ValueId};
use serde::{Deserialize, Serialize};
use std::fmt;

/// Smoothing added to overlap numerators and denominators so absent
/// classes score a perfect overlap instead of 0/0.
pub const DICE_EPSILON: f64 = 1e-7;

/// Probability floor inside logarithms.
pub const LOG_FLOOR: f64 = 1e-12;

/// Focal Tversky defaults: alpha weights soft false positives, beta soft
/// false negatives, gamma is the focusing exponent.
pub const FTL_ALPHA: f64 = 0.7;
pub const FTL_BETA: f64 = 0.3;
pub const FTL_GAMMA: f64 = 4.0 / 3.0;

/// Which pixel-mask rule a pixel-granular loss uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskMode {
    Base,
    Or,
    Plus,
}

impl fmt::Display for MaskMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MaskMode::Base => "base",
            MaskMode::Or => "or",
            MaskMode::Plus => "plus",
        })
    }
}

/// One objective term. A training loss is a weighted sum of these.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LossTerm {
    /// Mean of `1 - soft dice` over trusted classes.
    DiceSoft,
    /// Mean of `-ln(soft dice)` over trusted classes.
    DiceLog,
    /// Pixel-masked crossentropy with the given mask rule.
    Xent(MaskMode),
    /// Plain mean crossentropy over all pixels; the unmasked reference.
    XentUnmasked,
    /// Mean of `(1 - Tversky index)^(1/gamma)` over trusted classes.
    FocalTversky { alpha: f64, beta: f64, gamma: f64 },
    /// Pixel-masked absolute difference on the true-class probability.
    Mae(MaskMode),
}

/// Per-class soft dice between a distribution channel and its target
/// plane: `(2 * sum(y*p) + eps) / (sum(y) + sum(p) + eps)`.
pub fn softdice_per_class(
    tape: &mut Tape,
    prob: ValueId,
    target: &Tensor,
    class: usize,
    epsilon: f64,
) -> Result<ValueId> {
    let (channels, hw) = check_dist(tape, prob, target)?;
    if class >= channels {
        return Err(Error::invalid_argument(format!(
            "class {class} outside {channels} channels"
        )));
    }
    let plane = &target.data()[class * hw..(class + 1) * hw];
    let y_sum: f64 = plane.iter().sum();

    let mut yp_weights = vec![0.0; channels * hw];
    yp_weights[class * hw..(class + 1) * hw].copy_from_slice(plane);
    let yp = tape.weighted_sum(prob, reshape_like(tape, prob, yp_weights))?;

    let mut p_weights = vec![0.0; channels * hw];
    p_weights[class * hw..(class + 1) * hw].fill(1.0);
    let p_sum = tape.weighted_sum(prob, reshape_like(tape, prob, p_weights))?;

    let num = tape.affine(yp, 2.0, epsilon);
    let den = tape.affine(p_sum, 1.0, y_sum + epsilon);
    tape.div(num, den)
}

/// Soft dice loss over trusted classes:
/// `sum_c k_c * (1 - dice_c) / sum_c k_c`.
pub fn masked_softdice_loss(
    tape: &mut Tape,
    prob: ValueId,
    target: &Tensor,
    k: &PresenceArray,
    epsilon: f64,
) -> Result<ValueId> {
    overlap_aggregate(tape, prob, target, k, |tape, dice| {
        Ok(tape.affine(dice, -1.0, 1.0))
    }, move |tape, p, t, c| softdice_per_class(tape, p, t, c, epsilon))
}

/// Log dice loss over trusted classes:
/// `sum_c k_c * -ln(dice_c) / sum_c k_c`.
pub fn masked_logdice_loss(
    tape: &mut Tape,
    prob: ValueId,
    target: &Tensor,
    k: &PresenceArray,
    epsilon: f64,
) -> Result<ValueId> {
    overlap_aggregate(tape, prob, target, k, |tape, dice| {
        let l = tape.log(dice, LOG_FLOOR);
        Ok(tape.scale(l, -1.0))
    }, move |tape, p, t, c| softdice_per_class(tape, p, t, c, epsilon))
}

/// Unmasked counterpart used by the reduction identity: the plain sum of
/// `1 - dice_c` over every channel, no presence, no normalization.
pub fn unmasked_softdice_loss(
    tape: &mut Tape,
    prob: ValueId,
    target: &Tensor,
    epsilon: f64,
) -> Result<ValueId> {
    let (channels, _) = check_dist(tape, prob, target)?;
    let mut total: Option<ValueId> = None;
    for c in 0..channels {
        let dice = softdice_per_class(tape, prob, target, c, epsilon)?;
        let term = tape.affine(dice, -1.0, 1.0);
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    Ok(total.expect("at least one channel"))
}

/// Tversky index for one class:
/// `(TP + eps) / (TP + alpha*FP + beta*FN + eps)`, with soft counts
/// `TP = sum(y*p)`, `FP = sum((1-y)*p)`, `FN = sum(y*(1-p))`.
#[allow(clippy::too_many_arguments)]
pub fn tversky_index(
    tape: &mut Tape,
    prob: ValueId,
    target: &Tensor,
    class: usize,
    alpha: f64,
    beta: f64,
    epsilon: f64,
) -> Result<ValueId> {
    let (channels, hw) = check_dist(tape, prob, target)?;
    if class >= channels {
        return Err(Error::invalid_argument(format!(
            "class {class} outside {channels} channels"
        )));
    }
    let plane = &target.data()[class * hw..(class + 1) * hw];
    let y_sum: f64 = plane.iter().sum();

    let mut yp_weights = vec![0.0; channels * hw];
    yp_weights[class * hw..(class + 1) * hw].copy_from_slice(plane);
    let tp = tape.weighted_sum(prob, reshape_like(tape, prob, yp_weights))?;

    let mut p_weights = vec![0.0; channels * hw];
    p_weights[class * hw..(class + 1) * hw].fill(1.0);
    let p_sum = tape.weighted_sum(prob, reshape_like(tape, prob, p_weights))?;

    // FP = sum(p) - TP depends on the tape; FN = sum(y) - TP folds the
    // constant into an affine.
    let fp = tape.sub(p_sum, tp)?;
    let fn_scaled = tape.affine(tp, -beta, beta * y_sum);
    let fp_scaled = tape.scale(fp, alpha);
    let mixed = tape.add(fp_scaled, fn_scaled)?;
    let den_core = tape.add(tp, mixed)?;
    let num = tape.affine(tp, 1.0, epsilon);
    let den = tape.affine(den_core, 1.0, epsilon);
    tape.div(num, den)
}

/// Focal Tversky loss over trusted classes:
/// `sum_c k_c * (1 - TI_c)^(1/gamma) / sum_c k_c`.
#[allow(clippy::too_many_arguments)]
pub fn masked_focal_tversky(
    tape: &mut Tape,
    prob: ValueId,
    target: &Tensor,
    k: &PresenceArray,
    alpha: f64,
    beta: f64,
    gamma: f64,
    epsilon: f64,
) -> Result<ValueId> {
    if gamma <= 0.0 {
        return Err(Error::invalid_argument(format!(
            "focal exponent gamma must be positive, got {gamma}"
        )));
    }
    overlap_aggregate(tape, prob, target, k, move |tape, ti| {
        let one_minus = tape.affine(ti, -1.0, 1.0);
        Ok(tape.powf(one_minus, 1.0 / gamma))
    }, move |tape, p, t, c| tversky_index(tape, p, t, c, alpha, beta, epsilon))
}

/// Pixel-masked crossentropy: `-sum_m w_m * ln(p_m at the label class)`,
/// divided by `max(1, sum_m w_m)` when `normalize` is set. An all-zero
/// mask yields zero loss.
pub fn masked_crossentropy(
    tape: &mut Tape,
    prob: ValueId,
    target: &Tensor,
    mask: &PresenceMask,
    normalize: bool,
) -> Result<ValueId> {
    let weights = mask_weights(tape, prob, target, mask)?;
    let logp = tape.log(prob, LOG_FLOOR);
    let s = tape.weighted_sum(logp, weights)?;
    let norm = if normalize { mask.total().max(1.0) } else { 1.0 };
    Ok(tape.scale(s, -1.0 / norm))
}

/// Pixel-masked absolute difference. With one-hot targets the per-pixel
/// distance `sum_c |y_c - p_c|` collapses to `2 - 2 * p at the label
/// class`, so one weighted sum covers the whole sum; same normalization
/// rule as [`masked_crossentropy`].
pub fn masked_mae(
    tape: &mut Tape,
    prob: ValueId,
    target: &Tensor,
    mask: &PresenceMask,
    normalize: bool,
) -> Result<ValueId> {
    let weights = mask_weights(tape, prob, target, mask)?;
    let s = tape.weighted_sum(prob, weights)?;
    let norm = if normalize { mask.total().max(1.0) } else { 1.0 };
    Ok(tape.affine(s, -2.0 / norm, 2.0 * mask.total() / norm))
}

/// Weighted sum of terms, e.g. crossentropy stabilized by a small dice
/// component.
pub fn combined_loss(tape: &mut Tape, terms: &[(f64, ValueId)]) -> Result<ValueId> {
    if terms.is_empty() {
        return Err(Error::invalid_argument("combined loss needs at least one term".to_string()));
    }
    let mut total: Option<ValueId> = None;
    for &(w, id) in terms {
        let scaled = tape.scale(id, w);
        total = Some(match total {
            Some(t) => tape.add(t, scaled)?,
            None => scaled,
        });
    }
    Ok(total.expect("non-empty"))
}

/// A parsed training objective: a weighted sum of [`LossTerm`]s.
///
/// The string form is `term` or `weight*term` joined by `+`, with term
/// names `dice_soft`, `dice_log`, `xent_base`, `xent_or`, `xent_plus`,
/// `xent_unmasked`, `ftl`, `mae_base`, `mae_or`, `mae_plus`. Example:
/// `xent_or+0.1*dice_soft`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub terms: Vec<(f64, LossTerm)>,
}

impl LossConfig {
    pub fn single(term: LossTerm) -> Self {
        LossConfig {
            terms: vec![(1.0, term)],
        }
    }

    /// True when any term rebuilds its pixel mask from the current
    /// predictions.
    pub fn needs_predictions(&self) -> bool {
        self.terms.iter().any(|(_, t)| {
            matches!(
                t,
                LossTerm::Xent(MaskMode::Or | MaskMode::Plus) | LossTerm::Mae(MaskMode::Or | MaskMode::Plus)
            )
        })
    }

    /// Records the whole objective for one sample and returns the scalar
    /// loss node. `prob` is the `[C, H, W]` distribution node, `y` the
    /// working-grid labels, `k` the sample's presence record over the same
    /// `C` classes.
    pub fn record(&self, tape: &mut Tape, prob: ValueId, y: &LabelMap, k: &PresenceArray) -> Result<ValueId> {
        let [channels, h, w] = tape.value(prob).shape()[..] else {
            return Err(Error::invalid_argument(format!(
                "loss wants a [C,H,W] distribution, got {:?}",
                tape.value(prob).shape()
            )));
        };
        if (y.h, y.w) != (h, w) {
            return Err(Error::ShapeMismatch {
                op: "loss labels/distribution grid",
                lhs: vec![y.h, y.w],
                rhs: vec![h, w],
            });
        }
        if k.len() != channels {
            return Err(Error::invalid_argument(format!(
                "presence record covers {} classes but the distribution has {channels} channels",
                k.len()
            )));
        }
        let target = one_hot(y, channels)?;
        let y_hat: Option<PredictionMap> = if self.needs_predictions() {
            let pm = ProbabilityMap::from_tensor(tape.value(prob))?;
            Some(predict_labels(&pm))
        } else {
            None
        };
        let mask_for = |mode: MaskMode| -> Result<PresenceMask> {
            match mode {
                MaskMode::Base => build_mask_base(y, k),
                MaskMode::Or => build_mask_or(y, y_hat.as_ref().expect("predictions prepared"), k),
                MaskMode::Plus => build_mask_plus(y, y_hat.as_ref().expect("predictions prepared"), k),
            }
        };

        let mut recorded: Vec<(f64, ValueId)> = Vec::with_capacity(self.terms.len());
        for &(weight, term) in &self.terms {
            let id = match term {
                LossTerm::DiceSoft => masked_softdice_loss(tape, prob, &target, k, DICE_EPSILON)?,
                LossTerm::DiceLog => masked_logdice_loss(tape, prob, &target, k, DICE_EPSILON)?,
                LossTerm::Xent(mode) => {
                    masked_crossentropy(tape, prob, &target, &mask_for(mode)?, true)?
                }
                LossTerm::XentUnmasked => {
                    let ones = PresenceMask {
                        h,
                        w,
                        data: vec![1.0; h * w],
                    };
                    masked_crossentropy(tape, prob, &target, &ones, true)?
                }
                LossTerm::FocalTversky { alpha, beta, gamma } => {
                    masked_focal_tversky(tape, prob, &target, k, alpha, beta, gamma, DICE_EPSILON)?
                }
                LossTerm::Mae(mode) => masked_mae(tape, prob, &target, &mask_for(mode)?, true)?,
            };
            recorded.push((weight, id));
        }
        combined_loss(tape, &recorded)
    }
}

impl fmt::Display for LossConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, (w, term)) in self.terms.iter().enumerate() {
            if i > 0 {
                f.write_str("+")?;
            }
            if *w != 1.0 {
                write!(f, "{w}*")?;
            }
            write!(f, "{term}")?;
        }
        Ok(())
    }
}

impl fmt::Display for LossTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LossTerm::DiceSoft => f.write_str("dice_soft"),
            LossTerm::DiceLog => f.write_str("dice_log"),
            LossTerm::Xent(m) => write!(f, "xent_{m}"),
            LossTerm::XentUnmasked => f.write_str("xent_unmasked"),
            LossTerm::FocalTversky { alpha, beta, gamma } => {
                if (*alpha, *beta, *gamma) == (FTL_ALPHA, FTL_BETA, FTL_GAMMA) {
                    f.write_str("ftl")
                } else {
                    write!(f, "ftl({alpha},{beta},{gamma})")
                }
            }
            LossTerm::Mae(m) => write!(f, "mae_{m}"),
        }
    }
}

impl std::str::FromStr for LossConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut terms = Vec::new();
        for part in s.split('+') {
            let part = part.trim();
            if part.is_empty() {
                return Err(Error::invalid_argument(format!("empty term in loss '{s}'")));
            }
            let (weight, name) = match part.split_once('*') {
                Some((w, n)) => {
                    let w: f64 = w.trim().parse().map_err(|_| {
                        Error::invalid_argument(format!("bad term weight '{w}' in loss '{s}'"))
                    })?;
                    (w, n.trim())
                }
                None => (1.0, part),
            };
            terms.push((weight, parse_term(name)?));
        }
        Ok(LossConfig { terms })
    }
}

fn parse_term(name: &str) -> Result<LossTerm> {
    let term = match name {
        "dice_soft" => LossTerm::DiceSoft,
        "dice_log" => LossTerm::DiceLog,
        "xent_base" => LossTerm::Xent(MaskMode::Base),
        "xent_or" => LossTerm::Xent(MaskMode::Or),
        "xent_plus" => LossTerm::Xent(MaskMode::Plus),
        "xent_unmasked" => LossTerm::XentUnmasked,
        "ftl" => LossTerm::FocalTversky {
            alpha: FTL_ALPHA,
            beta: FTL_BETA,
            gamma: FTL_GAMMA,
        },
        "mae_base" => LossTerm::Mae(MaskMode::Base),
        "mae_or" => LossTerm::Mae(MaskMode::Or),
        "mae_plus" => LossTerm::Mae(MaskMode::Plus),
        other => {
            if let Some(args) = other.strip_prefix("ftl(").and_then(|r| r.strip_suffix(')')) {
                let vals: Vec<f64> = args
                    .split(',')
                    .map(|v| v.trim().parse())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| Error::invalid_argument(format!("bad ftl parameters '{other}'")))?;
                let [alpha, beta, gamma] = vals[..] else {
                    return Err(Error::invalid_argument(format!(
                        "ftl wants three parameters (alpha,beta,gamma), got '{other}'"
                    )));
                };
                return Ok(LossTerm::FocalTversky { alpha, beta, gamma });
            }
            return Err(Error::invalid_argument(format!(
                "unknown loss term '{other}'; expected one of dice_soft, dice_log, xent_base, \
                 xent_or, xent_plus, xent_unmasked, ftl, mae_base, mae_or, mae_plus"
            )));
        }
    };
    Ok(term)
}

// --- shared plumbing ---

fn check_dist(tape: &Tape, prob: ValueId, target: &Tensor) -> Result<(usize, usize)> {
    let shape = tape.value(prob).shape();
    if shape != target.shape() {
        return Err(Error::ShapeMismatch {
            op: "loss distribution/target",
            lhs: shape.to_vec(),
            rhs: target.shape().to_vec(),
        });
    }
    let [channels, h, w] = shape[..] else {
        return Err(Error::invalid_argument(format!(
            "loss wants [C,H,W] shapes, got {shape:?}"
        )));
    };
    Ok((channels, h * w))
}

fn reshape_like(tape: &Tape, prob: ValueId, data: Vec<f64>) -> Tensor {
    Tensor::new(tape.value(prob).shape().to_vec(), data).expect("weights sized to match")
}

/// Per-class aggregation shared by the overlap losses: map each trusted
/// class's score through `transform` and average over trusted classes.
fn overlap_aggregate(
    tape: &mut Tape,
    prob: ValueId,
    target: &Tensor,
    k: &PresenceArray,
    transform: impl Fn(&mut Tape, ValueId) -> Result<ValueId>,
    score: impl Fn(&mut Tape, ValueId, &Tensor, usize) -> Result<ValueId>,
) -> Result<ValueId> {
    let (channels, _) = check_dist(tape, prob, target)?;
    if k.len() != channels {
        return Err(Error::invalid_argument(format!(
            "presence record covers {} classes but the distribution has {channels} channels",
            k.len()
        )));
    }
    let trusted = k.count_trusted();
    if trusted == 0 {
        return Err(Error::invalid_argument(
            "overlap loss needs at least one trusted class".to_string(),
        ));
    }
    let mut total: Option<ValueId> = None;
    for c in 0..channels {
        if !k.get(c) {
            continue;
        }
        let s = score(tape, prob, target, c)?;
        let term = transform(tape, s)?;
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    Ok(tape.scale(total.expect("trusted > 0"), 1.0 / trusted as f64))
}

fn mask_weights(tape: &Tape, prob: ValueId, target: &Tensor, mask: &PresenceMask) -> Result<Tensor> {
    let (channels, hw) = check_dist(tape, prob, target)?;
    if mask.data.len() != hw {
        return Err(Error::ShapeMismatch {
            op: "loss mask grid",
            lhs: vec![mask.h, mask.w],
            rhs: tape.value(prob).shape()[1..].to_vec(),
        });
    }
    if let Some(bad) = mask.data.iter().find(|&&v| v < 0.0) {
        return Err(Error::invalid_argument(format!(
            "presence mask holds negative weight {bad}"
        )));
    }
    let mut data = vec![0.0; channels * hw];
    for c in 0..channels {
        for m in 0..hw {
            data[c * hw + m] = target.data()[c * hw + m] * mask.data[m];
        }
    }
    Ok(reshape_like(tape, prob, data))
}
