//! The classifier: a small 2D encoder-decoder with skip connections,
//! plus its initializer, optimizer, training loop, and checkpoint
//! format.
//!
//! The network is deliberately miniature: `levels` pooling stages (two
//! 3x3 conv+relu per stage), a two-conv bottleneck, nearest-neighbour
//! upsampling with skip concatenation on the way back up, and a 1x1
//! head feeding a channel softmax. No normalization layers: batches
//! here are too small for the statistics to be anything but noise, and
//! keeping the forward pass pure makes runs bit-reproducible.

use crate::dataset::{stratified_batches, Sample, SamplerConfig};
use crate::error::{Error, Result};
use crate::labelcore::{
    evaluate_case, FeatureImage, GeometryRecord, ProbabilityMap, Spacing,
};
use crate::losses::{combined_loss, LossConfig};
use crate::ndgrad::{Tape, Tensor, ValueId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    /// Number of pooling stages; input extents must divide 2^levels.
    pub levels: usize,
    pub base_channels: usize,
    pub input_channels: usize,
    /// C+1: foreground classes plus background.
    pub output_channels: usize,
    pub kernel_size: usize,
    pub seed: u64,
}

impl NetConfig {
    /// Default geometry for a corpus with `classes` total classes
    /// (background included).
    pub fn for_classes(classes: usize, seed: u64) -> Self {
        NetConfig {
            levels: 2,
            base_channels: 8,
            input_channels: 1,
            output_channels: classes,
            kernel_size: 3,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(Error::invalid_argument("network needs at least one level".to_string()));
        }
        if self.base_channels == 0 || self.input_channels == 0 || self.output_channels < 2 {
            return Err(Error::invalid_argument(format!(
                "degenerate channel counts: base {}, input {}, output {}",
                self.base_channels, self.input_channels, self.output_channels
            )));
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::invalid_argument(format!(
                "kernel size must be odd, got {}",
                self.kernel_size
            )));
        }
        Ok(())
    }

    /// Input extents must be divisible by this.
    pub fn grid_divisor(&self) -> usize {
        1 << self.levels
    }
}

/// Named parameter tensors in a fixed order shared by the initializer,
/// the forward pass, the optimizer, and the checkpoint format.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

/// One convolution in the fixed walk order.
struct ConvPlan {
    name: String,
    cin: usize,
    cout: usize,
    k: usize,
}

/// The complete layer walk: encoder stages, bottleneck, decoder stages,
/// head. Everything that iterates over parameters follows this order.
fn layer_plan(cfg: &NetConfig) -> Vec<ConvPlan> {
    let mut plan = Vec::new();
    let mut cin = cfg.input_channels;
    for l in 0..cfg.levels {
        let cout = cfg.base_channels << l;
        plan.push(ConvPlan { name: format!("enc{l}_conv1"), cin, cout, k: cfg.kernel_size });
        plan.push(ConvPlan { name: format!("enc{l}_conv2"), cin: cout, cout, k: cfg.kernel_size });
        cin = cout;
    }
    let mid = cfg.base_channels << cfg.levels;
    plan.push(ConvPlan { name: "mid_conv1".to_string(), cin, cout: mid, k: cfg.kernel_size });
    plan.push(ConvPlan { name: "mid_conv2".to_string(), cin: mid, cout: mid, k: cfg.kernel_size });
    for l in (0..cfg.levels).rev() {
        let skip = cfg.base_channels << l;
        let from_below = cfg.base_channels << (l + 1);
        plan.push(ConvPlan {
            name: format!("dec{l}_conv1"),
            cin: from_below + skip,
            cout: skip,
            k: cfg.kernel_size,
        });
        plan.push(ConvPlan { name: format!("dec{l}_conv2"), cin: skip, cout: skip, k: cfg.kernel_size });
    }
    plan.push(ConvPlan {
        name: "head".to_string(),
        cin: cfg.base_channels,
        cout: cfg.output_channels,
        k: 1,
    });
    plan
}

/// Weights uniform in +-sqrt(6 / (fan_in + fan_out)) with the kernel
/// area counted into both fans; biases zero. Deterministic in the seed.
pub fn init_xavier(cfg: &NetConfig) -> Result<ParamSet> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut names = Vec::new();
    let mut tensors = Vec::new();
    for conv in layer_plan(cfg) {
        let fan_in = conv.cin * conv.k * conv.k;
        let fan_out = conv.cout * conv.k * conv.k;
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n = conv.cout * conv.cin * conv.k * conv.k;
        let data: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() * 2.0 * bound - bound).collect();
        names.push(format!("{}_weight", conv.name));
        tensors.push(Tensor::new(vec![conv.cout, conv.cin, conv.k, conv.k], data)?);
        names.push(format!("{}_bias", conv.name));
        tensors.push(Tensor::zeros(vec![conv.cout]));
    }
    Ok(ParamSet { names, tensors })
}

/// All-zero parameters with the same layout; useful as a neutral
/// starting point in tests (the softmax then emits uniform maps).
pub fn zeroed_params(cfg: &NetConfig) -> Result<ParamSet> {
    let mut p = init_xavier(cfg)?;
    for t in &mut p.tensors {
        for v in t.data_mut() {
            *v = 0.0;
        }
    }
    Ok(p)
}

/// Records the full forward pass on the tape and returns the
/// `[C+1, H, W]` probability node. `ids` must come from binding the
/// parameter set in order (as `param` for training, `constant` for
/// inference).
pub fn forward_on_tape(
    cfg: &NetConfig,
    tape: &mut Tape,
    ids: &[ValueId],
    x: ValueId,
) -> Result<ValueId> {
    cfg.validate()?;
    let plan = layer_plan(cfg);
    if ids.len() != 2 * plan.len() {
        return Err(Error::invalid_argument(format!(
            "parameter binding has {} entries, the architecture needs {}",
            ids.len(),
            2 * plan.len()
        )));
    }
    let shape = tape.value(x).shape().to_vec();
    let [cin, h, w] = shape[..] else {
        return Err(Error::ShapeMismatch {
            op: "forward input (want [Cin,H,W])",
            lhs: shape,
            rhs: vec![],
        });
    };
    if cin != cfg.input_channels {
        return Err(Error::invalid_argument(format!(
            "input has {cin} channels, the network expects {}",
            cfg.input_channels
        )));
    }
    let d = cfg.grid_divisor();
    if h % d != 0 || w % d != 0 {
        return Err(Error::invalid_argument(format!(
            "input {h}x{w} not divisible by {d}; crop or pad to the working grid first"
        )));
    }

    let mut next = 0usize;
    let mut conv_relu = |tape: &mut Tape, inp: ValueId, relu: bool| -> Result<ValueId> {
        let out = tape.conv2d(inp, ids[next], ids[next + 1])?;
        next += 2;
        Ok(if relu { tape.relu(out) } else { out })
    };

    let mut cur = x;
    let mut skips = Vec::with_capacity(cfg.levels);
    for _ in 0..cfg.levels {
        cur = conv_relu(tape, cur, true)?;
        cur = conv_relu(tape, cur, true)?;
        skips.push(cur);
        cur = tape.max_pool2(cur)?;
    }
    cur = conv_relu(tape, cur, true)?;
    cur = conv_relu(tape, cur, true)?;
    for skip in skips.into_iter().rev() {
        cur = tape.upsample2(cur)?;
        cur = tape.concat_channels(cur, skip)?;
        cur = conv_relu(tape, cur, true)?;
        cur = conv_relu(tape, cur, true)?;
    }
    let logits = conv_relu(tape, cur, false)?;
    tape.channel_softmax(logits)
}

/// Forward pass without gradients: binds everything as constants on a
/// scratch tape so training and inference share one definition of the
/// architecture.
pub fn forward_infer(cfg: &NetConfig, params: &ParamSet, x: &FeatureImage) -> Result<ProbabilityMap> {
    let mut tape = Tape::new();
    let ids: Vec<ValueId> = params.tensors.iter().map(|t| tape.constant(t.clone())).collect();
    let xid = tape.constant(x.to_tensor());
    let out = forward_on_tape(cfg, &mut tape, &ids, xid)?;
    ProbabilityMap::from_tensor(tape.value(out))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(params: &ParamSet, learning_rate: f64) -> Self {
        OptimizerState {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            m: params.tensors.iter().map(|t| vec![0.0; t.len()]).collect(),
            v: params.tensors.iter().map(|t| vec![0.0; t.len()]).collect(),
        }
    }
}

/// One bias-corrected moment update. Gradients must be finite; a NaN or
/// infinity halts training rather than silently poisoning the moments.
pub fn adam_step(params: &mut ParamSet, grads: &[Tensor], state: &mut OptimizerState) -> Result<()> {
    if grads.len() != params.tensors.len() {
        return Err(Error::invalid_argument(format!(
            "{} gradients for {} parameters",
            grads.len(),
            params.tensors.len()
        )));
    }
    for (i, (p, g)) in params.tensors.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        if !g.all_finite() {
            return Err(Error::NonFinite(format!(
                "gradient of '{}' is not finite at optimizer step {}",
                params.names[i],
                state.step + 1
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for ((p, g), (m, v)) in params
        .tensors
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for ((pv, &gv), (mv, vv)) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut().zip(v.iter_mut())) {
            *mv = state.beta1 * *mv + (1.0 - state.beta1) * gv;
            *vv = state.beta2 * *vv + (1.0 - state.beta2) * gv * gv;
            let mhat = *mv / c1;
            let vhat = *vv / c2;
            *pv -= state.learning_rate * mhat / (vhat.sqrt() + state.epsilon);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub net: NetConfig,
    pub loss: LossConfig,
    pub sampler: SamplerConfig,
    pub max_steps: usize,
    /// Plateau detection compares consecutive windows of this many steps.
    pub plateau_window: usize,
    /// Relative improvement below this counts as a plateau.
    pub plateau_tolerance: f64,
    pub learning_rate: f64,
    /// Used once, after the first plateau; a second plateau stops the run.
    pub fallback_learning_rate: f64,
    /// Evaluate test dice every this many steps; 0 disables.
    pub eval_cadence: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(net: NetConfig, loss: LossConfig, sampler: SamplerConfig, seed: u64) -> Self {
        TrainConfig {
            net,
            loss,
            sampler,
            max_steps: 5000,
            plateau_window: 200,
            plateau_tolerance: 1e-3,
            learning_rate: 1e-4,
            fallback_learning_rate: 1e-5,
            eval_cadence: 0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        if self.max_steps == 0 {
            return Err(Error::invalid_argument("max steps must be positive".to_string()));
        }
        if self.plateau_window < 2 {
            return Err(Error::invalid_argument(format!(
                "plateau window must exceed 1, got {}",
                self.plateau_window
            )));
        }
        if self.learning_rate <= 0.0 || self.fallback_learning_rate <= 0.0 {
            return Err(Error::invalid_argument("learning rates must be positive".to_string()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    /// Mean dice per foreground class (class value = index + 1); absent
    /// classes (no truth-positive test sample) are recorded as NaN.
    pub dice: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: ParamSet,
    pub log: TrainLog,
    pub completed_steps: usize,
    pub final_learning_rate: f64,
    pub plateau_events: usize,
    /// Set when training halted on a numerical failure; the parameters
    /// are the last finite state.
    pub halt: Option<String>,
}

/// Per-class dice aggregation: for every foreground class, the mean
/// dice over samples whose reference labels contain the class, plus the
/// number of contributing samples. The mean is NaN when nothing
/// contributed; correctly rejecting a class on images that never had it
/// earns no credit.
pub fn class_dice_report(
    cfg: &NetConfig,
    params: &ParamSet,
    samples: &[Sample],
) -> Result<Vec<(f64, usize)>> {
    let classes = cfg.output_channels - 1;
    let mut sums = vec![0.0; classes];
    let mut counts = vec![0usize; classes];
    for s in samples {
        let prob = forward_infer(cfg, params, &s.feature)?;
        let truth = s.eval_label();
        let geom = native_geometry(truth.h, truth.w, truth.spacing);
        let dice = evaluate_case(&prob, &geom, truth, classes)?;
        for c in 0..classes {
            if truth.data.iter().any(|&v| v as usize == c + 1) {
                sums[c] += dice[c];
                counts[c] += 1;
            }
        }
    }
    Ok((0..classes)
        .map(|c| {
            let mean = if counts[c] == 0 { f64::NAN } else { sums[c] / counts[c] as f64 };
            (mean, counts[c])
        })
        .collect())
}

/// Per-class mean dice over samples whose reference labels contain the
/// class. Classes never present in the reference stay NaN.
pub fn mean_foreground_dice(
    cfg: &NetConfig,
    params: &ParamSet,
    samples: &[Sample],
) -> Result<Vec<f64>> {
    Ok(class_dice_report(cfg, params, samples)?
        .into_iter()
        .map(|(mean, _)| mean)
        .collect())
}

/// Identity geometry for samples already on the working grid.
fn native_geometry(h: usize, w: usize, spacing: Spacing) -> GeometryRecord {
    GeometryRecord {
        original_h: h,
        original_w: w,
        original_spacing: spacing,
        resampled_h: h,
        resampled_w: w,
        working_h: h,
        working_w: w,
    }
}

/// Trains from scratch on `train_samples`. Per step: draw a stratified
/// batch, run every sample through one shared tape (parameters bound
/// once), average the per-sample masked losses, reverse-accumulate, and
/// take an Adam step. Presence masks that depend on predictions are
/// rebuilt inside the loss from the same step's forward output.
///
/// Plateau policy: after each full window, the mean windowed loss is
/// compared with the previous window's; relative improvement below the
/// tolerance first drops the learning rate to the fallback, then stops
/// the run.
pub fn train(
    train_samples: &[Sample],
    test_samples: &[Sample],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut params = init_xavier(&cfg.net)?;
    let mut opt = OptimizerState::new(&params, cfg.learning_rate);
    let mut stream = stratified_batches(train_samples, &cfg.sampler)?;
    let mut log = TrainLog::default();
    let mut plateau_events = 0usize;
    let mut prev_window_avg: Option<f64> = None;
    let mut halt = None;
    let mut completed = 0usize;

    'steps: for step in 1..=cfg.max_steps {
        let batch = stream.next().expect("stream is infinite");
        let mut tape = Tape::new();
        let ids: Vec<ValueId> = params.tensors.iter().map(|t| tape.param(t.clone())).collect();
        let mut terms = Vec::with_capacity(batch.len());
        let share = 1.0 / batch.len() as f64;
        for &i in &batch {
            let s = &train_samples[i];
            let x = tape.constant(s.feature.to_tensor());
            let prob = forward_on_tape(&cfg.net, &mut tape, &ids, x)?;
            let loss = cfg.loss.record(&mut tape, prob, &s.label, &s.presence)?;
            terms.push((share, loss));
        }
        let total = combined_loss(&mut tape, &terms)?;
        let loss_value = tape.value(total).item();
        if !loss_value.is_finite() {
            halt = Some(format!(
                "loss became {loss_value} at step {step}; parameters kept from step {completed}"
            ));
            break 'steps;
        }
        tape.backward(total)?;
        let grads: Vec<Tensor> = ids
            .iter()
            .zip(&params.tensors)
            .map(|(&id, p)| {
                tape.gradient(id)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(p.shape().to_vec()))
            })
            .collect();
        if let Err(e) = adam_step(&mut params, &grads, &mut opt) {
            match e {
                Error::NonFinite(msg) => {
                    halt = Some(format!("{msg}; parameters kept from step {completed}"));
                    break 'steps;
                }
                other => return Err(other),
            }
        }
        completed = step;
        log.steps.push(StepRecord {
            step,
            loss: loss_value,
            learning_rate: opt.learning_rate,
        });

        if cfg.eval_cadence > 0 && step % cfg.eval_cadence == 0 && !test_samples.is_empty() {
            let dice = mean_foreground_dice(&cfg.net, &params, test_samples)?;
            log.evals.push(EvalRecord { step, dice });
        }

        if step % cfg.plateau_window == 0 {
            let w = cfg.plateau_window;
            let window = &log.steps[log.steps.len() - w..];
            let avg = window.iter().map(|r| r.loss).sum::<f64>() / w as f64;
            if let Some(prev) = prev_window_avg {
                let improvement = (prev - avg) / prev.abs().max(1e-12);
                if improvement < cfg.plateau_tolerance {
                    plateau_events += 1;
                    if plateau_events == 1 {
                        opt.learning_rate = cfg.fallback_learning_rate;
                    } else {
                        break 'steps;
                    }
                }
            }
            prev_window_avg = Some(avg);
        }
    }

    let final_lr = opt.learning_rate;
    Ok(TrainOutcome {
        params,
        log,
        completed_steps: completed,
        final_learning_rate: final_lr,
        plateau_events,
        halt,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    file: String,
    sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointHeader {
    format_version: u32,
    net: NetConfig,
    class_names: Vec<String>,
    loss_label: String,
    seed: u64,
    shrink_percent: f64,
    params: Vec<ParamEntry>,
}

/// A trained classifier as stored on disk: architecture, the class
/// vocabulary it predicts over, how it was trained (loss, seed, data
/// fraction), and the parameters themselves.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub net: NetConfig,
    pub class_names: Vec<String>,
    pub loss_label: String,
    pub seed: u64,
    /// Training-set percentage of the data-ablation grid; 80 = the full
    /// training split.
    pub shrink_percent: f64,
    pub params: ParamSet,
}

const CHECKPOINT_VERSION: u32 = 1;

fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

/// Writes `header.json` plus one little-endian f64 raster per parameter
/// under `params/`. No timestamps: identical checkpoints are
/// byte-identical on disk.
pub fn save_checkpoint(dir: &Path, ckpt: &Checkpoint) -> Result<()> {
    let pdir = dir.join("params");
    fs::create_dir_all(&pdir).map_err(|e| Error::io(&pdir, e))?;
    let mut entries = Vec::with_capacity(ckpt.params.len());
    for (name, tensor) in ckpt.params.names.iter().zip(&ckpt.params.tensors) {
        let mut bytes = Vec::with_capacity(tensor.len() * 8);
        for v in tensor.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let file = format!("params/{name}.raw");
        let path = dir.join(&file);
        fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
        entries.push(ParamEntry {
            name: name.clone(),
            shape: tensor.shape().to_vec(),
            sha256: sha256_hex(&bytes),
            file,
        });
    }
    let header = CheckpointHeader {
        format_version: CHECKPOINT_VERSION,
        net: ckpt.net,
        class_names: ckpt.class_names.clone(),
        loss_label: ckpt.loss_label.clone(),
        seed: ckpt.seed,
        shrink_percent: ckpt.shrink_percent,
        params: entries,
    };
    let path = dir.join("header.json");
    let json = serde_json::to_string_pretty(&header).map_err(|e| Error::json(&path, e))?;
    fs::write(&path, format!("{json}\n")).map_err(|e| Error::io(&path, e))
}

/// Loads and verifies a checkpoint; every raster is checksummed against
/// the header before the parameters are accepted.
pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let hpath = dir.join("header.json");
    let text = fs::read(&hpath).map_err(|e| Error::io(&hpath, e))?;
    let header: CheckpointHeader = serde_json::from_slice(&text).map_err(|e| Error::json(&hpath, e))?;
    if header.format_version != CHECKPOINT_VERSION {
        return Err(Error::invalid_data(format!(
            "checkpoint format version {} is not the supported {CHECKPOINT_VERSION}",
            header.format_version
        )));
    }
    let mut names = Vec::with_capacity(header.params.len());
    let mut tensors = Vec::with_capacity(header.params.len());
    for e in &header.params {
        let path = dir.join(&e.file);
        let bytes = fs::read(&path).map_err(|err| Error::io(&path, err))?;
        let expected: usize = e.shape.iter().product::<usize>() * 8;
        if bytes.len() != expected {
            return Err(Error::invalid_data(format!(
                "parameter raster '{}' holds {} bytes but shape {:?} needs {expected}",
                e.file,
                bytes.len(),
                e.shape
            )));
        }
        let actual = sha256_hex(&bytes);
        if actual != e.sha256 {
            return Err(Error::invalid_data(format!(
                "parameter raster '{}' fails its checksum: header records {}, file hashes to {actual}",
                e.file, e.sha256
            )));
        }
        let data: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunks_exact(8)")))
            .collect();
        names.push(e.name.clone());
        tensors.push(Tensor::new(e.shape.clone(), data)?);
    }
    Ok(Checkpoint {
        net: header.net,
        class_names: header.class_names,
        loss_label: header.loss_label,
        seed: header.seed,
        shrink_percent: header.shrink_percent,
        params: ParamSet { names, tensors },
    })
}
