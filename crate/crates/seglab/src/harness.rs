//! Command-line surface and experiment orchestration.
//!
//! Five commands: `gendata` builds a synthetic multi-source corpus,
//! `train` fits one classifier, `eval` scores a checkpoint, `experiment`
//! runs a roster x shrink-level x seed grid and aggregates a report,
//! `gradcheck` sweeps finite-difference verification over every loss
//! and network operation. Exit codes: 0 success, 2 configuration or
//! data error, 3 numerical failure, 4 experiment finished with failed
//! cells. All outputs are free of timestamps so identical inputs and
//! seeds reproduce byte-identical artifacts.

use crate::dataset::{
    generate_synthetic, make_partial, merge_datasets, partition_subjects, shrink_dataset,
    split_train_test, stratified_batches, store_corpus, load_corpus, Corpus, InvalidatedBand,
    PartialSpec, Sample, SamplerConfig, SourceDataset, SourceEntry, SyntheticSpec, SHRINK_LEVELS,
};
use crate::error::{Error, Result};
use crate::labelcore::LabelMap;
use crate::losses::LossConfig;
use crate::masking::PresenceArray;
use crate::model::{
    class_dice_report, forward_on_tape, init_xavier, load_checkpoint, save_checkpoint, train,
    Checkpoint, NetConfig, TrainConfig, TrainLog,
};
use crate::ndgrad::{finite_difference_check, Tape, Tensor, ValueId, DEFAULT_STEP, DEFAULT_TOLERANCE};
use clap::{Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{mpsc, Arc, Mutex};
use std::time::Instant;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_PARTIAL: i32 = 4;

/// Environment variable naming the experiment worker count (default 1).
pub const WORKERS_ENV: &str = "SEGLAB_WORKERS";

#[derive(Parser, Debug)]
#[command(
    name = "seglab",
    about = "training laboratory for presence-masked segmentation losses",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic multi-source corpus.
    Gendata {
        /// JSON recipe; omitted = the built-in three-class default.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Corpus output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one classifier on a stored corpus.
    Train(TrainArgs),
    /// Score a checkpoint against a corpus split.
    Eval {
        /// Checkpoint directory.
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_enum, default_value_t = Split::Test)]
        split: Split,
        /// Also write the rows as CSV here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a full roster x shrink x seed grid from a JSON plan.
    Experiment {
        #[arg(long)]
        plan: PathBuf,
    },
    /// Verify analytic gradients against finite differences.
    Gradcheck,
}

#[derive(clap::Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Loss preset, e.g. `xent_or` or `xent_or+0.1*dice_soft`.
    #[arg(long)]
    loss: String,
    #[arg(long = "type", value_enum)]
    classifier: ClassifierKind,
    /// Required for specific classifiers: the source to train on.
    #[arg(long)]
    source: Option<String>,
    /// Checkpoint output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 5000)]
    steps: usize,
    #[arg(long, default_value_t = 15)]
    batch: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Drop images without foreground from the batch stream.
    #[arg(long, default_value_t = false)]
    exclude_empty: bool,
    /// Test-dice evaluation cadence in steps (0 = off).
    #[arg(long, default_value_t = 0)]
    eval_cadence: usize,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq)]
pub enum ClassifierKind {
    /// One network over the merged global class space.
    Generic,
    /// One network over a single source's organ-vs-background space.
    Specific,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq)]
pub enum Split {
    Train,
    Test,
}

/// Parses argv and runs; returns the process exit code.
pub fn run() -> i32 {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}

/// Same as [`run`] but over an explicit argument list (first element is
/// the program name); lets tests drive full command lines in-process.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return EXIT_CONFIG;
        }
    };
    match dispatch(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}

pub fn exit_code_for(e: &Error) -> i32 {
    match e {
        Error::NonFinite(_) => EXIT_NUMERIC,
        _ => EXIT_CONFIG,
    }
}

fn dispatch(cli: &Cli) -> Result<i32> {
    match &cli.command {
        Command::Gendata { spec, out } => cmd_gendata(spec.as_deref(), out),
        Command::Train(args) => cmd_train(args),
        Command::Eval { ckpt, corpus, split, out } => cmd_eval(ckpt, corpus, *split, out.as_deref()),
        Command::Experiment { plan } => cmd_experiment(plan),
        Command::Gradcheck => cmd_gradcheck(),
    }
}

// ---------------------------------------------------------------- gendata

/// Recipe for a complete corpus build: synthetic generation, the
/// partial-annotation sources carved out of it, and the held-out split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GendataSpec {
    pub synthetic: SyntheticSpec,
    /// Total images to generate.
    pub n: usize,
    pub sources: Vec<SourceShare>,
    /// Fraction of images held out as the test side (subject-grouped).
    pub test_fraction: f64,
    pub split_seed: u64,
    /// Seed for assigning subjects to sources.
    pub partition_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceShare {
    pub id: String,
    /// Class values this source annotates (0 = trust background too).
    pub trusted: Vec<u8>,
    /// Relative share of the subjects.
    pub weight: f64,
    #[serde(default)]
    pub band: Option<InvalidatedBand>,
}

impl GendataSpec {
    /// Three single-class sources over the default three-class images:
    /// each source annotates one organ and distrusts background. Yields
    /// 200 train + 50 test images at the default n.
    pub fn default_three_source(seed: u64) -> Self {
        GendataSpec {
            synthetic: SyntheticSpec::default_three_class(seed),
            n: 250,
            sources: vec![
                SourceShare { id: "big_oval_only".into(), trusted: vec![1], weight: 0.44, band: None },
                SourceShare { id: "small_oval_only".into(), trusted: vec![2], weight: 0.20, band: None },
                SourceShare { id: "bar_only".into(), trusted: vec![3], weight: 0.36, band: None },
            ],
            test_fraction: 0.2,
            split_seed: seed ^ 0x5eed,
            partition_seed: seed ^ 0x9a57,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.synthetic.validate()?;
        if self.n == 0 {
            return Err(Error::invalid_argument("n must be positive".to_string()));
        }
        if self.sources.is_empty() {
            return Err(Error::invalid_argument("at least one source is required".to_string()));
        }
        if !(0.0..1.0).contains(&self.test_fraction) || self.test_fraction == 0.0 {
            return Err(Error::invalid_argument(format!(
                "test fraction must lie in (0, 1), got {}",
                self.test_fraction
            )));
        }
        Ok(())
    }
}

/// Runs the whole corpus pipeline in memory: generate complete images,
/// fix the subject-grouped test split, carve subjects into partial
/// sources, and merge back into the global space.
pub fn build_corpus(spec: &GendataSpec) -> Result<Corpus> {
    spec.validate()?;
    let channels = spec.synthetic.channels();
    let complete = generate_synthetic(&spec.synthetic, spec.n)?;

    let (_, test_idx) = split_train_test(&complete, spec.test_fraction, spec.split_seed)?;
    let mut test_subjects: Vec<String> = test_idx
        .iter()
        .map(|&i| complete[i].subject.clone())
        .collect();
    test_subjects.sort();
    test_subjects.dedup();

    let weights: Vec<f64> = spec.sources.iter().map(|s| s.weight).collect();
    let groups = partition_subjects(&complete, &weights, spec.partition_seed)?;

    let mut class_names = vec!["background".to_string()];
    class_names.extend(spec.synthetic.classes.iter().map(|c| c.name.clone()));

    let mut sources = Vec::with_capacity(spec.sources.len());
    for (share, group) in spec.sources.iter().zip(&groups) {
        let members: Vec<Sample> = group.iter().map(|&i| complete[i].clone()).collect();
        let mut pspec = PartialSpec::new(&share.id, &share.trusted);
        pspec.band = share.band.clone();
        let partial = make_partial(&members, &pspec, channels)?;
        sources.push(SourceDataset {
            id: share.id.clone(),
            local_class_names: class_names.clone(),
            mapping: pspec.mapping(channels)?,
            samples: partial,
        });
    }
    let merged = merge_datasets(sources, channels)?;
    Ok(Corpus::from_merged(merged, test_subjects))
}

fn cmd_gendata(spec_path: Option<&Path>, out: &Path) -> Result<i32> {
    let spec = match spec_path {
        Some(p) => {
            let text = fs::read(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_slice(&text).map_err(|e| Error::json(p, e))?
        }
        None => GendataSpec::default_three_source(7),
    };
    let corpus = build_corpus(&spec)?;
    store_corpus(out, &corpus)?;
    let train = corpus.train_indices().len();
    let test = corpus.test_indices().len();
    println!(
        "corpus written to {}: {} train + {} test images, {} classes",
        out.display(),
        train,
        test,
        corpus.channels()
    );
    for src in &corpus.sources {
        let n = corpus.samples.iter().filter(|s| s.source == src.id).count();
        println!("  source {}: {} images", src.id, n);
    }
    Ok(EXIT_OK)
}

// ---------------------------------------------------------------- train

/// Re-expresses a source's samples in its own organ-vs-background
/// space: the source's single trusted foreground class becomes label 1,
/// everything else background, with full presence (within its own
/// space the annotation is complete). Returns the samples and the local
/// class names.
pub fn specific_view(
    samples: &[Sample],
    class_names: &[String],
    sources: &[SourceEntry],
    source_id: &str,
) -> Result<(Vec<Sample>, Vec<String>)> {
    let entry = sources
        .iter()
        .find(|s| s.id == source_id)
        .ok_or_else(|| Error::invalid_argument(format!("unknown source '{source_id}'")))?;
    let presence = entry.mapping.presence(class_names.len());
    let fg: Vec<u8> = (1..class_names.len())
        .filter(|&c| presence.get(c))
        .map(|c| c as u8)
        .collect();
    let [organ] = fg[..] else {
        return Err(Error::invalid_argument(format!(
            "a specific classifier needs a source trusting exactly one foreground class; \
             '{source_id}' trusts {fg:?}"
        )));
    };
    let name = class_names[organ as usize].clone();
    let mut out = Vec::new();
    for s in samples.iter().filter(|s| s.source == source_id) {
        let truth = s.eval_label();
        let local: Vec<u8> = truth.data.iter().map(|&v| u8::from(v == organ)).collect();
        out.push(Sample {
            id: s.id.clone(),
            subject: s.subject.clone(),
            source: s.source.clone(),
            feature: s.feature.clone(),
            label: LabelMap::new(truth.h, truth.w, local, truth.spacing)?,
            presence: PresenceArray::all_true(2),
            oracle_label: None,
        });
    }
    Ok((out, vec!["background".to_string(), name]))
}

/// One fully specified training request, shared by `cmd_train` and the
/// experiment grid.
struct TrainRequest<'a> {
    corpus: &'a Corpus,
    train_pool: Vec<Sample>,
    classifier: ClassifierKind,
    source: Option<String>,
    loss_label: String,
    steps: usize,
    batch: usize,
    learning_rate: f64,
    seed: u64,
    exclude_empty: bool,
    eval_cadence: usize,
    shrink_percent: f64,
}

struct TrainResult {
    checkpoint: Checkpoint,
    log: TrainLog,
    halt: Option<String>,
}

fn run_training(req: &TrainRequest) -> Result<TrainResult> {
    let loss: LossConfig = req.loss_label.parse()?;
    let (samples, class_names) = match req.classifier {
        ClassifierKind::Generic => (req.train_pool.clone(), req.corpus.class_names.clone()),
        ClassifierKind::Specific => {
            let source = req.source.as_deref().ok_or_else(|| {
                Error::invalid_argument("a specific classifier needs --source".to_string())
            })?;
            specific_view(&req.train_pool, &req.corpus.class_names, &req.corpus.sources, source)?
        }
    };
    if samples.is_empty() {
        return Err(Error::invalid_data(
            "no training samples left after source selection".to_string(),
        ));
    }
    let mut sampler = SamplerConfig::proportional(&samples, req.batch, req.seed)?;
    sampler.exclude_empty = req.exclude_empty;
    let net = NetConfig::for_classes(class_names.len(), req.seed);
    let mut cfg = TrainConfig::new(net, loss, sampler, req.seed);
    cfg.max_steps = req.steps;
    cfg.learning_rate = req.learning_rate;
    cfg.eval_cadence = req.eval_cadence;

    let test_pool: Vec<Sample> = req
        .corpus
        .test_indices()
        .iter()
        .map(|&i| req.corpus.samples[i].clone())
        .collect();
    let test_view = match req.classifier {
        ClassifierKind::Generic => test_pool,
        ClassifierKind::Specific => {
            specific_view(
                &test_pool,
                &req.corpus.class_names,
                &req.corpus.sources,
                req.source.as_deref().expect("checked above"),
            )?
            .0
        }
    };

    let outcome = train(&samples, &test_view, &cfg)?;
    Ok(TrainResult {
        checkpoint: Checkpoint {
            net,
            class_names,
            loss_label: req.loss_label.clone(),
            seed: req.seed,
            shrink_percent: req.shrink_percent,
            params: outcome.params,
        },
        log: outcome.log,
        halt: outcome.halt,
    })
}

fn cmd_train(a: &TrainArgs) -> Result<i32> {
    let corpus = load_corpus(&a.corpus)?;
    let train_pool: Vec<Sample> = corpus
        .train_indices()
        .iter()
        .map(|&i| corpus.samples[i].clone())
        .collect();
    let req = TrainRequest {
        corpus: &corpus,
        train_pool,
        classifier: a.classifier,
        source: a.source.clone(),
        loss_label: a.loss.clone(),
        steps: a.steps,
        batch: a.batch,
        learning_rate: a.lr,
        seed: a.seed,
        exclude_empty: a.exclude_empty,
        eval_cadence: a.eval_cadence,
        shrink_percent: 100.0,
    };
    let result = run_training(&req)?;
    save_checkpoint(&a.out, &result.checkpoint)?;
    let fg_names = &result.checkpoint.class_names[1..];
    write_train_log(&a.out.join("log.csv"), &result.log, fg_names)?;
    match &result.halt {
        Some(msg) => {
            eprintln!("training halted: {msg}");
            eprintln!("last-good checkpoint written to {}", a.out.display());
            Ok(EXIT_NUMERIC)
        }
        None => {
            let final_loss = result.log.steps.last().map_or(f64::NAN, |r| r.loss);
            println!(
                "checkpoint written to {} ({} steps, final loss {final_loss})",
                a.out.display(),
                result.log.steps.len()
            );
            Ok(EXIT_OK)
        }
    }
}

fn write_train_log(path: &Path, log: &TrainLog, fg_names: &[String]) -> Result<()> {
    let mut out = String::from("step,loss,learning_rate");
    for n in fg_names {
        out.push_str(&format!(",dice_{n}"));
    }
    out.push('\n');
    for r in &log.steps {
        out.push_str(&format!("{},{},{}", r.step, r.loss, r.learning_rate));
        if let Some(e) = log.evals.iter().find(|e| e.step == r.step) {
            for d in &e.dice {
                if d.is_nan() {
                    out.push(',');
                } else {
                    out.push_str(&format!(",{d}"));
                }
            }
        } else {
            for _ in fg_names {
                out.push(',');
            }
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------- eval

/// One line of the evaluation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub classifier: String,
    pub loss: String,
    pub shrink_percent: f64,
    pub class_name: String,
    pub mean_dice: f64,
    /// Test samples whose reference labels contained the class.
    pub samples: usize,
    pub seed: u64,
}

pub const REPORT_HEADER: &str = "classifier,loss,shrink_percent,class,mean_dice,samples,seed";

impl ReportRow {
    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.classifier,
            self.loss,
            self.shrink_percent,
            self.class_name,
            self.mean_dice,
            self.samples,
            self.seed
        )
    }

    pub fn parse_csv_line(line: &str) -> Result<Self> {
        let parts: Vec<&str> = line.split(',').collect();
        // loss presets may themselves contain '+' but never ','
        let [classifier, loss, shrink, class_name, dice, samples, seed] = parts[..] else {
            return Err(Error::invalid_data(format!(
                "report row needs 7 comma-separated fields, got {}: '{line}'",
                parts.len()
            )));
        };
        let field = |what: &str, e: std::num::ParseFloatError| {
            Error::invalid_data(format!("bad {what} in report row '{line}': {e}"))
        };
        Ok(ReportRow {
            classifier: classifier.to_string(),
            loss: loss.to_string(),
            shrink_percent: shrink.parse().map_err(|e| field("shrink", e))?,
            class_name: class_name.to_string(),
            mean_dice: dice.parse().map_err(|e| field("dice", e))?,
            samples: samples
                .parse()
                .map_err(|e| Error::invalid_data(format!("bad sample count in '{line}': {e}")))?,
            seed: seed
                .parse()
                .map_err(|e| Error::invalid_data(format!("bad seed in '{line}': {e}")))?,
        })
    }
}

pub fn report_csv(rows: &[ReportRow]) -> String {
    let mut out = String::from(REPORT_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.to_csv_line());
        out.push('\n');
    }
    out
}

/// Scores a checkpoint on one side of the corpus split. Generic
/// checkpoints are scored per global class; specific checkpoints score
/// their single organ against the complete reference labels re-expressed
/// in the organ's local space.
pub fn evaluate_checkpoint(ckpt: &Checkpoint, corpus: &Corpus, split: Split) -> Result<Vec<ReportRow>> {
    let idx = match split {
        Split::Train => corpus.train_indices(),
        Split::Test => corpus.test_indices(),
    };
    let pool: Vec<Sample> = idx.iter().map(|&i| corpus.samples[i].clone()).collect();
    let (samples, class_names, classifier) = if ckpt.class_names == corpus.class_names {
        (pool, ckpt.class_names.clone(), "generic".to_string())
    } else {
        let [_, name] = &ckpt.class_names[..] else {
            return Err(Error::invalid_data(format!(
                "checkpoint class space {:?} matches neither the corpus ({:?}) nor a \
                 single-organ view",
                ckpt.class_names, corpus.class_names
            )));
        };
        let Some(organ) = corpus.class_names.iter().position(|n| n == name) else {
            return Err(Error::invalid_data(format!(
                "checkpoint predicts '{name}' but the corpus has classes {:?}",
                corpus.class_names
            )));
        };
        let organ = organ as u8;
        let local: Vec<Sample> = pool
            .iter()
            .map(|s| {
                let truth = s.eval_label();
                let data: Vec<u8> = truth.data.iter().map(|&v| u8::from(v == organ)).collect();
                Ok(Sample {
                    id: s.id.clone(),
                    subject: s.subject.clone(),
                    source: s.source.clone(),
                    feature: s.feature.clone(),
                    label: LabelMap::new(truth.h, truth.w, data, truth.spacing)?,
                    presence: PresenceArray::all_true(2),
                    oracle_label: None,
                })
            })
            .collect::<Result<_>>()?;
        (local, ckpt.class_names.clone(), "specific".to_string())
    };
    if ckpt.net.output_channels != class_names.len() {
        return Err(Error::invalid_data(format!(
            "checkpoint emits {} channels but its class list names {}",
            ckpt.net.output_channels,
            class_names.len()
        )));
    }
    let report = class_dice_report(&ckpt.net, &ckpt.params, &samples)?;
    Ok(report
        .into_iter()
        .enumerate()
        .filter(|(_, (_, count))| *count > 0)
        .map(|(c, (mean, count))| ReportRow {
            classifier: classifier.clone(),
            loss: ckpt.loss_label.clone(),
            shrink_percent: ckpt.shrink_percent,
            class_name: class_names[c + 1].clone(),
            mean_dice: mean,
            samples: count,
            seed: ckpt.seed,
        })
        .collect())
}

fn cmd_eval(ckpt_dir: &Path, corpus_dir: &Path, split: Split, out: Option<&Path>) -> Result<i32> {
    let ckpt = load_checkpoint(ckpt_dir)?;
    let corpus = load_corpus(corpus_dir)?;
    let rows = evaluate_checkpoint(&ckpt, &corpus, split)?;
    let csv = report_csv(&rows);
    print!("{csv}");
    if let Some(p) = out {
        fs::write(p, &csv).map_err(|e| Error::io(p, e))?;
    }
    Ok(EXIT_OK)
}

// ---------------------------------------------------------------- experiment

fn default_max_steps() -> usize {
    5000
}
fn default_batch() -> usize {
    15
}
fn default_lr() -> f64 {
    1e-4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RosterEntry {
    /// "generic" or "specific".
    pub classifier: String,
    #[serde(default)]
    pub source: Option<String>,
    pub loss: String,
    #[serde(default)]
    pub exclude_empty: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub corpus: PathBuf,
    pub roster: Vec<RosterEntry>,
    pub shrink_levels: Vec<f64>,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    #[serde(default = "default_max_steps")]
    pub max_steps: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
}

/// One grid cell: a roster entry at a shrink level under one seed.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub index: usize,
    pub entry: RosterEntry,
    pub shrink: f64,
    pub repeat_seed: u64,
    /// Training seed, derived from (repeat seed, cell index).
    pub derived_seed: u64,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Enumerates the grid in a fixed order (seed-major, then shrink, then
/// roster) and derives each cell's training seed.
pub fn plan_cells(plan: &ExperimentPlan) -> Result<Vec<Cell>> {
    if plan.roster.is_empty() || plan.shrink_levels.is_empty() || plan.seeds.is_empty() {
        return Err(Error::invalid_argument(
            "experiment plan needs a roster, shrink levels, and seeds".to_string(),
        ));
    }
    for entry in &plan.roster {
        entry.loss.parse::<LossConfig>()?;
        match entry.classifier.as_str() {
            "generic" => {
                if entry.source.is_some() {
                    return Err(Error::invalid_argument(format!(
                        "generic roster entry must not name a source, got {:?}",
                        entry.source
                    )));
                }
            }
            "specific" => {
                if entry.source.is_none() {
                    return Err(Error::invalid_argument(
                        "specific roster entry needs a source".to_string(),
                    ));
                }
            }
            other => {
                return Err(Error::invalid_argument(format!(
                    "classifier must be 'generic' or 'specific', got '{other}'"
                )));
            }
        }
    }
    for &level in &plan.shrink_levels {
        if !SHRINK_LEVELS.iter().any(|&p| (p - level).abs() < 1e-9) {
            return Err(Error::invalid_argument(format!(
                "shrink level {level} not in {SHRINK_LEVELS:?}"
            )));
        }
    }
    let mut cells = Vec::new();
    for &repeat_seed in &plan.seeds {
        for &shrink in &plan.shrink_levels {
            for entry in &plan.roster {
                let index = cells.len();
                cells.push(Cell {
                    index,
                    entry: entry.clone(),
                    shrink,
                    repeat_seed,
                    derived_seed: splitmix64(repeat_seed ^ splitmix64(index as u64)),
                });
            }
        }
    }
    Ok(cells)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub index: usize,
    pub classifier: String,
    pub source: Option<String>,
    pub loss: String,
    pub shrink_percent: f64,
    pub seed: u64,
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AverageRow {
    pub classifier: String,
    pub loss: String,
    pub shrink_percent: f64,
    /// Mean of per-class mean dice over classes and seeds.
    pub mean_dice: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestRow {
    pub class_name: String,
    pub shrink_percent: f64,
    pub classifier: String,
    pub loss: String,
    pub mean_dice: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub cells: Vec<CellSummary>,
    pub averages: Vec<AverageRow>,
    /// Highest mean test dice per (class, shrink level).
    pub best_per_class: Vec<BestRow>,
    pub failed_cells: usize,
}

/// Runs one cell end to end: shrink, select, train, evaluate.
pub fn run_cell(corpus: &Corpus, plan: &ExperimentPlan, cell: &Cell) -> Result<Vec<ReportRow>> {
    let train_pool_full: Vec<Sample> = corpus
        .train_indices()
        .iter()
        .map(|&i| corpus.samples[i].clone())
        .collect();
    let kept = shrink_dataset(&train_pool_full, cell.shrink)?;
    let train_pool: Vec<Sample> = kept.iter().map(|&i| train_pool_full[i].clone()).collect();
    let classifier = match cell.entry.classifier.as_str() {
        "generic" => ClassifierKind::Generic,
        _ => ClassifierKind::Specific,
    };
    let req = TrainRequest {
        corpus,
        train_pool,
        classifier,
        source: cell.entry.source.clone(),
        loss_label: cell.entry.loss.clone(),
        steps: plan.max_steps,
        batch: plan.batch_size,
        learning_rate: plan.learning_rate,
        seed: cell.derived_seed,
        exclude_empty: cell.entry.exclude_empty,
        eval_cadence: 0,
        shrink_percent: cell.shrink,
    };
    let result = run_training(&req)?;
    if let Some(msg) = result.halt {
        return Err(Error::NonFinite(msg));
    }
    let mut rows = evaluate_checkpoint(&result.checkpoint, corpus, Split::Test)?;
    for r in &mut rows {
        r.classifier = cell_label(&cell.entry);
        r.seed = cell.repeat_seed;
    }
    Ok(rows)
}

fn cell_label(entry: &RosterEntry) -> String {
    match &entry.source {
        Some(s) => format!("specific:{s}"),
        None => "generic".to_string(),
    }
}

fn worker_count(cells: usize) -> usize {
    std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
        .min(cells.max(1))
}

/// Runs the full grid. Cell failures are recorded and the grid
/// continues; the summary says which cells failed and why.
pub fn run_experiment(plan: &ExperimentPlan) -> Result<(Vec<ReportRow>, ExperimentSummary)> {
    let corpus = Arc::new(load_corpus(&plan.corpus)?);
    let cells = plan_cells(plan)?;

    // the shrink grid must be nested before any training starts
    let train_pool: Vec<Sample> = corpus
        .train_indices()
        .iter()
        .map(|&i| corpus.samples[i].clone())
        .collect();
    let mut sorted_levels = plan.shrink_levels.clone();
    sorted_levels.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut prev: Option<Vec<usize>> = None;
    for &level in &sorted_levels {
        let kept = shrink_dataset(&train_pool, level)?;
        if let Some(p) = &prev {
            if !kept.iter().all(|i| p.contains(i)) {
                return Err(Error::invalid_data(format!(
                    "shrink level {level} is not nested inside the next larger level"
                )));
            }
        }
        prev = Some(kept);
    }

    let queue: Arc<Mutex<VecDeque<Cell>>> = Arc::new(Mutex::new(cells.iter().cloned().collect()));
    let (tx, rx) = mpsc::channel::<(usize, std::result::Result<Vec<ReportRow>, String>)>();
    let workers = worker_count(cells.len());
    let plan_arc = Arc::new(plan.clone());
    let mut handles = Vec::new();
    for _ in 0..workers {
        let queue = Arc::clone(&queue);
        let tx = tx.clone();
        let corpus = Arc::clone(&corpus);
        let plan = Arc::clone(&plan_arc);
        handles.push(std::thread::spawn(move || {
            loop {
                let cell = { queue.lock().expect("queue poisoned").pop_front() };
                let Some(cell) = cell else { break };
                let outcome = run_cell(&corpus, &plan, &cell).map_err(|e| e.to_string());
                if tx.send((cell.index, outcome)).is_err() {
                    break;
                }
            }
        }));
    }
    drop(tx);
    let mut results: Vec<Option<std::result::Result<Vec<ReportRow>, String>>> =
        (0..cells.len()).map(|_| None).collect();
    for (index, outcome) in rx {
        results[index] = Some(outcome);
    }
    for h in handles {
        h.join().expect("worker panicked");
    }

    let mut rows = Vec::new();
    let mut summaries = Vec::new();
    let mut failed = 0usize;
    for (cell, outcome) in cells.iter().zip(&results) {
        let outcome = outcome.as_ref().expect("every cell reports");
        let (status, error) = match outcome {
            Ok(cell_rows) => {
                rows.extend(cell_rows.iter().cloned());
                ("ok".to_string(), None)
            }
            Err(msg) => {
                failed += 1;
                ("failed".to_string(), Some(msg.clone()))
            }
        };
        summaries.push(CellSummary {
            index: cell.index,
            classifier: cell_label(&cell.entry),
            source: cell.entry.source.clone(),
            loss: cell.entry.loss.clone(),
            shrink_percent: cell.shrink,
            seed: cell.repeat_seed,
            status,
            error,
        });
    }
    rows.sort_by(|a, b| {
        (&a.classifier, &a.loss, &a.class_name)
            .cmp(&(&b.classifier, &b.loss, &b.class_name))
            .then(b.shrink_percent.partial_cmp(&a.shrink_percent).unwrap())
            .then(a.seed.cmp(&b.seed))
    });

    let summary = ExperimentSummary {
        averages: compute_averages(&rows),
        best_per_class: compute_best(&rows),
        cells: summaries,
        failed_cells: failed,
    };
    Ok((rows, summary))
}

fn compute_averages(rows: &[ReportRow]) -> Vec<AverageRow> {
    let mut keys: Vec<(String, String, f64)> = Vec::new();
    for r in rows {
        let key = (r.classifier.clone(), r.loss.clone(), r.shrink_percent);
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    keys.sort_by(|a, b| (&a.0, &a.1).cmp(&(&b.0, &b.1)).then(b.2.partial_cmp(&a.2).unwrap()));
    keys.into_iter()
        .map(|(classifier, loss, shrink)| {
            let group: Vec<&ReportRow> = rows
                .iter()
                .filter(|r| {
                    r.classifier == classifier && r.loss == loss && r.shrink_percent == shrink
                })
                .collect();
            let mean = group.iter().map(|r| r.mean_dice).sum::<f64>() / group.len() as f64;
            AverageRow {
                classifier,
                loss,
                shrink_percent: shrink,
                mean_dice: mean,
            }
        })
        .collect()
}

fn compute_best(rows: &[ReportRow]) -> Vec<BestRow> {
    let mut keys: Vec<(String, f64)> = Vec::new();
    for r in rows {
        let key = (r.class_name.clone(), r.shrink_percent);
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    keys.sort_by(|a, b| a.0.cmp(&b.0).then(b.1.partial_cmp(&a.1).unwrap()));
    keys.into_iter()
        .map(|(class_name, shrink)| {
            // average over seeds per (classifier, loss), then take the max
            let mut contenders: Vec<(String, String, f64)> = Vec::new();
            for r in rows.iter().filter(|r| r.class_name == class_name && r.shrink_percent == shrink) {
                let key = (r.classifier.clone(), r.loss.clone());
                if !contenders.iter().any(|(c, l, _)| (c, l) == (&key.0, &key.1)) {
                    let group: Vec<f64> = rows
                        .iter()
                        .filter(|x| {
                            x.class_name == class_name
                                && x.shrink_percent == shrink
                                && x.classifier == key.0
                                && x.loss == key.1
                        })
                        .map(|x| x.mean_dice)
                        .collect();
                    let mean = group.iter().sum::<f64>() / group.len() as f64;
                    contenders.push((key.0, key.1, mean));
                }
            }
            let best = contenders
                .into_iter()
                .max_by(|a, b| a.2.partial_cmp(&b.2).unwrap().then(b.0.cmp(&a.0)))
                .expect("key came from a row");
            BestRow {
                class_name,
                shrink_percent: shrink,
                classifier: best.0,
                loss: best.1,
                mean_dice: best.2,
            }
        })
        .collect()
}

fn cmd_experiment(plan_path: &Path) -> Result<i32> {
    let text = fs::read(plan_path).map_err(|e| Error::io(plan_path, e))?;
    let plan: ExperimentPlan = serde_json::from_slice(&text).map_err(|e| Error::json(plan_path, e))?;
    let (rows, summary) = run_experiment(&plan)?;
    fs::create_dir_all(&plan.out_dir).map_err(|e| Error::io(&plan.out_dir, e))?;
    let csv_path = plan.out_dir.join("report.csv");
    fs::write(&csv_path, report_csv(&rows)).map_err(|e| Error::io(&csv_path, e))?;
    let json_path = plan.out_dir.join("summary.json");
    let json = serde_json::to_string_pretty(&summary).map_err(|e| Error::json(&json_path, e))?;
    fs::write(&json_path, format!("{json}\n")).map_err(|e| Error::io(&json_path, e))?;
    println!(
        "experiment finished: {} cells, {} failed; report at {}",
        summary.cells.len(),
        summary.failed_cells,
        csv_path.display()
    );
    if summary.failed_cells > 0 {
        Ok(EXIT_PARTIAL)
    } else {
        Ok(EXIT_OK)
    }
}

// ---------------------------------------------------------------- gradcheck

/// One line of the gradient-verification table.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckRow {
    pub name: String,
    pub max_rel_error: f64,
    pub passed: bool,
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| lo + (hi - lo) * rng.gen::<f64>()).collect();
    Tensor::new(shape, data).expect("shape/data agree")
}

/// Loss-check fixture: logits with a comfortable per-pixel argmax
/// margin (so prediction-dependent masks cannot flip under the
/// finite-difference probe), labels cycling through all classes, and a
/// presence array that distrusts background.
fn loss_fixture(rng: &mut ChaCha8Rng) -> (Tensor, LabelMap, PresenceArray) {
    let (c, h, w) = (3usize, 4usize, 4usize);
    let hw = h * w;
    let mut logits = rand_tensor(rng, vec![c, h, w], -1.0, 1.0);
    for j in 0..hw {
        let winner = rng.gen_range(0..c);
        logits.data_mut()[winner * hw + j] += 2.0;
    }
    let labels: Vec<u8> = (0..hw).map(|j| (j % c) as u8).collect();
    let y = LabelMap::new(h, w, labels, crate::labelcore::Spacing::isotropic(1.0)).unwrap();
    let k = PresenceArray::new(vec![false, true, true]);
    (logits, y, k)
}

fn check_case<F>(name: &str, params: &[Tensor], build: F) -> Result<CheckRow>
where
    F: Fn(&mut Tape, &[ValueId]) -> Result<ValueId>,
{
    let report = finite_difference_check(params, DEFAULT_STEP, build)?;
    Ok(CheckRow {
        name: name.to_string(),
        max_rel_error: report.max_rel_error,
        passed: report.passes(DEFAULT_TOLERANCE),
    })
}

/// Finite-difference verification across arithmetic ops, structural
/// network ops, every loss preset, and a complete miniature network.
pub fn gradient_check_suite() -> Result<Vec<CheckRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6ead);
    let mut rows = Vec::new();

    let x = rand_tensor(&mut rng, vec![2, 3], -0.4, 0.4);
    let y = rand_tensor(&mut rng, vec![2, 3], 0.5, 1.5);
    rows.push(check_case("arith_add_mul_div", &[x, y], |tape, ids| {
        let prod = tape.mul(ids[0], ids[1])?;
        let quot = tape.div(ids[0], ids[1])?;
        let s = tape.add(prod, quot)?;
        Ok(tape.sum(s))
    })?);

    let x = rand_tensor(&mut rng, vec![3, 3], -0.4, 0.4);
    rows.push(check_case("affine_log_powf_relu", &[x], |tape, ids| {
        let shifted = tape.affine(ids[0], 0.9, 0.6); // stays positive
        let logged = tape.log(shifted, 1e-12);
        let powed = tape.powf(shifted, 1.7);
        let rectified = tape.relu(shifted); // always active: gradient 1
        let a = tape.add(logged, powed)?;
        let b = tape.add(a, rectified)?;
        Ok(tape.sum(b))
    })?);

    let input = rand_tensor(&mut rng, vec![2, 4, 4], -1.0, 1.0);
    let kernel = rand_tensor(&mut rng, vec![3, 2, 3, 3], -0.5, 0.5);
    let bias = rand_tensor(&mut rng, vec![3], -0.2, 0.2);
    rows.push(check_case("conv2d", &[input, kernel, bias], |tape, ids| {
        let out = tape.conv2d(ids[0], ids[1], ids[2])?;
        Ok(tape.sum(out))
    })?);

    // distinct, well-separated values keep the pooling argmax stable
    let mut pool_in = Tensor::zeros(vec![2, 4, 4]);
    for (i, v) in pool_in.data_mut().iter_mut().enumerate() {
        *v = ((i * 53) % 32) as f64 * 0.11 + 0.05 * ((i % 7) as f64);
    }
    rows.push(check_case("max_pool2", &[pool_in], |tape, ids| {
        let out = tape.max_pool2(ids[0])?;
        Ok(tape.sum(out))
    })?);

    let up_in = rand_tensor(&mut rng, vec![3, 2, 2], -1.0, 1.0);
    let up_w = rand_tensor(&mut rng, vec![3, 4, 4], -1.0, 1.0);
    rows.push(check_case("upsample2", &[up_in], move |tape, ids| {
        let out = tape.upsample2(ids[0])?;
        tape.weighted_sum(out, up_w.clone())
    })?);

    let cat_a = rand_tensor(&mut rng, vec![2, 3, 3], -1.0, 1.0);
    let cat_b = rand_tensor(&mut rng, vec![1, 3, 3], -1.0, 1.0);
    let cat_w = rand_tensor(&mut rng, vec![3, 3, 3], -1.0, 1.0);
    rows.push(check_case("concat_channels", &[cat_a, cat_b], move |tape, ids| {
        let out = tape.concat_channels(ids[0], ids[1])?;
        tape.weighted_sum(out, cat_w.clone())
    })?);

    let sm_in = rand_tensor(&mut rng, vec![3, 2, 2], -2.0, 2.0);
    let sm_w = rand_tensor(&mut rng, vec![3, 2, 2], -1.0, 1.0);
    rows.push(check_case("channel_softmax", &[sm_in], move |tape, ids| {
        let out = tape.channel_softmax(ids[0])?;
        tape.weighted_sum(out, sm_w.clone())
    })?);

    let presets = [
        "dice_soft",
        "dice_log",
        "xent_unmasked",
        "xent_base",
        "xent_or",
        "xent_plus",
        "ftl",
        "mae_base",
        "mae_or",
        "mae_plus",
        "xent_or+0.1*dice_soft",
    ];
    for preset in presets {
        let loss: LossConfig = preset.parse()?;
        let (logits, y, k) = loss_fixture(&mut rng);
        let name = format!("loss_{preset}");
        rows.push(check_case(&name, &[logits], move |tape, ids| {
            let prob = tape.channel_softmax(ids[0])?;
            loss.record(tape, prob, &y, &k)
        })?);
    }

    // a complete forward pass through the miniature network; the mask
    // here must not depend on predictions (an untrained net sits near
    // argmax ties, which the probe would flip) so the label-driven
    // preset carries the architecture check and the prediction-driven
    // masks keep their dedicated wide-margin fixtures above; seed and
    // input are pinned to a combination whose relu preactivations and
    // pooling margins all clear the probe step
    let cfg = NetConfig {
        levels: 1,
        base_channels: 2,
        input_channels: 1,
        output_channels: 3,
        kernel_size: 3,
        seed: 5,
    };
    let init = init_xavier(&cfg)?;
    let x = Tensor::new(vec![1, 8, 8], (0..64).map(|i| ((i * 37 % 64) as f64) / 64.0).collect())?;
    let labels: Vec<u8> = (0..64).map(|j| ((j / 8) % 3) as u8).collect();
    let y = LabelMap::new(8, 8, labels, crate::labelcore::Spacing::isotropic(1.0))?;
    let k = PresenceArray::new(vec![false, true, true]);
    let loss: LossConfig = "xent_base+0.1*dice_soft".parse()?;
    rows.push(check_case("full_network", &init.tensors, move |tape, ids| {
        let xid = tape.constant(x.clone());
        let prob = forward_on_tape(&cfg, tape, ids, xid)?;
        loss.record(tape, prob, &y, &k)
    })?);

    Ok(rows)
}

fn cmd_gradcheck() -> Result<i32> {
    let start = Instant::now();
    let rows = gradient_check_suite()?;
    let width = rows.iter().map(|r| r.name.len()).max().unwrap_or(12).max(12);
    println!("{:width$}  {:>13}  result", "check", "max rel error");
    let mut all_passed = true;
    for r in &rows {
        println!(
            "{:width$}  {:>13.3e}  {}",
            r.name,
            r.max_rel_error,
            if r.passed { "pass" } else { "FAIL" }
        );
        all_passed &= r.passed;
    }
    println!(
        "{} checks in {:.2}s (tolerance {DEFAULT_TOLERANCE:.0e}, step {DEFAULT_STEP:.0e})",
        rows.len(),
        start.elapsed().as_secs_f64()
    );
    Ok(if all_passed { EXIT_OK } else { EXIT_NUMERIC })
}

// ---------------------------------------------------------------- sanity

/// Quick structural self-check used by tests: the stream produced by a
/// sampler over a corpus' training side is well formed.
pub fn sampler_sanity(corpus: &Corpus, batch: usize, seed: u64) -> Result<()> {
    let pool: Vec<Sample> = corpus
        .train_indices()
        .iter()
        .map(|&i| corpus.samples[i].clone())
        .collect();
    let cfg = SamplerConfig::proportional(&pool, batch, seed)?;
    let mut stream = stratified_batches(&pool, &cfg)?;
    let first = stream.next().expect("stream is infinite");
    if first.len() != batch {
        return Err(Error::invalid_data(format!(
            "sampler produced {} of {batch} requested slots",
            first.len()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(seed: u64) -> GendataSpec {
        // keeps the default 64x64 canvas: the stock shapes need the room
        let mut spec = GendataSpec::default_three_source(seed);
        spec.n = 40;
        spec
    }

    #[test]
    fn default_recipe_yields_the_advertised_split() {
        let spec = GendataSpec::default_three_source(7);
        assert_eq!(spec.n, 250);
        assert!((spec.test_fraction - 0.2).abs() < 1e-12);
        // 250 images, 2 per subject, 20% test: 50 test + 200 train
        let corpus = build_corpus(&spec).unwrap();
        assert_eq!(corpus.train_indices().len(), 200);
        assert_eq!(corpus.test_indices().len(), 50);
        assert_eq!(corpus.channels(), 4);
        let small = corpus.samples.iter().filter(|s| s.source == "small_oval_only").count();
        let big = corpus.samples.iter().filter(|s| s.source == "big_oval_only").count();
        let bar = corpus.samples.iter().filter(|s| s.source == "bar_only").count();
        assert_eq!(small + big + bar, 250);
        assert!(small < big && small < bar, "small_oval source must be the smallest");
    }

    #[test]
    fn invalid_empty_fraction_is_rejected_by_name() {
        let mut spec = small_spec(1);
        spec.synthetic.empty_fraction = 1.5;
        let err = build_corpus(&spec).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("empty fraction") && msg.contains("1.5"), "{msg}");
    }

    #[test]
    fn corpus_build_is_deterministic() {
        let a = build_corpus(&small_spec(3)).unwrap();
        let b = build_corpus(&small_spec(3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn specific_view_relabels_one_organ() {
        let corpus = build_corpus(&small_spec(5)).unwrap();
        let (view, names) = specific_view(
            &corpus.samples,
            &corpus.class_names,
            &corpus.sources,
            "bar_only",
        )
        .unwrap();
        assert_eq!(names, vec!["background", "bar"]);
        assert!(!view.is_empty());
        for s in &view {
            assert!(s.label.data.iter().all(|&v| v <= 1));
            assert!(s.presence.all_trusted());
            assert_eq!(s.source, "bar_only");
        }
        // complete reference labels must back the local view: a bar pixel
        // in the oracle is a 1 here
        let original: Vec<&Sample> = corpus
            .samples
            .iter()
            .filter(|s| s.source == "bar_only")
            .collect();
        for (o, v) in original.iter().zip(&view) {
            for (a, b) in o.eval_label().data.iter().zip(&v.label.data) {
                assert_eq!(*b, u8::from(*a == 3));
            }
        }
    }

    #[test]
    fn specific_view_rejects_unknown_and_multiclass_sources() {
        let corpus = build_corpus(&small_spec(5)).unwrap();
        assert!(specific_view(&corpus.samples, &corpus.class_names, &corpus.sources, "nope").is_err());

        // fabricate a source trusting two classes
        let mut sources = corpus.sources.clone();
        sources[0].mapping.trusted = vec![false, true, true, false];
        let err =
            specific_view(&corpus.samples, &corpus.class_names, &corpus.sources[..0], "x").unwrap_err();
        assert!(err.to_string().contains("unknown source"));
        let err2 = specific_view(&corpus.samples, &corpus.class_names, &sources, &sources[0].id)
            .unwrap_err();
        assert!(err2.to_string().contains("exactly one"), "{err2}");
    }

    #[test]
    fn report_rows_round_trip_through_csv() {
        let row = ReportRow {
            classifier: "specific:bar_only".to_string(),
            loss: "xent_or+0.1*dice_soft".to_string(),
            shrink_percent: 2.5,
            class_name: "bar".to_string(),
            mean_dice: 0.8185234117,
            samples: 23,
            seed: 31,
        };
        let line = row.to_csv_line();
        let back = ReportRow::parse_csv_line(&line).unwrap();
        assert_eq!(back, row);
        assert_eq!(back.mean_dice.to_bits(), row.mean_dice.to_bits());
    }

    #[test]
    fn grid_enumeration_matches_the_cross_product() {
        // 4 classifiers x 3 loss presets as 12 roster entries, one shrink,
        // one seed: 12 cells
        let mut roster = Vec::new();
        for loss in ["xent_base", "xent_or", "xent_plus"] {
            roster.push(RosterEntry {
                classifier: "generic".to_string(),
                source: None,
                loss: loss.to_string(),
                exclude_empty: false,
            });
            for src in ["a", "b", "c"] {
                roster.push(RosterEntry {
                    classifier: "specific".to_string(),
                    source: Some(src.to_string()),
                    loss: loss.to_string(),
                    exclude_empty: false,
                });
            }
        }
        let plan = ExperimentPlan {
            corpus: PathBuf::from("unused"),
            roster,
            shrink_levels: vec![80.0],
            seeds: vec![1],
            out_dir: PathBuf::from("unused"),
            max_steps: 1,
            batch_size: 2,
            learning_rate: 1e-4,
        };
        let cells = plan_cells(&plan).unwrap();
        assert_eq!(cells.len(), 12);
        // derived seeds are distinct and reproducible
        let seeds: std::collections::BTreeSet<u64> = cells.iter().map(|c| c.derived_seed).collect();
        assert_eq!(seeds.len(), 12);
        let again = plan_cells(&plan).unwrap();
        assert_eq!(cells, again);
    }

    #[test]
    fn plans_reject_bad_rosters_and_levels() {
        let base = ExperimentPlan {
            corpus: PathBuf::from("x"),
            roster: vec![RosterEntry {
                classifier: "generic".to_string(),
                source: None,
                loss: "xent_or".to_string(),
                exclude_empty: false,
            }],
            shrink_levels: vec![80.0],
            seeds: vec![1],
            out_dir: PathBuf::from("y"),
            max_steps: 10,
            batch_size: 4,
            learning_rate: 1e-4,
        };
        let mut bad_loss = base.clone();
        bad_loss.roster[0].loss = "nonsense".to_string();
        assert!(plan_cells(&bad_loss).is_err());

        let mut bad_level = base.clone();
        bad_level.shrink_levels = vec![33.0];
        assert!(plan_cells(&bad_level).is_err());

        let mut missing_source = base.clone();
        missing_source.roster[0].classifier = "specific".to_string();
        assert!(plan_cells(&missing_source).is_err());

        let mut extra_source = base;
        extra_source.roster[0].source = Some("a".to_string());
        assert!(plan_cells(&extra_source).is_err());
    }

    #[test]
    fn gradient_suite_covers_ops_losses_and_the_full_network() {
        let rows = gradient_check_suite().unwrap();
        assert!(rows.iter().any(|r| r.name == "conv2d"));
        assert!(rows.iter().any(|r| r.name == "loss_xent_plus"));
        assert!(rows.iter().any(|r| r.name == "full_network"));
        for r in &rows {
            assert!(
                r.passed,
                "{} failed with max rel error {}",
                r.name, r.max_rel_error
            );
        }
    }

    #[test]
    fn exit_codes_map_by_error_family() {
        assert_eq!(exit_code_for(&Error::invalid_argument("x".to_string())), EXIT_CONFIG);
        assert_eq!(exit_code_for(&Error::NonFinite("x".to_string())), EXIT_NUMERIC);
    }
}
