//! Stratified batch composition.
//!
//! Training batches hold a fixed count from each source (largest-
//! remainder rounding of the configured proportions) and, within each
//! source, a fixed split between foreground-bearing and empty images.
//! Sampling is with replacement: each stratum cycles through seeded
//! reshuffles of its members, so the stream is infinite and every batch
//! satisfies the composition exactly.

use crate::dataset::{largest_remainder_counts, Sample};
use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub batch_size: usize,
    /// (source id, proportion of the batch); proportions must sum to 1.
    pub sources: Vec<(String, f64)>,
    /// Share of each source's slots given to foreground-bearing images.
    pub foreground_fraction: f64,
    /// Drop empty images entirely: every slot is foreground-bearing.
    pub exclude_empty: bool,
    pub seed: u64,
}

impl SamplerConfig {
    /// Proportions matching each source's share of the samples, so the
    /// stream reflects the corpus as collected.
    pub fn proportional(samples: &[Sample], batch_size: usize, seed: u64) -> Result<Self> {
        let mut sources: Vec<(String, f64)> = Vec::new();
        for s in samples {
            if !sources.iter().any(|(id, _)| id == &s.source) {
                sources.push((s.source.clone(), 0.0));
            }
        }
        if sources.is_empty() {
            return Err(Error::invalid_argument("sampler needs a non-empty dataset".to_string()));
        }
        let n = samples.len() as f64;
        for (id, p) in &mut sources {
            *p = samples.iter().filter(|s| &s.source == id).count() as f64 / n;
        }
        Ok(SamplerConfig {
            batch_size,
            sources,
            foreground_fraction: 0.5,
            exclude_empty: false,
            seed,
        })
    }

    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid_argument("batch size must be positive".to_string()));
        }
        if self.sources.is_empty() {
            return Err(Error::invalid_argument("sampler needs at least one source".to_string()));
        }
        let total: f64 = self.sources.iter().map(|(_, p)| p).sum();
        if (total - 1.0).abs() > 1e-9 || self.sources.iter().any(|(_, p)| *p < 0.0) {
            return Err(Error::invalid_argument(format!(
                "source proportions must be non-negative and sum to 1, got {:?}",
                self.sources
            )));
        }
        if !(0.0..=1.0).contains(&self.foreground_fraction) {
            return Err(Error::invalid_argument(format!(
                "foreground fraction must lie in [0, 1], got {}",
                self.foreground_fraction
            )));
        }
        Ok(())
    }
}

/// One with-replacement queue over a fixed membership list.
#[derive(Debug)]
struct Stratum {
    members: Vec<usize>,
    queue: Vec<usize>,
    rng: ChaCha8Rng,
}

impl Stratum {
    fn new(members: Vec<usize>, seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Stratum {
            members,
            queue: Vec::new(),
            rng,
        }
    }

    fn next(&mut self) -> usize {
        if self.queue.is_empty() {
            self.queue = self.members.clone();
            self.queue.shuffle(&mut self.rng);
        }
        self.queue.pop().expect("stratum verified non-empty")
    }
}

/// Infinite deterministic stream of batches; each item is a list of
/// indices into the samples the stream was built from.
#[derive(Debug)]
pub struct BatchStream {
    strata: Vec<(Stratum, usize)>,
}

impl Iterator for BatchStream {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        let mut batch = Vec::new();
        for (stratum, count) in &mut self.strata {
            for _ in 0..*count {
                batch.push(stratum.next());
            }
        }
        Some(batch)
    }
}

/// Builds the batch stream. Every source receives its largest-remainder
/// share of the batch; odd per-source counts give the extra slot to the
/// foreground side. Errors name the stratum that has no samples to draw
/// from.
pub fn stratified_batches(samples: &[Sample], cfg: &SamplerConfig) -> Result<BatchStream> {
    cfg.validate()?;
    let per_source = largest_remainder_counts(
        cfg.batch_size,
        &cfg.sources.iter().map(|(_, p)| *p).collect::<Vec<f64>>(),
        1.0,
    );
    let mut strata = Vec::new();
    for (si, ((id, _), &count)) in cfg.sources.iter().zip(&per_source).enumerate() {
        if count == 0 {
            continue;
        }
        let fg: Vec<usize> = (0..samples.len())
            .filter(|&i| samples[i].source == *id && samples[i].has_foreground())
            .collect();
        let empty: Vec<usize> = (0..samples.len())
            .filter(|&i| samples[i].source == *id && !samples[i].has_foreground())
            .collect();
        if fg.is_empty() && empty.is_empty() {
            return Err(Error::invalid_data(format!(
                "source '{id}' has no samples to draw from"
            )));
        }
        let fg_count = if cfg.exclude_empty {
            count
        } else {
            (((count as f64) * cfg.foreground_fraction).round() as usize).min(count)
        };
        let empty_count = count - fg_count;
        if fg_count > 0 {
            if fg.is_empty() {
                return Err(Error::invalid_data(format!(
                    "source '{id}' has no foreground-bearing samples"
                )));
            }
            strata.push((Stratum::new(fg, cfg.seed, 2 * si as u64 + 1), fg_count));
        }
        if empty_count > 0 {
            if empty.is_empty() {
                return Err(Error::invalid_data(format!(
                    "source '{id}' has no empty samples for the empty half of its slots"
                )));
            }
            strata.push((Stratum::new(empty, cfg.seed, 2 * si as u64 + 2), empty_count));
        }
    }
    Ok(BatchStream { strata })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labelcore::{FeatureImage, LabelMap, Spacing};
    use crate::masking::PresenceArray;

    fn sample(source: &str, fg: bool, n: usize) -> Sample {
        let labels = if fg { vec![1u8, 0, 0, 0] } else { vec![0u8; 4] };
        let spacing = Spacing::isotropic(1.0);
        Sample {
            id: format!("{source}-{n}"),
            subject: format!("{source}-subj{n}"),
            source: source.to_string(),
            feature: FeatureImage::new(1, 2, 2, vec![0.1; 4], spacing).unwrap(),
            label: LabelMap::new(2, 2, labels, spacing).unwrap(),
            presence: PresenceArray::all_true(2),
            oracle_label: None,
        }
    }

    fn corpus() -> Vec<Sample> {
        let mut v = Vec::new();
        for i in 0..6 {
            v.push(sample("a", i % 2 == 0, i));
        }
        for i in 0..6 {
            v.push(sample("b", i % 2 == 0, i));
        }
        v
    }

    fn config(batch: usize) -> SamplerConfig {
        SamplerConfig {
            batch_size: batch,
            sources: vec![("a".to_string(), 0.5), ("b".to_string(), 0.5)],
            foreground_fraction: 0.5,
            exclude_empty: false,
            seed: 17,
        }
    }

    #[test]
    fn every_batch_has_the_configured_composition() {
        let samples = corpus();
        let stream = stratified_batches(&samples, &config(8)).unwrap();
        for batch in stream.take(50) {
            assert_eq!(batch.len(), 8);
            for src in ["a", "b"] {
                let from = |fg: bool| {
                    batch
                        .iter()
                        .filter(|&&i| samples[i].source == src && samples[i].has_foreground() == fg)
                        .count()
                };
                assert_eq!(from(true), 2, "source {src} foreground");
                assert_eq!(from(false), 2, "source {src} empty");
            }
        }
    }

    #[test]
    fn odd_source_count_favours_foreground() {
        let samples = corpus();
        let mut cfg = config(6);
        cfg.sources = vec![("a".to_string(), 0.5), ("b".to_string(), 0.5)];
        let stream = stratified_batches(&samples, &cfg).unwrap();
        for batch in stream.take(10) {
            // 3 slots per source: 2 foreground + 1 empty
            for src in ["a", "b"] {
                let fg = batch
                    .iter()
                    .filter(|&&i| samples[i].source == src && samples[i].has_foreground())
                    .count();
                assert_eq!(fg, 2, "source {src}");
            }
        }
    }

    #[test]
    fn exclude_empty_draws_only_foreground() {
        let samples = corpus();
        let mut cfg = config(8);
        cfg.exclude_empty = true;
        let stream = stratified_batches(&samples, &cfg).unwrap();
        for batch in stream.take(20) {
            assert!(batch.iter().all(|&i| samples[i].has_foreground()));
        }
    }

    #[test]
    fn stream_is_deterministic_per_seed() {
        let samples = corpus();
        let a: Vec<Vec<usize>> = stratified_batches(&samples, &config(8))
            .unwrap()
            .take(30)
            .collect();
        let b: Vec<Vec<usize>> = stratified_batches(&samples, &config(8))
            .unwrap()
            .take(30)
            .collect();
        assert_eq!(a, b);
        let mut other = config(8);
        other.seed = 18;
        let c: Vec<Vec<usize>> = stratified_batches(&samples, &other)
            .unwrap()
            .take(30)
            .collect();
        assert_ne!(a, c);
    }

    #[test]
    fn replacement_covers_all_members_each_cycle() {
        // a stratum of 3 foreground images must all appear in any
        // 3 consecutive draws from that stratum
        let samples = corpus();
        let stream = stratified_batches(&samples, &config(8)).unwrap();
        let batches: Vec<Vec<usize>> = stream.take(30).collect();
        let mut draws_a_fg: Vec<usize> = Vec::new();
        for b in &batches {
            for &i in b {
                if samples[i].source == "a" && samples[i].has_foreground() {
                    draws_a_fg.push(i);
                }
            }
        }
        for window in draws_a_fg.chunks(3).take(10) {
            if window.len() == 3 {
                let unique: std::collections::BTreeSet<usize> = window.iter().copied().collect();
                assert_eq!(unique.len(), 3, "a shuffled cycle visits each member once");
            }
        }
    }

    #[test]
    fn missing_stratum_is_reported_by_name() {
        // source "b" has only foreground images: the empty half cannot be filled
        let mut samples = corpus();
        samples.retain(|s| !(s.source == "b" && !s.has_foreground()));
        let err = stratified_batches(&samples, &config(8)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains('b') && msg.contains("empty"), "{msg}");
    }

    #[test]
    fn proportional_config_mirrors_source_sizes() {
        let mut samples = corpus(); // 6 + 6
        samples.truncate(9); // a: 6, b: 3
        let cfg = SamplerConfig::proportional(&samples, 6, 0).unwrap();
        let a = cfg.sources.iter().find(|(id, _)| id == "a").unwrap().1;
        let b = cfg.sources.iter().find(|(id, _)| id == "b").unwrap().1;
        assert!((a - 2.0 / 3.0).abs() < 1e-12);
        assert!((b - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn bad_proportions_are_rejected() {
        let samples = corpus();
        let mut cfg = config(8);
        cfg.sources = vec![("a".to_string(), 0.9), ("b".to_string(), 0.3)];
        assert!(stratified_batches(&samples, &cfg).is_err());
    }
}
