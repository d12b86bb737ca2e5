//! Corpus assembly: partial annotation, merging heterogeneous sources,
//! and subject-grouped splitting/shrinking.
//!
//! The central object is [`Sample`]: one image with labels in the shared
//! global class space, a presence array saying which classes its source
//! actually annotated, and (when derived from complete data) the
//! original complete labels kept aside for honest evaluation.

mod sampler;
mod store;
mod synthetic;

pub use sampler::{stratified_batches, BatchStream, SamplerConfig};
pub use store::{load_corpus, store_corpus, Corpus, DatasetManifest, SampleEntry, SourceEntry};
pub use synthetic::{generate_synthetic, ShapeClass, ShapeFamily, SyntheticSpec};

use crate::error::{Error, Result};
use crate::labelcore::LabelMap;
use crate::masking::{remap_labels, ClassMapping, PresenceArray};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeSet;

/// One image with everything training needs to trust it correctly.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub subject: String,
    pub source: String,
    pub feature: crate::labelcore::FeatureImage,
    /// Labels in the global class space; classes the source did not
    /// annotate read as background here.
    pub label: LabelMap,
    pub presence: PresenceArray,
    /// Complete labels retained when partiality was introduced
    /// synthetically; evaluation-only, never visible to training.
    pub oracle_label: Option<LabelMap>,
}

impl Sample {
    /// Labels to evaluate against: the retained complete ones if present.
    pub fn eval_label(&self) -> &LabelMap {
        self.oracle_label.as_ref().unwrap_or(&self.label)
    }

    pub fn has_foreground(&self) -> bool {
        self.label.data.iter().any(|&v| v != 0)
    }
}

/// An extra class painted into a sample with its presence left false,
/// for exercising the mapped-but-untrusted pathway.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvalidatedBand {
    /// Class value written into the band; must not be a trusted class.
    pub class: u8,
    /// Chebyshev radius around kept foreground that gets relabelled.
    pub radius: usize,
}

/// How to degrade complete annotations into a partial source.
#[derive(Debug, Clone, PartialEq)]
pub struct PartialSpec {
    pub source_id: String,
    /// Class values whose labels survive. Include 0 to keep trusting
    /// background; without it, background is marked unannotated.
    pub trusted: Vec<u8>,
    pub band: Option<InvalidatedBand>,
}

impl PartialSpec {
    pub fn new(source_id: &str, trusted: &[u8]) -> Self {
        PartialSpec {
            source_id: source_id.to_string(),
            trusted: trusted.to_vec(),
            band: None,
        }
    }

    /// The identity mapping that describes this source after
    /// degradation: every class maps to itself, only the kept ones are
    /// trusted, and a band class stays untrusted even though mapped.
    pub fn mapping(&self, channels: usize) -> Result<ClassMapping> {
        self.validate(channels)?;
        Ok(ClassMapping::identity_trusting(channels, &self.trusted))
    }

    fn validate(&self, channels: usize) -> Result<()> {
        if self.trusted.is_empty() {
            return Err(Error::invalid_argument(
                "partial source must keep at least one class".to_string(),
            ));
        }
        for &c in &self.trusted {
            if c as usize >= channels {
                return Err(Error::invalid_argument(format!(
                    "trusted class {c} outside global range 0..{channels}"
                )));
            }
        }
        if let Some(b) = &self.band {
            if b.class as usize >= channels {
                return Err(Error::invalid_argument(format!(
                    "band class {} outside global range 0..{channels}",
                    b.class
                )));
            }
            if self.trusted.contains(&b.class) || b.class == 0 {
                return Err(Error::invalid_argument(format!(
                    "band class {} must be a foreground class outside the trusted set",
                    b.class
                )));
            }
        }
        Ok(())
    }
}

/// Degrades completely annotated samples into a partial source: labels
/// of non-kept foreground classes become background, the presence array
/// records exactly which classes survived, and the complete labels move
/// into `oracle_label`. Features are never touched.
pub fn make_partial(samples: &[Sample], spec: &PartialSpec, channels: usize) -> Result<Vec<Sample>> {
    spec.validate(channels)?;
    let mut out = Vec::with_capacity(samples.len());
    for s in samples {
        let complete = s.oracle_label.clone().unwrap_or_else(|| s.label.clone());
        let mut data = complete.data.clone();
        for v in &mut data {
            if *v != 0 && !spec.trusted.contains(v) {
                *v = 0;
            }
        }
        if let Some(b) = &spec.band {
            paint_band(&mut data, s.label.h, s.label.w, b);
        }
        let presence = PresenceArray::from_trusted(channels, &spec.trusted);
        out.push(Sample {
            id: s.id.clone(),
            subject: s.subject.clone(),
            source: spec.source_id.clone(),
            feature: s.feature.clone(),
            label: LabelMap::new(s.label.h, s.label.w, data, s.label.spacing)?,
            presence,
            oracle_label: Some(complete),
        });
    }
    Ok(out)
}

/// Relabels background pixels within `radius` (Chebyshev) of surviving
/// foreground as the band class. Presence for that class stays false.
fn paint_band(data: &mut [u8], h: usize, w: usize, band: &InvalidatedBand) {
    let mut near: Vec<bool> = data.iter().map(|&v| v != 0).collect();
    for _ in 0..band.radius {
        let prev = near.clone();
        for y in 0..h {
            for x in 0..w {
                if prev[y * w + x] {
                    continue;
                }
                let touch = (y.saturating_sub(1)..=(y + 1).min(h - 1)).any(|yy| {
                    (x.saturating_sub(1)..=(x + 1).min(w - 1)).any(|xx| prev[yy * w + xx])
                });
                if touch {
                    near[y * w + x] = true;
                }
            }
        }
    }
    for (v, &n) in data.iter_mut().zip(&near) {
        if n && *v == 0 {
            *v = band.class;
        }
    }
}

/// One source as it arrives: samples labelled in its own local class
/// space, plus the mapping and names that translate it to global.
#[derive(Debug, Clone)]
pub struct SourceDataset {
    pub id: String,
    /// Names of the local classes; index = local label value.
    pub local_class_names: Vec<String>,
    pub mapping: ClassMapping,
    pub samples: Vec<Sample>,
}

/// The merged result: global class names, per-source bookkeeping, and
/// all samples translated into the shared space.
#[derive(Debug, Clone)]
pub struct MergedCorpus {
    pub class_names: Vec<String>,
    pub sources: Vec<(String, Vec<String>, ClassMapping)>,
    pub samples: Vec<Sample>,
}

/// Merges heterogeneous sources into one corpus in the global class
/// space. Every sample's labels are remapped, and its presence array is
/// derived from its source's mapping. Two sources naming the same global
/// index differently is an error.
pub fn merge_datasets(sources: Vec<SourceDataset>, global_channels: usize) -> Result<MergedCorpus> {
    if sources.is_empty() {
        return Err(Error::invalid_argument("merge needs at least one source".to_string()));
    }
    let mut names: Vec<Option<(String, String)>> = vec![None; global_channels];
    for src in &sources {
        src.mapping.validate(global_channels)?;
        if src.local_class_names.len() != src.mapping.global_of_local.len() {
            return Err(Error::invalid_argument(format!(
                "source '{}' names {} classes but maps {}",
                src.id,
                src.local_class_names.len(),
                src.mapping.global_of_local.len()
            )));
        }
        for (local, name) in src.local_class_names.iter().enumerate() {
            let g = src.mapping.global_of_local[local] as usize;
            match &names[g] {
                None => names[g] = Some((name.clone(), src.id.clone())),
                Some((existing, owner)) if existing != name => {
                    return Err(Error::invalid_data(format!(
                        "global class {g} named '{existing}' by source '{owner}' \
                         but '{name}' by source '{}'",
                        src.id
                    )));
                }
                Some(_) => {}
            }
        }
    }
    let class_names: Vec<String> = names
        .iter()
        .enumerate()
        .map(|(g, n)| match n {
            Some((name, _)) => Ok(name.clone()),
            None => Err(Error::invalid_data(format!(
                "global class {g} is not named by any source"
            ))),
        })
        .collect::<Result<_>>()?;

    let mut samples = Vec::new();
    let mut source_entries = Vec::new();
    for src in sources {
        let presence = src.mapping.presence(global_channels);
        for s in &src.samples {
            let label = remap_labels(&s.label, &src.mapping)?;
            let oracle = match &s.oracle_label {
                Some(o) => Some(remap_labels(o, &src.mapping)?),
                None => None,
            };
            samples.push(Sample {
                id: s.id.clone(),
                subject: s.subject.clone(),
                source: src.id.clone(),
                feature: s.feature.clone(),
                label,
                presence: presence.clone(),
                oracle_label: oracle,
            });
        }
        source_entries.push((src.id, src.local_class_names, src.mapping));
    }
    Ok(MergedCorpus {
        class_names,
        sources: source_entries,
        samples,
    })
}

/// Splits samples into train and test index lists, grouped by subject:
/// no subject ever straddles the boundary. Subject order is shuffled by
/// the seed, then subjects are admitted to the test side while they fit
/// inside the target count; the achieved fraction is therefore within
/// one subject of the request.
pub fn split_train_test(
    samples: &[Sample],
    test_fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..1.0).contains(&test_fraction) || test_fraction == 0.0 {
        return Err(Error::invalid_argument(format!(
            "test fraction must lie in (0, 1), got {test_fraction}"
        )));
    }
    if samples.is_empty() {
        return Err(Error::invalid_argument("cannot split an empty dataset".to_string()));
    }
    let mut subjects: Vec<String> = Vec::new();
    for s in samples {
        if !subjects.contains(&s.subject) {
            subjects.push(s.subject.clone());
        }
    }
    if subjects.len() < 2 {
        return Err(Error::invalid_data(format!(
            "subject '{}' owns every sample; a grouped split would leave one side empty",
            subjects.first().map(String::as_str).unwrap_or("?")
        )));
    }
    let size_of = |subj: &str| samples.iter().filter(|s| s.subject == subj).count();
    let mut order = subjects.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let target = ((samples.len() as f64) * test_fraction).round().max(1.0) as usize;
    let mut test_subjects: BTreeSet<String> = BTreeSet::new();
    let mut admitted = 0usize;
    for subj in &order {
        let sz = size_of(subj);
        if admitted + sz <= target && test_subjects.len() + 1 < subjects.len() {
            test_subjects.insert(subj.clone());
            admitted += sz;
        }
    }
    if test_subjects.is_empty() {
        // every subject overshoots: admit the smallest so the test side exists
        let smallest = order
            .iter()
            .min_by_key(|s| size_of(s))
            .expect("at least two subjects");
        test_subjects.insert(smallest.clone());
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        if test_subjects.contains(&s.subject) {
            test.push(i);
        } else {
            train.push(i);
        }
    }
    Ok((train, test))
}

/// Training-set sizes used by the data-ablation grid, as percentages of
/// the full corpus. The split already holds out 20%, so 80 means the
/// whole training side.
pub const SHRINK_LEVELS: [f64; 6] = [80.0, 40.0, 20.0, 10.0, 5.0, 2.5];

/// Keeps roughly `percent/80` of the training samples, whole subjects at
/// a time. Levels are nested: every smaller level is a subset of every
/// larger one, because subjects are consumed in a fixed content-derived
/// order. Returns indices into `train`.
pub fn shrink_dataset(train: &[Sample], percent: f64) -> Result<Vec<usize>> {
    if !SHRINK_LEVELS.iter().any(|&p| (p - percent).abs() < 1e-9) {
        return Err(Error::invalid_argument(format!(
            "shrink level {percent} not in {SHRINK_LEVELS:?}"
        )));
    }
    if train.is_empty() {
        return Err(Error::invalid_argument("cannot shrink an empty training set".to_string()));
    }
    if (percent - 80.0).abs() < 1e-9 {
        return Ok((0..train.len()).collect());
    }
    // Stable subject order from a content hash: deterministic across
    // runs and platforms, independent of sample order.
    let mut subjects: Vec<String> = Vec::new();
    for s in train {
        if !subjects.contains(&s.subject) {
            subjects.push(s.subject.clone());
        }
    }
    let mut ranked: Vec<(String, String)> = subjects
        .into_iter()
        .map(|subj| {
            let digest = Sha256::digest(subj.as_bytes());
            (format!("{digest:x}"), subj)
        })
        .collect();
    ranked.sort();

    let target = ((train.len() as f64) * percent / 80.0).round().max(1.0) as usize;
    let mut kept: BTreeSet<String> = BTreeSet::new();
    let mut count = 0usize;
    for (_, subj) in &ranked {
        if count >= target {
            break;
        }
        kept.insert(subj.clone());
        count += train.iter().filter(|s| &s.subject == subj).count();
    }
    Ok((0..train.len())
        .filter(|&i| kept.contains(&train[i].subject))
        .collect())
}

/// Deterministically partitions samples into `weights.len()` groups,
/// whole subjects at a time, with group sizes following the weights via
/// largest-remainder allocation over subjects.
pub fn partition_subjects(
    samples: &[Sample],
    weights: &[f64],
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    if weights.is_empty() {
        return Err(Error::invalid_argument("partition needs at least one weight".to_string()));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 || weights.iter().any(|&w| w < 0.0) {
        return Err(Error::invalid_argument(format!(
            "partition weights must be non-negative with positive sum, got {weights:?}"
        )));
    }
    let mut subjects: Vec<String> = Vec::new();
    for s in samples {
        if !subjects.contains(&s.subject) {
            subjects.push(s.subject.clone());
        }
    }
    if subjects.len() < weights.len() {
        return Err(Error::invalid_data(format!(
            "{} subjects cannot fill {} groups",
            subjects.len(),
            weights.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    subjects.shuffle(&mut rng);

    let counts = largest_remainder_counts(subjects.len(), weights, total);
    let mut groups = vec![Vec::new(); weights.len()];
    let mut cursor = 0usize;
    for (g, &c) in counts.iter().enumerate() {
        let chunk: BTreeSet<&String> = subjects[cursor..cursor + c].iter().collect();
        for (i, s) in samples.iter().enumerate() {
            if chunk.contains(&s.subject) {
                groups[g].push(i);
            }
        }
        cursor += c;
    }
    Ok(groups)
}

/// Integer allocation of `n` items over weights: floor of the exact
/// share, then leftovers to the largest fractional parts (ties to the
/// earlier group). Guarantees every positive weight at least one item
/// when n >= number of positive weights.
pub(crate) fn largest_remainder_counts(n: usize, weights: &[f64], total: f64) -> Vec<usize> {
    let exact: Vec<f64> = weights.iter().map(|w| n as f64 * w / total).collect();
    let mut counts: Vec<usize> = exact.iter().map(|&e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for i in 0..(n - assigned) {
        counts[order[i % order.len()]] += 1;
    }
    // zero share despite positive weight: steal from the largest group
    loop {
        let Some(starved) = (0..weights.len()).find(|&i| weights[i] > 0.0 && counts[i] == 0) else {
            break;
        };
        let donor = (0..weights.len()).max_by_key(|&i| counts[i]).unwrap();
        if counts[donor] <= 1 {
            break;
        }
        counts[donor] -= 1;
        counts[starved] += 1;
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labelcore::{FeatureImage, Spacing};

    fn tiny_sample(id: &str, subject: &str, labels: Vec<u8>, h: usize, w: usize) -> Sample {
        let spacing = Spacing::isotropic(1.0);
        let feature: Vec<f64> = labels.iter().map(|&v| v as f64 * 0.25 + 0.1).collect();
        Sample {
            id: id.to_string(),
            subject: subject.to_string(),
            source: "complete".to_string(),
            feature: FeatureImage::new(1, h, w, feature, spacing).unwrap(),
            label: LabelMap::new(h, w, labels, spacing).unwrap(),
            presence: PresenceArray::all_true(3),
            oracle_label: None,
        }
    }

    #[test]
    fn partial_keeps_one_class_and_records_presence() {
        let s = tiny_sample("a", "s0", vec![0, 1, 2, 1], 2, 2);
        let spec = PartialSpec::new("only_one", &[1]);
        let out = make_partial(&[s.clone()], &spec, 3).unwrap();
        assert_eq!(out[0].label.data, vec![0, 1, 0, 1]);
        assert_eq!(out[0].presence.as_slice(), &[false, true, false]);
        assert_eq!(out[0].oracle_label.as_ref().unwrap().data, vec![0, 1, 2, 1]);
        assert_eq!(out[0].feature.data, s.feature.data);
        assert_eq!(out[0].source, "only_one");
    }

    #[test]
    fn partial_keeping_everything_is_identity_with_full_trust() {
        let s = tiny_sample("a", "s0", vec![0, 1, 2, 1], 2, 2);
        let spec = PartialSpec::new("full", &[0, 1, 2]);
        let out = make_partial(&[s.clone()], &spec, 3).unwrap();
        assert_eq!(out[0].label.data, s.label.data);
        assert!(out[0].presence.all_trusted());
    }

    #[test]
    fn band_paints_untrusted_class_around_kept_foreground() {
        // single class-1 pixel in the middle of 5x5
        let mut labels = vec![0u8; 25];
        labels[12] = 1;
        let s = tiny_sample("a", "s0", labels, 5, 5);
        let mut spec = PartialSpec::new("banded", &[1]);
        spec.band = Some(InvalidatedBand { class: 2, radius: 1 });
        let out = make_partial(&[s], &spec, 3).unwrap();
        let d = &out[0].label.data;
        assert_eq!(d[12], 1);
        // the 8 neighbours became the band class
        for &i in &[6, 7, 8, 11, 13, 16, 17, 18] {
            assert_eq!(d[i], 2, "pixel {i}");
        }
        assert_eq!(d[0], 0);
        assert!(!out[0].presence.get(2), "band class stays untrusted");
        // the identity mapping agrees
        let mapping = spec.mapping(3).unwrap();
        let k = mapping.presence(3);
        assert_eq!(k.as_slice(), &[false, true, false]);
    }

    #[test]
    fn band_class_must_be_untrusted_foreground() {
        let mut spec = PartialSpec::new("bad", &[1]);
        spec.band = Some(InvalidatedBand { class: 1, radius: 1 });
        assert!(make_partial(&[], &spec, 3).is_err());
    }

    #[test]
    fn merge_remaps_local_spaces_and_derives_presence() {
        // source A: local 1 = liver -> global 1; source B: local 1 = spleen -> global 2
        let a = SourceDataset {
            id: "liver_db".to_string(),
            local_class_names: vec!["background".to_string(), "liver".to_string()],
            mapping: ClassMapping {
                global_of_local: vec![0, 1],
                trusted: vec![false, true],
            },
            samples: vec![tiny_sample("a0", "pa", vec![0, 1, 1, 0], 2, 2)],
        };
        let b = SourceDataset {
            id: "spleen_db".to_string(),
            local_class_names: vec!["background".to_string(), "spleen".to_string()],
            mapping: ClassMapping {
                global_of_local: vec![0, 2],
                trusted: vec![false, true],
            },
            samples: vec![tiny_sample("b0", "pb", vec![1, 0, 0, 1], 2, 2)],
        };
        let merged = merge_datasets(vec![a, b], 3).unwrap();
        assert_eq!(merged.class_names, vec!["background", "liver", "spleen"]);
        assert_eq!(merged.samples.len(), 2);
        assert_eq!(merged.samples[0].label.data, vec![0, 1, 1, 0]);
        assert_eq!(merged.samples[1].label.data, vec![2, 0, 0, 2]);
        assert_eq!(merged.samples[0].presence.as_slice(), &[false, true, false]);
        assert_eq!(merged.samples[1].presence.as_slice(), &[false, false, true]);
    }

    #[test]
    fn merge_rejects_conflicting_global_names() {
        let mk = |id: &str, name: &str| SourceDataset {
            id: id.to_string(),
            local_class_names: vec!["background".to_string(), name.to_string()],
            mapping: ClassMapping {
                global_of_local: vec![0, 1],
                trusted: vec![false, true],
            },
            samples: vec![],
        };
        let err = merge_datasets(vec![mk("a", "liver"), mk("b", "kidney")], 2).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("liver") && msg.contains("kidney"), "{msg}");
    }

    #[test]
    fn merge_requires_every_global_class_named() {
        let a = SourceDataset {
            id: "a".to_string(),
            local_class_names: vec!["background".to_string(), "liver".to_string()],
            mapping: ClassMapping {
                global_of_local: vec![0, 1],
                trusted: vec![false, true],
            },
            samples: vec![],
        };
        // global space has 3 classes but nobody names class 2
        assert!(merge_datasets(vec![a], 3).is_err());
    }

    #[test]
    fn split_isolates_whole_subjects_and_hits_small_targets() {
        // subjects: s1 owns 2 images, s2..s4 one each; 20% of 5 = 1 image
        let samples = vec![
            tiny_sample("i0", "s1", vec![0; 4], 2, 2),
            tiny_sample("i1", "s1", vec![0; 4], 2, 2),
            tiny_sample("i2", "s2", vec![0; 4], 2, 2),
            tiny_sample("i3", "s3", vec![0; 4], 2, 2),
            tiny_sample("i4", "s4", vec![0; 4], 2, 2),
        ];
        for seed in 0..100 {
            let (train, test) = split_train_test(&samples, 0.2, seed).unwrap();
            assert_eq!(test.len(), 1, "seed {seed}");
            assert_eq!(train.len(), 4);
            let test_subject = &samples[test[0]].subject;
            assert_ne!(test_subject, "s1", "s1 is too large for the test side");
            assert!(train.iter().all(|&i| &samples[i].subject != test_subject));
        }
    }

    #[test]
    fn split_on_singletons_matches_fraction() {
        let samples: Vec<Sample> = (0..10)
            .map(|i| tiny_sample(&format!("i{i}"), &format!("s{i}"), vec![0; 4], 2, 2))
            .collect();
        let (train, test) = split_train_test(&samples, 0.2, 3).unwrap();
        assert_eq!(test.len(), 2);
        assert_eq!(train.len(), 8);
    }

    #[test]
    fn split_is_deterministic_per_seed() {
        let samples: Vec<Sample> = (0..12)
            .map(|i| tiny_sample(&format!("i{i}"), &format!("s{}", i / 2), vec![0; 4], 2, 2))
            .collect();
        let a = split_train_test(&samples, 0.25, 7).unwrap();
        let b = split_train_test(&samples, 0.25, 7).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn split_rejects_single_subject() {
        let samples: Vec<Sample> = (0..3)
            .map(|i| tiny_sample(&format!("i{i}"), "only", vec![0; 4], 2, 2))
            .collect();
        let err = split_train_test(&samples, 0.2, 0).unwrap_err();
        assert!(err.to_string().contains("only"));
    }

    #[test]
    fn shrink_levels_nest_and_respect_subjects() {
        let train: Vec<Sample> = (0..40)
            .map(|i| tiny_sample(&format!("i{i}"), &format!("s{}", i / 2), vec![0; 4], 2, 2))
            .collect();
        let mut previous: Option<Vec<usize>> = None;
        for &level in SHRINK_LEVELS.iter() {
            let kept = shrink_dataset(&train, level).unwrap();
            assert!(!kept.is_empty(), "level {level}");
            // whole subjects only
            for &i in &kept {
                let subj = &train[i].subject;
                let siblings: Vec<usize> = (0..train.len())
                    .filter(|&j| &train[j].subject == subj)
                    .collect();
                assert!(siblings.iter().all(|s| kept.contains(s)), "level {level}");
            }
            if let Some(prev) = &previous {
                assert!(
                    kept.iter().all(|i| prev.contains(i)),
                    "level {level} is not nested in the previous level"
                );
                assert!(kept.len() <= prev.len());
            }
            previous = Some(kept);
        }
        assert_eq!(shrink_dataset(&train, 80.0).unwrap().len(), 40);
        let err = shrink_dataset(&train, 33.0).unwrap_err();
        assert!(err.to_string().contains("33"));
    }

    #[test]
    fn shrink_sizes_track_percentages() {
        let train: Vec<Sample> = (0..80)
            .map(|i| tiny_sample(&format!("i{i}"), &format!("s{}", i / 2), vec![0; 4], 2, 2))
            .collect();
        let at = |p: f64| shrink_dataset(&train, p).unwrap().len();
        // subjects hold 2 images, so counts land within one subject of target
        assert!((at(40.0) as i64 - 40).abs() <= 2);
        assert!((at(10.0) as i64 - 10).abs() <= 2);
        assert!((at(2.5) as i64 - 2).abs() <= 2);
    }

    #[test]
    fn partition_follows_weights_on_whole_subjects() {
        let samples: Vec<Sample> = (0..50)
            .map(|i| tiny_sample(&format!("i{i}"), &format!("s{}", i / 2), vec![0; 4], 2, 2))
            .collect();
        let groups = partition_subjects(&samples, &[0.44, 0.20, 0.36], 9).unwrap();
        assert_eq!(groups.len(), 3);
        let total: usize = groups.iter().map(Vec::len).sum();
        assert_eq!(total, 50);
        // 25 subjects * weights -> 11/5/9 subjects -> 22/10/18 images
        assert_eq!(groups[0].len(), 22);
        assert_eq!(groups[1].len(), 10);
        assert_eq!(groups[2].len(), 18);
        // disjoint
        let mut seen = vec![false; 50];
        for g in &groups {
            for &i in g {
                assert!(!seen[i]);
                seen[i] = true;
            }
        }
    }

    #[test]
    fn largest_remainder_is_exact_and_total_preserving() {
        let c = largest_remainder_counts(15, &[0.5, 0.3, 0.2], 1.0);
        assert_eq!(c.iter().sum::<usize>(), 15);
        assert_eq!(c, vec![8, 4, 3]);
        let c2 = largest_remainder_counts(8, &[0.5, 0.5], 1.0);
        assert_eq!(c2, vec![4, 4]);
    }
}
