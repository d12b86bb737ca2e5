//! On-disk corpus format.
//!
//! A corpus directory holds `manifest.json` plus one raster file per
//! image under `rasters/`: features as little-endian f64, labels as
//! bytes. The manifest records shapes, spacings, presence arrays and a
//! sha256 per raster, so a load either reproduces the stored corpus
//! bit for bit or fails naming the offending file. Nothing
//! time-dependent is written: storing the same corpus twice produces
//! byte-identical trees.

use crate::dataset::{MergedCorpus, Sample};
use crate::error::{Error, Result};
use crate::labelcore::{FeatureImage, LabelMap, Spacing};
use crate::masking::{ClassMapping, PresenceArray};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceEntry {
    pub id: String,
    pub local_class_names: Vec<String>,
    pub mapping: ClassMapping,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub id: String,
    pub subject: String,
    pub source: String,
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub spacing: Spacing,
    pub presence: Vec<bool>,
    pub feature_file: String,
    pub feature_sha256: String,
    pub label_file: String,
    pub label_sha256: String,
    pub oracle_file: Option<String>,
    pub oracle_sha256: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub class_names: Vec<String>,
    pub sources: Vec<SourceEntry>,
    /// Subjects held out for evaluation, fixed when the corpus is built
    /// so every later command agrees on the split.
    pub test_subjects: Vec<String>,
    pub samples: Vec<SampleEntry>,
}

/// A corpus in memory: manifest-level metadata plus the samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub class_names: Vec<String>,
    pub sources: Vec<SourceEntry>,
    pub test_subjects: Vec<String>,
    pub samples: Vec<Sample>,
}

impl Corpus {
    pub fn from_merged(merged: MergedCorpus, test_subjects: Vec<String>) -> Self {
        Corpus {
            class_names: merged.class_names,
            sources: merged
                .sources
                .into_iter()
                .map(|(id, local_class_names, mapping)| SourceEntry {
                    id,
                    local_class_names,
                    mapping,
                })
                .collect(),
            test_subjects,
            samples: merged.samples,
        }
    }

    pub fn channels(&self) -> usize {
        self.class_names.len()
    }

    /// Indices of the training-side samples (subjects not held out).
    pub fn train_indices(&self) -> Vec<usize> {
        (0..self.samples.len())
            .filter(|&i| !self.test_subjects.contains(&self.samples[i].subject))
            .collect()
    }

    pub fn test_indices(&self) -> Vec<usize> {
        (0..self.samples.len())
            .filter(|&i| self.test_subjects.contains(&self.samples[i].subject))
            .collect()
    }
}

const FORMAT_VERSION: u32 = 1;

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

fn feature_bytes(f: &FeatureImage) -> Vec<u8> {
    let mut out = Vec::with_capacity(f.data.len() * 8);
    for v in &f.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Writes the corpus under `dir` (created if missing). Sample ids must
/// be unique; they name the raster files.
pub fn store_corpus(dir: &Path, corpus: &Corpus) -> Result<()> {
    let mut seen: BTreeSet<&str> = BTreeSet::new();
    for s in &corpus.samples {
        if !seen.insert(&s.id) {
            return Err(Error::invalid_data(format!(
                "duplicate sample id '{}' cannot be stored",
                s.id
            )));
        }
    }
    let rasters = dir.join("rasters");
    fs::create_dir_all(&rasters).map_err(|e| Error::io(&rasters, e))?;

    let mut entries = Vec::with_capacity(corpus.samples.len());
    for s in &corpus.samples {
        let feat = feature_bytes(&s.feature);
        let feature_file = format!("rasters/{}.feat", s.id);
        write_file(&dir.join(&feature_file), &feat)?;

        let label_file = format!("rasters/{}.lab", s.id);
        write_file(&dir.join(&label_file), &s.label.data)?;

        let (oracle_file, oracle_sha256) = match &s.oracle_label {
            Some(o) => {
                let name = format!("rasters/{}.oracle", s.id);
                write_file(&dir.join(&name), &o.data)?;
                let sum = sha256_hex(&o.data);
                (Some(name), Some(sum))
            }
            None => (None, None),
        };

        entries.push(SampleEntry {
            id: s.id.clone(),
            subject: s.subject.clone(),
            source: s.source.clone(),
            channels: s.feature.channels,
            h: s.label.h,
            w: s.label.w,
            spacing: s.label.spacing,
            presence: s.presence.as_slice().to_vec(),
            feature_sha256: sha256_hex(&feat),
            feature_file,
            label_sha256: sha256_hex(&s.label.data),
            label_file,
            oracle_file,
            oracle_sha256,
        });
    }

    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        class_names: corpus.class_names.clone(),
        sources: corpus.sources.clone(),
        test_subjects: corpus.test_subjects.clone(),
        samples: entries,
    };
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&path, e))?;
    write_file(&path, format!("{json}\n").as_bytes())
}

fn load_raster(dir: &Path, name: &str, expected_len: usize, sha: &str) -> Result<Vec<u8>> {
    let path = dir.join(name);
    let bytes = read_file(&path)?;
    if bytes.len() != expected_len {
        return Err(Error::invalid_data(format!(
            "raster '{name}' holds {} bytes but the manifest promises {expected_len} \
             (data ends at offset {})",
            bytes.len(),
            bytes.len()
        )));
    }
    let actual = sha256_hex(&bytes);
    if actual != sha {
        return Err(Error::invalid_data(format!(
            "raster '{name}' fails its checksum: manifest records {sha}, file hashes to {actual}"
        )));
    }
    Ok(bytes)
}

/// Reads a corpus back. Every raster is length- and checksum-verified
/// against the manifest before use.
pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let path: PathBuf = dir.join("manifest.json");
    let text = read_file(&path)?;
    let manifest: DatasetManifest = serde_json::from_slice(&text).map_err(|e| Error::json(&path, e))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::invalid_data(format!(
            "corpus format version {} is not the supported {FORMAT_VERSION}",
            manifest.format_version
        )));
    }
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for e in &manifest.samples {
        let hw = e.h * e.w;
        let feat_bytes = load_raster(dir, &e.feature_file, hw * e.channels * 8, &e.feature_sha256)?;
        let mut data = Vec::with_capacity(hw * e.channels);
        for chunk in feat_bytes.chunks_exact(8) {
            data.push(f64::from_le_bytes(chunk.try_into().expect("chunks_exact(8)")));
        }
        let feature = FeatureImage::new(e.channels, e.h, e.w, data, e.spacing)?;

        let lab = load_raster(dir, &e.label_file, hw, &e.label_sha256)?;
        let label = LabelMap::new(e.h, e.w, lab, e.spacing)?;

        let oracle_label = match (&e.oracle_file, &e.oracle_sha256) {
            (Some(name), Some(sha)) => {
                let bytes = load_raster(dir, name, hw, sha)?;
                Some(LabelMap::new(e.h, e.w, bytes, e.spacing)?)
            }
            (None, None) => None,
            _ => {
                return Err(Error::invalid_data(format!(
                    "sample '{}' lists an oracle file without a checksum (or vice versa)",
                    e.id
                )));
            }
        };

        samples.push(Sample {
            id: e.id.clone(),
            subject: e.subject.clone(),
            source: e.source.clone(),
            feature,
            label,
            presence: PresenceArray::new(e.presence.clone()),
            oracle_label,
        });
    }
    Ok(Corpus {
        class_names: manifest.class_names,
        sources: manifest.sources,
        test_subjects: manifest.test_subjects,
        samples,
    })
}
