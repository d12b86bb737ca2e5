//! Synthetic corpus generation.
//!
//! Desk-scale stand-in for multi-organ slices: each image is background
//! noise with up to one shape per foreground class, placed without
//! overlap. Two ellipse classes share an intensity distribution and
//! differ only in size, so telling them apart needs spatial context; a
//! bar class is brighter and elongated. Labels trace the shapes exactly.

use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::labelcore::{FeatureImage, LabelMap, Spacing};
use crate::masking::PresenceArray;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Geometry family of one foreground class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ShapeFamily {
    /// Axis-aligned ellipse; radii drawn per image from the given ranges.
    Ellipse {
        rx: (f64, f64),
        ry: (f64, f64),
    },
    /// Rotated rectangle: length along a random direction, small thickness.
    Bar {
        length: (f64, f64),
        thickness: (f64, f64),
    },
}

/// One foreground class: how it looks and how its pixels are lit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeClass {
    pub name: String,
    pub family: ShapeFamily,
    pub intensity_mean: f64,
    pub intensity_std: f64,
    /// Chance the class appears in a non-empty image.
    pub appearance_rate: f64,
}

/// Recipe for a synthetic corpus. Classes are labelled `1..=C` in order;
/// class 0 is background.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub h: usize,
    pub w: usize,
    pub classes: Vec<ShapeClass>,
    pub background_mean: f64,
    pub background_std: f64,
    /// Fraction of images with no foreground at all.
    pub empty_fraction: f64,
    pub images_per_subject: usize,
    pub seed: u64,
    /// Placement attempts per shape before generation gives up.
    pub placement_retries: usize,
}

impl SyntheticSpec {
    /// Three-class default: two ellipse classes with identical intensity
    /// statistics (the similar-appearance pair, separable only by size)
    /// and a brighter bar class.
    pub fn default_three_class(seed: u64) -> Self {
        SyntheticSpec {
            h: 64,
            w: 64,
            classes: vec![
                ShapeClass {
                    name: "big_oval".to_string(),
                    family: ShapeFamily::Ellipse {
                        rx: (10.0, 15.0),
                        ry: (8.0, 13.0),
                    },
                    intensity_mean: 0.60,
                    intensity_std: 0.05,
                    appearance_rate: 0.65,
                },
                ShapeClass {
                    name: "small_oval".to_string(),
                    family: ShapeFamily::Ellipse {
                        rx: (3.5, 5.5),
                        ry: (3.0, 5.0),
                    },
                    intensity_mean: 0.60,
                    intensity_std: 0.05,
                    appearance_rate: 0.65,
                },
                ShapeClass {
                    name: "bar".to_string(),
                    family: ShapeFamily::Bar {
                        length: (18.0, 28.0),
                        thickness: (3.0, 5.0),
                    },
                    intensity_mean: 0.85,
                    intensity_std: 0.05,
                    appearance_rate: 0.65,
                },
            ],
            background_mean: 0.20,
            background_std: 0.05,
            empty_fraction: 0.5,
            images_per_subject: 2,
            seed,
            placement_retries: 200,
        }
    }

    pub fn channels(&self) -> usize {
        self.classes.len() + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.h == 0 || self.w == 0 {
            return Err(Error::invalid_argument("synthetic grid must be non-empty".to_string()));
        }
        if self.classes.is_empty() {
            return Err(Error::invalid_argument("synthetic spec needs at least one class".to_string()));
        }
        if !(0.0..1.0).contains(&self.empty_fraction) {
            return Err(Error::invalid_argument(format!(
                "empty fraction must lie in [0, 1), got {}",
                self.empty_fraction
            )));
        }
        if self.images_per_subject == 0 {
            return Err(Error::invalid_argument("images per subject must be positive".to_string()));
        }
        for c in &self.classes {
            if !(0.0..=1.0).contains(&c.intensity_mean) {
                return Err(Error::invalid_argument(format!(
                    "class '{}' intensity mean {} outside [0, 1]",
                    c.name, c.intensity_mean
                )));
            }
        }
        Ok(())
    }
}

/// Standard normal via Box-Muller; two uniform draws per call keeps the
/// stream deterministic.
fn draw_normal(rng: &mut ChaCha8Rng, mean: f64, std: f64) -> f64 {
    let u1: f64 = rng.gen::<f64>().max(1e-12);
    let u2: f64 = rng.gen();
    mean + std * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

struct PlacedShape {
    mask: Vec<bool>,
}

fn rasterize(spec: &SyntheticSpec, family: ShapeFamily, rng: &mut ChaCha8Rng) -> PlacedShape {
    let (h, w) = (spec.h as f64, spec.w as f64);
    let mut mask = vec![false; spec.h * spec.w];
    match family {
        ShapeFamily::Ellipse { rx, ry } => {
            let r_x = rng.gen_range(rx.0..=rx.1);
            let r_y = rng.gen_range(ry.0..=ry.1);
            let cx = rng.gen_range(r_x..(w - r_x));
            let cy = rng.gen_range(r_y..(h - r_y));
            for y in 0..spec.h {
                for x in 0..spec.w {
                    let dx = (x as f64 + 0.5 - cx) / r_x;
                    let dy = (y as f64 + 0.5 - cy) / r_y;
                    if dx * dx + dy * dy <= 1.0 {
                        mask[y * spec.w + x] = true;
                    }
                }
            }
        }
        ShapeFamily::Bar { length, thickness } => {
            let len = rng.gen_range(length.0..=length.1);
            let thick = rng.gen_range(thickness.0..=thickness.1);
            let theta = rng.gen_range(0.0..std::f64::consts::PI);
            let (ux, uy) = (theta.cos(), theta.sin());
            let margin = (len + thick) * 0.5;
            let cx = rng.gen_range(margin.min(w * 0.5)..(w - margin).max(w * 0.5));
            let cy = rng.gen_range(margin.min(h * 0.5)..(h - margin).max(h * 0.5));
            for y in 0..spec.h {
                for x in 0..spec.w {
                    let dx = x as f64 + 0.5 - cx;
                    let dy = y as f64 + 0.5 - cy;
                    let along = dx * ux + dy * uy;
                    let across = -dx * uy + dy * ux;
                    if along.abs() <= len * 0.5 && across.abs() <= thick * 0.5 {
                        mask[y * spec.w + x] = true;
                    }
                }
            }
        }
    }
    PlacedShape { mask }
}

fn shape_fits(labels: &[u8], shape: &PlacedShape) -> bool {
    shape
        .mask
        .iter()
        .zip(labels)
        .all(|(&m, &l)| !m || l == 0)
}

/// Generates `n` completely labelled samples. Each sample's randomness
/// comes from its own stream of the corpus seed, so sample `i` is the
/// same no matter how many others are generated.
pub fn generate_synthetic(spec: &SyntheticSpec, n: usize) -> Result<Vec<Sample>> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::invalid_argument("sample count must be positive".to_string()));
    }
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(i as u64 + 1);
        samples.push(generate_one(spec, i, &mut rng)?);
    }
    Ok(samples)
}

fn generate_one(spec: &SyntheticSpec, index: usize, rng: &mut ChaCha8Rng) -> Result<Sample> {
    let hw = spec.h * spec.w;
    let mut labels = vec![0u8; hw];
    let empty = rng.gen::<f64>() < spec.empty_fraction;

    if !empty {
        let mut chosen: Vec<usize> = Vec::new();
        for (ci, class) in spec.classes.iter().enumerate() {
            if rng.gen::<f64>() < class.appearance_rate {
                chosen.push(ci);
            }
        }
        if chosen.is_empty() {
            chosen.push(rng.gen_range(0..spec.classes.len()));
        }
        for &ci in &chosen {
            let class = &spec.classes[ci];
            let mut placed = false;
            for _ in 0..spec.placement_retries {
                let shape = rasterize(spec, class.family, rng);
                if shape_fits(&labels, &shape) {
                    let value = ci as u8 + 1;
                    for (l, &m) in labels.iter_mut().zip(&shape.mask) {
                        if m {
                            *l = value;
                        }
                    }
                    placed = true;
                    break;
                }
            }
            if !placed {
                return Err(Error::invalid_argument(format!(
                    "could not place class '{}' without overlap after {} attempts \
                     (image {index}, seed {})",
                    class.name, spec.placement_retries, spec.seed
                )));
            }
        }
    }

    let mut feature = vec![0.0; hw];
    for (f, &l) in feature.iter_mut().zip(&labels) {
        let (mean, std) = if l == 0 {
            (spec.background_mean, spec.background_std)
        } else {
            let c = &spec.classes[l as usize - 1];
            (c.intensity_mean, c.intensity_std)
        };
        *f = draw_normal(rng, mean, std).clamp(0.0, 1.0);
    }

    let spacing = Spacing::isotropic(1.0);
    Ok(Sample {
        id: format!("img{index:04}"),
        subject: format!("subj{:04}", index / spec.images_per_subject),
        source: "complete".to_string(),
        feature: FeatureImage::new(1, spec.h, spec.w, feature, spacing)?,
        label: LabelMap::new(spec.h, spec.w, labels, spacing)?,
        presence: PresenceArray::all_true(spec.channels()),
        oracle_label: None,
    })
}
