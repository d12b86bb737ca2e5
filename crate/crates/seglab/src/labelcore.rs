//! Raster types and the geometry pipeline around the classifier.
//!
//! Images arrive on arbitrary grids with physical pixel spacing. Before
//! training or inference they are standardized: resampled to a common
//! spacing (bilinear for features, nearest for labels) and centre
//! cropped or padded to the network grid. A [`GeometryRecord`] captures
//! enough to invert both steps, so predictions are always scored against
//! ground truth on the original grid.

use crate::error::{Error, Result};
use crate::ndgrad::Tensor;
use serde::{Deserialize, Serialize};

/// Physical size of one pixel in millimetres, row axis then column axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spacing {
    pub dy: f64,
    pub dx: f64,
}

impl Spacing {
    pub fn isotropic(s: f64) -> Spacing {
        Spacing { dy: s, dx: s }
    }
}

/// Multi-channel feature raster, channel-major `[C, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureImage {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    /// Row-major per channel: index `(c * h + y) * w + x`.
    pub data: Vec<f64>,
    pub spacing: Spacing,
}

impl FeatureImage {
    pub fn new(channels: usize, h: usize, w: usize, data: Vec<f64>, spacing: Spacing) -> Result<Self> {
        if data.len() != channels * h * w {
            return Err(Error::invalid_argument(format!(
                "feature image {channels}x{h}x{w} needs {} values, got {}",
                channels * h * w,
                data.len()
            )));
        }
        Ok(FeatureImage {
            channels,
            h,
            w,
            data,
            spacing,
        })
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.channels, self.h, self.w], self.data.clone()).expect("sized by invariant")
    }
}

/// Integer class labels on a grid. `0` is background by convention.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
    pub spacing: Spacing,
}

impl LabelMap {
    pub fn new(h: usize, w: usize, data: Vec<u8>, spacing: Spacing) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::invalid_argument(format!(
                "label map {h}x{w} needs {} values, got {}",
                h * w,
                data.len()
            )));
        }
        Ok(LabelMap { h, w, data, spacing })
    }
}

/// Per-pixel class distribution, channel-major `[C, H, W]`; channels sum
/// to one at every pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl ProbabilityMap {
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let [channels, h, w] = t.shape()[..] else {
            return Err(Error::invalid_argument(format!(
                "probability map wants [C,H,W], got {:?}",
                t.shape()
            )));
        };
        Ok(ProbabilityMap {
            channels,
            h,
            w,
            data: t.data().to_vec(),
        })
    }
}

/// Hard class decisions on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionMap {
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

impl PredictionMap {
    /// Rewrites every label through `map` (index = old label). Labels with
    /// no entry are an error in the caller's bookkeeping and panic.
    pub fn relabel(&self, map: &[u8]) -> PredictionMap {
        PredictionMap {
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|&v| map[v as usize]).collect(),
        }
    }
}

/// Everything needed to undo standardization of one case: the original
/// grid, the grid after spacing resample, and the network grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeometryRecord {
    pub original_h: usize,
    pub original_w: usize,
    pub original_spacing: Spacing,
    pub resampled_h: usize,
    pub resampled_w: usize,
    pub working_h: usize,
    pub working_w: usize,
}

/// One-hot encodes labels over `channels` classes into `[channels, H, W]`.
/// Any label outside `0..channels` is rejected with its position.
pub fn one_hot(labels: &LabelMap, channels: usize) -> Result<Tensor> {
    let hw = labels.h * labels.w;
    let mut data = vec![0.0; channels * hw];
    for (i, &v) in labels.data.iter().enumerate() {
        if (v as usize) >= channels {
            return Err(Error::invalid_data(format!(
                "label {} at pixel ({}, {}) exceeds class count {}",
                v,
                i / labels.w,
                i % labels.w,
                channels
            )));
        }
        data[v as usize * hw + i] = 1.0;
    }
    Tensor::new(vec![channels, labels.h, labels.w], data)
}

/// Arg-max class per pixel; ties resolve to the lowest class index.
pub fn predict_labels(prob: &ProbabilityMap) -> PredictionMap {
    let hw = prob.h * prob.w;
    let mut data = vec![0u8; hw];
    for j in 0..hw {
        let mut best_c = 0usize;
        let mut best = prob.data[j];
        for c in 1..prob.channels {
            let v = prob.data[c * hw + j];
            if v > best {
                best = v;
                best_c = c;
            }
        }
        data[j] = best_c as u8;
    }
    PredictionMap {
        h: prob.h,
        w: prob.w,
        data,
    }
}

/// Hard dice overlap `2|A n B| / (|A| + |B|)` for one class between a
/// prediction and reference labels on the same grid. When the class is
/// absent from both, the score is defined as 1 (perfect agreement on
/// absence); reported aggregates flag how often that convention fires.
pub fn hard_dice(pred: &PredictionMap, truth: &LabelMap, class: u8) -> Result<f64> {
    if (pred.h, pred.w) != (truth.h, truth.w) {
        return Err(Error::ShapeMismatch {
            op: "hard_dice",
            lhs: vec![pred.h, pred.w],
            rhs: vec![truth.h, truth.w],
        });
    }
    let mut inter = 0usize;
    let mut a = 0usize;
    let mut b = 0usize;
    for (&p, &t) in pred.data.iter().zip(&truth.data) {
        let pa = p == class;
        let tb = t == class;
        a += pa as usize;
        b += tb as usize;
        inter += (pa && tb) as usize;
    }
    if a + b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (a + b) as f64)
}

/// Source coordinate for output pixel `i` when resampling `in_dim` to
/// `out_dim`: pixel centres map to pixel centres and the image extent is
/// preserved, so `src = (i + 0.5) * in/out - 0.5`.
fn src_coord(i: usize, in_dim: usize, out_dim: usize) -> f64 {
    (i as f64 + 0.5) * in_dim as f64 / out_dim as f64 - 0.5
}

/// Bilinear resample of every channel onto an `out_h x out_w` grid.
/// Coordinates past the border clamp to the edge row or column. Spacing
/// rescales so the physical extent is unchanged.
pub fn resample_bilinear(img: &FeatureImage, out_h: usize, out_w: usize) -> FeatureImage {
    let (in_h, in_w) = (img.h, img.w);
    let mut data = vec![0.0; img.channels * out_h * out_w];
    for c in 0..img.channels {
        let plane = &img.data[c * in_h * in_w..(c + 1) * in_h * in_w];
        let out_plane = &mut data[c * out_h * out_w..(c + 1) * out_h * out_w];
        for oy in 0..out_h {
            let sy = src_coord(oy, in_h, out_h).clamp(0.0, (in_h - 1) as f64);
            let y0 = sy.floor() as usize;
            let y1 = (y0 + 1).min(in_h - 1);
            let fy = sy - y0 as f64;
            for ox in 0..out_w {
                let sx = src_coord(ox, in_w, out_w).clamp(0.0, (in_w - 1) as f64);
                let x0 = sx.floor() as usize;
                let x1 = (x0 + 1).min(in_w - 1);
                let fx = sx - x0 as f64;
                let v00 = plane[y0 * in_w + x0];
                let v01 = plane[y0 * in_w + x1];
                let v10 = plane[y1 * in_w + x0];
                let v11 = plane[y1 * in_w + x1];
                out_plane[oy * out_w + ox] = (1.0 - fy) * ((1.0 - fx) * v00 + fx * v01)
                    + fy * ((1.0 - fx) * v10 + fx * v11);
            }
        }
    }
    FeatureImage {
        channels: img.channels,
        h: out_h,
        w: out_w,
        data,
        spacing: Spacing {
            dy: img.spacing.dy * in_h as f64 / out_h as f64,
            dx: img.spacing.dx * in_w as f64 / out_w as f64,
        },
    }
}

fn nearest_index(i: usize, in_dim: usize, out_dim: usize) -> usize {
    let s = src_coord(i, in_dim, out_dim);
    (s + 0.5).floor().clamp(0.0, (in_dim - 1) as f64) as usize
}

/// Nearest-neighbour resample of labels: the same grid mapping as
/// [`resample_bilinear`], but every output pixel copies a source label, so
/// no label value is ever invented.
pub fn resample_nearest(labels: &LabelMap, out_h: usize, out_w: usize) -> LabelMap {
    let mut data = vec![0u8; out_h * out_w];
    for oy in 0..out_h {
        let sy = nearest_index(oy, labels.h, out_h);
        for ox in 0..out_w {
            let sx = nearest_index(ox, labels.w, out_w);
            data[oy * out_w + ox] = labels.data[sy * labels.w + sx];
        }
    }
    LabelMap {
        h: out_h,
        w: out_w,
        data,
        spacing: Spacing {
            dy: labels.spacing.dy * labels.h as f64 / out_h as f64,
            dx: labels.spacing.dx * labels.w as f64 / out_w as f64,
        },
    }
}

/// Start offsets for a centred crop or pad from `in_dim` to `out_dim`:
/// `(in_start, out_start, copy_len)`. The low side takes the floor of the
/// excess, so an odd difference crops or pads one more at the high side.
fn centred_window(in_dim: usize, out_dim: usize) -> (usize, usize, usize) {
    if out_dim >= in_dim {
        ((0), (out_dim - in_dim) / 2, in_dim)
    } else {
        ((in_dim - out_dim) / 2, 0, out_dim)
    }
}

fn crop_or_pad_plane<T: Copy>(src: &[T], in_h: usize, in_w: usize, out_h: usize, out_w: usize, fill: T) -> Vec<T> {
    let (iy, oy, ch) = centred_window(in_h, out_h);
    let (ix, ox, cw) = centred_window(in_w, out_w);
    let mut out = vec![fill; out_h * out_w];
    for r in 0..ch {
        let src_row = &src[(iy + r) * in_w + ix..][..cw];
        out[(oy + r) * out_w + ox..][..cw].copy_from_slice(src_row);
    }
    out
}

/// Centre crop or zero-pad features to `out_h x out_w`. Spacing is
/// unchanged; only the field of view moves.
pub fn crop_or_pad_features(img: &FeatureImage, out_h: usize, out_w: usize) -> FeatureImage {
    let mut data = Vec::with_capacity(img.channels * out_h * out_w);
    for c in 0..img.channels {
        let plane = &img.data[c * img.h * img.w..(c + 1) * img.h * img.w];
        data.extend(crop_or_pad_plane(plane, img.h, img.w, out_h, out_w, 0.0));
    }
    FeatureImage {
        channels: img.channels,
        h: out_h,
        w: out_w,
        data,
        spacing: img.spacing,
    }
}

/// Centre crop or background-pad labels to `out_h x out_w`.
pub fn crop_or_pad_labels(labels: &LabelMap, out_h: usize, out_w: usize) -> LabelMap {
    LabelMap {
        h: out_h,
        w: out_w,
        data: crop_or_pad_plane(&labels.data, labels.h, labels.w, out_h, out_w, 0),
        spacing: labels.spacing,
    }
}

fn resampled_dims(h: usize, w: usize, spacing: Spacing, target: Spacing) -> (usize, usize) {
    let rh = (h as f64 * spacing.dy / target.dy).round().max(1.0) as usize;
    let rw = (w as f64 * spacing.dx / target.dx).round().max(1.0) as usize;
    (rh, rw)
}

/// Resamples features to `target` spacing and centre crops or pads to the
/// network grid, returning the standardized image and the inversion record.
pub fn standardize_features(
    img: &FeatureImage,
    target: Spacing,
    grid_h: usize,
    grid_w: usize,
) -> (FeatureImage, GeometryRecord) {
    let (rh, rw) = resampled_dims(img.h, img.w, img.spacing, target);
    let resampled = resample_bilinear(img, rh, rw);
    let out = crop_or_pad_features(&resampled, grid_h, grid_w);
    let geom = GeometryRecord {
        original_h: img.h,
        original_w: img.w,
        original_spacing: img.spacing,
        resampled_h: rh,
        resampled_w: rw,
        working_h: grid_h,
        working_w: grid_w,
    };
    (out, geom)
}

/// Label counterpart of [`standardize_features`]: nearest resample, then
/// centre crop or pad.
pub fn standardize_labels(labels: &LabelMap, target: Spacing, grid_h: usize, grid_w: usize) -> LabelMap {
    let (rh, rw) = resampled_dims(labels.h, labels.w, labels.spacing, target);
    crop_or_pad_labels(&resample_nearest(labels, rh, rw), grid_h, grid_w)
}

/// Carries a working-grid prediction back to the case's original grid:
/// the centred crop or pad is undone first (cropped regions return as
/// background), then a nearest resample restores the original resolution.
pub fn restore_original_grid(pred: &PredictionMap, geom: &GeometryRecord) -> PredictionMap {
    let on_resampled = crop_or_pad_plane(
        &pred.data,
        geom.working_h,
        geom.working_w,
        geom.resampled_h,
        geom.resampled_w,
        0u8,
    );
    let as_labels = LabelMap {
        h: geom.resampled_h,
        w: geom.resampled_w,
        data: on_resampled,
        spacing: Spacing::isotropic(1.0),
    };
    let back = resample_nearest(&as_labels, geom.original_h, geom.original_w);
    PredictionMap {
        h: geom.original_h,
        w: geom.original_w,
        data: back.data,
    }
}

/// Scores one case end to end: hard decisions from the working-grid
/// probabilities, geometry inversion, then per-class dice against the
/// reference labels on the original grid. Returns dice for foreground
/// classes `1..=num_classes`.
pub fn evaluate_case(
    prob: &ProbabilityMap,
    geom: &GeometryRecord,
    truth: &LabelMap,
    num_classes: usize,
) -> Result<Vec<f64>> {
    if (truth.h, truth.w) != (geom.original_h, geom.original_w) {
        return Err(Error::ShapeMismatch {
            op: "evaluate_case truth grid",
            lhs: vec![truth.h, truth.w],
            rhs: vec![geom.original_h, geom.original_w],
        });
    }
    let pred = predict_labels(prob);
    let restored = restore_original_grid(&pred, geom);
    (1..=num_classes)
        .map(|c| hard_dice(&restored, truth, c as u8))
        .collect()
}
