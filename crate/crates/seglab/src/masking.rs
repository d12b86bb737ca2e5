//! Presence records and pixel mask construction.
//!
//! A partially annotated sample looks complete: every unannotated
//! structure is labelled background. The [`PresenceArray`] records which
//! classes the sample's source actually annotated, background included,
//! and the mask builders turn that record into per-pixel weights that keep
//! unannotated regions from training the classifier toward background.
//!
//! Three escalating rules, given labels `y`, hard predictions `y_hat`, and
//! presence `k`:
//!
//! * base: trust a pixel iff its label class is trusted.
//! * or: additionally trust a pixel whose predicted class is trusted, so
//!   the classifier keeps receiving gradient where it sees a trusted
//!   structure the annotator did not mark.
//! * plus: count label trust and prediction trust separately, weighting
//!   agreement pixels double.

use crate::error::{Error, Result};
use crate::labelcore::{LabelMap, PredictionMap};
use serde::{Deserialize, Serialize};

/// Per-sample record of which classes the annotation can be trusted on.
/// Index is the class value; index 0 is background. In a partially
/// annotated source, background is untrusted because unannotated
/// structures hide in it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PresenceArray {
    flags: Vec<bool>,
}

impl PresenceArray {
    pub fn new(flags: Vec<bool>) -> Self {
        PresenceArray { flags }
    }

    /// All classes trusted: a completely annotated sample.
    pub fn all_true(channels: usize) -> Self {
        PresenceArray {
            flags: vec![true; channels],
        }
    }

    /// Trusts exactly the given classes. Background (class 0) is trusted
    /// only if listed.
    pub fn from_trusted(channels: usize, trusted: &[u8]) -> Self {
        let mut flags = vec![false; channels];
        for &c in trusted {
            flags[c as usize] = true;
        }
        PresenceArray { flags }
    }

    pub fn len(&self) -> usize {
        self.flags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flags.is_empty()
    }

    pub fn get(&self, class: usize) -> bool {
        self.flags[class]
    }

    pub fn set(&mut self, class: usize, trusted: bool) {
        self.flags[class] = trusted;
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.flags
    }

    pub fn count_trusted(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }

    pub fn all_trusted(&self) -> bool {
        self.flags.iter().all(|&f| f)
    }

    fn check_label(&self, v: u8, what: &str) -> Result<()> {
        if (v as usize) < self.flags.len() {
            Ok(())
        } else {
            Err(Error::invalid_data(format!(
                "{what} value {v} outside presence record of {} classes",
                self.flags.len()
            )))
        }
    }
}

/// Translation of one source's local label space into the global space,
/// with a per-class trust verdict.
///
/// `global_of_local[v]` is the global class for local label `v`. A class
/// can be mapped but marked untrusted: its pixels keep their global label,
/// yet the source's annotation of it is not treated as reliable (the
/// presence flag stays false). That covers sources whose labels for a
/// structure exist but are too inconsistent to train on.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassMapping {
    pub global_of_local: Vec<u8>,
    pub trusted: Vec<bool>,
}

impl ClassMapping {
    /// Identity map over `channels` classes, everything trusted.
    pub fn identity(channels: usize) -> Self {
        ClassMapping {
            global_of_local: (0..channels as u8).collect(),
            trusted: vec![true; channels],
        }
    }

    /// Identity map trusting only the listed global classes. The usual
    /// shape for a partial source: its kept foreground classes are
    /// trusted, background and everything else untrusted.
    pub fn identity_trusting(channels: usize, trusted_classes: &[u8]) -> Self {
        let mut m = ClassMapping {
            global_of_local: (0..channels as u8).collect(),
            trusted: vec![false; channels],
        };
        for &c in trusted_classes {
            m.trusted[c as usize] = true;
        }
        m
    }

    pub fn validate(&self, global_channels: usize) -> Result<()> {
        if self.global_of_local.len() != self.trusted.len() {
            return Err(Error::invalid_argument(format!(
                "class mapping has {} label entries but {} trust entries",
                self.global_of_local.len(),
                self.trusted.len()
            )));
        }
        if self.global_of_local.is_empty() || self.global_of_local[0] != 0 {
            return Err(Error::invalid_argument(
                "class mapping must send local background 0 to global background 0".to_string(),
            ));
        }
        if let Some(&bad) = self
            .global_of_local
            .iter()
            .find(|&&g| g as usize >= global_channels)
        {
            return Err(Error::invalid_argument(format!(
                "class mapping targets global class {bad}, but the global space has {global_channels} classes"
            )));
        }
        Ok(())
    }

    /// Presence record this mapping induces in the global space: a global
    /// class is trusted iff some trusted local class maps onto it.
    pub fn presence(&self, global_channels: usize) -> PresenceArray {
        let mut flags = vec![false; global_channels];
        for (&g, &t) in self.global_of_local.iter().zip(&self.trusted) {
            if t {
                flags[g as usize] = true;
            }
        }
        PresenceArray { flags }
    }
}

/// Rewrites local labels into the global space through a mapping. Labels
/// outside the mapping are rejected with their position.
pub fn remap_labels(labels: &LabelMap, mapping: &ClassMapping) -> Result<LabelMap> {
    let mut data = Vec::with_capacity(labels.data.len());
    for (i, &v) in labels.data.iter().enumerate() {
        let Some(&g) = mapping.global_of_local.get(v as usize) else {
            return Err(Error::invalid_data(format!(
                "label {} at pixel ({}, {}) has no class mapping entry (mapping covers {} classes)",
                v,
                i / labels.w,
                i % labels.w,
                mapping.global_of_local.len()
            )));
        };
        data.push(g);
    }
    Ok(LabelMap {
        h: labels.h,
        w: labels.w,
        data,
        spacing: labels.spacing,
    })
}

/// Per-pixel presence weights on a grid. Values are 0 or 1 for the base
/// and or rules and may reach 2 under plus.
#[derive(Debug, Clone, PartialEq)]
pub struct PresenceMask {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl PresenceMask {
    pub fn total(&self) -> f64 {
        self.data.iter().sum()
    }
}

/// Base rule: a pixel counts iff its label class is trusted.
pub fn build_mask_base(y: &LabelMap, k: &PresenceArray) -> Result<PresenceMask> {
    let mut data = Vec::with_capacity(y.data.len());
    for &v in &y.data {
        k.check_label(v, "label")?;
        data.push(k.get(v as usize) as u8 as f64);
    }
    Ok(PresenceMask {
        h: y.h,
        w: y.w,
        data,
    })
}

fn check_same_grid(y: &LabelMap, y_hat: &PredictionMap) -> Result<()> {
    if (y.h, y.w) != (y_hat.h, y_hat.w) {
        return Err(Error::ShapeMismatch {
            op: "presence mask labels/predictions",
            lhs: vec![y.h, y.w],
            rhs: vec![y_hat.h, y_hat.w],
        });
    }
    Ok(())
}

/// Or rule: a pixel counts iff its label class or its predicted class is
/// trusted. The weight stays binary; touching two trusted classes does not
/// count twice.
pub fn build_mask_or(y: &LabelMap, y_hat: &PredictionMap, k: &PresenceArray) -> Result<PresenceMask> {
    check_same_grid(y, y_hat)?;
    let mut data = Vec::with_capacity(y.data.len());
    for (&v, &p) in y.data.iter().zip(&y_hat.data) {
        k.check_label(v, "label")?;
        k.check_label(p, "prediction")?;
        data.push((k.get(v as usize) || k.get(p as usize)) as u8 as f64);
    }
    Ok(PresenceMask {
        h: y.h,
        w: y.w,
        data,
    })
}

/// Plus rule: label trust and prediction trust add, so a pixel whose label
/// and prediction agree on a trusted class weighs 2.
pub fn build_mask_plus(y: &LabelMap, y_hat: &PredictionMap, k: &PresenceArray) -> Result<PresenceMask> {
    check_same_grid(y, y_hat)?;
    let mut data = Vec::with_capacity(y.data.len());
    for (&v, &p) in y.data.iter().zip(&y_hat.data) {
        k.check_label(v, "label")?;
        k.check_label(p, "prediction")?;
        data.push(k.get(v as usize) as u8 as f64 + k.get(p as usize) as u8 as f64);
    }
    Ok(PresenceMask {
        h: y.h,
        w: y.w,
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labelcore::Spacing;
    use proptest::prelude::*;

    fn labels(data: Vec<u8>) -> LabelMap {
        let w = data.len();
        LabelMap::new(1, w, data, Spacing::isotropic(1.0)).unwrap()
    }

    fn preds(data: Vec<u8>) -> PredictionMap {
        let w = data.len();
        PredictionMap { h: 1, w, data }
    }

    #[test]
    fn worked_mask_example_all_three_rules() {
        let y = labels(vec![0, 1, 2, 1]);
        let y_hat = preds(vec![1, 1, 0, 2]);
        let k = PresenceArray::new(vec![false, true, false]);
        assert_eq!(build_mask_base(&y, &k).unwrap().data, vec![0.0, 1.0, 0.0, 1.0]);
        assert_eq!(
            build_mask_or(&y, &y_hat, &k).unwrap().data,
            vec![1.0, 1.0, 0.0, 1.0]
        );
        assert_eq!(
            build_mask_plus(&y, &y_hat, &k).unwrap().data,
            vec![1.0, 2.0, 0.0, 1.0]
        );
    }

    #[test]
    fn all_trusted_base_mask_is_all_ones() {
        let y = labels(vec![0, 2, 1, 1, 0]);
        let k = PresenceArray::all_true(3);
        assert_eq!(build_mask_base(&y, &k).unwrap().data, vec![1.0; 5]);
    }

    #[test]
    fn untrusted_background_false_positive_pixel() {
        // label says background (untrusted), model predicts trusted class:
        // base ignores the pixel, or and plus keep it.
        let y = labels(vec![0]);
        let y_hat = preds(vec![1]);
        let k = PresenceArray::from_trusted(3, &[1]);
        assert_eq!(build_mask_base(&y, &k).unwrap().data, vec![0.0]);
        assert_eq!(build_mask_or(&y, &y_hat, &k).unwrap().data, vec![1.0]);
        assert_eq!(build_mask_plus(&y, &y_hat, &k).unwrap().data, vec![1.0]);
    }

    #[test]
    fn label_outside_presence_record_rejected() {
        let y = labels(vec![0, 5]);
        let k = PresenceArray::all_true(3);
        let err = build_mask_base(&y, &k).unwrap_err();
        assert!(err.to_string().contains("value 5"), "{err}");
    }

    #[test]
    fn remap_sends_local_classes_to_global() {
        // local space {0: bg, 1: liver, 2: spleen} into a 7-class global
        // space where liver is 6 and spleen is 3
        let mapping = ClassMapping {
            global_of_local: vec![0, 6, 3],
            trusted: vec![false, true, true],
        };
        mapping.validate(7).unwrap();
        let y = labels(vec![0, 1, 2, 1]);
        let g = remap_labels(&y, &mapping).unwrap();
        assert_eq!(g.data, vec![0, 6, 3, 6]);
        let k = mapping.presence(7);
        assert_eq!(
            k.as_slice(),
            &[false, false, false, true, false, false, true]
        );
    }

    #[test]
    fn mapped_but_untrusted_class_stays_labelled_without_presence() {
        // one structure's labels exist but are unreliable: pixels keep the
        // global class, presence stays false, so masks skip them
        let mapping = ClassMapping {
            global_of_local: vec![0, 1, 2],
            trusted: vec![true, true, false],
        };
        let y = labels(vec![0, 1, 2]);
        let g = remap_labels(&y, &mapping).unwrap();
        assert_eq!(g.data, vec![0, 1, 2]);
        let k = mapping.presence(3);
        let base = build_mask_base(&g, &k).unwrap();
        assert_eq!(base.data, vec![1.0, 1.0, 0.0]);
    }

    #[test]
    fn remap_rejects_unmapped_label() {
        let mapping = ClassMapping::identity(2);
        let y = labels(vec![0, 3]);
        let err = remap_labels(&y, &mapping).unwrap_err();
        assert!(err.to_string().contains("label 3"), "{err}");
    }

    #[test]
    fn mapping_validation_catches_inconsistencies() {
        let bad_len = ClassMapping {
            global_of_local: vec![0, 1],
            trusted: vec![true],
        };
        assert!(bad_len.validate(2).is_err());
        let bad_bg = ClassMapping {
            global_of_local: vec![1, 0],
            trusted: vec![true, true],
        };
        assert!(bad_bg.validate(2).is_err());
        let bad_target = ClassMapping {
            global_of_local: vec![0, 9],
            trusted: vec![true, true],
        };
        assert!(bad_target.validate(3).is_err());
    }

    proptest! {
        /// The three rules only escalate: base <= or <= plus per pixel,
        /// with base and or binary and plus at most 2.
        #[test]
        fn mask_rules_escalate(
            y in prop::collection::vec(0u8..4, 1..40),
            y_hat_seed in prop::collection::vec(0u8..4, 40),
            k in prop::collection::vec(any::<bool>(), 4),
        ) {
            let n = y.len();
            let y = labels(y);
            let y_hat = preds(y_hat_seed[..n].to_vec());
            let k = PresenceArray::new(k);
            let base = build_mask_base(&y, &k).unwrap();
            let or = build_mask_or(&y, &y_hat, &k).unwrap();
            let plus = build_mask_plus(&y, &y_hat, &k).unwrap();
            for i in 0..n {
                prop_assert!(base.data[i] <= or.data[i]);
                prop_assert!(or.data[i] <= plus.data[i]);
                prop_assert!(base.data[i] == 0.0 || base.data[i] == 1.0);
                prop_assert!(or.data[i] == 0.0 || or.data[i] == 1.0);
                prop_assert!([0.0, 1.0, 2.0].contains(&plus.data[i]));
            }
        }

        /// With everything trusted, every rule weights every pixel and
        /// plus weights exactly the agreement structure.
        #[test]
        fn all_trusted_masks_cover_every_pixel(
            y in prop::collection::vec(0u8..4, 1..40),
            y_hat_seed in prop::collection::vec(0u8..4, 40),
        ) {
            let n = y.len();
            let y = labels(y);
            let y_hat = preds(y_hat_seed[..n].to_vec());
            let k = PresenceArray::all_true(4);
            prop_assert_eq!(build_mask_base(&y, &k).unwrap().data, vec![1.0; n]);
            prop_assert_eq!(build_mask_or(&y, &y_hat, &k).unwrap().data, vec![1.0; n]);
            prop_assert_eq!(build_mask_plus(&y, &y_hat, &k).unwrap().data, vec![2.0; n]);
        }
    }
}
