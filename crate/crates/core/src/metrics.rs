//! Segmentation overlap and classification accuracy metrics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AvLabel, BinaryMask, VesselMask};
use crate::raster;

pub fn iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    a.check_same_dims(b)?;
    let union = a.union_count(b);
    if union == 0 {
        return Ok(1.0);
    }
    Ok(a.intersection_count(b) as f64 / union as f64)
}

pub fn dice(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    a.check_same_dims(b)?;
    let total = a.count() + b.count();
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * a.intersection_count(b) as f64 / total as f64)
}

pub fn precision(pred: &BinaryMask, truth: &BinaryMask) -> Result<f64> {
    pred.check_same_dims(truth)?;
    match pred.count() {
        0 => Err(Error::Undefined("precision")),
        n => Ok(pred.intersection_count(truth) as f64 / n as f64),
    }
}

pub fn recall(pred: &BinaryMask, truth: &BinaryMask) -> Result<f64> {
    pred.check_same_dims(truth)?;
    match truth.count() {
        0 => Err(Error::Undefined("recall")),
        n => Ok(pred.intersection_count(truth) as f64 / n as f64),
    }
}

/// Fraction of predicted vessel components whose artery/vein label matches
/// the majority truth label over the component's true vessel pixels.
/// Components without any true vessel pixel are skipped.
pub fn av_component_accuracy(pred: &VesselMask, truth: &VesselMask) -> Result<f64> {
    pred.vessel().check_same_dims(truth.vessel())?;
    let (labels, sizes) = raster::label_components(pred.vessel());
    let n = sizes.len() - 1;
    // Per component: [artery votes, vein votes], and the predicted label.
    let mut votes = vec![[0usize; 2]; n + 1];
    let mut predicted = vec![AvLabel::None; n + 1];
    for (i, &l) in labels.iter().enumerate() {
        if l == 0 {
            continue;
        }
        predicted[l as usize] = pred.av()[i];
        match truth.av()[i] {
            AvLabel::Artery => votes[l as usize][0] += 1,
            AvLabel::Vein => votes[l as usize][1] += 1,
            AvLabel::None => {}
        }
    }
    let (mut scored, mut correct) = (0usize, 0usize);
    for l in 1..=n {
        let [a, v] = votes[l];
        if a + v == 0 {
            continue;
        }
        scored += 1;
        let majority = if a >= v { AvLabel::Artery } else { AvLabel::Vein };
        if predicted[l] == majority {
            correct += 1;
        }
    }
    if scored == 0 {
        return Err(Error::Undefined("a/v accuracy"));
    }
    Ok(correct as f64 / scored as f64)
}

/// Rows are truth labels, columns predictions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub labels: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn row_sum(&self, i: usize) -> u64 {
        self.counts[i].iter().sum()
    }
}

pub fn confusion<S: AsRef<str>>(preds: &[S], truths: &[S], labels: &[S]) -> Result<ConfusionMatrix> {
    if preds.len() != truths.len() {
        return Err(Error::LengthMismatch(preds.len(), truths.len()));
    }
    let labels: Vec<String> = labels.iter().map(|l| l.as_ref().to_string()).collect();
    let index = |s: &str| {
        labels
            .iter()
            .position(|l| l == s)
            .ok_or_else(|| Error::UnknownLabel(s.to_string()))
    };
    let mut counts = vec![vec![0u64; labels.len()]; labels.len()];
    for (p, t) in preds.iter().zip(truths) {
        let (pi, ti) = (index(p.as_ref())?, index(t.as_ref())?);
        counts[ti][pi] += 1;
    }
    Ok(ConfusionMatrix { labels, counts })
}

pub fn accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Undefined("accuracy"));
    }
    let trace: u64 = (0..cm.labels.len()).map(|i| cm.counts[i][i]).sum();
    Ok(trace as f64 / total as f64)
}

/// Recall of each label; labels with no truth instances are omitted.
pub fn per_class_accuracy(cm: &ConfusionMatrix) -> BTreeMap<String, f64> {
    cm.labels
        .iter()
        .enumerate()
        .filter_map(|(i, l)| {
            let row = cm.row_sum(i);
            (row > 0).then(|| (l.clone(), cm.counts[i][i] as f64 / row as f64))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SegmentationSummary {
    pub mean_iou: f64,
    pub mean_dice: f64,
    pub mean_precision: f64,
    pub mean_recall: f64,
    pub n: usize,
}

/// Running means of per-image overlap scores.
#[derive(Debug, Clone, Default)]
pub struct SegmentationAccumulator {
    iou: f64,
    dice: f64,
    precision: f64,
    recall: f64,
    n: usize,
}

impl SegmentationAccumulator {
    /// Adds one image; a missing prediction scores zero on every metric.
    pub fn add(&mut self, pred: Option<&BinaryMask>, truth: &BinaryMask) -> Result<()> {
        self.n += 1;
        let Some(pred) = pred else {
            return Ok(());
        };
        self.iou += iou(pred, truth)?;
        self.dice += dice(pred, truth)?;
        self.precision += precision(pred, truth).unwrap_or(0.0);
        self.recall += recall(pred, truth).unwrap_or(if pred.is_empty() { 1.0 } else { 0.0 });
        Ok(())
    }

    pub fn summary(&self) -> SegmentationSummary {
        let n = self.n.max(1) as f64;
        SegmentationSummary {
            mean_iou: self.iou / n,
            mean_dice: self.dice / n,
            mean_precision: self.precision / n,
            mean_recall: self.recall / n,
            n: self.n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationSummary {
    pub accuracy: f64,
    pub per_class: BTreeMap<String, f64>,
    pub n: usize,
}

impl ClassificationSummary {
    pub fn from_labels(preds: &[String], truths: &[String], labels: &[String]) -> Result<Self> {
        let cm = confusion(preds, truths, labels)?;
        Ok(Self {
            accuracy: accuracy(&cm)?,
            per_class: per_class_accuracy(&cm),
            n: preds.len(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub segmentation: BTreeMap<String, SegmentationSummary>,
    pub classification: BTreeMap<String, ClassificationSummary>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mask(w: u32, h: u32, pts: &[(u32, u32)]) -> BinaryMask {
        BinaryMask::from_fn(w, h, |x, y| pts.contains(&(x, y)))
    }

    #[test]
    fn overlap_examples() {
        let a = mask(3, 3, &[(0, 0), (0, 1)]);
        let b = mask(3, 3, &[(0, 1), (0, 2)]);
        assert!((iou(&a, &b).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!((dice(&a, &b).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&a, &mask(3, 3, &[(2, 2)])).unwrap(), 0.0);
        let empty = BinaryMask::new(3, 3);
        assert_eq!(iou(&empty, &empty).unwrap(), 1.0);
        assert_eq!(dice(&empty, &empty).unwrap(), 1.0);
        assert_eq!(precision(&empty, &a), Err(Error::Undefined("precision")));
        assert_eq!(recall(&a, &empty), Err(Error::Undefined("recall")));
        assert!(iou(&a, &BinaryMask::new(4, 3)).is_err());
    }

    #[test]
    fn subset_precision_recall() {
        let truth = BinaryMask::from_fn(10, 1, |_, _| true);
        let pred = BinaryMask::from_fn(10, 1, |x, _| x < 5);
        assert_eq!(precision(&pred, &truth).unwrap(), 1.0);
        assert_eq!(recall(&pred, &truth).unwrap(), 0.5);
    }

    #[test]
    fn accuracy_examples() {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
        let cm = confusion(&s(&["A", "B", "B", "B"]), &s(&["A", "A", "B", "B"]), &s(&["A", "B"])).unwrap();
        assert_eq!(accuracy(&cm).unwrap(), 0.75);
        let pc = per_class_accuracy(&cm);
        assert_eq!(pc["A"], 0.5);
        assert_eq!(pc["B"], 1.0);
        assert_eq!(cm.row_sum(0), 2);
        let perfect = confusion(&s(&["A", "B"]), &s(&["A", "B"]), &s(&["A", "B"])).unwrap();
        assert_eq!(accuracy(&perfect).unwrap(), 1.0);
        assert!(per_class_accuracy(&perfect).values().all(|&v| v == 1.0));
        assert_eq!(
            confusion(&s(&["A"]), &s(&["C"]), &s(&["A", "B"])),
            Err(Error::UnknownLabel("C".into()))
        );
        assert_eq!(confusion(&s(&["A"]), &s(&[]), &s(&["A"])), Err(Error::LengthMismatch(1, 0)));
    }

    #[test]
    fn empty_row_is_omitted() {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
        let cm = confusion(&s(&["A"]), &s(&["A"]), &s(&["A", "B"])).unwrap();
        assert!(!per_class_accuracy(&cm).contains_key("B"));
    }

    #[test]
    fn av_components() {
        let vessel = BinaryMask::from_fn(7, 1, |x, _| x != 3);
        let truth_av: Vec<AvLabel> = (0..7)
            .map(|x| match x {
                0..=2 => AvLabel::Artery,
                3 => AvLabel::None,
                _ => AvLabel::Vein,
            })
            .collect();
        let truth = VesselMask::new(vessel.clone(), truth_av.clone()).unwrap();
        assert_eq!(av_component_accuracy(&truth, &truth).unwrap(), 1.0);
        let swapped: Vec<AvLabel> = truth_av
            .iter()
            .map(|l| match l {
                AvLabel::Artery => AvLabel::Vein,
                AvLabel::Vein => AvLabel::Artery,
                AvLabel::None => AvLabel::None,
            })
            .collect();
        let half = VesselMask::new(
            vessel.clone(),
            truth_av.iter().zip(&swapped).enumerate().map(|(i, (t, s))| if i < 3 { *t } else { *s }).collect(),
        )
        .unwrap();
        assert_eq!(av_component_accuracy(&half, &truth).unwrap(), 0.5);
        let empty = VesselMask::empty(7, 1);
        assert!(av_component_accuracy(&empty, &truth).is_err());
    }

    fn mask_strategy() -> impl Strategy<Value = BinaryMask> {
        proptest::collection::vec(any::<bool>(), 256)
            .prop_map(|bits| BinaryMask::from_bools(16, 16, &bits).unwrap())
    }

    proptest! {
        #[test]
        fn iou_never_exceeds_dice(a in mask_strategy(), b in mask_strategy()) {
            let (i, d) = (iou(&a, &b).unwrap(), dice(&a, &b).unwrap());
            prop_assert!(i <= d + 1e-15);
            if i > 0.0 && i < 1.0 {
                prop_assert!(i < d);
            } else {
                prop_assert_eq!(i, d);
            }
            prop_assert_eq!(i, iou(&b, &a).unwrap());
            if !a.is_empty() && !b.is_empty() {
                prop_assert_eq!(precision(&a, &b).unwrap(), recall(&b, &a).unwrap());
            }
        }
    }
}
