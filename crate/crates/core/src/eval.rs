//! Segmentation metrics (per-class IoU, mIoU) and detection health checks.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::losses::IGNORE_LABEL;
use crate::nets::{decode_offsets, AnchorGrid, AnchorTargets, DetFlat, DsModel};
use crate::types::LabeledScene;

/// `matrix[t * C + p]` counts pixels of true class `t` predicted as `p`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub classes: usize,
    pub matrix: Vec<u64>,
}

/// How classes absent from both prediction and truth enter the mean.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UndefinedClass {
    #[default]
    Exclude,
    CountAsZero,
}

impl ConfusionCounts {
    pub fn new(classes: usize) -> Self {
        ConfusionCounts {
            classes,
            matrix: vec![0; classes * classes],
        }
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.matrix[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.matrix.iter().sum()
    }

    /// Adds one prediction/truth pair; truth pixels equal to 255 are skipped.
    pub fn accumulate(&mut self, pred: &[u8], truth: &[u8]) {
        assert_eq!(pred.len(), truth.len(), "prediction and truth differ in size");
        let c = self.classes;
        for (&p, &t) in pred.iter().zip(truth) {
            if t == IGNORE_LABEL {
                continue;
            }
            assert!((t as usize) < c && (p as usize) < c, "class id out of range");
            self.matrix[t as usize * c + p as usize] += 1;
        }
    }

    pub fn merge(&mut self, other: &ConfusionCounts) {
        assert_eq!(self.classes, other.classes);
        for (a, b) in self.matrix.iter_mut().zip(&other.matrix) {
            *a += b;
        }
    }

    pub fn tp(&self, c: usize) -> u64 {
        self.get(c, c)
    }

    pub fn fp(&self, c: usize) -> u64 {
        (0..self.classes).filter(|&t| t != c).map(|t| self.get(t, c)).sum()
    }

    pub fn fn_(&self, c: usize) -> u64 {
        (0..self.classes).filter(|&p| p != c).map(|p| self.get(c, p)).sum()
    }

    /// `TP / (TP + FP + FN)`, or `None` when the class never occurs.
    pub fn iou(&self, c: usize) -> Option<f64> {
        iou_from(self.tp(c), self.fp(c), self.fn_(c))
    }

    /// Mean IoU over `subset` (all classes when `None`).
    pub fn miou(&self, subset: Option<&[usize]>, undefined: UndefinedClass) -> Option<f64> {
        let all: Vec<usize> = (0..self.classes).collect();
        let classes = subset.unwrap_or(&all);
        let vals: Vec<f64> = classes
            .iter()
            .filter_map(|&c| match (self.iou(c), undefined) {
                (Some(v), _) => Some(v),
                (None, UndefinedClass::CountAsZero) => Some(0.0),
                (None, UndefinedClass::Exclude) => None,
            })
            .collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    }

    /// Fraction of non-ignored pixels predicted correctly.
    pub fn pixel_accuracy(&self) -> Option<f64> {
        let total = self.total();
        (total > 0).then(|| (0..self.classes).map(|c| self.tp(c)).sum::<u64>() as f64 / total as f64)
    }
}

pub fn iou_from(tp: u64, fp: u64, fn_: u64) -> Option<f64> {
    let d = tp + fp + fn_;
    (d > 0).then(|| tp as f64 / d as f64)
}

/// Per-pixel argmax over the channels of one `[C, H, W]` logit block.
pub fn argmax_channels(logits: &[f32], channels: usize) -> Vec<u8> {
    let hw = logits.len() / channels;
    (0..hw)
        .map(|i| {
            let mut best = 0;
            for c in 1..channels {
                if logits[c * hw + i] > logits[best * hw + i] {
                    best = c;
                }
            }
            best as u8
        })
        .collect()
}

/// Segmentation-stream predictions for `scenes`, `batch` scenes per pass.
pub fn predict_labels(model: &DsModel, scenes: &[LabeledScene], batch: usize) -> Vec<Vec<u8>> {
    let c = model.arch.num_classes;
    let mut out = Vec::with_capacity(scenes.len());
    for chunk in scenes.chunks(batch.max(1)) {
        let refs: Vec<&LabeledScene> = chunk.iter().collect();
        let logits = model.predict(&refs);
        let per = logits.len() / chunk.len();
        for block in logits.data().chunks(per) {
            out.push(argmax_channels(block, c));
        }
    }
    out
}

/// Confusion counts of `model` on labelled `scenes`.
pub fn evaluate_model(model: &DsModel, scenes: &[LabeledScene], batch: usize) -> ConfusionCounts {
    let mut counts = ConfusionCounts::new(model.arch.num_classes);
    for (pred, s) in predict_labels(model, scenes, batch).iter().zip(scenes) {
        let truth = s.pixel_labels.as_ref().expect("evaluation scenes carry pixel labels");
        counts.accumulate(pred, truth);
    }
    counts
}

/// Anchor-classification accuracy over all anchors and mean absolute
/// corner error (pixels) of decoded boxes over positive anchors.
pub fn det_sanity(out: &DetFlat<f32>, targets: &AnchorTargets, grid: &AnchorGrid, k: usize) -> BTreeMap<String, f64> {
    let n = targets.labels.len();
    let mut correct = 0usize;
    let mut loc_err = 0.0f64;
    let mut positives = 0usize;
    for a in 0..n {
        let row = &out.logits[a * k..(a + 1) * k];
        let mut best = 0;
        for j in 1..k {
            if row[j] > row[best] {
                best = j;
            }
        }
        if best == targets.labels[a] {
            correct += 1;
        }
        if targets.labels[a] != 0 {
            let anchor = &grid.anchors[a];
            let o = &out.offsets[a * 4..a * 4 + 4];
            let pred = decode_offsets(anchor, [o[0], o[1], o[2], o[3]]);
            let truth = decode_offsets(anchor, targets.offsets[a]);
            loc_err += ((pred.x_min - truth.x_min).abs()
                + (pred.y_min - truth.y_min).abs()
                + (pred.x_max - truth.x_max).abs()
                + (pred.y_max - truth.y_max).abs()) as f64
                / 4.0;
            positives += 1;
        }
    }
    let mut m = BTreeMap::new();
    if n > 0 {
        m.insert("anchor_accuracy".to_string(), correct as f64 / n as f64);
    }
    if positives > 0 {
        m.insert("loc_error".to_string(), loc_err / positives as f64);
    }
    m
}
