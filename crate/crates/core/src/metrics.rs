//! Accumulated IoU metrics.
//!
//! Counts are summed per class over all episodes before any ratio is taken,
//! and counts are integers, so the result does not depend on episode order.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn from_masks(pred: &[u8], truth: &[u8]) -> Self {
        let mut c = Confusion::default();
        for (&p, &t) in pred.iter().zip(truth) {
            match (p != 0, t != 0) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        c
    }

    fn add(&mut self, o: &Confusion) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.tn += o.tn;
    }

    /// Foreground IoU; 1 when neither prediction nor truth has foreground.
    pub fn iou_fg(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp + self.fn_)
    }

    pub fn iou_bg(&self) -> f64 {
        ratio(self.tn, self.tn + self.fp + self.fn_)
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_class_iou: BTreeMap<usize, f64>,
    pub miou: f64,
    pub fbiou: f64,
    pub episodes: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, Default)]
pub struct MetricsAccumulator {
    per_class: BTreeMap<usize, Confusion>,
    total: Confusion,
    episodes: usize,
}

impl MetricsAccumulator {
    pub fn new() -> Self {
        MetricsAccumulator::default()
    }

    pub fn add(&mut self, class_id: usize, pred: &[u8], truth: &[u8]) {
        self.add_confusion(class_id, &Confusion::from_masks(pred, truth));
    }

    pub fn add_confusion(&mut self, class_id: usize, c: &Confusion) {
        self.per_class.entry(class_id).or_default().add(c);
        self.total.add(c);
        self.episodes += 1;
    }

    pub fn report(&self, seed: u64) -> MetricsReport {
        let per_class_iou: BTreeMap<usize, f64> = self
            .per_class
            .iter()
            .map(|(&c, conf)| (c, conf.iou_fg()))
            .collect();
        let miou = if per_class_iou.is_empty() {
            0.0
        } else {
            per_class_iou.values().sum::<f64>() / per_class_iou.len() as f64
        };
        MetricsReport {
            per_class_iou,
            miou,
            fbiou: (self.total.iou_fg() + self.total.iou_bg()) / 2.0,
            episodes: self.episodes,
            seed,
        }
    }
}
