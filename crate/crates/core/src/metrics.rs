//! Confusion-matrix segmentation metrics.

use std::fmt::Write as _;

use crate::cam::IGNORE;
use crate::error::{Error, Result};

/// `(C+1) × (C+1)` counts, rows ground truth, columns prediction. Pixels
/// whose ground truth is [`IGNORE`] are skipped. A prediction outside the
/// label range counts as a miss for the ground-truth class only.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    n: usize,
    counts: Vec<u64>,
    missed: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_labels: usize) -> Self {
        Self { n: num_labels, counts: vec![0; num_labels * num_labels], missed: vec![0; num_labels] }
    }

    pub fn num_labels(&self) -> usize {
        self.n
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.n + pred]
    }

    pub fn add(&mut self, gt: &[u8], pred: &[u8]) -> Result<()> {
        if gt.len() != pred.len() {
            return Err(Error::Shape(format!("{} ground-truth pixels vs {} predicted", gt.len(), pred.len())));
        }
        for (&g, &p) in gt.iter().zip(pred) {
            if g == IGNORE {
                continue;
            }
            let g = g as usize;
            if g >= self.n {
                return Err(Error::InvalidArgument(format!("ground-truth label {g} out of range")));
            }
            if (p as usize) < self.n {
                self.counts[g * self.n + p as usize] += 1;
            } else {
                self.missed[g] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        for (a, b) in self.missed.iter_mut().zip(&other.missed) {
            *a += b;
        }
    }

    pub fn metrics(&self) -> Metrics {
        let n = self.n;
        let mut iou = Vec::with_capacity(n);
        let mut correct = 0u64;
        let mut total = 0u64;
        for c in 0..n {
            let tp = self.get(c, c);
            let fn_: u64 = (0..n).filter(|&p| p != c).map(|p| self.get(c, p)).sum::<u64>() + self.missed[c];
            let fp: u64 = (0..n).filter(|&g| g != c).map(|g| self.get(g, c)).sum();
            let union = tp + fp + fn_;
            iou.push((union > 0).then(|| tp as f64 / union as f64));
            correct += tp;
            total += tp + fn_;
        }
        let present: Vec<f64> = iou.iter().flatten().copied().collect();
        let miou = if present.is_empty() { 0.0 } else { present.iter().sum::<f64>() / present.len() as f64 };
        let pixel_accuracy = if total == 0 { 0.0 } else { correct as f64 / total as f64 };
        Metrics { iou, miou, pixel_accuracy, confusion: self.clone() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    /// Per label (background first); `None` when the union is empty.
    pub iou: Vec<Option<f64>>,
    /// Mean over labels with a nonzero union.
    pub miou: f64,
    pub pixel_accuracy: f64,
    pub confusion: ConfusionMatrix,
}

impl Metrics {
    /// `class,iou` rows followed by a `miou` row. Empty-union classes print `nan`.
    pub fn to_csv(&self, names: &[String]) -> String {
        let mut s = String::from("class,iou\n");
        for (k, v) in self.iou.iter().enumerate() {
            let name = names.get(k).cloned().unwrap_or_else(|| format!("class{k}"));
            match v {
                Some(x) => writeln!(s, "{name},{x:.6}").unwrap(),
                None => writeln!(s, "{name},nan").unwrap(),
            }
        }
        writeln!(s, "miou,{:.6}", self.miou).unwrap();
        s
    }

    pub fn table(&self, names: &[String]) -> String {
        let mut s = String::new();
        for (k, v) in self.iou.iter().enumerate() {
            let name = names.get(k).cloned().unwrap_or_else(|| format!("class{k}"));
            match v {
                Some(x) => writeln!(s, "{name:<12} {:>6.2}", 100.0 * x).unwrap(),
                None => writeln!(s, "{name:<12}      -").unwrap(),
            }
        }
        writeln!(s, "{:<12} {:>6.2}", "mIoU", 100.0 * self.miou).unwrap();
        writeln!(s, "{:<12} {:>6.2}", "pixel acc", 100.0 * self.pixel_accuracy).unwrap();
        s
    }
}
