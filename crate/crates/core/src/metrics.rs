//! Three-class confusion counting, per-class IoU and mIoU.
//!
//! Ground-truth Ignore cells are skipped. Dataset scores pool the confusion
//! counts of every grid before taking ratios (micro averaging), and a class
//! absent from both prediction and ground truth scores an IoU of 1.

use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::LabelGrid;

/// Counts indexed `[ground truth][prediction]` over Free, Occupied, Unobserved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts(pub [[u64; 3]; 3]);

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.0.iter().flatten().sum()
    }

    pub fn true_positives(&self, class: usize) -> u64 {
        self.0[class][class]
    }

    /// Cells of `class` in the ground truth.
    pub fn actual(&self, class: usize) -> u64 {
        self.0[class].iter().sum()
    }

    /// Cells predicted as `class`.
    pub fn predicted(&self, class: usize) -> u64 {
        self.0.iter().map(|row| row[class]).sum()
    }

    pub fn transpose(&self) -> Self {
        let mut t = [[0; 3]; 3];
        for (i, row) in self.0.iter().enumerate() {
            for (j, &n) in row.iter().enumerate() {
                t[j][i] = n;
            }
        }
        Self(t)
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, rhs: Self) {
        for (a, b) in self.0.iter_mut().flatten().zip(rhs.0.iter().flatten()) {
            *a += b;
        }
    }
}

impl Add for ConfusionCounts {
    type Output = Self;

    fn add(mut self, rhs: Self) -> Self {
        self += rhs;
        self
    }
}

impl std::iter::Sum for ConfusionCounts {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), |a, b| a + b)
    }
}

pub fn confusion(pred: &LabelGrid, gt: &LabelGrid) -> Result<ConfusionCounts> {
    pred.spec.ensure_same(&gt.spec)?;
    let mut counts = ConfusionCounts::default();
    for (i, (&p, &g)) in pred.cells.data.iter().zip(&gt.cells.data).enumerate() {
        let Some(gi) = g.class_index() else { continue };
        let Some(pi) = p.class_index() else {
            let c = gt.spec.cell_of_index(i);
            return Err(Error::IgnoreInPrediction { u: c.u, v: c.v });
        };
        counts.0[gi][pi] += 1;
    }
    Ok(counts)
}

/// IoU of Free, Occupied and Unobserved, in that order.
pub fn iou_per_class(counts: &ConfusionCounts) -> [f64; 3] {
    std::array::from_fn(|c| {
        let tp = counts.true_positives(c);
        let union = counts.actual(c) + counts.predicted(c) - tp;
        if union == 0 {
            1.0
        } else {
            tp as f64 / union as f64
        }
    })
}

pub fn miou(ious: &[f64; 3]) -> f64 {
    ious.iter().sum::<f64>() / ious.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub iou_free: f64,
    pub iou_occupied: f64,
    pub iou_unobserved: f64,
    pub miou: f64,
    pub counts: ConfusionCounts,
    pub n_grids: usize,
}

impl MetricsReport {
    pub fn from_counts(counts: ConfusionCounts, n_grids: usize) -> Self {
        let ious = iou_per_class(&counts);
        Self {
            iou_free: ious[0],
            iou_occupied: ious[1],
            iou_unobserved: ious[2],
            miou: miou(&ious),
            counts,
            n_grids,
        }
    }

    pub fn ious(&self) -> [f64; 3] {
        [self.iou_free, self.iou_occupied, self.iou_unobserved]
    }
}

/// Pools the confusion counts of every (prediction, ground truth) pair.
pub fn evaluate(pairs: &[(LabelGrid, LabelGrid)]) -> Result<MetricsReport> {
    let mut counts = ConfusionCounts::default();
    for (pred, gt) in pairs {
        counts += confusion(pred, gt)?;
    }
    Ok(MetricsReport::from_counts(counts, pairs.len()))
}

pub fn evaluate_refs<'a>(pairs: impl IntoIterator<Item = (&'a LabelGrid, &'a LabelGrid)>) -> Result<MetricsReport> {
    let mut counts = ConfusionCounts::default();
    let mut n = 0;
    for (pred, gt) in pairs {
        counts += confusion(pred, gt)?;
        n += 1;
    }
    Ok(MetricsReport::from_counts(counts, n))
}
