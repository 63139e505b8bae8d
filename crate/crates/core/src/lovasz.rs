//! Lovasz-softmax surrogate IoU loss and the weighted cross-entropy ablation.
//!
//! Both losses drop ground-truth Ignore cells before flattening, so masked
//! regions affect neither the value, the gradient, nor class presence.

use crate::error::{Error, Result};
use crate::grid::{GridSpec, LabelGrid};

/// Per-cell class probabilities over (Free, Occupied, Unobserved), row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    pub spec: GridSpec,
    pub probs: Vec<[f64; 3]>,
}

impl ProbMap {
    pub fn new(spec: GridSpec, probs: Vec<[f64; 3]>) -> Result<Self> {
        if probs.len() != spec.len() {
            return Err(Error::Shape(format!("{} probability triples for {} cells", probs.len(), spec.len())));
        }
        Ok(Self { spec, probs })
    }

    pub fn uniform(spec: GridSpec) -> Self {
        Self {
            spec,
            probs: vec![[1.0 / 3.0; 3]; spec.len()],
        }
    }

    /// One-hot map of a label grid; Ignore cells get the uniform triple.
    pub fn one_hot(labels: &LabelGrid) -> Self {
        let probs = labels
            .cells
            .data
            .iter()
            .map(|c| match c.class_index() {
                Some(k) => {
                    let mut p = [0.0; 3];
                    p[k] = 1.0;
                    p
                }
                None => [1.0 / 3.0; 3],
            })
            .collect();
        Self { spec: labels.spec, probs }
    }
}

/// Gradient of the Lovasz extension of the Jaccard loss with respect to the
/// sorted errors. `gt_sorted` is the ground-truth indicator ordered by
/// decreasing error.
pub fn jaccard_grad(gt_sorted: &[bool]) -> Vec<f64> {
    let positives = gt_sorted.iter().filter(|&&g| g).count() as f64;
    if positives == 0.0 {
        return vec![0.0; gt_sorted.len()];
    }
    let mut grad = Vec::with_capacity(gt_sorted.len());
    let (mut cum_pos, mut cum_neg) = (0.0, 0.0);
    let mut prev = 0.0;
    for &g in gt_sorted {
        if g {
            cum_pos += 1.0;
        } else {
            cum_neg += 1.0;
        }
        let jac = 1.0 - (positives - cum_pos) / (positives + cum_neg);
        grad.push(jac - prev);
        prev = jac;
    }
    grad
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    /// d loss / d probability, same layout as [`ProbMap::probs`]. Ignore cells
    /// get zero.
    pub grad: Vec<[f64; 3]>,
    /// Loss of each class, `None` for classes absent from the ground truth.
    pub per_class: [Option<f64>; 3],
}

fn labelled(probs: &ProbMap, gt: &LabelGrid) -> Result<Vec<(usize, usize)>> {
    probs.spec.ensure_same(&gt.spec)?;
    if probs.probs.len() != gt.cells.data.len() {
        return Err(Error::Shape("probability map and labels differ in size".into()));
    }
    let cells: Vec<(usize, usize)> = gt
        .cells
        .data
        .iter()
        .enumerate()
        .filter_map(|(i, c)| c.class_index().map(|k| (i, k)))
        .collect();
    if cells.is_empty() {
        return Err(Error::UndefinedLoss);
    }
    Ok(cells)
}

/// Sort permutation of the class-`c` errors used by [`lovasz_softmax`]:
/// decreasing error, ties by pixel position.
pub fn error_order(probs: &ProbMap, cells: &[(usize, usize)], class: usize) -> Vec<usize> {
    let errors: Vec<f64> = cells
        .iter()
        .map(|&(i, k)| {
            let p = probs.probs[i][class];
            if k == class {
                1.0 - p
            } else {
                p
            }
        })
        .collect();
    let mut order: Vec<usize> = (0..cells.len()).collect();
    order.sort_by(|&a, &b| errors[b].total_cmp(&errors[a]).then(a.cmp(&b)));
    order
}

/// Multi-class Lovasz-softmax, averaged over classes present in the ground
/// truth. The gradient holds the sort permutation fixed (the loss is
/// piecewise linear in the probabilities).
pub fn lovasz_softmax(probs: &ProbMap, gt: &LabelGrid) -> Result<LossOutput> {
    let cells = labelled(probs, gt)?;
    let mut grad = vec![[0.0; 3]; probs.probs.len()];
    let mut per_class = [None; 3];
    let present: Vec<usize> = (0..3).filter(|&c| cells.iter().any(|&(_, k)| k == c)).collect();
    let scale = 1.0 / present.len() as f64;
    let mut total = 0.0;
    for &c in &present {
        let order = error_order(probs, &cells, c);
        let fg: Vec<bool> = order.iter().map(|&j| cells[j].1 == c).collect();
        let g = jaccard_grad(&fg);
        let mut loss_c = 0.0;
        for (rank, &j) in order.iter().enumerate() {
            let (i, k) = cells[j];
            let p = probs.probs[i][c];
            let (err, derr) = if k == c { (1.0 - p, -1.0) } else { (p, 1.0) };
            loss_c += err * g[rank];
            grad[i][c] += scale * g[rank] * derr;
        }
        per_class[c] = Some(loss_c);
        total += loss_c;
    }
    Ok(LossOutput {
        loss: total * scale,
        grad,
        per_class,
    })
}

const PROB_FLOOR: f64 = 1e-12;

/// Mean of `-w[gt] ln p[gt]` over labelled cells.
pub fn weighted_cross_entropy(probs: &ProbMap, gt: &LabelGrid, weights: &[f64; 3]) -> Result<LossOutput> {
    if weights.iter().any(|&w| !(w > 0.0)) {
        return Err(Error::Config(format!("class weights must be positive, got {weights:?}")));
    }
    let cells = labelled(probs, gt)?;
    let n = cells.len() as f64;
    let mut grad = vec![[0.0; 3]; probs.probs.len()];
    let mut sums = [0.0; 3];
    let mut counts = [0usize; 3];
    let mut total = 0.0;
    for &(i, k) in &cells {
        let p = probs.probs[i][k];
        let term = -weights[k] * p.max(PROB_FLOOR).ln();
        total += term;
        sums[k] += term;
        counts[k] += 1;
        if p > PROB_FLOOR {
            grad[i][k] = -weights[k] / (p * n);
        }
    }
    let per_class = std::array::from_fn(|c| (counts[c] > 0).then(|| sums[c] / counts[c] as f64));
    Ok(LossOutput {
        loss: total / n,
        grad,
        per_class,
    })
}
