use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::ConvParams;
use super::model::{crop_probs, pad_batch, pad_grads, OccNet, ParamSet};
use super::tensor::Real;
use crate::error::{Error, Result};
use crate::grid::{BinaryGrid, GridSpec, LabelGrid};
use crate::lovasz::{error_order, lovasz_softmax, weighted_cross_entropy, LossOutput, ProbMap};
use crate::metrics::{confusion, iou_per_class, miou, ConfusionCounts};
use crate::par::Exec;

/// One supervised sample: rasterized radar input and its label grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub input: BinaryGrid,
    pub label: LabelGrid,
}

impl Example {
    pub fn flipped(&self) -> Self {
        Self {
            input: self.input.flip_lateral(),
            label: self.label.flip_lateral(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Lovasz,
    WeightedCe([f64; 3]),
}

impl LossKind {
    pub fn evaluate(&self, probs: &ProbMap, gt: &LabelGrid) -> Result<LossOutput> {
        match self {
            LossKind::Lovasz => lovasz_softmax(probs, gt),
            LossKind::WeightedCe(w) => weighted_cross_entropy(probs, gt, w),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub decay: f64,
    pub plateau_patience: usize,
    pub plateau_delta: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub flip_prob: f64,
    /// Radar frames aggregated per input.
    pub frames: usize,
    pub seed: u64,
    pub widths: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 0.05,
            momentum: 0.9,
            decay: 0.9,
            plateau_patience: 2,
            plateau_delta: 1e-3,
            epochs: 30,
            batch_size: 8,
            flip_prob: 0.5,
            frames: 20,
            seed: 0,
            widths: vec![16, 32, 64],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = self.lr0 > 0.0
            && self.momentum >= 0.0
            && self.decay > 0.0
            && self.plateau_patience > 0
            && self.plateau_delta >= 0.0
            && self.epochs > 0
            && self.batch_size > 0
            && self.frames > 0;
        if !positive {
            return Err(Error::Config(format!("training parameters must be positive: {self:?}")));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config(format!("flip_prob {} outside [0, 1]", self.flip_prob)));
        }
        Ok(())
    }
}

/// Momentum buffers, one per convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdState<T> {
    pub velocity: ParamSet<T>,
}

impl<T: Real> SgdState<T> {
    pub fn new(model: &OccNet<T>) -> Self {
        Self {
            velocity: model.zeros_like(),
        }
    }
}

fn same_shapes<T>(a: &[ConvParams<T>], b: &[ConvParams<T>]) -> bool {
    a.len() == b.len()
        && a
            .iter()
            .zip(b)
            .all(|(x, y)| x.weight.len() == y.weight.len() && x.bias.len() == y.bias.len())
}

/// `v = momentum * v + g; theta -= lr * v`
pub fn sgd_step<T: Real>(model: &mut OccNet<T>, grads: &ParamSet<T>, state: &mut SgdState<T>, lr: f64, momentum: f64) -> Result<()> {
    let params: Vec<&mut ConvParams<T>> = model.convs_mut().collect();
    let shapes_match = params.len() == grads.len()
        && params
            .iter()
            .zip(grads)
            .all(|(p, g)| p.weight.len() == g.weight.len() && p.bias.len() == g.bias.len());
    if !shapes_match || !same_shapes(grads, &state.velocity) {
        return Err(Error::Shape("gradient or velocity buffers do not match the model".into()));
    }
    let (lr, m) = (T::of(lr), T::of(momentum));
    for ((p, g), v) in params.into_iter().zip(grads).zip(&mut state.velocity) {
        for ((theta, &gi), vi) in p.weight.iter_mut().zip(&g.weight).zip(&mut v.weight) {
            *vi = m * *vi + gi;
            *theta -= lr * *vi;
        }
        for ((theta, &gi), vi) in p.bias.iter_mut().zip(&g.bias).zip(&mut v.bias) {
            *vi = m * *vi + gi;
            *theta -= lr * *vi;
        }
    }
    Ok(())
}

/// Multiplies the learning rate by `decay` once the score has failed to beat
/// its best by more than `delta` for `patience` consecutive observations.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauSchedule {
    pub lr: f64,
    pub decay: f64,
    pub patience: usize,
    pub delta: f64,
    best: f64,
    stale: usize,
}

impl PlateauSchedule {
    pub fn new(lr: f64, decay: f64, patience: usize, delta: f64, baseline: f64) -> Self {
        Self {
            lr,
            decay,
            patience,
            delta,
            best: baseline,
            stale: 0,
        }
    }

    /// Records one epoch's score and returns the learning rate for the next.
    pub fn observe(&mut self, score: f64) -> f64 {
        if score > self.best + self.delta {
            self.best = score;
            self.stale = 0;
        } else {
            self.stale += 1;
            if self.stale >= self.patience {
                self.lr *= self.decay;
                self.stale = 0;
            }
        }
        self.lr
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_miou: f64,
    /// Learning rate after this epoch's schedule update.
    pub lr: f64,
    /// Training examples skipped because they had no labelled cell.
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub initial_val_miou: f64,
    pub epochs: Vec<EpochLog>,
    /// Epoch whose weights were kept (0 means the initial weights).
    pub best_epoch: usize,
    pub best_val_miou: f64,
}

/// Mean loss and parameter gradients over a batch. Examples without labelled
/// cells are left out of the mean; `None` if none remain.
pub fn batch_loss_and_grads<T: Real>(
    model: &OccNet<T>,
    batch: &[&Example],
    loss: &LossKind,
) -> Result<Option<(f64, ParamSet<T>)>> {
    let usable: Vec<&Example> = batch.iter().copied().filter(|e| e.label.cells.data.iter().any(|c| c.class_index().is_some())).collect();
    let Some(first) = usable.first() else { return Ok(None) };
    let spec = first.label.spec;
    for e in &usable {
        spec.ensure_same(&e.label.spec)?;
    }
    let inputs: Vec<&BinaryGrid> = usable.iter().map(|e| &e.input).collect();
    let x = pad_batch::<T>(&spec, &inputs, model.depth())?;
    let tape = model.forward_tape(x)?;
    let probs = crop_probs(&spec, &tape.probs);
    let n = usable.len() as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(usable.len());
    for (p, e) in probs.iter().zip(&usable) {
        let out = loss.evaluate(p, &e.label)?;
        if !out.loss.is_finite() {
            return Err(Error::NonFinite(format!("loss {} on a training example", out.loss)));
        }
        total += out.loss;
        grads.push(out.grad.iter().map(|g| [g[0] / n, g[1] / n, g[2] / n]).collect::<Vec<_>>());
    }
    let g = pad_grads::<T>(&spec, &grads, tape.probs.shape);
    let params = model.backward(&tape, &g)?;
    Ok(Some((total / n, params)))
}

/// Confusion-based mIoU of the model's predictions on `examples`.
pub fn evaluate_model<T: Real>(model: &OccNet<T>, examples: &[Example], exec: Exec) -> Result<f64> {
    let counts = exec.try_map(examples, |e| {
        let pred = model.infer(&e.label.spec, &e.input)?;
        confusion(&pred, &e.label)
    })?;
    let total: ConfusionCounts = counts.into_iter().sum();
    Ok(miou(&iou_per_class(&total)))
}

/// Supervised training with SGD + momentum, plateau decay on validation mIoU
/// and lateral flip augmentation. Returns the weights with the best
/// validation mIoU (earliest on ties).
pub fn train(train_set: &[Example], val_set: &[Example], cfg: &TrainConfig, loss: LossKind) -> Result<(OccNet<f32>, TrainLog)> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Empty("training and validation splits must be non-empty".into()));
    }
    let mut model = OccNet::<f32>::new(&cfg.widths, cfg.seed)?;
    let mut state = SgdState::new(&model);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0f_7a41_u64);
    let exec = Exec::default();

    let initial = evaluate_model(&model, val_set, exec)?;
    let mut schedule = PlateauSchedule::new(cfg.lr0, cfg.decay, cfg.plateau_patience, cfg.plateau_delta, initial);
    let mut best = (model.clone(), 0usize, initial);
    let mut log = TrainLog {
        initial_val_miou: initial,
        epochs: Vec::with_capacity(cfg.epochs),
        best_epoch: 0,
        best_val_miou: initial,
    };
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let lr = schedule.lr;
        let (mut loss_sum, mut seen, mut skipped) = (0.0, 0usize, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Example> = chunk
                .iter()
                .map(|&i| {
                    if rng.gen::<f64>() < cfg.flip_prob {
                        train_set[i].flipped()
                    } else {
                        train_set[i].clone()
                    }
                })
                .collect();
            let refs: Vec<&Example> = batch.iter().collect();
            let usable = refs.iter().filter(|e| e.label.cells.data.iter().any(|c| c.class_index().is_some())).count();
            skipped += refs.len() - usable;
            if let Some((l, grads)) = batch_loss_and_grads(&model, &refs, &loss)? {
                sgd_step(&mut model, &grads, &mut state, lr, cfg.momentum)?;
                loss_sum += l * usable as f64;
                seen += usable;
            }
        }
        if model.convs().any(|p| p.weight.iter().chain(&p.bias).any(|w| !w.is_finite())) {
            return Err(Error::NonFinite(format!("weights diverged in epoch {epoch}")));
        }
        let val = evaluate_model(&model, val_set, exec)?;
        let next_lr = schedule.observe(val);
        if val > best.2 {
            best = (model.clone(), epoch, val);
        }
        let entry = EpochLog {
            epoch,
            train_loss: if seen > 0 { loss_sum / seen as f64 } else { f64::NAN },
            val_miou: val,
            lr: next_lr,
            skipped,
        };
        log::info!(
            "epoch {epoch}: loss {:.4} val mIoU {:.4} lr {:.5}",
            entry.train_loss,
            entry.val_miou,
            entry.lr
        );
        log.epochs.push(entry);
    }
    log.best_epoch = best.1;
    log.best_val_miou = best.2;
    Ok((best.0, log))
}

/// Batch inference; inputs are independent so they run under `exec`.
pub fn infer_batch<T: Real>(model: &OccNet<T>, spec: &GridSpec, inputs: &[BinaryGrid], exec: Exec) -> Result<Vec<LabelGrid>> {
    exec.try_map(inputs, |x| model.infer(spec, x))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// Parameters whose perturbation crossed a ReLU, pooling or sorting boundary.
    pub skipped: usize,
}

/// Relative error with a small absolute floor so exact zeros compare cleanly.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let d = (a - b).abs();
    if d == 0.0 {
        0.0
    } else {
        d / a.abs().max(b.abs()).max(1e-6)
    }
}

/// ReLU signs, pooling argmaxes and, for Lovasz, the ground-truth flags in
/// error order. Reordering cells that share a flag is not a kink.
type Signature = (Vec<bool>, Vec<u32>, Vec<Vec<bool>>);

fn loss_with_signature(model: &OccNet<f64>, sample: &Example, loss: &LossKind) -> Result<(f64, Signature)> {
    let spec = sample.label.spec;
    let x = pad_batch::<f64>(&spec, &[&sample.input], model.depth())?;
    let tape = model.forward_tape(x)?;
    let probs = crop_probs(&spec, &tape.probs).remove(0);
    let out = loss.evaluate(&probs, &sample.label)?;
    let (relu, pool) = tape.signature(&model.layers);
    let cells: Vec<(usize, usize)> = sample
        .label
        .cells
        .data
        .iter()
        .enumerate()
        .filter_map(|(i, c)| c.class_index().map(|k| (i, k)))
        .collect();
    let orders = match loss {
        LossKind::Lovasz => (0..3)
            .map(|k| error_order(&probs, &cells, k).into_iter().map(|i| cells[i].1 == k).collect())
            .collect(),
        LossKind::WeightedCe(_) => Vec::new(),
    };
    Ok((out.loss, (relu, pool, orders)))
}

/// Compares analytic parameter gradients of `model` on one sample with
/// central differences of step `eps`.
pub fn grad_check(model: &OccNet<f64>, loss: &LossKind, sample: &Example, eps: f64) -> Result<GradCheckReport> {
    let (_, analytic) = batch_loss_and_grads(model, &[sample], loss)?.ok_or(Error::UndefinedLoss)?;
    let (_, base_sig) = loss_with_signature(model, sample, loss)?;
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        checked: 0,
        skipped: 0,
    };
    let n_conv = analytic.len();
    for ci in 0..n_conv {
        let n_w = analytic[ci].weight.len();
        for pi in 0..n_w + analytic[ci].bias.len() {
            let eval = |delta: f64| -> Result<(f64, Signature)> {
                let mut m = model.clone();
                let p = m.convs_mut().nth(ci).expect("conv index");
                if pi < n_w {
                    p.weight[pi] += delta;
                } else {
                    p.bias[pi - n_w] += delta;
                }
                loss_with_signature(&m, sample, loss)
            };
            let (plus, sig_p) = eval(eps)?;
            let (minus, sig_m) = eval(-eps)?;
            if sig_p != base_sig || sig_m != base_sig {
                report.skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let a = if pi < n_w {
                analytic[ci].weight[pi]
            } else {
                analytic[ci].bias[pi - n_w]
            };
            report.max_rel_err = report.max_rel_err.max(rel_err(a, numeric));
            report.checked += 1;
        }
    }
    Ok(report)
}
