//! SGD with momentum, the accuracy-window stopping rule, stratified 85/15
//! splits, k-fold cross-validation and classification metrics.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::augment::{augment_sample, AugmentPolicy};
use crate::error::{Error, Result};
use crate::layers::{Layer, LayerKind, ParamGrads};
use crate::network::{Dataset, Network};
use crate::rng::{stream_seed, Rng, Stream};

/// Epoch cap for long fine-tuning runs.
pub const LONG_RUN_MAX_EPOCHS: usize = 200;

/// Percentage of each class that goes to the training side of a split.
pub const TRAIN_PERCENT: usize = 85;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub max_epochs: usize,
    /// Number of most recent batches averaged by the stopping rule.
    pub stop_window: usize,
    pub stop_threshold: f64,
    pub seed: u64,
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            base_lr: 1e-4,
            momentum: 0.9,
            max_epochs: 30,
            stop_window: 50,
            stop_threshold: 0.995,
            seed: 0,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.stop_threshold > 0.0 && self.stop_threshold <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "stop_threshold must lie in (0, 1], got {}",
                self.stop_threshold
            )));
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "base_lr must be non-negative, got {}",
                self.base_lr
            )));
        }
        Ok(())
    }
}

/// One momentum step: `v <- momentum * v + grad`, then
/// `param <- param - base_lr * lr_factor * v`.
pub fn sgdm_step(
    param: &mut [f64],
    grad: &[f64],
    velocity: &mut [f64],
    base_lr: f64,
    lr_factor: f64,
    momentum: f64,
) -> Result<()> {
    if param.len() != grad.len() || param.len() != velocity.len() {
        return Err(Error::ShapeMismatch {
            context: "sgdm_step",
            expected: vec![param.len()],
            found: vec![grad.len(), velocity.len()],
        });
    }
    if lr_factor < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "lr_factor must be non-negative, got {lr_factor}"
        )));
    }
    let step = base_lr * lr_factor;
    for ((p, &g), v) in param.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = momentum * *v + g;
        *p -= step * *v;
    }
    Ok(())
}

/// Applies [`sgdm_step`] to every parameter of `layer`. Nested residual
/// layers use their own lr factor; a frozen parent freezes its children.
pub fn apply_sgdm(
    layer: &mut Layer,
    grads: &ParamGrads,
    velocity: &mut ParamGrads,
    base_lr: f64,
    momentum: f64,
) -> Result<()> {
    apply_sgdm_inner(layer, grads, velocity, base_lr, momentum, false)
}

fn apply_sgdm_inner(
    layer: &mut Layer,
    grads: &ParamGrads,
    velocity: &mut ParamGrads,
    base_lr: f64,
    momentum: f64,
    parent_frozen: bool,
) -> Result<()> {
    let frozen = parent_frozen || layer.frozen;
    if let (LayerKind::Residual(nested), ParamGrads::Residual(gs), ParamGrads::Residual(vs)) =
        (&mut layer.kind, grads, &mut *velocity)
    {
        if nested.len() != gs.len() || nested.len() != vs.len() {
            return Err(Error::InvalidArgument(
                "gradient tree does not match residual block".into(),
            ));
        }
        for ((l, g), v) in nested.iter_mut().zip(gs).zip(vs.iter_mut()) {
            apply_sgdm_inner(l, g, v, base_lr, momentum, frozen)?;
        }
        return Ok(());
    }
    if frozen {
        return Ok(());
    }
    let lr_factor = layer.lr_factor;
    let params = layer.params_mut();
    let gs = grads.tensors();
    let vs = velocity.tensors_mut();
    if params.len() != gs.len() || params.len() != vs.len() {
        return Err(Error::InvalidArgument(
            "gradient tree does not match layer parameters".into(),
        ));
    }
    for ((p, g), v) in params.into_iter().zip(gs).zip(vs) {
        sgdm_step(p.data_mut(), g.data(), v.data_mut(), base_lr, lr_factor, momentum)?;
    }
    Ok(())
}

/// True once the mean of the last `stop_window` batch accuracies reaches
/// `stop_threshold`, or once `max_epochs` epochs are done. The accuracy rule
/// needs a full window.
pub fn should_stop(batch_accuracies: &[f64], epochs_done: usize, cfg: &TrainConfig) -> bool {
    if epochs_done >= cfg.max_epochs {
        return true;
    }
    let w = cfg.stop_window;
    if w == 0 || batch_accuracies.len() < w {
        return false;
    }
    let recent = &batch_accuracies[batch_accuracies.len() - w..];
    compensated_sum(recent) >= cfg.stop_threshold * w as f64
}

/// Neumaier summation. A plain running sum of fifty 0.995 values lands
/// below `0.995 * 50`.
fn compensated_sum(values: &[f64]) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for &v in values {
        let t = sum + v;
        comp += if sum.abs() >= v.abs() {
            (sum - t) + v
        } else {
            (v - t) + sum
        };
        sum = t;
    }
    sum + comp
}

/// `(train, test)` counts for a class of `n` samples: `floor(0.85 n)` and the
/// remainder, in integer arithmetic.
pub fn split_counts(n: usize) -> (usize, usize) {
    let train = n * TRAIN_PERCENT / 100;
    (train, n - train)
}

/// Per-class item lists, train side then test side.
pub type ClassSplit<T> = (Vec<Vec<T>>, Vec<Vec<T>>);

/// Stratified 85/15 split. Each class list is shuffled independently (in
/// class order, from one stream) and its first `floor(0.85 n)` items go to
/// training.
pub fn split_85_15<T: Clone>(per_class: &[Vec<T>], rng: &mut Rng) -> Result<ClassSplit<T>> {
    let mut train = Vec::with_capacity(per_class.len());
    let mut test = Vec::with_capacity(per_class.len());
    for (c, items) in per_class.iter().enumerate() {
        if items.is_empty() {
            return Err(Error::EmptyData(format!("class {c} has no samples to split")));
        }
        let mut shuffled = items.clone();
        rng.shuffle(&mut shuffled);
        let (n_train, _) = split_counts(shuffled.len());
        let rest = shuffled.split_off(n_train);
        train.push(shuffled);
        test.push(rest);
    }
    Ok((train, test))
}

/// [`split_85_15`] over a dataset, using the split stream of `seed`.
/// Output samples are grouped by class.
pub fn split_dataset(data: &Dataset, seed: u64) -> Result<(Dataset, Dataset)> {
    let k = data.class_names.len();
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, s) in data.samples.iter().enumerate() {
        per_class
            .get_mut(s.label)
            .ok_or_else(|| Error::InvalidArgument(format!("label {} out of range", s.label)))?
            .push(i);
    }
    let mut rng = Rng::stream(seed, Stream::Split);
    let (train, test) = split_85_15(&per_class, &mut rng)?;
    let flatten = |parts: Vec<Vec<usize>>| parts.into_iter().flatten().collect::<Vec<_>>();
    Ok((data.subset(&flatten(train)), data.subset(&flatten(test))))
}

/// Shuffled round-robin k-fold partition of `0..n`. Returns one
/// `(train_indices, validation_indices)` pair per fold.
pub fn kfold(n: usize, k: usize, rng: &mut Rng) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("k-fold needs k >= 2, got {k}")));
    }
    if n < k {
        return Err(Error::EmptyData(format!("{n} samples cannot fill {k} folds")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    let mut folds = vec![Vec::new(); k];
    for (pos, &i) in order.iter().enumerate() {
        folds[pos % k].push(i);
    }
    Ok((0..k)
        .map(|f| {
            let train = folds
                .iter()
                .enumerate()
                .filter(|&(g, _)| g != f)
                .flat_map(|(_, idx)| idx.iter().copied())
                .collect();
            (train, folds[f].clone())
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchRecord {
    pub epoch: usize,
    pub batch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    /// Rolling batch accuracy reached the threshold.
    AccuracyWindow,
    MaxEpochs,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<BatchRecord>,
    pub epochs_completed: usize,
    pub stop_reason: StopReason,
}

impl TrainHistory {
    pub fn batch_accuracies(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.accuracy).collect()
    }
}

/// Minibatch SGDM training.
///
/// Each epoch visits the samples in a fresh shuffled order (split stream)
/// in batches of `batch_size`, keeping a short final batch. Per sample the
/// image is augmented (augment stream, re-seeded per draw as
/// `augment_seed ^ draw_index`), pushed forward and backward; gradients are
/// summed in sample order, averaged, and applied with [`apply_sgdm`].
/// Velocities start at zero.
pub fn train_loop(net: &mut Network, data: &Dataset, cfg: &TrainConfig) -> Result<TrainHistory> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyData("training set is empty".into()));
    }
    if data.class_names != net.class_names {
        return Err(Error::InvalidArgument(format!(
            "dataset classes {:?} do not match network classes {:?}",
            data.class_names, net.class_names
        )));
    }
    if let Some(s) = data.samples.iter().find(|s| s.label >= net.num_classes()) {
        return Err(Error::InvalidArgument(format!("label {} out of range", s.label)));
    }

    let n = data.len();
    let policy = AugmentPolicy::default();
    let augment_seed = stream_seed(cfg.seed, Stream::Augment);
    let mut order_rng = Rng::stream(cfg.seed, Stream::Split);
    let mut velocity: Vec<ParamGrads> = net.layers.iter().map(ParamGrads::zeros_like).collect();
    let mut records = Vec::new();
    let mut accuracies = Vec::new();
    let mut draw: u64 = 0;
    let mut epoch = 0;

    let stop_reason = 'training: loop {
        if should_stop(&accuracies, epoch, cfg) {
            break 'training StopReason::MaxEpochs;
        }
        let mut order: Vec<usize> = (0..n).collect();
        order_rng.shuffle(&mut order);
        for (batch, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut sum: Vec<ParamGrads> = net.layers.iter().map(ParamGrads::zeros_like).collect();
            let mut loss_sum = 0.0;
            let mut correct = 0usize;
            for &i in chunk {
                let sample = &data.samples[i];
                let augmented;
                let image = if cfg.augment {
                    let mut rng = Rng::new(augment_seed ^ draw);
                    augmented = augment_sample(&sample.image, &policy, &mut rng);
                    &augmented
                } else {
                    &sample.image
                };
                draw += 1;
                let (loss, trace, grads) = net
                    .loss_and_grads(image, sample.label)
                    .map_err(|e| with_batch(e, epoch, batch))?;
                loss_sum += loss;
                correct += usize::from(trace.predicted == sample.label);
                for (s, g) in sum.iter_mut().zip(&grads) {
                    s.accumulate(g)?;
                }
            }
            let m = chunk.len() as f64;
            let loss = loss_sum / m;
            if !loss.is_finite() {
                return Err(Error::NumericFailure(format!(
                    "loss {loss} at epoch {epoch}, batch {batch}"
                )));
            }
            for s in &mut sum {
                for t in s.tensors_mut() {
                    t.data_mut().iter_mut().for_each(|v| *v /= m);
                }
            }
            for ((layer, g), v) in net.layers.iter_mut().zip(&sum).zip(velocity.iter_mut()) {
                apply_sgdm(layer, g, v, cfg.base_lr, cfg.momentum)?;
            }
            let accuracy = correct as f64 / m;
            records.push(BatchRecord {
                epoch,
                batch,
                loss,
                accuracy,
            });
            accuracies.push(accuracy);
            if should_stop(&accuracies, epoch, cfg) {
                epoch += 1;
                break 'training StopReason::AccuracyWindow;
            }
        }
        epoch += 1;
    };

    Ok(TrainHistory {
        records,
        epochs_completed: epoch,
        stop_reason,
    })
}

fn with_batch(err: Error, epoch: usize, batch: usize) -> Error {
    match err {
        Error::NumericFailure(msg) => Error::NumericFailure(format!("{msg} (epoch {epoch}, batch {batch})")),
        other => other,
    }
}

/// Confusion matrix (rows = true class, columns = predicted) and accuracies.
#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub confusion: Vec<Vec<usize>>,
    /// `None` for classes with no evaluated samples.
    pub per_class_accuracy: Vec<Option<f64>>,
    pub overall_accuracy: f64,
}

impl Metrics {
    /// Builds metrics from `(true, predicted)` pairs over `k` classes.
    pub fn from_pairs(k: usize, pairs: &[(usize, usize)]) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::EmptyData("no predictions to score".into()));
        }
        let mut confusion = vec![vec![0usize; k]; k];
        for &(t, p) in pairs {
            if t >= k || p >= k {
                return Err(Error::InvalidArgument(format!(
                    "class pair ({t}, {p}) out of range for {k} classes"
                )));
            }
            confusion[t][p] += 1;
        }
        let per_class_accuracy = confusion
            .iter()
            .enumerate()
            .map(|(c, row)| {
                let total: usize = row.iter().sum();
                (total > 0).then(|| row[c] as f64 / total as f64)
            })
            .collect();
        let diag: usize = (0..k).map(|c| confusion[c][c]).sum();
        Ok(Metrics {
            confusion,
            per_class_accuracy,
            overall_accuracy: diag as f64 / pairs.len() as f64,
        })
    }

    pub fn total(&self) -> usize {
        self.confusion.iter().flatten().sum()
    }
}

/// Scores `net` on `data` without augmentation.
pub fn evaluate(net: &Network, data: &Dataset) -> Result<Metrics> {
    if data.is_empty() {
        return Err(Error::EmptyData("evaluation set is empty".into()));
    }
    let mut pairs = Vec::with_capacity(data.len());
    for s in &data.samples {
        pairs.push((s.label, net.forward(&s.image)?.predicted));
    }
    Metrics::from_pairs(net.num_classes(), &pairs)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldOutcome {
    pub validation_indices: Vec<usize>,
    pub train_size: usize,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossValidation {
    pub folds: Vec<FoldOutcome>,
    /// Arithmetic mean of per-fold overall accuracies.
    pub mean_accuracy: f64,
}

/// k-fold cross-validation: each fold trains a copy of `initial` on the
/// other folds and evaluates on its own.
pub fn cross_validate(initial: &Network, data: &Dataset, k: usize, cfg: &TrainConfig) -> Result<CrossValidation> {
    let mut rng = Rng::stream(cfg.seed, Stream::Split);
    let splits = kfold(data.len(), k, &mut rng)?;
    let mut folds = Vec::with_capacity(k);
    for (train_idx, val_idx) in splits {
        let mut net = initial.clone();
        train_loop(&mut net, &data.subset(&train_idx), cfg)?;
        let metrics = evaluate(&net, &data.subset(&val_idx))?;
        folds.push(FoldOutcome {
            validation_indices: val_idx,
            train_size: train_idx.len(),
            metrics,
        });
    }
    let mean_accuracy = folds.iter().map(|f| f.metrics.overall_accuracy).sum::<f64>() / folds.len() as f64;
    Ok(CrossValidation { folds, mean_accuracy })
}
