//! SGD with momentum, confusion-matrix metrics, the training and
//! evaluation loops, and the attention/depth ablation harness.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::rc::Rc;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Value};
use crate::blocks::FwdCtx;
use crate::conv::AttentionMode;
use crate::dataset::{class_histogram, BatchIterator, DatasetSpec, Mode, SphereSample};
use crate::net::{build_network, load_checkpoint, save_checkpoint, NetworkConfig, PyramidNet};
use crate::params::{Binding, ParamStore};
use crate::spatial::nearest_upsample_index;
use crate::{derive_seed, Error, Result};

// ---- confusion matrix and metrics -------------------------------------------

/// Per-class tally of (truth, prediction) pairs. Rows are ground truth,
/// columns are predictions.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    class_count: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(class_count: usize) -> Result<Self> {
        if class_count == 0 {
            return Err(Error::Config("confusion matrix needs at least one class".into()));
        }
        Ok(ConfusionMatrix { class_count, counts: vec![0; class_count * class_count] })
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn count(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.class_count + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Tally prediction/truth pairs. Pairs whose truth equals the ignore
    /// index are skipped entirely; everything else must be in range.
    pub fn accumulate(
        &mut self,
        pred: &[u32],
        truth: &[u32],
        ignore_index: Option<usize>,
    ) -> Result<()> {
        if pred.len() != truth.len() {
            return Err(Error::Dim(format!(
                "{} predictions for {} labels",
                pred.len(),
                truth.len()
            )));
        }
        for (&p, &t) in pred.iter().zip(truth) {
            if Some(t as usize) == ignore_index {
                continue;
            }
            if t as usize >= self.class_count || p as usize >= self.class_count {
                return Err(Error::Label(format!(
                    "pair (truth {}, prediction {}) outside {} classes",
                    t, p, self.class_count
                )));
            }
            self.counts[t as usize * self.class_count + p as usize] += 1;
        }
        Ok(())
    }
}

/// One-shot tally of a prediction/label pairing.
pub fn accumulate_confusion(
    pred: &[u32],
    truth: &[u32],
    class_count: usize,
    ignore_index: Option<usize>,
) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(class_count)?;
    cm.accumulate(pred, truth, ignore_index)?;
    Ok(cm)
}

/// Segmentation quality summary derived from a confusion matrix.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Metrics {
    /// Intersection over union per class; None when the class appears in
    /// neither truth nor prediction, which excludes it from the mean.
    pub iou: Vec<Option<f64>>,
    pub miou: f64,
    /// Overall accuracy: diagonal mass over total mass.
    pub oa: f64,
}

/// Mean over the defined entries; None when every class is undefined.
pub fn mean_defined_iou(iou: &[Option<f64>]) -> Option<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for v in iou.iter().flatten() {
        sum += v;
        count += 1;
    }
    if count == 0 {
        None
    } else {
        Some(sum / count as f64)
    }
}

pub fn metrics(cm: &ConfusionMatrix) -> Result<Metrics> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Degenerate("metrics of an empty confusion matrix".into()));
    }
    let c = cm.class_count();
    let mut iou = Vec::with_capacity(c);
    let mut trace = 0u64;
    for k in 0..c {
        let tp = cm.count(k, k);
        trace += tp;
        let fp: u64 = (0..c).filter(|&t| t != k).map(|t| cm.count(t, k)).sum();
        let fneg: u64 = (0..c).filter(|&p| p != k).map(|p| cm.count(k, p)).sum();
        let denom = tp + fp + fneg;
        iou.push(if denom == 0 { None } else { Some(tp as f64 / denom as f64) });
    }
    let miou = mean_defined_iou(&iou)
        .expect("a nonzero total implies at least one defined class");
    Ok(Metrics { iou, miou, oa: trace as f64 / total as f64 })
}

/// Aligned per-class IoU table with the summary rows.
pub fn format_metrics(m: &Metrics, class_names: &[String]) -> String {
    let width = class_names.iter().map(|n| n.len()).chain([5]).max().unwrap();
    let mut out = String::new();
    let _ = writeln!(out, "{:<width$}  {:>8}", "class", "IoU");
    for (name, iou) in class_names.iter().zip(&m.iou) {
        match iou {
            Some(v) => {
                let _ = writeln!(out, "{:<width$}  {:>8.4}", name, v);
            }
            None => {
                let _ = writeln!(out, "{:<width$}  {:>8}", name, "-");
            }
        }
    }
    let _ = writeln!(out, "{:<width$}  {:>8.4}", "mIoU", m.miou);
    let _ = writeln!(out, "{:<width$}  {:>8.4}", "OA", m.oa);
    out
}

/// Aligned confusion-matrix table; rows are truth, columns predictions.
pub fn format_confusion(cm: &ConfusionMatrix, class_names: &[String]) -> String {
    let c = cm.class_count();
    let name = |k: usize| -> String {
        class_names.get(k).cloned().unwrap_or_else(|| format!("class {}", k))
    };
    let name_width = (0..c).map(|k| name(k).len()).chain(["truth \\ pred".len()]).max().unwrap();
    let cell = (0..c)
        .flat_map(|t| (0..c).map(move |p| (t, p)))
        .map(|(t, p)| cm.count(t, p).to_string().len())
        .chain((0..c).map(|k| name(k).len()))
        .max()
        .unwrap()
        .max(5);
    let mut out = String::new();
    let _ = write!(out, "{:<name_width$}", "truth \\ pred");
    for p in 0..c {
        let _ = write!(out, "  {:>cell$}", name(p));
    }
    let _ = writeln!(out);
    for t in 0..c {
        let _ = write!(out, "{:<name_width$}", name(t));
        for p in 0..c {
            let _ = write!(out, "  {:>cell$}", cm.count(t, p));
        }
        let _ = writeln!(out);
    }
    out
}

// ---- optimizer ---------------------------------------------------------------

/// One SGD-with-momentum update over every trainable parameter:
/// buffer <- momentum * buffer + grad; param <- param - lr * buffer.
/// Parameters absent from `grads` see a zero gradient, so their buffers
/// still decay. Any non-finite gradient aborts, naming the parameter.
pub fn sgd_step(
    store: &mut ParamStore,
    grads: &HashMap<String, Vec<f64>>,
    lr: f64,
    momentum: f64,
) -> Result<()> {
    if !lr.is_finite() || lr < 0.0 {
        return Err(Error::Config(format!(
            "learning rate must be finite and non-negative, got {}",
            lr
        )));
    }
    if !momentum.is_finite() || momentum < 0.0 {
        return Err(Error::Config(format!(
            "momentum must be finite and non-negative, got {}",
            momentum
        )));
    }
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        if !store.trainable(id) {
            continue;
        }
        let name = store.name(id).to_string();
        let numel = store.value(id).numel();
        let grad = grads.get(&name);
        if let Some(g) = grad {
            if g.len() != numel {
                return Err(Error::Dim(format!(
                    "gradient for {} has {} scalars, the parameter has {}",
                    name,
                    g.len(),
                    numel
                )));
            }
        }
        let (value, buffer) = store.value_and_momentum_mut(id);
        let data = value.data_mut();
        for j in 0..numel {
            let gj = grad.map_or(0.0, |g| g[j]);
            if !gj.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite gradient {} in parameter {} (coordinate {})",
                    gj, name, j
                )));
            }
            buffer[j] = momentum * buffer[j] + gj;
            data[j] -= lr * buffer[j];
        }
    }
    Ok(())
}

/// Accumulate d(output)/d(parameter) into `into` by parameter name, scaled
/// by `scale`. A parameter bound to several graph leaves sums their
/// adjoints, matching how repeated use contributes to the output.
pub fn gather_gradients(
    g: &Graph,
    binding: &Binding,
    store: &ParamStore,
    scale: f64,
    into: &mut HashMap<String, Vec<f64>>,
) {
    for &(id, leaf) in &binding.pairs {
        if !store.trainable(id) {
            continue;
        }
        let Some(grad) = g.grad(leaf) else { continue };
        let slot = into
            .entry(store.name(id).to_string())
            .or_insert_with(|| vec![0.0; store.value(id).numel()]);
        debug_assert_eq!(slot.len(), grad.len());
        for (s, &gv) in slot.iter_mut().zip(grad) {
            *s += scale * gv;
        }
    }
}

/// Name and l2 norm of the largest-normed gradient, for diagnostics.
fn worst_gradient(grads: &HashMap<String, Vec<f64>>) -> Option<(String, f64)> {
    grads
        .iter()
        .map(|(n, g)| (n.clone(), g.iter().map(|x| x * x).sum::<f64>().sqrt()))
        .max_by(|a, b| a.1.total_cmp(&b.1))
}

// ---- schedule and state --------------------------------------------------------

fn default_epochs() -> usize {
    20
}
fn default_steps_per_epoch() -> usize {
    25
}
fn default_lr0() -> f64 {
    1e-2
}
fn default_decay() -> f64 {
    0.95
}
fn default_momentum() -> f64 {
    0.98
}
fn default_batch_size() -> usize {
    2
}
fn default_every() -> usize {
    1
}
fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSchedule {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_steps_per_epoch")]
    pub steps_per_epoch: usize,
    /// Initial learning rate; epoch e runs at lr0 * decay^e.
    #[serde(default = "default_lr0")]
    pub lr0: f64,
    #[serde(default = "default_decay")]
    pub decay: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Write the rolling checkpoint every this many epochs.
    #[serde(default = "default_every")]
    pub checkpoint_every: usize,
    /// Evaluate and log metrics every this many epochs; 0 disables.
    #[serde(default = "default_every")]
    pub eval_every: usize,
    /// Weight the loss by inverse square-root class frequency.
    #[serde(default = "default_true")]
    pub class_weights: bool,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        serde_json::from_str("{}").expect("every field has a default")
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.steps_per_epoch == 0 {
            problems.push("steps_per_epoch must be at least 1".to_string());
        }
        if self.batch_size == 0 {
            problems.push("batch_size must be at least 1".to_string());
        }
        if !(self.lr0.is_finite() && self.lr0 > 0.0) {
            problems.push(format!("lr0 must be finite and positive, got {}", self.lr0));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            problems.push(format!("decay must lie in (0, 1], got {}", self.decay));
        }
        if !(self.momentum >= 0.0 && self.momentum < 1.0) {
            problems.push(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if self.checkpoint_every == 0 {
            problems.push("checkpoint_every must be at least 1".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    /// Learning rate in effect during the given zero-based epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr0 * self.decay.powi(epoch as i32)
    }
}

/// Progress carried inside checkpoints so runs can resume exactly.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainState {
    /// Optimizer steps taken so far, one per batch.
    pub step: u64,
    /// Next epoch to run.
    pub epoch: usize,
    /// Learning rate at the last completed step.
    pub lr: f64,
    pub best_miou: Option<f64>,
    /// Master seed; the batch stream is derived from it, so a resumed run
    /// keeps it regardless of flags.
    pub seed: u64,
    /// Mean batch loss per completed step.
    pub loss_history: Vec<f64>,
}

/// One line of the JSONL metrics log, written per evaluation.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    /// Mean batch loss at the most recent step.
    pub loss: f64,
    pub iou: Vec<Option<f64>>,
    pub miou: f64,
    pub oa: f64,
}

/// Per-class loss weights proportional to 1/sqrt(frequency), normalized so
/// the positive weights average to one. Absent classes and the ignore
/// index get weight zero.
pub fn inverse_sqrt_class_weights(freq: &[u64], ignore_index: Option<usize>) -> Vec<f64> {
    let mut weights: Vec<f64> = freq
        .iter()
        .enumerate()
        .map(|(c, &f)| {
            if Some(c) == ignore_index || f == 0 {
                0.0
            } else {
                1.0 / (f as f64).sqrt()
            }
        })
        .collect();
    let positive: Vec<f64> = weights.iter().copied().filter(|&w| w > 0.0).collect();
    if !positive.is_empty() {
        let mean = positive.iter().sum::<f64>() / positive.len() as f64;
        for w in &mut weights {
            *w /= mean;
        }
    }
    weights
}

// ---- forward + loss --------------------------------------------------------------

/// Forward pass plus the weighted cross entropy. Returns the live graph so
/// the caller can run the backward pass and harvest gradients.
fn forward_loss(
    net: &PyramidNet,
    store: &mut ParamStore,
    sample: &SphereSample,
    class_weights: Option<Rc<Vec<f64>>>,
    ignore_index: Option<usize>,
    training: bool,
) -> Result<(Graph, Binding, Value)> {
    let labels = sample
        .labels
        .as_ref()
        .ok_or_else(|| Error::Dataset("cannot compute a loss without labels".into()))?;
    let labels: Rc<Vec<usize>> = Rc::new(labels.iter().map(|&l| l as usize).collect());
    let mut g = Graph::new();
    let mut binding = Binding::new();
    let input = g.constant(sample.features.clone());
    let logits = {
        let mut ctx = FwdCtx { graph: &mut g, store, binding: &mut binding, training };
        net.forward(&mut ctx, &sample.levels, input)?
    };
    let loss = g.softmax_cross_entropy(logits, labels, class_weights, ignore_index)?;
    Ok((g, binding, loss))
}

fn state_json(state: &TrainState) -> Result<String> {
    serde_json::to_string(state)
        .map_err(|e| Error::Checkpoint(format!("cannot serialize training state: {}", e)))
}

// ---- training loop ---------------------------------------------------------------

pub struct TrainOutcome {
    pub state: TrainState,
    pub net: PyramidNet,
    pub store: ParamStore,
    pub last_checkpoint: PathBuf,
    /// Present once at least one evaluation has run.
    pub best_checkpoint: Option<PathBuf>,
    pub metrics_log: PathBuf,
}

/// Train a network on the dataset's train split, checkpointing into
/// `out_dir`. With `resume`, the checkpoint's weights, config, optimizer
/// buffers, and batch stream position all continue exactly; otherwise a
/// fresh network is built from `config` and `seed`.
pub fn train(
    config: &NetworkConfig,
    spec: &DatasetSpec,
    schedule: &TrainSchedule,
    out_dir: &Path,
    seed: u64,
    resume: Option<&Path>,
) -> Result<TrainOutcome> {
    schedule.validate()?;
    spec.validate()?;
    let (config, mut store, net, mut state) = match resume {
        None => {
            let mut store = ParamStore::new();
            let net = build_network(config, &mut store)?;
            let state = TrainState {
                step: 0,
                epoch: 0,
                lr: schedule.lr_at(0),
                best_miou: None,
                seed,
                loss_history: Vec::new(),
            };
            (config.clone(), store, net, state)
        }
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            let state: TrainState = serde_json::from_str(&ckpt.state_json)
                .map_err(|e| Error::Checkpoint(format!("bad training state: {}", e)))?;
            (ckpt.config, ckpt.store, ckpt.net, state)
        }
    };
    if config.class_count != spec.class_names.len() {
        return Err(Error::Config(format!(
            "network predicts {} classes but the dataset defines {}",
            config.class_count,
            spec.class_names.len()
        )));
    }
    fs::create_dir_all(out_dir)?;
    let last_path = out_dir.join("last.ckpt");
    let best_path = out_dir.join("best.ckpt");
    let log_path = out_dir.join("metrics.jsonl");
    let mut log = if resume.is_none() {
        fs::File::create(&log_path)?
    } else {
        fs::OpenOptions::new().create(true).append(true).open(&log_path)?
    };

    let mut stream = BatchIterator::new(
        spec,
        &config,
        Mode::Train,
        schedule.batch_size,
        derive_seed(state.seed, "batches"),
    )?;
    // Replay already-consumed batches so a resumed run continues the exact
    // same stream.
    for _ in 0..state.step {
        stream.next_batch()?;
    }

    let weights: Option<Rc<Vec<f64>>> = if schedule.class_weights {
        let freq = class_histogram(stream.clouds(), config.class_count)?;
        Some(Rc::new(inverse_sqrt_class_weights(&freq, spec.ignore_index)))
    } else {
        None
    };

    let mut last_grad_norm: Option<(String, f64)> = None;
    for epoch in state.epoch..schedule.epochs {
        let lr = schedule.lr_at(epoch);
        state.lr = lr;
        for _ in 0..schedule.steps_per_epoch {
            let batch = stream.next_batch()?.expect("the weighted stream is endless");
            let scale = 1.0 / batch.len() as f64;
            let mut grads: HashMap<String, Vec<f64>> = HashMap::new();
            let mut loss_sum = 0.0;
            for sample in &batch {
                let (mut g, binding, loss) =
                    forward_loss(&net, &mut store, sample, weights.clone(), spec.ignore_index, true)?;
                let loss_value = g.array(loss).item();
                if !loss_value.is_finite() {
                    let worst = match &last_grad_norm {
                        Some((name, norm)) => {
                            format!("worst gradient at the previous step: {} (l2 {:.3e})", name, norm)
                        }
                        None => "no earlier gradient recorded".to_string(),
                    };
                    return Err(Error::Numeric(format!(
                        "loss {} at step {} (lr {:.6e}); {}",
                        loss_value,
                        state.step + 1,
                        lr,
                        worst
                    )));
                }
                g.backward(loss)?;
                gather_gradients(&g, &binding, &store, scale, &mut grads);
                loss_sum += loss_value;
            }
            last_grad_norm = worst_gradient(&grads);
            sgd_step(&mut store, &grads, lr, schedule.momentum)?;
            state.step += 1;
            state.loss_history.push(loss_sum * scale);
        }
        state.epoch = epoch + 1;

        if schedule.eval_every > 0 && state.epoch % schedule.eval_every == 0 {
            let split = if spec.files.val.is_empty() { Mode::Train } else { Mode::Val };
            let outcome = evaluate(&net, &mut store, spec, split, schedule.batch_size)?;
            let m = outcome
                .metrics
                .ok_or_else(|| Error::Dataset("the evaluation split has no labels".into()))?;
            let record = MetricsRecord {
                step: state.step,
                loss: *state.loss_history.last().expect("at least one step has run"),
                iou: m.iou.clone(),
                miou: m.miou,
                oa: m.oa,
            };
            let line = serde_json::to_string(&record)
                .map_err(|e| Error::Checkpoint(format!("cannot serialize metrics: {}", e)))?;
            writeln!(log, "{}", line)?;
            if state.best_miou.map_or(true, |b| m.miou > b) {
                state.best_miou = Some(m.miou);
                save_checkpoint(&best_path, &config, &store, &state_json(&state)?)?;
            }
        }
        if state.epoch % schedule.checkpoint_every == 0 {
            save_checkpoint(&last_path, &config, &store, &state_json(&state)?)?;
        }
    }
    // Always leave a checkpoint, even for zero-epoch runs or cadences that
    // skip the final epoch.
    save_checkpoint(&last_path, &config, &store, &state_json(&state)?)?;

    let best = if best_path.exists() { Some(best_path) } else { None };
    Ok(TrainOutcome {
        state,
        net,
        store,
        last_checkpoint: last_path,
        best_checkpoint: best,
        metrics_log: log_path,
    })
}

// ---- evaluation ------------------------------------------------------------------

pub struct EvalOutcome {
    /// Predicted labels for every raw point, one vector per cloud in the
    /// split's file order.
    pub predictions: Vec<Vec<u32>>,
    /// Present when every evaluated cloud carries labels.
    pub confusion: Option<ConfusionMatrix>,
    pub metrics: Option<Metrics>,
}

/// Tile the split deterministically, average logits over the tiles
/// covering each raw point, and score the argmax labels against the
/// source labels when present.
pub fn evaluate(
    net: &PyramidNet,
    store: &mut ParamStore,
    spec: &DatasetSpec,
    split: Mode,
    batch_size: usize,
) -> Result<EvalOutcome> {
    if net.config.class_count != spec.class_names.len() {
        return Err(Error::Config(format!(
            "network predicts {} classes but the dataset defines {}",
            net.config.class_count,
            spec.class_names.len()
        )));
    }
    let c = net.config.class_count;
    let mut it = BatchIterator::new_tiled(spec, &net.config, split, batch_size)?;
    let sizes: Vec<usize> = it.clouds().iter().map(|cl| cl.len()).collect();
    let mut votes: Vec<Vec<f64>> = sizes.iter().map(|&n| vec![0.0; n * c]).collect();
    let mut coverage: Vec<Vec<u32>> = sizes.iter().map(|&n| vec![0u32; n]).collect();
    while let Some(batch) = it.next_batch()? {
        for sample in &batch {
            let mut g = Graph::new();
            let mut binding = Binding::new();
            let input = g.constant(sample.features.clone());
            let logits = {
                let mut ctx =
                    FwdCtx { graph: &mut g, store, binding: &mut binding, training: false };
                net.forward(&mut ctx, &sample.levels, input)?
            };
            let logits = g.array(logits);
            let up =
                nearest_upsample_index(&sample.raw_positions, &sample.levels.levels[0].positions)?;
            let vote = &mut votes[sample.cloud_index];
            let cover = &mut coverage[sample.cloud_index];
            for (ri, &orig) in sample.original_indices.iter().enumerate() {
                let row = up[ri] as usize;
                let o = orig as usize;
                for k in 0..c {
                    vote[o * c + k] += logits.data()[row * c + k];
                }
                cover[o] += 1;
            }
        }
    }
    let mut predictions = Vec::with_capacity(votes.len());
    for (ci, vote) in votes.iter().enumerate() {
        let mut labels = Vec::with_capacity(sizes[ci]);
        for i in 0..sizes[ci] {
            if coverage[ci][i] == 0 {
                return Err(Error::Dataset(format!(
                    "point {} of cloud {} is not covered by any tile",
                    i, ci
                )));
            }
            let inv = 1.0 / coverage[ci][i] as f64;
            // Ties resolve to the smallest class index.
            let mut best = 0usize;
            let mut best_value = f64::NEG_INFINITY;
            for k in 0..c {
                let v = vote[i * c + k] * inv;
                if v > best_value {
                    best_value = v;
                    best = k;
                }
            }
            labels.push(best as u32);
        }
        predictions.push(labels);
    }
    let all_labeled = it.clouds().iter().all(|cl| cl.labels.is_some());
    let (confusion, m) = if all_labeled {
        let mut cm = ConfusionMatrix::new(c)?;
        for (ci, cloud) in it.clouds().iter().enumerate() {
            cm.accumulate(
                &predictions[ci],
                cloud.labels.as_ref().expect("checked above"),
                spec.ignore_index,
            )?;
        }
        let m = metrics(&cm)?;
        (Some(cm), Some(m))
    } else {
        (None, None)
    };
    Ok(EvalOutcome { predictions, confusion, metrics: m })
}

// ---- ablation harness --------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationGrid {
    Attention,
    Hidden,
    Both,
}

impl FromStr for AblationGrid {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attention" => Ok(AblationGrid::Attention),
            "hidden" => Ok(AblationGrid::Hidden),
            "both" => Ok(AblationGrid::Both),
            other => Err(Error::Config(format!("unknown ablation grid {:?}", other))),
        }
    }
}

pub const ATTENTION_GRID: [AttentionMode; 4] = [
    AttentionMode::None,
    AttentionMode::MaxOnly,
    AttentionMode::MeanOnly,
    AttentionMode::MaxMean,
];

pub const HIDDEN_GRID: [usize; 3] = [2, 3, 4];

/// Published row name for each attention variant.
pub fn attention_variant_name(mode: AttentionMode) -> &'static str {
    match mode {
        AttentionMode::None => "No Focused Kernel",
        AttentionMode::MaxOnly => "Max Focused Kernel",
        AttentionMode::MeanOnly => "Mean Focused Kernel",
        AttentionMode::MaxMean => "Max, Mean Focused Kernel",
    }
}

fn attention_tag(mode: AttentionMode) -> &'static str {
    match mode {
        AttentionMode::None => "attn_none",
        AttentionMode::MaxOnly => "attn_max",
        AttentionMode::MeanOnly => "attn_mean",
        AttentionMode::MaxMean => "attn_max_mean",
    }
}

/// The (attention, hidden) combinations a grid spans. Single-axis grids
/// hold the other axis at the base configuration.
pub fn grid_variants(base: &NetworkConfig, grid: AblationGrid) -> Vec<(AttentionMode, usize)> {
    match grid {
        AblationGrid::Attention => {
            ATTENTION_GRID.iter().map(|&a| (a, base.hidden_layers)).collect()
        }
        AblationGrid::Hidden => HIDDEN_GRID.iter().map(|&h| (base.attention, h)).collect(),
        AblationGrid::Both => {
            let mut variants = Vec::with_capacity(ATTENTION_GRID.len() * HIDDEN_GRID.len());
            for &h in &HIDDEN_GRID {
                for &a in &ATTENTION_GRID {
                    variants.push((a, h));
                }
            }
            variants
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub attention: AttentionMode,
    pub hidden_layers: usize,
    pub miou: f64,
    pub oa: f64,
    pub final_loss: f64,
}

/// Train and evaluate one run per grid variant. Every variant runs under
/// the same seed, so the drawn spheres and their pyramids are identical;
/// only the network differs.
pub fn ablate(
    base: &NetworkConfig,
    spec: &DatasetSpec,
    schedule: &TrainSchedule,
    grid: AblationGrid,
    out_dir: &Path,
    seed: u64,
) -> Result<Vec<AblationRow>> {
    fs::create_dir_all(out_dir)?;
    let variants = grid_variants(base, grid);
    let mut rows = Vec::with_capacity(variants.len());
    for (attention, hidden) in variants {
        let mut cfg = base.clone();
        cfg.attention = attention;
        cfg.hidden_layers = hidden;
        let dir = out_dir.join(format!("{}_h{}", attention_tag(attention), hidden));
        let mut outcome = train(&cfg, spec, schedule, &dir, seed, None)?;
        let split = if spec.files.val.is_empty() { Mode::Train } else { Mode::Val };
        let eval = evaluate(&outcome.net, &mut outcome.store, spec, split, schedule.batch_size)?;
        let m = eval
            .metrics
            .ok_or_else(|| Error::Dataset("the ablation split has no labels".into()))?;
        rows.push(AblationRow {
            variant: attention_variant_name(attention).to_string(),
            attention,
            hidden_layers: hidden,
            miou: m.miou,
            oa: m.oa,
            final_loss: *outcome
                .state
                .loss_history
                .last()
                .expect("training ran at least one step"),
        });
    }
    Ok(rows)
}

/// Aligned text table over ablation rows.
pub fn format_ablation_table(rows: &[AblationRow]) -> String {
    let name_width =
        rows.iter().map(|r| r.variant.len()).chain(["variant".len()]).max().unwrap();
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<name_width$}  {:>6}  {:>8}  {:>8}  {:>10}",
        "variant", "hidden", "mIoU", "OA", "final loss"
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{:<name_width$}  {:>6}  {:>8.4}  {:>8.4}  {:>10.4}",
            r.variant, r.hidden_layers, r.miou, r.oa, r.final_loss
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{synth_scene, write_ply, PlyMode, SceneRecipe, SizeRange, SplitFiles};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};
    use tempfile::tempdir;

    // ---- optimizer -------------------------------------------------------

    fn store_with(name: &str, values: &[f64]) -> ParamStore {
        let mut store = ParamStore::new();
        let array = crate::autodiff::Array::from_vec(vec![values.len()], values.to_vec());
        store.register(name, array).unwrap();
        store
    }

    fn values(store: &ParamStore, name: &str) -> Vec<f64> {
        let id = store.lookup(name).unwrap();
        store.value(id).data().to_vec()
    }

    #[test]
    fn sgd_momentum_zero_is_plain_descent() {
        let mut store = store_with("w", &[1.0, -2.0, 0.5]);
        let mut grads = HashMap::new();
        grads.insert("w".to_string(), vec![0.1, -0.2, 0.3]);
        sgd_step(&mut store, &grads, 0.5, 0.0).unwrap();
        let got = values(&store, "w");
        let want = [1.0 - 0.05, -2.0 + 0.1, 0.5 - 0.15];
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() < 1e-15, "{} vs {}", g, w);
        }
    }

    #[test]
    fn sgd_zero_gradients_and_buffers_change_nothing() {
        let mut store = store_with("w", &[1.25, -3.5]);
        let before = values(&store, "w");
        sgd_step(&mut store, &HashMap::new(), 0.1, 0.9).unwrap();
        assert_eq!(values(&store, "w"), before);
    }

    #[test]
    fn sgd_missing_gradient_still_decays_the_buffer() {
        let mut store = store_with("w", &[2.0]);
        let id = store.lookup("w").unwrap();
        store.momentum_mut(id)[0] = 1.0;
        sgd_step(&mut store, &HashMap::new(), 0.5, 0.5).unwrap();
        // buffer 1.0 -> 0.5, param 2.0 - 0.5 * 0.5 = 1.75
        assert!((store.momentum(id)[0] - 0.5).abs() < 1e-15);
        assert!((values(&store, "w")[0] - 1.75).abs() < 1e-15);
    }

    #[test]
    fn sgd_two_steps_match_the_hand_unrolled_recurrence() {
        let (lr, m) = (0.3, 0.7);
        let p0 = [1.0, -0.5];
        let g1 = [0.2, 0.4];
        let g2 = [-0.1, 0.3];
        let mut store = store_with("w", &p0);
        let mut grads = HashMap::new();
        grads.insert("w".to_string(), g1.to_vec());
        sgd_step(&mut store, &grads, lr, m).unwrap();
        grads.insert("w".to_string(), g2.to_vec());
        sgd_step(&mut store, &grads, lr, m).unwrap();
        for j in 0..2 {
            let b1 = g1[j];
            let p1 = p0[j] - lr * b1;
            let b2 = m * b1 + g2[j];
            let p2 = p1 - lr * b2;
            assert_eq!(values(&store, "w")[j], p2);
        }
    }

    #[test]
    fn sgd_with_zero_learning_rate_changes_nothing() {
        let mut store = store_with("w", &[0.1, 0.2, 0.3, -0.4]);
        let before = values(&store, "w");
        let mut grads = HashMap::new();
        grads.insert("w".to_string(), vec![5.0, -2.0, 1.0, 7.0]);
        for _ in 0..3 {
            sgd_step(&mut store, &grads, 0.0, 0.98).unwrap();
        }
        let after = values(&store, "w");
        for (b, a) in before.iter().zip(&after) {
            assert!((b - a).abs() < 1e-12);
            assert_eq!(b.to_bits(), a.to_bits());
        }
    }

    #[test]
    fn sgd_rejects_non_finite_gradients_by_name() {
        let mut store = store_with("enc2.rfkp.mid", &[1.0, 2.0]);
        let mut grads = HashMap::new();
        grads.insert("enc2.rfkp.mid".to_string(), vec![0.1, f64::NAN]);
        let err = sgd_step(&mut store, &grads, 0.1, 0.9).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Numeric(_)), "{}", msg);
        assert!(msg.contains("enc2.rfkp.mid"), "{}", msg);
    }

    #[test]
    fn sgd_rejects_shape_mismatch() {
        let mut store = store_with("w", &[1.0, 2.0]);
        let mut grads = HashMap::new();
        grads.insert("w".to_string(), vec![0.1]);
        assert!(matches!(sgd_step(&mut store, &grads, 0.1, 0.9), Err(Error::Dim(_))));
    }

    // ---- confusion matrix ------------------------------------------------

    #[test]
    fn perfect_predictions_fill_the_diagonal() {
        let truth = [0u32, 1, 2, 1, 0, 2, 2];
        let cm = accumulate_confusion(&truth, &truth, 3, None).unwrap();
        assert_eq!(cm.total(), 7);
        assert_eq!(cm.count(0, 0), 2);
        assert_eq!(cm.count(1, 1), 2);
        assert_eq!(cm.count(2, 2), 3);
        assert_eq!(cm.count(0, 1) + cm.count(1, 0) + cm.count(2, 0), 0);
        let m = metrics(&cm).unwrap();
        assert_eq!(m.oa, 1.0);
        assert_eq!(m.miou, 1.0);
    }

    #[test]
    fn ignored_truth_rows_are_dropped() {
        let truth = [1u32, 1, 1, 0];
        let pred = [0u32, 2, 1, 0];
        let cm = accumulate_confusion(&pred, &truth, 3, Some(1)).unwrap();
        assert_eq!(cm.total(), 1);
        assert_eq!(cm.count(0, 0), 1);
        let all_ignored = accumulate_confusion(&[0, 1], &[2, 2], 3, Some(2)).unwrap();
        assert_eq!(all_ignored.total(), 0);
        assert!(matches!(metrics(&all_ignored), Err(Error::Degenerate(_))));
    }

    #[test]
    fn tallies_match_a_brute_force_count() {
        let mut rng = StdRng::seed_from_u64(9);
        let truth: Vec<u32> = (0..200).map(|_| rng.gen_range(0..4)).collect();
        let pred: Vec<u32> = (0..200).map(|_| rng.gen_range(0..4)).collect();
        let cm = accumulate_confusion(&pred, &truth, 4, Some(3)).unwrap();
        for t in 0..4u32 {
            for p in 0..4u32 {
                let brute = truth
                    .iter()
                    .zip(&pred)
                    .filter(|&(&tt, &pp)| tt == t && pp == p && tt != 3)
                    .count() as u64;
                assert_eq!(cm.count(t as usize, p as usize), brute);
            }
        }
    }

    #[test]
    fn out_of_range_labels_are_rejected() {
        assert!(matches!(
            accumulate_confusion(&[5], &[0], 3, None),
            Err(Error::Label(_))
        ));
        assert!(matches!(
            accumulate_confusion(&[0], &[9], 3, None),
            Err(Error::Label(_))
        ));
        // The same out-of-range truth is fine when it is the ignore index.
        assert!(accumulate_confusion(&[0], &[2], 3, Some(2)).is_ok());
        assert!(matches!(
            accumulate_confusion(&[0, 1], &[0], 3, None),
            Err(Error::Dim(_))
        ));
    }

    // ---- metrics ----------------------------------------------------------

    #[test]
    fn metrics_match_a_hand_computed_table() {
        let mut cm = ConfusionMatrix::new(2).unwrap();
        // truth 0: 3 right, 1 called class 1; truth 1: 2 called class 0, 4 right.
        cm.accumulate(&[0, 0, 0, 1], &[0, 0, 0, 0], None).unwrap();
        cm.accumulate(&[0, 0, 1, 1, 1, 1], &[1, 1, 1, 1, 1, 1], None).unwrap();
        let m = metrics(&cm).unwrap();
        assert_eq!(m.iou[0], Some(3.0 / 6.0));
        assert_eq!(m.iou[1], Some(4.0 / 7.0));
        assert_eq!(m.oa, 7.0 / 10.0);
        assert_eq!(m.miou, (3.0 / 6.0 + 4.0 / 7.0) / 2.0);
    }

    #[test]
    fn absent_classes_are_excluded_from_the_mean() {
        let mut cm = ConfusionMatrix::new(3).unwrap();
        cm.accumulate(&[0, 1, 1], &[0, 1, 0], None).unwrap();
        let m = metrics(&cm).unwrap();
        assert!(m.iou[2].is_none());
        let defined = [m.iou[0].unwrap(), m.iou[1].unwrap()];
        assert_eq!(m.miou, (defined[0] + defined[1]) / 2.0);
        assert_eq!(mean_defined_iou(&[None, None]), None);
    }

    #[test]
    fn published_per_class_rows_average_to_the_reported_means() {
        let round1 = |x: f64| (x * 10.0).round() / 10.0;
        let mean = |v: &[f64]| {
            mean_defined_iou(&v.iter().map(|&x| Some(x)).collect::<Vec<_>>()).unwrap()
        };

        let desk = [97.8, 97.3, 88.4, 47.9, 77.6, 96.7, 67.5, 95.4];
        let m1 = mean(&desk);
        assert!((m1 - 83.575).abs() < 1e-12);
        assert_eq!(round1(m1), 83.6);

        let depth = [95.7, 90.3, 84.4, 50.5, 95.4, 45.9, 72.7, 83.2];
        let m3 = mean(&depth);
        assert!((m3 - 77.2625).abs() < 1e-12);
        assert_eq!(round1(m3), 77.3);

        // The nine-class row is self-inconsistent at one-decimal precision:
        // the per-class values average to 82.84, which rounds to 82.8, yet
        // the published mean is 82.9. Pin the gap so it stays visible.
        let urban = [99.6, 97.1, 74.6, 84.3, 56.0, 65.9, 79.1, 95.1, 93.9];
        let m2 = mean(&urban);
        assert!((m2 - 745.6 / 9.0).abs() < 1e-12);
        assert_eq!(round1(m2), 82.8);
        assert!(((82.9 - round1(m2)) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn oa_is_trace_over_total_and_miou_is_the_mean_of_defined_ious() {
        let mut rng = StdRng::seed_from_u64(31);
        for _ in 0..5 {
            let c = 4usize;
            let mut cm = ConfusionMatrix::new(c).unwrap();
            let truth: Vec<u32> = (0..300).map(|_| rng.gen_range(0..3)).collect();
            let pred: Vec<u32> = (0..300).map(|_| rng.gen_range(0..c as u32)).collect();
            cm.accumulate(&pred, &truth, None).unwrap();
            let m = metrics(&cm).unwrap();
            let trace: u64 = (0..c).map(|k| cm.count(k, k)).sum();
            assert_eq!(m.oa, trace as f64 / cm.total() as f64);
            assert_eq!(m.miou, mean_defined_iou(&m.iou).unwrap());
            for iou in m.iou.iter().flatten() {
                assert!((0.0..=1.0).contains(iou));
            }
        }
    }

    #[test]
    fn report_tables_render_every_class() {
        let mut cm = ConfusionMatrix::new(2).unwrap();
        cm.accumulate(&[0, 1, 1], &[0, 0, 1], None).unwrap();
        let names = vec!["ground".to_string(), "building".to_string()];
        let m = metrics(&cm).unwrap();
        let table = format_metrics(&m, &names);
        assert!(table.contains("ground") && table.contains("building"));
        assert!(table.contains("mIoU") && table.contains("OA"));
        let grid = format_confusion(&cm, &names);
        assert_eq!(grid.lines().count(), 3);
        for line in grid.lines().skip(1) {
            assert_eq!(line.split_whitespace().count(), 3);
        }
    }

    #[test]
    fn class_weights_follow_inverse_square_root_frequency() {
        let w = inverse_sqrt_class_weights(&[4, 1, 0], None);
        assert!((w[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((w[1] - 4.0 / 3.0).abs() < 1e-15);
        assert_eq!(w[2], 0.0);
        let w = inverse_sqrt_class_weights(&[4, 1, 0], Some(0));
        assert_eq!(w, vec![0.0, 1.0, 0.0]);
    }

    // ---- schedule ---------------------------------------------------------

    #[test]
    fn schedule_defaults_are_valid_and_lr_follows_the_closed_form() {
        let s = TrainSchedule::default();
        s.validate().unwrap();
        assert_eq!(s.lr0, 1e-2);
        assert_eq!(s.decay, 0.95);
        assert_eq!(s.momentum, 0.98);
        for e in 0..6 {
            assert_eq!(s.lr_at(e), s.lr0 * s.decay.powi(e as i32));
        }
        assert_eq!(s.lr_at(0), s.lr0);
    }

    #[test]
    fn schedule_rejects_bad_fields() {
        // Zero epochs is a valid no-op run that only writes the initial
        // checkpoint.
        let mut s = TrainSchedule::default();
        s.epochs = 0;
        assert!(s.validate().is_ok());
        let mut s = TrainSchedule::default();
        s.decay = 0.0;
        assert!(s.validate().is_err());
        let mut s = TrainSchedule::default();
        s.momentum = 1.0;
        assert!(s.validate().is_err());
        let mut s = TrainSchedule::default();
        s.lr0 = -1.0;
        assert!(s.validate().is_err());
        assert!(serde_json::from_str::<TrainSchedule>("{\"bogus\": 1}").is_err());
    }

    // ---- ablation grid ------------------------------------------------------

    #[test]
    fn grids_have_the_published_row_names_and_sizes() {
        let base = toy_config(0);
        let attention = grid_variants(&base, AblationGrid::Attention);
        assert_eq!(attention.len(), 4);
        let names: Vec<&str> =
            attention.iter().map(|&(a, _)| attention_variant_name(a)).collect();
        assert_eq!(
            names,
            vec![
                "No Focused Kernel",
                "Max Focused Kernel",
                "Mean Focused Kernel",
                "Max, Mean Focused Kernel",
            ]
        );
        assert!(attention.iter().all(|&(_, h)| h == base.hidden_layers));

        let hidden = grid_variants(&base, AblationGrid::Hidden);
        assert_eq!(hidden.len(), 3);
        assert_eq!(hidden.iter().map(|&(_, h)| h).collect::<Vec<_>>(), vec![2, 3, 4]);
        assert!(hidden.iter().all(|&(a, _)| a == base.attention));

        let both = grid_variants(&base, AblationGrid::Both);
        assert_eq!(both.len(), 12);
        for name in &names {
            let copies =
                both.iter().filter(|&&(a, _)| attention_variant_name(a) == *name).count();
            assert_eq!(copies, 3);
        }
        assert_eq!("both".parse::<AblationGrid>().unwrap(), AblationGrid::Both);
        assert!("full".parse::<AblationGrid>().is_err());
    }

    // ---- end-to-end on a toy dataset ------------------------------------------

    fn toy_config(seed: u64) -> NetworkConfig {
        NetworkConfig {
            levels: 3,
            feature_dims: vec![4, 8, 16],
            pyramid_start: 2,
            class_count: 5,
            hidden_layers: 1,
            attention: AttentionMode::MaxMean,
            kernel_points: 5,
            radius_factor: 2.5,
            influence_factor: 0.5,
            base_cell: 0.25,
            input_sphere_radius: 2.0,
            input_features: vec!["one".into(), "height".into()],
            neighbor_cap: 20,
            seed,
        }
    }

    fn fixed(v: f64) -> SizeRange {
        SizeRange { min: v, max: v }
    }

    fn toy_spec(dir: &Path) -> DatasetSpec {
        let train = synth_scene(&SceneRecipe {
            seed: 77,
            extent: 6.0,
            density: 40.0,
            ground: true,
            boxes: 1,
            box_size: fixed(2.0),
            cylinders: 1,
            cylinder_size: fixed(3.0),
            spheres: 1,
            sphere_size: fixed(1.0),
            wires: 0,
            wire_size: fixed(4.0),
        })
        .unwrap();
        let val = synth_scene(&SceneRecipe {
            seed: 78,
            extent: 4.0,
            density: 40.0,
            ground: true,
            boxes: 1,
            box_size: fixed(2.0),
            cylinders: 0,
            cylinder_size: fixed(3.0),
            spheres: 1,
            sphere_size: fixed(1.0),
            wires: 0,
            wire_size: fixed(4.0),
        })
        .unwrap();
        let train_path = dir.join("train.ply");
        let val_path = dir.join("val.ply");
        write_ply(&train, &train_path, PlyMode::Binary, None).unwrap();
        write_ply(&val, &val_path, PlyMode::Binary, None).unwrap();
        DatasetSpec {
            name: "toy".into(),
            class_names: vec![
                "ground".into(),
                "building".into(),
                "pole".into(),
                "vegetation".into(),
                "wire".into(),
            ],
            ignore_index: None,
            base_cell: 0.25,
            input_sphere_radius: 2.0,
            files: SplitFiles {
                train: vec![train_path],
                val: vec![val_path.clone()],
                test: vec![val_path],
            },
            min_points: 30,
        }
    }

    fn quick_schedule() -> TrainSchedule {
        TrainSchedule {
            epochs: 2,
            steps_per_epoch: 3,
            lr0: 1e-2,
            decay: 0.95,
            momentum: 0.98,
            batch_size: 1,
            checkpoint_every: 1,
            eval_every: 0,
            class_weights: true,
        }
    }

    #[test]
    fn loss_on_a_fixed_batch_decreases_for_most_seeds() {
        let dir = tempdir().unwrap();
        let spec = toy_spec(dir.path());
        let config = toy_config(0);
        let mut it = BatchIterator::new(&spec, &config, Mode::Train, 1, 42).unwrap();
        let sample = it.next_batch().unwrap().unwrap().remove(0);
        let schedule = TrainSchedule::default();

        let mut wins = 0;
        for seed in 0..10u64 {
            let mut cfg = config.clone();
            cfg.seed = derive_seed(seed, "overfit probe");
            let mut store = ParamStore::new();
            let net = build_network(&cfg, &mut store).unwrap();
            let mut losses = Vec::new();
            for _ in 0..10 {
                let (mut g, binding, loss) =
                    forward_loss(&net, &mut store, &sample, None, None, true).unwrap();
                losses.push(g.array(loss).item());
                g.backward(loss).unwrap();
                let mut grads = HashMap::new();
                gather_gradients(&g, &binding, &store, 1.0, &mut grads);
                sgd_step(&mut store, &grads, schedule.lr0, schedule.momentum).unwrap();
            }
            if losses.windows(2).all(|w| w[1] < w[0]) {
                wins += 1;
            }
        }
        assert!(wins >= 8, "loss decreased monotonically for only {}/10 seeds", wins);
    }

    #[test]
    fn training_is_deterministic_and_resume_continues_the_loss_trace() {
        let dir = tempdir().unwrap();
        let spec = toy_spec(dir.path());
        let config = toy_config(5);
        let schedule = quick_schedule();

        let full = train(&config, &spec, &schedule, &dir.path().join("a"), 7, None).unwrap();
        assert_eq!(full.state.loss_history.len(), 6);
        assert!(full.state.loss_history.iter().all(|l| l.is_finite()));

        let rerun = train(&config, &spec, &schedule, &dir.path().join("c"), 7, None).unwrap();
        for (x, y) in full.state.loss_history.iter().zip(&rerun.state.loss_history) {
            assert_eq!(x.to_bits(), y.to_bits());
        }

        let mut half_schedule = schedule.clone();
        half_schedule.epochs = 1;
        let half = train(&config, &spec, &half_schedule, &dir.path().join("b"), 7, None).unwrap();
        assert_eq!(half.state.loss_history.len(), 3);
        let resumed = train(
            &config,
            &spec,
            &schedule,
            &dir.path().join("b"),
            7,
            Some(&half.last_checkpoint),
        )
        .unwrap();
        assert_eq!(resumed.state.loss_history.len(), 6);
        for (i, (x, y)) in
            full.state.loss_history.iter().zip(&resumed.state.loss_history).enumerate()
        {
            assert_eq!(x.to_bits(), y.to_bits(), "loss {} differs: {} vs {}", i, x, y);
        }
        assert_eq!(resumed.state.epoch, 2);
        assert_eq!(resumed.state.step, 6);
    }

    #[test]
    fn evaluation_covers_every_point_and_scores_labeled_clouds() {
        let dir = tempdir().unwrap();
        let spec = toy_spec(dir.path());
        let config = toy_config(11);
        let mut store = ParamStore::new();
        let net = build_network(&config, &mut store).unwrap();
        let out = evaluate(&net, &mut store, &spec, Mode::Val, 2).unwrap();
        assert_eq!(out.predictions.len(), 1);
        let cloud_len = crate::dataset::read_ply(&spec.files.val[0]).unwrap().len();
        assert_eq!(out.predictions[0].len(), cloud_len);
        let m = out.metrics.expect("the toy scene is labeled");
        assert!((0.0..=1.0).contains(&m.oa));
        assert_eq!(out.confusion.unwrap().total() as usize, cloud_len);

        let mut wrong = spec.clone();
        wrong.class_names.pop();
        assert!(matches!(
            evaluate(&net, &mut store, &wrong, Mode::Val, 2),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn a_poisoned_checkpoint_aborts_with_step_and_lr_diagnostics() {
        let dir = tempdir().unwrap();
        let spec = toy_spec(dir.path());
        let config = toy_config(3);
        let mut store = ParamStore::new();
        let _net = build_network(&config, &mut store).unwrap();
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            if store.trainable(id) {
                for v in store.value_mut(id).data_mut() {
                    *v = f64::NAN;
                }
            }
        }
        let state = TrainState {
            step: 0,
            epoch: 0,
            lr: 1e-2,
            best_miou: None,
            seed: 7,
            loss_history: Vec::new(),
        };
        let ckpt_path = dir.path().join("poisoned.ckpt");
        save_checkpoint(&ckpt_path, &config, &store, &serde_json::to_string(&state).unwrap())
            .unwrap();
        let err = match train(
            &config,
            &spec,
            &quick_schedule(),
            &dir.path().join("out"),
            7,
            Some(&ckpt_path),
        ) {
            Ok(_) => panic!("training on NaN weights must fail"),
            Err(e) => e,
        };
        let msg = err.to_string();
        assert!(matches!(err, Error::Numeric(_)), "{}", msg);
        assert!(msg.contains("step 1"), "{}", msg);
        assert!(msg.contains("lr"), "{}", msg);
    }

    #[test]
    fn ablation_variants_draw_identical_spheres() {
        let dir = tempdir().unwrap();
        let spec = toy_spec(dir.path());
        let mut a = toy_config(5);
        a.attention = AttentionMode::None;
        a.hidden_layers = 2;
        let mut b = toy_config(5);
        b.attention = AttentionMode::MaxMean;
        b.hidden_layers = 4;
        let mut it_a = BatchIterator::new(&spec, &a, Mode::Train, 2, 9).unwrap();
        let mut it_b = BatchIterator::new(&spec, &b, Mode::Train, 2, 9).unwrap();
        let batch_a = it_a.next_batch().unwrap().unwrap();
        let batch_b = it_b.next_batch().unwrap().unwrap();
        assert_eq!(batch_a.len(), batch_b.len());
        for (sa, sb) in batch_a.iter().zip(&batch_b) {
            assert_eq!(sa.original_indices, sb.original_indices);
            assert_eq!(sa.levels.levels.len(), sb.levels.levels.len());
            for (la, lb) in sa.levels.levels.iter().zip(&sb.levels.levels) {
                assert_eq!(la.len(), lb.len());
                for (pa, pb) in la.positions.iter().zip(&lb.positions) {
                    for axis in 0..3 {
                        assert_eq!(pa[axis].to_bits(), pb[axis].to_bits());
                    }
                }
            }
        }
    }

    #[test]
    fn ablation_produces_one_labeled_row_per_variant() {
        let dir = tempdir().unwrap();
        let spec = toy_spec(dir.path());
        let config = toy_config(13);
        let schedule = TrainSchedule {
            epochs: 1,
            steps_per_epoch: 1,
            lr0: 1e-2,
            decay: 0.95,
            momentum: 0.98,
            batch_size: 1,
            checkpoint_every: 1,
            eval_every: 0,
            class_weights: true,
        };
        let rows =
            ablate(&config, &spec, &schedule, AblationGrid::Hidden, &dir.path().join("ab"), 3)
                .unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows.iter().map(|r| r.hidden_layers).collect::<Vec<_>>(), vec![2, 3, 4]);
        for row in &rows {
            assert_eq!(row.variant, attention_variant_name(config.attention));
            assert!(row.miou.is_finite() && row.oa.is_finite() && row.final_loss.is_finite());
        }
        let table = format_ablation_table(&rows);
        assert!(table.contains("variant"));
        assert!(table.contains("Max, Mean Focused Kernel"));
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines.len(), 4);
    }
}
