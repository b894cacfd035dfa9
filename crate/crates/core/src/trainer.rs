//! Two-stage mini-batch training.
//!
//! Stage 1 keeps every impact layer at zero and fits the classifier together
//! with the confusion logits. Stage 2 unfreezes the impact layers and holds
//! the confusion logits fixed at their stage-1 values. Updates are SGD with
//! momentum, L2 weight decay and a step-decay learning rate.
//!
//! The mini-batch loss is the mean over instances of the per-instance
//! negative log-likelihood (summed over that instance's observed labels).

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datamodel::{fmt_real, CrowdDataset};
use crate::error::{Error, Result};
use crate::evalharness::accuracy;
use crate::lfcx::{self, BlockId, ClassifierParams, Freeze, Gradients, ModelParams};
use crate::numerics::{Matrix, Rng};

/// First line of every checkpoint file.
pub const CHECKPOINT_HEADER: &str = "crowdtrans-ckpt v1";
/// Header of the per-epoch training log CSV.
pub const LOG_HEADER: &str = "epoch,stage,lr,train_nll,test_acc";

// rng streams derived from the run seed
const STREAM_INIT: u64 = 0;
const STREAM_SHUFFLE: u64 = 1;
const STREAM_REINIT: u64 = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs_total: usize,
    /// Epochs spent in stage 1; `None` means half of `epochs_total`.
    pub stage1_epochs: Option<usize>,
    pub batch_size: usize,
    pub lr0: f64,
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Also apply weight decay to confusion logits and impact layers.
    pub decay_annotator_blocks: bool,
    pub epsilon: f64,
    pub seed: u64,
    pub hidden: usize,
    /// Re-draw the classifier weights when stage 2 begins instead of
    /// continuing from the stage-1 classifier.
    pub reinit_classifier_at_stage2: bool,
    /// Run the learning-rate schedule from its start again when stage 2
    /// begins, counting decay epochs from the stage boundary.
    pub restart_schedule_at_stage2: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs_total: 400,
            stage1_epochs: None,
            batch_size: 256,
            lr0: 0.01,
            lr_decay_epochs: vec![100, 200],
            lr_decay_factor: 10.0,
            momentum: 0.9,
            weight_decay: 1e-4,
            decay_annotator_blocks: false,
            epsilon: 0.46,
            seed: 0,
            hidden: 128,
            reinit_classifier_at_stage2: false,
            restart_schedule_at_stage2: false,
        }
    }
}

impl TrainConfig {
    pub fn stage1(&self) -> usize {
        self.stage1_epochs.unwrap_or(self.epochs_total / 2)
    }

    /// `lr0 / factor^(number of decay epochs ≤ epoch)`, epochs counted from 0.
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        let steps = self.lr_decay_epochs.iter().filter(|&&d| epoch >= d).count();
        self.lr0 / self.lr_decay_factor.powi(steps as i32)
    }

    /// Learning rate of `epoch` in a two-stage run.
    pub fn staged_learning_rate(&self, epoch: usize) -> f64 {
        let s1 = self.stage1();
        if self.restart_schedule_at_stage2 && epoch >= s1 {
            self.learning_rate(epoch - s1)
        } else {
            self.learning_rate(epoch)
        }
    }

    /// Checks everything except the stage split.
    pub fn validate_optimizer(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::invalid("lr0", format!("must be > 0, got {}", self.lr0)));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be >= 1"));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor.is_finite()) {
            return Err(Error::invalid("lr_decay_factor", "must be > 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum", "must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::invalid("weight_decay", "must be >= 0"));
        }
        if self.hidden == 0 {
            return Err(Error::invalid("hidden", "must be >= 1"));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_optimizer()?;
        let s1 = self.stage1();
        if !(0 < s1 && s1 < self.epochs_total) {
            return Err(Error::invalid(
                "stage1_epochs",
                format!("need 0 < stage1_epochs ({s1}) < epochs_total ({})", self.epochs_total),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub stage: u8,
    pub learning_rate: f64,
    /// Objective over the full training set divided by the number of
    /// instances, evaluated after the epoch's last update.
    pub train_nll: f64,
    pub test_accuracy: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(LOG_HEADER);
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.epoch,
                r.stage,
                fmt_real(r.learning_rate),
                fmt_real(r.train_nll),
                r.test_accuracy.map(fmt_real).unwrap_or_default()
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    /// Highest test accuracy over all epochs.
    pub fn best_test_accuracy(&self) -> Option<f64> {
        self.records
            .iter()
            .filter_map(|r| r.test_accuracy)
            .fold(None, |acc, a| Some(acc.map_or(a, |b: f64| b.max(a))))
    }

    /// Training objective at the end of the last stage-1 epoch.
    pub fn stage1_final_nll(&self) -> Option<f64> {
        self.records.iter().rev().find(|r| r.stage == 1).map(|r| r.train_nll)
    }
}

/// Which blocks a single SGD step may touch.
#[derive(Clone, Debug, PartialEq)]
pub struct UpdateMask {
    pub classifier: bool,
    pub confusion: Vec<bool>,
    pub impact: Vec<bool>,
    /// Whether weight decay reaches confusion and impact blocks.
    pub decay_annotators: bool,
}

impl UpdateMask {
    pub fn all(annotators: usize) -> Self {
        UpdateMask {
            classifier: true,
            confusion: vec![true; annotators],
            impact: vec![true; annotators],
            decay_annotators: false,
        }
    }

    pub fn trains(&self, id: BlockId) -> bool {
        match id {
            BlockId::Confusion(r) => self.confusion[r],
            BlockId::Impact(r) => self.impact[r],
            _ => self.classifier,
        }
    }
}

/// One momentum step:
/// `velocity ← momentum·velocity + grad + weight_decay·param`,
/// `param ← param − lr·velocity`.
///
/// Masked blocks, and their velocity, are left untouched. Nothing is written
/// if any updated value would be non-finite.
pub fn sgd_step(
    params: &mut ModelParams,
    grads: &Gradients,
    velocity: &mut Gradients,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    mask: &UpdateMask,
) -> Result<()> {
    if params.dims() != grads.dims() || params.dims() != velocity.dims() {
        return Err(Error::shape(
            "sgd_step",
            format!("{:?}", params.dims()),
            format!("grads {:?}, velocity {:?}", grads.dims(), velocity.dims()),
        ));
    }
    let mut new_params = params.clone();
    let mut new_velocity = velocity.clone();
    let grad_blocks = grads.blocks();
    for ((id, p), ((_, v), g)) in new_params
        .blocks_mut()
        .into_iter()
        .zip(new_velocity.blocks_mut().into_iter().zip(&grad_blocks))
    {
        if !mask.trains(id) {
            continue;
        }
        let wd = if id.is_classifier() || mask.decay_annotators {
            weight_decay
        } else {
            0.0
        };
        for ((pv, vv), &gv) in p.iter_mut().zip(v.iter_mut()).zip(g.values) {
            *vv = momentum * *vv + (gv + wd * *pv);
            *pv -= lr * *vv;
        }
        if p.iter().any(|x| !x.is_finite()) || v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("update of {id}")));
        }
    }
    *params = new_params;
    *velocity = new_velocity;
    Ok(())
}

fn scale(grads: &mut Gradients, factor: f64) {
    for (_, values) in grads.blocks_mut() {
        values.iter_mut().for_each(|v| *v *= factor);
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters after the final epoch.
    pub params: ModelParams,
    /// Parameters at the best epoch: highest test accuracy when test labels
    /// are available, otherwise lowest training objective.
    pub best_params: ModelParams,
    pub best_epoch: usize,
    /// Parameters at the end of stage 1, when a stage 2 followed.
    pub stage1_params: Option<ModelParams>,
    pub log: TrainLog,
}

/// How epochs are assigned to stages.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Schedule {
    /// Stage 1 for epochs `< stage1`, stage 2 after.
    TwoStage { stage1: usize },
    /// Impact layers frozen for the whole run.
    ConfusionOnly,
}

/// Trains the full model with the two-stage schedule. `eval`, when it has
/// true labels, is scored after every epoch.
pub fn train(
    data: &CrowdDataset,
    eval: Option<&CrowdDataset>,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    run(data, eval, config, Schedule::TwoStage { stage1: config.stage1() })
}

fn test_accuracy(cl: &ClassifierParams, eval: Option<&CrowdDataset>) -> Result<Option<f64>> {
    match eval.and_then(|e| e.true_labels().map(|t| (e, t))) {
        Some((e, truth)) => Ok(Some(accuracy(&cl.predict_all(e.features())?, truth)?)),
        None => Ok(None),
    }
}

/// Tracks the best epoch by test accuracy (ties keep the earliest) or by
/// training objective.
struct BestTracker {
    params: ModelParams,
    epoch: usize,
    score: f64,
}

impl BestTracker {
    fn offer(&mut self, record: &EpochRecord, params: &ModelParams) {
        let score = record.test_accuracy.unwrap_or(-record.train_nll);
        if record.epoch == 0 || score > self.score {
            self.params = params.clone();
            self.epoch = record.epoch;
            self.score = score;
        }
    }
}

pub(crate) fn run(
    data: &CrowdDataset,
    eval: Option<&CrowdDataset>,
    config: &TrainConfig,
    schedule: Schedule,
) -> Result<TrainOutcome> {
    data.validate_for_training()?;
    let mut init_rng = Rng::with_stream(config.seed, STREAM_INIT);
    let mut shuffle_rng = Rng::with_stream(config.seed, STREAM_SHUFFLE);
    let mut params = lfcx::init_params(
        data.num_classes(),
        data.num_features(),
        config.hidden,
        data.num_annotators(),
        config.epsilon,
        &mut init_rng,
    )?;
    let mut velocity = params.zeros_like();
    let n = data.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut log = TrainLog::default();
    let mut best = BestTracker {
        params: params.clone(),
        epoch: 0,
        score: f64::NEG_INFINITY,
    };
    let mut stage1_params = None;

    for epoch in 0..config.epochs_total {
        let stage = match schedule {
            Schedule::TwoStage { stage1 } if epoch >= stage1 => 2,
            _ => 1,
        };
        if stage == 2 && stage1_params.is_none() {
            stage1_params = Some(params.clone());
            if config.reinit_classifier_at_stage2 {
                let mut rng = Rng::with_stream(config.seed, STREAM_REINIT);
                params.classifier = ClassifierParams::init(
                    data.num_classes(),
                    data.num_features(),
                    config.hidden,
                    &mut rng,
                )?;
                velocity.classifier = params.zeros_like().classifier;
            }
        }
        let freeze = Freeze {
            impact: stage == 1,
            confusion: stage == 2,
        };
        let lr = match schedule {
            Schedule::TwoStage { .. } => config.staged_learning_rate(epoch),
            Schedule::ConfusionOnly => config.learning_rate(epoch),
        };
        let diverged = |reason: String, last_good: &ModelParams| Error::Diverged {
            epoch,
            reason,
            last_good: Box::new(last_good.clone()),
        };
        let epoch_start = params.clone();

        shuffle_rng.shuffle(&mut order);
        for batch in order.chunks(config.batch_size) {
            let (_, mut grads) = lfcx::gradients(&params, data, batch, freeze)
                .map_err(|e| diverged(e.to_string(), &epoch_start))?;
            scale(&mut grads, 1.0 / batch.len() as f64);
            let mut mask = UpdateMask::all(data.num_annotators());
            mask.decay_annotators = config.decay_annotator_blocks;
            let mut present = vec![false; data.num_annotators()];
            for &i in batch {
                for (r, _) in data.observed(i) {
                    present[r] = true;
                }
            }
            for (r, &seen) in present.iter().enumerate() {
                mask.confusion[r] = seen && !freeze.confusion;
                mask.impact[r] = seen && !freeze.impact;
            }
            sgd_step(
                &mut params,
                &grads,
                &mut velocity,
                lr,
                config.momentum,
                config.weight_decay,
                &mask,
            )
            .map_err(|e| diverged(e.to_string(), &epoch_start))?;
        }

        let train_nll = match lfcx::nll(&params, data) {
            Ok(v) => v / n as f64,
            Err(e) => return Err(diverged(e.to_string(), &epoch_start)),
        };
        let record = EpochRecord {
            epoch,
            stage,
            learning_rate: lr,
            train_nll,
            test_accuracy: test_accuracy(&params.classifier, eval)?,
        };
        best.offer(&record, &params);
        log.records.push(record);
    }

    Ok(TrainOutcome {
        best_params: best.params,
        best_epoch: best.epoch,
        params,
        stage1_params,
        log,
    })
}

#[derive(Clone, Debug)]
pub struct ClassifierOutcome {
    pub params: ClassifierParams,
    pub best_params: ClassifierParams,
    pub best_epoch: usize,
    pub log: TrainLog,
}

/// Trains the classifier alone by cross-entropy against per-instance target
/// distributions (rows of `targets`), with the same optimizer and schedule as
/// [`train`]. All epochs are logged as stage 1.
pub fn train_classifier(
    features: &Matrix,
    targets: &Matrix,
    num_classes: usize,
    eval: Option<(&Matrix, &[usize])>,
    config: &TrainConfig,
) -> Result<ClassifierOutcome> {
    config.validate_optimizer()?;
    if features.rows() == 0 {
        return Err(Error::Dataset("no training instances".into()));
    }
    let mut init_rng = Rng::with_stream(config.seed, STREAM_INIT);
    let mut shuffle_rng = Rng::with_stream(config.seed, STREAM_SHUFFLE);
    let classifier =
        ClassifierParams::init(num_classes, features.cols(), config.hidden, &mut init_rng)?;
    let mut params = ModelParams {
        classifier,
        annotators: Vec::new(),
    };
    let mut velocity = params.zeros_like();
    let mask = UpdateMask::all(0);
    let n = features.rows();
    let mut order: Vec<usize> = (0..n).collect();
    let mut log = TrainLog::default();
    let mut best = BestTracker {
        params: params.clone(),
        epoch: 0,
        score: f64::NEG_INFINITY,
    };

    for epoch in 0..config.epochs_total {
        let lr = config.learning_rate(epoch);
        let epoch_start = params.clone();
        let diverged = |reason: String| Error::Diverged {
            epoch,
            reason,
            last_good: Box::new(epoch_start.clone()),
        };
        shuffle_rng.shuffle(&mut order);
        for batch in order.chunks(config.batch_size) {
            let (_, g) = lfcx::cross_entropy_gradients(&params.classifier, features, targets, batch)
                .map_err(|e| diverged(e.to_string()))?;
            let mut grads = ModelParams {
                classifier: g,
                annotators: Vec::new(),
            };
            scale(&mut grads, 1.0 / batch.len() as f64);
            sgd_step(
                &mut params,
                &grads,
                &mut velocity,
                lr,
                config.momentum,
                config.weight_decay,
                &mask,
            )
            .map_err(|e| diverged(e.to_string()))?;
        }
        let loss = lfcx::cross_entropy(&params.classifier, features, targets)
            .map_err(|e| diverged(e.to_string()))?;
        let test_accuracy = match eval {
            Some((x, truth)) => Some(accuracy(&params.classifier.predict_all(x)?, truth)?),
            None => None,
        };
        let record = EpochRecord {
            epoch,
            stage: 1,
            learning_rate: lr,
            train_nll: loss / n as f64,
            test_accuracy,
        };
        best.offer(&record, &params);
        log.records.push(record);
    }

    Ok(ClassifierOutcome {
        params: params.classifier,
        best_params: best.params.classifier,
        best_epoch: best.epoch,
        log,
    })
}

/// Writes parameters as versioned text with 17 significant digits per value.
pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    let d = params.dims();
    let mut out = String::new();
    out.push_str(CHECKPOINT_HEADER);
    out.push('\n');
    out.push_str(&format!(
        "dims classes={} features={} hidden={} annotators={}\n",
        d.classes, d.features, d.hidden, d.annotators
    ));
    for b in params.blocks() {
        out.push_str(&format!("block {} {} {}\n", b.id, b.rows, b.cols));
        for row in b.values.chunks(b.cols.max(1)) {
            let cells: Vec<String> = row.iter().map(|&v| fmt_real(v)).collect();
            out.push_str(&cells.join(" "));
            out.push('\n');
        }
    }
    out.push_str("end\n");
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let fail = |line: usize, msg: String| Error::Checkpoint {
        path: path.to_path_buf(),
        message: format!("line {line}: {msg}"),
    };
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let mut next = |what: &str| {
        lines
            .next()
            .ok_or_else(|| fail(0, format!("truncated file, expected {what}")))
    };

    let (ln, header) = next("header")?;
    if header != CHECKPOINT_HEADER {
        return Err(fail(ln, format!("expected `{CHECKPOINT_HEADER}`, found `{header}`")));
    }
    let (ln, dims_line) = next("dims line")?;
    let mut dims = [None; 4];
    let keys = ["classes", "features", "hidden", "annotators"];
    let fields = dims_line
        .strip_prefix("dims ")
        .ok_or_else(|| fail(ln, "expected `dims ...`".into()))?;
    for kv in fields.split_whitespace() {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| fail(ln, format!("bad dims field `{kv}`")))?;
        let slot = keys
            .iter()
            .position(|&key| key == k)
            .ok_or_else(|| fail(ln, format!("unknown dims field `{k}`")))?;
        dims[slot] = Some(v.parse::<usize>().map_err(|_| fail(ln, format!("bad value `{v}`")))?);
    }
    let [Some(classes), Some(features), Some(hidden), Some(annotators)] = dims else {
        return Err(fail(ln, "incomplete dims line".into()));
    };
    if classes < 2 || features == 0 || hidden == 0 {
        return Err(fail(ln, "dims out of range".into()));
    }

    let mut params = ModelParams {
        classifier: ClassifierParams::zeros(classes, features, hidden),
        annotators: Vec::new(),
    };
    params.annotators = (0..annotators)
        .map(|_| lfcx::AnnotatorParams::new(Matrix::zeros(classes, classes), hidden))
        .collect();
    let shapes: Vec<(BlockId, usize, usize)> =
        params.blocks().iter().map(|b| (b.id, b.rows, b.cols)).collect();

    for ((id, values), (_, rows, cols)) in params.blocks_mut().into_iter().zip(shapes) {
        let (ln, head) = next("block header")?;
        let expected = format!("block {id} {rows} {cols}");
        if head != expected {
            return Err(fail(ln, format!("expected `{expected}`, found `{head}`")));
        }
        for row in values.chunks_mut(cols.max(1)) {
            let (ln, line) = next("block row")?;
            let cells: Vec<&str> = line.split_whitespace().collect();
            if cells.len() != row.len() {
                return Err(fail(ln, format!("expected {} values, found {}", row.len(), cells.len())));
            }
            for (slot, cell) in row.iter_mut().zip(cells) {
                *slot = cell
                    .parse()
                    .map_err(|_| fail(ln, format!("cannot parse `{cell}`")))?;
            }
        }
    }
    let (ln, end) = next("`end`")?;
    if end != "end" {
        return Err(fail(ln, format!("expected `end`, found `{end}`")));
    }
    params
        .validate()
        .map_err(|e| fail(ln, format!("invalid parameters: {e}")))?;
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::MISSING;
    use crate::lfcx::init_params;
    use tempfile::tempdir;

    fn scalar_model(theta: f64) -> ModelParams {
        let mut p = ModelParams {
            classifier: ClassifierParams::zeros(2, 1, 1),
            annotators: vec![],
        };
        p.classifier.hidden_weights[(0, 0)] = theta;
        p
    }

    #[test]
    fn sgd_plain_step() {
        let mut p = scalar_model(1.0);
        let mut g = p.zeros_like();
        g.classifier.hidden_weights[(0, 0)] = 1.0;
        let mut v = p.zeros_like();
        sgd_step(&mut p, &g, &mut v, 0.1, 0.0, 0.0, &UpdateMask::all(0)).unwrap();
        assert!((p.classifier.hidden_weights[(0, 0)] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn sgd_zero_grad_is_noop() {
        let mut rng = Rng::new(1);
        let mut p = init_params(3, 2, 4, 2, 0.5, &mut rng).unwrap();
        let before = p.clone();
        let g = p.zeros_like();
        let mut v = p.zeros_like();
        sgd_step(&mut p, &g, &mut v, 0.1, 0.9, 0.0, &UpdateMask::all(2)).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn sgd_momentum_and_decay() {
        let mut p = scalar_model(2.0);
        let mut g = p.zeros_like();
        g.classifier.hidden_weights[(0, 0)] = 0.5;
        let mut v = p.zeros_like();
        v.classifier.hidden_weights[(0, 0)] = 1.0;
        sgd_step(&mut p, &g, &mut v, 0.1, 0.9, 0.01, &UpdateMask::all(0)).unwrap();
        let vel = 0.9 * 1.0 + 0.5 + 0.01 * 2.0;
        assert!((v.classifier.hidden_weights[(0, 0)] - vel).abs() < 1e-15);
        assert!((p.classifier.hidden_weights[(0, 0)] - (2.0 - 0.1 * vel)).abs() < 1e-15);
    }

    #[test]
    fn sgd_masked_blocks_untouched() {
        let mut rng = Rng::new(2);
        let mut p = init_params(3, 2, 4, 2, 0.5, &mut rng).unwrap();
        let mut g = p.zeros_like();
        for (_, values) in g.blocks_mut() {
            values.iter_mut().for_each(|v| *v = 0.3);
        }
        let mut v = p.zeros_like();
        let before = p.clone();
        let mut mask = UpdateMask::all(2);
        mask.impact = vec![false, false];
        mask.confusion[1] = false;
        sgd_step(&mut p, &g, &mut v, 0.1, 0.9, 1e-4, &mask).unwrap();
        for a in 0..2 {
            assert_eq!(p.annotators[a].impact_weights, before.annotators[a].impact_weights);
            assert!(v.annotators[a].impact_weights.data().iter().all(|&x| x == 0.0));
        }
        assert_eq!(p.annotators[1].confusion_logits, before.annotators[1].confusion_logits);
        assert_ne!(p.annotators[0].confusion_logits, before.annotators[0].confusion_logits);
    }

    #[test]
    fn sgd_rejects_non_finite_without_writing() {
        let mut p = scalar_model(1.0);
        let mut g = p.zeros_like();
        g.classifier.hidden_weights[(0, 0)] = f64::INFINITY;
        let mut v = p.zeros_like();
        let before = p.clone();
        let err = sgd_step(&mut p, &g, &mut v, 0.1, 0.0, 0.0, &UpdateMask::all(0)).unwrap_err();
        assert!(err.to_string().contains("classifier.hidden_weights"));
        assert_eq!(p, before);
    }

    #[test]
    fn learning_rate_schedule() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.learning_rate(0), 0.01);
        assert_eq!(cfg.learning_rate(99), 0.01);
        assert_eq!(cfg.learning_rate(100), 0.01 / 10.0);
        assert_eq!(cfg.learning_rate(199), 0.01 / 10.0);
        assert_eq!(cfg.learning_rate(200), 0.01 / 100.0);
        assert_eq!(cfg.stage1(), 200);
        assert_eq!(cfg.staged_learning_rate(250), cfg.learning_rate(250));
        let restart = TrainConfig {
            restart_schedule_at_stage2: true,
            ..cfg
        };
        assert_eq!(restart.staged_learning_rate(199), 0.01 / 10.0);
        assert_eq!(restart.staged_learning_rate(200), 0.01);
        assert_eq!(restart.staged_learning_rate(300), 0.01 / 10.0);
    }

    #[test]
    fn config_validation() {
        let mut cfg = TrainConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.stage1_epochs = Some(400);
        assert!(cfg.validate().is_err());
        cfg.stage1_epochs = Some(0);
        assert!(cfg.validate().is_err());
        let cfg = TrainConfig {
            lr0: 0.0,
            ..TrainConfig::default()
        };
        match cfg.validate() {
            Err(Error::InvalidArgument { name, .. }) => assert_eq!(name, "lr0"),
            other => panic!("{other:?}"),
        }
        let cfg = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    fn toy_dataset() -> CrowdDataset {
        let mut rng = Rng::new(12);
        let n = 40;
        let mut feats = Vec::new();
        let mut ann = Vec::new();
        for i in 0..n {
            let c = i % 2;
            feats.push(rng.normal() + if c == 0 { -2.0 } else { 2.0 });
            feats.push(rng.normal());
            ann.push(c as i32);
            ann.push(if i % 3 == 0 { MISSING } else { (1 - c) as i32 });
            ann.push(if i % 5 == 0 { MISSING } else { c as i32 });
        }
        CrowdDataset::new(Matrix::new(n, 2, feats).unwrap(), ann, 3, 2, None).unwrap()
    }

    fn small_config() -> TrainConfig {
        TrainConfig {
            epochs_total: 12,
            stage1_epochs: Some(6),
            batch_size: 7,
            lr0: 0.05,
            lr_decay_epochs: vec![4, 9],
            hidden: 6,
            seed: 3,
            epsilon: 0.7,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn train_is_deterministic_and_respects_stages() {
        let data = toy_dataset();
        let cfg = small_config();
        let a = train(&data, None, &cfg).unwrap();
        let b = train(&data, None, &cfg).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.params, b.params);

        let s1 = a.stage1_params.as_ref().unwrap();
        for ann in &s1.annotators {
            assert!(ann.impact_weights.data().iter().all(|&v| v == 0.0));
        }
        for (fin, mid) in a.params.annotators.iter().zip(&s1.annotators) {
            assert_eq!(fin.confusion_logits, mid.confusion_logits);
        }
        assert!(a
            .params
            .annotators
            .iter()
            .any(|ann| ann.impact_weights.data().iter().any(|&v| v != 0.0)));

        for (i, rec) in a.log.records.iter().enumerate() {
            assert_eq!(rec.epoch, i);
            assert_eq!(rec.stage, if i < 6 { 1 } else { 2 });
            assert_eq!(rec.learning_rate, cfg.learning_rate(i));
        }
    }

    #[test]
    fn reinit_flag_changes_stage2_start() {
        let data = toy_dataset();
        let warm = train(&data, None, &small_config()).unwrap();
        let cold = train(
            &data,
            None,
            &TrainConfig {
                reinit_classifier_at_stage2: true,
                ..small_config()
            },
        )
        .unwrap();
        assert_eq!(warm.log.records[..6], cold.log.records[..6]);
        assert_ne!(warm.log.records[6], cold.log.records[6]);
    }

    #[test]
    fn best_by_training_objective_without_labels() {
        let data = toy_dataset();
        let out = train(&data, None, &small_config()).unwrap();
        let min = out
            .log
            .records
            .iter()
            .map(|r| r.train_nll)
            .fold(f64::INFINITY, f64::min);
        assert_eq!(out.log.records[out.best_epoch].train_nll, min);
    }

    #[test]
    fn log_csv_format() {
        let log = TrainLog {
            records: vec![
                EpochRecord {
                    epoch: 0,
                    stage: 1,
                    learning_rate: 0.01,
                    train_nll: 1.5,
                    test_accuracy: Some(0.75),
                },
                EpochRecord {
                    epoch: 1,
                    stage: 2,
                    learning_rate: 0.001,
                    train_nll: 1.25,
                    test_accuracy: None,
                },
            ],
        };
        let csv = log.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], LOG_HEADER);
        assert_eq!(
            lines[1],
            "0,1,1.0000000000000000e-2,1.5000000000000000e0,7.5000000000000000e-1"
        );
        assert!(lines[2].ends_with(','));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut rng = Rng::new(6);
        let mut p = init_params(8, 3, 5, 2, 0.46, &mut rng).unwrap();
        p.annotators[1].impact_weights[(7, 2)] = -1.0 / 3.0;
        save_checkpoint(&p, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, p);
        assert_eq!(back.annotators[0].confusion_logits[(2, 2)], 0.46f64.ln());
        assert!((back.annotators[0].confusion_logits[(2, 2)] + 0.77653).abs() < 1e-5);
    }

    #[test]
    fn checkpoint_rejects_damage() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let p = init_params(3, 2, 2, 1, 0.5, &mut Rng::new(0)).unwrap();
        save_checkpoint(&p, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();

        let truncated = dir.path().join("t.ckpt");
        fs::write(&truncated, &text[..text.len() / 2]).unwrap();
        assert!(matches!(load_checkpoint(&truncated), Err(Error::Checkpoint { .. })));

        let wrong_version = dir.path().join("v.ckpt");
        fs::write(&wrong_version, text.replace("v1", "v9")).unwrap();
        let err = load_checkpoint(&wrong_version).unwrap_err();
        assert!(err.to_string().contains("crowdtrans-ckpt v1"));

        let garbage = dir.path().join("g.ckpt");
        fs::write(&garbage, text.replacen("e-1", "e-1x", 1)).unwrap();
        assert!(matches!(load_checkpoint(&garbage), Err(Error::Checkpoint { .. })));
    }

    #[test]
    fn classifier_training_zero_epochs_returns_init() {
        let features = Matrix::new(4, 1, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let targets = Matrix::from_rows(&[
            vec![1.0, 0.0],
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![0.0, 1.0],
        ])
        .unwrap();
        let cfg = TrainConfig {
            epochs_total: 0,
            hidden: 3,
            ..TrainConfig::default()
        };
        let out = train_classifier(&features, &targets, 2, None, &cfg).unwrap();
        let init =
            ClassifierParams::init(2, 1, 3, &mut Rng::with_stream(cfg.seed, STREAM_INIT)).unwrap();
        assert_eq!(out.params, init);
        assert!(out.log.records.is_empty());
    }
}
