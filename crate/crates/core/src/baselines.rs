//! Reference methods: majority vote, Dawid-Skene EM, the class-level
//! confusion model trained end to end, and the two-stage "aggregate then
//! train a classifier" pipelines built on the first two.

use serde::{Deserialize, Serialize};

use crate::datamodel::CrowdDataset;
use crate::error::{Error, Result};
use crate::lfcx::{self, ClassifierParams, ModelParams};
use crate::numerics::{log_sum_exp, Matrix};
use crate::trainer::{self, ClassifierOutcome, Schedule, TrainConfig, TrainOutcome};

/// Pseudo-count added to every confusion cell in the Dawid-Skene M-step.
pub const DS_SMOOTHING: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AggregatedLabels {
    pub labels: Vec<usize>,
}

/// Per-instance vote counts, N×C.
pub fn vote_counts(data: &CrowdDataset) -> Matrix {
    let mut counts = Matrix::zeros(data.len(), data.num_classes());
    for n in 0..data.len() {
        for (_, y) in data.observed(n) {
            counts[(n, y)] += 1.0;
        }
    }
    counts
}

/// Modal label of each instance; ties go to the lowest class index.
pub fn majority_vote(data: &CrowdDataset) -> Result<AggregatedLabels> {
    data.validate_for_training()?;
    let counts = vote_counts(data);
    Ok(AggregatedLabels {
        labels: counts.iter_rows().map(lfcx::argmax).collect(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct DsEstimate {
    /// N×C posterior over true classes.
    pub posteriors: Matrix,
    /// One C×C row-stochastic matrix per annotator.
    pub confusions: Vec<Matrix>,
    pub class_prior: Vec<f64>,
    pub iterations_run: usize,
    pub converged: bool,
    /// Data log-likelihood after the initial M-step and after every
    /// iteration.
    pub log_likelihood: Vec<f64>,
}

impl DsEstimate {
    pub fn hard_labels(&self) -> AggregatedLabels {
        AggregatedLabels {
            labels: self.posteriors.iter_rows().map(lfcx::argmax).collect(),
        }
    }
}

fn ds_m_step(data: &CrowdDataset, q: &Matrix) -> (Vec<Matrix>, Vec<f64>) {
    let c = data.num_classes();
    let mut counts = vec![Matrix::filled(c, c, DS_SMOOTHING); data.num_annotators()];
    let mut prior = vec![0.0; c];
    for n in 0..data.len() {
        let qn = q.row(n);
        for (p, &w) in prior.iter_mut().zip(qn) {
            *p += w;
        }
        for (r, y) in data.observed(n) {
            for (t, &w) in qn.iter().enumerate() {
                counts[r][(t, y)] += w;
            }
        }
    }
    for m in counts.iter_mut() {
        for t in 0..c {
            let row = m.row_mut(t);
            let total: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= total);
        }
    }
    let n = data.len() as f64;
    prior.iter_mut().for_each(|p| *p /= n);
    (counts, prior)
}

/// Unnormalized log joint `log prior_t + Σ_r log π_r[t, y_r]` for instance `n`.
fn ds_log_joint(data: &CrowdDataset, n: usize, conf: &[Matrix], prior: &[f64], out: &mut [f64]) {
    for (t, o) in out.iter_mut().enumerate() {
        *o = prior[t].ln();
        for (r, y) in data.observed(n) {
            *o += conf[r][(t, y)].ln();
        }
    }
}

fn ds_e_step(data: &CrowdDataset, conf: &[Matrix], prior: &[f64]) -> Result<(Matrix, f64)> {
    let c = data.num_classes();
    let mut q = Matrix::zeros(data.len(), c);
    let mut joint = vec![0.0; c];
    let mut ll = 0.0;
    for n in 0..data.len() {
        ds_log_joint(data, n, conf, prior, &mut joint);
        let norm = log_sum_exp(&joint)?;
        if !norm.is_finite() {
            return Err(Error::NonFinite(format!("Dawid-Skene posterior of instance {n}")));
        }
        ll += norm;
        for (qv, &j) in q.row_mut(n).iter_mut().zip(&joint) {
            *qv = (j - norm).exp();
        }
    }
    Ok((q, ll))
}

/// Dawid-Skene EM initialized from majority-vote soft counts.
///
/// Each iteration runs an E-step on the current parameters followed by an
/// M-step; iteration stops once the largest posterior change falls below
/// `tol` or after `max_iters` iterations.
pub fn dawid_skene(data: &CrowdDataset, max_iters: usize, tol: f64) -> Result<DsEstimate> {
    data.validate_for_training()?;
    let mut q = vote_counts(data);
    for n in 0..q.rows() {
        let row = q.row_mut(n);
        let total: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= total);
    }
    let (mut conf, mut prior) = ds_m_step(data, &q);
    // the E-step's normalizer is the data log-likelihood at the parameters it uses
    let (mut next_q, ll0) = ds_e_step(data, &conf, &prior)?;
    let mut log_likelihood = vec![ll0];
    let mut iterations_run = 0;
    let mut converged = false;

    while iterations_run < max_iters {
        let delta = q
            .data()
            .iter()
            .zip(next_q.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        q = next_q;
        (conf, prior) = ds_m_step(data, &q);
        let (nq, ll) = ds_e_step(data, &conf, &prior)?;
        next_q = nq;
        log_likelihood.push(ll);
        iterations_run += 1;
        if delta < tol {
            converged = true;
            break;
        }
    }

    Ok(DsEstimate {
        posteriors: q,
        confusions: conf,
        class_prior: prior,
        iterations_run,
        converged,
        log_likelihood,
    })
}

/// Negative log-likelihood of the class-level model: the classifier mixed
/// through each annotator's confusion matrix `softmax_rows(Π^(r))`, with no
/// dependence on the instance beyond the classifier.
pub fn confusion_only_nll(
    classifier: &ClassifierParams,
    confusion_logits: &[Matrix],
    data: &CrowdDataset,
) -> Result<f64> {
    let c = classifier.num_classes();
    if confusion_logits.len() != data.num_annotators() {
        return Err(Error::shape(
            "confusion matrices",
            data.num_annotators(),
            confusion_logits.len(),
        ));
    }
    let row_norms: Vec<Vec<f64>> = confusion_logits
        .iter()
        .map(|m| {
            if m.shape() != (c, c) || !m.is_finite() {
                return Err(Error::shape("confusion logits", format!("finite {c}x{c}"), format!("{:?}", m.shape())));
            }
            Ok(m.iter_rows().map(lfcx::lse).collect())
        })
        .collect::<Result<_>>()?;
    let mut joint = vec![0.0; c];
    let mut total = 0.0;
    for n in 0..data.len() {
        if data.observed(n).next().is_none() {
            continue;
        }
        let log_p = classifier.log_probs(data.feature_row(n))?;
        for (r, y) in data.observed(n) {
            for (t, j) in joint.iter_mut().enumerate() {
                *j = log_p[t] + confusion_logits[r][(t, y)] - row_norms[r][t];
            }
            total -= lfcx::lse(&joint);
        }
    }
    if !total.is_finite() {
        return Err(Error::NonFinite("confusion-only negative log-likelihood".into()));
    }
    Ok(total)
}

/// End-to-end training with the impact layers frozen at zero throughout,
/// i.e. classifier plus class-level confusion matrices.
pub fn confusion_only_train(
    data: &CrowdDataset,
    eval: Option<&CrowdDataset>,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate_optimizer()?;
    trainer::run(data, eval, config, Schedule::ConfusionOnly)
}

pub fn one_hot(labels: &[usize], num_classes: usize) -> Result<Matrix> {
    let mut m = Matrix::zeros(labels.len(), num_classes);
    for (n, &y) in labels.iter().enumerate() {
        if y >= num_classes {
            return Err(Error::invalid(
                "labels",
                format!("label {y} at row {n} outside 0..{num_classes}"),
            ));
        }
        m[(n, y)] = 1.0;
    }
    Ok(m)
}

/// Trains the classifier alone on hard labels by cross-entropy.
pub fn train_on_labels(
    features: &Matrix,
    labels: &[usize],
    num_classes: usize,
    eval: Option<(&Matrix, &[usize])>,
    config: &TrainConfig,
) -> Result<ClassifierOutcome> {
    if labels.len() != features.rows() {
        return Err(Error::shape("labels", features.rows(), labels.len()));
    }
    let targets = one_hot(labels, num_classes)?;
    trainer::train_classifier(features, &targets, num_classes, eval, config)
}

/// Knobs for the two-stage pipelines.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AggregationConfig {
    pub ds_max_iters: usize,
    pub ds_tol: f64,
    /// Train on the aggregation's soft distribution (vote shares or DS
    /// posteriors) instead of its argmax.
    pub soft_labels: bool,
}

impl Default for AggregationConfig {
    fn default() -> Self {
        AggregationConfig {
            ds_max_iters: 100,
            ds_tol: 1e-6,
            soft_labels: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PipelineOutcome {
    pub aggregated: AggregatedLabels,
    /// Present for Dawid-Skene runs.
    pub ds: Option<DsEstimate>,
    pub classifier: ClassifierOutcome,
}

impl PipelineOutcome {
    /// The classifier wrapped as a model without annotators, for checkpoints.
    pub fn as_model(&self) -> ModelParams {
        ModelParams {
            classifier: self.classifier.params.clone(),
            annotators: Vec::new(),
        }
    }
}

fn eval_pair(eval: Option<&CrowdDataset>) -> Option<(&Matrix, &[usize])> {
    eval.and_then(|e| e.true_labels().map(|t| (e.features(), t)))
}

/// Majority vote, then a classifier on the voted labels.
pub fn nn_mv(
    data: &CrowdDataset,
    eval: Option<&CrowdDataset>,
    config: &TrainConfig,
    agg: &AggregationConfig,
) -> Result<PipelineOutcome> {
    let aggregated = majority_vote(data)?;
    let targets = if agg.soft_labels {
        let mut counts = vote_counts(data);
        for n in 0..counts.rows() {
            let row = counts.row_mut(n);
            let total: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= total);
        }
        counts
    } else {
        one_hot(&aggregated.labels, data.num_classes())?
    };
    let classifier = trainer::train_classifier(
        data.features(),
        &targets,
        data.num_classes(),
        eval_pair(eval),
        config,
    )?;
    Ok(PipelineOutcome {
        aggregated,
        ds: None,
        classifier,
    })
}

/// Dawid-Skene EM, then a classifier on its (argmax or soft) posteriors.
pub fn nn_ds(
    data: &CrowdDataset,
    eval: Option<&CrowdDataset>,
    config: &TrainConfig,
    agg: &AggregationConfig,
) -> Result<PipelineOutcome> {
    let est = dawid_skene(data, agg.ds_max_iters, agg.ds_tol)?;
    let aggregated = est.hard_labels();
    let targets = if agg.soft_labels {
        est.posteriors.clone()
    } else {
        one_hot(&aggregated.labels, data.num_classes())?
    };
    let classifier = trainer::train_classifier(
        data.features(),
        &targets,
        data.num_classes(),
        eval_pair(eval),
        config,
    )?;
    Ok(PipelineOutcome {
        aggregated,
        ds: Some(est),
        classifier,
    })
}
