//! Metrics, multi-seed method comparisons and their CSV/text reports.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{self, AggregationConfig};
use crate::datamodel::{self, fmt_real, CrowdDataset};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};
use crate::simgen::{self, GenConfig};
use crate::trainer::{self, TrainConfig, TrainLog};

const STREAM_SPLIT: u64 = 20;

pub const RESULTS_HEADER: &str = "method,seed,best_acc,last_acc,recovery_error,wall_time_s";
pub const SUMMARY_HEADER: &str =
    "method,runs,mean_best_acc,std_best_acc,mean_last_acc,std_last_acc,mean_recovery_error";

/// Fraction of positions where `predictions` equals `truth`.
pub fn accuracy(predictions: &[usize], truth: &[usize]) -> Result<f64> {
    if predictions.len() != truth.len() {
        return Err(Error::shape("predictions", truth.len(), predictions.len()));
    }
    if truth.is_empty() {
        return Err(Error::invalid("truth", "empty"));
    }
    let hits = predictions.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / truth.len() as f64)
}

/// Mean over annotators and rows of the L1 distance between matching rows.
pub fn recovery_error(learned: &[Matrix], reference: &[Matrix]) -> Result<f64> {
    if learned.len() != reference.len() {
        return Err(Error::shape("confusion list", reference.len(), learned.len()));
    }
    if learned.is_empty() {
        return Err(Error::invalid("confusions", "empty"));
    }
    let mut total = 0.0;
    let mut rows = 0usize;
    for (a, b) in learned.iter().zip(reference) {
        if a.shape() != b.shape() {
            return Err(Error::shape("confusion matrix", format!("{:?}", b.shape()), format!("{:?}", a.shape())));
        }
        for (ra, rb) in a.iter_rows().zip(b.iter_rows()) {
            total += ra.iter().zip(rb).map(|(x, y)| (x - y).abs()).sum::<f64>();
            rows += 1;
        }
    }
    Ok(total / rows as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Classifier trained on the true labels, as an upper reference.
    Truth,
    Lfcx,
    /// Impact layers frozen at zero: class-level confusions only.
    Crowdlayer,
    Mv,
    Ds,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Truth, Method::Lfcx, Method::Crowdlayer, Method::Mv, Method::Ds];

    pub fn name(self) -> &'static str {
        match self {
            Method::Truth => "truth",
            Method::Lfcx => "lfcx",
            Method::Crowdlayer => "crowdlayer",
            Method::Mv => "mv",
            Method::Ds => "ds",
        }
    }

    pub fn valid_names() -> String {
        Method::ALL.map(Method::name).join(", ")
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| {
                Error::invalid("method", format!("unknown method `{s}` (valid: {})", Method::valid_names()))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunResult {
    pub method: Method,
    pub seed: u64,
    /// Highest test accuracy over all epochs.
    pub best_accuracy: f64,
    pub last_accuracy: f64,
    /// Against the generator's confusions; absent for methods without
    /// annotator models and for file datasets.
    pub recovery_error: Option<f64>,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunFailure {
    pub method: Method,
    pub seed: u64,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SummaryRow {
    pub method: Method,
    pub runs: usize,
    pub mean_best: f64,
    pub std_best: f64,
    pub mean_last: f64,
    pub std_last: f64,
    pub mean_recovery: Option<f64>,
}

/// Sample mean and standard deviation; the deviation is 0 below two values.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ComparisonTable {
    /// Sorted by method, then seed.
    pub results: Vec<RunResult>,
    pub failures: Vec<RunFailure>,
    pub summary: Vec<SummaryRow>,
}

impl ComparisonTable {
    pub fn from_results(mut results: Vec<RunResult>, mut failures: Vec<RunFailure>) -> Self {
        results.sort_by_key(|r| (r.method, r.seed));
        failures.sort_by_key(|f| (f.method, f.seed));
        let mut summary = Vec::new();
        for chunk in results.chunk_by(|a, b| a.method == b.method) {
            let best: Vec<f64> = chunk.iter().map(|r| r.best_accuracy).collect();
            let last: Vec<f64> = chunk.iter().map(|r| r.last_accuracy).collect();
            let rec: Vec<f64> = chunk.iter().filter_map(|r| r.recovery_error).collect();
            let (mean_best, std_best) = mean_std(&best);
            let (mean_last, std_last) = mean_std(&last);
            summary.push(SummaryRow {
                method: chunk[0].method,
                runs: chunk.len(),
                mean_best,
                std_best,
                mean_last,
                std_last,
                mean_recovery: (rec.len() == chunk.len()).then(|| mean_std(&rec).0),
            });
        }
        ComparisonTable {
            results,
            failures,
            summary,
        }
    }

    pub fn summary_for(&self, method: Method) -> Option<&SummaryRow> {
        self.summary.iter().find(|s| s.method == method)
    }

    pub fn results_for(&self, method: Method) -> impl Iterator<Item = &RunResult> {
        self.results.iter().filter(move |r| r.method == method)
    }

    /// Per-run CSV. Wall times are left blank unless requested, so that
    /// reruns are byte-identical.
    pub fn results_csv(&self, with_wall_time: bool) -> String {
        let mut out = format!("{RESULTS_HEADER}\n");
        for r in &self.results {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.method,
                r.seed,
                fmt_real(r.best_accuracy),
                fmt_real(r.last_accuracy),
                r.recovery_error.map(fmt_real).unwrap_or_default(),
                if with_wall_time { format!("{:.3}", r.wall_time_s) } else { String::new() },
            ));
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        let mut out = format!("{SUMMARY_HEADER}\n");
        for s in &self.summary {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                s.method,
                s.runs,
                fmt_real(s.mean_best),
                fmt_real(s.std_best),
                fmt_real(s.mean_last),
                fmt_real(s.std_last),
                s.mean_recovery.map(fmt_real).unwrap_or_default(),
            ));
        }
        out
    }

    /// Aligned plain-text summary, accuracies in percent.
    pub fn text_table(&self) -> String {
        let header = ["method", "runs", "best acc (%)", "last acc (%)", "recovery err"];
        let mut rows: Vec<[String; 5]> = vec![header.map(String::from)];
        for s in &self.summary {
            rows.push([
                s.method.to_string(),
                s.runs.to_string(),
                format!("{:.2} ± {:.2}", 100.0 * s.mean_best, 100.0 * s.std_best),
                format!("{:.2} ± {:.2}", 100.0 * s.mean_last, 100.0 * s.std_last),
                s.mean_recovery.map_or("-".into(), |v| format!("{v:.4}")),
            ]);
        }
        let widths: Vec<usize> = (0..5)
            .map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for (i, row) in rows.iter().enumerate() {
            let line: Vec<String> = row
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(c, (cell, &w))| {
                    let pad = w - cell.chars().count();
                    if c == 0 {
                        format!("{cell}{}", " ".repeat(pad))
                    } else {
                        format!("{}{cell}", " ".repeat(pad))
                    }
                })
                .collect();
            out.push_str(line.join("  ").trim_end());
            out.push('\n');
            if i == 0 {
                let total = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
                out.push_str(&"-".repeat(total));
                out.push('\n');
            }
        }
        for f in &self.failures {
            out.push_str(&format!("FAILED {} seed {}: {}\n", f.method, f.seed, f.message));
        }
        out
    }

    pub fn write(&self, dir: &Path, with_wall_time: bool) -> Result<()> {
        let files = [
            ("results.csv", self.results_csv(with_wall_time)),
            ("summary.csv", self.summary_csv()),
            ("table.txt", self.text_table()),
        ];
        for (name, content) in files {
            let path = dir.join(name);
            std::fs::write(&path, content).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

/// Where a comparison's data comes from.
#[derive(Clone, Debug)]
pub enum DatasetSource {
    /// Regenerated per seed, with the seed overriding `GenConfig::seed`.
    Generated(GenConfig),
    /// Fixed data. Without a separate test set, `train` is split per seed.
    Fixed {
        train: CrowdDataset,
        test: Option<CrowdDataset>,
    },
}

#[derive(Clone, Debug)]
pub struct ComparisonSpec {
    pub source: DatasetSource,
    pub train: TrainConfig,
    pub aggregation: AggregationConfig,
    pub test_fraction: f64,
    /// Run (method, seed) pairs on the rayon pool.
    pub parallel: bool,
}

/// Train/test data for one seed plus generator reference confusions over
/// the training part.
#[derive(Clone, Debug)]
pub struct SeedData {
    pub train: CrowdDataset,
    pub test: CrowdDataset,
    pub reference: Option<Vec<Matrix>>,
}

/// Builds the data every method sees for `seed`.
pub fn seed_data(spec: &ComparisonSpec, seed: u64) -> Result<SeedData> {
    let mut split_rng = Rng::with_stream(seed, STREAM_SPLIT);
    match &spec.source {
        DatasetSource::Generated(gen) => {
            let generated = simgen::generate(&GenConfig { seed, ..gen.clone() })?;
            let (train, test) = datamodel::split(&generated.dataset, spec.test_fraction, &mut split_rng)?;
            let reference = Some(generated.reference_confusions(&train));
            Ok(SeedData { train, test, reference })
        }
        DatasetSource::Fixed { train, test: Some(test) } => Ok(SeedData {
            train: train.clone(),
            test: test.clone(),
            reference: None,
        }),
        DatasetSource::Fixed { train, test: None } => {
            let (train, test) = datamodel::split(train, spec.test_fraction, &mut split_rng)?;
            Ok(SeedData { train, test, reference: None })
        }
    }
}

/// Everything one method run produces.
#[derive(Clone, Debug)]
pub struct MethodRun {
    /// Absent when the test split has no true labels.
    pub result: Option<RunResult>,
    pub log: TrainLog,
    pub model: crate::lfcx::ModelParams,
    /// Parameters at the best epoch.
    pub best_model: crate::lfcx::ModelParams,
    /// Aggregated training labels (mv, ds).
    pub aggregated: Option<Vec<usize>>,
}

fn result_from_log(
    method: Method,
    seed: u64,
    log: &TrainLog,
    recovery: Option<f64>,
    start: Instant,
) -> Option<RunResult> {
    Some(RunResult {
        method,
        seed,
        best_accuracy: log.best_test_accuracy()?,
        last_accuracy: log.last()?.test_accuracy?,
        recovery_error: recovery,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

/// Trains and scores one method. `config.seed` drives initialization and
/// batching.
pub fn run_method(
    method: Method,
    data: &SeedData,
    config: &TrainConfig,
    agg: &AggregationConfig,
) -> Result<MethodRun> {
    let start = Instant::now();
    let seed = config.seed;
    let eval = Some(&data.test);
    let recovery = |learned: Vec<Matrix>| -> Result<Option<f64>> {
        data.reference
            .as_ref()
            .map(|r| recovery_error(&learned, r))
            .transpose()
    };
    match method {
        Method::Lfcx | Method::Crowdlayer => {
            let outcome = if method == Method::Lfcx {
                trainer::train(&data.train, eval, config)?
            } else {
                baselines::confusion_only_train(&data.train, eval, config)?
            };
            let learned = outcome
                .params
                .annotators
                .iter()
                .map(|a| a.confusion_probs())
                .collect();
            let result = result_from_log(method, seed, &outcome.log, recovery(learned)?, start);
            Ok(MethodRun {
                result,
                log: outcome.log,
                model: outcome.params,
                best_model: outcome.best_params,
                aggregated: None,
            })
        }
        Method::Mv | Method::Ds => {
            let outcome = if method == Method::Mv {
                baselines::nn_mv(&data.train, eval, config, agg)?
            } else {
                baselines::nn_ds(&data.train, eval, config, agg)?
            };
            let rec = match &outcome.ds {
                Some(ds) => recovery(ds.confusions.clone())?,
                None => None,
            };
            let result = result_from_log(method, seed, &outcome.classifier.log, rec, start);
            Ok(MethodRun {
                result,
                model: outcome.as_model(),
                best_model: crate::lfcx::ModelParams {
                    classifier: outcome.classifier.best_params.clone(),
                    annotators: Vec::new(),
                },
                aggregated: Some(outcome.aggregated.labels),
                log: outcome.classifier.log,
            })
        }
        Method::Truth => {
            let labels = data
                .train
                .true_labels()
                .ok_or_else(|| Error::Dataset("truth method needs true training labels".into()))?;
            let outcome = baselines::train_on_labels(
                data.train.features(),
                labels,
                data.train.num_classes(),
                data.test.true_labels().map(|t| (data.test.features(), t)),
                config,
            )?;
            let result = result_from_log(method, seed, &outcome.log, None, start);
            Ok(MethodRun {
                result,
                model: crate::lfcx::ModelParams {
                    classifier: outcome.params,
                    annotators: Vec::new(),
                },
                best_model: crate::lfcx::ModelParams {
                    classifier: outcome.best_params,
                    annotators: Vec::new(),
                },
                aggregated: None,
                log: outcome.log,
            })
        }
    }
}

/// Runs every method on every seed. Data for a seed is built once and shared
/// by all methods. Failed runs are listed in the table instead of aborting;
/// only an invalid request or unbuildable data is an error.
pub fn run_comparison(spec: &ComparisonSpec, methods: &[Method], seeds: &[u64]) -> Result<ComparisonTable> {
    if methods.is_empty() {
        return Err(Error::invalid("methods", "at least one method required"));
    }
    if seeds.is_empty() {
        return Err(Error::invalid("seeds", "at least one seed required"));
    }
    let mut methods = methods.to_vec();
    methods.sort_unstable();
    methods.dedup();
    let mut seeds = seeds.to_vec();
    seeds.sort_unstable();
    seeds.dedup();
    spec.train.validate()?;

    let data = seeds
        .iter()
        .map(|&s| seed_data(spec, s))
        .collect::<Result<Vec<_>>>()?;
    let jobs: Vec<(Method, usize)> = methods
        .iter()
        .flat_map(|&m| (0..seeds.len()).map(move |i| (m, i)))
        .collect();
    let run = |&(method, i): &(Method, usize)| {
        let config = TrainConfig {
            seed: seeds[i],
            ..spec.train.clone()
        };
        let failure = |message: String| RunFailure {
            method,
            seed: seeds[i],
            message,
        };
        match run_method(method, &data[i], &config, &spec.aggregation) {
            Ok(MethodRun { result: Some(r), .. }) => Ok(r),
            Ok(_) => Err(failure("test set has no true labels; accuracy undefined".into())),
            Err(e) => Err(failure(e.to_string())),
        }
    };
    let outcomes: Vec<_> = if spec.parallel {
        jobs.par_iter().map(run).collect()
    } else {
        jobs.iter().map(run).collect()
    };
    let (ok, failed): (Vec<_>, Vec<_>) = outcomes.into_iter().partition(|r| r.is_ok());
    Ok(ComparisonTable::from_results(
        ok.into_iter().map(|r| r.unwrap()).collect(),
        failed.into_iter().map(|r| r.unwrap_err()).collect(),
    ))
}
