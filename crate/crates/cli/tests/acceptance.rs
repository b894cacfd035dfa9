//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits nonzero if any failed. Pass criterion numbers as arguments to run a
//! subset, e.g. `cargo test --test acceptance -- 1 4 9`.

use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use crowdtrans::baselines::{confusion_only_nll, confusion_only_train, dawid_skene, DS_SMOOTHING};
use crowdtrans::datamodel::{self, CrowdDataset, Role, MISSING};
use crowdtrans::evalharness::{
    self, run_comparison, ComparisonSpec, ComparisonTable, DatasetSource, Method,
};
use crowdtrans::lfcx::{self, init_params, BlockId, Freeze, ModelParams};
use crowdtrans::numerics::{finite_diff_grad, relative_error, softmax_rows, Matrix, Rng, FD_STEP};
use crowdtrans::simgen::GenConfig;
use crowdtrans::trainer::{self, TrainConfig};

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------------------
// random problems

fn random_matrix(rng: &mut Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::new(rows, cols, (0..rows * cols).map(|_| scale * rng.normal()).collect()).unwrap()
}

fn random_params(rng: &mut Rng, c: usize, d: usize, h: usize, r: usize, scale: f64) -> ModelParams {
    // every block is overwritten below; epsilon only has to be valid for C
    let mut p = init_params(c, d, h, r, 0.9, rng).unwrap();
    for (_, values) in p.blocks_mut() {
        values.iter_mut().for_each(|v| *v = scale * rng.normal());
    }
    p
}

/// Random annotations with roughly `missing` of the cells absent and every
/// instance labeled at least once.
fn random_dataset(rng: &mut Rng, n: usize, d: usize, r: usize, c: usize, missing: f64) -> CrowdDataset {
    let features = random_matrix(rng, n, d, 1.0);
    let mut cells = Vec::with_capacity(n * r);
    for _ in 0..n {
        let keep = rng.index(r);
        for a in 0..r {
            cells.push(if a != keep && rng.uniform(0.0, 1.0) < missing {
                MISSING
            } else {
                rng.index(c) as i32
            });
        }
    }
    CrowdDataset::new(features, cells, r, c, None).unwrap()
}

// ---------------------------------------------------------------------------
// 1

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let (d, h, c, r, n) = (5, 8, 3, 4, 6);
    let freezes = [
        ("impact frozen", Freeze { impact: true, confusion: false }),
        ("confusion frozen", Freeze { impact: false, confusion: true }),
    ];
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    for seed in 0..20u64 {
        let mut rng = Rng::new(1000 + seed);
        let params = random_params(&mut rng, c, d, h, r, 0.7);
        let data = random_dataset(&mut rng, n, d, r, c, 0.3);
        let idx: Vec<usize> = (0..n).collect();
        let fd = finite_diff_grad(
            |t| lfcx::nll(&params.with_flat(t).unwrap(), &data).unwrap(),
            &params.flatten(),
            FD_STEP,
        )
        .map_err(|e| e.to_string())?;
        for (label, freeze) in freezes {
            let (_, grads) = lfcx::gradients(&params, &data, &idx, freeze).map_err(|e| e.to_string())?;
            let mut offset = 0;
            for block in grads.blocks() {
                let frozen = matches!(block.id, BlockId::Impact(_)) && freeze.impact
                    || matches!(block.id, BlockId::Confusion(_)) && freeze.confusion;
                for (i, &a) in block.values.iter().enumerate() {
                    if frozen {
                        if a != 0.0 {
                            return Err(format!("seed {seed} {label}: frozen {}[{i}] = {a}", block.id));
                        }
                        continue;
                    }
                    let err = relative_error(a, fd[offset + i]);
                    worst = worst.max(err);
                    checked += 1;
                    if err >= 1e-5 {
                        return Err(format!(
                            "seed {seed} {label}: {}[{i}] analytic {a} vs numeric {} (rel err {err:.2e})",
                            block.id,
                            fd[offset + i]
                        ));
                    }
                }
                offset += block.values.len();
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        secs < 30.0,
        format!("20 seeds x 2 freeze configs, {checked} coordinates, max rel err {worst:.2e}, {secs:.2} s"),
    )
}

// ---------------------------------------------------------------------------
// 2

fn normalization_invariants() -> Outcome {
    let mut rng = Rng::new(2);
    let (mut worst_cls, mut worst_trans) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let c = 2 + rng.index(7);
        let d = 1 + rng.index(6);
        let h = 1 + rng.index(10);
        let scale = rng.uniform(0.1, 3.0);
        let params = random_params(&mut rng, c, d, h, 1, scale);
        let x: Vec<f64> = (0..d).map(|_| 3.0 * rng.normal()).collect();
        let p = params.classifier.classify(&x).map_err(|e| e.to_string())?;
        worst_cls = worst_cls.max((p.iter().sum::<f64>() - 1.0).abs());
        let hidden = params.classifier.hidden_features(&x).map_err(|e| e.to_string())?;
        let t = params.annotators[0].noise_transition(&hidden).map_err(|e| e.to_string())?;
        worst_trans = worst_trans.max(t.max_row_sum_error());
    }
    check(
        worst_cls <= 1e-12 && worst_trans <= 1e-9,
        format!("1000 draws, max |sum - 1|: classify {worst_cls:.1e}, transition rows {worst_trans:.1e}"),
    )
}

// ---------------------------------------------------------------------------
// 3

fn degeneracy_equivalence() -> Outcome {
    let mut rng = Rng::new(3);
    for case in 0..100 {
        let (c, d, h, r) = (2 + rng.index(4), 1 + rng.index(5), 1 + rng.index(8), 1 + rng.index(4));
        let mut params = random_params(&mut rng, c, d, h, r, 1.0);
        for a in params.annotators.iter_mut() {
            a.impact_weights.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let n = 3 + rng.index(10);
        let data = random_dataset(&mut rng, n, d, r, c, 0.4);
        let full = lfcx::nll(&params, &data).map_err(|e| e.to_string())?;
        let logits: Vec<Matrix> = params.annotators.iter().map(|a| a.confusion_logits.clone()).collect();
        let class_level = confusion_only_nll(&params.classifier, &logits, &data).map_err(|e| e.to_string())?;
        if full.to_bits() != class_level.to_bits() {
            return Err(format!("case {case}: {full:?} != {class_level:?}"));
        }
    }
    Ok("100 random cases, bit-identical NLL".into())
}

// ---------------------------------------------------------------------------
// 4

fn initialization() -> Outcome {
    let params = init_params(8, 3, 4, 2, 0.46, &mut Rng::new(4)).map_err(|e| e.to_string())?;
    let diag = 0.46f64.ln();
    let off = (0.54f64 / 7.0).ln();
    let mut worst = 0.0f64;
    for a in &params.annotators {
        for i in 0..8 {
            for j in 0..8 {
                let want = if i == j { diag } else { off };
                worst = worst.max((a.confusion_logits[(i, j)] - want).abs());
            }
        }
        if a.impact_weights.data().iter().any(|&v| v != 0.0) {
            return Err("impact weights not zero at init".into());
        }
    }
    let probs = softmax_rows(&params.annotators[0].confusion_logits).map_err(|e| e.to_string())?;
    for i in 0..8 {
        for j in 0..8 {
            let want = if i == j { 0.46 } else { 0.54 / 7.0 };
            worst = worst.max((probs[(i, j)] - want).abs());
        }
    }
    let constants_ok =
        (diag - (-0.77653)).abs() < 5e-6 && (off - (-2.56210)).abs() < 5e-6 && (0.54f64 / 7.0 - 0.0771).abs() < 1e-4;
    check(
        worst <= 1e-12 && constants_ok,
        format!("logits {diag:.5}/{off:.5}, softmax row [0.46, {:.5}], max dev {worst:.1e}", 0.54 / 7.0),
    )
}

// ---------------------------------------------------------------------------
// 5

/// Dawid-Skene EM written out directly in probability space over nested
/// vectors, kept separate from the library implementation.
fn ds_oracle(labels: &[Vec<i32>], classes: usize, iterations: usize) -> Vec<Vec<f64>> {
    let n = labels.len();
    let r = labels[0].len();
    let mut q: Vec<Vec<f64>> = labels
        .iter()
        .map(|row| {
            let mut v = vec![0.0; classes];
            for &y in row.iter().filter(|&&y| y >= 0) {
                v[y as usize] += 1.0;
            }
            let s: f64 = v.iter().sum();
            v.iter().map(|x| x / s).collect()
        })
        .collect();
    for _ in 0..iterations {
        let mut prior = vec![0.0; classes];
        let mut pi = vec![vec![vec![DS_SMOOTHING; classes]; classes]; r];
        for i in 0..n {
            for t in 0..classes {
                prior[t] += q[i][t] / n as f64;
                for a in 0..r {
                    if labels[i][a] >= 0 {
                        pi[a][t][labels[i][a] as usize] += q[i][t];
                    }
                }
            }
        }
        for m in pi.iter_mut() {
            for row in m.iter_mut() {
                let s: f64 = row.iter().sum();
                row.iter_mut().for_each(|v| *v /= s);
            }
        }
        for i in 0..n {
            let mut post: Vec<f64> = (0..classes)
                .map(|t| {
                    let mut p = prior[t];
                    for a in 0..r {
                        if labels[i][a] >= 0 {
                            p *= pi[a][t][labels[i][a] as usize];
                        }
                    }
                    p
                })
                .collect();
            let s: f64 = post.iter().sum();
            post.iter_mut().for_each(|v| *v /= s);
            q[i] = post;
        }
    }
    q
}

fn ds_oracle_equivalence() -> Outcome {
    // annotator 2 contradicts the other two
    let toy = vec![vec![0, 0, 1], vec![1, 1, 0], vec![0, 0, 1]];
    let iterations = 25;
    let data = CrowdDataset::new(
        Matrix::zeros(3, 1),
        toy.iter().flatten().copied().collect(),
        3,
        2,
        None,
    )
    .unwrap();
    let est = dawid_skene(&data, iterations, 0.0).map_err(|e| e.to_string())?;
    let oracle = ds_oracle(&toy, 2, iterations);
    let mut worst = 0.0f64;
    for (i, row) in oracle.iter().enumerate() {
        for (t, &v) in row.iter().enumerate() {
            worst = worst.max((est.posteriors[(i, t)] - v).abs());
        }
    }
    if worst >= 1e-8 {
        return Err(format!("toy posterior deviation {worst:.2e}"));
    }

    let mut rng = Rng::new(5);
    let mut worst_drop = 0.0f64;
    let mut first_failure: Option<(usize, CrowdDataset)> = None;
    for case in 0..50 {
        let (n, r, c) = (3 + rng.index(12), 2 + rng.index(4), 2 + rng.index(3));
        let data = random_dataset(&mut rng, n, 1, r, c, 0.3);
        let est = dawid_skene(&data, 100, 0.0).map_err(|e| e.to_string())?;
        let drop = est.log_likelihood.windows(2).map(|w| w[0] - w[1]).fold(0.0, f64::max);
        worst_drop = worst_drop.max(drop);
        if drop > 1e-9 && first_failure.is_none() {
            first_failure = Some((case, data));
        }
    }
    let toy_detail = format!("toy max deviation {worst:.1e} after {iterations} iterations");
    match first_failure {
        None => Ok(format!("{toy_detail}; 50 random cases, largest log-likelihood drop {worst_drop:.1e}")),
        Some((case, data)) => {
            let penalized_drop = smoothed_objective_drop(&data, 100)?;
            Err(format!(
                "{toy_detail}; log-likelihood fell by up to {worst_drop:.2e} (first in case {case}); \
                 the smoothed objective log-likelihood + {DS_SMOOTHING:e} * sum log(confusion) \
                 falls by at most {penalized_drop:.1e} on that case"
            ))
        }
    }
}

/// Largest per-iteration decrease of the log-likelihood plus the
/// pseudo-count log-prior on the confusion matrices.
fn smoothed_objective_drop(data: &CrowdDataset, iterations: usize) -> Result<f64, String> {
    let objective = |k: usize| -> Result<f64, String> {
        let est = dawid_skene(data, k, 0.0).map_err(|e| e.to_string())?;
        let log_prior: f64 = est.confusions.iter().flat_map(|m| m.data()).map(|p| p.ln()).sum();
        Ok(est.log_likelihood[k] + DS_SMOOTHING * log_prior)
    };
    let mut worst = 0.0f64;
    let mut prev = objective(0)?;
    for k in 1..=iterations {
        let next = objective(k)?;
        worst = worst.max(prev - next);
        prev = next;
    }
    Ok(worst)
}

// ---------------------------------------------------------------------------
// 6 and 7

fn comparison(gen: GenConfig, methods: &[Method]) -> Result<ComparisonTable, String> {
    let spec = ComparisonSpec {
        source: DatasetSource::Generated(gen),
        train: TrainConfig::default(),
        aggregation: Default::default(),
        test_fraction: 0.2,
        parallel: false,
    };
    let seeds: Vec<u64> = (0..10).collect();
    let table = run_comparison(&spec, methods, &seeds).map_err(|e| e.to_string())?;
    if !table.failures.is_empty() {
        return Err(format!("failed runs: {:?}", table.failures));
    }
    Ok(table)
}

fn class_level_recovery() -> Outcome {
    let table = comparison(GenConfig::default(), &[Method::Truth, Method::Lfcx, Method::Crowdlayer])?;
    let truth = table.summary_for(Method::Truth).unwrap().mean_last;
    let mut detail = format!("truth {:.2}%", 100.0 * truth);
    let mut pass = true;
    for m in [Method::Lfcx, Method::Crowdlayer] {
        let s = table.summary_for(m).unwrap();
        let rec = s.mean_recovery.unwrap_or(f64::INFINITY);
        pass &= truth - s.mean_last <= 0.02 && rec < 0.15;
        detail.push_str(&format!(", {m} {:.2}% (recovery {rec:.4})", 100.0 * s.mean_last));
    }
    let slowest = (0..10u64)
        .map(|seed| table.results.iter().filter(|r| r.seed == seed).map(|r| r.wall_time_s).sum::<f64>())
        .fold(0.0, f64::max);
    pass &= slowest < 600.0;
    detail.push_str(&format!(", slowest seed {slowest:.1} s"));
    check(pass, detail)
}

fn feature_dependent_advantage() -> Outcome {
    let table = comparison(GenConfig::feature_dependent_scenario(), &[Method::Lfcx, Method::Crowdlayer])?;
    let last = |m: Method| -> Vec<f64> { table.results_for(m).map(|r| r.last_accuracy).collect() };
    let (full, class_level) = (last(Method::Lfcx), last(Method::Crowdlayer));
    let wins = full.iter().zip(&class_level).filter(|(a, b)| a > b).count();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let margin = mean(&full) - mean(&class_level);
    check(
        margin > 0.0 && wins >= 8,
        format!(
            "lfcx {:.2}% vs crowdlayer {:.2}%, margin {:+.2} points, lfcx ahead on {wins}/10 seeds",
            100.0 * mean(&full),
            100.0 * mean(&class_level),
            100.0 * margin
        ),
    )
}

// ---------------------------------------------------------------------------
// 8

fn masking_contracts() -> Outcome {
    let mut rng = Rng::new(8);
    let (n, d, r, c) = (60, 3, 4, 3);
    let mut data = random_dataset(&mut rng, n, d, r, c, 0.5);
    // annotator 3 never labels; annotator 0 labels only the first 10 instances
    let mut cells = data.annotations().to_vec();
    for i in 0..n {
        cells[i * r + 3] = MISSING;
        if i >= 10 {
            cells[i * r] = MISSING;
        }
        if cells[i * r..(i + 1) * r].iter().all(|&y| y == MISSING) {
            cells[i * r + 1] = rng.index(c) as i32;
        }
    }
    data = CrowdDataset::new(data.features().clone(), cells, r, c, None).unwrap();

    // batch without annotator 0: its gradient blocks are exactly zero
    let params = random_params(&mut rng, c, d, 6, r, 0.5);
    let batch: Vec<usize> = (10..40).collect();
    let (_, grads) = lfcx::gradients(&params, &data, &batch, Freeze::default()).map_err(|e| e.to_string())?;
    for id in [BlockId::Confusion(0), BlockId::Impact(0), BlockId::Confusion(3), BlockId::Impact(3)] {
        if grads.block(id).unwrap().iter().any(|&v| v != 0.0) {
            return Err(format!("absent annotator block {id} has nonzero gradient"));
        }
    }

    let config = TrainConfig {
        epochs_total: 20,
        stage1_epochs: Some(10),
        batch_size: 8,
        hidden: 6,
        lr0: 0.05,
        lr_decay_epochs: vec![5, 15],
        decay_annotator_blocks: true,
        seed: 8,
        ..TrainConfig::default()
    };
    let full = trainer::train(&data, None, &config).map_err(|e| e.to_string())?;
    let init = init_params(c, d, 6, r, config.epsilon, &mut Rng::with_stream(config.seed, 0)).unwrap();
    let stage1_end = full.stage1_params.clone().unwrap();

    // stage 1, epoch by epoch: impact frozen at zero
    for epochs in 1..=10 {
        let partial = confusion_only_train(&data, None, &TrainConfig { epochs_total: epochs, ..config.clone() })
            .map_err(|e| e.to_string())?;
        for (i, a) in partial.params.annotators.iter().enumerate() {
            if a.impact_weights != init.annotators[i].impact_weights {
                return Err(format!("impact {i} moved in stage 1 (epoch {epochs})"));
            }
        }
        if partial.params.annotators[3] != init.annotators[3] {
            return Err(format!("never-present annotator moved by epoch {epochs}"));
        }
        if epochs == 10 && partial.params != stage1_end {
            return Err("stage-1 trajectory differs from the confusion-only run".into());
        }
    }
    // stage 2, epoch by epoch: confusion frozen at its stage-1 value
    for epochs in 11..=20 {
        let partial = trainer::train(&data, None, &TrainConfig { epochs_total: epochs, ..config.clone() })
            .map_err(|e| e.to_string())?;
        for (i, a) in partial.params.annotators.iter().enumerate() {
            if a.confusion_logits != stage1_end.annotators[i].confusion_logits {
                return Err(format!("confusion {i} moved in stage 2 (epoch {epochs})"));
            }
        }
        if partial.params.annotators[3] != init.annotators[3] {
            return Err(format!("never-present annotator moved by epoch {epochs}"));
        }
    }
    if full.params.annotators[1].impact_weights == init.annotators[1].impact_weights {
        return Err("stage 2 never trained the impact layer".into());
    }
    Ok("zero gradients for absent annotators; frozen blocks bit-identical over all 20 epochs".into())
}

// ---------------------------------------------------------------------------
// 9

fn end_to_end_determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = dir.path().join("experiment.toml");
    std::fs::write(
        &config,
        r#"
schema = "crowdtrans-config v1"
methods = ["truth", "lfcx", "crowdlayer", "mv", "ds"]
seeds = [0, 1]

[generator]
instances = 500

[train]
epochs_total = 30
hidden = 32
"#,
    )
    .map_err(|e| e.to_string())?;
    let run = |name: &str, extra: &[&str]| -> Result<(), String> {
        let out = Command::new(env!("CARGO_BIN_EXE_crowdtrans"))
            .args(["compare", "--config", config.to_str().unwrap(), "--out"])
            .arg(dir.path().join(name))
            .args(extra)
            .output()
            .map_err(|e| e.to_string())?;
        if !out.status.success() {
            return Err(String::from_utf8_lossy(&out.stderr).into_owned());
        }
        Ok(())
    };
    run("a", &[])?;
    run("b", &[])?;
    run("c", &["--parallel"])?;
    let files = ["results.csv", "summary.csv", "table.txt", "provenance.toml"];
    for other in ["b", "c"] {
        for f in files {
            let x = std::fs::read(dir.path().join("a").join(f)).map_err(|e| e.to_string())?;
            let y = std::fs::read(dir.path().join(other).join(f)).map_err(|e| e.to_string())?;
            let same = x == y || (f == "provenance.toml" && other == "c");
            if !same {
                return Err(format!("{f} differs between run a and run {other}"));
            }
        }
    }
    let rows = std::fs::read_to_string(dir.path().join("a/results.csv")).unwrap().lines().count();
    check(rows == 11, format!("two reruns and a parallel run byte-identical ({} result rows)", rows - 1))
}

// ---------------------------------------------------------------------------
// 10

/// Expects `features.csv`, `annotations.csv`, `test_features.csv` and
/// `test_labels.csv` (8 classes) in `$CROWDTRANS_LABELME_DIR`.
fn labelme_reference() -> Option<Outcome> {
    let dir = std::env::var_os("CROWDTRANS_LABELME_DIR")?;
    let dir = Path::new(&dir);
    let run = || -> Result<Outcome, crowdtrans::Error> {
        let train = datamodel::load_dataset(
            &dir.join("features.csv"),
            &dir.join("annotations.csv"),
            None,
            8,
            Role::Train,
        )?;
        let x = datamodel::read_features(&dir.join("test_features.csv"))?;
        let y = datamodel::read_labels(&dir.join("test_labels.csv"), 8)?;
        let test = CrowdDataset::unannotated(x, y, train.num_annotators(), 8)?;
        let data = evalharness::SeedData { train, test, reference: None };
        let run = evalharness::run_method(Method::Lfcx, &data, &TrainConfig::default(), &Default::default())?;
        let last = run.result.map(|r| r.last_accuracy).unwrap_or(0.0);
        Ok(check(
            (100.0 * last - 84.60).abs() <= 3.0,
            format!("last-epoch accuracy {:.2}% (reference 84.60 +/- 3)", 100.0 * last),
        ))
    };
    Some(run().unwrap_or_else(|e| Err(e.to_string())))
}

// ---------------------------------------------------------------------------

fn main() -> ExitCode {
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [(usize, &str, fn() -> Outcome); 9] = [
        (1, "gradient correctness", gradient_correctness),
        (2, "normalization invariants", normalization_invariants),
        (3, "degeneracy equivalence", degeneracy_equivalence),
        (4, "initialization", initialization),
        (5, "Dawid-Skene oracle and monotonicity", ds_oracle_equivalence),
        (6, "class-level synthetic recovery", class_level_recovery),
        (7, "feature-dependent advantage", feature_dependent_advantage),
        (8, "masking contracts", masking_contracts),
        (9, "end-to-end determinism", end_to_end_determinism),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (n, name, f) in criteria {
        if !wanted.is_empty() && !wanted.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            Err(e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {n:>2} PASS  {name}: {detail} [{secs:.1} s]"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n:>2} FAIL  {name}: {detail} [{secs:.1} s]");
            }
        }
    }
    if wanted.is_empty() || wanted.contains(&10) {
        match labelme_reference() {
            None => println!("criterion 10 SKIP  LabelMe reference: CROWDTRANS_LABELME_DIR not set (optional)"),
            Some(Ok(d)) => println!("criterion 10 PASS  LabelMe reference: {d}"),
            // optional criterion: reported, not gating
            Some(Err(d)) => println!("criterion 10 FAIL  LabelMe reference (optional, not gating): {d}"),
        }
    }
    if failed > 0 {
        println!("{failed} criterion/criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
