use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use crowdtrans::datamodel::{self, fmt_real, CrowdDataset};
use crowdtrans::evalharness::{self, Method};
use crowdtrans::simgen;
use crowdtrans::trainer::save_checkpoint;
use crowdtrans::Error;

mod config;

use config::ExperimentConfig;

#[derive(Parser)]
#[command(name = "crowdtrans", version, about = "Learning classifiers from crowd labels")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic crowdsourced dataset.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train one method on one seed's data.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = parse_method)]
        method: Method,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Compare methods over several seeds.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Comma-separated method names.
        #[arg(long, value_delimiter = ',', value_parser = parse_method)]
        methods: Option<Vec<Method>>,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Run (method, seed) pairs in parallel.
        #[arg(long)]
        parallel: bool,
        /// Fill the wall_time_s column (makes reruns differ).
        #[arg(long)]
        record_wall_time: bool,
    },
    /// Summarize a dataset on disk.
    Stats {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Number of classes; inferred from the largest label when omitted.
        #[arg(long)]
        classes: Option<usize>,
    },
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML). Without it the built-in defaults apply.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn parse_method(s: &str) -> std::result::Result<Method, String> {
    s.parse::<Method>().map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

/// Returns whether every requested run completed.
fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Generate { common, seed } => {
            let mut config = ExperimentConfig::load_or_default(common.config.as_deref())?;
            if let (Some(seed), Some(gen)) = (seed, config.generator.as_mut()) {
                gen.seed = seed;
            }
            generate(&config, &common.out)?;
            Ok(true)
        }
        Command::Train {
            common,
            method,
            seed,
            epochs,
        } => {
            let mut config = ExperimentConfig::load_or_default(common.config.as_deref())?;
            if let Some(e) = epochs {
                config.train.epochs_total = e;
            }
            let seed = seed.or(config.seeds.first().copied()).unwrap_or(0);
            config.seeds = vec![seed];
            config.methods = vec![method];
            train(&config, method, seed, &common.out)?;
            Ok(true)
        }
        Command::Compare {
            common,
            methods,
            seeds,
            epochs,
            parallel,
            record_wall_time,
        } => {
            let mut config = ExperimentConfig::load_or_default(common.config.as_deref())?;
            if let Some(m) = methods {
                config.methods = m;
            }
            if let Some(s) = seeds {
                config.seeds = s;
            }
            if let Some(e) = epochs {
                config.train.epochs_total = e;
            }
            config.parallel |= parallel;
            config.record_wall_time |= record_wall_time;
            compare(&config, &common.out)
        }
        Command::Stats {
            features,
            annotations,
            labels,
            classes,
        } => {
            stats(&features, &annotations, labels.as_deref(), classes)?;
            Ok(true)
        }
    }
}

fn generate(config: &ExperimentConfig, out: &Path) -> Result<()> {
    let gen = config.generator()?;
    gen.validate().context("invalid [generator] section")?;
    let data = simgen::generate(gen)?;
    create_dir(out)?;
    let ds = &data.dataset;
    datamodel::save_dataset(
        ds,
        &out.join("features.csv"),
        &out.join("annotations.csv"),
        Some(&out.join("labels.csv")),
    )?;
    let reference = data.reference_confusions(ds);
    let c = ds.num_classes();
    let mut csv = String::from("annotator,true_class");
    for j in 0..c {
        csv.push_str(&format!(",reported_{j}"));
    }
    csv.push('\n');
    for (r, m) in reference.iter().enumerate() {
        for (t, row) in m.iter_rows().enumerate() {
            let cells: Vec<String> = row.iter().map(|&v| fmt_real(v)).collect();
            csv.push_str(&format!("{r},{t},{}\n", cells.join(",")));
        }
    }
    write(&out.join("confusions.csv"), &csv)?;
    config.write_provenance(out, "generate")?;
    println!("{}", datamodel::stats(ds));
    Ok(())
}

fn train(config: &ExperimentConfig, method: Method, seed: u64, out: &Path) -> Result<()> {
    let spec = config.comparison_spec()?;
    let data = evalharness::seed_data(&spec, seed)?;
    let train_config = crowdtrans::trainer::TrainConfig {
        seed,
        ..config.train.clone()
    };
    create_dir(out)?;
    config.write_provenance(out, "train")?;
    let run = match evalharness::run_method(method, &data, &train_config, &config.aggregation) {
        Ok(run) => run,
        Err(Error::Diverged {
            epoch,
            reason,
            last_good,
        }) => {
            let path = out.join("checkpoint.txt");
            save_checkpoint(&last_good, &path)?;
            bail!(
                "training diverged at epoch {epoch}: {reason}; last good parameters saved to {}",
                path.display()
            );
        }
        Err(e) => return Err(e.into()),
    };
    save_checkpoint(&run.model, &out.join("checkpoint.txt"))?;
    save_checkpoint(&run.best_model, &out.join("best_checkpoint.txt"))?;
    run.log.write_csv(&out.join("train_log.csv"))?;
    if let Some(labels) = &run.aggregated {
        datamodel::write_labels(&out.join("aggregated_labels.csv"), labels)?;
    }
    match &run.result {
        Some(r) => {
            let table = evalharness::ComparisonTable::from_results(vec![r.clone()], Vec::new());
            write(&out.join("result.csv"), &table.results_csv(config.record_wall_time))?;
            println!(
                "{method} seed {seed}: best {:.4}, last {:.4}{}",
                r.best_accuracy,
                r.last_accuracy,
                r.recovery_error
                    .map(|e| format!(", recovery error {e:.4}"))
                    .unwrap_or_default()
            );
        }
        None => println!("{method} seed {seed}: trained (no test labels, accuracy not computed)"),
    }
    Ok(())
}

fn compare(config: &ExperimentConfig, out: &Path) -> Result<bool> {
    if config.methods.is_empty() {
        bail!("no methods given (valid: {})", Method::valid_names());
    }
    if config.seeds.is_empty() {
        bail!("no seeds given");
    }
    let spec = config.comparison_spec()?;
    let table = evalharness::run_comparison(&spec, &config.methods, &config.seeds)?;
    create_dir(out)?;
    table.write(out, config.record_wall_time)?;
    config.write_provenance(out, "compare")?;
    print!("{}", table.text_table());
    Ok(table.failures.is_empty())
}

fn stats(features: &Path, annotations: &Path, labels: Option<&Path>, classes: Option<usize>) -> Result<()> {
    let classes = match classes {
        Some(c) => c,
        None => {
            let (cells, _, _) = datamodel::read_annotations(annotations, usize::MAX)?;
            let mut max = cells.iter().copied().max().unwrap_or(0).max(0) as usize;
            if let Some(path) = labels {
                let l = datamodel::read_labels(path, usize::MAX)?;
                max = max.max(l.into_iter().max().unwrap_or(0));
            }
            (max + 1).max(2)
        }
    };
    let ds: CrowdDataset =
        datamodel::load_dataset(features, annotations, labels, classes, datamodel::Role::Test)?;
    println!("{}", datamodel::stats(&ds));
    Ok(())
}
