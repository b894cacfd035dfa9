//! Experiment configuration files.
//!
//! A config is a TOML document:
//!
//! ```toml
//! schema = "crowdtrans-config v1"
//! methods = ["lfcx", "crowdlayer"]
//! seeds = [0, 1, 2]
//! test_fraction = 0.2
//!
//! [generator]        # or [files], exactly one
//! instances = 2000
//!
//! [train]
//! epochs_total = 400
//!
//! [aggregation]
//! ds_max_iters = 100
//! ```
//!
//! Every section and key is optional except `schema` and the dataset
//! source. Relative paths under `[files]` resolve against the config file's
//! directory.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use crowdtrans::baselines::AggregationConfig;
use crowdtrans::datamodel::{self, CrowdDataset, Role};
use crowdtrans::evalharness::{ComparisonSpec, DatasetSource, Method};
use crowdtrans::simgen::GenConfig;
use crowdtrans::trainer::{TrainConfig, CHECKPOINT_HEADER, LOG_HEADER};

pub const SCHEMA: &str = "crowdtrans-config v1";
pub const PROVENANCE_FILE: &str = "provenance.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileSource {
    pub features: PathBuf,
    pub annotations: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,
    pub classes: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_features: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_annotations: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_labels: Option<PathBuf>,
}

impl FileSource {
    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.features);
        fix(&mut self.annotations);
        for p in [&mut self.labels, &mut self.test_features, &mut self.test_annotations, &mut self.test_labels]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
    }

    pub fn load(&self) -> Result<(CrowdDataset, Option<CrowdDataset>)> {
        let train = datamodel::load_dataset(
            &self.features,
            &self.annotations,
            self.labels.as_deref(),
            self.classes,
            Role::Train,
        )?;
        let test = match (&self.test_features, &self.test_labels) {
            (None, None) if self.test_annotations.is_none() => None,
            (Some(features), Some(labels)) => Some(match &self.test_annotations {
                Some(a) => datamodel::load_dataset(features, a, Some(labels), self.classes, Role::Test)?,
                None => {
                    let x = datamodel::read_features(features)?;
                    let y = datamodel::read_labels(labels, self.classes)?;
                    CrowdDataset::unannotated(x, y, train.num_annotators(), self.classes)?
                }
            }),
            _ => bail!("[files]: a test set needs both `test_features` and `test_labels`"),
        };
        Ok((train, test))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema: String,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    pub test_fraction: f64,
    pub parallel: bool,
    pub record_wall_time: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub generator: Option<GenConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub files: Option<FileSource>,
    pub train: TrainConfig,
    pub aggregation: AggregationConfig,
    /// Written into output directories; ignored on load.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub provenance: Option<toml::Table>,
}

/// What an empty document deserializes to: no schema, no dataset source.
impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            generator: None,
            schema: String::new(),
            ..ExperimentConfig::builtin()
        }
    }
}

impl ExperimentConfig {
    /// Used when no config file is given: the default synthetic scenario.
    pub fn builtin() -> Self {
        ExperimentConfig {
            schema: SCHEMA.into(),
            methods: vec![Method::Lfcx, Method::Crowdlayer, Method::Mv, Method::Ds],
            seeds: vec![0],
            test_fraction: 0.2,
            parallel: false,
            record_wall_time: false,
            generator: Some(GenConfig::default()),
            files: None,
            train: TrainConfig::default(),
            aggregation: AggregationConfig::default(),
            provenance: None,
        }
    }

    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut config: ExperimentConfig = toml::from_str(text)?;
        if config.schema.is_empty() {
            bail!("missing `schema = \"{SCHEMA}\"`");
        }
        if config.schema != SCHEMA {
            bail!("unsupported schema `{}` (expected `{SCHEMA}`)", config.schema);
        }
        if let Some(files) = &mut config.files {
            files.resolve_paths(base);
        }
        config.provenance = None;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base).with_context(|| format!("in config {}", path.display()))
    }

    /// `None` loads the defaults.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => Self::load(p),
            None => Ok(Self::builtin()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.generator, &self.files) {
            (Some(gen), None) => {
                gen.validate().context("invalid [generator] section")?;
            }
            (None, Some(_)) => {}
            _ => bail!("config needs exactly one dataset source: [generator] or [files]"),
        }
        self.train.validate().context("invalid [train] section")?;
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            bail!("invalid `test_fraction`: must lie strictly between 0 and 1");
        }
        Ok(())
    }

    pub fn generator(&self) -> Result<&GenConfig> {
        self.generator
            .as_ref()
            .context("this command needs a [generator] dataset source")
    }

    pub fn comparison_spec(&self) -> Result<ComparisonSpec> {
        self.validate()?;
        let source = match (&self.generator, &self.files) {
            (Some(gen), _) => DatasetSource::Generated(gen.clone()),
            (None, Some(files)) => {
                let (train, test) = files.load()?;
                DatasetSource::Fixed { train, test }
            }
            (None, None) => unreachable!("validated"),
        };
        Ok(ComparisonSpec {
            source,
            train: self.train.clone(),
            aggregation: self.aggregation.clone(),
            test_fraction: self.test_fraction,
            parallel: self.parallel,
        })
    }

    /// The config plus a `[provenance]` table naming the command and the
    /// file-format versions. Loading it back reproduces the run.
    pub fn provenance_toml(&self, command: &str) -> Result<String> {
        let mut record = self.clone();
        record.train.stage1_epochs = Some(self.train.stage1());
        let mut table = toml::Table::new();
        table.insert("command".into(), command.into());
        table.insert("tool_version".into(), env!("CARGO_PKG_VERSION").into());
        table.insert("checkpoint_format".into(), CHECKPOINT_HEADER.into());
        table.insert("train_log_header".into(), LOG_HEADER.into());
        table.insert(
            "results_header".into(),
            crowdtrans::evalharness::RESULTS_HEADER.into(),
        );
        record.provenance = Some(table);
        Ok(toml::to_string(&record)?)
    }

    pub fn write_provenance(&self, dir: &Path, command: &str) -> Result<()> {
        let path = dir.join(PROVENANCE_FILE);
        std::fs::write(&path, self.provenance_toml(command)?)
            .with_context(|| format!("writing {}", path.display()))
    }
}
