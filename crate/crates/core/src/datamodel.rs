//! Crowdsourced datasets: features, sparse per-annotator labels and optional
//! ground truth, plus their CSV file formats.
//!
//! File formats (UTF-8, LF line endings):
//!
//! * features: one instance per line, `D` comma-separated reals. Leading lines
//!   starting with `#` are treated as a header and skipped.
//! * annotations: one instance per line, `R` comma-separated integers, `-1`
//!   marks a missing label.
//! * labels: one integer per line.
//!
//! Writers emit reals with 17 significant digits so that a write/read cycle is
//! lossless.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};

/// Annotation value marking "annotator did not label this instance".
pub const MISSING: i32 = -1;

/// Whether a dataset will be trained on. Training data must give every
/// instance at least one label; test data may be entirely unannotated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CrowdDataset {
    features: Matrix,
    /// N×R row-major, entries in `0..num_classes` or [`MISSING`].
    annotations: Vec<i32>,
    num_annotators: usize,
    num_classes: usize,
    true_labels: Option<Vec<usize>>,
}

impl CrowdDataset {
    pub fn new(
        features: Matrix,
        annotations: Vec<i32>,
        num_annotators: usize,
        num_classes: usize,
        true_labels: Option<Vec<usize>>,
    ) -> Result<Self> {
        let n = features.rows();
        if num_classes < 2 {
            return Err(Error::invalid("num_classes", "need at least 2 classes"));
        }
        if annotations.len() != n * num_annotators {
            return Err(Error::shape(
                "annotation matrix",
                format!("{n}x{num_annotators} = {} cells", n * num_annotators),
                annotations.len(),
            ));
        }
        if !features.is_finite() {
            return Err(Error::NonFinite("feature matrix".into()));
        }
        for (idx, &y) in annotations.iter().enumerate() {
            if y != MISSING && (y < 0 || y as usize >= num_classes) {
                return Err(Error::Dataset(format!(
                    "annotation at row {} column {} is {y}, expected -1 or 0..{}",
                    idx / num_annotators.max(1),
                    idx % num_annotators.max(1),
                    num_classes
                )));
            }
        }
        if let Some(labels) = &true_labels {
            if labels.len() != n {
                return Err(Error::shape("true labels", n, labels.len()));
            }
            if let Some((i, &t)) = labels.iter().enumerate().find(|(_, &t)| t >= num_classes) {
                return Err(Error::Dataset(format!(
                    "true label at row {i} is {t}, expected 0..{num_classes}"
                )));
            }
        }
        Ok(CrowdDataset {
            features,
            annotations,
            num_annotators,
            num_classes,
            true_labels,
        })
    }

    /// A dataset with features and ground truth but no annotations at all,
    /// as used for held-out test sets.
    pub fn unannotated(
        features: Matrix,
        true_labels: Vec<usize>,
        num_annotators: usize,
        num_classes: usize,
    ) -> Result<Self> {
        let cells = features.rows() * num_annotators;
        CrowdDataset::new(
            features,
            vec![MISSING; cells],
            num_annotators,
            num_classes,
            Some(true_labels),
        )
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_features(&self) -> usize {
        self.features.cols()
    }

    pub fn num_annotators(&self) -> usize {
        self.num_annotators
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn feature_row(&self, n: usize) -> &[f64] {
        self.features.row(n)
    }

    /// Raw N×R annotation cells, row-major.
    pub fn annotations(&self) -> &[i32] {
        &self.annotations
    }

    pub fn annotation_row(&self, n: usize) -> &[i32] {
        &self.annotations[n * self.num_annotators..(n + 1) * self.num_annotators]
    }

    pub fn label(&self, n: usize, r: usize) -> Option<usize> {
        match self.annotations[n * self.num_annotators + r] {
            MISSING => None,
            y => Some(y as usize),
        }
    }

    /// `(annotator, label)` pairs observed for instance `n`.
    pub fn observed(&self, n: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.annotation_row(n)
            .iter()
            .enumerate()
            .filter(|(_, &y)| y != MISSING)
            .map(|(r, &y)| (r, y as usize))
    }

    pub fn true_labels(&self) -> Option<&[usize]> {
        self.true_labels.as_deref()
    }

    pub fn num_observed(&self) -> usize {
        self.annotations.iter().filter(|&&y| y != MISSING).count()
    }

    /// Checks the training-data requirement that every instance carries at
    /// least one label.
    pub fn validate_for_training(&self) -> Result<()> {
        if self.is_empty() {
            return Err(Error::Dataset("training set is empty".into()));
        }
        match (0..self.len()).find(|&n| self.observed(n).next().is_none()) {
            Some(n) => Err(Error::Dataset(format!(
                "instance {n} has no annotations; every training instance needs at least one"
            ))),
            None => Ok(()),
        }
    }

    /// Rows `indices` (in the given order) as a new dataset.
    pub fn subset(&self, indices: &[usize]) -> CrowdDataset {
        let d = self.num_features();
        let mut features = Vec::with_capacity(indices.len() * d);
        let mut annotations = Vec::with_capacity(indices.len() * self.num_annotators);
        for &n in indices {
            features.extend_from_slice(self.feature_row(n));
            annotations.extend_from_slice(self.annotation_row(n));
        }
        CrowdDataset {
            features: Matrix::new(indices.len(), d, features).expect("subset shape"),
            annotations,
            num_annotators: self.num_annotators,
            num_classes: self.num_classes,
            true_labels: self
                .true_labels
                .as_ref()
                .map(|t| indices.iter().map(|&n| t[n]).collect()),
        }
    }
}

fn parse_error(path: &Path, line: usize, column: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        column,
        message: message.into(),
    }
}

/// Non-header, non-blank lines with their 1-based line numbers.
fn data_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = Vec::new();
    let mut in_header = true;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if in_header && line.starts_with('#') {
            continue;
        }
        in_header = false;
        if line.is_empty() {
            continue;
        }
        lines.push((i + 1, line.to_string()));
    }
    Ok(lines)
}

fn parse_cells<T: std::str::FromStr>(path: &Path, line_no: usize, line: &str) -> Result<Vec<T>> {
    line.split(',')
        .enumerate()
        .map(|(j, cell)| {
            cell.trim().parse::<T>().map_err(|_| {
                parse_error(path, line_no, j + 1, format!("cannot parse `{}`", cell.trim()))
            })
        })
        .collect()
}

pub fn read_features(path: &Path) -> Result<Matrix> {
    let lines = data_lines(path)?;
    let mut data = Vec::new();
    let mut cols = None;
    for (line_no, line) in &lines {
        let row: Vec<f64> = parse_cells(path, *line_no, line)?;
        if let Some(j) = row.iter().position(|v| !v.is_finite()) {
            return Err(parse_error(path, *line_no, j + 1, "non-finite feature value"));
        }
        match cols {
            None => cols = Some(row.len()),
            Some(c) if c != row.len() => {
                return Err(parse_error(
                    path,
                    *line_no,
                    row.len().min(c) + 1,
                    format!("expected {c} fields, found {}", row.len()),
                ))
            }
            _ => {}
        }
        data.extend(row);
    }
    Matrix::new(lines.len(), cols.unwrap_or(0), data)
}

/// Reads an annotation file, returning the row-major cells and `R`.
pub fn read_annotations(path: &Path, num_classes: usize) -> Result<(Vec<i32>, usize, usize)> {
    let lines = data_lines(path)?;
    let mut cells = Vec::new();
    let mut width = None;
    for (line_no, line) in &lines {
        let row: Vec<i32> = parse_cells(path, *line_no, line)?;
        if let Some(w) = width {
            if w != row.len() {
                return Err(parse_error(
                    path,
                    *line_no,
                    row.len().min(w) + 1,
                    format!("expected {w} fields, found {}", row.len()),
                ));
            }
        }
        width = Some(row.len());
        for (j, &y) in row.iter().enumerate() {
            if y != MISSING && (y < 0 || y as usize >= num_classes) {
                return Err(parse_error(
                    path,
                    *line_no,
                    j + 1,
                    format!("label {y} outside 0..{num_classes} (and not -1)"),
                ));
            }
        }
        cells.extend(row);
    }
    Ok((cells, lines.len(), width.unwrap_or(0)))
}

pub fn read_labels(path: &Path, num_classes: usize) -> Result<Vec<usize>> {
    data_lines(path)?
        .into_iter()
        .map(|(line_no, line)| {
            let t: usize = line
                .parse()
                .map_err(|_| parse_error(path, line_no, 1, format!("cannot parse `{line}`")))?;
            if t >= num_classes {
                return Err(parse_error(
                    path,
                    line_no,
                    1,
                    format!("label {t} outside 0..{num_classes}"),
                ));
            }
            Ok(t)
        })
        .collect()
}

/// Loads and validates a dataset from the three CSV files.
pub fn load_dataset(
    features_path: &Path,
    annotations_path: &Path,
    labels_path: Option<&Path>,
    num_classes: usize,
    role: Role,
) -> Result<CrowdDataset> {
    if num_classes < 2 {
        return Err(Error::invalid("num_classes", "need at least 2 classes"));
    }
    let features = read_features(features_path)?;
    let (annotations, rows, width) = read_annotations(annotations_path, num_classes)?;
    if rows != features.rows() {
        return Err(Error::shape(
            format!(
                "{} vs {}",
                annotations_path.display(),
                features_path.display()
            ),
            format!("{} annotation rows", features.rows()),
            rows,
        ));
    }
    let true_labels = labels_path
        .map(|p| {
            let labels = read_labels(p, num_classes)?;
            if labels.len() != features.rows() {
                return Err(Error::shape(
                    format!("{}", p.display()),
                    format!("{} label rows", features.rows()),
                    labels.len(),
                ));
            }
            Ok(labels)
        })
        .transpose()?;
    let dataset = CrowdDataset::new(features, annotations, width, num_classes, true_labels)?;
    if role == Role::Train {
        dataset.validate_for_training()?;
    }
    Ok(dataset)
}

/// Formats a real with 17 significant digits.
pub fn fmt_real(v: f64) -> String {
    format!("{v:.16e}")
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn write_features(path: &Path, features: &Matrix) -> Result<()> {
    let mut out = String::new();
    for row in features.iter_rows() {
        let cells: Vec<String> = row.iter().map(|&v| fmt_real(v)).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    write_text(path, &out)
}

pub fn write_annotations(path: &Path, dataset: &CrowdDataset) -> Result<()> {
    let mut out = String::new();
    for n in 0..dataset.len() {
        let cells: Vec<String> = dataset.annotation_row(n).iter().map(i32::to_string).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    write_text(path, &out)
}

pub fn write_labels(path: &Path, labels: &[usize]) -> Result<()> {
    let mut out = String::with_capacity(labels.len() * 2);
    for t in labels {
        out.push_str(&t.to_string());
        out.push('\n');
    }
    write_text(path, &out)
}

/// Writes features, annotations and (when present) true labels.
pub fn save_dataset(
    dataset: &CrowdDataset,
    features_path: &Path,
    annotations_path: &Path,
    labels_path: Option<&Path>,
) -> Result<()> {
    write_features(features_path, dataset.features())?;
    write_annotations(annotations_path, dataset)?;
    if let (Some(path), Some(labels)) = (labels_path, dataset.true_labels()) {
        write_labels(path, labels)?;
    }
    Ok(())
}

/// Random train/test partition. Each side keeps the original row order.
pub fn split(
    dataset: &CrowdDataset,
    test_fraction: f64,
    rng: &mut Rng,
) -> Result<(CrowdDataset, CrowdDataset)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::invalid(
            "test_fraction",
            format!("must lie strictly between 0 and 1, got {test_fraction}"),
        ));
    }
    let n = dataset.len();
    let n_test = (n as f64 * test_fraction).round() as usize;
    if n_test == 0 || n_test == n {
        return Err(Error::invalid(
            "test_fraction",
            format!("{test_fraction} of {n} instances leaves an empty side"),
        ));
    }
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    let (test_idx, train_idx) = order.split_at_mut(n_test);
    test_idx.sort_unstable();
    train_idx.sort_unstable();
    Ok((dataset.subset(train_idx), dataset.subset(test_idx)))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DatasetStats {
    pub n_instances: usize,
    pub n_annotators: usize,
    pub n_classes: usize,
    pub n_annotations: usize,
    pub labels_per_instance_mean: f64,
    pub per_annotator_counts: Vec<usize>,
}

pub fn stats(dataset: &CrowdDataset) -> DatasetStats {
    let mut per_annotator_counts = vec![0; dataset.num_annotators()];
    for n in 0..dataset.len() {
        for (r, _) in dataset.observed(n) {
            per_annotator_counts[r] += 1;
        }
    }
    let n_annotations: usize = per_annotator_counts.iter().sum();
    DatasetStats {
        n_instances: dataset.len(),
        n_annotators: dataset.num_annotators(),
        n_classes: dataset.num_classes(),
        n_annotations,
        labels_per_instance_mean: if dataset.is_empty() {
            0.0
        } else {
            n_annotations as f64 / dataset.len() as f64
        },
        per_annotator_counts,
    }
}

impl fmt::Display for DatasetStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "instances:            {}", self.n_instances)?;
        writeln!(f, "annotators:           {}", self.n_annotators)?;
        writeln!(f, "classes:              {}", self.n_classes)?;
        writeln!(f, "annotations:          {}", self.n_annotations)?;
        writeln!(f, "labels per instance:  {:.3}", self.labels_per_instance_mean)?;
        let counts: Vec<String> = self.per_annotator_counts.iter().map(usize::to_string).collect();
        write!(f, "per-annotator counts: {}", counts.join(" "))
    }
}
