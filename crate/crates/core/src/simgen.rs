//! Synthetic crowdsourcing data.
//!
//! Instances are Gaussian blobs, one per class. Simulated annotators corrupt
//! the true label in one of three ways:
//!
//! * `Spammer`: keeps the true label with a fixed probability and otherwise
//!   picks another class uniformly.
//! * `Confused`: draws the reported label from a fixed class-level confusion
//!   row.
//! * `FeatureDependent`: the confusion row depends on where the instance
//!   falls in feature space, via axis-aligned threshold rules evaluated in
//!   order (first match wins) with a default matrix otherwise.

use serde::{Deserialize, Serialize};

use crate::datamodel::{CrowdDataset, MISSING};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};

const STREAM_INSTANCES: u64 = 10;
const STREAM_ANNOTATIONS: u64 = 11;

/// Half-space `x[feature] > threshold` (or `<=` when `above` is false)
/// mapped to a transition matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionRule {
    pub feature: usize,
    pub threshold: f64,
    pub above: bool,
    pub matrix: Matrix,
}

impl RegionRule {
    pub fn matches(&self, x: &[f64]) -> bool {
        (x[self.feature] > self.threshold) == self.above
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum AnnotatorProfile {
    Spammer { accuracy: f64, classes: usize },
    Confused { confusion: Matrix },
    FeatureDependent { rules: Vec<RegionRule>, default: Matrix },
}

/// Row-stochastic matrix with `diagonal` on the diagonal and the rest spread
/// evenly.
pub fn symmetric_confusion(classes: usize, diagonal: f64) -> Matrix {
    let off = (1.0 - diagonal) / (classes - 1) as f64;
    let mut m = Matrix::filled(classes, classes, off);
    for i in 0..classes {
        m[(i, i)] = diagonal;
    }
    m
}

fn check_stochastic(m: &Matrix, classes: usize, what: &str) -> Result<()> {
    if m.shape() != (classes, classes) {
        return Err(Error::shape(what, format!("{classes}x{classes}"), format!("{:?}", m.shape())));
    }
    if m.data().iter().any(|&v| !(v >= 0.0 && v.is_finite())) || m.max_row_sum_error() > 1e-12 {
        return Err(Error::invalid(what, "rows must be nonnegative and sum to 1"));
    }
    Ok(())
}

impl AnnotatorProfile {
    pub fn validate(&self, classes: usize, features: usize) -> Result<()> {
        match self {
            AnnotatorProfile::Spammer { accuracy, classes: c } => {
                if *c != classes {
                    return Err(Error::shape("spammer classes", classes, c));
                }
                if !(*accuracy > 0.0 && *accuracy <= 1.0) {
                    return Err(Error::invalid("accuracy", "must lie in (0, 1]"));
                }
                Ok(())
            }
            AnnotatorProfile::Confused { confusion } => {
                check_stochastic(confusion, classes, "confusion")
            }
            AnnotatorProfile::FeatureDependent { rules, default } => {
                check_stochastic(default, classes, "default matrix")?;
                for (i, rule) in rules.iter().enumerate() {
                    if rule.feature >= features {
                        return Err(Error::invalid(
                            format!("rules[{i}].feature"),
                            format!("{} outside 0..{features}", rule.feature),
                        ));
                    }
                    check_stochastic(&rule.matrix, classes, &format!("rules[{i}].matrix"))?;
                }
                Ok(())
            }
        }
    }

    /// Transition matrix that applies to an instance with features `x`.
    pub fn matrix_for(&self, x: &[f64]) -> std::borrow::Cow<'_, Matrix> {
        use std::borrow::Cow;
        match self {
            AnnotatorProfile::Spammer { accuracy, classes } => {
                Cow::Owned(symmetric_confusion(*classes, *accuracy))
            }
            AnnotatorProfile::Confused { confusion } => Cow::Borrowed(confusion),
            AnnotatorProfile::FeatureDependent { rules, default } => Cow::Borrowed(
                rules
                    .iter()
                    .find(|r| r.matches(x))
                    .map_or(default, |r| &r.matrix),
            ),
        }
    }

    /// Class-level confusion implied by this profile over the given
    /// instances: row `t` averages the applicable rows of all class-`t`
    /// instances. Classes without instances fall back to the profile's
    /// instance-free matrix.
    pub fn marginal_confusion(&self, features: &Matrix, labels: &[usize], classes: usize) -> Matrix {
        if let AnnotatorProfile::FeatureDependent { default, .. } = self {
            let mut sum = Matrix::zeros(classes, classes);
            let mut counts = vec![0usize; classes];
            for (x, &t) in features.iter_rows().zip(labels) {
                let m = self.matrix_for(x);
                for (s, &v) in sum.row_mut(t).iter_mut().zip(m.row(t)) {
                    *s += v;
                }
                counts[t] += 1;
            }
            for t in 0..classes {
                if counts[t] == 0 {
                    sum.row_mut(t).copy_from_slice(default.row(t));
                } else {
                    sum.row_mut(t).iter_mut().for_each(|v| *v /= counts[t] as f64);
                }
            }
            sum
        } else {
            self.matrix_for(features.row(0)).into_owned()
        }
    }
}

/// Serialized form of a half-space rule. Either `matrix` gives the full
/// transition matrix, or `flips` rewrite rows of the profile's default:
/// a flip `from → to` with probability `p` makes row `from` equal to
/// `p·e_to + (1 − p)·default_row(from)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuleSpec {
    pub feature: usize,
    pub threshold: f64,
    #[serde(default = "default_true")]
    pub above: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matrix: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flips: Vec<FlipSpec>,
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlipSpec {
    pub from: usize,
    pub to: usize,
    pub prob: f64,
}

/// Serialized annotator profile. Matrices are given either in full
/// (`matrix`) or as a symmetric `diagonal`; with neither, the identity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProfileSpec {
    Spammer {
        accuracy: f64,
    },
    Confused {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        diagonal: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        matrix: Option<Vec<Vec<f64>>>,
    },
    FeatureDependent {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        diagonal: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        matrix: Option<Vec<Vec<f64>>>,
        rules: Vec<RuleSpec>,
    },
}

fn resolve_matrix(
    diagonal: Option<f64>,
    matrix: &Option<Vec<Vec<f64>>>,
    classes: usize,
    what: &str,
) -> Result<Matrix> {
    let m = match (diagonal, matrix) {
        (Some(_), Some(_)) => {
            return Err(Error::invalid(what, "give either `diagonal` or `matrix`, not both"))
        }
        (Some(d), None) => {
            if !(0.0..=1.0).contains(&d) {
                return Err(Error::invalid(what, format!("diagonal {d} outside [0, 1]")));
            }
            symmetric_confusion(classes, d)
        }
        (None, Some(rows)) => Matrix::from_rows(rows)?,
        (None, None) => Matrix::identity(classes),
    };
    check_stochastic(&m, classes, what)?;
    Ok(m)
}

impl ProfileSpec {
    pub fn confused(diagonal: f64) -> Self {
        ProfileSpec::Confused {
            diagonal: Some(diagonal),
            matrix: None,
        }
    }

    pub fn resolve(&self, classes: usize) -> Result<AnnotatorProfile> {
        match self {
            ProfileSpec::Spammer { accuracy } => Ok(AnnotatorProfile::Spammer {
                accuracy: *accuracy,
                classes,
            }),
            ProfileSpec::Confused { diagonal, matrix } => Ok(AnnotatorProfile::Confused {
                confusion: resolve_matrix(*diagonal, matrix, classes, "confusion")?,
            }),
            ProfileSpec::FeatureDependent {
                diagonal,
                matrix,
                rules,
            } => {
                let default = resolve_matrix(*diagonal, matrix, classes, "default matrix")?;
                let rules = rules
                    .iter()
                    .enumerate()
                    .map(|(i, spec)| {
                        let what = format!("rules[{i}]");
                        let matrix = match (&spec.matrix, spec.flips.is_empty()) {
                            (Some(_), false) => {
                                return Err(Error::invalid(what, "give either `matrix` or `flips`"))
                            }
                            (Some(rows), true) => resolve_matrix(None, &Some(rows.clone()), classes, &what)?,
                            (None, _) => {
                                let mut m = default.clone();
                                for f in &spec.flips {
                                    if f.from >= classes || f.to >= classes {
                                        return Err(Error::invalid(&what, "flip class out of range"));
                                    }
                                    if !(0.0..=1.0).contains(&f.prob) {
                                        return Err(Error::invalid(&what, "flip prob outside [0, 1]"));
                                    }
                                    let row = m.row_mut(f.from);
                                    row.iter_mut().for_each(|v| *v *= 1.0 - f.prob);
                                    row[f.to] += f.prob;
                                }
                                m
                            }
                        };
                        Ok(RegionRule {
                            feature: spec.feature,
                            threshold: spec.threshold,
                            above: spec.above,
                            matrix,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(AnnotatorProfile::FeatureDependent { rules, default })
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub instances: usize,
    pub features: usize,
    pub classes: usize,
    pub annotators: usize,
    /// Distance between any two class means.
    pub class_separation: f64,
    /// Mean number of annotators per instance.
    pub labels_per_instance: f64,
    pub profiles: Vec<ProfileSpec>,
    pub seed: u64,
}

impl Default for GenConfig {
    /// The class-level benchmark: five annotators with 0.7 diagonal
    /// confusions, 2.5 labels per instance.
    fn default() -> Self {
        GenConfig {
            instances: 2000,
            features: 10,
            classes: 4,
            annotators: 5,
            class_separation: 4.0,
            labels_per_instance: 2.5,
            profiles: vec![ProfileSpec::confused(0.7); 5],
            seed: 0,
        }
    }
}

impl GenConfig {
    /// The default scenario with the last two annotators replaced by
    /// feature-dependent ones. They are exact outside the region
    /// `x[0] > 1`, the half-space leaning toward the class-0 mean. Inside it
    /// they report class 0 with probability 0.8 whatever the true class.
    pub fn feature_dependent_scenario() -> Self {
        let base = GenConfig::default();
        let flips = (1..base.classes)
            .map(|c| FlipSpec { from: c, to: 0, prob: 0.8 })
            .collect();
        let fd = ProfileSpec::FeatureDependent {
            diagonal: None,
            matrix: None,
            rules: vec![RuleSpec {
                feature: 0,
                threshold: 1.0,
                above: true,
                matrix: None,
                flips,
            }],
        };
        let mut profiles = vec![ProfileSpec::confused(0.7); 3];
        profiles.extend([fd.clone(), fd]);
        GenConfig { profiles, ..base }
    }

    pub fn validate(&self) -> Result<Vec<AnnotatorProfile>> {
        if self.features < 1 {
            return Err(Error::invalid("features", "must be >= 1"));
        }
        if self.classes < 2 {
            return Err(Error::invalid("classes", "must be >= 2"));
        }
        if self.instances == 0 {
            return Err(Error::invalid("instances", "must be >= 1"));
        }
        if self.annotators == 0 {
            return Err(Error::invalid("annotators", "must be >= 1"));
        }
        if !(self.labels_per_instance > 0.0 && self.labels_per_instance <= self.annotators as f64) {
            return Err(Error::invalid(
                "labels_per_instance",
                format!(
                    "must lie in (0, annotators = {}], got {}",
                    self.annotators, self.labels_per_instance
                ),
            ));
        }
        if !(self.class_separation >= 0.0 && self.class_separation.is_finite()) {
            return Err(Error::invalid("class_separation", "must be >= 0"));
        }
        if self.profiles.len() != self.annotators {
            return Err(Error::invalid(
                "profiles",
                format!("{} profiles for {} annotators", self.profiles.len(), self.annotators),
            ));
        }
        let profiles = self
            .profiles
            .iter()
            .enumerate()
            .map(|(r, spec)| {
                let p = spec.resolve(self.classes).map_err(|e| prefix_field(e, r))?;
                p.validate(self.classes, self.features).map_err(|e| prefix_field(e, r))?;
                Ok(p)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(profiles)
    }
}

fn prefix_field(e: Error, r: usize) -> Error {
    match e {
        Error::InvalidArgument { name, reason } => Error::InvalidArgument {
            name: format!("profiles[{r}].{name}"),
            reason,
        },
        other => Error::invalid(format!("profiles[{r}]"), other.to_string()),
    }
}

/// Class means: scaled unit vectors when `D ≥ C` (every pair exactly
/// `class_separation` apart), otherwise evenly spaced along the first axis.
pub fn class_means(classes: usize, features: usize, separation: f64) -> Matrix {
    let mut means = Matrix::zeros(classes, features);
    for c in 0..classes {
        if features >= classes {
            means[(c, c)] = separation / std::f64::consts::SQRT_2;
        } else {
            means[(c, 0)] = c as f64 * separation;
        }
    }
    means
}

/// Features and balanced, shuffled true labels.
pub fn generate_instances(config: &GenConfig, rng: &mut Rng) -> Result<(Matrix, Vec<usize>)> {
    if config.features < 1 {
        return Err(Error::invalid("features", "must be >= 1"));
    }
    if config.classes < 2 {
        return Err(Error::invalid("classes", "must be >= 2"));
    }
    let (n, d) = (config.instances, config.features);
    let mut labels: Vec<usize> = (0..n).map(|i| i % config.classes).collect();
    rng.shuffle(&mut labels);
    let means = class_means(config.classes, d, config.class_separation);
    let mut data = Vec::with_capacity(n * d);
    for &t in &labels {
        for &m in means.row(t) {
            data.push(m + rng.normal());
        }
    }
    Ok((Matrix::new(n, d, data)?, labels))
}

/// Number of annotators for instance `n`: consecutive differences of
/// `floor(n · labels_per_instance)`, so every instance gets the floor or the
/// ceiling and any prefix totals `floor(len · labels_per_instance)`.
pub fn labels_for_instance(n: usize, labels_per_instance: f64) -> usize {
    let upto = |k: usize| (k as f64 * labels_per_instance).floor() as usize;
    upto(n + 1) - upto(n)
}

/// Simulates annotations, returning N×R cells with [`MISSING`] for
/// annotators that did not label an instance.
pub fn annotate(
    true_labels: &[usize],
    features: &Matrix,
    profiles: &[AnnotatorProfile],
    labels_per_instance: f64,
    rng: &mut Rng,
) -> Result<Vec<i32>> {
    let r = profiles.len();
    if !(labels_per_instance > 0.0 && labels_per_instance <= r as f64) {
        return Err(Error::invalid(
            "labels_per_instance",
            format!("must lie in (0, {r}], got {labels_per_instance}"),
        ));
    }
    if features.rows() != true_labels.len() {
        return Err(Error::shape("features vs labels", true_labels.len(), features.rows()));
    }
    let mut cells = vec![MISSING; true_labels.len() * r];
    for (n, (&t, x)) in true_labels.iter().zip(features.iter_rows()).enumerate() {
        let k = labels_for_instance(n, labels_per_instance);
        for a in rng.sample_indices(r, k) {
            let m = profiles[a].matrix_for(x);
            cells[n * r + a] = rng.categorical(m.row(t)) as i32;
        }
    }
    Ok(cells)
}

/// Row-normalized (true class → reported class) counts per annotator. Rows
/// with no observations are uniform.
pub fn empirical_confusions(data: &CrowdDataset, true_labels: &[usize]) -> Result<Vec<Matrix>> {
    if true_labels.len() != data.len() {
        return Err(Error::shape("true labels", data.len(), true_labels.len()));
    }
    let c = data.num_classes();
    let mut out = vec![Matrix::zeros(c, c); data.num_annotators()];
    for (n, &t) in true_labels.iter().enumerate() {
        for (r, y) in data.observed(n) {
            out[r][(t, y)] += 1.0;
        }
    }
    for m in out.iter_mut() {
        for t in 0..c {
            let row = m.row_mut(t);
            let total: f64 = row.iter().sum();
            if total == 0.0 {
                row.iter_mut().for_each(|v| *v = 1.0 / c as f64);
            } else {
                row.iter_mut().for_each(|v| *v /= total);
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct GeneratedData {
    /// Carries the true labels.
    pub dataset: CrowdDataset,
    pub profiles: Vec<AnnotatorProfile>,
}

impl GeneratedData {
    /// Class-level confusion of each generator profile over `subset`.
    pub fn reference_confusions(&self, subset: &CrowdDataset) -> Vec<Matrix> {
        let labels = subset.true_labels().expect("generated data has labels");
        self.profiles
            .iter()
            .map(|p| p.marginal_confusion(subset.features(), labels, subset.num_classes()))
            .collect()
    }
}

/// Full scenario from `config.seed`.
pub fn generate(config: &GenConfig) -> Result<GeneratedData> {
    let profiles = config.validate()?;
    let (features, labels) =
        generate_instances(config, &mut Rng::with_stream(config.seed, STREAM_INSTANCES))?;
    let cells = annotate(
        &labels,
        &features,
        &profiles,
        config.labels_per_instance,
        &mut Rng::with_stream(config.seed, STREAM_ANNOTATIONS),
    )?;
    let dataset = CrowdDataset::new(features, cells, config.annotators, config.classes, Some(labels))?;
    Ok(GeneratedData { dataset, profiles })
}
