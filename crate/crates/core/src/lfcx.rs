//! Classifier plus per-annotator noise transition model.
//!
//! The classifier is a one-hidden-layer ReLU network ending in a softmax over
//! the `C` true classes. Each annotator `r` owns confusion logits `Π^(r)`
//! (C×C) and an instance impact layer `v^(r)` (C²×H, no bias) that maps the
//! classifier's hidden activation `h(x)` to an additive C×C logit adjustment.
//! Flat impact output index `i·C + j` lands at (true class `i`, observed class
//! `j`). The transition row for true class `i` is the softmax over `j` of
//! `Π_ij + f(x)_ij`, so row `i` is the distribution of the reported label.
//!
//! Everything that produces a likelihood runs in log space.

use std::fmt;

use crate::datamodel::CrowdDataset;
use crate::error::{Error, Result};
use crate::numerics::{dot, log_sum_exp, softmax_in_place, Matrix, Rng};

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierParams {
    /// H×D
    pub hidden_weights: Matrix,
    pub hidden_bias: Vec<f64>,
    /// C×H
    pub out_weights: Matrix,
    pub out_bias: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnnotatorParams {
    /// C×C, unconstrained logits.
    pub confusion_logits: Matrix,
    /// C²×H
    pub impact_weights: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub classifier: ClassifierParams,
    pub annotators: Vec<AnnotatorParams>,
}

/// Gradients and optimizer state share the parameter layout.
pub type Gradients = ModelParams;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dims {
    pub classes: usize,
    pub features: usize,
    pub hidden: usize,
    pub annotators: usize,
}

/// Which annotator blocks are held fixed. Frozen blocks get exactly-zero
/// gradients.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Freeze {
    pub impact: bool,
    pub confusion: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BlockId {
    HiddenWeights,
    HiddenBias,
    OutWeights,
    OutBias,
    Confusion(usize),
    Impact(usize),
}

impl BlockId {
    pub fn is_classifier(self) -> bool {
        matches!(
            self,
            BlockId::HiddenWeights | BlockId::HiddenBias | BlockId::OutWeights | BlockId::OutBias
        )
    }

    pub fn annotator(self) -> Option<usize> {
        match self {
            BlockId::Confusion(r) | BlockId::Impact(r) => Some(r),
            _ => None,
        }
    }

    /// Parses the names produced by `Display`.
    pub fn parse(name: &str) -> Option<BlockId> {
        match name {
            "classifier.hidden_weights" => return Some(BlockId::HiddenWeights),
            "classifier.hidden_bias" => return Some(BlockId::HiddenBias),
            "classifier.out_weights" => return Some(BlockId::OutWeights),
            "classifier.out_bias" => return Some(BlockId::OutBias),
            _ => {}
        }
        let rest = name.strip_prefix("annotator.")?;
        let (idx, field) = rest.split_once('.')?;
        let r = idx.parse().ok()?;
        match field {
            "confusion_logits" => Some(BlockId::Confusion(r)),
            "impact_weights" => Some(BlockId::Impact(r)),
            _ => None,
        }
    }
}

impl fmt::Display for BlockId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BlockId::HiddenWeights => f.write_str("classifier.hidden_weights"),
            BlockId::HiddenBias => f.write_str("classifier.hidden_bias"),
            BlockId::OutWeights => f.write_str("classifier.out_weights"),
            BlockId::OutBias => f.write_str("classifier.out_bias"),
            BlockId::Confusion(r) => write!(f, "annotator.{r}.confusion_logits"),
            BlockId::Impact(r) => write!(f, "annotator.{r}.impact_weights"),
        }
    }
}

/// A named parameter block viewed as a `rows × cols` matrix.
#[derive(Debug)]
pub struct BlockRef<'a> {
    pub id: BlockId,
    pub rows: usize,
    pub cols: usize,
    pub values: &'a [f64],
}

/// Logits `π_ij = ln ε` on the diagonal and `ln((1−ε)/(C−1))` elsewhere.
pub fn confusion_init_logits(classes: usize, epsilon: f64) -> Result<Matrix> {
    if classes < 2 {
        return Err(Error::invalid("classes", "need at least 2 classes"));
    }
    let floor = 1.0 / classes as f64;
    if !(epsilon > floor && epsilon < 1.0) {
        return Err(Error::invalid(
            "epsilon",
            format!("must lie in (1/C, 1) = ({floor}, 1) so the diagonal dominates, got {epsilon}"),
        ));
    }
    let on = epsilon.ln();
    let off = ((1.0 - epsilon) / (classes - 1) as f64).ln();
    let mut m = Matrix::filled(classes, classes, off);
    for i in 0..classes {
        m[(i, i)] = on;
    }
    Ok(m)
}

fn glorot(rng: &mut Rng, rows: usize, cols: usize) -> Matrix {
    let s = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.uniform(-s, s)).collect();
    Matrix::new(rows, cols, data).expect("glorot shape")
}

impl ClassifierParams {
    /// Glorot-uniform weights, zero biases.
    pub fn init(classes: usize, features: usize, hidden: usize, rng: &mut Rng) -> Result<Self> {
        if classes < 2 {
            return Err(Error::invalid("classes", "need at least 2 classes"));
        }
        if features == 0 || hidden == 0 {
            return Err(Error::invalid("dimensions", "features and hidden units must be >= 1"));
        }
        Ok(ClassifierParams {
            hidden_weights: glorot(rng, hidden, features),
            hidden_bias: vec![0.0; hidden],
            out_weights: glorot(rng, classes, hidden),
            out_bias: vec![0.0; classes],
        })
    }

    pub fn zeros(classes: usize, features: usize, hidden: usize) -> Self {
        ClassifierParams {
            hidden_weights: Matrix::zeros(hidden, features),
            hidden_bias: vec![0.0; hidden],
            out_weights: Matrix::zeros(classes, hidden),
            out_bias: vec![0.0; classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.out_weights.rows()
    }

    pub fn num_features(&self) -> usize {
        self.hidden_weights.cols()
    }

    pub fn num_hidden(&self) -> usize {
        self.hidden_weights.rows()
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.num_features() {
            return Err(Error::shape("classifier input", self.num_features(), x.len()));
        }
        Ok(())
    }

    /// ReLU hidden activation `h(x)`.
    pub fn hidden_features(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut z = vec![0.0; self.num_hidden()];
        let mut h = vec![0.0; self.num_hidden()];
        self.hidden_into(x, &mut z, &mut h);
        Ok(h)
    }

    fn hidden_into(&self, x: &[f64], z: &mut [f64], h: &mut [f64]) {
        for (j, (zj, hj)) in z.iter_mut().zip(h.iter_mut()).enumerate() {
            *zj = dot(self.hidden_weights.row(j), x) + self.hidden_bias[j];
            *hj = zj.max(0.0);
        }
    }

    fn logits_into(&self, h: &[f64], out: &mut [f64]) {
        for (c, o) in out.iter_mut().enumerate() {
            *o = dot(self.out_weights.row(c), h) + self.out_bias[c];
        }
    }

    /// Class probabilities `softmax(U·h(x) + b)`.
    pub fn classify(&self, x: &[f64]) -> Result<Vec<f64>> {
        let h = self.hidden_features(x)?;
        let mut p = vec![0.0; self.num_classes()];
        self.logits_into(&h, &mut p);
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("classifier logits".into()));
        }
        softmax_in_place(&mut p);
        Ok(p)
    }

    /// Natural-log class probabilities.
    pub fn log_probs(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let d = Dims {
            classes: self.num_classes(),
            features: self.num_features(),
            hidden: self.num_hidden(),
            annotators: 0,
        };
        let mut s = Scratch::new(d);
        classifier_forward(self, x, &mut s)?;
        Ok(s.log_p)
    }

    /// Most probable class; ties go to the lowest index.
    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        Ok(argmax(&self.classify(x)?))
    }

    pub fn predict_all(&self, features: &Matrix) -> Result<Vec<usize>> {
        features.iter_rows().map(|x| self.predict(x)).collect()
    }

    fn is_finite(&self) -> bool {
        self.hidden_weights.is_finite()
            && self.out_weights.is_finite()
            && self.hidden_bias.iter().all(|v| v.is_finite())
            && self.out_bias.iter().all(|v| v.is_finite())
    }
}

/// First index of the maximum.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

impl AnnotatorParams {
    pub fn new(confusion_logits: Matrix, hidden: usize) -> Self {
        let c = confusion_logits.rows();
        AnnotatorParams {
            confusion_logits,
            impact_weights: Matrix::zeros(c * c, hidden),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.confusion_logits.rows()
    }

    fn impact_is_zero(&self) -> bool {
        self.impact_weights.data().iter().all(|&v| v == 0.0)
    }

    /// `f(x) = v·h` reshaped row-major to C×C.
    pub fn instance_impact(&self, h: &[f64]) -> Result<Matrix> {
        let c = self.num_classes();
        let flat = self.impact_weights.matvec(h)?;
        Matrix::new(c, c, flat)
    }

    /// Row-stochastic transition matrix for hidden activation `h`.
    pub fn noise_transition(&self, h: &[f64]) -> Result<Matrix> {
        let c = self.num_classes();
        if h.len() != self.impact_weights.cols() {
            return Err(Error::shape("impact layer input", self.impact_weights.cols(), h.len()));
        }
        let mut t = Matrix::zeros(c, c);
        transition_logits_into(self, h, !self.impact_is_zero(), t.data_mut());
        if !t.is_finite() {
            return Err(Error::NonFinite("noise transition logits".into()));
        }
        for i in 0..c {
            softmax_in_place(t.row_mut(i));
        }
        Ok(t)
    }

    /// Row-softmax of the confusion logits alone.
    pub fn confusion_probs(&self) -> Matrix {
        let mut m = self.confusion_logits.clone();
        for i in 0..m.rows() {
            softmax_in_place(m.row_mut(i));
        }
        m
    }
}

/// `Π + f(x)` into `out` (C² values, row-major). With `with_impact == false`
/// this is `Π` verbatim, which equals `Π + 0` bit for bit.
#[inline]
fn transition_logits_into(a: &AnnotatorParams, h: &[f64], with_impact: bool, out: &mut [f64]) {
    out.copy_from_slice(a.confusion_logits.data());
    if with_impact {
        for (k, o) in out.iter_mut().enumerate() {
            *o += dot(a.impact_weights.row(k), h);
        }
    }
}

/// Initial model: random classifier, diagonal-dominant confusion logits and
/// all-zero impact layers.
pub fn init_params(
    classes: usize,
    features: usize,
    hidden: usize,
    annotators: usize,
    epsilon: f64,
    rng: &mut Rng,
) -> Result<ModelParams> {
    let logits = confusion_init_logits(classes, epsilon)?;
    if annotators == 0 {
        return Err(Error::invalid("annotators", "need at least one annotator"));
    }
    Ok(ModelParams {
        classifier: ClassifierParams::init(classes, features, hidden, rng)?,
        annotators: (0..annotators)
            .map(|_| AnnotatorParams::new(logits.clone(), hidden))
            .collect(),
    })
}

impl ModelParams {
    pub fn dims(&self) -> Dims {
        Dims {
            classes: self.classifier.num_classes(),
            features: self.classifier.num_features(),
            hidden: self.classifier.num_hidden(),
            annotators: self.annotators.len(),
        }
    }

    /// Same layout, every value zero.
    pub fn zeros_like(&self) -> ModelParams {
        let d = self.dims();
        ModelParams {
            classifier: ClassifierParams::zeros(d.classes, d.features, d.hidden),
            annotators: (0..d.annotators)
                .map(|_| AnnotatorParams::new(Matrix::zeros(d.classes, d.classes), d.hidden))
                .collect(),
        }
    }

    /// Checks that every block has the shape implied by the classifier and
    /// that all values are finite.
    pub fn validate(&self) -> Result<()> {
        let d = self.dims();
        let cl = &self.classifier;
        if d.classes < 2 || d.hidden == 0 || d.features == 0 {
            return Err(Error::invalid("model", "need C >= 2, H >= 1, D >= 1"));
        }
        if cl.hidden_bias.len() != d.hidden {
            return Err(Error::shape("classifier.hidden_bias", d.hidden, cl.hidden_bias.len()));
        }
        if cl.out_weights.cols() != d.hidden {
            return Err(Error::shape("classifier.out_weights cols", d.hidden, cl.out_weights.cols()));
        }
        if cl.out_bias.len() != d.classes {
            return Err(Error::shape("classifier.out_bias", d.classes, cl.out_bias.len()));
        }
        for (r, a) in self.annotators.iter().enumerate() {
            if a.confusion_logits.shape() != (d.classes, d.classes) {
                return Err(Error::shape(
                    BlockId::Confusion(r).to_string(),
                    format!("{0}x{0}", d.classes),
                    format!("{:?}", a.confusion_logits.shape()),
                ));
            }
            if a.impact_weights.shape() != (d.classes * d.classes, d.hidden) {
                return Err(Error::shape(
                    BlockId::Impact(r).to_string(),
                    format!("{}x{}", d.classes * d.classes, d.hidden),
                    format!("{:?}", a.impact_weights.shape()),
                ));
            }
        }
        for b in self.blocks() {
            if b.values.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(b.id.to_string()));
            }
        }
        Ok(())
    }

    pub fn blocks(&self) -> Vec<BlockRef<'_>> {
        let cl = &self.classifier;
        let mut out = vec![
            BlockRef {
                id: BlockId::HiddenWeights,
                rows: cl.hidden_weights.rows(),
                cols: cl.hidden_weights.cols(),
                values: cl.hidden_weights.data(),
            },
            BlockRef {
                id: BlockId::HiddenBias,
                rows: 1,
                cols: cl.hidden_bias.len(),
                values: &cl.hidden_bias,
            },
            BlockRef {
                id: BlockId::OutWeights,
                rows: cl.out_weights.rows(),
                cols: cl.out_weights.cols(),
                values: cl.out_weights.data(),
            },
            BlockRef {
                id: BlockId::OutBias,
                rows: 1,
                cols: cl.out_bias.len(),
                values: &cl.out_bias,
            },
        ];
        for (r, a) in self.annotators.iter().enumerate() {
            out.push(BlockRef {
                id: BlockId::Confusion(r),
                rows: a.confusion_logits.rows(),
                cols: a.confusion_logits.cols(),
                values: a.confusion_logits.data(),
            });
            out.push(BlockRef {
                id: BlockId::Impact(r),
                rows: a.impact_weights.rows(),
                cols: a.impact_weights.cols(),
                values: a.impact_weights.data(),
            });
        }
        out
    }

    pub fn blocks_mut(&mut self) -> Vec<(BlockId, &mut [f64])> {
        let cl = &mut self.classifier;
        let mut out: Vec<(BlockId, &mut [f64])> = vec![
            (BlockId::HiddenWeights, cl.hidden_weights.data_mut()),
            (BlockId::HiddenBias, &mut cl.hidden_bias),
            (BlockId::OutWeights, cl.out_weights.data_mut()),
            (BlockId::OutBias, &mut cl.out_bias),
        ];
        for (r, a) in self.annotators.iter_mut().enumerate() {
            out.push((BlockId::Confusion(r), a.confusion_logits.data_mut()));
            out.push((BlockId::Impact(r), a.impact_weights.data_mut()));
        }
        out
    }

    pub fn block(&self, id: BlockId) -> Option<&[f64]> {
        self.blocks().into_iter().find(|b| b.id == id).map(|b| b.values)
    }

    /// All parameters concatenated in block order.
    pub fn flatten(&self) -> Vec<f64> {
        self.blocks().iter().flat_map(|b| b.values.iter().copied()).collect()
    }

    /// Copy of `self` with values taken from `flat` (same order as `flatten`).
    pub fn with_flat(&self, flat: &[f64]) -> Result<ModelParams> {
        let total: usize = self.blocks().iter().map(|b| b.values.len()).sum();
        if flat.len() != total {
            return Err(Error::shape("ModelParams::with_flat", total, flat.len()));
        }
        let mut out = self.clone();
        let mut offset = 0;
        for (_, values) in out.blocks_mut() {
            let n = values.len();
            values.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(out)
    }

    /// `p(y^(r) | x) = classify(x) · T^(r)(x)`.
    pub fn annotator_predict(&self, x: &[f64], r: usize) -> Result<Vec<f64>> {
        let a = self.annotators.get(r).ok_or_else(|| {
            Error::invalid("annotator", format!("{r} out of range 0..{}", self.annotators.len()))
        })?;
        let h = self.classifier.hidden_features(x)?;
        let p = self.classifier.classify(x)?;
        a.noise_transition(&h)?.vecmat(&p)
    }
}

/// Per-instance scratch buffers for the forward/backward passes.
struct Scratch {
    z: Vec<f64>,
    h: Vec<f64>,
    log_p: Vec<f64>,
    p: Vec<f64>,
    logits: Vec<f64>,
    row_lse: Vec<f64>,
    joint: Vec<f64>,
    d_logits: Vec<f64>,
    d_out: Vec<f64>,
    d_h: Vec<f64>,
}

impl Scratch {
    fn new(d: Dims) -> Self {
        Scratch {
            z: vec![0.0; d.hidden],
            h: vec![0.0; d.hidden],
            log_p: vec![0.0; d.classes],
            p: vec![0.0; d.classes],
            logits: vec![0.0; d.classes * d.classes],
            row_lse: vec![0.0; d.classes],
            joint: vec![0.0; d.classes],
            d_logits: vec![0.0; d.classes * d.classes],
            d_out: vec![0.0; d.classes],
            d_h: vec![0.0; d.hidden],
        }
    }
}

/// Log-sum-exp without argument checks; callers ensure finite input.
pub(crate) fn lse(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Classifier forward pass into `s.z`, `s.h`, `s.log_p`, `s.p`.
fn classifier_forward(cl: &ClassifierParams, x: &[f64], s: &mut Scratch) -> Result<()> {
    cl.hidden_into(x, &mut s.z, &mut s.h);
    cl.logits_into(&s.h, &mut s.log_p);
    if s.log_p.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("classifier logits".into()));
    }
    let norm = lse(&s.log_p);
    for (lp, p) in s.log_p.iter_mut().zip(s.p.iter_mut()) {
        *lp -= norm;
        *p = lp.exp();
    }
    Ok(())
}

/// `log p(y | x)` for one observed label, leaving the transition logits in
/// `s.logits`, their row normalizers in `s.row_lse` and `log p(t) + log T_ty`
/// in `s.joint`.
fn log_marginal(a: &AnnotatorParams, y: usize, with_impact: bool, s: &mut Scratch) -> Result<f64> {
    let c = s.log_p.len();
    transition_logits_into(a, &s.h, with_impact, &mut s.logits);
    for t in 0..c {
        let row = &s.logits[t * c..(t + 1) * c];
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("noise transition logits".into()));
        }
        s.row_lse[t] = lse(row);
        s.joint[t] = s.log_p[t] + row[y] - s.row_lse[t];
    }
    Ok(lse(&s.joint))
}

/// `false` for annotators whose impact layer is identically zero; their
/// transition logits are then the confusion logits themselves.
fn impact_flags(params: &ModelParams) -> Vec<bool> {
    params.annotators.iter().map(|a| !a.impact_is_zero()).collect()
}

fn check_dataset(params: &ModelParams, data: &CrowdDataset) -> Result<()> {
    params.validate()?;
    let d = params.dims();
    if data.num_features() != d.features {
        return Err(Error::shape("dataset features", d.features, data.num_features()));
    }
    if data.num_annotators() != d.annotators {
        return Err(Error::shape("dataset annotators", d.annotators, data.num_annotators()));
    }
    if data.num_classes() != d.classes {
        return Err(Error::shape("dataset classes", d.classes, data.num_classes()));
    }
    Ok(())
}

/// Negative log-likelihood `−Σ_n Σ_{r observed} log p(y_n^(r) | x_n)` over
/// the whole dataset. Missing labels contribute nothing.
pub fn nll(params: &ModelParams, data: &CrowdDataset) -> Result<f64> {
    let indices: Vec<usize> = (0..data.len()).collect();
    nll_subset(params, data, &indices)
}

pub fn nll_subset(params: &ModelParams, data: &CrowdDataset, indices: &[usize]) -> Result<f64> {
    check_dataset(params, data)?;
    let with_impact = impact_flags(params);
    let mut s = Scratch::new(params.dims());
    let mut total = 0.0;
    for &n in indices {
        if data.observed(n).next().is_none() {
            continue;
        }
        classifier_forward(&params.classifier, data.feature_row(n), &mut s)?;
        for (r, y) in data.observed(n) {
            total -= log_marginal(&params.annotators[r], y, with_impact[r], &mut s)?;
        }
    }
    if !total.is_finite() {
        return Err(Error::NonFinite("negative log-likelihood".into()));
    }
    Ok(total)
}

/// Analytic gradient of [`nll_subset`] over `indices`, plus the loss value.
///
/// Per observed label `y` with posterior `w_t = p(t | x, y)`:
/// `∂L/∂(transition logit)_tk = w_t (T_tk − δ_ky)` and
/// `∂L/∂(class logit)_c = p_c − w_c`.
pub fn gradients(
    params: &ModelParams,
    data: &CrowdDataset,
    indices: &[usize],
    freeze: Freeze,
) -> Result<(f64, Gradients)> {
    if indices.is_empty() {
        return Err(Error::invalid("batch", "empty batch"));
    }
    check_dataset(params, data)?;
    let d = params.dims();
    let (c, hdim) = (d.classes, d.hidden);
    let with_impact = impact_flags(params);
    let mut grads = params.zeros_like();
    let mut s = Scratch::new(d);
    let mut loss = 0.0;

    for &n in indices {
        if data.observed(n).next().is_none() {
            continue;
        }
        let x = data.feature_row(n);
        classifier_forward(&params.classifier, x, &mut s)?;
        s.d_out.iter_mut().for_each(|v| *v = 0.0);
        s.d_h.iter_mut().for_each(|v| *v = 0.0);

        for (r, y) in data.observed(n) {
            let a = &params.annotators[r];
            let log_marg = log_marginal(a, y, with_impact[r], &mut s)?;
            loss -= log_marg;
            for t in 0..c {
                let w = (s.joint[t] - log_marg).exp();
                s.d_out[t] += s.p[t] - w;
                for k in 0..c {
                    let trans = (s.logits[t * c + k] - s.row_lse[t]).exp();
                    let delta = if k == y { 1.0 } else { 0.0 };
                    s.d_logits[t * c + k] = w * (trans - delta);
                }
            }
            let g = &mut grads.annotators[r];
            if !freeze.confusion {
                for (gv, dv) in g.confusion_logits.data_mut().iter_mut().zip(&s.d_logits) {
                    *gv += dv;
                }
            }
            if !freeze.impact {
                for (k, &dv) in s.d_logits.iter().enumerate() {
                    for (gv, hv) in g.impact_weights.row_mut(k).iter_mut().zip(&s.h) {
                        *gv += dv * hv;
                    }
                }
            }
            if with_impact[r] {
                for (k, &dv) in s.d_logits.iter().enumerate() {
                    for (dh, vv) in s.d_h.iter_mut().zip(a.impact_weights.row(k)) {
                        *dh += dv * vv;
                    }
                }
            }
        }

        let cl = &params.classifier;
        let gc = &mut grads.classifier;
        for cls in 0..c {
            let dv = s.d_out[cls];
            gc.out_bias[cls] += dv;
            for ((gu, hv), (dh, uv)) in gc
                .out_weights
                .row_mut(cls)
                .iter_mut()
                .zip(&s.h)
                .zip(s.d_h.iter_mut().zip(cl.out_weights.row(cls)))
            {
                *gu += dv * hv;
                *dh += dv * uv;
            }
        }
        for j in 0..hdim {
            if s.z[j] <= 0.0 {
                continue;
            }
            let dz = s.d_h[j];
            gc.hidden_bias[j] += dz;
            for (gw, xv) in gc.hidden_weights.row_mut(j).iter_mut().zip(x) {
                *gw += dz * xv;
            }
        }
    }

    for b in grads.blocks() {
        if b.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient block {}", b.id)));
        }
    }
    Ok((loss, grads))
}

/// Summed cross-entropy of the classifier against target distributions (one
/// row per instance) over `indices`, with its gradient.
pub fn cross_entropy_gradients(
    cl: &ClassifierParams,
    features: &Matrix,
    targets: &Matrix,
    indices: &[usize],
) -> Result<(f64, ClassifierParams)> {
    if indices.is_empty() {
        return Err(Error::invalid("batch", "empty batch"));
    }
    check_targets(cl, features, targets)?;
    let d = Dims {
        classes: cl.num_classes(),
        features: cl.num_features(),
        hidden: cl.num_hidden(),
        annotators: 0,
    };
    let mut s = Scratch::new(d);
    let mut g = ClassifierParams::zeros(d.classes, d.features, d.hidden);
    let mut loss = 0.0;
    for &n in indices {
        let x = features.row(n);
        classifier_forward(cl, x, &mut s)?;
        let target = targets.row(n);
        s.d_h.iter_mut().for_each(|v| *v = 0.0);
        for cls in 0..d.classes {
            if target[cls] > 0.0 {
                loss -= target[cls] * s.log_p[cls];
            }
            let dv = s.p[cls] - target[cls];
            g.out_bias[cls] += dv;
            for ((gu, hv), (dh, uv)) in g
                .out_weights
                .row_mut(cls)
                .iter_mut()
                .zip(&s.h)
                .zip(s.d_h.iter_mut().zip(cl.out_weights.row(cls)))
            {
                *gu += dv * hv;
                *dh += dv * uv;
            }
        }
        for j in 0..d.hidden {
            if s.z[j] <= 0.0 {
                continue;
            }
            let dz = s.d_h[j];
            g.hidden_bias[j] += dz;
            for (gw, xv) in g.hidden_weights.row_mut(j).iter_mut().zip(x) {
                *gw += dz * xv;
            }
        }
    }
    if !loss.is_finite() || !g.is_finite() {
        return Err(Error::NonFinite("cross-entropy gradient".into()));
    }
    Ok((loss, g))
}

/// Total cross-entropy over all rows.
pub fn cross_entropy(cl: &ClassifierParams, features: &Matrix, targets: &Matrix) -> Result<f64> {
    check_targets(cl, features, targets)?;
    let mut total = 0.0;
    for (x, target) in features.iter_rows().zip(targets.iter_rows()) {
        let h = cl.hidden_features(x)?;
        let mut logits = vec![0.0; cl.num_classes()];
        cl.logits_into(&h, &mut logits);
        let norm = log_sum_exp(&logits)?;
        total -= target
            .iter()
            .zip(&logits)
            .filter(|(t, _)| **t > 0.0)
            .map(|(t, l)| t * (l - norm))
            .sum::<f64>();
    }
    if !total.is_finite() {
        return Err(Error::NonFinite("cross-entropy".into()));
    }
    Ok(total)
}

fn check_targets(cl: &ClassifierParams, features: &Matrix, targets: &Matrix) -> Result<()> {
    if features.cols() != cl.num_features() {
        return Err(Error::shape("features", cl.num_features(), features.cols()));
    }
    if targets.shape() != (features.rows(), cl.num_classes()) {
        return Err(Error::shape(
            "targets",
            format!("{}x{}", features.rows(), cl.num_classes()),
            format!("{:?}", targets.shape()),
        ));
    }
    Ok(())
}
