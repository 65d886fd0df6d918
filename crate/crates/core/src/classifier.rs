//! Per-source cosine classifiers: pooled supervised loss, prototype weight refresh from
//! support sets, classifier-wise mutual information, and the two inference rules.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::bank::MemoryBank;
use crate::error::{MsfanError, Result};
use crate::numerics::{
    argmax, entropy_unchecked, l2_normalize, softmax_backward, softmax_unchecked, Matrix, Param,
};
use crate::support::SupportSet;

/// `p(x) = softmax(Wᵀf / T)` with one weight column per class.
#[derive(Debug, Clone, PartialEq)]
pub struct CosineClassifier {
    /// `d × n_c`.
    pub weights: Param,
    pub temperature: f64,
}

impl CosineClassifier {
    /// Random unit-norm columns.
    pub fn new<R: Rng + ?Sized>(feature_dim: usize, num_classes: usize, temperature: f64, rng: &mut R) -> Self {
        let mut w = Matrix::zeros(feature_dim, num_classes);
        for c in 0..num_classes {
            let g: Vec<f64> = (0..feature_dim).map(|_| rng.sample(StandardNormal)).collect();
            w.set_column(c, &l2_normalize(&g).expect("a Gaussian draw is nonzero"));
        }
        CosineClassifier {
            weights: Param::new(w),
            temperature,
        }
    }

    pub fn from_weights(weights: Matrix, temperature: f64) -> Result<Self> {
        if !(temperature > 0.0) {
            return Err(MsfanError::Config(format!("temperature {temperature} must be positive")));
        }
        Ok(CosineClassifier {
            weights: Param::new(weights),
            temperature,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.weights.value.cols()
    }

    pub fn feature_dim(&self) -> usize {
        self.weights.value.rows()
    }

    /// Raw similarities `Wᵀf` (cosines when columns are unit-norm).
    pub fn similarities(&self, feature: &[f64]) -> Vec<f64> {
        let w = &self.weights.value;
        let mut out = vec![0.0; w.cols()];
        for (r, f) in feature.iter().enumerate() {
            for (o, wv) in out.iter_mut().zip(w.row(r)) {
                *o += wv * f;
            }
        }
        out
    }

    pub fn classify(&self, feature: &[f64]) -> Vec<f64> {
        let logits: Vec<f64> = self
            .similarities(feature)
            .into_iter()
            .map(|s| s / self.temperature)
            .collect();
        softmax_unchecked(&logits)
    }

    /// Probability rows for a feature matrix.
    pub fn classify_batch(&self, features: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(features.rows(), self.num_classes());
        for (i, f) in features.iter_rows().enumerate() {
            out.row_mut(i).copy_from_slice(&self.classify(f));
        }
        out
    }

    /// Backpropagates `∂L/∂logits` for one feature, scaled by `scale`.
    fn backward_logits(&self, feature: &[f64], grad_logits: &[f64], scale: f64, grad_w: &mut Matrix, grad_f: &mut [f64]) {
        let t = self.temperature;
        let w = &self.weights.value;
        for (r, (f, gf)) in feature.iter().zip(grad_f.iter_mut()).enumerate() {
            let w_row = w.row(r);
            let gw_row = grad_w.row_mut(r);
            for c in 0..grad_logits.len() {
                let g = scale * grad_logits[c] / t;
                gw_row[c] += g * f;
                *gf += g * w_row[c];
            }
        }
    }
}

/// A loss with gradients for the batch features and for every classifier's weights.
#[derive(Debug, Clone)]
pub struct ClassifierLossOutput {
    pub value: f64,
    pub grad_features: Matrix,
    pub grad_weights: Vec<Matrix>,
}

impl ClassifierLossOutput {
    fn zero(classifiers: &[CosineClassifier], n: usize, d: usize) -> Self {
        ClassifierLossOutput {
            value: 0.0,
            grad_features: Matrix::zeros(n, d),
            grad_weights: classifiers
                .iter()
                .map(|c| Matrix::zeros(c.feature_dim(), c.num_classes()))
                .collect(),
        }
    }
}

/// `Σ_i mean_{(x,y)} −log p_i(x)_y` over a labeled batch pooled from every source.
pub fn cls_loss(
    classifiers: &[CosineClassifier],
    features: &Matrix,
    labels: &[usize],
) -> Result<ClassifierLossOutput> {
    let (n, d) = features.shape();
    if n != labels.len() {
        return Err(MsfanError::Dimension(format!("{n} features for {} labels", labels.len())));
    }
    if n == 0 {
        return Err(MsfanError::Data("labeled batch is empty".into()));
    }
    let mut out = ClassifierLossOutput::zero(classifiers, n, d);
    let scale = 1.0 / n as f64;
    for (ci, clf) in classifiers.iter().enumerate() {
        if let Some(&bad) = labels.iter().find(|&&y| y >= clf.num_classes()) {
            return Err(MsfanError::Data(format!(
                "label {bad} outside {} classes",
                clf.num_classes()
            )));
        }
        for (i, &y) in labels.iter().enumerate() {
            let f = features.row(i);
            let p = clf.classify(f);
            out.value -= scale * p[y].ln();
            let mut g = p;
            g[y] -= 1.0;
            clf.backward_logits(f, &g, scale, &mut out.grad_weights[ci], out.grad_features.row_mut(i));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MiConfig {
    /// Momentum β of the marginal-prediction tracker.
    pub beta: f64,
}

impl Default for MiConfig {
    fn default() -> Self {
        MiConfig { beta: 0.9 }
    }
}

impl MiConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta) {
            return Err(MsfanError::Config(format!("mi beta {} must lie in [0, 1)", self.beta)));
        }
        Ok(())
    }
}

/// Moving-average estimate of a classifier's marginal prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorTracker {
    pub prior: Vec<f64>,
    pub beta: f64,
}

impl PriorTracker {
    pub fn uniform(num_classes: usize, beta: f64) -> Self {
        PriorTracker {
            prior: vec![1.0 / num_classes as f64; num_classes],
            beta,
        }
    }

    /// `p̄ ← β·p̄ + (1−β)·batch_mean`, renormalized.
    pub fn observe(&mut self, batch_mean: &[f64]) {
        for (p, m) in self.prior.iter_mut().zip(batch_mean) {
            *p = self.beta * *p + (1.0 - self.beta) * m;
        }
        let sum: f64 = self.prior.iter().sum();
        self.prior.iter_mut().for_each(|p| *p /= sum);
    }
}

/// Batch mean of a classifier's predictions.
pub fn batch_marginal(clf: &CosineClassifier, features: &Matrix) -> Vec<f64> {
    let mut mean = vec![0.0; clf.num_classes()];
    let n = features.rows().max(1) as f64;
    for f in features.iter_rows() {
        for (m, p) in mean.iter_mut().zip(clf.classify(f)) {
            *m += p / n;
        }
    }
    mean
}

/// Result of [`mi_loss`]: the loss `−Σ_i I_i` and each classifier's `I_i`.
#[derive(Debug, Clone)]
pub struct MiLossOutput {
    pub loss: ClassifierLossOutput,
    pub information: Vec<f64>,
}

/// Negative classifier-wise mutual information on an unlabeled batch.
///
/// For classifier `i`, `I_i = Ĥ_i − mean_x H(p_i(x))` with the marginal entropy estimated as
/// `Ĥ_i = −mean_x Σ_c p_i(x)_c log p̄_i,c`, where `p̄_i = priors[i]` is held constant.
pub fn mi_loss(
    classifiers: &[CosineClassifier],
    features: &Matrix,
    priors: &[Vec<f64>],
) -> Result<MiLossOutput> {
    let (n, d) = features.shape();
    if n == 0 {
        return Err(MsfanError::Data("unlabeled batch is empty".into()));
    }
    if priors.len() != classifiers.len() {
        return Err(MsfanError::Dimension(format!(
            "{} priors for {} classifiers",
            priors.len(),
            classifiers.len()
        )));
    }
    let mut out = ClassifierLossOutput::zero(classifiers, n, d);
    let mut information = Vec::with_capacity(classifiers.len());
    let scale = 1.0 / n as f64;
    for (ci, (clf, prior)) in classifiers.iter().zip(priors).enumerate() {
        if prior.len() != clf.num_classes() || prior.iter().any(|p| !(*p >= 0.0)) {
            return Err(MsfanError::Domain(format!(
                "prior of classifier {ci} must be a non-negative vector over {} classes",
                clf.num_classes()
            )));
        }
        let log_prior: Vec<f64> = prior.iter().map(|p| p.ln()).collect();
        let mut marginal_entropy = 0.0;
        let mut conditional_entropy = 0.0;
        for i in 0..n {
            let f = features.row(i);
            let p = clf.classify(f);
            for (pc, lp) in p.iter().zip(&log_prior) {
                if *pc > 0.0 {
                    if !lp.is_finite() {
                        return Err(MsfanError::Domain(format!(
                            "prior of classifier {ci} is zero where predictions have mass"
                        )));
                    }
                    marginal_entropy -= scale * pc * lp;
                }
            }
            conditional_entropy += scale * entropy_unchecked(&p);
            // per-sample loss Σ_c p_c (log p̄_c − log p_c); ∂/∂p_c = log p̄_c − log p_c − 1
            let grad_p: Vec<f64> = p
                .iter()
                .zip(&log_prior)
                .map(|(pc, lp)| if *pc > 0.0 { lp - pc.ln() - 1.0 } else { 0.0 })
                .collect();
            let grad_logits = softmax_backward(&p, &grad_p);
            clf.backward_logits(f, &grad_logits, scale, &mut out.grad_weights[ci], out.grad_features.row_mut(i));
        }
        let info = marginal_entropy - conditional_entropy;
        information.push(info);
        out.value -= info;
    }
    Ok(MiLossOutput {
        loss: out,
        information,
    })
}

/// Overwrites each class column with the normalized mean of its support members' bank
/// rows. Classes without support keep their column. Returns classes whose mean had zero
/// norm (also left untouched).
pub fn prototype_weight_update(
    clf: &mut CosineClassifier,
    support: &SupportSet,
    bank: &MemoryBank,
) -> Result<Vec<usize>> {
    let (d, n_c) = clf.weights.value.shape();
    let mut sums = vec![vec![0.0; d]; n_c];
    let mut counts = vec![0usize; n_c];
    for e in &support.entries {
        if e.index >= bank.len() {
            return Err(MsfanError::IndexOutOfRange {
                index: e.index,
                len: bank.len(),
            });
        }
        if e.label >= n_c {
            return Err(MsfanError::Data(format!("support label {} outside {n_c} classes", e.label)));
        }
        counts[e.label] += 1;
        for (s, v) in sums[e.label].iter_mut().zip(bank.row(e.index)) {
            *s += v;
        }
    }
    let mut degenerate = Vec::new();
    for c in 0..n_c {
        if counts[c] == 0 {
            continue;
        }
        let mean: Vec<f64> = sums[c].iter().map(|s| s / counts[c] as f64).collect();
        match l2_normalize(&mean) {
            Ok(w) => clf.weights.value.set_column(c, &w),
            Err(_) => degenerate.push(c),
        }
    }
    Ok(degenerate)
}

// inference is defined on the direction of `f`; a zero feature is scored as is
fn direction(feature: &[f64]) -> Vec<f64> {
    l2_normalize(feature).unwrap_or_else(|_| feature.to_vec())
}

/// Class of the single weight column most similar to `f` across all classifiers. Exact
/// ties go to the lower classifier index, then the lower class index.
pub fn global_max_similarity_inference(classifiers: &[CosineClassifier], feature: &[f64]) -> usize {
    let feature = direction(feature);
    let mut best: Option<(f64, usize)> = None;
    for clf in classifiers {
        for (c, s) in clf.similarities(&feature).into_iter().enumerate() {
            if best.is_none_or(|(b, _)| s > b) {
                best = Some((s, c));
            }
        }
    }
    best.map_or(0, |(_, c)| c)
}

/// Argmax of the classifiers' mean probability vector.
pub fn ensemble_inference(classifiers: &[CosineClassifier], feature: &[f64]) -> usize {
    let Some(first) = classifiers.first() else {
        return 0;
    };
    let feature = direction(feature);
    let mut mean = vec![0.0; first.num_classes()];
    for clf in classifiers {
        for (m, p) in mean.iter_mut().zip(clf.classify(&feature)) {
            *m += p;
        }
    }
    let m = classifiers.len() as f64;
    mean.iter_mut().for_each(|v| *v /= m);
    argmax(&mean)
}
