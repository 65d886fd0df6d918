//! Support sets (ground-truth labels plus pseudo-labels every classifier agrees on),
//! soft label vectors from similarity to a support set, and the cross-source
//! consistency loss between those soft labels.

use crate::bank::MemoryBank;
use crate::error::{MsfanError, Result};
use crate::numerics::{argmax, dot, l2_normalize, softmax_unchecked, Matrix};
use crate::ssl_losses::LossOutput;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    GroundTruth,
    Pseudo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SupportEntry {
    /// Row in the domain's memory bank.
    pub index: usize,
    pub label: usize,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SupportSet {
    pub domain_id: usize,
    pub entries: Vec<SupportEntry>,
}

impl SupportSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn pseudo_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.provenance == Provenance::Pseudo)
            .count()
    }
}

/// Which side of each cross-entropy term carries the gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SscGradient {
    /// `CE(s_i, sg(s_i'))`: the prediction side learns, the soft pseudo-label is detached.
    #[default]
    Prediction,
    /// `CE(sg(s_i), s_i')`: swapped, for sensitivity checks.
    Target,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SupportConfig {
    /// Confidence every classifier must exceed for a pseudo-label.
    pub threshold: f64,
    /// Temperature ψ of `d(a, b) = exp(cos(a, b) / ψ)`.
    pub psi: f64,
    pub gradient: SscGradient,
}

impl Default for SupportConfig {
    fn default() -> Self {
        SupportConfig {
            threshold: 0.9,
            psi: 0.1,
            gradient: SscGradient::Prediction,
        }
    }
}

impl SupportConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) || !(self.psi > 0.0) {
            return Err(MsfanError::Config(format!(
                "need threshold in (0, 1) and psi > 0; got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Builds the support set of one source domain.
///
/// `predictions[i']` holds classifier `i'`'s probability rows for `unlabeled`, in order.
/// An unlabeled sample joins with label `y` when every classifier's maximum exceeds the
/// threshold and every argmax equals `y`.
pub fn build_support_set(
    domain_id: usize,
    labeled: &[(usize, usize)],
    unlabeled: &[usize],
    predictions: &[Matrix],
    threshold: f64,
) -> Result<SupportSet> {
    for (i, p) in predictions.iter().enumerate() {
        if p.rows() != unlabeled.len() {
            return Err(MsfanError::Dimension(format!(
                "classifier {i} scored {} samples, expected {}",
                p.rows(),
                unlabeled.len()
            )));
        }
    }
    let mut entries: Vec<SupportEntry> = labeled
        .iter()
        .map(|&(index, label)| SupportEntry {
            index,
            label,
            provenance: Provenance::GroundTruth,
        })
        .collect();
    if predictions.is_empty() {
        return Ok(SupportSet { domain_id, entries });
    }
    for (u, &index) in unlabeled.iter().enumerate() {
        let mut agreed: Option<usize> = None;
        let confident = predictions.iter().all(|p| {
            let row = p.row(u);
            let c = argmax(row);
            let ok = row[c] > threshold && agreed.is_none_or(|a| a == c);
            agreed = Some(c);
            ok
        });
        if confident {
            entries.push(SupportEntry {
                index,
                label: agreed.expect("at least one classifier"),
                provenance: Provenance::Pseudo,
            });
        }
    }
    Ok(SupportSet { domain_id, entries })
}

/// Support representations ready for similarity: unit-normalized bank rows and labels.
#[derive(Debug, Clone)]
pub struct SupportView {
    pub vectors: Matrix,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl SupportView {
    pub fn new(support: &SupportSet, bank: &MemoryBank, num_classes: usize) -> Result<Self> {
        if support.is_empty() {
            return Err(MsfanError::State(format!(
                "support set of domain {} is empty",
                support.domain_id
            )));
        }
        let mut vectors = Matrix::zeros(support.len(), bank.vectors.cols());
        let mut labels = Vec::with_capacity(support.len());
        for (k, e) in support.entries.iter().enumerate() {
            if e.index >= bank.len() {
                return Err(MsfanError::IndexOutOfRange {
                    index: e.index,
                    len: bank.len(),
                });
            }
            if e.label >= num_classes {
                return Err(MsfanError::Data(format!(
                    "support label {} outside {num_classes} classes",
                    e.label
                )));
            }
            vectors.row_mut(k).copy_from_slice(&l2_normalize(bank.row(e.index))?);
            labels.push(e.label);
        }
        Ok(SupportView {
            vectors,
            labels,
            num_classes,
        })
    }

    /// Returns `(s, w)`: the class-aggregated soft label and the per-entry weights.
    fn similarity_with_weights(&self, feature: &[f64], psi: f64) -> (Vec<f64>, Vec<f64>) {
        let logits: Vec<f64> = self.vectors.iter_rows().map(|v| dot(v, feature) / psi).collect();
        let weights = softmax_unchecked(&logits);
        let mut s = vec![0.0; self.num_classes];
        for (w, &y) in weights.iter().zip(&self.labels) {
            s[y] += w;
        }
        (s, weights)
    }

    /// Accumulates `∂L/∂f` given `∂L/∂s` into `grad`.
    fn backward(&self, weights: &[f64], grad_s: &[f64], psi: f64, scale: f64, grad: &mut [f64]) {
        // ∂L/∂w_k = g[y_k]; softmax backward over the entry logits cos/ψ
        let mean: f64 = weights
            .iter()
            .zip(&self.labels)
            .map(|(w, &y)| w * grad_s[y])
            .sum();
        for ((w, &y), v) in weights.iter().zip(&self.labels).zip(self.vectors.iter_rows()) {
            let coeff = scale * w * (grad_s[y] - mean) / psi;
            for (g, vk) in grad.iter_mut().zip(v) {
                *g += coeff * vk;
            }
        }
    }
}

/// Soft label of a unit-norm feature from its similarity to a support set.
pub fn support_similarity(
    feature: &[f64],
    support: &SupportSet,
    bank: &MemoryBank,
    num_classes: usize,
    psi: f64,
) -> Result<Vec<f64>> {
    let view = SupportView::new(support, bank, num_classes)?;
    Ok(view.similarity_with_weights(feature, psi).0)
}

/// Outcome of a consistency-loss evaluation: skipped when any support set is empty.
#[derive(Debug, Clone)]
pub enum SscOutcome {
    Computed(LossOutput),
    Skipped { empty_domain: usize },
}

/// Cross-source consistency: for every row and every ordered pair `i ≠ i'` of sources,
/// `CE(s_i, s_i')`, averaged over rows. Returns `Skipped` if any support set is empty.
pub fn ssc_loss(
    features: &Matrix,
    supports: &[SupportSet],
    banks: &[MemoryBank],
    num_classes: usize,
    cfg: &SupportConfig,
) -> Result<SscOutcome> {
    let (n, d) = features.shape();
    if let Some(empty) = supports.iter().find(|s| s.is_empty()) {
        return Ok(SscOutcome::Skipped {
            empty_domain: empty.domain_id,
        });
    }
    let views = supports
        .iter()
        .map(|s| {
            let bank = banks
                .iter()
                .find(|b| b.domain_id == s.domain_id)
                .ok_or_else(|| MsfanError::State(format!("no bank for domain {}", s.domain_id)))?;
            SupportView::new(s, bank, num_classes)
        })
        .collect::<Result<Vec<_>>>()?;
    ssc_loss_with_views(features, &views, cfg.psi, cfg.gradient).map(|out| {
        debug_assert_eq!(out.grad_features.shape(), (n, d));
        SscOutcome::Computed(out)
    })
}

pub(crate) fn ssc_loss_with_views(
    features: &Matrix,
    views: &[SupportView],
    psi: f64,
    gradient: SscGradient,
) -> Result<LossOutput> {
    let (n, d) = features.shape();
    let mut out = LossOutput::zero(n, d);
    let m = views.len();
    if m < 2 || n == 0 {
        return Ok(out);
    }
    let scale = 1.0 / n as f64;
    for row in 0..n {
        let f = features.row(row);
        let sims: Vec<(Vec<f64>, Vec<f64>)> =
            views.iter().map(|v| v.similarity_with_weights(f, psi)).collect();
        let mut grads = vec![vec![0.0; views[0].num_classes]; m];
        for i in 0..m {
            for j in 0..m {
                if i == j {
                    continue;
                }
                let (pred, target) = (&sims[i].0, &sims[j].0);
                for c in 0..pred.len() {
                    if target[c] == 0.0 {
                        continue;
                    }
                    if !(pred[c] > 0.0) {
                        return Err(MsfanError::Domain(format!(
                            "soft label of source {i} assigns zero mass to class {c}"
                        )));
                    }
                    out.value -= scale * target[c] * pred[c].ln();
                    match gradient {
                        SscGradient::Prediction => grads[i][c] -= target[c] / pred[c],
                        SscGradient::Target => grads[j][c] -= pred[c].ln(),
                    }
                }
            }
        }
        let g = out.grad_features.row_mut(row);
        for (view, ((_, weights), grad_s)) in views.iter().zip(sims.iter().zip(&grads)) {
            view.backward(weights, grad_s, psi, scale, g);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::cross_entropy;

    fn probs(rows: &[[f64; 5]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn unconfident_samples_stay_out() {
        let p = probs(&[[0.5, 0.5, 0.0, 0.0, 0.0]]);
        let s = build_support_set(0, &[(3, 1)], &[7], &[p.clone(), p], 0.9).unwrap();
        assert_eq!(s.entries.len(), 1);
        assert_eq!(s.entries[0].provenance, Provenance::GroundTruth);
    }

    #[test]
    fn agreeing_confident_sample_is_pseudo_labeled() {
        let p1 = probs(&[[0.01, 0.01, 0.01, 0.95, 0.02]]);
        let p2 = probs(&[[0.02, 0.02, 0.02, 0.92, 0.02]]);
        let s = build_support_set(0, &[], &[4], &[p1, p2], 0.9).unwrap();
        assert_eq!(
            s.entries,
            vec![SupportEntry {
                index: 4,
                label: 3,
                provenance: Provenance::Pseudo
            }]
        );
    }

    #[test]
    fn disagreeing_confident_sample_is_excluded() {
        let p1 = probs(&[[0.01, 0.01, 0.01, 0.95, 0.02]]);
        let p2 = probs(&[[0.02, 0.02, 0.02, 0.02, 0.92]]);
        let s = build_support_set(0, &[], &[4], &[p1, p2], 0.9).unwrap();
        assert!(s.is_empty());
    }

    fn bank(rows: &[[f64; 2]]) -> MemoryBank {
        MemoryBank::new(0, &Matrix::from_rows(rows).unwrap(), 0.5).unwrap()
    }

    #[test]
    fn single_entry_gives_one_hot() {
        let b = bank(&[[0.6, 0.8]]);
        let s = SupportSet {
            domain_id: 0,
            entries: vec![SupportEntry {
                index: 0,
                label: 2,
                provenance: Provenance::GroundTruth,
            }],
        };
        assert_eq!(
            support_similarity(&[1.0, 0.0], &s, &b, 4, 0.1).unwrap(),
            vec![0.0, 0.0, 1.0, 0.0]
        );
    }

    fn two_entry_set() -> SupportSet {
        SupportSet {
            domain_id: 0,
            entries: vec![
                SupportEntry {
                    index: 0,
                    label: 0,
                    provenance: Provenance::GroundTruth,
                },
                SupportEntry {
                    index: 1,
                    label: 1,
                    provenance: Provenance::GroundTruth,
                },
            ],
        }
    }

    #[test]
    fn equidistant_entries_split_evenly() {
        let b = bank(&[[1.0, 0.0], [0.0, 1.0]]);
        let f = l2_normalize(&[1.0, 1.0]).unwrap();
        let s = support_similarity(&f, &two_entry_set(), &b, 3, 0.1).unwrap();
        assert!((s[0] - 0.5).abs() < 1e-15 && (s[1] - 0.5).abs() < 1e-15 && s[2] == 0.0);
    }

    #[test]
    fn similarity_weights_follow_exp_cos_over_psi() {
        // unnormalized bank rows: cosine, not dot product, drives the weights
        let b = bank(&[[2.0, 0.0], [0.0, 0.5]]);
        let s = support_similarity(&[1.0, 0.0], &two_entry_set(), &b, 2, 0.1).unwrap();
        let e10 = 10f64.exp();
        assert!((s[0] - e10 / (e10 + 1.0)).abs() < 1e-12);
        assert!((s[0] - 0.9999546).abs() < 1e-7);
    }

    #[test]
    fn empty_support_is_a_state_error() {
        let b = bank(&[[1.0, 0.0]]);
        let s = SupportSet {
            domain_id: 0,
            entries: vec![],
        };
        assert!(matches!(
            support_similarity(&[1.0, 0.0], &s, &b, 2, 0.1),
            Err(MsfanError::State(_))
        ));
    }

    #[test]
    fn ssc_pair_value_matches_direct_cross_entropies() {
        // s1 = (0.7, 0.3): 7 entries of class 0 and 3 of class 1 on the same vector
        let make = |a: usize, b: usize| SupportView {
            vectors: Matrix::from_vec(a + b, 2, [1.0, 0.0].repeat(a + b)).unwrap(),
            labels: std::iter::repeat_n(0, a).chain(std::iter::repeat_n(1, b)).collect(),
            num_classes: 2,
        };
        let views = [make(7, 3), make(5, 5)];
        let f = Matrix::from_rows(&[[1.0, 0.0]]).unwrap();
        let out = ssc_loss_with_views(&f, &views, 0.1, SscGradient::Prediction).unwrap();
        let expected = cross_entropy(&[0.7, 0.3], &[0.5, 0.5]).unwrap()
            + cross_entropy(&[0.5, 0.5], &[0.7, 0.3]).unwrap();
        assert!((out.value - expected).abs() < 1e-12);
        assert!((out.value - 1.47347).abs() < 1e-5);
    }

    #[test]
    fn ssc_trivial_cases() {
        let one = SupportView {
            vectors: Matrix::from_rows(&[[1.0, 0.0]]).unwrap(),
            labels: vec![1],
            num_classes: 2,
        };
        let f = Matrix::from_rows(&[[0.6, 0.8]]).unwrap();
        // a single source has no pairs
        let single = ssc_loss_with_views(&f, std::slice::from_ref(&one), 0.1, SscGradient::Prediction).unwrap();
        assert_eq!(single.value, 0.0);
        // identical one-hot soft labels cost nothing
        let twin = ssc_loss_with_views(&f, &[one.clone(), one], 0.1, SscGradient::Prediction).unwrap();
        assert_eq!(twin.value, 0.0);
    }

    #[test]
    fn empty_support_skips_the_loss() {
        let b = bank(&[[1.0, 0.0], [0.0, 1.0]]);
        let supports = vec![
            two_entry_set(),
            SupportSet {
                domain_id: 1,
                entries: vec![],
            },
        ];
        let f = Matrix::from_rows(&[[1.0, 0.0]]).unwrap();
        let outcome = ssc_loss(&f, &supports, &[b], 2, &SupportConfig::default()).unwrap();
        assert!(matches!(outcome, SscOutcome::Skipped { empty_domain: 1 }));
    }
}
