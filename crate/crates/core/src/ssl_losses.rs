//! Prototype-level self-supervision: the in-domain margin contrastive loss over each
//! domain's own k-means prototypes, and entropy minimization of cross-domain
//! instance-to-prototype similarities.
//!
//! Prototypes come from memory banks and are constants here; every gradient is taken
//! with respect to the batch features only.

use std::collections::BTreeMap;

use crate::bank::{ClusterSet, ClusteringResult};
use crate::error::{MsfanError, Result};
use crate::numerics::{dot, entropy_unchecked, softmax_unchecked, Matrix};

/// Where a batch row came from: its domain and its row in that domain's memory bank.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BatchRow {
    pub domain: usize,
    pub local: usize,
}

/// A scalar loss and its gradient with respect to each batch feature row.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub value: f64,
    pub grad_features: Matrix,
}

impl LossOutput {
    pub(crate) fn zero(n: usize, d: usize) -> Self {
        LossOutput {
            value: 0.0,
            grad_features: Matrix::zeros(n, d),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SslConfig {
    /// Temperature φ of the in-domain similarity.
    pub phi: f64,
    /// Additive margin m on the assigned cluster's logit.
    pub margin: f64,
    /// Temperature τ of the cross-domain similarity.
    pub tau: f64,
}

impl Default for SslConfig {
    fn default() -> Self {
        SslConfig {
            phi: 0.1,
            margin: 0.1,
            tau: 0.1,
        }
    }
}

impl SslConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.phi > 0.0) || !(self.tau > 0.0) || !(self.margin >= 0.0) {
            return Err(MsfanError::Config(format!(
                "need phi > 0, tau > 0, margin ≥ 0; got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Which instance-to-prototype pairs enter the cross-domain entropy term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CpsDirection {
    /// Source instances against target prototypes.
    #[default]
    SourceToTarget,
    /// Target instances against each source's prototypes.
    TargetToSource,
    /// Both of the above.
    Bidirectional,
    /// Every ordered pair of distinct domains, sources and target alike.
    AllPairs,
}

impl CpsDirection {
    pub fn as_str(&self) -> &'static str {
        match self {
            CpsDirection::SourceToTarget => "src_to_tgt",
            CpsDirection::TargetToSource => "tgt_to_src",
            CpsDirection::Bidirectional => "bidirectional",
            CpsDirection::AllPairs => "all_pairs",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "src_to_tgt" => CpsDirection::SourceToTarget,
            "tgt_to_src" => CpsDirection::TargetToSource,
            "bidirectional" => CpsDirection::Bidirectional,
            "all_pairs" => CpsDirection::AllPairs,
            _ => return None,
        })
    }

    /// `(instance domain, prototype domain)` pairs for `num_sources` sources; the target
    /// is domain `num_sources`.
    pub fn pairs(&self, num_sources: usize) -> Vec<(usize, usize)> {
        let target = num_sources;
        let src_to_tgt = (0..num_sources).map(|i| (i, target));
        let tgt_to_src = (0..num_sources).map(|i| (target, i));
        match self {
            CpsDirection::SourceToTarget => src_to_tgt.collect(),
            CpsDirection::TargetToSource => tgt_to_src.collect(),
            CpsDirection::Bidirectional => src_to_tgt.chain(tgt_to_src).collect(),
            CpsDirection::AllPairs => (0..=num_sources)
                .flat_map(|a| (0..=num_sources).filter(move |&b| b != a).map(move |b| (a, b)))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CpsOptions {
    pub direction: CpsDirection,
    /// Average over every clustering instead of using only the first (`k = n_c`) one.
    pub all_clusterings: bool,
}

/// Margin softmax of `f` against a domain's prototypes:
/// `logit_c = (μ_c·f − m·[c = assigned]) / φ`.
pub fn in_domain_similarity(
    feature: &[f64],
    prototypes: &Matrix,
    assigned: usize,
    cfg: &SslConfig,
) -> Result<Vec<f64>> {
    if assigned >= prototypes.rows() {
        return Err(MsfanError::IndexOutOfRange {
            index: assigned,
            len: prototypes.rows(),
        });
    }
    Ok(softmax_unchecked(&margin_logits(feature, prototypes, assigned, cfg)))
}

fn margin_logits(feature: &[f64], prototypes: &Matrix, assigned: usize, cfg: &SslConfig) -> Vec<f64> {
    prototypes
        .iter_rows()
        .enumerate()
        .map(|(c, mu)| {
            let margin = if c == assigned { cfg.margin } else { 0.0 };
            (dot(mu, feature) - margin) / cfg.phi
        })
        .collect()
}

/// Plain temperature softmax of `f` against another domain's prototypes.
pub fn cross_domain_similarity(feature: &[f64], prototypes: &Matrix, tau: f64) -> Vec<f64> {
    let logits: Vec<f64> = prototypes.iter_rows().map(|mu| dot(mu, feature) / tau).collect();
    softmax_unchecked(&logits)
}

fn rows_by_domain(rows: &[BatchRow]) -> BTreeMap<usize, Vec<usize>> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, r) in rows.iter().enumerate() {
        groups.entry(r.domain).or_default().push(i);
    }
    groups
}

fn check_batch(features: &Matrix, rows: &[BatchRow]) -> Result<()> {
    if features.rows() != rows.len() {
        return Err(MsfanError::Dimension(format!(
            "{} feature rows for {} batch entries",
            features.rows(),
            rows.len()
        )));
    }
    Ok(())
}

fn cluster_set_for(cluster_sets: &[ClusterSet], domain: usize) -> Result<&ClusterSet> {
    cluster_sets
        .iter()
        .find(|c| c.domain_id == domain)
        .ok_or_else(|| MsfanError::State(format!("no clustering for domain {domain}")))
}

/// Prototypical contrastive term for one clustering: per domain, the batch mean of
/// `−log P_assigned`, summed over domains.
fn pc_loss(
    features: &Matrix,
    rows: &[BatchRow],
    cluster_sets: &[ClusterSet],
    r: usize,
    cfg: &SslConfig,
    scale: f64,
    out: &mut LossOutput,
) -> Result<f64> {
    let mut total = 0.0;
    for (domain, members) in rows_by_domain(rows) {
        let set = cluster_set_for(cluster_sets, domain)?;
        let clustering: &ClusteringResult = set.results.get(r).ok_or_else(|| {
            MsfanError::State(format!("domain {domain} lacks clustering {r}"))
        })?;
        let weight = 1.0 / members.len() as f64;
        for &i in &members {
            let local = rows[i].local;
            let assigned = *clustering.assignment.get(local).ok_or_else(|| {
                MsfanError::State(format!(
                    "sample {local} of domain {domain} has no cluster assignment"
                ))
            })?;
            let f = features.row(i);
            let probs = softmax_unchecked(&margin_logits(f, &clustering.prototypes, assigned, cfg));
            total += -weight * probs[assigned].ln();
            // ∂(−log P_a)/∂logit_c = P_c − [c = a]; ∂logit_c/∂f = μ_c / φ
            let g = out.grad_features.row_mut(i);
            for (c, mu) in clustering.prototypes.iter_rows().enumerate() {
                let coeff = scale * weight * (probs[c] - if c == assigned { 1.0 } else { 0.0 }) / cfg.phi;
                for (gk, m) in g.iter_mut().zip(mu) {
                    *gk += coeff * m;
                }
            }
        }
    }
    Ok(total)
}

/// In-domain prototypical self-supervision averaged over the `R` clusterings of each domain.
pub fn ips_loss(
    features: &Matrix,
    rows: &[BatchRow],
    cluster_sets: &[ClusterSet],
    cfg: &SslConfig,
) -> Result<LossOutput> {
    check_batch(features, rows)?;
    let mut out = LossOutput::zero(features.rows(), features.cols());
    if rows.is_empty() {
        return Ok(out);
    }
    let r_count = cluster_sets
        .first()
        .map(|c| c.results.len())
        .filter(|&r| r > 0)
        .ok_or_else(|| MsfanError::State("no clusterings available".into()))?;
    let scale = 1.0 / r_count as f64;
    for r in 0..r_count {
        let term = pc_loss(features, rows, cluster_sets, r, cfg, scale, &mut out)?;
        out.value += scale * term;
    }
    Ok(out)
}

/// Cross-domain prototypical entropy. For every `(instance domain, prototype domain)`
/// pair selected by `opts.direction`, the batch mean of `H(softmax(μ·f/τ))` over that
/// instance domain's rows; pairs are summed.
pub fn cps_loss(
    features: &Matrix,
    rows: &[BatchRow],
    cluster_sets: &[ClusterSet],
    num_sources: usize,
    tau: f64,
    opts: &CpsOptions,
) -> Result<LossOutput> {
    check_batch(features, rows)?;
    let mut out = LossOutput::zero(features.rows(), features.cols());
    let groups = rows_by_domain(rows);
    for (from, to) in opts.direction.pairs(num_sources) {
        let Some(members) = groups.get(&from) else {
            continue;
        };
        let set = cluster_set_for(cluster_sets, to)?;
        let clusterings: Vec<&ClusteringResult> = if opts.all_clusterings {
            set.results.iter().collect()
        } else {
            set.results.first().into_iter().collect()
        };
        if clusterings.is_empty() {
            return Err(MsfanError::State(format!("domain {to} has no clustering")));
        }
        let weight = 1.0 / (members.len() * clusterings.len()) as f64;
        for clustering in clusterings {
            for &i in members {
                let f = features.row(i);
                let probs = cross_domain_similarity(f, &clustering.prototypes, tau);
                let h = entropy_unchecked(&probs);
                out.value += weight * h;
                // ∂H/∂logit_c = −P_c (log P_c + H)
                let g = out.grad_features.row_mut(i);
                for (p, mu) in probs.iter().zip(clustering.prototypes.iter_rows()) {
                    if *p <= 0.0 {
                        continue;
                    }
                    let coeff = -weight * p * (p.ln() + h) / tau;
                    for (gk, m) in g.iter_mut().zip(mu) {
                        *gk += coeff * m;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// `L_IPS + L_CPS`; either side may be switched off.
pub fn mps_loss(ips: Option<&LossOutput>, cps: Option<&LossOutput>, n: usize, d: usize) -> Result<LossOutput> {
    let mut out = LossOutput::zero(n, d);
    for part in [ips, cps].into_iter().flatten() {
        out.value += part.value;
        out.grad_features.add_scaled(&part.grad_features, 1.0)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{entropy, l2_normalize};

    fn clustering(prototypes: Matrix, assignment: Vec<usize>) -> ClusteringResult {
        ClusteringResult {
            k: prototypes.rows(),
            assignment,
            centroids: prototypes.clone(),
            prototypes,
            inertia: 0.0,
            inertia_history: vec![0.0],
        }
    }

    fn axes() -> Matrix {
        Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap()
    }

    #[test]
    fn zero_margin_equidistant_is_uniform() {
        let f = l2_normalize(&[1.0, 1.0]).unwrap();
        let cfg = SslConfig {
            margin: 0.0,
            ..Default::default()
        };
        let p = in_domain_similarity(&f, &axes(), 0, &cfg).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-15 && (p[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn zero_margin_is_temperature_softmax() {
        let f = l2_normalize(&[0.3, -0.7]).unwrap();
        let cfg = SslConfig {
            margin: 0.0,
            phi: 0.2,
            tau: 0.1,
        };
        let p = in_domain_similarity(&f, &axes(), 1, &cfg).unwrap();
        let q = cross_domain_similarity(&f, &axes(), 0.2);
        assert_eq!(p, q);
    }

    #[test]
    fn margin_example() {
        let p = in_domain_similarity(&[1.0, 0.0], &axes(), 0, &SslConfig::default()).unwrap();
        let e9 = 9f64.exp();
        assert!((p[0] - e9 / (e9 + 1.0)).abs() < 1e-12);
        assert!((p[0] - 0.99988).abs() < 1e-5);
    }

    #[test]
    fn cross_domain_examples() {
        let p = cross_domain_similarity(&[1.0, 0.0], &axes(), 0.1);
        let e10 = 10f64.exp();
        assert!((p[0] - e10 / (e10 + 1.0)).abs() < 1e-12);
        assert!((p[1] - 0.0000454).abs() < 1e-7);
        // near-zero entropy when the feature sits on a prototype
        let h = entropy(&p).unwrap();
        let direct = -(p[0] * p[0].ln() + p[1] * p[1].ln());
        assert!((h - direct).abs() < 1e-15);
        assert!((h - 0.00050).abs() < 1e-5);

        let orth = Matrix::from_rows(&[[0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]).unwrap();
        assert_eq!(cross_domain_similarity(&[1.0, 0.0, 0.0], &orth, 0.1), vec![0.5, 0.5]);

        let hot = cross_domain_similarity(&[1.0, 0.0], &axes(), 1e6);
        assert!(hot.iter().all(|v| (v - 0.5).abs() < 1e-6));
    }

    #[test]
    fn ips_single_sample_matches_cross_entropy() {
        // choose f so that the margin softmax gives P = (0.8, 0.2) with m = 0
        let cfg = SslConfig {
            phi: 1.0,
            margin: 0.0,
            tau: 0.1,
        };
        let gap = (0.8f64 / 0.2).ln();
        let (a, b) = ((1.0 + gap) / 2.0, (1.0 - gap) / 2.0);
        let protos = axes();
        let f = Matrix::from_rows(&[[a, b]]).unwrap();
        let sets = vec![ClusterSet {
            domain_id: 0,
            results: vec![clustering(protos, vec![0])],
        }];
        let rows = [BatchRow { domain: 0, local: 0 }];
        let out = ips_loss(&f, &rows, &sets, &cfg).unwrap();
        assert!((out.value - (-(0.8f64.ln()))).abs() < 1e-12);
        assert!((out.value - 0.22314).abs() < 1e-5);
    }

    #[test]
    fn identical_clusterings_average_to_one() {
        let protos = axes();
        let f = Matrix::from_rows(&[[0.6, 0.8], [1.0, 0.0]]).unwrap();
        let rows = [BatchRow { domain: 0, local: 1 }, BatchRow { domain: 0, local: 0 }];
        let one = vec![ClusterSet {
            domain_id: 0,
            results: vec![clustering(protos.clone(), vec![0, 1])],
        }];
        let three = vec![ClusterSet {
            domain_id: 0,
            results: vec![clustering(protos, vec![0, 1]); 3],
        }];
        let cfg = SslConfig::default();
        let a = ips_loss(&f, &rows, &one, &cfg).unwrap();
        let b = ips_loss(&f, &rows, &three, &cfg).unwrap();
        assert!((a.value - b.value).abs() < 1e-14);
    }

    #[test]
    fn missing_assignment_is_a_state_error() {
        let sets = vec![ClusterSet {
            domain_id: 0,
            results: vec![clustering(axes(), vec![0])],
        }];
        let f = Matrix::from_rows(&[[1.0, 0.0]]).unwrap();
        let rows = [BatchRow { domain: 0, local: 5 }];
        assert!(matches!(
            ips_loss(&f, &rows, &sets, &SslConfig::default()),
            Err(MsfanError::State(_))
        ));
    }

    #[test]
    fn cps_extremes() {
        let target = vec![ClusterSet {
            domain_id: 1,
            results: vec![clustering(axes(), vec![0, 1])],
        }];
        let f = Matrix::from_rows(&[l2_normalize(&[1.0, 1.0]).unwrap()]).unwrap();
        let rows = [BatchRow { domain: 0, local: 0 }];
        let out = cps_loss(&f, &rows, &target, 1, 0.1, &CpsOptions::default()).unwrap();
        assert!((out.value - 2f64.ln()).abs() < 1e-12);

        // no sources → nothing to align
        let none = cps_loss(&Matrix::zeros(0, 2), &[], &target, 0, 0.1, &CpsOptions::default()).unwrap();
        assert_eq!(none.value, 0.0);
    }

    #[test]
    fn direction_pairs() {
        assert_eq!(CpsDirection::SourceToTarget.pairs(2), vec![(0, 2), (1, 2)]);
        assert_eq!(CpsDirection::TargetToSource.pairs(2), vec![(2, 0), (2, 1)]);
        assert_eq!(CpsDirection::Bidirectional.pairs(1), vec![(0, 1), (1, 0)]);
        assert_eq!(CpsDirection::AllPairs.pairs(2).len(), 6);
        for d in [
            CpsDirection::SourceToTarget,
            CpsDirection::TargetToSource,
            CpsDirection::Bidirectional,
            CpsDirection::AllPairs,
        ] {
            assert_eq!(CpsDirection::parse(d.as_str()), Some(d));
        }
    }

    #[test]
    fn mps_adds_components() {
        let a = LossOutput {
            value: 0.25,
            grad_features: Matrix::from_rows(&[[1.0, 0.0]]).unwrap(),
        };
        let b = LossOutput {
            value: 0.5,
            grad_features: Matrix::from_rows(&[[0.0, 2.0]]).unwrap(),
        };
        let both = mps_loss(Some(&a), Some(&b), 1, 2).unwrap();
        assert_eq!(both.value, 0.75);
        assert_eq!(both.grad_features.data(), &[1.0, 2.0]);
        let ips_only = mps_loss(Some(&a), None, 1, 2).unwrap();
        assert_eq!(ips_only.value, a.value);
        assert_eq!(mps_loss(None, None, 1, 2).unwrap().value, 0.0);
    }
}
