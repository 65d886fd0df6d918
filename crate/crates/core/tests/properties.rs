use msfan::bank::{kmeans, ClusterSet, KMeansConfig, MemoryBank};
use msfan::classifier::{
    batch_marginal, ensemble_inference, global_max_similarity_inference, mi_loss, prototype_weight_update,
    CosineClassifier,
};
use msfan::numerics::{cross_entropy, entropy, l2_normalize, norm, one_hot, softmax, Matrix};
use msfan::ssl_losses::{cps_loss, in_domain_similarity, BatchRow, CpsDirection, CpsOptions, SslConfig};
use msfan::support::{
    build_support_set, ssc_loss, support_similarity, Provenance, SscOutcome, SupportConfig, SupportEntry, SupportSet,
};
use proptest::prelude::*;

const D: usize = 4;

fn unit_vec() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, D)
        .prop_filter("nonzero", |v| norm(v) > 1e-3)
        .prop_map(|v| l2_normalize(&v).unwrap())
}

fn unit_rows(n: std::ops::Range<usize>) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(unit_vec(), n).prop_map(|rows| Matrix::from_rows(&rows).unwrap())
}

fn prob_vec(k: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0f64..5.0, k).prop_map(|l| softmax(&l).unwrap())
}

fn classifier(weights: &Matrix, t: f64) -> CosineClassifier {
    // weights arrive as n_c × d rows
    CosineClassifier::from_weights(weights.transpose(), t).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_is_a_distribution(logits in prop::collection::vec(-1e3f64..1e3, 1..12)) {
        let p = softmax(&logits).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn entropy_is_bounded(p in (1usize..10).prop_flat_map(prob_vec)) {
        let h = entropy(&p).unwrap();
        prop_assert!(h >= 0.0);
        prop_assert!(h <= (p.len() as f64).ln() + 1e-12);
    }

    #[test]
    fn cross_entropy_against_one_hot_is_nonnegative(p in prob_vec(5), y in 0usize..5) {
        let ce = cross_entropy(&p, &one_hot(y, 5)).unwrap();
        prop_assert!(ce >= 0.0);
        prop_assert!((ce + p[y].ln()).abs() < 1e-12);
    }

    #[test]
    fn margin_never_decreases_assigned_loss(
        f in unit_vec(),
        protos in unit_rows(2..6),
        m1 in 0.0f64..0.5,
        extra in 0.0f64..0.5,
        a in 0usize..6,
    ) {
        let a = a % protos.rows();
        let cfg = |margin| SslConfig { margin, ..SslConfig::default() };
        let lo = in_domain_similarity(&f, &protos, a, &cfg(m1)).unwrap();
        let hi = in_domain_similarity(&f, &protos, a, &cfg(m1 + extra)).unwrap();
        prop_assert!(-hi[a].ln() >= -lo[a].ln() - 1e-12);
    }

    #[test]
    fn cps_ignores_prototype_order(
        feats in unit_rows(1..5),
        protos in unit_rows(2..5),
        shift in 0usize..5,
    ) {
        let n = feats.rows();
        let rows: Vec<BatchRow> = (0..n).map(|local| BatchRow { domain: 0, local }).collect();
        let k = protos.rows();
        let rotated: Vec<Vec<f64>> = (0..k).map(|c| protos.row((c + shift) % k).to_vec()).collect();
        let set = |p: Matrix| ClusterSet {
            domain_id: 1,
            results: vec![msfan::bank::ClusteringResult {
                k,
                assignment: vec![0; 1],
                centroids: p.clone(),
                prototypes: p,
                inertia: 0.0,
                inertia_history: vec![0.0],
            }],
        };
        let opts = CpsOptions { direction: CpsDirection::SourceToTarget, all_clusterings: false };
        let a = cps_loss(&feats, &rows, &[set(protos.clone())], 1, 0.1, &opts).unwrap();
        let b = cps_loss(&feats, &rows, &[set(Matrix::from_rows(&rotated).unwrap())], 1, 0.1, &opts).unwrap();
        prop_assert!((a.value - b.value).abs() < 1e-12);
        prop_assert!(a.value >= 0.0 && a.value <= (k as f64).ln() + 1e-12);
    }

    #[test]
    fn inference_ignores_feature_scale(
        w1 in unit_rows(3..4),
        w2 in unit_rows(3..4),
        f in unit_vec(),
        power in -8i32..8,
    ) {
        // powers of two rescale without rounding, so even exact ties are preserved
        let s = 2f64.powi(power);
        let clfs = [classifier(&w1, 0.05), classifier(&w2, 0.05)];
        let scaled: Vec<f64> = f.iter().map(|v| v * s).collect();
        prop_assert_eq!(
            global_max_similarity_inference(&clfs, &f),
            global_max_similarity_inference(&clfs, &scaled)
        );
        prop_assert_eq!(ensemble_inference(&clfs, &f), ensemble_inference(&clfs, &scaled));
    }

    #[test]
    fn refreshed_columns_are_unit_norm(
        bank_rows in unit_rows(3..8),
        labels in prop::collection::vec(0usize..3, 8),
        w in unit_rows(3..4),
    ) {
        let bank = MemoryBank::new(0, &bank_rows, 0.5).unwrap();
        let entries = (0..bank.len())
            .map(|index| SupportEntry { index, label: labels[index], provenance: Provenance::GroundTruth })
            .collect();
        let support = SupportSet { domain_id: 0, entries };
        let mut clf = classifier(&w, 0.05);
        let degenerate = prototype_weight_update(&mut clf, &support, &bank).unwrap();
        for c in 0..3 {
            let col = clf.weights.value.column(c);
            if degenerate.contains(&c) || !labels[..bank.len()].contains(&c) {
                prop_assert_eq!(col, w.row(c).to_vec());
            } else {
                prop_assert!((norm(&col) - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn support_grows_as_threshold_drops(
        probs in prop::collection::vec(prob_vec(3), 6),
        probs2 in prop::collection::vec(prob_vec(3), 6),
        t1 in 0.3f64..0.99,
        t2 in 0.3f64..0.99,
    ) {
        let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
        let preds = [Matrix::from_rows(&probs).unwrap(), Matrix::from_rows(&probs2).unwrap()];
        let labeled = [(6usize, 0usize), (7, 2)];
        let unlabeled: Vec<usize> = (0..6).collect();
        let loose = build_support_set(0, &labeled, &unlabeled, &preds, lo).unwrap();
        let strict = build_support_set(0, &labeled, &unlabeled, &preds, hi).unwrap();
        for e in &strict.entries {
            prop_assert!(loose.entries.contains(e));
        }
        for (index, label) in labeled {
            let truth = SupportEntry { index, label, provenance: Provenance::GroundTruth };
            prop_assert!(strict.entries.contains(&truth));
        }
        for e in loose.entries.iter().filter(|e| e.provenance == Provenance::Pseudo) {
            prop_assert!(preds.iter().all(|p| p.row(e.index)[e.label] > lo));
        }
    }

    #[test]
    fn consistency_loss_dominates_target_entropy(
        feats in unit_rows(1..4),
        b0 in unit_rows(3..6),
        b1 in unit_rows(3..6),
    ) {
        let banks = [MemoryBank::new(0, &b0, 0.5).unwrap(), MemoryBank::new(1, &b1, 0.5).unwrap()];
        let supports: Vec<SupportSet> = banks
            .iter()
            .map(|b| SupportSet {
                domain_id: b.domain_id,
                entries: (0..b.len())
                    .map(|index| SupportEntry { index, label: index % 3, provenance: Provenance::GroundTruth })
                    .collect(),
            })
            .collect();
        let cfg = SupportConfig::default();
        let SscOutcome::Computed(out) = ssc_loss(&feats, &supports, &banks, 3, &cfg).unwrap() else {
            panic!("nonempty supports must compute");
        };
        let mut bound = 0.0;
        for f in feats.iter_rows() {
            for (s, b) in supports.iter().zip(&banks) {
                bound += entropy(&support_similarity(f, s, b, 3, cfg.psi).unwrap()).unwrap();
            }
        }
        bound /= feats.rows() as f64;
        prop_assert!(out.value >= bound - 1e-9, "{} < {}", out.value, bound);
    }

    #[test]
    fn bank_update_is_a_convex_mix(row in unit_vec(), fresh in unit_vec(), eta in 0.0f64..=1.0) {
        let mut bank = MemoryBank::new(2, &Matrix::from_rows(&[row.clone()]).unwrap(), eta).unwrap();
        bank.momentum_update(0, &fresh).unwrap();
        for k in 0..D {
            prop_assert_eq!(bank.row(0)[k], eta * row[k] + (1.0 - eta) * fresh[k]);
        }
    }

    #[test]
    fn kmeans_outputs_are_well_formed(points in unit_rows(6..20), k in 1usize..5, seed in any::<u64>()) {
        let r = kmeans(&points, k, seed, &KMeansConfig::default()).unwrap();
        prop_assert!(r.cluster_sizes().iter().all(|&s| s > 0));
        for p in r.prototypes.iter_rows() {
            prop_assert!((norm(p) - 1.0).abs() < 1e-12);
        }
        for w in r.inertia_history.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-12);
        }
    }

    #[test]
    fn mutual_information_is_nonnegative_at_batch_marginal(feats in unit_rows(1..8), w in unit_rows(3..4)) {
        let clfs = [classifier(&w, 0.1)];
        let priors = vec![batch_marginal(&clfs[0], &feats)];
        let out = mi_loss(&clfs, &feats, &priors).unwrap();
        prop_assert!(out.information[0] >= -1e-12);
    }
}
