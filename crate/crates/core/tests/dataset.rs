use std::fs;

use msfan::datagen::{
    eval_path_for, generate_synthetic, generate_synthetic_with_latents, load_dataset, save_dataset,
    DomainSample, GeneratorConfig, MultiDomainDataset,
};
use msfan::numerics::{dot, squared_distance};
use msfan::MsfanError;
use tempfile::tempdir;

fn small() -> GeneratorConfig {
    GeneratorConfig {
        num_sources: 2,
        num_classes: 3,
        input_dim: 4,
        samples_per_class_per_domain: 6,
        shots_per_class: 2,
        seed: 9,
        ..GeneratorConfig::default()
    }
}

#[test]
fn generated_dataset_round_trips_exactly() {
    let dir = tempdir().unwrap();
    let path = dir.path().join("d.csv");
    let ds = generate_synthetic(&small()).unwrap();
    save_dataset(&ds, &path).unwrap();
    assert!(eval_path_for(&path).exists());
    assert_eq!(load_dataset(&path).unwrap(), ds);
}

#[test]
fn empty_dataset_round_trips() {
    let dir = tempdir().unwrap();
    let path = dir.path().join("empty.csv");
    let ds = MultiDomainDataset::new(2, 3, 4, Vec::new(), Vec::new()).unwrap();
    save_dataset(&ds, &path).unwrap();
    let back = load_dataset(&path).unwrap();
    assert!(back.samples.is_empty());
    assert_eq!(back, ds);
}

fn rewrite_line(path: &std::path::Path, line_no: usize, edit: impl Fn(&str) -> String) {
    let text = fs::read_to_string(path).unwrap();
    let lines: Vec<String> = text
        .lines()
        .enumerate()
        .map(|(i, l)| if i + 1 == line_no { edit(l) } else { l.to_string() })
        .collect();
    fs::write(path, lines.join("\n") + "\n").unwrap();
}

fn saved() -> (tempfile::TempDir, std::path::PathBuf) {
    let dir = tempdir().unwrap();
    let path = dir.path().join("d.csv");
    save_dataset(&generate_synthetic(&small()).unwrap(), &path).unwrap();
    (dir, path)
}

#[test]
fn out_of_range_label_is_a_schema_error() {
    let (_dir, path) = saved();
    rewrite_line(&path, 3, |l| {
        let mut f: Vec<&str> = l.split(',').collect();
        f[1] = "labeled";
        f[2] = "7";
        f.join(",")
    });
    assert!(matches!(load_dataset(&path), Err(MsfanError::Schema(_))));
}

#[test]
fn wrong_feature_count_is_a_schema_error() {
    let (_dir, path) = saved();
    rewrite_line(&path, 5, |l| format!("{l},0.5"));
    assert!(matches!(load_dataset(&path), Err(MsfanError::Schema(_))));
}

#[test]
fn malformed_number_reports_its_line() {
    let (_dir, path) = saved();
    rewrite_line(&path, 6, |l| {
        let mut f: Vec<String> = l.split(',').map(String::from).collect();
        f[3] = "abc".into();
        f.join(",")
    });
    match load_dataset(&path) {
        Err(MsfanError::Parse { line, .. }) => assert_eq!(line, 6),
        other => panic!("expected a parse error, got {other:?}"),
    }
}

#[test]
fn eval_file_length_mismatch_is_a_data_error() {
    let (_dir, path) = saved();
    let eval = eval_path_for(&path);
    let text = fs::read_to_string(&eval).unwrap();
    let kept: Vec<&str> = text.lines().collect();
    fs::write(&eval, kept[..kept.len() - 1].join("\n") + "\n").unwrap();
    assert!(matches!(load_dataset(&path), Err(MsfanError::Data(_))));
}

#[test]
fn labeled_target_sample_is_rejected() {
    let s = DomainSample {
        domain_id: 1,
        raw: vec![0.0],
        label: Some(0),
        is_labeled: true,
    };
    assert!(matches!(
        MultiDomainDataset::new(1, 2, 1, vec![s], vec![0]),
        Err(MsfanError::Schema(_))
    ));
}

#[test]
fn missing_class_in_source_fails_training_validation() {
    let s = |domain_id, label: Option<usize>| DomainSample {
        domain_id,
        raw: vec![0.0],
        label,
        is_labeled: label.is_some(),
    };
    let ds = MultiDomainDataset::new(1, 2, 1, vec![s(0, Some(0)), s(0, None), s(1, None)], vec![0, 1, 0]).unwrap();
    assert!(matches!(ds.validate_for_training(), Err(MsfanError::Data(_))));
}

// independent classifiers on the ground-truth latent space

fn nearest_mean_accuracy(means: &[Vec<f64>], latents: &[Vec<f64>], labels: &[usize]) -> f64 {
    let hits = latents
        .iter()
        .zip(labels)
        .filter(|(z, &y)| {
            let best = (0..means.len())
                .min_by(|&a, &b| squared_distance(z, &means[a]).total_cmp(&squared_distance(z, &means[b])))
                .unwrap();
            best == y
        })
        .count();
    hits as f64 / labels.len() as f64
}

#[test]
fn low_noise_latents_are_separable_by_nearest_mean() {
    for seed in 0..3 {
        let cfg = GeneratorConfig {
            noise_sigma: 0.8,
            seed,
            ..GeneratorConfig::default()
        };
        let (ds, lat) = generate_synthetic_with_latents(&cfg).unwrap();
        let acc = nearest_mean_accuracy(&lat.class_means, &lat.latents, ds.eval_labels());
        assert!(acc > 0.95, "seed {seed}: accuracy {acc}");
    }
}

#[test]
fn observed_features_invert_to_latents() {
    let (ds, lat) = generate_synthetic_with_latents(&small()).unwrap();
    for (s, z) in ds.samples.iter().zip(&lat.latents) {
        let (q, b) = &lat.domain_maps[s.domain_id];
        // Q orthonormal: z = Qᵀ (x − b)
        let centered: Vec<f64> = s.raw.iter().zip(b).map(|(x, bi)| x - bi).collect();
        for (j, zj) in z.iter().enumerate() {
            let col: Vec<f64> = q.iter().map(|row| row[j]).collect();
            assert!((dot(&col, &centered) - zj).abs() < 1e-9);
        }
    }
}

#[test]
fn separation_controls_mean_distances() {
    let cfg = GeneratorConfig {
        input_dim: 400,
        num_classes: 4,
        ..GeneratorConfig::default()
    };
    let (_, lat) = generate_synthetic_with_latents(&cfg).unwrap();
    for a in 0..4 {
        for b in a + 1..4 {
            let d = squared_distance(&lat.class_means[a], &lat.class_means[b]).sqrt();
            assert!((d - cfg.class_separation).abs() < 0.15 * cfg.class_separation, "{d}");
        }
    }
}
