//! Synthetic multi-source few-shot benchmarks and their CSV representation.
//!
//! Every domain shares the same class means in a latent space; domain `i` observes
//! `x = Q_i (m_c + ε) + b_i`, where `Q_i` is the orthonormal factor of `I + s·G_i` and
//! `b_i` a random offset, both scaled by the domain shift `s`. With `s = 0` every domain
//! is identically distributed.
//!
//! Hidden labels (the true class of every sample) live next to the samples and are only
//! meant for scoring and for re-drawing few-shot splits.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{MsfanError, Result};
use crate::numerics::{dot, norm};

#[derive(Debug, Clone, PartialEq)]
pub struct DomainSample {
    /// `0..M` are sources, `M` is the target.
    pub domain_id: usize,
    pub raw: Vec<f64>,
    /// Observed label; `Some` exactly when `is_labeled`.
    pub label: Option<usize>,
    pub is_labeled: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiDomainDataset {
    pub num_sources: usize,
    pub num_classes: usize,
    pub input_dim: usize,
    pub samples: Vec<DomainSample>,
    eval_labels: Vec<usize>,
}

impl MultiDomainDataset {
    /// `eval_labels[i]` is the true class of `samples[i]`.
    pub fn new(
        num_sources: usize,
        num_classes: usize,
        input_dim: usize,
        samples: Vec<DomainSample>,
        eval_labels: Vec<usize>,
    ) -> Result<Self> {
        let ds = MultiDomainDataset {
            num_sources,
            num_classes,
            input_dim,
            samples,
            eval_labels,
        };
        ds.validate()?;
        Ok(ds)
    }

    /// Structural checks: dimensions, domain ids, label ranges, and agreement between
    /// observed and hidden labels.
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(MsfanError::Schema("dataset needs at least one class".into()));
        }
        if self.eval_labels.len() != self.samples.len() {
            return Err(MsfanError::Schema(format!(
                "{} hidden labels for {} samples",
                self.eval_labels.len(),
                self.samples.len()
            )));
        }
        for (i, (s, &truth)) in self.samples.iter().zip(&self.eval_labels).enumerate() {
            if s.raw.len() != self.input_dim {
                return Err(MsfanError::Schema(format!(
                    "sample {i} has {} features, expected {}",
                    s.raw.len(),
                    self.input_dim
                )));
            }
            if s.domain_id > self.num_sources {
                return Err(MsfanError::Schema(format!(
                    "sample {i} has domain {} but there are only {} sources",
                    s.domain_id, self.num_sources
                )));
            }
            if truth >= self.num_classes {
                return Err(MsfanError::Schema(format!(
                    "hidden label {truth} of sample {i} is outside [0, {})",
                    self.num_classes
                )));
            }
            match (s.is_labeled, s.label) {
                (true, Some(y)) if y == truth => {}
                (true, Some(y)) => {
                    return Err(MsfanError::Schema(format!(
                        "sample {i} is labeled {y} but its hidden label is {truth}"
                    )))
                }
                (false, None) => {}
                _ => {
                    return Err(MsfanError::Schema(format!(
                        "sample {i} has inconsistent label and labeled flag"
                    )))
                }
            }
            if s.domain_id == self.num_sources && s.is_labeled {
                return Err(MsfanError::Schema(format!(
                    "target sample {i} must not be labeled"
                )));
            }
        }
        Ok(())
    }

    /// Checks required before training: at least one source, a nonempty target, and at
    /// least one labeled sample of every class in every source.
    pub fn validate_for_training(&self) -> Result<()> {
        self.validate()?;
        if self.num_sources == 0 {
            return Err(MsfanError::Data("training needs at least one source domain".into()));
        }
        for domain in 0..=self.num_sources {
            if self.domain_indices(domain).is_empty() {
                return Err(MsfanError::Data(format!("domain {domain} has no samples")));
            }
        }
        for domain in 0..self.num_sources {
            let counts = self.labeled_counts(domain);
            if let Some(c) = counts.iter().position(|&n| n == 0) {
                return Err(MsfanError::Data(format!(
                    "source {domain} has no labeled sample of class {c}"
                )));
            }
        }
        Ok(())
    }

    pub fn num_domains(&self) -> usize {
        self.num_sources + 1
    }

    pub fn target_domain(&self) -> usize {
        self.num_sources
    }

    /// Global sample indices of one domain, in file order. Position in this list is the
    /// sample's row in that domain's memory bank.
    pub fn domain_indices(&self, domain: usize) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.domain_id == domain)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn labeled_counts(&self, domain: usize) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for s in self.samples.iter().filter(|s| s.domain_id == domain) {
            if let Some(y) = s.label {
                counts[y] += 1;
            }
        }
        counts
    }

    /// Fraction of source samples that carry a label.
    pub fn labeled_fraction(&self) -> f64 {
        let source: Vec<_> = self
            .samples
            .iter()
            .filter(|s| s.domain_id < self.num_sources)
            .collect();
        if source.is_empty() {
            return 0.0;
        }
        source.iter().filter(|s| s.is_labeled).count() as f64 / source.len() as f64
    }

    /// Hidden true class of a sample. Scoring and split re-drawing only.
    pub fn eval_label(&self, index: usize) -> usize {
        self.eval_labels[index]
    }

    pub fn eval_labels(&self) -> &[usize] {
        &self.eval_labels
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    pub num_sources: usize,
    pub num_classes: usize,
    pub input_dim: usize,
    pub samples_per_class_per_domain: usize,
    pub shots_per_class: usize,
    pub class_separation: f64,
    pub domain_shift_scale: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    /// The reference benchmark: three sources plus a target, five classes, one shot.
    fn default() -> Self {
        GeneratorConfig {
            num_sources: 3,
            num_classes: 5,
            input_dim: 20,
            samples_per_class_per_domain: 40,
            shots_per_class: 1,
            class_separation: 8.0,
            domain_shift_scale: 0.25,
            noise_sigma: 1.0,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(MsfanError::Config(m));
        if self.num_classes == 0 || self.input_dim == 0 {
            return fail("num_classes and input_dim must be positive".into());
        }
        if self.shots_per_class == 0 {
            return fail("shots_per_class must be at least 1".into());
        }
        if self.shots_per_class > self.samples_per_class_per_domain {
            return fail(format!(
                "shots_per_class {} exceeds samples_per_class_per_domain {}",
                self.shots_per_class, self.samples_per_class_per_domain
            ));
        }
        if !(self.class_separation > 0.0) || !self.class_separation.is_finite() {
            return fail("class_separation must be positive".into());
        }
        if !(self.domain_shift_scale >= 0.0) || !self.domain_shift_scale.is_finite() {
            return fail("domain_shift_scale must be non-negative".into());
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return fail("noise_sigma must be non-negative".into());
        }
        Ok(())
    }
}

/// Ground truth behind a generated dataset, exposed for oracles.
#[derive(Debug, Clone)]
pub struct SyntheticLatents {
    pub class_means: Vec<Vec<f64>>,
    /// Latent point `m_c + ε` of every sample, aligned with `samples`.
    pub latents: Vec<Vec<f64>>,
    /// Per-domain `(Q_i, b_i)`, `Q_i` stored row-major.
    pub domain_maps: Vec<(Vec<Vec<f64>>, Vec<f64>)>,
}

fn gaussian_vec<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Orthonormal factor of `I + scale·G` (modified Gram-Schmidt on columns, so the
/// triangular factor has a positive diagonal and `scale = 0` yields `I` exactly).
fn perturbed_rotation<R: Rng>(rng: &mut R, n: usize, scale: f64) -> Vec<Vec<f64>> {
    // columns[j] is column j
    let mut columns: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let g = gaussian_vec(rng, n);
            (0..n)
                .map(|i| if i == j { 1.0 } else { 0.0 } + scale * g[i])
                .collect()
        })
        .collect();
    for j in 0..n {
        for k in 0..j {
            let (done, rest) = columns.split_at_mut(j);
            let proj = dot(&rest[0], &done[k]);
            for (v, q) in rest[0].iter_mut().zip(&done[k]) {
                *v -= proj * q;
            }
        }
        let n_j = norm(&columns[j]);
        columns[j].iter_mut().for_each(|v| *v /= n_j);
    }
    (0..n).map(|i| (0..n).map(|j| columns[j][i]).collect()).collect()
}

pub fn generate_synthetic(cfg: &GeneratorConfig) -> Result<MultiDomainDataset> {
    Ok(generate_synthetic_with_latents(cfg)?.0)
}

pub fn generate_synthetic_with_latents(
    cfg: &GeneratorConfig,
) -> Result<(MultiDomainDataset, SyntheticLatents)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d = cfg.input_dim;

    // random directions are nearly orthogonal, so radius sep/√2 gives pairwise distance ≈ sep
    let radius = cfg.class_separation / std::f64::consts::SQRT_2;
    let class_means: Vec<Vec<f64>> = (0..cfg.num_classes)
        .map(|_| {
            let g = gaussian_vec(&mut rng, d);
            let n = norm(&g);
            g.iter().map(|v| radius * v / n).collect()
        })
        .collect();

    let domain_maps: Vec<(Vec<Vec<f64>>, Vec<f64>)> = (0..=cfg.num_sources)
        .map(|_| {
            let q = perturbed_rotation(&mut rng, d, cfg.domain_shift_scale);
            let offset_scale = cfg.domain_shift_scale * cfg.class_separation / (d as f64).sqrt();
            let b = gaussian_vec(&mut rng, d)
                .into_iter()
                .map(|v| offset_scale * v)
                .collect();
            (q, b)
        })
        .collect();

    let mut samples = Vec::new();
    let mut labels = Vec::new();
    let mut latents = Vec::new();
    for (domain, (q, b)) in domain_maps.iter().enumerate() {
        for (class, mean) in class_means.iter().enumerate() {
            for _ in 0..cfg.samples_per_class_per_domain {
                let z: Vec<f64> = mean
                    .iter()
                    .map(|m| m + cfg.noise_sigma * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                let x = q.iter().zip(b).map(|(row, bi)| dot(row, &z) + bi).collect();
                samples.push(DomainSample {
                    domain_id: domain,
                    raw: x,
                    label: None,
                    is_labeled: false,
                });
                labels.push(class);
                latents.push(z);
            }
        }
    }
    let unsplit = MultiDomainDataset::new(cfg.num_sources, cfg.num_classes, d, samples, labels)?;
    let split_seed = rng.random::<u64>();
    let ds = few_shot_split(&unsplit, cfg.shots_per_class, split_seed)?;
    Ok((
        ds,
        SyntheticLatents {
            class_means,
            latents,
            domain_maps,
        },
    ))
}

/// Re-draws which source samples are labeled: exactly `shots` per class per source.
/// Target samples stay unlabeled.
pub fn few_shot_split(
    ds: &MultiDomainDataset,
    shots: usize,
    seed: u64,
) -> Result<MultiDomainDataset> {
    if shots == 0 {
        return Err(MsfanError::Config("shots must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = ds.clone();
    for s in out.samples.iter_mut() {
        s.label = None;
        s.is_labeled = false;
    }
    for domain in 0..ds.num_sources {
        let indices = ds.domain_indices(domain);
        for class in 0..ds.num_classes {
            let mut members: Vec<usize> = indices
                .iter()
                .copied()
                .filter(|&i| ds.eval_labels[i] == class)
                .collect();
            if members.len() < shots {
                return Err(MsfanError::Config(format!(
                    "source {domain} has {} samples of class {class}, fewer than {shots} shots",
                    members.len()
                )));
            }
            members.shuffle(&mut rng);
            for &i in &members[..shots] {
                out.samples[i].label = Some(class);
                out.samples[i].is_labeled = true;
            }
        }
    }
    Ok(out)
}

const DATASET_MAGIC: &str = "# msfan-dataset";

/// Sibling path holding hidden labels: `foo.csv` → `foo.eval.csv`.
pub fn eval_path_for(csv_path: &Path) -> PathBuf {
    let s = csv_path.to_string_lossy();
    let stem = s.strip_suffix(".csv").unwrap_or(&s);
    PathBuf::from(format!("{stem}.eval.csv"))
}

fn format_float(v: f64) -> String {
    // 17 significant digits round-trip every f64
    format!("{v:.16e}")
}

/// Writes `csv_path` and its `.eval.csv` sibling.
pub fn save_dataset(ds: &MultiDomainDataset, csv_path: &Path) -> Result<()> {
    ds.validate()?;
    let mut out = String::new();
    writeln!(
        out,
        "{DATASET_MAGIC} sources={} classes={} input_dim={}",
        ds.num_sources, ds.num_classes, ds.input_dim
    )
    .unwrap();
    out.push_str("domain_id,split,label");
    for j in 0..ds.input_dim {
        write!(out, ",f{j}").unwrap();
    }
    out.push('\n');
    for s in &ds.samples {
        let split = if s.domain_id == ds.num_sources {
            "target"
        } else if s.is_labeled {
            "labeled"
        } else {
            "unlabeled"
        };
        let label = s.label.map_or(-1, |y| y as i64);
        write!(out, "{},{split},{label}", s.domain_id).unwrap();
        for v in &s.raw {
            out.push(',');
            out.push_str(&format_float(*v));
        }
        out.push('\n');
    }
    fs::write(csv_path, out).map_err(|e| MsfanError::io(csv_path, e))?;

    let mut eval = String::from("index,label\n");
    for (i, y) in ds.eval_labels.iter().enumerate() {
        writeln!(eval, "{i},{y}").unwrap();
    }
    let eval_path = eval_path_for(csv_path);
    fs::write(&eval_path, eval).map_err(|e| MsfanError::io(&eval_path, e))
}

fn parse_error(path: &Path, line: usize, message: impl Into<String>) -> MsfanError {
    MsfanError::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn parse_header(path: &Path, line: &str) -> Result<(usize, usize, usize)> {
    let rest = line
        .strip_prefix(DATASET_MAGIC)
        .ok_or_else(|| parse_error(path, 1, format!("expected `{DATASET_MAGIC}` header")))?;
    let (mut sources, mut classes, mut dim) = (None, None, None);
    for field in rest.split_whitespace() {
        let (key, value) = field
            .split_once('=')
            .ok_or_else(|| parse_error(path, 1, format!("malformed header field `{field}`")))?;
        let value: usize = value
            .parse()
            .map_err(|_| parse_error(path, 1, format!("non-integer header value `{field}`")))?;
        match key {
            "sources" => sources = Some(value),
            "classes" => classes = Some(value),
            "input_dim" => dim = Some(value),
            _ => return Err(parse_error(path, 1, format!("unknown header key `{key}`"))),
        }
    }
    match (sources, classes, dim) {
        (Some(s), Some(c), Some(d)) => Ok((s, c, d)),
        _ => Err(parse_error(path, 1, "header must set sources, classes and input_dim")),
    }
}

pub fn load_dataset(csv_path: &Path) -> Result<MultiDomainDataset> {
    let text = fs::read_to_string(csv_path).map_err(|e| MsfanError::io(csv_path, e))?;
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (_, header) = lines
        .next()
        .ok_or_else(|| parse_error(csv_path, 1, "empty file"))?;
    let (num_sources, num_classes, input_dim) = parse_header(csv_path, header)?;

    let (col_line, columns) = lines
        .next()
        .ok_or_else(|| parse_error(csv_path, 2, "missing column header"))?;
    let expected: Vec<String> = ["domain_id", "split", "label"]
        .iter()
        .map(|s| s.to_string())
        .chain((0..input_dim).map(|j| format!("f{j}")))
        .collect();
    let got: Vec<&str> = columns.split(',').collect();
    if got.len() != expected.len() {
        return Err(MsfanError::Schema(format!(
            "line {col_line}: {} columns but input_dim {input_dim} needs {}",
            got.len(),
            expected.len()
        )));
    }
    if got.iter().zip(&expected).any(|(a, b)| a != b) {
        return Err(parse_error(csv_path, col_line, "unexpected column names"));
    }

    let mut samples = Vec::new();
    for (line_no, line) in lines {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 + input_dim {
            return Err(MsfanError::Schema(format!(
                "line {line_no}: {} feature columns, expected {input_dim}",
                fields.len().saturating_sub(3)
            )));
        }
        let domain_id: usize = fields[0]
            .parse()
            .map_err(|_| parse_error(csv_path, line_no, format!("bad domain_id `{}`", fields[0])))?;
        if domain_id > num_sources {
            return Err(MsfanError::Schema(format!(
                "line {line_no}: domain_id {domain_id} exceeds {num_sources}"
            )));
        }
        let label: i64 = fields[2]
            .parse()
            .map_err(|_| parse_error(csv_path, line_no, format!("bad label `{}`", fields[2])))?;
        if label < -1 || label >= num_classes as i64 {
            return Err(MsfanError::Schema(format!(
                "line {line_no}: label {label} outside [-1, {num_classes})"
            )));
        }
        let is_labeled = match (fields[1], domain_id == num_sources) {
            ("labeled", false) => true,
            ("unlabeled", false) | ("target", true) => false,
            (split, _) => {
                return Err(MsfanError::Schema(format!(
                    "line {line_no}: split `{split}` does not fit domain {domain_id}"
                )))
            }
        };
        if is_labeled != (label >= 0) {
            return Err(MsfanError::Schema(format!(
                "line {line_no}: split `{}` disagrees with label {label}",
                fields[1]
            )));
        }
        let raw = fields[3..]
            .iter()
            .map(|f| {
                f.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| parse_error(csv_path, line_no, format!("bad feature `{f}`")))
            })
            .collect::<Result<Vec<f64>>>()?;
        samples.push(DomainSample {
            domain_id,
            raw,
            label: (label >= 0).then_some(label as usize),
            is_labeled,
        });
    }

    let eval_path = eval_path_for(csv_path);
    let eval_text = fs::read_to_string(&eval_path).map_err(|e| MsfanError::io(&eval_path, e))?;
    let mut eval_labels = Vec::with_capacity(samples.len());
    for (i, line) in eval_text.lines().enumerate() {
        let line_no = i + 1;
        if line_no == 1 {
            if line != "index,label" {
                return Err(parse_error(&eval_path, 1, "expected `index,label` header"));
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let (idx, label) = line
            .split_once(',')
            .ok_or_else(|| parse_error(&eval_path, line_no, "expected two columns"))?;
        let idx: usize = idx
            .parse()
            .map_err(|_| parse_error(&eval_path, line_no, format!("bad index `{idx}`")))?;
        let label: usize = label
            .parse()
            .map_err(|_| parse_error(&eval_path, line_no, format!("bad label `{label}`")))?;
        if idx != eval_labels.len() {
            return Err(parse_error(
                &eval_path,
                line_no,
                format!("index {idx} out of sequence"),
            ));
        }
        eval_labels.push(label);
    }
    if eval_labels.len() != samples.len() {
        return Err(MsfanError::Data(format!(
            "{} hidden labels in {} for {} samples",
            eval_labels.len(),
            eval_path.display(),
            samples.len()
        )));
    }
    MultiDomainDataset::new(num_sources, num_classes, input_dim, samples, eval_labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> GeneratorConfig {
        GeneratorConfig {
            num_sources: 2,
            num_classes: 3,
            input_dim: 4,
            samples_per_class_per_domain: 6,
            shots_per_class: 1,
            class_separation: 3.0,
            domain_shift_scale: 0.5,
            noise_sigma: 0.2,
            seed: 9,
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_synthetic(&small_cfg()).unwrap();
        let b = generate_synthetic(&small_cfg()).unwrap();
        assert_eq!(a, b);
        let mut other = small_cfg();
        other.seed = 10;
        assert_ne!(a, generate_synthetic(&other).unwrap());
    }

    #[test]
    fn zero_shift_gives_identity_maps() {
        let mut cfg = small_cfg();
        cfg.domain_shift_scale = 0.0;
        let (_, latents) = generate_synthetic_with_latents(&cfg).unwrap();
        for (q, b) in &latents.domain_maps {
            for (i, row) in q.iter().enumerate() {
                for (j, v) in row.iter().enumerate() {
                    assert_eq!(*v, if i == j { 1.0 } else { 0.0 });
                }
            }
            assert!(b.iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn rotation_is_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = perturbed_rotation(&mut rng, 5, 0.8);
        for i in 0..5 {
            for j in 0..5 {
                let d = dot(&q[i], &q[j]);
                assert!((d - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shots_exceeding_samples_is_a_config_error() {
        let mut cfg = small_cfg();
        cfg.shots_per_class = 7;
        assert!(matches!(generate_synthetic(&cfg), Err(MsfanError::Config(_))));
    }

    #[test]
    fn labeled_counts_match_shots() {
        let ds = generate_synthetic(&small_cfg()).unwrap();
        for domain in 0..2 {
            assert_eq!(ds.labeled_counts(domain), vec![1, 1, 1]);
        }
        assert_eq!(ds.labeled_counts(2), vec![0, 0, 0]);
        ds.validate_for_training().unwrap();
    }

    #[test]
    fn split_with_all_shots_labels_every_source_sample() {
        let ds = generate_synthetic(&small_cfg()).unwrap();
        let all = few_shot_split(&ds, 6, 3).unwrap();
        assert!(all
            .samples
            .iter()
            .all(|s| s.is_labeled == (s.domain_id < 2)));
        assert!(matches!(few_shot_split(&ds, 7, 3), Err(MsfanError::Config(_))));
    }

    #[test]
    fn split_seeds_change_selection() {
        let ds = generate_synthetic(&small_cfg()).unwrap();
        let labeled = |d: &MultiDomainDataset| -> Vec<usize> {
            (0..d.samples.len()).filter(|&i| d.samples[i].is_labeled).collect()
        };
        let a = few_shot_split(&ds, 1, 100).unwrap();
        let b = few_shot_split(&ds, 1, 101).unwrap();
        assert_eq!(labeled(&a).len(), 6);
        assert_ne!(labeled(&a), labeled(&b));
    }

    #[test]
    fn eval_path_sibling() {
        assert_eq!(eval_path_for(Path::new("a/b.csv")), PathBuf::from("a/b.eval.csv"));
        assert_eq!(eval_path_for(Path::new("data")), PathBuf::from("data.eval.csv"));
    }
}
