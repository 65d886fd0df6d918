//! Per-domain momentum memory banks and the k-means prototypes computed from them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{MsfanError, Result};
use crate::numerics::{l2_normalize, squared_distance, Matrix};

/// One row per sample of a domain, mixed towards fresh features with momentum `eta`.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    pub domain_id: usize,
    pub vectors: Matrix,
    pub eta: f64,
}

impl MemoryBank {
    /// Starts the bank from the domain's current features (rows copied verbatim).
    pub fn new(domain_id: usize, features: &Matrix, eta: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&eta) {
            return Err(MsfanError::Config(format!("bank momentum {eta} outside [0, 1]")));
        }
        Ok(MemoryBank {
            domain_id,
            vectors: features.clone(),
            eta,
        })
    }

    pub fn len(&self) -> usize {
        self.vectors.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.rows() == 0
    }

    pub fn row(&self, j: usize) -> &[f64] {
        self.vectors.row(j)
    }

    /// `v_j ← η·v_j + (1−η)·f`, without renormalization.
    pub fn momentum_update(&mut self, j: usize, feature: &[f64]) -> Result<()> {
        if j >= self.len() {
            return Err(MsfanError::IndexOutOfRange {
                index: j,
                len: self.len(),
            });
        }
        if feature.len() != self.vectors.cols() {
            return Err(MsfanError::Dimension(format!(
                "feature has {} entries, bank rows have {}",
                feature.len(),
                self.vectors.cols()
            )));
        }
        let eta = self.eta;
        for (v, f) in self.vectors.row_mut(j).iter_mut().zip(feature) {
            *v = eta * *v + (1.0 - eta) * f;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansConfig {
    pub max_iters: usize,
    pub restarts: usize,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        KMeansConfig {
            max_iters: 100,
            restarts: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusteringResult {
    pub k: usize,
    /// Cluster index of every input row.
    pub assignment: Vec<usize>,
    /// Unnormalized cluster means, `k × d`.
    pub centroids: Matrix,
    /// ℓ2-normalized centroids, `k × d`.
    pub prototypes: Matrix,
    /// `Σ ‖v − centroid(v)‖²` at termination.
    pub inertia: f64,
    /// Inertia after every Lloyd update of the winning run.
    pub inertia_history: Vec<f64>,
}

impl ClusteringResult {
    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &c in &self.assignment {
            sizes[c] += 1;
        }
        sizes
    }
}

fn nearest(centroids: &Matrix, v: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, mu) in centroids.iter_rows().enumerate() {
        let d = squared_distance(v, mu);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn plus_plus_init<R: Rng>(vectors: &Matrix, k: usize, rng: &mut R) -> Matrix {
    let n = vectors.rows();
    let mut centroids = Matrix::zeros(k, vectors.cols());
    let first = rng.random_range(0..n);
    centroids.row_mut(0).copy_from_slice(vectors.row(first));
    let mut dist: Vec<f64> = vectors
        .iter_rows()
        .map(|v| squared_distance(v, vectors.row(first)))
        .collect();
    for c in 1..k {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, d) in dist.iter().enumerate() {
                if *d > 0.0 && target < *d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            // rounding can walk off the end onto an already-chosen point
            if dist[chosen] == 0.0 {
                chosen = dist
                    .iter()
                    .enumerate()
                    .rev()
                    .find(|(_, d)| **d > 0.0)
                    .map_or(chosen, |(i, _)| i);
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centroids.row_mut(c).copy_from_slice(vectors.row(pick));
        for (i, v) in vectors.iter_rows().enumerate() {
            dist[i] = dist[i].min(squared_distance(v, vectors.row(pick)));
        }
    }
    centroids
}

/// Moves the point farthest from its centroid (taken from a cluster with more than one
/// member) into each empty cluster, which is then centered on that point.
fn repair_empty_clusters(vectors: &Matrix, centroids: &mut Matrix, assignment: &mut [usize]) {
    let k = centroids.rows();
    loop {
        let mut sizes = vec![0usize; k];
        for &c in assignment.iter() {
            sizes[c] += 1;
        }
        let Some(empty) = sizes.iter().position(|&s| s == 0) else {
            return;
        };
        let mut farthest: Option<(usize, f64)> = None;
        for (i, v) in vectors.iter_rows().enumerate() {
            let c = assignment[i];
            if sizes[c] < 2 {
                continue;
            }
            let d = squared_distance(v, centroids.row(c));
            if farthest.is_none_or(|(_, best)| d > best) {
                farthest = Some((i, d));
            }
        }
        let (i, _) = farthest.expect("n ≥ k guarantees a cluster with two members");
        assignment[i] = empty;
        centroids.row_mut(empty).copy_from_slice(vectors.row(i));
    }
}

fn update_centroids(vectors: &Matrix, assignment: &[usize], k: usize) -> Matrix {
    let mut sums = Matrix::zeros(k, vectors.cols());
    let mut counts = vec![0usize; k];
    for (v, &c) in vectors.iter_rows().zip(assignment) {
        counts[c] += 1;
        for (s, x) in sums.row_mut(c).iter_mut().zip(v) {
            *s += x;
        }
    }
    for (c, &n) in counts.iter().enumerate() {
        sums.row_mut(c).iter_mut().for_each(|s| *s /= n as f64);
    }
    sums
}

fn inertia_of(vectors: &Matrix, centroids: &Matrix, assignment: &[usize]) -> f64 {
    vectors
        .iter_rows()
        .zip(assignment)
        .map(|(v, &c)| squared_distance(v, centroids.row(c)))
        .sum()
}

/// One k-means++-seeded Lloyd run. Returns `(assignment, centroids, inertia history)`.
fn lloyd<R: Rng>(vectors: &Matrix, k: usize, max_iters: usize, rng: &mut R) -> (Vec<usize>, Matrix, Vec<f64>) {
    let mut centroids = plus_plus_init(vectors, k, rng);
    let mut assignment: Vec<usize> = vectors.iter_rows().map(|v| nearest(&centroids, v).0).collect();
    let mut history = Vec::new();
    let mut converged = false;
    for _ in 0..max_iters.max(1) {
        repair_empty_clusters(vectors, &mut centroids, &mut assignment);
        centroids = update_centroids(vectors, &assignment, k);
        history.push(inertia_of(vectors, &centroids, &assignment));
        let next: Vec<usize> = vectors.iter_rows().map(|v| nearest(&centroids, v).0).collect();
        if next == assignment {
            converged = true;
            break;
        }
        assignment = next;
    }
    if !converged {
        // bring centroids in line with the final reassignment
        repair_empty_clusters(vectors, &mut centroids, &mut assignment);
        centroids = update_centroids(vectors, &assignment, k);
        history.push(inertia_of(vectors, &centroids, &assignment));
    }
    (assignment, centroids, history)
}

/// Best-of-`restarts` k-means with k-means++ seeding; prototypes are the normalized centroids.
pub fn kmeans(vectors: &Matrix, k: usize, seed: u64, cfg: &KMeansConfig) -> Result<ClusteringResult> {
    let n = vectors.rows();
    if k == 0 {
        return Err(MsfanError::Config("k-means needs k ≥ 1".into()));
    }
    if n < k {
        return Err(MsfanError::Config(format!(
            "cannot form {k} clusters from {n} vectors"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(Vec<usize>, Matrix, Vec<f64>)> = None;
    for _ in 0..cfg.restarts.max(1) {
        let run = lloyd(vectors, k, cfg.max_iters, &mut rng);
        let inertia = *run.2.last().expect("at least one Lloyd update");
        if best
            .as_ref()
            .is_none_or(|b| inertia < *b.2.last().expect("nonempty"))
        {
            best = Some(run);
        }
    }
    let (assignment, centroids, history) = best.expect("at least one restart");
    let mut prototypes = Matrix::zeros(k, vectors.cols());
    for c in 0..k {
        let unit = l2_normalize(centroids.row(c)).map_err(|_| {
            MsfanError::Degenerate(format!("centroid {c} has zero norm; prototype undefined"))
        })?;
        prototypes.row_mut(c).copy_from_slice(&unit);
    }
    Ok(ClusteringResult {
        k,
        assignment,
        inertia: *history.last().expect("nonempty"),
        centroids,
        prototypes,
        inertia_history: history,
    })
}

/// The `R` clusterings of one domain's bank.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterSet {
    pub domain_id: usize,
    pub results: Vec<ClusteringResult>,
}

/// SplitMix64 finalizer over the combined inputs.
pub(crate) fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed
        ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F).rotate_left(17);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Clusters every bank once per entry of `k_list`, each with its own derived seed.
pub fn recluster_all(
    banks: &[MemoryBank],
    k_list: &[usize],
    seed: u64,
    cfg: &KMeansConfig,
) -> Result<Vec<ClusterSet>> {
    if k_list.is_empty() {
        return Err(MsfanError::Config("k_list must name at least one clustering".into()));
    }
    banks
        .iter()
        .map(|bank| {
            let results = k_list
                .iter()
                .enumerate()
                .map(|(r, &k)| {
                    kmeans(
                        &bank.vectors,
                        k,
                        derive_seed(seed, bank.domain_id as u64, r as u64),
                        cfg,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(ClusterSet {
                domain_id: bank.domain_id,
                results,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::norm;

    #[test]
    fn bank_starts_as_copy() {
        let f = Matrix::from_rows(&[[0.6, 0.8], [1.0, 0.0]]).unwrap();
        let bank = MemoryBank::new(0, &f, 0.5).unwrap();
        assert_eq!(bank.vectors, f);
        let empty = MemoryBank::new(1, &Matrix::zeros(0, 2), 0.5).unwrap();
        assert!(empty.is_empty());
        assert!(recluster_all(&[empty], &[1], 0, &KMeansConfig::default()).is_err());
    }

    #[test]
    fn momentum_update_formula() {
        let f = Matrix::from_rows(&[[1.0, 0.0]]).unwrap();
        let mut half = MemoryBank::new(0, &f, 0.5).unwrap();
        half.momentum_update(0, &[0.0, 1.0]).unwrap();
        assert_eq!(half.row(0), &[0.5, 0.5]);

        let mut replace = MemoryBank::new(0, &f, 0.0).unwrap();
        replace.momentum_update(0, &[0.0, 1.0]).unwrap();
        assert_eq!(replace.row(0), &[0.0, 1.0]);

        let mut frozen = MemoryBank::new(0, &f, 1.0).unwrap();
        frozen.momentum_update(0, &[0.0, 1.0]).unwrap();
        assert_eq!(frozen.row(0), &[1.0, 0.0]);

        assert!(matches!(
            half.momentum_update(3, &[0.0, 1.0]),
            Err(MsfanError::IndexOutOfRange { index: 3, len: 1 })
        ));
    }

    #[test]
    fn single_cluster_is_the_mean() {
        let v = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]).unwrap();
        let r = kmeans(&v, 1, 4, &KMeansConfig::default()).unwrap();
        assert_eq!(r.assignment, vec![0, 0, 0]);
        assert!((r.centroids[(0, 0)] - 2.0 / 3.0).abs() < 1e-15);
        assert!((r.centroids[(0, 1)] - 2.0 / 3.0).abs() < 1e-15);
        assert!((norm(r.prototypes.row(0)) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn one_point_per_cluster_has_zero_inertia() {
        let v = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0], [-1.0, 0.5]]).unwrap();
        let r = kmeans(&v, 3, 1, &KMeansConfig::default()).unwrap();
        assert_eq!(r.inertia, 0.0);
        assert_eq!(r.cluster_sizes(), vec![1, 1, 1]);
    }

    #[test]
    fn duplicate_points_still_fill_every_cluster() {
        let v = Matrix::from_rows(&[[1.0, 0.0], [1.0, 0.0], [1.0, 0.0], [0.0, 1.0]]).unwrap();
        let r = kmeans(&v, 3, 2, &KMeansConfig::default()).unwrap();
        assert!(r.cluster_sizes().iter().all(|&s| s > 0));
    }

    #[test]
    fn too_few_points_is_a_config_error() {
        let v = Matrix::from_rows(&[[1.0, 0.0]]).unwrap();
        assert!(matches!(
            kmeans(&v, 2, 0, &KMeansConfig::default()),
            Err(MsfanError::Config(_))
        ));
    }

    #[test]
    fn recluster_is_deterministic_and_sized() {
        let v = Matrix::from_rows(&[
            [1.0, 0.1],
            [0.9, 0.0],
            [0.0, 1.0],
            [0.1, 0.9],
            [-1.0, 0.0],
            [-0.9, 0.2],
        ])
        .unwrap();
        let banks = vec![MemoryBank::new(0, &v, 0.5).unwrap()];
        let a = recluster_all(&banks, &[2, 2, 3], 7, &KMeansConfig::default()).unwrap();
        let b = recluster_all(&banks, &[2, 2, 3], 7, &KMeansConfig::default()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 1);
        assert_eq!(a[0].results.iter().map(|r| r.k).collect::<Vec<_>>(), vec![2, 2, 3]);
    }

    #[test]
    fn derived_seeds_differ() {
        assert_ne!(derive_seed(1, 0, 0), derive_seed(1, 0, 1));
        assert_ne!(derive_seed(1, 0, 1), derive_seed(1, 1, 0));
    }
}
