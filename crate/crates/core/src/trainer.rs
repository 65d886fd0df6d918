//! The training driver: balanced multi-domain batching, the weighted total objective,
//! periodic reclustering with support-set and weight refresh, evaluation, the
//! source-only baseline and the cumulative ablation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::bank::{derive_seed, recluster_all, ClusterSet, KMeansConfig, MemoryBank};
use crate::classifier::{
    batch_marginal, cls_loss, ensemble_inference, global_max_similarity_inference, mi_loss,
    prototype_weight_update, CosineClassifier, MiConfig, PriorTracker,
};
use crate::datagen::MultiDomainDataset;
use crate::error::{MsfanError, Result};
use crate::numerics::{FeatureExtractor, Matrix, SgdConfig};
use crate::ssl_losses::{cps_loss, ips_loss, BatchRow, CpsOptions, SslConfig};
use crate::support::{build_support_set, ssc_loss, Provenance, SscOutcome, SupportConfig, SupportSet};

// Stream tags for derive_seed.
const STREAM_INIT: u64 = 0;
const STREAM_BATCH: u64 = 1;
const STREAM_CLUSTER: u64 = 2;
const STREAM_PROBE: u64 = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lambda_mps: f64,
    pub lambda_ssc: f64,
    pub lambda_mi: f64,
    /// Rows drawn per step across all domains; `batch_size / (M+1)` per domain.
    pub batch_size: usize,
    /// Rows drawn per step from the pooled source labels for the supervised loss.
    pub labeled_batch_size: usize,
    pub steps: usize,
    pub cluster_interval: usize,
    pub metrics_interval: usize,
    pub seed: u64,
    pub enable_ips: bool,
    pub enable_cps: bool,
    pub enable_ssc: bool,
    pub enable_mi: bool,
    pub enable_weight_refresh: bool,
    /// Let the supervised and MI losses move classifier weights between refreshes.
    pub train_classifier_weights: bool,
    pub hidden_dim: usize,
    pub feature_dim: usize,
    pub temperature: f64,
    /// Cluster counts per clustering; empty means `(n_c, n_c, 2·n_c)`.
    pub k_list: Vec<usize>,
    pub bank_eta: f64,
    pub ssl: SslConfig,
    pub cps: CpsOptions,
    pub support: SupportConfig,
    pub mi: MiConfig,
    pub sgd: SgdConfig,
    pub kmeans: KMeansConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda_mps: 1.0,
            lambda_ssc: 0.1,
            lambda_mi: 0.1,
            batch_size: 64,
            labeled_batch_size: 16,
            steps: 600,
            cluster_interval: 50,
            metrics_interval: 50,
            seed: 0,
            enable_ips: true,
            enable_cps: true,
            enable_ssc: true,
            enable_mi: true,
            enable_weight_refresh: true,
            train_classifier_weights: true,
            hidden_dim: 64,
            feature_dim: 32,
            temperature: 0.05,
            k_list: Vec::new(),
            bank_eta: 0.5,
            ssl: SslConfig::default(),
            cps: CpsOptions::default(),
            support: SupportConfig::default(),
            mi: MiConfig::default(),
            sgd: SgdConfig::default(),
            kmeans: KMeansConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn resolved_k_list(&self, num_classes: usize) -> Vec<usize> {
        if self.k_list.is_empty() {
            vec![num_classes, num_classes, 2 * num_classes]
        } else {
            self.k_list.clone()
        }
    }

    /// Only L_cls, no weight refresh.
    pub fn source_only(&self) -> Self {
        TrainConfig {
            enable_ips: false,
            enable_cps: false,
            enable_ssc: false,
            enable_mi: false,
            enable_weight_refresh: false,
            ..self.clone()
        }
    }

    fn mps_active(&self) -> bool {
        self.lambda_mps > 0.0 && (self.enable_ips || self.enable_cps)
    }

    fn ssc_active(&self) -> bool {
        self.lambda_ssc > 0.0 && self.enable_ssc
    }

    fn mi_active(&self) -> bool {
        self.lambda_mi > 0.0 && self.enable_mi
    }

    fn needs_clusters(&self) -> bool {
        self.mps_active()
    }

    fn needs_supports(&self) -> bool {
        self.ssc_active() || self.enable_weight_refresh
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(MsfanError::Config(m));
        for (name, v) in [
            ("lambda_mps", self.lambda_mps),
            ("lambda_ssc", self.lambda_ssc),
            ("lambda_mi", self.lambda_mi),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return fail(format!("{name} must be a finite non-negative weight, got {v}"));
            }
        }
        if self.batch_size == 0 || self.labeled_batch_size == 0 {
            return fail("batch sizes must be positive".into());
        }
        if self.cluster_interval == 0 || self.metrics_interval == 0 {
            return fail("cluster_interval and metrics_interval must be positive".into());
        }
        if self.hidden_dim == 0 || self.feature_dim == 0 {
            return fail("hidden_dim and feature_dim must be positive".into());
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return fail(format!("temperature {} must be positive", self.temperature));
        }
        if !(0.0..=1.0).contains(&self.bank_eta) {
            return fail(format!("bank_eta {} must lie in [0, 1]", self.bank_eta));
        }
        if self.k_list.contains(&0) {
            return fail("k_list entries must be positive".into());
        }
        if self.kmeans.max_iters == 0 || self.kmeans.restarts == 0 {
            return fail("kmeans max_iters and restarts must be positive".into());
        }
        self.ssl.validate()?;
        self.support.validate()?;
        self.mi.validate()?;
        self.sgd.validate()
    }

    /// Checks that the configuration can run on `ds`.
    pub fn validate_for(&self, ds: &MultiDomainDataset) -> Result<()> {
        self.validate()?;
        ds.validate_for_training()?;
        let domains = ds.num_domains();
        if self.batch_size < domains {
            return Err(MsfanError::Config(format!(
                "batch_size {} gives no rows per domain across {domains} domains",
                self.batch_size
            )));
        }
        if self.needs_clusters() {
            let k_max = self.resolved_k_list(ds.num_classes).into_iter().max().unwrap_or(0);
            for d in 0..domains {
                let n = ds.domain_indices(d).len();
                if n < k_max {
                    return Err(MsfanError::Config(format!(
                        "domain {d} has {n} samples, fewer than the largest cluster count {k_max}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Extractor plus one classifier per source.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub extractor: FeatureExtractor,
    pub classifiers: Vec<CosineClassifier>,
}

impl Model {
    pub fn new(input_dim: usize, num_sources: usize, num_classes: usize, cfg: &TrainConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_INIT, 0));
        let extractor = FeatureExtractor::new(input_dim, cfg.hidden_dim, cfg.feature_dim, &mut rng);
        let classifiers = (0..num_sources)
            .map(|_| CosineClassifier::new(cfg.feature_dim, num_classes, cfg.temperature, &mut rng))
            .collect();
        Model { extractor, classifiers }
    }

    /// Features of the given dataset rows.
    pub fn features(&self, ds: &MultiDomainDataset, indices: &[usize]) -> Result<Matrix> {
        self.extractor.extract(&raw_rows(ds, indices)?)
    }
}

/// Inference rule used to score target predictions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InferenceRule {
    MaxSimilarity,
    Ensemble,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Accuracy {
    pub max_similarity: f64,
    pub ensemble: f64,
}

impl Accuracy {
    pub fn get(&self, rule: InferenceRule) -> f64 {
        match rule {
            InferenceRule::MaxSimilarity => self.max_similarity,
            InferenceRule::Ensemble => self.ensemble,
        }
    }
}

/// Target accuracy under both inference rules, scored against the hidden labels.
pub fn evaluate(model: &Model, ds: &MultiDomainDataset) -> Result<Accuracy> {
    let target = ds.domain_indices(ds.target_domain());
    if target.is_empty() {
        return Err(MsfanError::Data("target domain has no samples".into()));
    }
    if ds.eval_labels().len() != ds.samples.len() {
        return Err(MsfanError::Data("hidden labels missing".into()));
    }
    let features = model.features(ds, &target)?;
    let (mut max_sim, mut ens) = (0usize, 0usize);
    for (f, &i) in features.iter_rows().zip(&target) {
        let y = ds.eval_label(i);
        max_sim += usize::from(global_max_similarity_inference(&model.classifiers, f) == y);
        ens += usize::from(ensemble_inference(&model.classifiers, f) == y);
    }
    let n = target.len() as f64;
    Ok(Accuracy {
        max_similarity: max_sim as f64 / n,
        ensemble: ens as f64 / n,
    })
}

/// Raw and weighted loss values of one evaluation of the objective.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub cls: f64,
    pub ips: f64,
    pub cps: f64,
    pub ssc: f64,
    pub mi: f64,
    /// `λ_mps·(ips + cps)`.
    pub weighted_mps: f64,
    pub weighted_ssc: f64,
    pub weighted_mi: f64,
    pub total: f64,
    pub ssc_skipped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub losses: LossBreakdown,
    pub acc_max_similarity: f64,
    pub acc_ensemble: f64,
    /// Per source domain.
    pub support_sizes: Vec<usize>,
    /// Per source domain; `None` without pseudo-labels. Scored against hidden labels.
    pub pseudo_label_precision: Vec<Option<f64>>,
}

/// Reshuffles its order every time it runs out.
#[derive(Debug, Clone, PartialEq)]
struct EpochSampler {
    order: Vec<usize>,
    pos: usize,
}

impl EpochSampler {
    fn new(items: Vec<usize>) -> Self {
        let pos = items.len();
        EpochSampler { order: items, pos }
    }

    fn draw(&mut self, n: usize, rng: &mut ChaCha8Rng, out: &mut Vec<usize>) {
        for _ in 0..n {
            if self.pos == self.order.len() {
                self.order.shuffle(rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
    }
}

/// A step batch: `rows[..domain_rows]` are the balanced per-domain draws, the rest are
/// labeled source rows for the supervised loss.
#[derive(Debug, Clone)]
struct Batch {
    rows: Vec<usize>,
    domain_rows: usize,
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: Model,
    pub banks: Vec<MemoryBank>,
    pub cluster_sets: Vec<ClusterSet>,
    /// One per source domain.
    pub support_sets: Vec<SupportSet>,
    pub priors: Vec<PriorTracker>,
    pub step: usize,
    rng: ChaCha8Rng,
    domain_samplers: Vec<EpochSampler>,
    labeled_sampler: EpochSampler,
    /// Global dataset index to bank row.
    local_index: Vec<usize>,
}

impl TrainState {
    /// Fresh model, banks filled with the initial features.
    pub fn new(ds: &MultiDomainDataset, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate_for(ds)?;
        let model = Model::new(ds.input_dim, ds.num_sources, ds.num_classes, cfg);
        let mut local_index = vec![0; ds.samples.len()];
        let mut banks = Vec::with_capacity(ds.num_domains());
        let mut domain_samplers = Vec::with_capacity(ds.num_domains());
        for d in 0..ds.num_domains() {
            let indices = ds.domain_indices(d);
            for (local, &g) in indices.iter().enumerate() {
                local_index[g] = local;
            }
            banks.push(MemoryBank::new(d, &model.features(ds, &indices)?, cfg.bank_eta)?);
            domain_samplers.push(EpochSampler::new(indices));
        }
        let labeled: Vec<usize> = (0..ds.samples.len())
            .filter(|&i| ds.samples[i].is_labeled)
            .collect();
        Ok(TrainState {
            priors: (0..ds.num_sources)
                .map(|_| PriorTracker::uniform(ds.num_classes, cfg.mi.beta))
                .collect(),
            model,
            banks,
            cluster_sets: Vec::new(),
            support_sets: Vec::new(),
            step: 0,
            rng: ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_BATCH, 0)),
            domain_samplers,
            labeled_sampler: EpochSampler::new(labeled),
            local_index,
        })
    }

    fn batch_row(&self, ds: &MultiDomainDataset, global: usize) -> BatchRow {
        BatchRow {
            domain: ds.samples[global].domain_id,
            local: self.local_index[global],
        }
    }

    fn next_batch(&mut self, cfg: &TrainConfig) -> Batch {
        let per_domain = cfg.batch_size / self.domain_samplers.len();
        let mut rows = Vec::with_capacity(per_domain * self.domain_samplers.len() + cfg.labeled_batch_size);
        for sampler in &mut self.domain_samplers {
            sampler.draw(per_domain, &mut self.rng, &mut rows);
        }
        let domain_rows = rows.len();
        self.labeled_sampler.draw(cfg.labeled_batch_size, &mut self.rng, &mut rows);
        Batch { rows, domain_rows }
    }

    /// Reclusters the banks, rebuilds support sets and refreshes classifier weights, as
    /// far as the configuration needs them.
    pub fn refresh(&mut self, ds: &MultiDomainDataset, cfg: &TrainConfig) -> Result<()> {
        if cfg.needs_clusters() {
            self.cluster_sets = recluster_all(
                &self.banks,
                &cfg.resolved_k_list(ds.num_classes),
                derive_seed(cfg.seed, STREAM_CLUSTER, self.step as u64),
                &cfg.kmeans,
            )?;
        }
        if !cfg.needs_supports() {
            return Ok(());
        }
        self.support_sets = (0..ds.num_sources)
            .map(|d| self.build_support(ds, d, cfg))
            .collect::<Result<_>>()?;
        if cfg.enable_weight_refresh {
            for (clf, (support, bank)) in self
                .model
                .classifiers
                .iter_mut()
                .zip(self.support_sets.iter().zip(&self.banks))
            {
                // degenerate classes keep their previous column
                prototype_weight_update(clf, support, bank)?;
            }
        }
        Ok(())
    }

    fn build_support(&self, ds: &MultiDomainDataset, domain: usize, cfg: &TrainConfig) -> Result<SupportSet> {
        let mut labeled = Vec::new();
        let mut unlabeled = Vec::new();
        let mut unlabeled_global = Vec::new();
        for g in ds.domain_indices(domain) {
            let s = &ds.samples[g];
            match s.label {
                Some(y) if s.is_labeled => labeled.push((self.local_index[g], y)),
                _ => {
                    unlabeled.push(self.local_index[g]);
                    unlabeled_global.push(g);
                }
            }
        }
        let predictions = if unlabeled.is_empty() {
            Vec::new()
        } else {
            let features = self.model.features(ds, &unlabeled_global)?;
            self.model
                .classifiers
                .iter()
                .map(|c| c.classify_batch(&features))
                .collect()
        };
        build_support_set(domain, &labeled, &unlabeled, &predictions, cfg.support.threshold)
    }

    /// Evaluates the total objective on `batch` given its features; returns the breakdown
    /// and gradients already scaled by the loss weights.
    fn objective(
        &self,
        ds: &MultiDomainDataset,
        cfg: &TrainConfig,
        batch: &Batch,
        features: &Matrix,
    ) -> Result<(LossBreakdown, Matrix, Vec<Matrix>)> {
        let (n, d) = features.shape();
        let mut grad_f = Matrix::zeros(n, d);
        let mut grad_w: Vec<Matrix> = self
            .model
            .classifiers
            .iter()
            .map(|c| Matrix::zeros(c.feature_dim(), c.num_classes()))
            .collect();
        let mut out = LossBreakdown::default();

        let labeled_pos: Vec<usize> = (batch.domain_rows..n).collect();
        let labels = labeled_pos
            .iter()
            .map(|&p| {
                ds.samples[batch.rows[p]]
                    .label
                    .ok_or_else(|| MsfanError::Data(format!("sample {} has no label", batch.rows[p])))
            })
            .collect::<Result<Vec<_>>>()?;
        let cls = cls_loss(&self.model.classifiers, &features.select_rows(&labeled_pos), &labels)?;
        out.cls = cls.value;
        scatter_add(&mut grad_f, &labeled_pos, &cls.grad_features, 1.0);
        for (g, c) in grad_w.iter_mut().zip(&cls.grad_weights) {
            g.add_scaled(c, 1.0)?;
        }

        let domain_pos: Vec<usize> = (0..batch.domain_rows).collect();
        let domain_features = features.select_rows(&domain_pos);
        let rows: Vec<BatchRow> = batch.rows[..batch.domain_rows]
            .iter()
            .map(|&g| self.batch_row(ds, g))
            .collect();

        if cfg.mps_active() {
            if cfg.enable_ips {
                let ips = ips_loss(&domain_features, &rows, &self.cluster_sets, &cfg.ssl)?;
                out.ips = ips.value;
                scatter_add(&mut grad_f, &domain_pos, &ips.grad_features, cfg.lambda_mps);
            }
            if cfg.enable_cps {
                let cps = cps_loss(
                    &domain_features,
                    &rows,
                    &self.cluster_sets,
                    ds.num_sources,
                    cfg.ssl.tau,
                    &cfg.cps,
                )?;
                out.cps = cps.value;
                scatter_add(&mut grad_f, &domain_pos, &cps.grad_features, cfg.lambda_mps);
            }
            out.weighted_mps = cfg.lambda_mps * (out.ips + out.cps);
        }

        if cfg.ssc_active() {
            match ssc_loss(
                &domain_features,
                &self.support_sets,
                &self.banks,
                ds.num_classes,
                &cfg.support,
            )? {
                SscOutcome::Computed(ssc) => {
                    out.ssc = ssc.value;
                    out.weighted_ssc = cfg.lambda_ssc * ssc.value;
                    scatter_add(&mut grad_f, &domain_pos, &ssc.grad_features, cfg.lambda_ssc);
                }
                SscOutcome::Skipped { .. } => out.ssc_skipped = true,
            }
        }

        if cfg.mi_active() {
            let mi_pos = mi_positions(ds, batch);
            if !mi_pos.is_empty() {
                let priors: Vec<Vec<f64>> = self.priors.iter().map(|p| p.prior.clone()).collect();
                let mi = mi_loss(&self.model.classifiers, &features.select_rows(&mi_pos), &priors)?;
                out.mi = mi.loss.value;
                out.weighted_mi = cfg.lambda_mi * mi.loss.value;
                scatter_add(&mut grad_f, &mi_pos, &mi.loss.grad_features, cfg.lambda_mi);
                for (g, c) in grad_w.iter_mut().zip(&mi.loss.grad_weights) {
                    g.add_scaled(c, cfg.lambda_mi)?;
                }
            }
        }

        out.total = out.cls + out.weighted_mps + out.weighted_ssc + out.weighted_mi;
        Ok((out, grad_f, grad_w))
    }

    /// One optimization step followed, when due, by a refresh.
    pub fn train_step(&mut self, ds: &MultiDomainDataset, cfg: &TrainConfig) -> Result<LossBreakdown> {
        let batch = self.next_batch(cfg);
        let tape = self.model.extractor.forward(&raw_rows(ds, &batch.rows)?)?;
        let features = tape.features().clone();
        let (losses, grad_f, grad_w) = self.objective(ds, cfg, &batch, &features)?;
        if !losses.total.is_finite() {
            return Err(MsfanError::Numeric(format!(
                "objective became {} at step {}",
                losses.total, self.step
            )));
        }

        let mi_pos = mi_positions(ds, &batch);
        let marginals = (cfg.mi_active() && !mi_pos.is_empty()).then(|| {
            let mi_features = features.select_rows(&mi_pos);
            self.model
                .classifiers
                .iter()
                .map(|c| batch_marginal(c, &mi_features))
                .collect::<Vec<_>>()
        });

        self.model.extractor.zero_grad();
        self.model.extractor.backward(&tape, &grad_f)?;
        self.model.extractor.sgd_step(&cfg.sgd)?;
        if cfg.train_classifier_weights {
            for (clf, g) in self.model.classifiers.iter_mut().zip(grad_w) {
                clf.weights.grad = g;
            }
            let mut params: Vec<_> = self.model.classifiers.iter_mut().map(|c| &mut c.weights).collect();
            crate::numerics::sgd_step(&mut params, &cfg.sgd)?;
        }

        if let Some(marginals) = marginals {
            for (tracker, m) in self.priors.iter_mut().zip(&marginals) {
                tracker.observe(m);
            }
        }
        for (&g, f) in batch.rows.iter().zip(features.iter_rows()) {
            let row = self.batch_row(ds, g);
            self.banks[row.domain].momentum_update(row.local, f)?;
        }

        self.step += 1;
        if self.step % cfg.cluster_interval == 0 {
            self.refresh(ds, cfg)?;
        }
        Ok(losses)
    }

    /// Metrics on a fixed probe batch, without touching the state.
    pub fn metrics(&self, ds: &MultiDomainDataset, cfg: &TrainConfig, probe: &ProbeBatch) -> Result<MetricsRecord> {
        let features = self.model.features(ds, &probe.0.rows)?;
        let (losses, _, _) = self.objective(ds, cfg, &probe.0, &features)?;
        let acc = evaluate(&self.model, ds)?;
        let pseudo_label_precision = self
            .support_sets
            .iter()
            .map(|s| {
                let domain = ds.domain_indices(s.domain_id);
                let pseudo: Vec<_> = s
                    .entries
                    .iter()
                    .filter(|e| e.provenance == Provenance::Pseudo)
                    .collect();
                (!pseudo.is_empty()).then(|| {
                    let hits = pseudo
                        .iter()
                        .filter(|e| ds.eval_label(domain[e.index]) == e.label)
                        .count();
                    hits as f64 / pseudo.len() as f64
                })
            })
            .collect();
        Ok(MetricsRecord {
            step: self.step,
            losses,
            acc_max_similarity: acc.max_similarity,
            acc_ensemble: acc.ensemble,
            support_sizes: self.support_sets.iter().map(SupportSet::len).collect(),
            pseudo_label_precision,
        })
    }
}

/// The fixed batch metrics are computed on.
#[derive(Debug, Clone)]
pub struct ProbeBatch(Batch);

impl ProbeBatch {
    pub fn new(ds: &MultiDomainDataset, cfg: &TrainConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_PROBE, 0));
        let per_domain = cfg.batch_size / ds.num_domains().max(1);
        let mut rows = Vec::new();
        for d in 0..ds.num_domains() {
            let mut idx = ds.domain_indices(d);
            idx.shuffle(&mut rng);
            rows.extend(idx.into_iter().take(per_domain));
        }
        let domain_rows = rows.len();
        let mut labeled: Vec<usize> = (0..ds.samples.len())
            .filter(|&i| ds.samples[i].is_labeled)
            .collect();
        labeled.shuffle(&mut rng);
        rows.extend(labeled.into_iter().take(cfg.labeled_batch_size));
        ProbeBatch(Batch { rows, domain_rows })
    }
}

fn mi_positions(ds: &MultiDomainDataset, batch: &Batch) -> Vec<usize> {
    (0..batch.domain_rows)
        .filter(|&p| !ds.samples[batch.rows[p]].is_labeled)
        .collect()
}

fn scatter_add(dst: &mut Matrix, positions: &[usize], src: &Matrix, factor: f64) {
    for (&p, row) in positions.iter().zip(src.iter_rows()) {
        for (d, s) in dst.row_mut(p).iter_mut().zip(row) {
            *d += factor * s;
        }
    }
}

fn raw_rows(ds: &MultiDomainDataset, indices: &[usize]) -> Result<Matrix> {
    let mut m = Matrix::zeros(indices.len(), ds.input_dim);
    for (r, &i) in indices.iter().enumerate() {
        let s = ds
            .samples
            .get(i)
            .ok_or(MsfanError::IndexOutOfRange {
                index: i,
                len: ds.samples.len(),
            })?;
        m.row_mut(r).copy_from_slice(&s.raw);
    }
    Ok(m)
}

/// Runs the full loop. Metrics are recorded at step 0, every `metrics_interval` steps and
/// after the last step.
pub fn train(ds: &MultiDomainDataset, cfg: &TrainConfig) -> Result<(TrainState, Vec<MetricsRecord>)> {
    train_with(ds, cfg, |_| {})
}

/// [`train`], handing every metrics record to `sink` as soon as it exists.
pub fn train_with(
    ds: &MultiDomainDataset,
    cfg: &TrainConfig,
    mut sink: impl FnMut(&MetricsRecord),
) -> Result<(TrainState, Vec<MetricsRecord>)> {
    let mut state = TrainState::new(ds, cfg)?;
    state.refresh(ds, cfg)?;
    let probe = ProbeBatch::new(ds, cfg);
    let mut records = Vec::new();
    let mut record = |state: &TrainState, records: &mut Vec<MetricsRecord>| -> Result<()> {
        let r = state.metrics(ds, cfg, &probe)?;
        sink(&r);
        records.push(r);
        Ok(())
    };
    record(&state, &mut records)?;
    while state.step < cfg.steps {
        state.train_step(ds, cfg)?;
        if state.step % cfg.metrics_interval == 0 || state.step == cfg.steps {
            record(&state, &mut records)?;
        }
    }
    Ok((state, records))
}

/// Target accuracy of pooled-label training alone, scored with ensemble inference.
pub fn source_only_baseline(ds: &MultiDomainDataset, cfg: &TrainConfig) -> Result<f64> {
    let (state, _) = train(ds, &cfg.source_only())?;
    Ok(evaluate(&state.model, ds)?.ensemble)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationStage {
    pub name: &'static str,
    pub config: TrainConfig,
    pub inference: InferenceRule,
}

/// The cumulative stages: combined baseline, then prototype-refreshed classifiers with
/// max-similarity inference, then the prototype losses, MI and finally consistency.
pub fn ablation_stages(cfg: &TrainConfig) -> Vec<AblationStage> {
    let combined = cfg.source_only();
    let multi = TrainConfig {
        enable_weight_refresh: true,
        ..combined.clone()
    };
    let mps = TrainConfig {
        enable_ips: true,
        enable_cps: true,
        ..multi.clone()
    };
    let mi = TrainConfig {
        enable_mi: true,
        ..mps.clone()
    };
    let ssc = TrainConfig {
        enable_ssc: true,
        ..mi.clone()
    };
    vec![
        AblationStage {
            name: "combined",
            config: combined,
            inference: InferenceRule::Ensemble,
        },
        AblationStage {
            name: "multi_classifier",
            config: multi,
            inference: InferenceRule::MaxSimilarity,
        },
        AblationStage {
            name: "mps",
            config: mps,
            inference: InferenceRule::MaxSimilarity,
        },
        AblationStage {
            name: "mi",
            config: mi,
            inference: InferenceRule::MaxSimilarity,
        },
        AblationStage {
            name: "ssc",
            config: ssc,
            inference: InferenceRule::MaxSimilarity,
        },
    ]
}

/// Target accuracy after each cumulative stage.
pub fn run_ablation(ds: &MultiDomainDataset, cfg: &TrainConfig) -> Result<Vec<(&'static str, f64)>> {
    ablation_stages(cfg)
        .into_iter()
        .map(|stage| {
            let (state, _) = train(ds, &stage.config)?;
            Ok((stage.name, evaluate(&state.model, ds)?.get(stage.inference)))
        })
        .collect()
}
