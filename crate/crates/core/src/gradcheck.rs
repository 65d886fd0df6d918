//! Central finite-difference checks of every training loss through the extractor and
//! classifier parameters on small random instances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::bank::{recluster_all, ClusterSet, KMeansConfig, MemoryBank};
use crate::classifier::{cls_loss, mi_loss, CosineClassifier};
use crate::error::Result;
use crate::numerics::{l2_normalize, FeatureExtractor, Matrix, Param};
use crate::ssl_losses::{cps_loss, ips_loss, BatchRow, CpsDirection, CpsOptions, SslConfig};
use crate::support::{
    ssc_loss, support_similarity, Provenance, SscOutcome, SupportConfig, SupportEntry, SupportSet,
};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Denominator floor of the relative error, so entries that are zero up to rounding
/// compare absolutely.
pub const REL_FLOOR: f64 = 1e-6;

const INPUT_DIM: usize = 6;
const HIDDEN_DIM: usize = 8;
const FEATURE_DIM: usize = 8;
const NUM_SOURCES: usize = 2;
const NUM_CLASSES: usize = 3;
const BATCH: usize = 6;
const BANK_ROWS: usize = 5;
const TEMPERATURE: f64 = 0.1;

/// `|a − n| / max(|a|, |n|, REL_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossCheck {
    pub loss: &'static str,
    pub max_relative_error: f64,
    pub entries: usize,
}

impl LossCheck {
    pub fn passed(&self) -> bool {
        self.max_relative_error < TOLERANCE
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checks: Vec<LossCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(LossCheck::passed)
    }
}

struct Params {
    extractor: FeatureExtractor,
    classifiers: Vec<CosineClassifier>,
}

impl Params {
    fn count(&self) -> usize {
        4 + self.classifiers.len()
    }

    fn get(&self, p: usize) -> &Param {
        match p {
            0..4 => self.extractor.params()[p],
            _ => &self.classifiers[p - 4].weights,
        }
    }

    fn get_mut(&mut self, p: usize) -> &mut Param {
        match p {
            0..4 => {
                let [w1, b1, w2, b2] = self.extractor.params_mut();
                [w1, b1, w2, b2].into_iter().nth(p).expect("four extractor parameters")
            }
            _ => &mut self.classifiers[p - 4].weights,
        }
    }
}

struct Instance {
    params: Params,
    input: Matrix,
    rows: Vec<BatchRow>,
    labels: Vec<usize>,
    banks: Vec<MemoryBank>,
    clusters: Vec<ClusterSet>,
    supports: Vec<SupportSet>,
    priors: Vec<Vec<f64>>,
}

fn gaussian<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn unit_rows<R: Rng>(rng: &mut R, n: usize, d: usize) -> Matrix {
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| l2_normalize(&gaussian(rng, d)).expect("a Gaussian draw is nonzero"))
        .collect();
    Matrix::from_rows(&rows).expect("consistent rows")
}

impl Instance {
    fn new(seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut extractor = FeatureExtractor::new(INPUT_DIM, HIDDEN_DIM, FEATURE_DIM, &mut rng);
        // nonzero biases so their gradients are exercised
        for b in [&mut extractor.b1, &mut extractor.b2] {
            for v in b.value.data_mut() {
                *v = 0.1 * rng.sample::<f64, _>(StandardNormal);
            }
        }
        let classifiers = (0..NUM_SOURCES)
            .map(|_| CosineClassifier::new(FEATURE_DIM, NUM_CLASSES, TEMPERATURE, &mut rng))
            .collect();
        let input = Matrix::from_vec(BATCH, INPUT_DIM, gaussian(&mut rng, BATCH * INPUT_DIM))?;
        let domains = NUM_SOURCES + 1;
        let rows = (0..BATCH)
            .map(|i| BatchRow {
                domain: i % domains,
                local: rng.random_range(0..BANK_ROWS),
            })
            .collect();
        let labels = (0..BATCH).map(|_| rng.random_range(0..NUM_CLASSES)).collect();
        let banks = (0..domains)
            .map(|d| MemoryBank::new(d, &unit_rows(&mut rng, BANK_ROWS, FEATURE_DIM), 0.5))
            .collect::<Result<Vec<_>>>()?;
        let clusters = recluster_all(&banks, &[2, 3], seed, &KMeansConfig::default())?;
        let supports = (0..NUM_SOURCES)
            .map(|d| SupportSet {
                domain_id: d,
                entries: (0..BANK_ROWS)
                    .map(|index| SupportEntry {
                        index,
                        label: (index + d) % NUM_CLASSES,
                        provenance: Provenance::GroundTruth,
                    })
                    .collect(),
            })
            .collect();
        let priors = (0..NUM_SOURCES)
            .map(|_| {
                let raw: Vec<f64> = (0..NUM_CLASSES).map(|_| rng.random_range(0.2..1.0)).collect();
                let sum: f64 = raw.iter().sum();
                raw.into_iter().map(|v| v / sum).collect()
            })
            .collect();
        Ok(Instance {
            params: Params {
                extractor,
                classifiers,
            },
            input,
            rows,
            labels,
            banks,
            clusters,
            supports,
            priors,
        })
    }

    fn features(&self) -> Result<Matrix> {
        self.params.extractor.extract(&self.input)
    }
}

/// A loss evaluated at the current parameters: value, `∂/∂features` and `∂/∂W_i`.
type Evaluated = (f64, Matrix, Vec<Matrix>);

fn no_weight_grads(inst: &Instance) -> Vec<Matrix> {
    inst.params
        .classifiers
        .iter()
        .map(|c| Matrix::zeros(c.feature_dim(), c.num_classes()))
        .collect()
}

fn eval_cls(inst: &Instance) -> Result<Evaluated> {
    let out = cls_loss(&inst.params.classifiers, &inst.features()?, &inst.labels)?;
    Ok((out.value, out.grad_features, out.grad_weights))
}

fn eval_ips(inst: &Instance) -> Result<Evaluated> {
    let out = ips_loss(&inst.features()?, &inst.rows, &inst.clusters, &SslConfig::default())?;
    Ok((out.value, out.grad_features, no_weight_grads(inst)))
}

fn eval_cps(inst: &Instance) -> Result<Evaluated> {
    let opts = CpsOptions {
        direction: CpsDirection::AllPairs,
        all_clusterings: true,
    };
    let out = cps_loss(&inst.features()?, &inst.rows, &inst.clusters, NUM_SOURCES, 0.1, &opts)?;
    Ok((out.value, out.grad_features, no_weight_grads(inst)))
}

fn eval_ssc(inst: &Instance) -> Result<Evaluated> {
    let out = match ssc_loss(&inst.features()?, &inst.supports, &inst.banks, NUM_CLASSES, &SupportConfig::default())? {
        SscOutcome::Computed(out) => out,
        SscOutcome::Skipped { empty_domain } => unreachable!("support of domain {empty_domain} is populated"),
    };
    Ok((out.value, out.grad_features, no_weight_grads(inst)))
}

fn eval_mi(inst: &Instance) -> Result<Evaluated> {
    let out = mi_loss(&inst.params.classifiers, &inst.features()?, &inst.priors)?;
    Ok((out.loss.value, out.loss.grad_features, out.loss.grad_weights))
}

/// Soft labels of every batch row against every source's support, at the current parameters.
fn soft_labels(inst: &Instance) -> Result<Vec<Vec<Vec<f64>>>> {
    let f = inst.features()?;
    let psi = SupportConfig::default().psi;
    f.iter_rows()
        .map(|row| {
            inst.supports
                .iter()
                .zip(&inst.banks)
                .map(|(s, b)| support_similarity(row, s, b, NUM_CLASSES, psi))
                .collect()
        })
        .collect()
}

/// The consistency loss with every pseudo-label side frozen at `targets`.
fn ssc_frozen_targets(inst: &Instance, targets: &[Vec<Vec<f64>>]) -> Result<f64> {
    let preds = soft_labels(inst)?;
    let mut total = 0.0;
    for (pred, target) in preds.iter().zip(targets) {
        for i in 0..pred.len() {
            for j in 0..pred.len() {
                if i != j {
                    total -= pred[i].iter().zip(&target[j]).map(|(p, t)| t * p.ln()).sum::<f64>();
                }
            }
        }
    }
    Ok(total / preds.len() as f64)
}

/// Compares analytic parameter gradients of `eval` against central differences of `value`.
fn check(
    inst: &mut Instance,
    name: &'static str,
    eval: fn(&Instance) -> Result<Evaluated>,
    value: &dyn Fn(&Instance) -> Result<f64>,
    corrupt: bool,
) -> Result<LossCheck> {
    let (_, grad_f, grad_w) = eval(inst)?;
    let tape = inst.params.extractor.forward(&inst.input)?;
    inst.params.extractor.zero_grad();
    inst.params.extractor.backward(&tape, &grad_f)?;
    let mut analytic: Vec<Vec<f64>> = inst
        .params
        .extractor
        .params()
        .iter()
        .map(|p| p.grad.data().to_vec())
        .collect();
    analytic.extend(grad_w.iter().map(|g| g.data().to_vec()));
    inst.params.extractor.zero_grad();
    if corrupt {
        for v in analytic.iter_mut().flatten() {
            *v = *v * 1.01 + 1e-4;
        }
    }

    let mut worst: f64 = 0.0;
    let mut entries = 0;
    for p in 0..inst.params.count() {
        for k in 0..inst.params.get(p).value.data().len() {
            let original = inst.params.get(p).value.data()[k];
            inst.params.get_mut(p).value.data_mut()[k] = original + STEP;
            let plus = value(inst)?;
            inst.params.get_mut(p).value.data_mut()[k] = original - STEP;
            let minus = value(inst)?;
            inst.params.get_mut(p).value.data_mut()[k] = original;
            let numeric = (plus - minus) / (2.0 * STEP);
            worst = worst.max(relative_error(analytic[p][k], numeric));
            entries += 1;
        }
    }
    Ok(LossCheck {
        loss: name,
        max_relative_error: worst,
        entries,
    })
}

/// Checks L_cls, L_IPS, L_CPS, L_SSC and L_MI on one random instance. With `corrupt`,
/// the analytic gradients are deliberately perturbed so the suite must fail.
pub fn run_suite(seed: u64, corrupt: bool) -> Result<GradCheckReport> {
    let mut inst = Instance::new(seed)?;
    let plain = |eval: fn(&Instance) -> Result<Evaluated>| move |i: &Instance| eval(i).map(|e| e.0);
    let mut checks = vec![
        check(&mut inst, "cls", eval_cls, &plain(eval_cls), corrupt)?,
        check(&mut inst, "ips", eval_ips, &plain(eval_ips), corrupt)?,
        check(&mut inst, "cps", eval_cps, &plain(eval_cps), corrupt)?,
    ];
    let targets = soft_labels(&inst)?;
    checks.push(check(
        &mut inst,
        "ssc",
        eval_ssc,
        &|i: &Instance| ssc_frozen_targets(i, &targets),
        corrupt,
    )?);
    checks.push(check(&mut inst, "mi", eval_mi, &plain(eval_mi), corrupt)?);
    Ok(GradCheckReport { checks })
}
