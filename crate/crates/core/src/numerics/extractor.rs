use rand::Rng;

use crate::error::{MsfanError, Result};

use super::matrix::{dot, norm, Matrix};
use super::optim::{sgd_step, Param, SgdConfig};

/// Shared backbone: `x → ReLU(W1·x + b1) → W2·h + b2 → ℓ2-normalize`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureExtractor {
    pub w1: Param,
    pub b1: Param,
    pub w2: Param,
    pub b2: Param,
}

/// Intermediate values recorded by [`FeatureExtractor::forward`], sufficient to
/// backpropagate a gradient taken with respect to the normalized features.
#[derive(Debug, Clone)]
pub struct Tape {
    input: Matrix,
    pre_activation: Matrix,
    hidden: Matrix,
    pre_norms: Vec<f64>,
    features: Matrix,
}

impl Tape {
    pub fn features(&self) -> &Matrix {
        &self.features
    }
}

fn glorot_uniform<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    Matrix::from_vec(rows, cols, data).expect("finite by construction")
}

impl FeatureExtractor {
    /// Glorot-uniform weights, zero biases.
    pub fn new<R: Rng + ?Sized>(input_dim: usize, hidden_dim: usize, feature_dim: usize, rng: &mut R) -> Self {
        FeatureExtractor {
            w1: Param::new(glorot_uniform(hidden_dim, input_dim, rng)),
            b1: Param::new(Matrix::zeros(1, hidden_dim)),
            w2: Param::new(glorot_uniform(feature_dim, hidden_dim, rng)),
            b2: Param::new(Matrix::zeros(1, feature_dim)),
        }
    }

    pub fn from_parameters(w1: Matrix, b1: Vec<f64>, w2: Matrix, b2: Vec<f64>) -> Result<Self> {
        let (h, _) = w1.shape();
        let (d, h2) = w2.shape();
        if b1.len() != h || h2 != h || b2.len() != d {
            return Err(MsfanError::Dimension(format!(
                "inconsistent extractor shapes: W1 {:?}, b1 {}, W2 {:?}, b2 {}",
                w1.shape(),
                b1.len(),
                w2.shape(),
                b2.len()
            )));
        }
        Ok(FeatureExtractor {
            w1: Param::new(w1),
            b1: Param::new(Matrix::from_vec(1, h, b1)?),
            w2: Param::new(w2),
            b2: Param::new(Matrix::from_vec(1, d, b2)?),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.w1.value.cols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.value.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.w2.value.rows()
    }

    pub fn params(&self) -> [&Param; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn params_mut(&mut self) -> [&mut Param; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(Param::zero_grad);
    }

    /// Runs the batch through the network and records a tape for [`Self::backward`].
    pub fn forward(&self, batch: &Matrix) -> Result<Tape> {
        if batch.cols() != self.input_dim() {
            return Err(MsfanError::Dimension(format!(
                "batch has {} columns, extractor expects {}",
                batch.cols(),
                self.input_dim()
            )));
        }
        if batch.rows() == 0 {
            return Err(MsfanError::Dimension("empty batch".into()));
        }
        let mut pre_activation = batch.matmul_transposed(&self.w1.value)?;
        let b1 = self.b1.value.row(0);
        for i in 0..pre_activation.rows() {
            for (z, b) in pre_activation.row_mut(i).iter_mut().zip(b1) {
                *z += b;
            }
        }
        let mut hidden = pre_activation.clone();
        hidden.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));

        let mut features = hidden.matmul_transposed(&self.w2.value)?;
        let b2 = self.b2.value.row(0);
        let mut pre_norms = Vec::with_capacity(features.rows());
        for i in 0..features.rows() {
            let row = features.row_mut(i);
            for (z, b) in row.iter_mut().zip(b2) {
                *z += b;
            }
            let n = norm(row);
            if !(n > 0.0) || !n.is_finite() {
                return Err(MsfanError::Degenerate(format!(
                    "row {i} has norm {n} before ℓ2 normalization"
                )));
            }
            row.iter_mut().for_each(|v| *v /= n);
            pre_norms.push(n);
        }
        Ok(Tape {
            input: batch.clone(),
            pre_activation,
            hidden,
            pre_norms,
            features,
        })
    }

    /// Convenience wrapper returning only the normalized features.
    pub fn extract(&self, batch: &Matrix) -> Result<Matrix> {
        Ok(self.forward(batch)?.features)
    }

    /// Accumulates parameter gradients for `grad_features = ∂L/∂f` (one row per sample).
    pub fn backward(&mut self, tape: &Tape, grad_features: &Matrix) -> Result<()> {
        if grad_features.shape() != tape.features.shape() {
            return Err(MsfanError::Dimension(format!(
                "gradient shape {:?} does not match features {:?}",
                grad_features.shape(),
                tape.features.shape()
            )));
        }
        let n = tape.features.rows();
        let h = self.hidden_dim();
        let d = self.feature_dim();

        // through the ℓ2 normalization: (g − (g·f)f) / ‖z‖
        let mut grad_pre_norm = Matrix::zeros(n, d);
        for i in 0..n {
            let f = tape.features.row(i);
            let g = grad_features.row(i);
            let radial = dot(g, f);
            let scale = tape.pre_norms[i];
            for ((out, gi), fi) in grad_pre_norm.row_mut(i).iter_mut().zip(g).zip(f) {
                *out = (gi - radial * fi) / scale;
            }
        }

        let mut grad_hidden = Matrix::zeros(n, h);
        for i in 0..n {
            let gz = grad_pre_norm.row(i);
            let a = tape.hidden.row(i);
            for (k, gk) in gz.iter().enumerate() {
                if *gk == 0.0 {
                    continue;
                }
                self.b2.grad[(0, k)] += gk;
                let w_row = self.w2.value.row(k);
                for j in 0..h {
                    self.w2.grad[(k, j)] += gk * a[j];
                    grad_hidden[(i, j)] += gk * w_row[j];
                }
            }
        }

        for i in 0..n {
            let x = tape.input.row(i);
            for j in 0..h {
                if tape.pre_activation[(i, j)] <= 0.0 {
                    continue;
                }
                let g = grad_hidden[(i, j)];
                self.b1.grad[(0, j)] += g;
                for (w, xv) in self.w1.grad.row_mut(j).iter_mut().zip(x) {
                    *w += g * xv;
                }
            }
        }
        Ok(())
    }

    pub fn sgd_step(&mut self, cfg: &SgdConfig) -> Result<()> {
        sgd_step(&mut self.params_mut(), cfg)
    }
}
