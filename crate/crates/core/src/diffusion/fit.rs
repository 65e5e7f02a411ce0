//! Masked Adam fitting of a denoiser to per-item regression targets.
//!
//! Training, erasure and both probes differ only in how they build each
//! batch of `(z_t, token, t, target)`; the optimization step is shared.

use serde::{Deserialize, Serialize};

use super::denoiser::ConditionalDenoiser;
use crate::error::{Error, Result};
use crate::numerics::{AdamConfig, AdamState, Matrix};

/// Which embedding rows are trainable.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowSet {
    None,
    All,
    Rows(Vec<usize>),
}

/// Selects the trainable subset of a denoiser's parameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainableMask {
    pub mlp: bool,
    pub embedding_rows: RowSet,
}

impl TrainableMask {
    pub fn everything() -> Self {
        Self {
            mlp: true,
            embedding_rows: RowSet::All,
        }
    }

    pub fn mlp_and_rows(rows: Vec<usize>) -> Self {
        Self {
            mlp: true,
            embedding_rows: RowSet::Rows(rows),
        }
    }

    /// Indices into [`ConditionalDenoiser::params`], ascending.
    pub fn indices(&self, model: &ConditionalDenoiser) -> Result<Vec<usize>> {
        let mut out = Vec::new();
        if self.mlp {
            out.extend(0..model.mlp().num_params());
        }
        let base = model.embedding_offset();
        let width = model.spec().concept_dim;
        let rows: Vec<usize> = match &self.embedding_rows {
            RowSet::None => vec![],
            RowSet::All => (0..model.num_tokens()).collect(),
            RowSet::Rows(rows) => {
                let mut rows = rows.clone();
                rows.sort_unstable();
                rows.dedup();
                for &r in &rows {
                    model.check_token(r)?;
                }
                rows
            }
        };
        for r in rows {
            out.extend(base + r * width..base + (r + 1) * width);
        }
        if out.is_empty() {
            return Err(Error::Config("trainable mask selects no parameters".into()));
        }
        Ok(out)
    }
}

/// One regression batch. Each row contributes
/// `weight · mean_j (ε_θ(z, token, t)_j − target_j)²` to the loss.
#[derive(Debug, Clone)]
pub(crate) struct FitBatch {
    pub z: Matrix,
    pub tokens: Vec<usize>,
    pub ts: Vec<usize>,
    pub targets: Matrix,
    pub weights: Vec<f64>,
}

impl FitBatch {
    pub fn with_capacity(n: usize, dim: usize) -> Self {
        Self {
            z: Matrix::zeros(0, dim),
            tokens: Vec::with_capacity(n),
            ts: Vec::with_capacity(n),
            targets: Matrix::zeros(0, dim),
            weights: Vec::with_capacity(n),
        }
    }

    pub fn push(&mut self, z: &[f64], token: usize, t: usize, target: &[f64], weight: f64) -> Result<()> {
        self.z.push_row(z)?;
        self.targets.push_row(target)?;
        self.tokens.push(token);
        self.ts.push(t);
        self.weights.push(weight);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }
}

pub(crate) struct Fitter {
    indices: Vec<usize>,
    params: Vec<f64>,
    adam: AdamState,
    step: usize,
}

impl Fitter {
    pub fn new(model: &ConditionalDenoiser, mask: &TrainableMask, lr: f64) -> Result<Self> {
        if !(lr.is_finite() && lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
        }
        let indices = mask.indices(model)?;
        let adam = AdamState::new(indices.len(), AdamConfig::with_lr(lr));
        Ok(Self {
            indices,
            params: model.params(),
            adam,
            step: 0,
        })
    }

    /// Loss and full gradient (all parameters) for a batch, without updating.
    pub fn loss_and_grad(model: &ConditionalDenoiser, batch: &FitBatch) -> Result<(f64, Vec<f64>)> {
        let inputs = model.build_inputs(&batch.z, &batch.tokens, &batch.ts)?;
        let cache = model.mlp().forward_batch_cached(&inputs)?;
        let pred = cache.output();
        let d = model.data_dim() as f64;
        let mut loss = 0.0;
        let mut out_grad = Matrix::zeros(batch.len(), model.data_dim());
        for i in 0..batch.len() {
            let w = batch.weights[i];
            let g = out_grad.row_mut(i);
            for (j, (p, t)) in pred.row(i).iter().zip(batch.targets.row(i)).enumerate() {
                let r = p - t;
                loss += w * r * r / d;
                g[j] = 2.0 * w * r / d;
            }
        }
        let (mlp_grad, input_grad) = model.mlp().backward_batch(&cache, &out_grad)?;
        let mut grad = mlp_grad;
        let width = model.spec().concept_dim;
        let mut emb_grad = vec![0.0; model.num_tokens() * width];
        let dd = model.data_dim();
        for i in 0..batch.len() {
            let row = &mut emb_grad[batch.tokens[i] * width..(batch.tokens[i] + 1) * width];
            for (acc, g) in row.iter_mut().zip(&input_grad.row(i)[dd..dd + width]) {
                *acc += g;
            }
        }
        grad.extend(emb_grad);
        Ok((loss, grad))
    }

    /// One masked Adam step; returns the batch loss before the update.
    pub fn step(&mut self, model: &mut ConditionalDenoiser, batch: &FitBatch) -> Result<f64> {
        let (loss, grad) = Self::loss_and_grad(model, batch)?;
        if !loss.is_finite() {
            return Err(Error::non_finite(format!("loss at optimization step {}", self.step)));
        }
        let mut sub_params: Vec<f64> = self.indices.iter().map(|&i| self.params[i]).collect();
        let sub_grad: Vec<f64> = self.indices.iter().map(|&i| grad[i]).collect();
        self.adam.step(&mut sub_params, &sub_grad).map_err(|e| match e {
            Error::NonFinite { context } => Error::non_finite(format!("{context} at optimization step {}", self.step)),
            other => other,
        })?;
        for (&i, p) in self.indices.iter().zip(sub_params) {
            self.params[i] = p;
        }
        model.set_params(&self.params)?;
        self.step += 1;
        Ok(loss)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::DenoiserSpec;

    #[test]
    fn mask_indices() {
        let model = ConditionalDenoiser::random(DenoiserSpec::reference(), 0).unwrap();
        let n_mlp = model.mlp().num_params();
        let only_row = TrainableMask {
            mlp: false,
            embedding_rows: RowSet::Rows(vec![2]),
        };
        let idx = only_row.indices(&model).unwrap();
        assert_eq!(idx, (n_mlp + 16..n_mlp + 24).collect::<Vec<_>>());
        let none = TrainableMask {
            mlp: false,
            embedding_rows: RowSet::None,
        };
        assert!(none.indices(&model).is_err());
        let bad = TrainableMask {
            mlp: false,
            embedding_rows: RowSet::Rows(vec![9]),
        };
        assert!(matches!(bad.indices(&model), Err(Error::UnknownToken { .. })));
        assert_eq!(
            TrainableMask::everything().indices(&model).unwrap().len(),
            model.num_params()
        );
    }

    #[test]
    fn gradient_matches_finite_differences() {
        // Small network so every coordinate can be checked.
        let spec = DenoiserSpec {
            hidden: vec![6],
            concept_dim: 3,
            time_dim: 2,
            ..DenoiserSpec::reference()
        };
        let model = ConditionalDenoiser::random(spec, 5).unwrap();
        let mut batch = FitBatch::with_capacity(3, 2);
        batch.push(&[0.3, -0.4], 1, 10, &[0.5, 0.1], 0.5).unwrap();
        batch.push(&[1.3, 0.4], 4, 90, &[-0.5, 0.2], 0.25).unwrap();
        batch.push(&[-0.7, 2.0], 1, 40, &[0.0, 1.0], 0.25).unwrap();
        let (_, grad) = Fitter::loss_and_grad(&model, &batch).unwrap();
        let base = model.params();
        let h = 1e-5;
        for i in 0..base.len() {
            let mut m = model.clone();
            let mut p = base.clone();
            p[i] += h;
            m.set_params(&p).unwrap();
            let up = Fitter::loss_and_grad(&m, &batch).unwrap().0;
            p[i] -= 2.0 * h;
            m.set_params(&p).unwrap();
            let down = Fitter::loss_and_grad(&m, &batch).unwrap().0;
            let fd = (up - down) / (2.0 * h);
            let err = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-6);
            assert!(err < 1e-4, "coordinate {i}: fd {fd} analytic {}", grad[i]);
        }
    }
}
