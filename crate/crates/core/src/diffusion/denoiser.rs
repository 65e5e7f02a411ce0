use serde::{Deserialize, Serialize};

use super::schedule::{NoiseSchedule, ScheduleSpec};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Mlp, Vector};
use crate::rng;

/// Architecture of a [`ConditionalDenoiser`], excluding any rare-token rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserSpec {
    pub data_dim: usize,
    pub concept_dim: usize,
    pub time_dim: usize,
    pub hidden: Vec<usize>,
    pub num_concepts: usize,
    pub schedule: ScheduleSpec,
}

impl Default for DenoiserSpec {
    fn default() -> Self {
        Self::reference()
    }
}

impl DenoiserSpec {
    /// d=2, K=4, T=100, 8-dim concept and time embeddings, two hidden layers of 128.
    pub fn reference() -> Self {
        Self {
            data_dim: 2,
            concept_dim: 8,
            time_dim: 8,
            hidden: vec![128, 128],
            num_concepts: 4,
            schedule: ScheduleSpec {
                steps: 100,
                beta_start: 1e-3,
                beta_end: 0.2,
            },
        }
    }

    pub fn input_dim(&self) -> usize {
        self.data_dim + self.concept_dim + self.time_dim
    }

    pub fn mlp_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.input_dim()];
        sizes.extend(&self.hidden);
        sizes.push(self.data_dim);
        sizes
    }

    fn validate(&self) -> Result<()> {
        if self.data_dim == 0 || self.concept_dim == 0 {
            return Err(Error::Config("data and concept dimensions must be positive".into()));
        }
        if self.time_dim == 0 || !self.time_dim.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "time embedding dimension must be positive and even, got {}",
                self.time_dim
            )));
        }
        if self.num_concepts < 1 {
            return Err(Error::Config("need at least one concept".into()));
        }
        Ok(())
    }
}

/// Sinusoidal time features: `sin(ω_k t)` for `k < dim/2`, then `cos(ω_k t)`,
/// with `ω_k = 2π·2^k / T`.
pub fn time_embedding(t: usize, steps: usize, dim: usize) -> Vector {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for k in 0..half {
        let omega = 2.0 * std::f64::consts::PI * (1u64 << k) as f64 / steps as f64;
        let phase = omega * t as f64;
        out[k] = phase.sin();
        out[half + k] = phase.cos();
    }
    out
}

/// MLP noise predictor conditioned on a concept-embedding row and time.
///
/// Embedding rows `0..K` are concepts, row `K` is the learned null token and
/// rows after it are rare tokens appended by personalization.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalDenoiser {
    spec: DenoiserSpec,
    mlp: Mlp,
    embeddings: Matrix,
    schedule: NoiseSchedule,
    time_table: Matrix,
}

impl ConditionalDenoiser {
    /// Fresh model: Glorot MLP, embedding rows drawn from N(0, I).
    pub fn random(spec: DenoiserSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = rng::seeded(seed);
        let mlp = Mlp::random(&spec.mlp_sizes(), &mut rng)?;
        let rows = spec.num_concepts + 1;
        let embeddings = Matrix::from_vec(
            rows,
            spec.concept_dim,
            rng::normal_vec(&mut rng, rows * spec.concept_dim),
        )?;
        Self::from_parts(spec, mlp, embeddings)
    }

    pub fn from_parts(spec: DenoiserSpec, mlp: Mlp, embeddings: Matrix) -> Result<Self> {
        spec.validate()?;
        if mlp.sizes() != spec.mlp_sizes() {
            return Err(Error::Architecture(format!(
                "network widths {:?} do not match spec {:?}",
                mlp.sizes(),
                spec.mlp_sizes()
            )));
        }
        if embeddings.cols() != spec.concept_dim || embeddings.rows() < spec.num_concepts + 1 {
            return Err(Error::Architecture(format!(
                "embedding table {}×{} cannot hold {} concepts plus null at width {}",
                embeddings.rows(),
                embeddings.cols(),
                spec.num_concepts,
                spec.concept_dim
            )));
        }
        let schedule = NoiseSchedule::from_spec(spec.schedule)?;
        let steps = schedule.steps();
        let mut time_table = Matrix::zeros(steps, spec.time_dim);
        for t in 1..=steps {
            time_table
                .row_mut(t - 1)
                .copy_from_slice(&time_embedding(t, steps, spec.time_dim));
        }
        Ok(Self {
            spec,
            mlp,
            embeddings,
            schedule,
            time_table,
        })
    }

    pub fn spec(&self) -> &DenoiserSpec {
        &self.spec
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn embeddings(&self) -> &Matrix {
        &self.embeddings
    }

    pub fn num_concepts(&self) -> usize {
        self.spec.num_concepts
    }

    pub fn null_token(&self) -> usize {
        self.spec.num_concepts
    }

    pub fn num_tokens(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn data_dim(&self) -> usize {
        self.spec.data_dim
    }

    pub fn check_token(&self, token: usize) -> Result<()> {
        if token >= self.num_tokens() {
            return Err(Error::UnknownToken {
                index: token,
                rows: self.num_tokens(),
            });
        }
        Ok(())
    }

    pub fn embedding(&self, token: usize) -> Result<&[f64]> {
        self.check_token(token)?;
        Ok(self.embeddings.row(token))
    }

    pub fn set_embedding(&mut self, token: usize, row: &[f64]) -> Result<()> {
        self.check_token(token)?;
        if row.len() != self.spec.concept_dim {
            return Err(Error::Shape {
                context: "set_embedding",
                expected: self.spec.concept_dim,
                found: row.len(),
            });
        }
        self.embeddings.row_mut(token).copy_from_slice(row);
        Ok(())
    }

    /// Appends an embedding row and returns its token index.
    pub fn push_embedding(&mut self, row: &[f64]) -> Result<usize> {
        self.embeddings.push_row(row)?;
        Ok(self.embeddings.rows() - 1)
    }

    pub fn num_params(&self) -> usize {
        self.mlp.num_params() + self.embeddings.rows() * self.embeddings.cols()
    }

    /// Offset of the embedding table within [`ConditionalDenoiser::params`].
    pub fn embedding_offset(&self) -> usize {
        self.mlp.num_params()
    }

    /// All parameters: MLP (layer-major, weights before bias) followed by
    /// the embedding table row by row.
    pub fn params(&self) -> Vector {
        let mut p = self.mlp.flatten();
        p.extend_from_slice(self.embeddings.as_slice());
        p
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(Error::Shape {
                context: "ConditionalDenoiser::set_params",
                expected: self.num_params(),
                found: params.len(),
            });
        }
        let split = self.mlp.num_params();
        self.mlp.set_params(&params[..split])?;
        self.embeddings.as_mut_slice().copy_from_slice(&params[split..]);
        Ok(())
    }

    /// Errors unless `other` shares this model's architecture, allowing a
    /// different number of rare-token rows.
    pub fn check_compatible(&self, other: &ConditionalDenoiser) -> Result<()> {
        if self.spec != other.spec {
            return Err(Error::Architecture(format!(
                "specs differ: {:?} vs {:?}",
                self.spec, other.spec
            )));
        }
        Ok(())
    }

    /// Concatenation `[z, τ(token), time(t)]`.
    pub fn input_row(&self, z: &[f64], token: usize, t: usize) -> Result<Vector> {
        self.check_token(token)?;
        self.schedule.check_step(t)?;
        if z.len() != self.spec.data_dim {
            return Err(Error::Shape {
                context: "denoiser latent",
                expected: self.spec.data_dim,
                found: z.len(),
            });
        }
        let mut row = Vec::with_capacity(self.spec.input_dim());
        row.extend_from_slice(z);
        row.extend_from_slice(self.embeddings.row(token));
        row.extend_from_slice(self.time_table.row(t - 1));
        Ok(row)
    }

    /// `ε_θ(z, token, t)`.
    pub fn predict(&self, z: &[f64], token: usize, t: usize) -> Result<Vector> {
        self.mlp.forward(&self.input_row(z, token, t)?)
    }

    pub(crate) fn build_inputs(&self, z: &Matrix, tokens: &[usize], ts: &[usize]) -> Result<Matrix> {
        let (batch, d) = z.shape();
        if d != self.spec.data_dim || tokens.len() != batch || ts.len() != batch {
            return Err(Error::Shape {
                context: "denoiser batch",
                expected: batch,
                found: tokens.len().min(ts.len()),
            });
        }
        let cd = self.spec.concept_dim;
        let mut x = Matrix::zeros(batch, self.spec.input_dim());
        for i in 0..batch {
            self.check_token(tokens[i])?;
            self.schedule.check_step(ts[i])?;
            let row = x.row_mut(i);
            row[..d].copy_from_slice(z.row(i));
            row[d..d + cd].copy_from_slice(self.embeddings.row(tokens[i]));
            row[d + cd..].copy_from_slice(self.time_table.row(ts[i] - 1));
        }
        Ok(x)
    }

    /// Batched prediction, one row per `(z, token, t)` triple.
    pub fn predict_batch(&self, z: &Matrix, tokens: &[usize], ts: &[usize]) -> Result<Matrix> {
        self.mlp.forward_batch(&self.build_inputs(z, tokens, ts)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Layer;

    fn tiny_spec() -> DenoiserSpec {
        DenoiserSpec {
            data_dim: 2,
            concept_dim: 2,
            time_dim: 2,
            hidden: vec![],
            num_concepts: 2,
            schedule: ScheduleSpec {
                steps: 4,
                beta_start: 0.1,
                beta_end: 0.2,
            },
        }
    }

    #[test]
    fn time_embedding_layout() {
        let e = time_embedding(25, 100, 8);
        let phase = 2.0 * std::f64::consts::PI * 25.0 / 100.0;
        assert!((e[0] - phase.sin()).abs() < 1e-15);
        assert!((e[4] - phase.cos()).abs() < 1e-15);
        assert!((e[3] - (8.0 * phase).sin()).abs() < 1e-12);
    }

    #[test]
    fn stub_linear_model_matches_hand_computation() {
        let spec = tiny_spec();
        // 6 inputs → 2 outputs; weight picks z and the first embedding coordinate.
        let w = Matrix::from_vec(
            2,
            6,
            vec![
                1.0, 0.0, 2.0, 0.0, 0.0, 0.0, //
                0.0, 1.0, 0.0, 0.0, 0.0, 3.0,
            ],
        )
        .unwrap();
        let mlp = Mlp::new(vec![Layer {
            weight: w,
            bias: vec![0.5, -0.5],
        }])
        .unwrap();
        let emb = Matrix::from_vec(3, 2, vec![1.0, 0.0, -1.0, 0.0, 0.25, 0.0]).unwrap();
        let model = ConditionalDenoiser::from_parts(spec, mlp, emb).unwrap();
        let z = [0.3, -0.2];
        let t = 1;
        let cos_t = (2.0 * std::f64::consts::PI * t as f64 / 4.0).cos();
        let out = model.predict(&z, 1, t).unwrap();
        assert!((out[0] - (0.3 + 2.0 * -1.0 + 0.5)).abs() < 1e-15);
        assert!((out[1] - (-0.2 + 3.0 * cos_t - 0.5)).abs() < 1e-15);
    }

    #[test]
    fn predictions_deterministic_and_token_sensitive() {
        let model = ConditionalDenoiser::random(DenoiserSpec::reference(), 1).unwrap();
        let z = [0.4, -1.3];
        let a = model.predict(&z, 0, 50).unwrap();
        assert_eq!(a, model.predict(&z, 0, 50).unwrap());
        let null = model.predict(&z, model.null_token(), 50).unwrap();
        assert_ne!(a, null);
        assert!(matches!(
            model.predict(&z, 5, 50),
            Err(Error::UnknownToken { index: 5, rows: 5 })
        ));
        assert!(model.predict(&z, 0, 0).is_err());
    }

    #[test]
    fn batch_prediction_agrees_with_single() {
        let model = ConditionalDenoiser::random(DenoiserSpec::reference(), 2).unwrap();
        let z = Matrix::from_rows(&[vec![0.1, 0.2], vec![-1.0, 2.0], vec![3.0, -0.5]]).unwrap();
        let tokens = [0, 4, 2];
        let ts = [1, 50, 100];
        let batch = model.predict_batch(&z, &tokens, &ts).unwrap();
        for i in 0..3 {
            let single = model.predict(z.row(i), tokens[i], ts[i]).unwrap();
            for (a, b) in single.iter().zip(batch.row(i)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn params_round_trip_and_push_row() {
        let mut model = ConditionalDenoiser::random(DenoiserSpec::reference(), 3).unwrap();
        let p = model.params();
        assert_eq!(p.len(), model.num_params());
        let before: Vec<Vec<f64>> = model.embeddings().to_rows();
        let idx = model.push_embedding(&[0.0; 8]).unwrap();
        assert_eq!(idx, 5);
        assert_eq!(&model.embeddings().to_rows()[..5], &before[..]);
        assert!(model.push_embedding(&[0.0; 7]).is_err());
        let mut other = ConditionalDenoiser::random(DenoiserSpec::reference(), 4).unwrap();
        other.set_params(&p).unwrap();
        assert_eq!(other.params(), p);
    }
}
