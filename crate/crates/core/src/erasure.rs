//! Erasure of one concept from a trained denoiser, and parameter-delta
//! accounting between any two checkpoints.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::fit::{FitBatch, Fitter};
use crate::diffusion::{noise_with, sample, ConditionalDenoiser, TrainableMask};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Vector};
use crate::rng;

/// Coordinates whose absolute change exceeds this count as "updated".
pub const DEFAULT_UPDATE_THRESHOLD: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErasureMethod {
    /// Fine-tune the target token toward negatively guided predictions.
    EsdStyle,
    /// Closed-form ridge edit of the target embedding row.
    ProjectionEdit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ErasureConfig {
    pub method: ErasureMethod,
    pub target: usize,
    /// `None` means the null token.
    pub anchor: Option<usize>,
    /// Negative guidance strength η.
    pub eta: f64,
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Defaults to the whole MLP plus the target embedding row.
    pub mask: Option<TrainableMask>,
    pub seed: u64,
    /// Ridge weight for the projection edit; `inf` leaves the row untouched.
    /// JSON has no infinity, so `inf` is written as `null`.
    #[serde(with = "infinite_as_null")]
    pub lambda_reg: f64,
    /// Number of target-token samples drawn once from the frozen model as
    /// the clean end of the fine-tuning latents.
    pub latent_pool: usize,
}

mod infinite_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if *v == f64::INFINITY {
            s.serialize_none()
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

impl Default for ErasureConfig {
    fn default() -> Self {
        Self::esd(0)
    }
}

impl ErasureConfig {
    pub fn esd(target: usize) -> Self {
        Self {
            method: ErasureMethod::EsdStyle,
            target,
            anchor: None,
            eta: 1.0,
            steps: 400,
            lr: 3e-4,
            batch_size: 128,
            mask: None,
            seed: 0,
            lambda_reg: 0.0,
            latent_pool: 512,
        }
    }

    pub fn projection(target: usize, lambda_reg: f64) -> Self {
        Self {
            method: ErasureMethod::ProjectionEdit,
            lambda_reg,
            ..Self::esd(target)
        }
    }

    pub fn anchor_token(&self, model: &ConditionalDenoiser) -> usize {
        self.anchor.unwrap_or(model.null_token())
    }

    pub fn effective_mask(&self) -> TrainableMask {
        self.mask
            .clone()
            .unwrap_or_else(|| TrainableMask::mlp_and_rows(vec![self.target]))
    }

    fn validate(&self, model: &ConditionalDenoiser) -> Result<()> {
        if self.target >= model.num_concepts() {
            return Err(Error::Config(format!(
                "erasure target {} is not one of the {} concepts",
                self.target,
                model.num_concepts()
            )));
        }
        let anchor = self.anchor_token(model);
        model.check_token(anchor)?;
        if anchor == self.target {
            return Err(Error::Config("erasure anchor must differ from the target".into()));
        }
        if !(self.eta.is_finite() && self.eta >= 0.0) {
            return Err(Error::Config(format!("eta must be finite and ≥ 0, got {}", self.eta)));
        }
        if self.lambda_reg.is_nan() || self.lambda_reg < 0.0 {
            return Err(Error::Config(format!(
                "lambda_reg must be ≥ 0, got {}",
                self.lambda_reg
            )));
        }
        if self.method == ErasureMethod::EsdStyle && (self.batch_size == 0 || self.latent_pool == 0) {
            return Err(Error::Config("batch_size and latent_pool must be positive".into()));
        }
        Ok(())
    }
}

/// Statistics of the coordinate-wise difference between two parameter
/// vectors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamDelta {
    /// Share of coordinates with `|Δ| > threshold`.
    pub fraction_updated: f64,
    pub mean_abs_change: f64,
    /// `‖Δ‖ / min(‖a‖, ‖b‖)`; symmetric and never below `‖Δ‖/‖a‖`.
    pub relative_frobenius_change: f64,
    pub threshold: f64,
}

impl ParamDelta {
    pub fn zero(threshold: f64) -> Self {
        Self {
            fraction_updated: 0.0,
            mean_abs_change: 0.0,
            relative_frobenius_change: 0.0,
            threshold,
        }
    }
}

pub fn param_delta_vectors(a: &[f64], b: &[f64], threshold: f64) -> Result<ParamDelta> {
    if a.len() != b.len() {
        return Err(Error::Architecture(format!(
            "parameter vectors have {} and {} coordinates",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Ok(ParamDelta::zero(threshold));
    }
    let mut updated = 0usize;
    let mut abs_sum = 0.0;
    let mut diff_sq = 0.0;
    let (mut na, mut nb) = (0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let d = (x - y).abs();
        if d > threshold {
            updated += 1;
        }
        abs_sum += d;
        diff_sq += d * d;
        na += x * x;
        nb += y * y;
    }
    let n = a.len() as f64;
    let relative = if diff_sq == 0.0 {
        0.0
    } else {
        diff_sq.sqrt() / na.sqrt().min(nb.sqrt())
    };
    Ok(ParamDelta {
        fraction_updated: updated as f64 / n,
        mean_abs_change: abs_sum / n,
        relative_frobenius_change: relative,
        threshold,
    })
}

/// Delta over the shared parameter vectorization of two models with the
/// same architecture and token count.
pub fn param_delta(a: &ConditionalDenoiser, b: &ConditionalDenoiser, threshold: f64) -> Result<ParamDelta> {
    a.check_compatible(b)?;
    if a.num_tokens() != b.num_tokens() {
        return Err(Error::Architecture(format!(
            "embedding tables have {} and {} rows",
            a.num_tokens(),
            b.num_tokens()
        )));
    }
    param_delta_vectors(&a.params(), &b.params(), threshold)
}

#[derive(Debug, Clone)]
pub struct ErasureOutcome {
    pub model: ConditionalDenoiser,
    pub delta: ParamDelta,
    pub loss_trace: Vec<f64>,
}

pub fn erase(model: &ConditionalDenoiser, config: &ErasureConfig) -> Result<ErasureOutcome> {
    match config.method {
        ErasureMethod::EsdStyle => erase_esd(model, config),
        ErasureMethod::ProjectionEdit => erase_projection(model, config),
    }
}

/// `ε(z, anchor) − η·(ε(z, c) − ε(z, ∅))` evaluated on a frozen model.
pub(crate) fn negative_targets(
    frozen: &ConditionalDenoiser,
    z: &Matrix,
    ts: &[usize],
    target: usize,
    anchor: usize,
    eta: f64,
) -> Result<Matrix> {
    let n = z.rows();
    let anchor_pred = frozen.predict_batch(z, &vec![anchor; n], ts)?;
    let cond = frozen.predict_batch(z, &vec![target; n], ts)?;
    let uncond = frozen.predict_batch(z, &vec![frozen.null_token(); n], ts)?;
    let mut out = anchor_pred;
    for ((o, c), u) in out
        .as_mut_slice()
        .iter_mut()
        .zip(cond.as_slice())
        .zip(uncond.as_slice())
    {
        *o -= eta * (c - u);
    }
    Ok(out)
}

/// Noised draws `(z_t, t)` whose clean endpoints come from `pool`.
pub(crate) fn draw_latents<R: Rng + ?Sized>(
    model: &ConditionalDenoiser,
    pool: &[Vector],
    n: usize,
    rng: &mut R,
) -> (Matrix, Vec<usize>) {
    let schedule = model.schedule();
    let mut z = Matrix::zeros(n, model.data_dim());
    let mut ts = Vec::with_capacity(n);
    for i in 0..n {
        let x0 = &pool[rng.random_range(0..pool.len())];
        let t = rng.random_range(1..=schedule.steps());
        let eps = rng::normal_vec(rng, model.data_dim());
        z.row_mut(i)
            .copy_from_slice(&noise_with(schedule.alpha_bar(t), x0, &eps));
        ts.push(t);
    }
    (z, ts)
}

/// Fine-tunes a copy of `model` so that the target token predicts the
/// negatively guided noise of the frozen original. Latents are noised
/// samples that the frozen model generates for the target token.
pub fn erase_esd(model: &ConditionalDenoiser, config: &ErasureConfig) -> Result<ErasureOutcome> {
    config.validate(model)?;
    let frozen = model;
    let mut tuned = model.clone();
    if config.steps == 0 {
        return Ok(ErasureOutcome {
            delta: ParamDelta::zero(DEFAULT_UPDATE_THRESHOLD),
            model: tuned,
            loss_trace: vec![],
        });
    }
    let anchor = config.anchor_token(model);
    let pool = sample(frozen, config.target, config.latent_pool, rng::derive(config.seed, 1))?;
    let mut rng = rng::seeded(rng::derive(config.seed, 2));
    let mut fitter = Fitter::new(&tuned, &config.effective_mask(), config.lr)?;
    let weight = 1.0 / config.batch_size as f64;
    let mut loss_trace = Vec::with_capacity(config.steps);
    for _ in 0..config.steps {
        let (z, ts) = draw_latents(frozen, &pool, config.batch_size, &mut rng);
        let targets = negative_targets(frozen, &z, &ts, config.target, anchor, config.eta)?;
        let batch = FitBatch {
            tokens: vec![config.target; z.rows()],
            weights: vec![weight; z.rows()],
            z,
            ts,
            targets,
        };
        loss_trace.push(fitter.step(&mut tuned, &batch)?);
    }
    let delta = param_delta(model, &tuned, DEFAULT_UPDATE_THRESHOLD)?;
    Ok(ErasureOutcome {
        model: tuned,
        delta,
        loss_trace,
    })
}

/// Replaces the target row by the minimizer of
/// `‖r − r_anchor‖² + λ‖r − r_old‖²`, i.e. `(r_anchor + λ·r_old)/(1 + λ)`.
/// The MLP is untouched.
pub fn erase_projection(model: &ConditionalDenoiser, config: &ErasureConfig) -> Result<ErasureOutcome> {
    config.validate(model)?;
    let mut edited = model.clone();
    let lambda = config.lambda_reg;
    if lambda.is_finite() {
        let old = model.embedding(config.target)?;
        let anchor = model.embedding(config.anchor_token(model))?;
        let row: Vector = if lambda == 0.0 {
            anchor.to_vec()
        } else {
            anchor
                .iter()
                .zip(old)
                .map(|(a, o)| (a + lambda * o) / (1.0 + lambda))
                .collect()
        };
        edited.set_embedding(config.target, &row)?;
    }
    let delta = param_delta(model, &edited, DEFAULT_UPDATE_THRESHOLD)?;
    Ok(ErasureOutcome {
        model: edited,
        delta,
        loss_trace: vec![],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::DenoiserSpec;

    fn model() -> ConditionalDenoiser {
        ConditionalDenoiser::random(DenoiserSpec::reference(), 21).unwrap()
    }

    #[test]
    fn delta_examples() {
        let a = vec![0.5; 1000];
        assert_eq!(param_delta_vectors(&a, &a, 1e-6).unwrap(), ParamDelta::zero(1e-6));
        let mut b = a.clone();
        b[17] += 1e-3;
        let d = param_delta_vectors(&a, &b, 1e-6).unwrap();
        assert!((d.fraction_updated - 0.001).abs() < 1e-15);
        assert!((d.mean_abs_change - 1e-6).abs() < 1e-15);
        let r = param_delta_vectors(&b, &a, 1e-6).unwrap();
        assert_eq!(d.mean_abs_change, r.mean_abs_change);
        assert_eq!(d.relative_frobenius_change, r.relative_frobenius_change);
        assert!(param_delta_vectors(&a, &b[1..], 1e-6).is_err());
    }

    #[test]
    fn delta_rejects_different_tables() {
        let a = model();
        let mut b = a.clone();
        b.push_embedding(&[0.0; 8]).unwrap();
        assert!(matches!(param_delta(&a, &b, 1e-6), Err(Error::Architecture(_))));
    }

    #[test]
    fn projection_lambda_zero_copies_anchor() {
        let m = model();
        let out = erase_projection(&m, &ErasureConfig::projection(1, 0.0)).unwrap();
        let z = [0.3, -0.8];
        for t in [1, 50, 100] {
            assert_eq!(
                out.model.predict(&z, 1, t).unwrap(),
                out.model.predict(&z, out.model.null_token(), t).unwrap()
            );
        }
        assert_eq!(out.model.mlp(), m.mlp());
    }

    #[test]
    fn projection_ridge_midpoint_and_limit() {
        let m = model();
        let out = erase_projection(&m, &ErasureConfig::projection(2, 1.0)).unwrap();
        let (old, anchor) = (m.embedding(2).unwrap(), m.embedding(4).unwrap());
        for ((n, o), a) in out.model.embedding(2).unwrap().iter().zip(old).zip(anchor) {
            assert!((n - 0.5 * (o + a)).abs() < 1e-15);
        }
        let changed: Vec<usize> = (0..m.num_tokens())
            .filter(|&r| out.model.embedding(r).unwrap() != m.embedding(r).unwrap())
            .collect();
        assert_eq!(changed, vec![2]);
        let cfg = ErasureConfig::projection(2, f64::INFINITY);
        let json = serde_json::to_string(&cfg).unwrap();
        assert!(json.contains("\"lambda_reg\":null"));
        assert_eq!(serde_json::from_str::<ErasureConfig>(&json).unwrap(), cfg);
        let same = erase_projection(&m, &cfg).unwrap();
        assert_eq!(same.model, m);
        assert_eq!(same.delta, ParamDelta::zero(DEFAULT_UPDATE_THRESHOLD));
    }

    #[test]
    fn config_validation() {
        let m = model();
        let mut c = ErasureConfig::esd(0);
        c.anchor = Some(0);
        assert!(erase(&m, &c).is_err());
        let mut c = ErasureConfig::esd(7);
        assert!(erase(&m, &c).is_err());
        c.target = 0;
        c.eta = -1.0;
        assert!(erase(&m, &c).is_err());
    }

    #[test]
    fn eta_zero_targets_are_anchor_predictions() {
        let m = model();
        let z = Matrix::from_rows(&[vec![0.1, 0.2], vec![2.0, -1.0]]).unwrap();
        let ts = [3, 70];
        let t = negative_targets(&m, &z, &ts, 1, m.null_token(), 0.0).unwrap();
        let null = m.predict_batch(&z, &[4, 4], &ts).unwrap();
        assert_eq!(t, null);
    }

    #[test]
    fn esd_respects_mask_and_zero_steps() {
        let m = model();
        let mut c = ErasureConfig::esd(0);
        c.steps = 0;
        let out = erase_esd(&m, &c).unwrap();
        assert_eq!(out.model, m);

        c.steps = 3;
        c.batch_size = 8;
        c.latent_pool = 8;
        c.mask = Some(TrainableMask {
            mlp: false,
            embedding_rows: crate::diffusion::RowSet::Rows(vec![0]),
        });
        let out = erase_esd(&m, &c).unwrap();
        assert_eq!(out.model.mlp(), m.mlp());
        for r in 1..m.num_tokens() {
            assert_eq!(out.model.embedding(r).unwrap(), m.embedding(r).unwrap());
        }
        assert_ne!(out.model.embedding(0).unwrap(), m.embedding(0).unwrap());
        assert_eq!(out.loss_trace.len(), 3);
    }
}
