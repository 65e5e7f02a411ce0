//! Reactivation probes mapping an erased model θ′ to θ″.
//!
//! The gradient-guided probe regresses the erased model onto a reverse-guided
//! target built from a guiding checkpoint; the instance-personalization probe
//! binds a fresh token to a handful of reference samples with a
//! prior-preservation term.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::fit::{FitBatch, Fitter};
use crate::diffusion::{noise_with, sample, ConditionalDenoiser, RowSet, TrainableMask};
use crate::erasure::{draw_latents, param_delta, ParamDelta, DEFAULT_UPDATE_THRESHOLD};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Vector};
use crate::rng;

#[derive(Debug, Clone)]
pub struct ProbeOutcome {
    pub model: ConditionalDenoiser,
    pub delta: ParamDelta,
    pub loss_trace: Vec<f64>,
    /// Token to sample when evaluating the reinstated concept.
    pub token: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradientProbeConfig {
    pub target: usize,
    /// Anchor concept c*; `None` means the null token.
    pub anchor: Option<usize>,
    pub gamma: f64,
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Defaults to the whole MLP plus the target embedding row.
    pub mask: Option<TrainableMask>,
    pub seed: u64,
    /// Anchor-token samples drawn once from the erased model as the clean
    /// end of the probe latents.
    pub latent_pool: usize,
}

impl Default for GradientProbeConfig {
    fn default() -> Self {
        Self::new(0)
    }
}

impl GradientProbeConfig {
    pub fn new(target: usize) -> Self {
        Self {
            target,
            anchor: None,
            gamma: 0.8,
            steps: 200,
            lr: 5e-5,
            batch_size: 128,
            mask: None,
            seed: 0,
            latent_pool: 512,
        }
    }

    pub fn effective_mask(&self) -> TrainableMask {
        self.mask
            .clone()
            .unwrap_or_else(|| TrainableMask::mlp_and_rows(vec![self.target]))
    }
}

/// `ε_g(z, c*, t) + γ·(ε_g(z, c, t) − ε_g(z, ∅, t))` on the guiding model.
pub fn build_reverse_target(
    guiding: &ConditionalDenoiser,
    z: &[f64],
    target: usize,
    anchor: usize,
    t: usize,
    gamma: f64,
) -> Result<Vector> {
    let anchor_pred = guiding.predict(z, anchor, t)?;
    let cond = guiding.predict(z, target, t)?;
    let uncond = guiding.predict(z, guiding.null_token(), t)?;
    Ok(combine(anchor_pred, &cond, &uncond, gamma))
}

fn combine(mut anchor: Vector, cond: &[f64], uncond: &[f64], gamma: f64) -> Vector {
    for ((a, c), u) in anchor.iter_mut().zip(cond).zip(uncond) {
        *a += gamma * (c - u);
    }
    anchor
}

pub(crate) fn reverse_targets(
    guiding: &ConditionalDenoiser,
    z: &Matrix,
    ts: &[usize],
    target: usize,
    anchor: usize,
    gamma: f64,
) -> Result<Matrix> {
    let n = z.rows();
    let anchor_pred = guiding.predict_batch(z, &vec![anchor; n], ts)?;
    let cond = guiding.predict_batch(z, &vec![target; n], ts)?;
    let uncond = guiding.predict_batch(z, &vec![guiding.null_token(); n], ts)?;
    let (rows, cols) = anchor_pred.shape();
    Matrix::from_vec(
        rows,
        cols,
        combine(anchor_pred.into_vec(), cond.as_slice(), uncond.as_slice(), gamma),
    )
}

/// Fine-tunes a copy of `erased` so that its target-token predictions match
/// the reverse-guided target of `guiding`. No ground-truth data is used: the
/// latents are noised samples the erased model produces for the anchor.
pub fn probe_gradient_guided(
    erased: &ConditionalDenoiser,
    guiding: &ConditionalDenoiser,
    config: &GradientProbeConfig,
) -> Result<ProbeOutcome> {
    erased.check_compatible(guiding)?;
    if config.target >= erased.num_concepts() {
        return Err(Error::Config(format!(
            "probe target {} is not a concept",
            config.target
        )));
    }
    let anchor = config.anchor.unwrap_or(erased.null_token());
    guiding.check_token(anchor)?;
    erased.check_token(anchor)?;
    if !(config.gamma.is_finite() && config.gamma >= 0.0) {
        return Err(Error::Config(format!(
            "gamma must be finite and ≥ 0, got {}",
            config.gamma
        )));
    }
    if config.batch_size == 0 || config.latent_pool == 0 {
        return Err(Error::Config("batch_size and latent_pool must be positive".into()));
    }
    let mut tuned = erased.clone();
    if config.steps == 0 {
        return Ok(ProbeOutcome {
            model: tuned,
            delta: ParamDelta::zero(DEFAULT_UPDATE_THRESHOLD),
            loss_trace: vec![],
            token: config.target,
        });
    }
    let pool = sample(erased, anchor, config.latent_pool, rng::derive(config.seed, 11))?;
    let mut rng = rng::seeded(rng::derive(config.seed, 12));
    let mut fitter = Fitter::new(&tuned, &config.effective_mask(), config.lr)?;
    let weight = 1.0 / config.batch_size as f64;
    let mut loss_trace = Vec::with_capacity(config.steps);
    for _ in 0..config.steps {
        let (z, ts) = draw_latents(erased, &pool, config.batch_size, &mut rng);
        let targets = reverse_targets(guiding, &z, &ts, config.target, anchor, config.gamma)?;
        let batch = FitBatch {
            tokens: vec![config.target; z.rows()],
            weights: vec![weight; z.rows()],
            z,
            ts,
            targets,
        };
        loss_trace.push(fitter.step(&mut tuned, &batch)?);
    }
    let delta = param_delta(erased, &tuned, DEFAULT_UPDATE_THRESHOLD)?;
    Ok(ProbeOutcome {
        model: tuned,
        delta,
        loss_trace,
        token: config.target,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RareTokenInit {
    /// Copy of this token's row plus N(0, 0.01·I) noise.
    Anchor(usize),
    /// Same as `Anchor` with the null token.
    Null,
    /// N(0, I).
    Random,
}

/// Standard deviation of the perturbation added to an anchor-initialized
/// rare token.
pub const RARE_TOKEN_INIT_STD: f64 = 0.1;

/// Appends a rare-token row and returns the extended model with its index.
pub fn bind_rare_token(
    model: &ConditionalDenoiser,
    init: RareTokenInit,
    seed: u64,
) -> Result<(ConditionalDenoiser, usize)> {
    let mut rng = rng::seeded(seed);
    let width = model.spec().concept_dim;
    let source = match init {
        RareTokenInit::Anchor(token) => Some(token),
        RareTokenInit::Null => Some(model.null_token()),
        RareTokenInit::Random => None,
    };
    let row: Vector = match source {
        Some(token) => model
            .embedding(token)?
            .iter()
            .map(|v| v + RARE_TOKEN_INIT_STD * rng::normal(&mut rng))
            .collect(),
        None => rng::normal_vec(&mut rng, width),
    };
    let mut out = model.clone();
    let index = out.push_embedding(&row)?;
    Ok((out, index))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PersonalizationConfig {
    /// Concept the reference set depicts; recorded with the bound token.
    pub target: usize,
    pub reference: Vec<Vector>,
    /// Token of the class prompt whose behaviour the prior term preserves.
    pub class_token: usize,
    pub lambda_prior: f64,
    pub prior_size: usize,
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Defaults to the whole MLP plus the new token row.
    pub mask: Option<TrainableMask>,
    pub init: RareTokenInit,
    pub seed: u64,
}

impl Default for PersonalizationConfig {
    fn default() -> Self {
        Self::new(0, vec![])
    }
}

impl PersonalizationConfig {
    pub fn new(target: usize, reference: Vec<Vector>) -> Self {
        Self {
            target,
            reference,
            class_token: target,
            lambda_prior: 1.0,
            prior_size: 64,
            steps: 500,
            lr: 5e-4,
            batch_size: 128,
            mask: None,
            init: RareTokenInit::Null,
            seed: 0,
        }
    }
}

/// Binds a rare token `v*` and fine-tunes on
/// `E‖ε − ε(z_t, v*, t)‖²` over the reference set plus
/// `λ_prior·E‖ε − ε(z_t, class, t)‖²` over a prior set generated once from
/// the erased model under the class token.
///
/// The reported delta compares against the erased model with the freshly
/// bound row, so both vectors share one layout.
pub fn probe_instance_personalization(
    erased: &ConditionalDenoiser,
    config: &PersonalizationConfig,
) -> Result<ProbeOutcome> {
    if config.reference.is_empty() {
        return Err(Error::EmptySet("probe_instance_personalization reference set"));
    }
    if let Some(bad) = config.reference.iter().find(|r| r.len() != erased.data_dim()) {
        return Err(Error::Shape {
            context: "personalization reference point",
            expected: erased.data_dim(),
            found: bad.len(),
        });
    }
    erased.check_token(config.class_token)?;
    if !(config.lambda_prior.is_finite() && config.lambda_prior >= 0.0) {
        return Err(Error::Config("lambda_prior must be finite and ≥ 0".into()));
    }
    if config.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let use_prior = config.lambda_prior > 0.0 && config.prior_size > 0;
    let (bound, token) = bind_rare_token(erased, config.init, rng::derive(config.seed, 21))?;
    let mut tuned = bound.clone();
    if config.steps == 0 {
        return Ok(ProbeOutcome {
            model: tuned,
            delta: ParamDelta::zero(DEFAULT_UPDATE_THRESHOLD),
            loss_trace: vec![],
            token,
        });
    }
    let prior_set = if use_prior {
        sample(
            erased,
            config.class_token,
            config.prior_size,
            rng::derive(config.seed, 22),
        )?
    } else {
        vec![]
    };
    let mask = config.mask.clone().unwrap_or(TrainableMask {
        mlp: true,
        embedding_rows: RowSet::Rows(vec![token]),
    });
    let mut fitter = Fitter::new(&tuned, &mask, config.lr)?;
    let mut rng = rng::seeded(rng::derive(config.seed, 23));
    let (n_inst, n_prior) = if use_prior {
        let half = (config.batch_size / 2).max(1);
        (half, config.batch_size.saturating_sub(half).max(1))
    } else {
        (config.batch_size, 0)
    };
    let steps_t = tuned.schedule().steps();
    let d = tuned.data_dim();
    let mut loss_trace = Vec::with_capacity(config.steps);
    for _ in 0..config.steps {
        let mut batch = FitBatch::with_capacity(n_inst + n_prior, d);
        let groups = [
            (&config.reference, token, n_inst, 1.0),
            (&prior_set, config.class_token, n_prior, config.lambda_prior),
        ];
        for (set, tok, count, scale) in groups {
            for _ in 0..count {
                let x0 = &set[rng.random_range(0..set.len())];
                let t = rng.random_range(1..=steps_t);
                let eps = rng::normal_vec(&mut rng, d);
                let z = noise_with(tuned.schedule().alpha_bar(t), x0, &eps);
                batch.push(&z, tok, t, &eps, scale / count as f64)?;
            }
        }
        loss_trace.push(fitter.step(&mut tuned, &batch)?);
    }
    let delta = param_delta(&bound, &tuned, DEFAULT_UPDATE_THRESHOLD)?;
    Ok(ProbeOutcome {
        model: tuned,
        delta,
        loss_trace,
        token,
    })
}
