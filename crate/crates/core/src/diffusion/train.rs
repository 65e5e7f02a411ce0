use rand::Rng;
use serde::{Deserialize, Serialize};

use super::denoiser::ConditionalDenoiser;
use super::fit::{FitBatch, Fitter, TrainableMask};
use super::schedule::noise_with;
use crate::concepts::ConceptUniverse;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Probability of replacing the concept token by the null token.
    pub p_uncond: f64,
    pub mask: TrainableMask,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 10_000,
            batch_size: 128,
            lr: 1e-3,
            seed: 0,
            p_uncond: 0.1,
            mask: TrainableMask::everything(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ConditionalDenoiser,
    pub loss_trace: Vec<f64>,
}

impl TrainOutcome {
    /// Mean of the last `window` losses.
    pub fn running_loss(&self, window: usize) -> Option<f64> {
        running_mean(&self.loss_trace, window)
    }
}

fn running_mean(trace: &[f64], window: usize) -> Option<f64> {
    if trace.is_empty() || window == 0 {
        return None;
    }
    let tail = &trace[trace.len().saturating_sub(window)..];
    Some(tail.iter().sum::<f64>() / tail.len() as f64)
}

/// Draws a concept index according to the universe priors.
fn sample_concept<R: Rng + ?Sized>(universe: &ConceptUniverse, rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (c, comp) in universe.components().iter().enumerate() {
        acc += comp.weight;
        if u < acc {
            return c;
        }
    }
    universe.len() - 1
}

/// Conditional noise-prediction training with null-token dropout.
pub fn train(model: &ConditionalDenoiser, universe: &ConceptUniverse, config: &TrainConfig) -> Result<TrainOutcome> {
    if universe.len() < 2 {
        return Err(Error::Config("training needs at least two concepts".into()));
    }
    if universe.len() != model.num_concepts() || universe.dim() != model.data_dim() {
        return Err(Error::Config(format!(
            "universe has {} concepts in {} dimensions, model expects {} in {}",
            universe.len(),
            universe.dim(),
            model.num_concepts(),
            model.data_dim()
        )));
    }
    if !(0.0..=1.0).contains(&config.p_uncond) {
        return Err(Error::Config("p_uncond must lie in [0, 1]".into()));
    }
    if config.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut model = model.clone();
    if config.steps == 0 {
        return Ok(TrainOutcome {
            model,
            loss_trace: vec![],
        });
    }
    let mut fitter = Fitter::new(&model, &config.mask, config.lr)?;
    let mut rng = rng::seeded(config.seed);
    let steps_t = model.schedule().steps();
    let null = model.null_token();
    let weight = 1.0 / config.batch_size as f64;
    let mut loss_trace = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let mut batch = FitBatch::with_capacity(config.batch_size, model.data_dim());
        for _ in 0..config.batch_size {
            let c = sample_concept(universe, &mut rng);
            let x0 = universe.sample_point(c, &mut rng);
            let t = rng.random_range(1..=steps_t);
            let eps = rng::normal_vec(&mut rng, model.data_dim());
            let token = if rng.random::<f64>() < config.p_uncond { null } else { c };
            let z = noise_with(model.schedule().alpha_bar(t), &x0, &eps);
            batch.push(&z, token, t, &eps, weight)?;
        }
        let loss = fitter.step(&mut model, &batch)?;
        if step % 1000 == 0 {
            log::debug!("train step {step}: loss {loss:.4}");
        }
        loss_trace.push(loss);
    }
    Ok(TrainOutcome { model, loss_trace })
}
