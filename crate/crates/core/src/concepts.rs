//! Ground-truth concept universe and the metrics computed against it.
//!
//! Each concept is one diagonal Gaussian component. The Bayes-optimal
//! classifier over the mixture stands in for an image classifier, a
//! calibrated log-likelihood stands in for a text-image similarity, and the
//! energy distance stands in for a perceptual distance.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{euclidean, Vector};
use crate::rng;

/// Calibrated alignment of ground-truth samples.
pub const ALIGNMENT_REFERENCE: f64 = 30.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub mean: Vector,
    /// Diagonal of the covariance.
    pub var: Vector,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Component>", into = "Vec<Component>")]
pub struct ConceptUniverse {
    components: Vec<Component>,
}

impl TryFrom<Vec<Component>> for ConceptUniverse {
    type Error = Error;

    fn try_from(components: Vec<Component>) -> Result<Self> {
        Self::new(components)
    }
}

impl From<ConceptUniverse> for Vec<Component> {
    fn from(u: ConceptUniverse) -> Self {
        u.components
    }
}

impl ConceptUniverse {
    pub fn new(components: Vec<Component>) -> Result<Self> {
        let first = components
            .first()
            .ok_or_else(|| Error::Config("universe needs at least one component".into()))?;
        let dim = first.mean.len();
        if dim == 0 {
            return Err(Error::Config("components must have positive dimension".into()));
        }
        let mut total = 0.0;
        for (c, comp) in components.iter().enumerate() {
            if comp.mean.len() != dim || comp.var.len() != dim {
                return Err(Error::Config(format!(
                    "component {c}: mean/var must both have dimension {dim}"
                )));
            }
            if !comp.var.iter().all(|v| v.is_finite() && *v > 0.0) {
                return Err(Error::Config(format!("component {c}: variances must be positive")));
            }
            if !comp.mean.iter().all(|m| m.is_finite()) {
                return Err(Error::Config(format!("component {c}: mean must be finite")));
            }
            if !(comp.weight.is_finite() && comp.weight > 0.0) {
                return Err(Error::Config(format!("component {c}: prior must be positive")));
            }
            total += comp.weight;
        }
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("priors sum to {total}, expected 1")));
        }
        Ok(Self { components })
    }

    /// Four concepts at `(±2, ±2)` with covariance `0.1·I` and equal priors.
    pub fn reference() -> Self {
        let means = [[2.0, 2.0], [-2.0, 2.0], [-2.0, -2.0], [2.0, -2.0]];
        Self::new(
            means
                .iter()
                .map(|m| Component {
                    mean: m.to_vec(),
                    var: vec![0.1, 0.1],
                    weight: 0.25,
                })
                .collect(),
        )
        .expect("reference universe is valid")
    }

    /// Appends a component and rescales priors so that they stay
    /// proportional and the new one gets `1/(K+1)` of the mass.
    pub fn with_extra_component(&self, mean: Vector, var: Vector) -> Result<Self> {
        let k = self.components.len() as f64;
        let mut components: Vec<Component> = self
            .components
            .iter()
            .map(|c| Component {
                weight: c.weight * k / (k + 1.0),
                ..c.clone()
            })
            .collect();
        components.push(Component {
            mean,
            var,
            weight: 1.0 / (k + 1.0),
        });
        Self::new(components)
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.components[0].mean.len()
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    pub fn component(&self, c: usize) -> Result<&Component> {
        self.components
            .get(c)
            .ok_or_else(|| Error::Config(format!("concept {c} not in universe of {}", self.len())))
    }

    /// `log N(x; μ_c, Σ_c)`.
    pub fn log_density(&self, c: usize, x: &[f64]) -> f64 {
        let comp = &self.components[c];
        comp.mean
            .iter()
            .zip(&comp.var)
            .zip(x)
            .map(|((m, v), xi)| {
                let d = xi - m;
                -0.5 * ((2.0 * std::f64::consts::PI * v).ln() + d * d / v)
            })
            .sum()
    }

    /// Maximum-posterior concept; ties go to the lowest index.
    pub fn classify(&self, x: &[f64]) -> usize {
        let mut best = 0;
        let mut best_score = f64::NEG_INFINITY;
        for c in 0..self.len() {
            let score = self.components[c].weight.ln() + self.log_density(c, x);
            if score > best_score {
                best = c;
                best_score = score;
            }
        }
        best
    }

    pub fn sample_point<R: rand::Rng + ?Sized>(&self, c: usize, rng: &mut R) -> Vector {
        let comp = &self.components[c];
        comp.mean
            .iter()
            .zip(&comp.var)
            .map(|(m, v)| m + v.sqrt() * rng::normal(rng))
            .collect()
    }

    /// Expected log-density of a point drawn from component `c` itself.
    pub fn expected_self_log_density(&self, c: usize) -> f64 {
        self.components[c]
            .var
            .iter()
            .map(|v| -0.5 * ((2.0 * std::f64::consts::PI * v).ln() + 1.0))
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub points: Vec<Vector>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points_of(&self, concept: usize) -> Vec<Vector> {
        self.points
            .iter()
            .zip(&self.labels)
            .filter(|(_, &l)| l == concept)
            .map(|(p, _)| p.clone())
            .collect()
    }
}

/// Exactly `n_per_concept` draws from every component, grouped by concept.
pub fn sample_dataset(universe: &ConceptUniverse, n_per_concept: usize, seed: u64) -> Result<Dataset> {
    if n_per_concept == 0 {
        return Err(Error::Config("n_per_concept must be at least 1".into()));
    }
    let mut rng = rng::seeded(seed);
    let mut points = Vec::with_capacity(n_per_concept * universe.len());
    let mut labels = Vec::with_capacity(points.capacity());
    for c in 0..universe.len() {
        for _ in 0..n_per_concept {
            points.push(universe.sample_point(c, &mut rng));
            labels.push(c);
        }
    }
    Ok(Dataset { points, labels })
}

/// Fraction of samples the Bayes oracle assigns to `target`.
pub fn accuracy(universe: &ConceptUniverse, samples: &[Vector], target: usize) -> Result<f64> {
    Ok(confusion_row(universe, samples)?.get(target).copied().unwrap_or(0.0))
}

/// Share of samples assigned to each concept.
pub fn confusion_row(universe: &ConceptUniverse, samples: &[Vector]) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::EmptySet("confusion_row"));
    }
    let mut counts = vec![0usize; universe.len()];
    for s in samples {
        counts[universe.classify(s)] += 1;
    }
    let n = samples.len() as f64;
    Ok(counts.into_iter().map(|c| c as f64 / n).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Alignment {
    /// Calibrated so that the target component's own samples score
    /// [`ALIGNMENT_REFERENCE`] in expectation.
    pub score: f64,
    pub mean_log_likelihood: f64,
}

/// Mean log-likelihood under the target component, shifted so that the
/// component's expected self log-likelihood maps to 30.
///
/// The offset is the closed-form expectation `−½ Σ_j (ln 2πσ_j² + 1)`,
/// i.e. the infinite-sample limit of calibrating on ground-truth draws.
pub fn alignment_score(universe: &ConceptUniverse, samples: &[Vector], target: usize) -> Result<Alignment> {
    if samples.is_empty() {
        return Err(Error::EmptySet("alignment_score"));
    }
    universe.component(target)?;
    let mean = samples.iter().map(|s| universe.log_density(target, s)).sum::<f64>() / samples.len() as f64;
    Ok(Alignment {
        score: ALIGNMENT_REFERENCE + mean - universe.expected_self_log_density(target),
        mean_log_likelihood: mean,
    })
}

fn mean_cross_distance(a: &[Vector], b: &[Vector]) -> f64 {
    let row_sums: Vec<f64> = a
        .par_iter()
        .map(|x| b.iter().map(|y| euclidean(x, y)).sum::<f64>())
        .collect();
    row_sums.iter().sum::<f64>() / (a.len() as f64 * b.len() as f64)
}

/// V-statistic energy distance `2E‖X−Y‖ − E‖X−X′‖ − E‖Y−Y′‖`.
pub fn energy_distance(a: &[Vector], b: &[Vector]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptySet("energy_distance"));
    }
    let e = 2.0 * mean_cross_distance(a, b) - mean_cross_distance(a, a) - mean_cross_distance(b, b);
    // Rounding can leave a tiny negative for identical sets.
    Ok(e.max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyTest {
    pub statistic: f64,
    /// `(1 − alpha)` quantile of the permutation distribution.
    pub threshold: f64,
    pub p_value: f64,
    pub permutations: usize,
}

impl EnergyTest {
    pub fn same_distribution(&self) -> bool {
        self.statistic <= self.threshold
    }
}

/// Permutation two-sample energy test. The threshold calibrates what
/// "below the same-distribution level" means for the given set sizes.
pub fn energy_test(a: &[Vector], b: &[Vector], permutations: usize, alpha: f64, seed: u64) -> Result<EnergyTest> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptySet("energy_test"));
    }
    if permutations == 0 || !(0.0..1.0).contains(&alpha) {
        return Err(Error::Config(
            "energy_test needs permutations ≥ 1 and alpha in [0, 1)".into(),
        ));
    }
    let pooled: Vec<&Vector> = a.iter().chain(b).collect();
    let n = pooled.len();
    let dist: Vec<f64> = (0..n)
        .into_par_iter()
        .flat_map_iter(|i| {
            let pi = pooled[i];
            pooled.iter().map(move |pj| euclidean(pi, pj))
        })
        .collect();
    let split = a.len();
    let stat_for = |order: &[usize]| -> f64 {
        let (left, right) = order.split_at(split);
        let block = |xs: &[usize], ys: &[usize]| -> f64 {
            let mut s = 0.0;
            for &i in xs {
                for &j in ys {
                    s += dist[i * n + j];
                }
            }
            s / (xs.len() as f64 * ys.len() as f64)
        };
        (2.0 * block(left, right) - block(left, left) - block(right, right)).max(0.0)
    };

    let identity: Vec<usize> = (0..n).collect();
    let statistic = stat_for(&identity);
    let mut rng = rng::seeded(seed);
    let orders: Vec<Vec<usize>> = (0..permutations)
        .map(|_| {
            let mut o = identity.clone();
            o.shuffle(&mut rng);
            o
        })
        .collect();
    let mut null: Vec<f64> = orders.par_iter().map(|o| stat_for(o)).collect();
    let exceed = null.iter().filter(|&&s| s >= statistic).count();
    null.sort_by(f64::total_cmp);
    let idx = (((1.0 - alpha) * permutations as f64).ceil() as usize).clamp(1, permutations) - 1;
    Ok(EnergyTest {
        statistic,
        threshold: null[idx],
        p_value: (exceed + 1) as f64 / (permutations + 1) as f64,
        permutations,
    })
}
