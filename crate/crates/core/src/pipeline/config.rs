use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::concepts::ConceptUniverse;
use crate::diffusion::{DenoiserSpec, TrainConfig};
use crate::erasure::{ErasureConfig, ErasureMethod};
use crate::error::{Error, Result};
use crate::numerics::Vector;
use crate::probes::{GradientProbeConfig, PersonalizationConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Accuracy,
    Alignment,
    Energy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluationSpec {
    pub samples_per_concept: usize,
    pub metrics: Vec<Metric>,
    /// Permutations behind the same-distribution threshold.
    pub energy_permutations: usize,
    pub plots: bool,
}

impl Default for EvaluationSpec {
    fn default() -> Self {
        Self {
            samples_per_concept: 500,
            metrics: vec![Metric::Accuracy, Metric::Alignment, Metric::Energy],
            energy_permutations: 200,
            plots: true,
        }
    }
}

impl EvaluationSpec {
    pub fn wants(&self, metric: Metric) -> bool {
        self.metrics.contains(&metric)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeSettings {
    pub gradient: GradientProbeConfig,
    pub personalization: PersonalizationConfig,
    /// Size of the reference set drawn from the universe for personalization
    /// when `personalization.reference` is empty.
    pub reference_size: usize,
}

impl Default for ProbeSettings {
    fn default() -> Self {
        Self {
            gradient: GradientProbeConfig::new(0),
            personalization: PersonalizationConfig::new(0, vec![]),
            reference_size: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbsentConcept {
    pub mean: Vector,
    pub var: Vector,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Scenarios {
    /// Train a second original with this seed and use it as the guiding
    /// model of an extra gradient-guided probe.
    pub alternate_guide_seed: Option<u64>,
    /// A component never shown during training, personalized with the same
    /// budget as the erased concept.
    pub absent_concept: Option<AbsentConcept>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub universe: ConceptUniverse,
    pub model: DenoiserSpec,
    pub train: TrainConfig,
    pub erasure: Vec<ErasureConfig>,
    pub probes: ProbeSettings,
    pub evaluation: EvaluationSpec,
    /// Gradient-guided step budgets of the sweep.
    pub sweep_steps: Vec<usize>,
    pub scenarios: Scenarios,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seeds: (0..5).collect(),
            output_dir: PathBuf::from("runs"),
            universe: ConceptUniverse::reference(),
            model: DenoiserSpec::reference(),
            train: TrainConfig::default(),
            erasure: vec![ErasureConfig::esd(0)],
            probes: ProbeSettings::default(),
            evaluation: EvaluationSpec::default(),
            sweep_steps: vec![20, 50, 200],
            scenarios: Scenarios::default(),
        }
    }
}

impl ExperimentConfig {
    /// The full protocol: five seeds, ESD erasure of concept 0, both probes,
    /// the step sweep, an alternate guiding model and the absent concept.
    pub fn reference() -> Self {
        Self {
            scenarios: Scenarios {
                alternate_guide_seed: Some(1),
                absent_concept: Some(AbsentConcept {
                    mean: vec![8.0, 8.0],
                    var: vec![0.1, 0.1],
                }),
            },
            ..Self::default()
        }
    }

    pub fn from_toml_str(text: &str, path: &Path) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|source| Error::Toml {
            path: path.into(),
            source,
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, path)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        let k = self.universe.len();
        if self.model.num_concepts != k || self.model.data_dim != self.universe.dim() {
            return Err(Error::Config(format!(
                "model expects {} concepts in {} dimensions, universe has {k} in {}",
                self.model.num_concepts,
                self.model.data_dim,
                self.universe.dim()
            )));
        }
        for e in &self.erasure {
            if e.target >= k {
                return Err(Error::Config(format!(
                    "erasure target {} does not exist (K = {k})",
                    e.target
                )));
            }
            if let Some(a) = e.anchor.filter(|&a| a > k) {
                return Err(Error::Config(format!("erasure anchor {a} does not exist")));
            }
            if e.method == ErasureMethod::ProjectionEdit && e.lambda_reg.is_infinite() {
                log::warn!("lambda_reg = inf cannot be written to JSON sidecars and is recorded as null");
            }
        }
        let gp = &self.probes.gradient;
        if gp.target >= k || gp.anchor.is_some_and(|a| a > k) {
            return Err(Error::Config("gradient probe references a missing concept".into()));
        }
        let ip = &self.probes.personalization;
        if ip.target >= k || ip.class_token > k {
            return Err(Error::Config("personalization references a missing concept".into()));
        }
        if ip.reference.is_empty() && self.probes.reference_size == 0 {
            return Err(Error::Config("reference_size must be positive".into()));
        }
        if self.evaluation.samples_per_concept == 0 {
            return Err(Error::Config("samples_per_concept must be positive".into()));
        }
        if let Some(a) = &self.scenarios.absent_concept {
            if a.mean.len() != self.universe.dim() || a.var.len() != self.universe.dim() {
                return Err(Error::Config("absent concept has the wrong dimension".into()));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_toml_is_the_default() {
        let c = ExperimentConfig::from_toml_str("", Path::new("c.toml")).unwrap();
        assert_eq!(c, ExperimentConfig::default());
    }

    #[test]
    fn partial_tables_fill_in() {
        let text = r#"
seeds = [3]
sweep_steps = [0, 10]

[train]
steps = 50

[[erasure]]
method = "projection_edit"
target = 2
lambda_reg = 1.0

[probes.gradient]
gamma = 0.5
"#;
        let c = ExperimentConfig::from_toml_str(text, Path::new("c.toml")).unwrap();
        assert_eq!(c.seeds, vec![3]);
        assert_eq!(c.train.steps, 50);
        assert_eq!(c.train.batch_size, 128);
        assert_eq!(c.erasure[0].method, ErasureMethod::ProjectionEdit);
        assert_eq!(c.erasure[0].target, 2);
        assert_eq!(c.probes.gradient.gamma, 0.5);
        assert_eq!(c.probes.gradient.steps, 200);
    }

    #[test]
    fn universe_from_toml() {
        let text = r#"
[[universe]]
mean = [0.0, 0.0]
var = [0.1, 0.1]
weight = 0.5

[[universe]]
mean = [3.0, 0.0]
var = [0.1, 0.1]
weight = 0.5

[model]
num_concepts = 2
"#;
        let c = ExperimentConfig::from_toml_str(text, Path::new("c.toml")).unwrap();
        assert_eq!(c.universe.len(), 2);
    }

    #[test]
    fn invalid_configs() {
        let p = Path::new("c.toml");
        assert!(matches!(
            ExperimentConfig::from_toml_str("seeds = []", p),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            ExperimentConfig::from_toml_str("[[erasure]]\ntarget = 7", p),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            ExperimentConfig::from_toml_str("seeds = [", p),
            Err(Error::Toml { .. })
        ));
        assert!(matches!(
            ExperimentConfig::load(Path::new("/nonexistent/c.toml")),
            Err(Error::Io { .. })
        ));
    }
}
