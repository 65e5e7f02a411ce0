//! Erase → probe → evaluate over several seeds, with every artifact written
//! under one output directory.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::checkpoint::{canonical_json_pretty, config_hash, write_file, Binding, Checkpoint, Provenance};
use super::config::{ExperimentConfig, Metric};
use super::plot::{scatter_svg, Panel};
use super::report::{DeltaSummary, EvaluationReport, SeedMetrics, Stat, SweepBudget, SweepTable};
use crate::concepts::{accuracy, alignment_score, energy_distance, energy_test, sample_dataset, ConceptUniverse};
use crate::diffusion::{sample, train, ConditionalDenoiser, TrainConfig};
use crate::erasure::{erase, ErasureConfig, ParamDelta};
use crate::error::Result;
use crate::numerics::Vector;
use crate::probes::{
    probe_gradient_guided, probe_instance_personalization, GradientProbeConfig, PersonalizationConfig,
};
use crate::rng;

/// Stage names used in reports and file names.
pub const ORIGINAL: &str = "original";
pub const ERASED: &str = "erased";
pub const GRADIENT_GUIDED: &str = "gradient_guided";
pub const PERSONALIZATION: &str = "personalization";

/// JSON written next to every derived checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Sidecar<C> {
    pub stage: String,
    pub checkpoint: String,
    pub parent: Option<String>,
    pub config: C,
    pub delta: ParamDelta,
    pub loss_trace: Vec<f64>,
    /// Token that samples the stage's concept.
    pub token: usize,
}

pub struct StageOutput<C> {
    pub checkpoint: Checkpoint,
    pub sidecar: Sidecar<C>,
}

impl<C: Serialize> StageOutput<C> {
    /// Writes `<stem>.json` and `<stem>.sidecar.json` into `dir`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        self.checkpoint.save(&dir.join(format!("{stem}.json")))?;
        write_file(
            &dir.join(format!("{stem}.sidecar.json")),
            canonical_json_pretty(&self.sidecar)?.as_bytes(),
        )
    }
}

#[derive(Serialize)]
struct TrainingRecord<'a> {
    universe: &'a ConceptUniverse,
    model: &'a crate::diffusion::DenoiserSpec,
    train: &'a TrainConfig,
}

pub struct TrainedOriginal {
    pub checkpoint: Checkpoint,
    pub loss_trace: Vec<f64>,
}

impl TrainedOriginal {
    /// Mean per-element loss over the last 500 steps.
    pub fn running_loss(&self) -> Option<f64> {
        let tail = &self.loss_trace[self.loss_trace.len().saturating_sub(500)..];
        (!tail.is_empty()).then(|| tail.iter().sum::<f64>() / tail.len() as f64)
    }
}

/// Trains the original model; `seed` drives both initialization and batches.
pub fn train_original(config: &ExperimentConfig, seed: u64) -> Result<TrainedOriginal> {
    let started = Instant::now();
    let train_cfg = TrainConfig {
        seed,
        ..config.train.clone()
    };
    let init = ConditionalDenoiser::random(config.model.clone(), seed)?;
    let outcome = train(&init, &config.universe, &train_cfg)?;
    let hash = config_hash(&TrainingRecord {
        universe: &config.universe,
        model: &config.model,
        train: &train_cfg,
    })?;
    log::info!("trained original (seed {seed}) in {:.1?}", started.elapsed());
    Ok(TrainedOriginal {
        checkpoint: Checkpoint::new(outcome.model, Provenance::root("train", seed, hash)),
        loss_trace: outcome.loss_trace,
    })
}

pub fn erase_stage(parent: &Checkpoint, config: &ErasureConfig) -> Result<StageOutput<ErasureConfig>> {
    let started = Instant::now();
    let out = erase(&parent.model, config)?;
    let provenance = Provenance::child(parent, "erase", config.seed, config_hash(config)?)?;
    let checkpoint = Checkpoint::new(out.model, provenance);
    log::info!(
        "erased concept {} (seed {}) in {:.1?}",
        config.target,
        config.seed,
        started.elapsed()
    );
    Ok(StageOutput {
        sidecar: Sidecar {
            stage: "erase".into(),
            checkpoint: checkpoint.id()?,
            parent: checkpoint.provenance.parent.clone(),
            config: config.clone(),
            delta: out.delta,
            loss_trace: out.loss_trace,
            token: config.target,
        },
        checkpoint,
    })
}

#[derive(Serialize)]
struct GuidedRecord<'a> {
    probe: &'a GradientProbeConfig,
    guiding: String,
}

pub fn gradient_stage(
    parent: &Checkpoint,
    guiding: &Checkpoint,
    config: &GradientProbeConfig,
) -> Result<StageOutput<GradientProbeConfig>> {
    let started = Instant::now();
    let out = probe_gradient_guided(&parent.model, &guiding.model, config)?;
    let hash = config_hash(&GuidedRecord {
        probe: config,
        guiding: guiding.id()?,
    })?;
    let provenance = Provenance::child(parent, "probe-gg", config.seed, hash)?;
    let checkpoint = Checkpoint::new(out.model, provenance);
    log::info!(
        "gradient-guided probe, {} steps (seed {}) in {:.1?}",
        config.steps,
        config.seed,
        started.elapsed()
    );
    Ok(StageOutput {
        sidecar: Sidecar {
            stage: "probe-gg".into(),
            checkpoint: checkpoint.id()?,
            parent: checkpoint.provenance.parent.clone(),
            config: config.clone(),
            delta: out.delta,
            loss_trace: out.loss_trace,
            token: out.token,
        },
        checkpoint,
    })
}

/// The bound rare token is recorded as a binding to `config.target` unless
/// `bind_concept` is false (concepts outside the model's universe).
pub fn personalization_stage(
    parent: &Checkpoint,
    config: &PersonalizationConfig,
    bind_concept: bool,
) -> Result<StageOutput<PersonalizationConfig>> {
    let started = Instant::now();
    let out = probe_instance_personalization(&parent.model, config)?;
    let mut provenance = Provenance::child(parent, "probe-ip", config.seed, config_hash(config)?)?;
    if bind_concept {
        provenance.bindings.push(Binding {
            token: out.token,
            concept: config.target,
        });
    }
    let checkpoint = Checkpoint::new(out.model, provenance);
    log::info!(
        "personalization probe (seed {}) in {:.1?}",
        config.seed,
        started.elapsed()
    );
    Ok(StageOutput {
        sidecar: Sidecar {
            stage: "probe-ip".into(),
            checkpoint: checkpoint.id()?,
            parent: checkpoint.provenance.parent.clone(),
            config: config.clone(),
            delta: out.delta,
            loss_trace: out.loss_trace,
            token: out.token,
        },
        checkpoint,
    })
}

fn concept_seed(seed: u64, concept: usize) -> u64 {
    rng::derive(rng::derive(seed, 41), concept as u64)
}

/// Samples of every concept from a model, using its bindings.
pub fn concept_samples(ck: &Checkpoint, k: usize, n: usize, seed: u64) -> Result<Vec<Vec<Vector>>> {
    (0..k)
        .map(|c| sample(&ck.model, ck.token_for(c), n, concept_seed(seed, c)))
        .collect()
}

/// Shared state for evaluating several models of one seed.
pub struct Evaluator<'a> {
    pub config: &'a ExperimentConfig,
    pub target: usize,
    pub seed: u64,
    /// Independent draw from the original model, per concept.
    pub reference: Vec<Vec<Vector>>,
}

impl<'a> Evaluator<'a> {
    pub fn new(config: &'a ExperimentConfig, original: &Checkpoint, target: usize, seed: u64) -> Result<Self> {
        let k = config.universe.len();
        let n = config.evaluation.samples_per_concept;
        let reference = concept_samples(original, k, n, rng::derive(seed, 42))?;
        Ok(Self {
            config,
            target,
            seed,
            reference,
        })
    }

    /// Metrics of one model plus the samples they were computed from.
    pub fn evaluate(&self, ck: &Checkpoint, delta: Option<ParamDelta>) -> Result<(SeedMetrics, Vec<Vec<Vector>>)> {
        let u = &self.config.universe;
        let spec = &self.config.evaluation;
        let k = u.len();
        let samples = concept_samples(ck, k, spec.samples_per_concept, self.seed)?;
        let accuracy_row = (0..k)
            .map(|c| Ok(100.0 * accuracy(u, &samples[c], c)?))
            .collect::<Result<Vec<_>>>()?;
        let alignment = if spec.wants(Metric::Alignment) {
            Some(
                (0..k)
                    .map(|c| Ok(alignment_score(u, &samples[c], c)?.score))
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        let (energy, threshold) = if spec.wants(Metric::Energy) {
            let e = (0..k)
                .map(|c| energy_distance(&self.reference[c], &samples[c]))
                .collect::<Result<Vec<_>>>()?;
            let t = if spec.energy_permutations > 0 {
                let test = energy_test(
                    &self.reference[self.target],
                    &samples[self.target],
                    spec.energy_permutations,
                    0.01,
                    rng::derive(self.seed, 43),
                )?;
                Some(test.threshold)
            } else {
                None
            };
            (Some(e), t)
        } else {
            (None, None)
        };
        let metrics = SeedMetrics {
            seed: self.seed,
            tokens: (0..k).map(|c| ck.token_for(c)).collect(),
            accuracy: accuracy_row,
            alignment,
            energy_to_original: energy,
            energy_threshold: threshold,
            delta,
        };
        Ok((metrics, samples))
    }

    /// Accuracy per concept (percent) only.
    pub fn accuracy_row(&self, ck: &Checkpoint) -> Result<Vec<f64>> {
        let u = &self.config.universe;
        let samples = concept_samples(ck, u.len(), self.config.evaluation.samples_per_concept, self.seed)?;
        samples
            .iter()
            .enumerate()
            .map(|(c, s)| Ok(100.0 * accuracy(u, s, c)?))
            .collect()
    }
}

/// Gradient-guided budgets from one erased checkpoint and seed.
pub fn run_sweep(
    eval: &Evaluator<'_>,
    erased: &Checkpoint,
    guiding: &Checkpoint,
    base: &GradientProbeConfig,
    budgets: &[usize],
    original_untargeted: f64,
) -> Result<Vec<(usize, f64, f64, ParamDelta)>> {
    budgets
        .iter()
        .map(|&steps| {
            let cfg = GradientProbeConfig { steps, ..base.clone() };
            let stage = gradient_stage(erased, guiding, &cfg)?;
            let acc = eval.accuracy_row(&stage.checkpoint)?;
            let untargeted = untargeted_mean(&acc, eval.target);
            Ok((
                steps,
                acc[eval.target],
                original_untargeted - untargeted,
                stage.sidecar.delta,
            ))
        })
        .collect()
}

fn untargeted_mean(acc: &[f64], target: usize) -> f64 {
    let others: Vec<f64> = acc
        .iter()
        .enumerate()
        .filter(|(c, _)| *c != target)
        .map(|(_, a)| *a)
        .collect();
    others.iter().sum::<f64>() / others.len().max(1) as f64
}

/// Builds a sweep table from per-seed rows (outer: seed, inner: budget).
pub fn sweep_table(seeds: &[u64], rows: &[Vec<(usize, f64, f64, ParamDelta)>]) -> Result<SweepTable> {
    let Some(first) = rows.first() else {
        return Ok(SweepTable { budgets: vec![] });
    };
    let budgets = (0..first.len())
        .map(|b| {
            let col: Vec<_> = rows.iter().map(|r| r[b]).collect();
            let deltas: Vec<ParamDelta> = col.iter().map(|r| r.3).collect();
            Ok(SweepBudget {
                steps: first[b].0,
                seeds: seeds.to_vec(),
                target_acc: Stat::new(col.iter().map(|r| r.1).collect())?,
                untargeted_drop: Stat::new(col.iter().map(|r| r.2).collect())?,
                delta: DeltaSummary::from_deltas(&deltas)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepTable { budgets })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbsentSummary {
    /// Oracle accuracy (percent) of the rare token on the absent component.
    pub accuracy: Stat,
    pub alignment: Stat,
    /// Personalization recovery of the erased concept under the same budget.
    pub erased_concept_recovery: Stat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenarios {
    /// Target accuracy (percent) of gradient-guided probes driven by the
    /// alternate-seed original.
    pub alternate_guide: Option<Stat>,
    pub absent_concept: Option<AbsentSummary>,
}

pub struct ErasureRun {
    pub erasure: ErasureConfig,
    pub report: EvaluationReport,
    pub sweep: SweepTable,
    pub scenarios: Scenarios,
}

pub struct ProtocolOutcome {
    pub original: TrainedOriginal,
    pub alternate: Option<Checkpoint>,
    pub runs: Vec<ErasureRun>,
}

/// Personalization settings for `target`, with the reference set drawn from
/// the universe when the config does not list one.
pub fn personalization_config(config: &ExperimentConfig, target: usize, seed: u64) -> Result<PersonalizationConfig> {
    let mut ip = config.probes.personalization.clone();
    if ip.class_token == ip.target {
        ip.class_token = target;
    }
    ip.target = target;
    ip.seed = seed;
    if ip.reference.is_empty() {
        ip.reference =
            sample_dataset(&config.universe, config.probes.reference_size, rng::derive(seed, 31))?.points_of(target);
    }
    Ok(ip)
}

/// Runs the whole protocol. With `out` set, checkpoints, sidecars, reports,
/// CSV tables and plots are written beneath it.
pub fn run_protocol(config: &ExperimentConfig, out: Option<&Path>) -> Result<ProtocolOutcome> {
    config.validate()?;
    let original = train_original(config, config.train.seed)?;
    if let Some(dir) = out {
        original.checkpoint.save(&dir.join("original.json"))?;
        write_file(&dir.join("config.json"), canonical_json_pretty(config)?.as_bytes())?;
    }
    let alternate = match config.scenarios.alternate_guide_seed {
        Some(seed) => {
            let alt = train_original(config, seed)?.checkpoint;
            if let Some(dir) = out {
                alt.save(&dir.join("alternate_guide.json"))?;
            }
            Some(alt)
        }
        None => None,
    };
    let mut runs = Vec::with_capacity(config.erasure.len());
    for (i, erasure) in config.erasure.iter().enumerate() {
        let dir = out.map(|d| d.join(format!("erasure_{i}")));
        runs.push(run_erasure(
            config,
            erasure,
            &original.checkpoint,
            alternate.as_ref(),
            dir.as_deref(),
        )?);
    }
    Ok(ProtocolOutcome {
        original,
        alternate,
        runs,
    })
}

fn run_erasure(
    config: &ExperimentConfig,
    erasure: &ErasureConfig,
    original: &Checkpoint,
    alternate: Option<&Checkpoint>,
    dir: Option<&Path>,
) -> Result<ErasureRun> {
    let target = erasure.target;
    let k = config.universe.len();
    let mut stages: BTreeMap<&str, Vec<SeedMetrics>> = BTreeMap::new();
    let mut sweep_rows = Vec::new();
    let mut alt_acc = Vec::new();
    let mut absent_acc = Vec::new();
    let mut absent_align = Vec::new();
    let mut ip_recovery = Vec::new();
    for &seed in &config.seeds {
        let eval = Evaluator::new(config, original, target, seed)?;
        let seed_dir = dir.map(|d| d.join(format!("seed_{seed}")));

        let (orig_metrics, orig_samples) = eval.evaluate(original, None)?;
        let orig_untargeted = orig_metrics.untargeted_accuracy(target);

        let erase_cfg = ErasureConfig {
            seed,
            ..erasure.clone()
        };
        let erased = erase_stage(original, &erase_cfg)?;
        let (erased_metrics, erased_samples) = eval.evaluate(&erased.checkpoint, Some(erased.sidecar.delta))?;

        let gg_cfg = GradientProbeConfig {
            target,
            seed,
            ..config.probes.gradient.clone()
        };
        let gg = gradient_stage(&erased.checkpoint, original, &gg_cfg)?;
        let (gg_metrics, gg_samples) = eval.evaluate(&gg.checkpoint, Some(gg.sidecar.delta))?;

        let ip_cfg = personalization_config(config, target, seed)?;
        let ip = personalization_stage(&erased.checkpoint, &ip_cfg, true)?;
        let (ip_metrics, ip_samples) = eval.evaluate(&ip.checkpoint, Some(ip.sidecar.delta))?;
        ip_recovery.push(ip_metrics.accuracy[target]);

        sweep_rows.push(run_sweep(
            &eval,
            &erased.checkpoint,
            original,
            &gg_cfg,
            &config.sweep_steps,
            orig_untargeted,
        )?);

        if let Some(alt) = alternate {
            let stage = gradient_stage(&erased.checkpoint, alt, &gg_cfg)?;
            let s = sample(
                &stage.checkpoint.model,
                target,
                config.evaluation.samples_per_concept,
                concept_seed(seed, target),
            )?;
            alt_acc.push(100.0 * accuracy(&config.universe, &s, target)?);
        }

        if let Some(absent) = &config.scenarios.absent_concept {
            let wider = config
                .universe
                .with_extra_component(absent.mean.clone(), absent.var.clone())?;
            let reference = sample_dataset(&wider, config.probes.reference_size, rng::derive(seed, 32))?.points_of(k);
            let cfg = PersonalizationConfig {
                reference,
                ..ip_cfg.clone()
            };
            let stage = personalization_stage(&erased.checkpoint, &cfg, false)?;
            let s = sample(
                &stage.checkpoint.model,
                stage.sidecar.token,
                config.evaluation.samples_per_concept,
                concept_seed(seed, k),
            )?;
            absent_acc.push(100.0 * accuracy(&wider, &s, k)?);
            absent_align.push(alignment_score(&wider, &s, k)?.score);
        }

        if let Some(sd) = &seed_dir {
            erased.save(sd, ERASED)?;
            gg.save(sd, GRADIENT_GUIDED)?;
            ip.save(sd, PERSONALIZATION)?;
            if config.evaluation.plots {
                let flat = |v: &[Vec<Vector>]| v.concat();
                let (a, b, c, d) = (
                    flat(&orig_samples),
                    flat(&erased_samples),
                    flat(&gg_samples),
                    flat(&ip_samples),
                );
                let panels = [
                    Panel {
                        title: ORIGINAL.into(),
                        samples: &a,
                    },
                    Panel {
                        title: ERASED.into(),
                        samples: &b,
                    },
                    Panel {
                        title: GRADIENT_GUIDED.into(),
                        samples: &c,
                    },
                    Panel {
                        title: PERSONALIZATION.into(),
                        samples: &d,
                    },
                ];
                write_file(
                    &sd.join("samples.svg"),
                    scatter_svg(&config.universe, &panels).as_bytes(),
                )?;
            }
        }

        stages.entry(ORIGINAL).or_default().push(orig_metrics);
        stages.entry(ERASED).or_default().push(erased_metrics);
        stages.entry(GRADIENT_GUIDED).or_default().push(gg_metrics);
        stages.entry(PERSONALIZATION).or_default().push(ip_metrics);
    }

    let ordered = [ORIGINAL, ERASED, GRADIENT_GUIDED, PERSONALIZATION]
        .into_iter()
        .map(|name| (name.to_string(), stages.remove(name).unwrap_or_default()))
        .collect();
    let report = EvaluationReport::assemble(target, config.evaluation.samples_per_concept, ordered)?;
    let sweep = sweep_table(&config.seeds, &sweep_rows)?;
    let scenarios = Scenarios {
        alternate_guide: (!alt_acc.is_empty()).then(|| Stat::new(alt_acc)).transpose()?,
        absent_concept: if absent_acc.is_empty() {
            None
        } else {
            Some(AbsentSummary {
                accuracy: Stat::new(absent_acc)?,
                alignment: Stat::new(absent_align)?,
                erased_concept_recovery: Stat::new(ip_recovery)?,
            })
        },
    };
    if let Some(d) = dir {
        write_report_files(d, &report, &sweep, &scenarios)?;
    }
    Ok(ErasureRun {
        erasure: erasure.clone(),
        report,
        sweep,
        scenarios,
    })
}

pub fn write_report_files(
    dir: &Path,
    report: &EvaluationReport,
    sweep: &SweepTable,
    scenarios: &Scenarios,
) -> Result<()> {
    write_file(&dir.join("report.json"), canonical_json_pretty(report)?.as_bytes())?;
    write_file(&dir.join("report.csv"), report.to_csv().as_bytes())?;
    write_file(&dir.join("sweep.csv"), sweep.to_csv().as_bytes())?;
    write_file(&dir.join("sweep_per_seed.csv"), sweep.to_csv_per_seed().as_bytes())?;
    write_file(&dir.join("sweep.json"), canonical_json_pretty(sweep)?.as_bytes())?;
    write_file(
        &dir.join("scenarios.json"),
        canonical_json_pretty(scenarios)?.as_bytes(),
    )?;
    let mut text = report.render_table();
    text.push('\n');
    text.push_str(&sweep.render());
    write_file(&dir.join("report.txt"), text.as_bytes())
}
