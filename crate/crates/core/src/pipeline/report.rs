//! Multi-seed evaluation records and their table renderings.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::erasure::ParamDelta;
use crate::error::{Error, Result};

/// Per-seed values with their mean, and a sample standard deviation when
/// there are at least two of them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "StatRecord")]
pub struct Stat {
    values: Vec<f64>,
    mean: f64,
    std: Option<f64>,
}

#[derive(Deserialize)]
struct StatRecord {
    values: Vec<f64>,
    mean: f64,
    std: Option<f64>,
}

impl TryFrom<StatRecord> for Stat {
    type Error = Error;

    fn try_from(r: StatRecord) -> Result<Self> {
        let stat = Stat::new(r.values)?;
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0);
        let std_ok = match (r.std, stat.std) {
            (None, None) => true,
            (Some(a), Some(b)) => close(a, b),
            _ => false,
        };
        if !close(r.mean, stat.mean) || !std_ok {
            return Err(Error::Config(
                "stored mean/std disagree with the per-seed values".into(),
            ));
        }
        Ok(stat)
    }
}

impl Stat {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptySet("Stat::new"));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = (values.len() >= 2).then(|| {
            let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
            (ss / (n - 1.0)).sqrt()
        });
        Ok(Self { values, mean, std })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn std(&self) -> Option<f64> {
        self.std
    }

    /// `"93.5 ± 2.1"`, or just the mean for a single seed.
    pub fn render(&self, decimals: usize) -> String {
        match self.std {
            Some(s) => format!("{:.*} ± {:.*}", decimals, self.mean, decimals, s),
            None => format!("{:.*}", decimals, self.mean),
        }
    }
}

/// `original − erased` for an untargeted aggregate.
pub fn untargeted_drop(original: f64, erased: f64) -> f64 {
    original - erased
}

/// Two-stage cell such as `"7.0 / 93.5"` (erased / reactivated).
pub fn render_cell(first: f64, second: f64) -> String {
    format!("{first:.1} / {second:.1}")
}

pub fn parse_cell(cell: &str) -> Result<(f64, f64)> {
    let bad = || Error::Config(format!("cannot read cell {cell:?}; expected \"a / b\""));
    let (a, b) = cell.split_once('/').ok_or_else(bad)?;
    let a: f64 = a.trim().parse().map_err(|_| bad())?;
    let b: f64 = b.trim().parse().map_err(|_| bad())?;
    Ok((a, b))
}

/// Measurements of one model on one seed. Accuracies are percentages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub seed: u64,
    /// Token sampled for each concept.
    pub tokens: Vec<usize>,
    pub accuracy: Vec<f64>,
    pub alignment: Option<Vec<f64>>,
    /// Energy distance to the original model's samples of the same concept.
    pub energy_to_original: Option<Vec<f64>>,
    /// Permutation threshold for the target concept's energy distance.
    pub energy_threshold: Option<f64>,
    pub delta: Option<ParamDelta>,
}

impl SeedMetrics {
    pub fn untargeted_accuracy(&self, target: usize) -> f64 {
        let others: Vec<f64> = self
            .accuracy
            .iter()
            .enumerate()
            .filter(|(c, _)| *c != target)
            .map(|(_, a)| *a)
            .collect();
        others.iter().sum::<f64>() / others.len().max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptSummary {
    pub concept: usize,
    pub accuracy: Stat,
    pub alignment: Option<Stat>,
    pub energy_to_original: Option<Stat>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaSummary {
    pub fraction_updated: Stat,
    pub mean_abs_change: Stat,
    pub relative_frobenius_change: Stat,
}

impl DeltaSummary {
    pub fn from_deltas(deltas: &[ParamDelta]) -> Result<Self> {
        Ok(Self {
            fraction_updated: Stat::new(deltas.iter().map(|d| d.fraction_updated).collect())?,
            mean_abs_change: Stat::new(deltas.iter().map(|d| d.mean_abs_change).collect())?,
            relative_frobenius_change: Stat::new(deltas.iter().map(|d| d.relative_frobenius_change).collect())?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: String,
    pub per_seed: Vec<SeedMetrics>,
    pub concepts: Vec<ConceptSummary>,
    pub target_accuracy: Stat,
    pub untargeted_accuracy: Stat,
    /// Original minus this stage's untargeted accuracy, per seed.
    pub untargeted_drop: Stat,
    pub delta: Option<DeltaSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub target: usize,
    pub samples_per_concept: usize,
    pub seeds: Vec<u64>,
    pub generator: String,
    pub stages: Vec<StageReport>,
}

fn column(per_seed: &[SeedMetrics], pick: impl Fn(&SeedMetrics) -> Option<f64>) -> Result<Option<Stat>> {
    let values: Option<Vec<f64>> = per_seed.iter().map(pick).collect();
    values.map(Stat::new).transpose()
}

impl EvaluationReport {
    /// Builds summaries from per-seed records. The first stage is the
    /// baseline for untargeted drops; every stage must cover the same seeds
    /// in the same order.
    pub fn assemble(
        target: usize,
        samples_per_concept: usize,
        stages: Vec<(String, Vec<SeedMetrics>)>,
    ) -> Result<Self> {
        let (_, baseline) = stages.first().ok_or(Error::EmptySet("EvaluationReport::assemble"))?;
        let seeds: Vec<u64> = baseline.iter().map(|m| m.seed).collect();
        let base_untargeted: Vec<f64> = baseline.iter().map(|m| m.untargeted_accuracy(target)).collect();
        let k = baseline
            .first()
            .ok_or(Error::EmptySet("EvaluationReport::assemble"))?
            .accuracy
            .len();
        let mut out = Vec::with_capacity(stages.len());
        for (name, per_seed) in stages {
            if per_seed.iter().map(|m| m.seed).ne(seeds.iter().copied()) {
                return Err(Error::Config(format!("stage {name} covers different seeds")));
            }
            if per_seed.iter().any(|m| m.accuracy.len() != k) {
                return Err(Error::Config(format!("stage {name} reports a different concept count")));
            }
            let concepts = (0..k)
                .map(|c| {
                    Ok(ConceptSummary {
                        concept: c,
                        accuracy: column(&per_seed, |m| Some(m.accuracy[c]))?.expect("accuracy always present"),
                        alignment: column(&per_seed, |m| m.alignment.as_ref().map(|a| a[c]))?,
                        energy_to_original: column(&per_seed, |m| m.energy_to_original.as_ref().map(|e| e[c]))?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let untargeted: Vec<f64> = per_seed.iter().map(|m| m.untargeted_accuracy(target)).collect();
            let drops = base_untargeted
                .iter()
                .zip(&untargeted)
                .map(|(o, u)| untargeted_drop(*o, *u))
                .collect();
            let deltas: Option<Vec<ParamDelta>> = per_seed.iter().map(|m| m.delta).collect();
            out.push(StageReport {
                target_accuracy: concepts[target].accuracy.clone(),
                untargeted_accuracy: Stat::new(untargeted)?,
                untargeted_drop: Stat::new(drops)?,
                delta: deltas.map(|d| DeltaSummary::from_deltas(&d)).transpose()?,
                concepts,
                stage: name,
                per_seed,
            });
        }
        Ok(Self {
            target,
            samples_per_concept,
            seeds,
            generator: crate::rng::GENERATOR.into(),
            stages: out,
        })
    }

    pub fn stage(&self, name: &str) -> Option<&StageReport> {
        self.stages.iter().find(|s| s.stage == name)
    }

    /// Accuracy grid: one row per concept, the baseline column, then
    /// `baseline-successor / stage` cells for every later stage.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let Some((first, rest)) = self.stages.split_first() else {
            return out;
        };
        let Some((second, later)) = rest.split_first() else {
            let _ = writeln!(out, "{}: {}", first.stage, first.target_accuracy.render(1));
            return out;
        };
        let _ = write!(out, "{:<10}{:>12}", "concept", first.stage);
        for s in later {
            let _ = write!(out, "{:>24}", format!("{} / {}", second.stage, s.stage));
        }
        out.push('\n');
        for c in 0..first.concepts.len() {
            let mark = if c == self.target { "*" } else { "" };
            let _ = write!(
                out,
                "{:<10}{:>12.1}",
                format!("{c}{mark}"),
                first.concepts[c].accuracy.mean()
            );
            for s in later {
                let cell = render_cell(second.concepts[c].accuracy.mean(), s.concepts[c].accuracy.mean());
                let _ = write!(out, "{cell:>24}");
            }
            out.push('\n');
        }
        let _ = writeln!(out, "\ntarget accuracy over {} seed(s):", self.seeds.len());
        for s in &self.stages {
            let _ = writeln!(
                out,
                "  {:<12} {:>14}   untargeted drop {:>12}",
                s.stage,
                s.target_accuracy.render(1),
                s.untargeted_drop.render(1)
            );
        }
        out
    }

    /// One line per (stage, concept) with means and standard deviations; the
    /// std columns are empty for a single seed.
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut out = String::from(
            "stage,concept,accuracy_mean,accuracy_std,alignment_mean,alignment_std,energy_mean,energy_std\n",
        );
        for s in &self.stages {
            for c in &s.concepts {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{},{},{}",
                    s.stage,
                    c.concept,
                    c.accuracy.mean(),
                    opt(c.accuracy.std()),
                    opt(c.alignment.as_ref().map(Stat::mean)),
                    opt(c.alignment.as_ref().and_then(Stat::std)),
                    opt(c.energy_to_original.as_ref().map(Stat::mean)),
                    opt(c.energy_to_original.as_ref().and_then(Stat::std)),
                );
            }
        }
        out
    }
}

pub const SWEEP_CSV_HEADER: &str = "steps,target_acc,untargeted_drop,fraction_updated,mean_abs_change";

/// One line of the step-budget table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub steps: usize,
    pub target_acc: f64,
    pub untargeted_drop: f64,
    pub fraction_updated: f64,
    pub mean_abs_change: f64,
}

impl SweepRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.steps, self.target_acc, self.untargeted_drop, self.fraction_updated, self.mean_abs_change
        )
    }

    /// `| 20 | 19.5 | 0.4 | 0.998 | 2.29e-4 |`
    pub fn render(&self) -> String {
        format!(
            "| {} | {:.1} | {:.1} | {:.3} | {:.2e} |",
            self.steps, self.target_acc, self.untargeted_drop, self.fraction_updated, self.mean_abs_change
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepBudget {
    pub steps: usize,
    pub seeds: Vec<u64>,
    pub target_acc: Stat,
    pub untargeted_drop: Stat,
    pub delta: DeltaSummary,
}

impl SweepBudget {
    pub fn mean_row(&self) -> SweepRow {
        SweepRow {
            steps: self.steps,
            target_acc: self.target_acc.mean(),
            untargeted_drop: self.untargeted_drop.mean(),
            fraction_updated: self.delta.fraction_updated.mean(),
            mean_abs_change: self.delta.mean_abs_change.mean(),
        }
    }

    pub fn seed_rows(&self) -> Vec<(u64, SweepRow)> {
        self.seeds
            .iter()
            .enumerate()
            .map(|(i, &seed)| {
                (
                    seed,
                    SweepRow {
                        steps: self.steps,
                        target_acc: self.target_acc.values()[i],
                        untargeted_drop: self.untargeted_drop.values()[i],
                        fraction_updated: self.delta.fraction_updated.values()[i],
                        mean_abs_change: self.delta.mean_abs_change.values()[i],
                    },
                )
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub budgets: Vec<SweepBudget>,
}

impl SweepTable {
    /// Seed-averaged rows under [`SWEEP_CSV_HEADER`].
    pub fn to_csv(&self) -> String {
        let mut out = format!("{SWEEP_CSV_HEADER}\n");
        for b in &self.budgets {
            out.push_str(&b.mean_row().csv_line());
            out.push('\n');
        }
        out
    }

    pub fn to_csv_per_seed(&self) -> String {
        let mut out = format!("seed,{SWEEP_CSV_HEADER}\n");
        for b in &self.budgets {
            for (seed, row) in b.seed_rows() {
                let _ = writeln!(out, "{seed},{}", row.csv_line());
            }
        }
        out
    }

    pub fn render(&self) -> String {
        let mut out = String::from("| steps | target acc | untargeted drop | params updated | mean abs change |\n");
        for b in &self.budgets {
            out.push_str(&b.mean_row().render());
            out.push('\n');
        }
        out
    }
}
