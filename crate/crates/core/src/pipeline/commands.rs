//! One function per command line subcommand. Each writes its artifacts and
//! returns a short human-readable summary.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::checkpoint::{canonical_json_pretty, write_file, Checkpoint};
use super::config::ExperimentConfig;
use super::plot::{scatter_svg, Panel};
use super::protocol::{
    erase_stage, gradient_stage, personalization_config, personalization_stage, run_protocol, run_sweep, sweep_table,
    train_original, Evaluator, ORIGINAL,
};
use super::report::EvaluationReport;
use crate::erasure::{ErasureMethod, ParamDelta};
use crate::error::{Error, Result};
use crate::numerics::Vector;
use crate::probes::GradientProbeConfig;
use crate::theory::{ascent_sweep, verify_bound, AscentSweepConfig, BoundKind, SdeSpec};

/// Reference configuration when no path is given.
pub fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::reference()),
    }
}

/// `erased.json` → `erased.sidecar.json`.
pub fn sidecar_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("sidecar.json")
}

#[derive(Serialize)]
struct TrainSidecar<'a> {
    stage: &'static str,
    checkpoint: String,
    running_loss: Option<f64>,
    loss_trace: &'a [f64],
}

pub fn cmd_train(config: &ExperimentConfig, seed: Option<u64>, out: &Path) -> Result<String> {
    config.validate()?;
    let seed = seed.unwrap_or(config.train.seed);
    let trained = train_original(config, seed)?;
    let id = trained.checkpoint.save(out)?;
    let side = TrainSidecar {
        stage: "train",
        checkpoint: id.clone(),
        running_loss: trained.running_loss(),
        loss_trace: &trained.loss_trace,
    };
    write_file(&sidecar_path(out), canonical_json_pretty(&side)?.as_bytes())?;
    let eval = Evaluator::new(config, &trained.checkpoint, 0, seed)?;
    let acc = eval.accuracy_row(&trained.checkpoint)?;
    let mut s = format!("checkpoint {} ({id})\n", out.display());
    if let Some(loss) = trained.running_loss() {
        let _ = writeln!(s, "running loss {loss:.4}");
    }
    let _ = writeln!(s, "per-concept accuracy: {}", fmt_row(&acc));
    Ok(s)
}

fn fmt_row(values: &[f64]) -> String {
    values.iter().map(|v| format!("{v:.1}")).collect::<Vec<_>>().join("  ")
}

#[derive(Debug, Clone, Default)]
pub struct StageOptions {
    pub target: Option<usize>,
    pub steps: Option<usize>,
    pub seed: Option<u64>,
}

pub fn cmd_erase(
    config: &ExperimentConfig,
    input: &Path,
    out: &Path,
    method: Option<ErasureMethod>,
    opts: &StageOptions,
) -> Result<String> {
    let parent = Checkpoint::load(input)?;
    let mut cfg = config.erasure.first().cloned().unwrap_or_default();
    if let Some(m) = method {
        cfg.method = m;
    }
    apply(&mut cfg.target, opts.target);
    apply(&mut cfg.steps, opts.steps);
    apply(&mut cfg.seed, opts.seed);
    let stage = erase_stage(&parent, &cfg)?;
    stage.checkpoint.save(out)?;
    write_file(&sidecar_path(out), canonical_json_pretty(&stage.sidecar)?.as_bytes())?;
    Ok(stage_summary(out, &stage.sidecar.checkpoint, &stage.sidecar.delta))
}

fn apply<T: Copy>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn stage_summary(out: &Path, id: &str, delta: &ParamDelta) -> String {
    format!(
        "checkpoint {} ({id})\nfraction updated {:.4}, mean |Δ| {:.3e}, relative change {:.4}\n",
        out.display(),
        delta.fraction_updated,
        delta.mean_abs_change,
        delta.relative_frobenius_change
    )
}

/// Without `guiding`, the input checkpoint guides itself.
pub fn cmd_probe_gg(
    config: &ExperimentConfig,
    input: &Path,
    guiding: Option<&Path>,
    out: &Path,
    opts: &StageOptions,
) -> Result<String> {
    let parent = Checkpoint::load(input)?;
    let guide = match guiding {
        Some(p) => Checkpoint::load(p)?,
        None => parent.clone(),
    };
    let mut cfg = config.probes.gradient.clone();
    apply(&mut cfg.target, opts.target);
    apply(&mut cfg.steps, opts.steps);
    apply(&mut cfg.seed, opts.seed);
    let stage = gradient_stage(&parent, &guide, &cfg)?;
    stage.checkpoint.save(out)?;
    write_file(&sidecar_path(out), canonical_json_pretty(&stage.sidecar)?.as_bytes())?;
    Ok(stage_summary(out, &stage.sidecar.checkpoint, &stage.sidecar.delta))
}

/// `reference` is a JSON array of points; without it the reference set is
/// drawn from the configured universe.
pub fn cmd_probe_ip(
    config: &ExperimentConfig,
    input: &Path,
    reference: Option<&Path>,
    out: &Path,
    opts: &StageOptions,
) -> Result<String> {
    let parent = Checkpoint::load(input)?;
    let base = config.probes.personalization.clone();
    let target = opts.target.unwrap_or(base.target);
    let seed = opts.seed.unwrap_or(base.seed);
    let mut with_points = config.clone();
    if let Some(path) = reference {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let points: Vec<Vector> = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.into(),
            source,
        })?;
        with_points.probes.personalization.reference = points;
    }
    let mut cfg = personalization_config(&with_points, target, seed)?;
    apply(&mut cfg.steps, opts.steps);
    let stage = personalization_stage(&parent, &cfg, true)?;
    stage.checkpoint.save(out)?;
    write_file(&sidecar_path(out), canonical_json_pretty(&stage.sidecar)?.as_bytes())?;
    let mut s = stage_summary(out, &stage.sidecar.checkpoint, &stage.sidecar.delta);
    let _ = writeln!(s, "rare token {} bound to concept {target}", stage.sidecar.token);
    Ok(s)
}

fn sidecar_delta(checkpoint: &Path) -> Option<ParamDelta> {
    let text = fs::read_to_string(sidecar_path(checkpoint)).ok()?;
    let v: serde_json::Value = serde_json::from_str(&text).ok()?;
    serde_json::from_value(v.get("delta")?.clone()).ok()
}

/// Evaluates `original` and each further model over the configured seeds.
/// Stage names are the file stems; deltas come from sidecars when present.
pub fn cmd_eval(
    config: &ExperimentConfig,
    original: &Path,
    others: &[PathBuf],
    target: usize,
    seed: Option<u64>,
    out_dir: &Path,
) -> Result<String> {
    let mut config = config.clone();
    if let Some(s) = seed {
        config.seeds = vec![s];
    }
    config.validate()?;
    if target >= config.universe.len() {
        return Err(Error::Config(format!("target {target} is not a concept")));
    }
    let orig = Checkpoint::load(original)?;
    let models = others
        .iter()
        .map(|p| Checkpoint::load(p).map(|c| (stem(p), c, sidecar_delta(p))))
        .collect::<Result<Vec<_>>>()?;
    let mut stages: Vec<(String, Vec<_>)> = vec![(ORIGINAL.to_string(), vec![])];
    stages.extend(models.iter().map(|(name, _, _)| (name.clone(), vec![])));
    for &s in &config.seeds {
        let eval = Evaluator::new(&config, &orig, target, s)?;
        let (m, samples) = eval.evaluate(&orig, None)?;
        stages[0].1.push(m);
        let mut all = vec![samples.concat()];
        for (i, (_, ck, delta)) in models.iter().enumerate() {
            let (m, samples) = eval.evaluate(ck, *delta)?;
            stages[i + 1].1.push(m);
            all.push(samples.concat());
        }
        if config.evaluation.plots {
            let panels: Vec<Panel<'_>> = stages
                .iter()
                .zip(&all)
                .map(|((name, _), samples)| Panel {
                    title: name.clone(),
                    samples,
                })
                .collect();
            write_file(
                &out_dir.join(format!("samples_seed_{s}.svg")),
                scatter_svg(&config.universe, &panels).as_bytes(),
            )?;
        }
    }
    let report = EvaluationReport::assemble(target, config.evaluation.samples_per_concept, stages)?;
    write_file(&out_dir.join("report.json"), canonical_json_pretty(&report)?.as_bytes())?;
    write_file(&out_dir.join("report.csv"), report.to_csv().as_bytes())?;
    let table = report.render_table();
    write_file(&out_dir.join("report.txt"), table.as_bytes())?;
    Ok(table)
}

fn stem(p: &Path) -> String {
    p.file_stem()
        .map_or_else(|| "model".into(), |s| s.to_string_lossy().into_owned())
}

/// Gradient-guided probes at each budget from the same erased checkpoint.
/// The original checkpoint is the untargeted baseline and, without
/// `guiding`, also the guiding model.
#[allow(clippy::too_many_arguments)]
pub fn cmd_sweep(
    config: &ExperimentConfig,
    erased: &Path,
    original: &Path,
    guiding: Option<&Path>,
    steps: Option<&[usize]>,
    opts: &StageOptions,
    out_dir: &Path,
) -> Result<String> {
    let mut config = config.clone();
    if let Some(s) = opts.seed {
        config.seeds = vec![s];
    }
    config.validate()?;
    let erased_ck = Checkpoint::load(erased)?;
    let orig = Checkpoint::load(original)?;
    let guide = match guiding {
        Some(p) => Checkpoint::load(p)?,
        None => orig.clone(),
    };
    let target = opts.target.unwrap_or(config.probes.gradient.target);
    let budgets = steps.map_or_else(|| config.sweep_steps.clone(), <[usize]>::to_vec);
    let mut rows = Vec::with_capacity(config.seeds.len());
    for &s in &config.seeds {
        let eval = Evaluator::new(&config, &orig, target, s)?;
        let base_acc = eval.accuracy_row(&orig)?;
        let n = base_acc.len() as f64 - 1.0;
        let base_untargeted = (base_acc.iter().sum::<f64>() - base_acc[target]) / n.max(1.0);
        let cfg = GradientProbeConfig {
            target,
            seed: s,
            ..config.probes.gradient.clone()
        };
        rows.push(run_sweep(&eval, &erased_ck, &guide, &cfg, &budgets, base_untargeted)?);
    }
    let table = sweep_table(&config.seeds, &rows)?;
    write_file(&out_dir.join("sweep.csv"), table.to_csv().as_bytes())?;
    write_file(&out_dir.join("sweep_per_seed.csv"), table.to_csv_per_seed().as_bytes())?;
    write_file(&out_dir.join("sweep.json"), canonical_json_pretty(&table)?.as_bytes())?;
    Ok(table.render())
}

/// TOML for `sde-verify`: the SDE fields at top level plus `bound`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SdeVerifyConfig {
    #[serde(default = "default_bound")]
    pub bound: BoundKind,
    #[serde(flatten)]
    pub sde: SdeSpec,
}

fn default_bound() -> BoundKind {
    BoundKind::Smooth
}

pub fn cmd_sde_verify(spec_path: &Path, seed: Option<u64>, out_dir: &Path) -> Result<String> {
    let text = fs::read_to_string(spec_path).map_err(|e| Error::io(spec_path, e))?;
    let mut cfg: SdeVerifyConfig = toml::from_str(&text).map_err(|source| Error::Toml {
        path: spec_path.into(),
        source,
    })?;
    apply(&mut cfg.sde.seed, seed);
    let report = verify_bound(&cfg.sde, cfg.bound)?;
    write_file(
        &out_dir.join("bound_report.json"),
        canonical_json_pretty(&report)?.as_bytes(),
    )?;
    let mut csv = String::from("time,mean_sq,std_err\n");
    for ((t, m), e) in report
        .trace
        .times
        .iter()
        .zip(&report.trace.mean_sq)
        .zip(&report.trace.std_err)
    {
        let _ = writeln!(csv, "{t},{m},{e}");
    }
    write_file(&out_dir.join("trace.csv"), csv.as_bytes())?;
    Ok(format!(
        "E|δ(T)|² = {:.5} ± {:.5}, bound {:.5}, {}\n",
        report.empirical,
        report.std_err,
        report.bound,
        if report.satisfied { "satisfied" } else { "VIOLATED" }
    ))
}

pub fn cmd_ascent_check(config_path: Option<&Path>, seed: Option<u64>, out_dir: &Path) -> Result<String> {
    let mut cfg = match config_path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            toml::from_str(&text).map_err(|source| Error::Toml { path: p.into(), source })?
        }
        None => AscentSweepConfig::default(),
    };
    apply(&mut cfg.seed, seed);
    let sweep = ascent_sweep(&cfg)?;
    write_file(&out_dir.join("ascent.json"), canonical_json_pretty(&sweep)?.as_bytes())?;
    Ok(format!(
        "first-order: {}/{} failures (min slack {:.3e}); second-order: {}/{} failures (max ratio error {:.3e})\n",
        sweep.step_failures,
        sweep.step_cases,
        sweep.min_slack,
        sweep.curvature_failures,
        sweep.curvature_cases,
        sweep.max_ratio_error
    ))
}

pub fn cmd_report(config: &ExperimentConfig, seed: Option<u64>, out_dir: &Path) -> Result<String> {
    let mut config = config.clone();
    if let Some(s) = seed {
        config.seeds = vec![s];
    }
    let outcome = run_protocol(&config, Some(out_dir))?;
    let mut s = String::new();
    if let Some(loss) = outcome.original.running_loss() {
        let _ = writeln!(s, "original running loss {loss:.4}\n");
    }
    for (i, run) in outcome.runs.iter().enumerate() {
        let _ = writeln!(
            s,
            "erasure {i}: concept {} via {:?}\n",
            run.erasure.target, run.erasure.method
        );
        s.push_str(&run.report.render_table());
        s.push('\n');
        s.push_str(&run.sweep.render());
        if let Some(alt) = &run.scenarios.alternate_guide {
            let _ = writeln!(s, "\nalternate guiding model: target accuracy {}", alt.render(1));
        }
        if let Some(abs) = &run.scenarios.absent_concept {
            let _ = writeln!(
                s,
                "absent concept: accuracy {}, alignment {} (erased concept recovered to {})",
                abs.accuracy.render(1),
                abs.alignment.render(2),
                abs.erased_concept_recovery.render(1)
            );
        }
        s.push('\n');
    }
    Ok(s)
}
