//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails. Runs the full reference protocol, so expect a few minutes.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use rand::Rng;

use eralab::concepts::accuracy;
use eralab::diffusion::{sample, ConditionalDenoiser};
use eralab::erasure::{erase, ErasureConfig};
use eralab::numerics::{norm_sq, Mlp};
use eralab::pipeline::protocol::personalization_config;
use eralab::pipeline::protocol::{ERASED, GRADIENT_GUIDED, ORIGINAL, PERSONALIZATION};
use eralab::pipeline::{run_protocol, Checkpoint, ExperimentConfig, ProtocolOutcome};
use eralab::probes::{probe_gradient_guided, probe_instance_personalization, GradientProbeConfig};
use eralab::rng;
use eralab::theory::{
    ascent_sweep, bound_smooth, simulate_pair, verify_bound, AscentSweepConfig, BoundKind, DriftSign, SdeSpec,
};

const GRAD_CASES: usize = 100;
const GRAD_TOL: f64 = 1e-4;
const GRAD_SECONDS: f64 = 10.0;
const TRAIN_MIN_ACC: f64 = 90.0;
const TRAIN_MAX_LOSS: f64 = 0.35;
const ERASED_MAX_ACC: f64 = 10.0;
const UNTARGETED_MAX_DROP: f64 = 10.0;
const RECOVERY_FRACTION: f64 = 0.70;
const MAX_RELATIVE_CHANGE: f64 = 0.05;
const ENERGY_MIN_SEEDS: usize = 4;
const ALT_GUIDE_FRACTION: f64 = 0.60;
const SDE_TRIALS: usize = 10_000;
const PLATEAU_TOL: f64 = 0.10;
const OU_TOL: f64 = 0.10;
const RATIO_TOL: f64 = 0.01;
const PRIOR_MAX_SHIFT: f64 = 15.0;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

struct Suite {
    failures: usize,
}

impl Suite {
    fn record(&mut self, id: &str, name: &str, started: Instant, result: Result<Outcome, eralab::Error>) {
        let secs = started.elapsed().as_secs_f64();
        let o = result.unwrap_or_else(|e| outcome(false, format!("error: {e}")));
        if !o.pass {
            self.failures += 1;
        }
        println!(
            "{} [{id}] {name}: {} ({secs:.1}s)",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn std(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

fn gradient_check() -> eralab::Result<Outcome> {
    let started = Instant::now();
    let mut rng = rng::seeded(2024);
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for _ in 0..GRAD_CASES {
        let depth = rng.random_range(1..=3);
        let mut sizes = vec![rng.random_range(1..=6)];
        sizes.extend((0..depth).map(|_| rng.random_range(1..=8)));
        sizes.push(rng.random_range(1..=3));
        let mut mlp = Mlp::random(&sizes, &mut rng)?;
        let x: Vec<f64> = (0..sizes[0]).map(|_| rng.random_range(-2.0..2.0)).collect();
        let w: Vec<f64> = (0..*sizes.last().unwrap()).map(|_| rng::normal(&mut rng)).collect();
        let f = |m: &Mlp, input: &[f64]| -> eralab::Result<f64> {
            Ok(m.forward(input)?.iter().zip(&w).map(|(o, w)| o * w).sum())
        };
        let (pg, ig) = mlp.backward(&x, &w)?;
        let mut analytic = pg.clone();
        analytic.extend(&ig);
        let base = mlp.flatten();
        let mut numeric = Vec::with_capacity(analytic.len());
        for i in 0..base.len() {
            let mut p = base.clone();
            p[i] = base[i] + h;
            mlp.set_params(&p)?;
            let up = f(&mlp, &x)?;
            p[i] = base[i] - h;
            mlp.set_params(&p)?;
            let down = f(&mlp, &x)?;
            numeric.push((up - down) / (2.0 * h));
        }
        mlp.set_params(&base)?;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp[i] = x[i] + h;
            let up = f(&mlp, &xp)?;
            xp[i] = x[i] - h;
            let down = f(&mlp, &xp)?;
            numeric.push((up - down) / (2.0 * h));
        }
        let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, n)| a - n).collect();
        let scale = norm_sq(&analytic).sqrt().max(norm_sq(&numeric).sqrt());
        if scale > 0.0 {
            worst = worst.max(norm_sq(&diff).sqrt() / scale);
        }
    }
    let secs = started.elapsed().as_secs_f64();
    Ok(outcome(
        worst <= GRAD_TOL && secs < GRAD_SECONDS,
        format!(
            "max relative error {worst:.2e} over {GRAD_CASES} cases (≤ {GRAD_TOL:.0e}), {secs:.2}s (< {GRAD_SECONDS}s)"
        ),
    ))
}

fn projection_bit_exact(model: &ConditionalDenoiser, target: usize) -> eralab::Result<Outcome> {
    let out = erase(model, &ErasureConfig::projection(target, 0.0))?;
    let edited = out.model;
    let anchor = edited.null_token();
    let mut rng = rng::seeded(7);
    let steps = edited.schedule().steps();
    let mut checked = 0;
    let mut mismatched = 0;
    for _ in 0..200 {
        let z = rng::normal_vec(&mut rng, edited.data_dim());
        let t = rng.random_range(0..steps);
        let a = edited.predict(&z, target, t)?;
        let b = edited.predict(&z, anchor, t)?;
        checked += 1;
        if a.iter().zip(&b).any(|(p, q)| p.to_bits() != q.to_bits()) {
            mismatched += 1;
        }
    }
    Ok(outcome(
        mismatched == 0,
        format!("{mismatched}/{checked} latents differ between target and anchor predictions"),
    ))
}

fn stage_targets(outcome: &ProtocolOutcome, stage: &str) -> Vec<f64> {
    let run = &outcome.runs[0];
    let target = run.erasure.target;
    run.report
        .stage(stage)
        .map(|s| s.per_seed.iter().map(|m| m.accuracy[target]).collect())
        .unwrap_or_default()
}

fn training_fidelity(o: &ProtocolOutcome) -> Outcome {
    let report = &o.runs[0].report;
    let Some(orig) = report.stage(ORIGINAL) else {
        return outcome(false, "original stage missing");
    };
    let accs: Vec<f64> = orig.concepts.iter().map(|c| c.accuracy.mean()).collect();
    let loss = o.original.running_loss().unwrap_or(f64::INFINITY);
    let min = accs.iter().copied().fold(f64::INFINITY, f64::min);
    outcome(
        min >= TRAIN_MIN_ACC && loss < TRAIN_MAX_LOSS,
        format!(
            "per-concept accuracy {} (≥ {TRAIN_MIN_ACC}), running loss {loss:.4} (< {TRAIN_MAX_LOSS}), {} samples/concept",
            fmt(&accs, 1),
            report.samples_per_concept
        ),
    )
}

fn erasure_effect(o: &ProtocolOutcome, projection: &Outcome) -> Outcome {
    let run = &o.runs[0];
    let target = run.erasure.target;
    let (Some(orig), Some(erased)) = (run.report.stage(ORIGINAL), run.report.stage(ERASED)) else {
        return outcome(false, "stages missing");
    };
    let target_acc = erased.target_accuracy.mean();
    let mut worst_drop: f64 = f64::NEG_INFINITY;
    for (om, em) in orig.per_seed.iter().zip(&erased.per_seed) {
        for c in (0..om.accuracy.len()).filter(|&c| c != target) {
            worst_drop = worst_drop.max(om.accuracy[c] - em.accuracy[c]);
        }
    }
    let worst_target = erased.per_seed.iter().map(|m| m.accuracy[target]).fold(0.0, f64::max);
    outcome(
        target_acc <= ERASED_MAX_ACC && worst_drop <= UNTARGETED_MAX_DROP && projection.pass,
        format!(
            "ESD target accuracy {target_acc:.1} (worst seed {worst_target:.1}, ≤ {ERASED_MAX_ACC}); \
             largest untargeted drop over concepts and seeds {worst_drop:.1} (≤ {UNTARGETED_MAX_DROP}); \
             projection λ=0: {}",
            projection.detail
        ),
    )
}

fn reactivation(o: &ProtocolOutcome) -> Outcome {
    let orig = mean(&stage_targets(o, ORIGINAL));
    let gg = stage_targets(o, GRADIENT_GUIDED);
    let ip = stage_targets(o, PERSONALIZATION);
    let need = RECOVERY_FRACTION * orig;
    let (gm, im) = (mean(&gg), mean(&ip));
    outcome(
        gm >= need && im >= need,
        format!(
            "original {orig:.1}; gradient-guided {gm:.1} ± {:.1} over {} seeds; personalization {im:.1} ± {:.1} \
             (both ≥ {need:.1} = {RECOVERY_FRACTION} × original)",
            std(&gg),
            gg.len(),
            std(&ip)
        ),
    )
}

fn economy(o: &ProtocolOutcome) -> Outcome {
    let sweep = &o.runs[0].sweep;
    let rows: Vec<_> = sweep.budgets.iter().map(|b| b.mean_row()).collect();
    let monotone = rows.windows(2).all(|w| w[1].target_acc >= w[0].target_acc);
    let max_change = sweep
        .budgets
        .iter()
        .flat_map(|b| b.delta.relative_frobenius_change.values().to_vec())
        .fold(0.0, f64::max);
    let emitted = sweep.budgets.iter().all(|b| {
        b.delta.fraction_updated.values().len() == b.seeds.len()
            && b.delta.mean_abs_change.values().len() == b.seeds.len()
    });
    let table: Vec<String> = rows
        .iter()
        .map(|r| {
            format!(
                "{} steps: acc {:.1}, updated {:.3}, mean|Δ| {:.2e}",
                r.steps, r.target_acc, r.fraction_updated, r.mean_abs_change
            )
        })
        .collect();
    outcome(
        monotone && max_change <= MAX_RELATIVE_CHANGE && emitted && !rows.is_empty(),
        format!(
            "{}; accuracy non-decreasing: {monotone}; max relative change {max_change:.4} (≤ {MAX_RELATIVE_CHANGE})",
            table.join("; ")
        ),
    )
}

fn energy_ordering(o: &ProtocolOutcome) -> Outcome {
    let run = &o.runs[0];
    let target = run.erasure.target;
    let energies = |stage: &str| -> Vec<f64> {
        run.report
            .stage(stage)
            .map(|s| {
                s.per_seed
                    .iter()
                    .map(|m| m.energy_to_original.as_ref().map_or(f64::NAN, |e| e[target]))
                    .collect()
            })
            .unwrap_or_default()
    };
    let erased = energies(ERASED);
    let mut parts = Vec::new();
    let mut pass = true;
    for stage in [GRADIENT_GUIDED, PERSONALIZATION] {
        let e = energies(stage);
        let wins = e.iter().zip(&erased).filter(|(r, x)| r < x).count();
        pass &= wins >= ENERGY_MIN_SEEDS;
        parts.push(format!(
            "{stage} closer in {wins}/{} seeds (mean {:.3} vs erased {:.3})",
            e.len(),
            mean(&e),
            mean(&erased)
        ));
    }
    outcome(pass, format!("{} (need ≥ {ENERGY_MIN_SEEDS})", parts.join("; ")))
}

fn alternate_guide(o: &ProtocolOutcome) -> Outcome {
    let orig = mean(&stage_targets(o, ORIGINAL));
    let Some(alt) = &o.runs[0].scenarios.alternate_guide else {
        return outcome(false, "alternate guide scenario not run");
    };
    let need = ALT_GUIDE_FRACTION * orig;
    outcome(
        alt.mean() >= need,
        format!(
            "target accuracy {} with the alternate-seed guide (≥ {need:.1})",
            alt.render(1)
        ),
    )
}

fn prior_preservation(o: &ProtocolOutcome, dir: &Path, config: &ExperimentConfig) -> eralab::Result<Outcome> {
    let run = &o.runs[0];
    let target = run.erasure.target;
    let erased = run.report.stage(ERASED).expect("erased stage");
    let mut shifts = Vec::new();
    for (i, &seed) in config.seeds.iter().enumerate() {
        let ck = Checkpoint::load(&dir.join(format!("erasure_0/seed_{seed}/{PERSONALIZATION}.json")))?;
        let class = personalization_config(config, target, seed)?.class_token;
        let s = sample(
            &ck.model,
            class,
            config.evaluation.samples_per_concept,
            rng::derive(seed, 77),
        )?;
        let after = 100.0 * accuracy(&config.universe, &s, class)?;
        let before = erased.per_seed[i].accuracy[class];
        shifts.push((after - before).abs());
    }
    let worst = shifts.iter().copied().fold(0.0, f64::max);
    Ok(outcome(
        worst <= PRIOR_MAX_SHIFT,
        format!("class-token accuracy moves at most {worst:.1} points after personalization (≤ {PRIOR_MAX_SHIFT})"),
    ))
}

fn theory_bounds() -> eralab::Result<Outcome> {
    let mut violations = 0;
    let mut points = 0;
    let mut worst_ratio: f64 = 0.0;
    for &l in &[0.5, 1.0, 2.0] {
        for &t in &[0.25, 0.5, 1.0] {
            for &trace in &[0.5, 1.0] {
                let dt = 1e-3 * f64::min(1.0, 1.0 / l);
                let mut spec = SdeSpec::isotropic(2, l, DriftSign::Ascent, trace, t, dt, SDE_TRIALS);
                spec.seed = points as u64;
                let stats = simulate_pair(&spec)?;
                let (emp, se) = stats.final_value();
                let bound = bound_smooth(l, trace, trace, t)?;
                points += 1;
                if emp > bound + 3.0 * se {
                    violations += 1;
                }
                worst_ratio = worst_ratio.max(emp / bound);
            }
        }
    }
    // Plateau of the descent pair at T = 10/μ.
    let mu = 1.0;
    let mut plateau = SdeSpec::isotropic(2, mu, DriftSign::Descent, 1.0, 10.0 / mu, 1e-3, SDE_TRIALS);
    plateau.seed = 100;
    let report = verify_bound(&plateau, BoundKind::StronglyConvex)?;
    let limit = (plateau.sigma_bar1() + plateau.sigma_bar2()) / (2.0 * mu);
    let plateau_err = (report.empirical - limit).abs() / limit;
    // Closed-form OU deviation at an intermediate time.
    let mut ou = SdeSpec::isotropic(2, mu, DriftSign::Descent, 1.0, 1.0, 1e-3, SDE_TRIALS);
    ou.seed = 101;
    let (emp, _) = simulate_pair(&ou)?.final_value();
    let oracle = (ou.sigma_bar1() + ou.sigma_bar2()) / (2.0 * mu) * -(-2.0 * mu * 1.0_f64).exp_m1();
    let ou_err = (emp - oracle).abs() / oracle;
    Ok(outcome(
        violations == 0 && plateau_err <= PLATEAU_TOL && report.satisfied && ou_err <= OU_TOL,
        format!(
            "smooth bound violated at {violations}/{points} grid points (max empirical/bound {worst_ratio:.3}); \
             plateau {:.4} vs {limit:.4} (rel. error {plateau_err:.3}, ≤ {PLATEAU_TOL}); \
             OU at T=1: {emp:.4} vs {oracle:.4} (rel. error {ou_err:.3}, ≤ {OU_TOL})",
            report.empirical
        ),
    ))
}

fn ascent() -> eralab::Result<Outcome> {
    let cfg = AscentSweepConfig {
        etas: vec![1e-2, 3e-3, 1e-3, 1e-4],
        ..AscentSweepConfig::default()
    };
    let s = ascent_sweep(&cfg)?;
    Ok(outcome(
        s.passed() && s.max_ratio_error <= RATIO_TOL,
        format!(
            "first-order inequality failed in {}/{} cases (min slack {:.2e}); \
             second-order: {}/{} failures, max |gain/η² − ½vᵀ∇²s v| relative error {:.2e} (≤ {RATIO_TOL})",
            s.step_failures, s.step_cases, s.min_slack, s.curvature_failures, s.curvature_cases, s.max_ratio_error
        ),
    ))
}

fn tiny_config() -> ExperimentConfig {
    let mut c = ExperimentConfig::reference();
    c.seeds = vec![0, 1];
    c.train.steps = 200;
    c.erasure[0].steps = 10;
    c.erasure[0].latent_pool = 64;
    c.probes.gradient.steps = 5;
    c.probes.gradient.latent_pool = 64;
    c.probes.personalization.steps = 10;
    c.evaluation.samples_per_concept = 50;
    c.evaluation.energy_permutations = 10;
    c.sweep_steps = vec![2, 5];
    c
}

fn files(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).expect("readable dir") {
            let p = entry.expect("entry").path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let bytes = fs::read(&p).expect("readable file");
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), bytes);
            }
        }
    }
    out
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

fn plumbing(original: &Checkpoint, config: &ExperimentConfig) -> eralab::Result<Outcome> {
    let tmp = tempfile::tempdir().expect("tempdir");
    let path = tmp.path().join("roundtrip.json");
    original.save(&path)?;
    let back = Checkpoint::load(&path)?;
    let round_trip = back.to_json()? == original.to_json()?
        && bits(&back.model.params()) == bits(&original.model.params())
        && back.provenance == original.provenance;

    let tiny = tiny_config();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run_protocol(&tiny, Some(&a))?;
    run_protocol(&tiny, Some(&b))?;
    let (fa, fb) = (files(&a), files(&b));
    let deterministic = !fa.is_empty() && fa == fb;

    let m = &original.model;
    let target = 0;
    let esd = erase(
        m,
        &ErasureConfig {
            steps: 0,
            ..ErasureConfig::esd(target)
        },
    )?;
    let gg = probe_gradient_guided(
        m,
        m,
        &GradientProbeConfig {
            steps: 0,
            ..GradientProbeConfig::new(target)
        },
    )?;
    let mut ip_cfg = personalization_config(config, target, 0)?;
    ip_cfg.steps = 0;
    let ip = probe_instance_personalization(m, &ip_cfg)?;
    let shared = m.params().len() - m.embeddings().as_slice().len();
    let ip_same = bits(&ip.model.mlp().flatten()) == bits(&m.mlp().flatten())
        && bits(&ip.model.embeddings().as_slice()[..m.embeddings().as_slice().len()])
            == bits(m.embeddings().as_slice())
        && ip.delta.fraction_updated == 0.0;
    let identities = bits(&esd.model.params()) == bits(&m.params())
        && bits(&gg.model.params()) == bits(&m.params())
        && esd.delta.fraction_updated == 0.0
        && gg.delta.fraction_updated == 0.0
        && ip_same
        && shared > 0;
    Ok(outcome(
        round_trip && deterministic && identities,
        format!(
            "checkpoint round trip exact: {round_trip}; two runs byte-identical over {} files: {deterministic}; \
             0-step erase/probes are identities: {identities}",
            fa.len()
        ),
    ))
}

fn main() -> ExitCode {
    let mut suite = Suite { failures: 0 };
    let config = ExperimentConfig::reference();

    let t = Instant::now();
    suite.record("1", "gradient correctness", t, gradient_check());

    let t = Instant::now();
    let tmp = tempfile::tempdir().expect("tempdir");
    let protocol = run_protocol(&config, Some(tmp.path()));
    let protocol_secs = t.elapsed().as_secs_f64();
    println!(
        "INFO reference protocol ran in {protocol_secs:.0}s over seeds {:?}",
        config.seeds
    );
    let protocol = match protocol {
        Ok(p) => p,
        Err(e) => {
            for (id, name) in [
                ("2", "training fidelity"),
                ("3", "erasure effectiveness"),
                ("4", "reactivation"),
                ("5", "perturbation economy"),
                ("6", "energy ordering"),
                ("7", "guiding-model flexibility"),
            ] {
                suite.record(id, name, t, Ok(outcome(false, format!("protocol failed: {e}"))));
            }
            return finish(suite);
        }
    };

    let t = Instant::now();
    suite.record("2", "training fidelity", t, Ok(training_fidelity(&protocol)));

    let t = Instant::now();
    let projection = projection_bit_exact(&protocol.original.checkpoint.model, protocol.runs[0].erasure.target)
        .unwrap_or_else(|e| outcome(false, format!("error: {e}")));
    suite.record(
        "3",
        "erasure effectiveness",
        t,
        Ok(erasure_effect(&protocol, &projection)),
    );

    let t = Instant::now();
    suite.record("4", "reactivation", t, Ok(reactivation(&protocol)));
    let t = Instant::now();
    suite.record(
        "4b",
        "personalization prior preservation",
        t,
        prior_preservation(&protocol, tmp.path(), &config),
    );

    let t = Instant::now();
    suite.record("5", "perturbation economy", t, Ok(economy(&protocol)));

    let t = Instant::now();
    suite.record("6", "energy ordering", t, Ok(energy_ordering(&protocol)));

    let t = Instant::now();
    suite.record("7", "guiding-model flexibility", t, Ok(alternate_guide(&protocol)));

    if let Some(abs) = &protocol.runs[0].scenarios.absent_concept {
        println!(
            "INFO absent concept personalized to accuracy {}, alignment {}; erased concept under the same budget {}",
            abs.accuracy.render(1),
            abs.alignment.render(2),
            abs.erased_concept_recovery.render(1)
        );
    }

    let t = Instant::now();
    suite.record("8", "deviation bounds", t, theory_bounds());

    let t = Instant::now();
    suite.record("9", "score ascent", t, ascent());

    let t = Instant::now();
    suite.record("10", "plumbing", t, plumbing(&protocol.original.checkpoint, &config));

    finish(suite)
}

fn finish(suite: Suite) -> ExitCode {
    if suite.failures == 0 {
        println!("acceptance: all criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {} criteria failed", suite.failures);
        ExitCode::FAILURE
    }
}

fn fmt(values: &[f64], decimals: usize) -> String {
    let parts: Vec<String> = values.iter().map(|v| format!("{v:.decimals$}")).collect();
    format!("[{}]", parts.join(", "))
}
