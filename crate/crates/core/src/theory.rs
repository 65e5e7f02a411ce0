//! Numerical witnesses for the deviation bounds between two noisy
//! fine-tuning trajectories, and for local ascent of a quadratic score in
//! embedding space.
//!
//! The drift family is `f(x) = ½ xᵀA x`, so `∇f = A x`, the smoothness
//! constant is the largest eigenvalue magnitude of `A` and the strong
//! convexity constant is its smallest eigenvalue.

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, norm_sq, Matrix, Vector};
use crate::rng;

/// Relative asymmetry tolerated in `A` and `H`.
const SYMMETRY_TOL: f64 = 1e-12;

/// Squared deviation above which a trajectory pair counts as diverged.
const DIVERGENCE_LIMIT: f64 = 1e200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriftSign {
    /// `dθ = +∇f dt + …`
    Ascent,
    /// `dθ = −∇f dt + …`
    Descent,
}

impl DriftSign {
    fn factor(self) -> f64 {
        match self {
            DriftSign::Ascent => 1.0,
            DriftSign::Descent => -1.0,
        }
    }
}

/// Two SDEs `dθ = ±Aθ dt + Σ1^{1/2} dW1` and `dθ̃ = ±Aθ̃ dt + Σ2^{1/2} dW2`
/// started from the same point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SdeSpec {
    pub dim: usize,
    /// Symmetric `dim × dim` matrix, row by row.
    pub a: Vec<Vec<f64>>,
    pub drift: DriftSign,
    /// Diagonal of Σ1.
    pub sigma1: Vec<f64>,
    /// Diagonal of Σ2.
    pub sigma2: Vec<f64>,
    pub horizon: f64,
    pub dt: f64,
    pub trials: usize,
    #[serde(default)]
    pub seed: u64,
    /// Shared initial point; zeros when absent.
    #[serde(default)]
    pub theta0: Option<Vec<f64>>,
    /// Integration steps between saved trace points; about 100 points when
    /// absent.
    #[serde(default)]
    pub record_every: Option<usize>,
}

impl SdeSpec {
    /// `A = scale·I` with isotropic noise of total trace `trace` on each
    /// trajectory.
    pub fn isotropic(
        dim: usize,
        scale: f64,
        drift: DriftSign,
        trace: f64,
        horizon: f64,
        dt: f64,
        trials: usize,
    ) -> Self {
        let a = (0..dim)
            .map(|i| (0..dim).map(|j| if i == j { scale } else { 0.0 }).collect())
            .collect();
        let per_coord = trace / dim as f64;
        Self {
            dim,
            a,
            drift,
            sigma1: vec![per_coord; dim],
            sigma2: vec![per_coord; dim],
            horizon,
            dt,
            trials,
            seed: 0,
            theta0: None,
            record_every: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Config("dim must be positive".into()));
        }
        if self.a.len() != self.dim || self.a.iter().any(|r| r.len() != self.dim) {
            return Err(Error::Config(format!("a must be {d}×{d}", d = self.dim)));
        }
        check_symmetric(&self.a, "a")?;
        for (name, sigma) in [("sigma1", &self.sigma1), ("sigma2", &self.sigma2)] {
            if sigma.len() != self.dim {
                return Err(Error::Config(format!("{name} must have {} entries", self.dim)));
            }
            if sigma.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
                return Err(Error::Config(format!("{name} entries must be finite and ≥ 0")));
            }
        }
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(Error::Config(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.horizon.is_finite() && self.horizon >= 0.0) {
            return Err(Error::Config(format!(
                "horizon must be finite and ≥ 0, got {}",
                self.horizon
            )));
        }
        if self.trials == 0 {
            return Err(Error::Config("trials must be ≥ 1".into()));
        }
        if let Some(t0) = &self.theta0 {
            if t0.len() != self.dim || t0.iter().any(|v| !v.is_finite()) {
                return Err(Error::Config(format!("theta0 must hold {} finite values", self.dim)));
            }
        }
        if self.record_every == Some(0) {
            return Err(Error::Config("record_every must be ≥ 1".into()));
        }
        Ok(())
    }

    /// Trace of Σ1.
    pub fn sigma_bar1(&self) -> f64 {
        self.sigma1.iter().sum()
    }

    /// Trace of Σ2.
    pub fn sigma_bar2(&self) -> f64 {
        self.sigma2.iter().sum()
    }

    fn eigenvalues(&self) -> Vec<f64> {
        let m = DMatrix::from_fn(self.dim, self.dim, |i, j| self.a[i][j]);
        SymmetricEigen::new(m).eigenvalues.iter().copied().collect()
    }

    /// Smoothness constant L: largest eigenvalue magnitude of `A`.
    pub fn smoothness(&self) -> f64 {
        self.eigenvalues().into_iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Strong convexity constant μ: smallest eigenvalue of `A`.
    pub fn strong_convexity(&self) -> f64 {
        self.eigenvalues().into_iter().fold(f64::INFINITY, f64::min)
    }

    /// Number of Euler–Maruyama steps; the step is shrunk slightly so the
    /// last one lands exactly on the horizon.
    pub fn num_steps(&self) -> usize {
        (self.horizon / self.dt).round() as usize
    }

    fn effective_dt(&self) -> f64 {
        match self.num_steps() {
            0 => self.dt,
            n => self.horizon / n as f64,
        }
    }

    fn record_interval(&self) -> usize {
        self.record_every.unwrap_or_else(|| (self.num_steps() / 100).max(1))
    }
}

fn check_symmetric(rows: &[Vec<f64>], name: &str) -> Result<()> {
    let n = rows.len();
    for i in 0..n {
        for j in 0..n {
            let (x, y) = (rows[i][j], rows[j][i]);
            if !x.is_finite() {
                return Err(Error::Config(format!("{name} has a non-finite entry")));
            }
            if (x - y).abs() > SYMMETRY_TOL * x.abs().max(y.abs()).max(1.0) {
                return Err(Error::Config(format!("{name} is not symmetric at ({i}, {j})")));
            }
        }
    }
    Ok(())
}

/// Monte Carlo trace of `E‖δ(t)‖²`, `δ = θ − θ̃`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviationStats {
    pub times: Vec<f64>,
    pub mean_sq: Vec<f64>,
    pub std_err: Vec<f64>,
    pub trials: usize,
}

impl DeviationStats {
    /// `(E‖δ(T)‖², standard error)` at the horizon.
    pub fn final_value(&self) -> (f64, f64) {
        let last = self.mean_sq.len() - 1;
        (self.mean_sq[last], self.std_err[last])
    }
}

/// Euler–Maruyama integration of both trajectories, independent Brownian
/// increments per trial, trial `i` on PRNG stream `i` of the seed.
pub fn simulate_pair(spec: &SdeSpec) -> Result<DeviationStats> {
    spec.validate()?;
    integrate(spec, spec.effective_dt(), 1, spec.num_steps(), spec.record_interval())
}

/// Runs `steps` steps of size `dt`. Each step's Brownian increment is the sum
/// of `substeps` draws of variance `dt/substeps`, so a run with
/// `(dt, 2)` sees exactly the noise path of a run with `(dt/2, 1)`.
fn integrate(spec: &SdeSpec, dt: f64, substeps: usize, steps: usize, record: usize) -> Result<DeviationStats> {
    let d = spec.dim;
    let a = Matrix::from_rows(&spec.a)?;
    let sign = spec.drift.factor();
    let theta0 = spec.theta0.clone().unwrap_or_else(|| vec![0.0; d]);
    let sub_dt = dt / substeps as f64;
    let scale1: Vec<f64> = spec.sigma1.iter().map(|s| (s * sub_dt).sqrt()).collect();
    let scale2: Vec<f64> = spec.sigma2.iter().map(|s| (s * sub_dt).sqrt()).collect();
    let mut record_steps: Vec<usize> = (0..=steps).step_by(record).collect();
    if *record_steps.last().unwrap() != steps {
        record_steps.push(steps);
    }
    let lipschitz = spec.smoothness();

    let per_trial: Vec<Vec<f64>> = (0..spec.trials)
        .into_par_iter()
        .map(|trial| {
            let mut rng = rng::stream(spec.seed, trial as u64);
            let mut x = theta0.clone();
            let mut y = theta0.clone();
            let mut ax = vec![0.0; d];
            let mut ay = vec![0.0; d];
            let mut noise = vec![0.0; 2 * d];
            let mut out = Vec::with_capacity(record_steps.len());
            let mut next = 0;
            for step in 0..=steps {
                if record_steps[next] == step {
                    let dev: f64 = x.iter().zip(&y).map(|(p, q)| (p - q) * (p - q)).sum();
                    if !dev.is_finite() || dev > DIVERGENCE_LIMIT {
                        return Err(Error::non_finite(format!(
                            "SDE pair diverged at t = {:.4} in trial {trial} (dt = {dt}, L = {lipschitz}); reduce dt",
                            step as f64 * dt
                        )));
                    }
                    out.push(dev);
                    next += 1;
                }
                if step == steps {
                    break;
                }
                for i in 0..d {
                    let row = a.row(i);
                    ax[i] = dot(row, &x);
                    ay[i] = dot(row, &y);
                }
                noise.iter_mut().for_each(|v| *v = 0.0);
                for _ in 0..substeps {
                    for i in 0..d {
                        noise[i] += scale1[i] * rng::normal(&mut rng);
                    }
                    for i in 0..d {
                        noise[d + i] += scale2[i] * rng::normal(&mut rng);
                    }
                }
                for i in 0..d {
                    x[i] += sign * ax[i] * dt + noise[i];
                    y[i] += sign * ay[i] * dt + noise[d + i];
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;

    let n = spec.trials as f64;
    let mut mean_sq = vec![0.0; record_steps.len()];
    let mut sum_sq = vec![0.0; record_steps.len()];
    for trial in &per_trial {
        for (k, v) in trial.iter().enumerate() {
            mean_sq[k] += v;
            sum_sq[k] += v * v;
        }
    }
    let std_err = mean_sq
        .iter_mut()
        .zip(&sum_sq)
        .map(|(m, s)| {
            *m /= n;
            if spec.trials < 2 {
                0.0
            } else {
                ((s - n * *m * *m).max(0.0) / (n - 1.0) / n).sqrt()
            }
        })
        .collect();
    Ok(DeviationStats {
        times: record_steps.iter().map(|&s| s as f64 * dt).collect(),
        mean_sq,
        std_err,
        trials: spec.trials,
    })
}

/// Final-time deviation at `dt` and at `dt/2` on the same Brownian paths.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HalvingReport {
    pub coarse: f64,
    pub fine: f64,
    pub std_err: f64,
}

impl HalvingReport {
    pub fn difference(&self) -> f64 {
        (self.fine - self.coarse).abs()
    }
}

pub fn step_halving_check(spec: &SdeSpec) -> Result<HalvingReport> {
    spec.validate()?;
    let steps = spec.num_steps();
    let dt = spec.effective_dt();
    let coarse = integrate(spec, dt, 2, steps, steps.max(1))?;
    let fine = integrate(spec, dt / 2.0, 1, 2 * steps, (2 * steps).max(1))?;
    let (c, se) = coarse.final_value();
    Ok(HalvingReport {
        coarse: c,
        fine: fine.final_value().0,
        std_err: se,
    })
}

/// `(σ̄1+σ̄2)/(2L)·(e^{2LT} − 1)`.
pub fn bound_smooth(l: f64, sigma_bar1: f64, sigma_bar2: f64, horizon: f64) -> Result<f64> {
    if !(l > 0.0) {
        return Err(Error::Precondition(format!(
            "smoothness constant must be positive, got {l}"
        )));
    }
    Ok((sigma_bar1 + sigma_bar2) / (2.0 * l) * (2.0 * l * horizon).exp_m1())
}

/// `(σ̄1+σ̄2)/(2μ)·(1 − e^{−2μT})`.
pub fn bound_strongly_convex(mu: f64, sigma_bar1: f64, sigma_bar2: f64, horizon: f64) -> Result<f64> {
    if !(mu > 0.0) {
        return Err(Error::Precondition(format!(
            "strong convexity constant must be positive, got {mu}"
        )));
    }
    Ok(-(sigma_bar1 + sigma_bar2) / (2.0 * mu) * (-2.0 * mu * horizon).exp_m1())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundKind {
    Smooth,
    StronglyConvex,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub kind: BoundKind,
    pub empirical: f64,
    pub std_err: f64,
    pub bound: f64,
    /// `empirical ≤ bound + 3·std_err`.
    pub satisfied: bool,
    /// `bound − empirical`.
    pub margin: f64,
    pub trace: DeviationStats,
}

/// Simulates `spec` and compares `E‖δ(T)‖²` with the chosen bound. The
/// strongly convex bound needs descent drift and a positive definite `A`.
pub fn verify_bound(spec: &SdeSpec, kind: BoundKind) -> Result<BoundReport> {
    spec.validate()?;
    let (s1, s2) = (spec.sigma_bar1(), spec.sigma_bar2());
    let bound = match kind {
        BoundKind::Smooth => {
            let l = spec.smoothness();
            if l == 0.0 {
                // Zero drift: δ is a Brownian difference and the bound is its
                // L → 0 limit.
                (s1 + s2) * spec.horizon
            } else {
                bound_smooth(l, s1, s2, spec.horizon)?
            }
        }
        BoundKind::StronglyConvex => {
            if spec.drift != DriftSign::Descent {
                return Err(Error::Precondition(
                    "the strongly convex bound needs descent drift".into(),
                ));
            }
            bound_strongly_convex(spec.strong_convexity(), s1, s2, spec.horizon)?
        }
    };
    let trace = simulate_pair(spec)?;
    let (empirical, std_err) = trace.final_value();
    Ok(BoundReport {
        kind,
        empirical,
        std_err,
        bound,
        satisfied: empirical <= bound + 3.0 * std_err,
        margin: bound - empirical,
        trace,
    })
}

/// `s(e) = −½(e − e⋆)ᵀH(e − e⋆)` with symmetric `H`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticScore {
    h: Matrix,
    center: Vector,
}

impl QuadraticScore {
    pub fn new(h: &[Vec<f64>], center: Vector) -> Result<Self> {
        if h.len() != center.len() || h.iter().any(|r| r.len() != center.len()) {
            return Err(Error::Shape {
                context: "quadratic score Hessian",
                expected: center.len(),
                found: h.len(),
            });
        }
        check_symmetric(h, "H")?;
        Ok(Self {
            h: Matrix::from_rows(h)?,
            center,
        })
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    fn offset(&self, e: &[f64]) -> Result<Vector> {
        if e.len() != self.dim() {
            return Err(Error::Shape {
                context: "quadratic score point",
                expected: self.dim(),
                found: e.len(),
            });
        }
        Ok(e.iter().zip(&self.center).map(|(a, b)| a - b).collect())
    }

    pub fn value(&self, e: &[f64]) -> Result<f64> {
        let r = self.offset(e)?;
        Ok(-0.5 * dot(&r, &self.h.matvec(&r)?))
    }

    /// `∇s(e) = −H(e − e⋆)`.
    pub fn gradient(&self, e: &[f64]) -> Result<Vector> {
        let r = self.offset(e)?;
        Ok(self.h.matvec(&r)?.into_iter().map(|v| -v).collect())
    }

    /// `vᵀ∇²s v = −vᵀHv`.
    pub fn curvature(&self, v: &[f64]) -> Result<f64> {
        if v.len() != self.dim() {
            return Err(Error::Shape {
                context: "curvature direction",
                expected: self.dim(),
                found: v.len(),
            });
        }
        Ok(-dot(v, &self.h.matvec(v)?))
    }

    fn eigenvalues(&self) -> Vec<f64> {
        let d = self.dim();
        let m = DMatrix::from_fn(d, d, |i, j| self.h.get(i, j));
        SymmetricEigen::new(m).eigenvalues.iter().copied().collect()
    }

    /// `L_e`: largest eigenvalue of `H`.
    pub fn max_eigenvalue(&self) -> f64 {
        self.eigenvalues().into_iter().fold(f64::NEG_INFINITY, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AscentStep {
    pub gain: f64,
    pub lower_bound: f64,
    pub pass: bool,
}

/// Normalized gradient step of length `eta` on a concave quadratic score:
/// `gain = s(e0 + η·g/‖g‖) − s(e0)` against `η‖g‖ − (L_e/2)η²`.
pub fn ascent_step_check(score: &QuadraticScore, e0: &[f64], eta: f64) -> Result<AscentStep> {
    let eigen = score.eigenvalues();
    if eigen.iter().any(|&v| v < -SYMMETRY_TOL) {
        return Err(Error::Precondition("H must be positive semidefinite".into()));
    }
    let l_e = score.max_eigenvalue();
    let g = score.gradient(e0)?;
    let g_norm = norm_sq(&g).sqrt();
    if g_norm == 0.0 {
        return Err(Error::Precondition("score gradient vanishes at e0".into()));
    }
    let limit = if l_e > 0.0 { 2.0 * g_norm / l_e } else { f64::INFINITY };
    if !(eta > 0.0 && eta < limit) {
        return Err(Error::Precondition(format!("step {eta} outside (0, {limit})")));
    }
    let moved: Vector = e0.iter().zip(&g).map(|(e, gi)| e + eta * gi / g_norm).collect();
    let gain = score.value(&moved)? - score.value(e0)?;
    let lower_bound = eta * g_norm - 0.5 * l_e * eta * eta;
    Ok(AscentStep {
        gain,
        lower_bound,
        pass: gain >= lower_bound - 1e-12 && gain > 0.0,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvaturePoint {
    pub eta: f64,
    pub gain: f64,
    /// `gain / η²`.
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvatureReport {
    /// `vᵀ∇²s(e0)v`.
    pub curvature: f64,
    pub points: Vec<CurvaturePoint>,
    /// Every gain is positive, and for `η ≤ 1e-2` the ratio is within 1% of
    /// half the curvature.
    pub pass: bool,
}

/// Second-order ascent along `v` from a critical point `e0`.
pub fn curvature_ascent_check(score: &QuadraticScore, e0: &[f64], v: &[f64], etas: &[f64]) -> Result<CurvatureReport> {
    let g = score.gradient(e0)?;
    let scale = score.h.as_slice().iter().fold(1.0_f64, |m, x| m.max(x.abs()));
    if norm_sq(&g).sqrt() > 1e-12 * scale {
        return Err(Error::Precondition("e0 is not a critical point of the score".into()));
    }
    let curvature = score.curvature(v)?;
    if !(curvature > 0.0) {
        return Err(Error::Precondition(format!(
            "direction has non-positive curvature {curvature}"
        )));
    }
    if etas.is_empty() || etas.iter().any(|&e| !(e > 0.0 && e.is_finite())) {
        return Err(Error::Config("eta grid must be non-empty and positive".into()));
    }
    let base = score.value(e0)?;
    let half = 0.5 * curvature;
    let mut pass = true;
    let mut points = Vec::with_capacity(etas.len());
    for &eta in etas {
        let moved: Vector = e0.iter().zip(v).map(|(e, vi)| e + eta * vi).collect();
        let gain = score.value(&moved)? - base;
        let ratio = gain / (eta * eta);
        pass &= gain > 0.0;
        if eta <= 1e-2 {
            pass &= (ratio - half).abs() <= 0.01 * half;
        }
        points.push(CurvaturePoint { eta, gain, ratio });
    }
    Ok(CurvatureReport {
        curvature,
        points,
        pass,
    })
}

/// Randomized quadratic cases for both ascent checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AscentSweepConfig {
    /// Cases for the first-order step check.
    pub cases: usize,
    /// Cases for the second-order check at critical points.
    pub curvature_cases: usize,
    pub dim: usize,
    pub seed: u64,
    /// Eigenvalues of `H` are drawn from `[0, max]` (first-order) or
    /// `[−max, max]` (second-order).
    pub max_eigenvalue: f64,
    /// Coordinates of `e0` and `e⋆` are drawn from `[−max_offset, max_offset]`.
    pub max_offset: f64,
    pub etas: Vec<f64>,
}

impl Default for AscentSweepConfig {
    fn default() -> Self {
        Self {
            cases: 1000,
            curvature_cases: 100,
            dim: 2,
            seed: 0,
            max_eigenvalue: 10.0,
            max_offset: 5.0,
            etas: vec![1e-1, 3e-2, 1e-2, 1e-3, 1e-4],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AscentSweep {
    pub step_cases: usize,
    pub step_failures: usize,
    /// Smallest `gain − lower_bound` seen.
    pub min_slack: f64,
    pub curvature_cases: usize,
    pub curvature_failures: usize,
    /// Largest `|gain/η² − ½vᵀ∇²s v| / (½vᵀ∇²s v)` over `η ≤ 1e-2`.
    pub max_ratio_error: f64,
}

impl AscentSweep {
    pub fn passed(&self) -> bool {
        self.step_failures == 0 && self.curvature_failures == 0
    }
}

/// `Q·diag(λ)·Qᵀ` with `Q` from the QR factorization of a Gaussian matrix.
fn random_symmetric<R: rand::Rng + ?Sized>(eigen: &[f64], rng: &mut R) -> (Vec<Vec<f64>>, DMatrix<f64>) {
    let d = eigen.len();
    let g = DMatrix::from_fn(d, d, |_, _| rng::normal(rng));
    let q = g.qr().q();
    let h = &q * DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(eigen)) * q.transpose();
    let rows = (0..d)
        .map(|i| (0..d).map(|j| 0.5 * (h[(i, j)] + h[(j, i)])).collect())
        .collect();
    (rows, q)
}

pub fn ascent_sweep(config: &AscentSweepConfig) -> Result<AscentSweep> {
    use rand::Rng;
    if config.dim == 0 || !(config.max_eigenvalue > 0.0) || !(config.max_offset > 0.0) {
        return Err(Error::Config("ascent sweep needs dim ≥ 1 and positive ranges".into()));
    }
    let mut rng = rng::seeded(config.seed);
    let d = config.dim;
    let (m, off) = (config.max_eigenvalue, config.max_offset);
    let mut step_failures = 0;
    let mut min_slack = f64::INFINITY;
    let mut done = 0;
    while done < config.cases {
        let eigen: Vec<f64> = (0..d).map(|_| rng.random_range(0.0..m)).collect();
        let (h, _) = random_symmetric(&eigen, &mut rng);
        let star: Vector = (0..d).map(|_| rng.random_range(-off..off)).collect();
        let e0: Vector = (0..d).map(|_| rng.random_range(-off..off)).collect();
        let score = QuadraticScore::new(&h, star)?;
        let g = norm_sq(&score.gradient(&e0)?).sqrt();
        let l_e = score.max_eigenvalue();
        let frac: f64 = rng.random_range(0.0..1.0);
        if g < 1e-9 || frac == 0.0 {
            continue;
        }
        let eta = if l_e > 0.0 { frac * 2.0 * g / l_e } else { frac };
        let r = ascent_step_check(&score, &e0, eta)?;
        step_failures += usize::from(!r.pass);
        min_slack = min_slack.min(r.gain - r.lower_bound);
        done += 1;
    }

    let mut curvature_failures = 0;
    let mut max_ratio_error: f64 = 0.0;
    for _ in 0..config.curvature_cases {
        // H needs a negative eigenvalue for s to curve upward somewhere.
        let mut eigen: Vec<f64> = (0..d).map(|_| rng.random_range(-m..m)).collect();
        eigen[0] = -rng.random_range(0.1..m);
        let (h, q) = random_symmetric(&eigen, &mut rng);
        let star: Vector = (0..d).map(|_| rng.random_range(-off..off)).collect();
        let v: Vector = q.column(0).iter().copied().collect();
        let score = QuadraticScore::new(&h, star.clone())?;
        let r = curvature_ascent_check(&score, &star, &v, &config.etas)?;
        curvature_failures += usize::from(!r.pass);
        let half = 0.5 * r.curvature;
        for p in r.points.iter().filter(|p| p.eta <= 1e-2) {
            max_ratio_error = max_ratio_error.max((p.ratio - half).abs() / half);
        }
    }
    Ok(AscentSweep {
        step_cases: config.cases,
        step_failures,
        min_slack,
        curvature_cases: config.curvature_cases,
        curvature_failures,
        max_ratio_error,
    })
}
