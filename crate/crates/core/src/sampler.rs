//! Reverse Gaussian sampling: joint propagation of the state mean and the
//! per-state covariance from `s = S` down to 0.
//!
//! Mean update per transition: `X_{s-z} = a_s X_s + b_s eps_mu(X_s)`.
//! Covariance update (first-order propagation through the denoiser,
//! `F = a_s I + b_s J_s`):
//!
//! ```text
//! Var_{s-z} = F Var_s F' + b_s^2 Sigma_eps(X_s)
//! ```
//!
//! Variants: `u2diff` treats `J_s = 0` and holds the covariance at zero
//! until the delay step `s_hat`; `u2diffine` uses the diagonal of the
//! per-state Jacobian with no delay; `full_jacobian` uses the full 2x2
//! block with singular values clamped and the result symmetrized. The
//! final step estimates `X_0` from `X_1` by the mean update alone and
//! copies the covariance.

use ndarray::{Array2, Array3, Zip};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::io::BufRead;
use std::path::Path;

use crate::denoiser::{Denoiser, DenoiserOutput, DenoiserQuery, JacobianMode};
use crate::error::{Error, Result};
use crate::gaussian2d::{CovParams, UncertainScene};
use crate::rng::substream_indexed;
use crate::scene::CondScene;
use crate::schedule::{ddim_coefficients, NoiseSchedule, StepPlan};

/// Sampling variant: how the Jacobian enters the covariance update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "u2diff")]
    U2Diff,
    #[serde(rename = "u2diffine")]
    U2Diffine,
    #[serde(rename = "full_jacobian")]
    FullJacobian,
}

impl Variant {
    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::U2Diff => "u2diff",
            Variant::U2Diffine => "u2diffine",
            Variant::FullJacobian => "full_jacobian",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub variant: Variant,
    pub plan: StepPlan,
    pub k: usize,
    pub seed: u64,
    /// Singular-value clamp for the full-Jacobian variant.
    pub sv_clamp: f64,
    /// Overwrite observed entries of the returned means with the
    /// conditioning observations.
    pub condition_replace: bool,
}

impl SamplerConfig {
    pub fn new(variant: Variant, plan: StepPlan, k: usize, seed: u64) -> Self {
        Self { variant, plan, k, seed, sv_clamp: 100.0, condition_replace: true }
    }

    /// The effective variance-delay step: `u2diffine` and `full_jacobian`
    /// propagate from the very first transition.
    fn effective_delay(&self, s_max: usize) -> usize {
        match self.variant {
            Variant::U2Diff => self.plan.var_delay,
            Variant::U2Diffine | Variant::FullJacobian => s_max,
        }
    }

    fn jacobian_mode(&self) -> JacobianMode {
        match self.variant {
            Variant::U2Diff => JacobianMode::None,
            Variant::U2Diffine => JacobianMode::Diagonal,
            Variant::FullJacobian => JacobianMode::Full,
        }
    }
}

/// Per-state symmetric 2x2 field carried through the propagation.
#[derive(Debug, Clone, PartialEq)]
pub struct SymField {
    pub v00: Array2<f64>,
    pub v01: Array2<f64>,
    pub v11: Array2<f64>,
}

impl SymField {
    pub fn zeros(t: usize, n: usize) -> Self {
        Self { v00: Array2::zeros((t, n)), v01: Array2::zeros((t, n)), v11: Array2::zeros((t, n)) }
    }

    pub fn isotropic(t: usize, n: usize, var: f64) -> Self {
        Self {
            v00: Array2::from_elem((t, n), var),
            v01: Array2::zeros((t, n)),
            v11: Array2::from_elem((t, n), var),
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        self.v00.dim()
    }

    fn check_psd(&self) -> Result<()> {
        let (t, n) = self.dims();
        for ti in 0..t {
            for ni in 0..n {
                let (a, b, c) = (self.v00[(ti, ni)], self.v01[(ti, ni)], self.v11[(ti, ni)]);
                let det = a * c - b * b;
                let scale = (a.abs() + c.abs()).max(1.0);
                if a < -1e-12 * scale || c < -1e-12 * scale || det < -1e-9 * scale * scale {
                    return Err(Error::Numeric(format!(
                        "covariance not PSD at state (t={ti}, n={ni}): [[{a}, {b}], [{b}, {c}]]"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Per-state Jacobian field used by the covariance update.
pub enum JacField {
    Zero,
    Diag { j0: Array2<f64>, j1: Array2<f64> },
    Full { j00: Array2<f64>, j01: Array2<f64>, j10: Array2<f64>, j11: Array2<f64> },
}

impl JacField {
    fn at(&self, t: usize, n: usize) -> [[f64; 2]; 2] {
        match self {
            JacField::Zero => [[0.0, 0.0], [0.0, 0.0]],
            JacField::Diag { j0, j1 } => [[j0[(t, n)], 0.0], [0.0, j1[(t, n)]]],
            JacField::Full { j00, j01, j10, j11 } => [[j00[(t, n)], j01[(t, n)]], [j10[(t, n)], j11[(t, n)]]],
        }
    }
}

/// Clamp the singular values of a 2x2 matrun to `[-clamp, clamp]` (i.e.
/// cap them at `clamp`) and symmetrize the reconstruction.
pub fn clamp_and_symmetrize(j: [[f64; 2]; 2], clamp: f64) -> [[f64; 2]; 2] {
    // SVD via the eigen-decomposition of J'J (closed form for 2x2).
    let jtj = [
        [j[0][0] * j[0][0] + j[1][0] * j[1][0], j[0][0] * j[0][1] + j[1][0] * j[1][1]],
        [j[0][0] * j[0][1] + j[1][0] * j[1][1], j[0][1] * j[0][1] + j[1][1] * j[1][1]],
    ];
    let tr = jtj[0][0] + jtj[1][1];
    let det = jtj[0][0] * jtj[1][1] - jtj[0][1] * jtj[1][0];
    let disc = (0.25 * tr * tr - det).max(0.0).sqrt();
    let s1 = (0.5 * tr + disc).max(0.0).sqrt();
    let s2 = (0.5 * tr - disc).max(0.0).sqrt();
    if s1 <= clamp && s2 <= clamp {
        // No clamping needed; still symmetrize.
        let sym = 0.5 * (j[0][1] + j[1][0]);
        return [[j[0][0], sym], [sym, j[1][1]]];
    }
    // Right singular vectors from J'J.
    let v1 = eigvec(jtj, s1 * s1);
    let v2 = [-v1[1], v1[0]];
    // Left singular vectors u_i = J v_i / s_i (fall back to canonical axes
    // for zero singular values).
    let u1 = mat_vec(j, v1);
    let u1 = normalize_or(u1, [1.0, 0.0]);
    let u2 = mat_vec(j, v2);
    let u2 = normalize_or(u2, [-u1[1], u1[0]]);
    let c1 = s1.min(clamp);
    let c2 = s2.min(clamp);
    let mut out = [[0.0f64; 2]; 2];
    for r in 0..2 {
        for c in 0..2 {
            out[r][c] = c1 * u1[r] * v1[c] + c2 * u2[r] * v2[c];
        }
    }
    let sym = 0.5 * (out[0][1] + out[1][0]);
    [[out[0][0], sym], [sym, out[1][1]]]
}

fn eigvec(m: [[f64; 2]; 2], lambda: f64) -> [f64; 2] {
    // Solve (M - lambda I) v = 0; pick the better-conditioned row.
    let r0 = [m[0][0] - lambda, m[0][1]];
    let r1 = [m[1][0], m[1][1] - lambda];
    let v = if r0[0].abs() + r0[1].abs() >= r1[0].abs() + r1[1].abs() {
        [-r0[1], r0[0]]
    } else {
        [-r1[1], r1[0]]
    };
    normalize_or(v, [1.0, 0.0])
}

fn mat_vec(m: [[f64; 2]; 2], v: [f64; 2]) -> [f64; 2] {
    [m[0][0] * v[0] + m[0][1] * v[1], m[1][0] * v[0] + m[1][1] * v[1]]
}

fn normalize_or(v: [f64; 2], fallback: [f64; 2]) -> [f64; 2] {
    let n = (v[0] * v[0] + v[1] * v[1]).sqrt();
    if n > 1e-12 {
        [v[0] / n, v[1] / n]
    } else {
        fallback
    }
}

/// Elementwise affine mean update `a * x + b * eps_mu`.
pub fn mean_step(x: &Array3<f64>, eps_mu: &Array3<f64>, a: f64, b: f64) -> Array3<f64> {
    let mut out = x.clone();
    Zip::from(&mut out).and(eps_mu).for_each(|o, e| *o = a * *o + b * e);
    out
}

/// One covariance transition. The congruence keeps symmetric matrices
/// symmetric; the off-diagonal is re-symmetrized against rounding.
pub fn var_step(
    v: &SymField,
    eps_cov: (&Array2<f64>, &Array2<f64>, &Array2<f64>),
    jac: &JacField,
    a: f64,
    b: f64,
) -> Result<SymField> {
    v.check_psd()?;
    let (t, n) = v.dims();
    let (sx, sy, rho) = eps_cov;
    let mut out = SymField::zeros(t, n);
    for ti in 0..t {
        for ni in 0..n {
            let j = jac.at(ti, ni);
            let f = [
                [a + b * j[0][0], b * j[0][1]],
                [b * j[1][0], a + b * j[1][1]],
            ];
            let v00 = v.v00[(ti, ni)];
            let v01 = v.v01[(ti, ni)];
            let v11 = v.v11[(ti, ni)];
            // F V
            let fv = [
                [f[0][0] * v00 + f[0][1] * v01, f[0][0] * v01 + f[0][1] * v11],
                [f[1][0] * v00 + f[1][1] * v01, f[1][0] * v01 + f[1][1] * v11],
            ];
            // (F V) F'
            let m00 = fv[0][0] * f[0][0] + fv[0][1] * f[0][1];
            let m01 = fv[0][0] * f[1][0] + fv[0][1] * f[1][1];
            let m10 = fv[1][0] * f[0][0] + fv[1][1] * f[0][1];
            let m11 = fv[1][0] * f[1][0] + fv[1][1] * f[1][1];
            let (esx, esy, erho) = (sx[(ti, ni)], sy[(ti, ni)], rho[(ti, ni)]);
            let b2 = b * b;
            out.v00[(ti, ni)] = m00 + b2 * esx * esx;
            out.v01[(ti, ni)] = 0.5 * (m01 + m10) + b2 * erho * esx * esy;
            out.v11[(ti, ni)] = m11 + b2 * esy * esy;
        }
    }
    Ok(out)
}

/// K sampled completions of one conditioned scene.
#[derive(Debug, Clone)]
pub struct ModeSet {
    pub scene_id: String,
    pub variant: Variant,
    pub seed: u64,
    pub modes: Vec<UncertainScene>,
    /// Optional per-mode error probabilities attached by a ranker.
    pub e: Option<Vec<f64>>,
}

fn draw_noise(rng: &mut impl Rng, t: usize, n: usize) -> Array3<f64> {
    Array3::from_shape_fn((t, n, 2), |_| rng.sample::<f64, _>(StandardNormal))
}

/// The starting tensor [`sample`] draws for mode `k` under `seed`;
/// exposed so oracles can couple auxiliary trajectories to the same
/// starting point.
pub fn mode_start(seed: u64, k: usize, t: usize, n: usize) -> Array3<f64> {
    let mut rng = substream_indexed(seed, "mode", k as u64);
    draw_noise(&mut rng, t, n)
}

fn jac_field_from(output: &DenoiserOutput, cfg: &SamplerConfig) -> Result<JacField> {
    match cfg.variant {
        Variant::U2Diff => Ok(JacField::Zero),
        Variant::U2Diffine => {
            let [j0, j1] = output
                .jac_diag
                .clone()
                .ok_or_else(|| Error::Numeric("denoiser did not return a diagonal jacobian".into()))?;
            Ok(JacField::Diag { j0, j1 })
        }
        Variant::FullJacobian => {
            let blocks = output
                .jac_full
                .clone()
                .ok_or_else(|| Error::Numeric("denoiser did not return a full jacobian".into()))?;
            let (t, n) = blocks[0][0].dim();
            let mut j00 = Array2::zeros((t, n));
            let mut j01 = Array2::zeros((t, n));
            let mut j10 = Array2::zeros((t, n));
            let mut j11 = Array2::zeros((t, n));
            for ti in 0..t {
                for ni in 0..n {
                    let raw = [
                        [blocks[0][0][(ti, ni)], blocks[0][1][(ti, ni)]],
                        [blocks[1][0][(ti, ni)], blocks[1][1][(ti, ni)]],
                    ];
                    let c = clamp_and_symmetrize(raw, cfg.sv_clamp);
                    j00[(ti, ni)] = c[0][0];
                    j01[(ti, ni)] = c[0][1];
                    j10[(ti, ni)] = c[1][0];
                    j11[(ti, ni)] = c[1][1];
                }
            }
            Ok(JacField::Full { j00, j01, j10, j11 })
        }
    }
}

fn field_to_cov(v: &SymField) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let (t, n) = v.dims();
    let mut sx = Array2::zeros((t, n));
    let mut sy = Array2::zeros((t, n));
    let mut rho = Array2::zeros((t, n));
    for ti in 0..t {
        for ni in 0..n {
            let p = CovParams::from_matrix(v.v00[(ti, ni)], v.v01[(ti, ni)], v.v11[(ti, ni)])
                .unwrap_or(CovParams::zero());
            sx[(ti, ni)] = p.sx;
            sy[(ti, ni)] = p.sy;
            rho[(ti, ni)] = p.rho;
        }
    }
    (sx, sy, rho)
}

/// One mode: run the full reverse pass from a given starting tensor.
/// Errors carry `(step, state)` provenance from the covariance check.
pub fn sample_one_mode(
    model: &dyn Denoiser,
    cond: &CondScene,
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
    x_start: Array3<f64>,
    start_var: Option<&SymField>,
) -> Result<UncertainScene> {
    let (t, n, _) = x_start.dim();
    let s_max = sched.len();
    let delay = cfg.effective_delay(s_max);
    let mut x = x_start;
    let mut v = start_var.cloned().unwrap_or_else(|| SymField::zeros(t, n));

    let steps = &cfg.plan.steps;
    for i in 0..steps.len() - 1 {
        let s = steps[i];
        let zeta = s - steps[i + 1];
        let jac_mode = if s > delay { JacobianMode::None } else { cfg.jacobian_mode() };
        let q = DenoiserQuery { x_s: &x, s, cond, jacobian_mode: jac_mode };
        let out = model.evaluate(&q).map_err(|e| Error::Numeric(format!("step s={s}: {e}")))?;
        let (a, b) = ddim_coefficients(sched, s, zeta)?;
        let next_x = mean_step(&x, &out.eps_mu, a, b);
        v = if s > delay {
            SymField::zeros(t, n)
        } else {
            let jac = if jac_mode == JacobianMode::None { JacField::Zero } else { jac_field_from(&out, cfg)? };
            var_step(&v, (&out.cov_sx, &out.cov_sy, &out.cov_rho), &jac, a, b)
                .map_err(|e| Error::Numeric(format!("step s={s}: {e}")))?
        };
        x = next_x;
    }

    // Final step: estimate X_0 from X_1 by the mean update, copy variance.
    let q = DenoiserQuery { x_s: &x, s: 1, cond, jacobian_mode: JacobianMode::None };
    let out = model.evaluate(&q).map_err(|e| Error::Numeric(format!("step s=1: {e}")))?;
    let (a, b) = ddim_coefficients(sched, 1, 1)?;
    let mut x0 = mean_step(&x, &out.eps_mu, a, b);

    if cfg.condition_replace {
        for ti in 0..t {
            for ni in 0..n {
                if cond.mask[(ti, ni)] == 1 {
                    x0[(ti, ni, 0)] = cond.observed[(ti, ni, 0)];
                    x0[(ti, ni, 1)] = cond.observed[(ti, ni, 1)];
                }
            }
        }
    }
    let (sx, sy, rho) = field_to_cov(&v);
    Ok(UncertainScene { means: x0, sx, sy, rho })
}

/// Sample `cfg.k` independent modes. Each mode draws its starting tensor
/// from an indexed substream of `cfg.seed`, so the set is deterministic
/// and modes are i.i.d.; modes run concurrently.
pub fn sample(
    model: &dyn Denoiser,
    scene_id: &str,
    cond: &CondScene,
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
) -> Result<ModeSet> {
    if cfg.k == 0 {
        return Err(Error::Param("sampler needs k >= 1".into()));
    }
    if *cfg.plan.steps.first().unwrap_or(&0) != sched.len() {
        return Err(Error::Param(format!(
            "step plan starts at {} but the schedule has S = {}",
            cfg.plan.steps.first().unwrap_or(&0),
            sched.len()
        )));
    }
    let (t, n) = cond.mask.dim();
    let modes: Result<Vec<UncertainScene>> = (0..cfg.k)
        .into_par_iter()
        .map(|k| {
            let x_start = mode_start(cfg.seed, k, t, n);
            sample_one_mode(model, cond, sched, cfg, x_start, None)
                .map_err(|e| Error::Numeric(format!("mode {k}: {e}")))
        })
        .collect();
    Ok(ModeSet { scene_id: scene_id.to_string(), variant: cfg.variant, seed: cfg.seed, modes: modes?, e: None })
}

/// Monte-Carlo oracle statistics: per-state mean, covariance and the
/// standard error of each covariance entry.
pub struct McCovariance {
    pub mean: Array3<f64>,
    pub cov: SymField,
    pub se: SymField,
    pub n_runs: usize,
}

/// How the Monte-Carlo trajectories start.
pub enum McStart {
    /// Fresh `N(0, I)` draw per run (the sampler's own initialization).
    Resample,
    /// All runs share a fixed starting tensor (zero start variance).
    Fixed(Array3<f64>),
}

/// One stochastic reverse trajectory: at every transition the noise
/// estimate is drawn from the predicted per-state Gaussian
/// `N(eps_mu, Sigma_eps)` instead of linearizing; the final step applies
/// the mean update only (matching the sampler's variance copy). This is
/// the process whose per-start conditional moments the first-order
/// propagation approximates, and the inner simulator of the Monte-Carlo
/// covariance oracle.
pub fn stochastic_trajectory(
    model: &dyn Denoiser,
    cond: &CondScene,
    sched: &NoiseSchedule,
    plan: &StepPlan,
    x_start: Array3<f64>,
    rng: &mut impl Rng,
) -> Result<Array3<f64>> {
    let (t, n, _) = x_start.dim();
    let mut x = x_start;
    for i in 0..plan.steps.len() - 1 {
        let s = plan.steps[i];
        let zeta = s - plan.steps[i + 1];
        let q = DenoiserQuery { x_s: &x, s, cond, jacobian_mode: JacobianMode::None };
        let out = model.evaluate(&q)?;
        let (a, b) = ddim_coefficients(sched, s, zeta)?;
        // Draw eps ~ N(eps_mu, Sigma_eps) per state.
        let mut eps = out.eps_mu.clone();
        for ti in 0..t {
            for ni in 0..n {
                let sx = out.cov_sx[(ti, ni)];
                let sy = out.cov_sy[(ti, ni)];
                let rho = out.cov_rho[(ti, ni)];
                let z0: f64 = rng.sample(StandardNormal);
                let z1: f64 = rng.sample(StandardNormal);
                // Cholesky of [[sx^2, r sx sy], [r sx sy, sy^2]].
                eps[(ti, ni, 0)] += sx * z0;
                eps[(ti, ni, 1)] += sy * (rho * z0 + (1.0 - rho * rho).max(0.0).sqrt() * z1);
            }
        }
        x = mean_step(&x, &eps, a, b);
    }
    let q = DenoiserQuery { x_s: &x, s: 1, cond, jacobian_mode: JacobianMode::None };
    let out = model.evaluate(&q)?;
    let (a, b) = ddim_coefficients(sched, 1, 1)?;
    Ok(mean_step(&x, &out.eps_mu, a, b))
}

/// Monte-Carlo estimate of the moments of the stochastic reverse process
/// over many trajectories. The empirical covariance of `X_0` is the
/// quantity the first-order propagation approximates.
pub fn mc_covariance_oracle(
    model: &dyn Denoiser,
    cond: &CondScene,
    sched: &NoiseSchedule,
    plan: &StepPlan,
    n_runs: usize,
    seed: u64,
    start: McStart,
) -> Result<McCovariance> {
    if n_runs < 2 {
        return Err(Error::Param(format!(
            "Monte-Carlo oracle needs >= 2 runs for a covariance (degenerate with {n_runs})"
        )));
    }
    let (t, n) = cond.mask.dim();
    let runs: Result<Vec<Array3<f64>>> = (0..n_runs)
        .into_par_iter()
        .map(|run| {
            let mut rng = substream_indexed(seed, "mc-run", run as u64);
            let x = match &start {
                McStart::Resample => draw_noise(&mut rng, t, n),
                McStart::Fixed(x0) => x0.clone(),
            };
            stochastic_trajectory(model, cond, sched, plan, x, &mut rng)
        })
        .collect();
    let runs = runs?;

    let nf = n_runs as f64;
    let mut mean = Array3::zeros((t, n, 2));
    for r in &runs {
        mean += r;
    }
    mean /= nf;
    let mut cov = SymField::zeros(t, n);
    for r in &runs {
        for ti in 0..t {
            for ni in 0..n {
                let dx = r[(ti, ni, 0)] - mean[(ti, ni, 0)];
                let dy = r[(ti, ni, 1)] - mean[(ti, ni, 1)];
                cov.v00[(ti, ni)] += dx * dx;
                cov.v01[(ti, ni)] += dx * dy;
                cov.v11[(ti, ni)] += dy * dy;
            }
        }
    }
    cov.v00 /= nf - 1.0;
    cov.v01 /= nf - 1.0;
    cov.v11 /= nf - 1.0;

    // Gaussian standard errors of covariance entries:
    // se(C_ij) = sqrt((C_ii C_jj + C_ij^2) / (n - 1)).
    let mut se = SymField::zeros(t, n);
    for ti in 0..t {
        for ni in 0..n {
            let c00 = cov.v00[(ti, ni)];
            let c01 = cov.v01[(ti, ni)];
            let c11 = cov.v11[(ti, ni)];
            se.v00[(ti, ni)] = (2.0 * c00 * c00 / (nf - 1.0)).sqrt();
            se.v01[(ti, ni)] = ((c00 * c11 + c01 * c01) / (nf - 1.0)).sqrt();
            se.v11[(ti, ni)] = (2.0 * c11 * c11 / (nf - 1.0)).sqrt();
        }
    }
    Ok(McCovariance { mean, cov, se, n_runs })
}

/// Wall-clock probe: median milliseconds per mode over `reps` repetitions
/// for each variant.
pub fn timing_probe(
    model: &dyn Denoiser,
    cond: &CondScene,
    sched: &NoiseSchedule,
    plan: &StepPlan,
    variants: &[Variant],
    k: usize,
    reps: usize,
) -> Result<Vec<(Variant, f64)>> {
    if reps < 1 {
        return Err(Error::Param("timing probe needs >= 1 repetition".into()));
    }
    let mut out = Vec::new();
    for &variant in variants {
        let cfg = SamplerConfig::new(variant, plan.clone(), k, 1234);
        let mut times: Vec<f64> = Vec::with_capacity(reps);
        for _ in 0..reps {
            let started = std::time::Instant::now();
            let set = sample(model, "bench", cond, sched, &cfg)?;
            std::hint::black_box(&set);
            times.push(started.elapsed().as_secs_f64() * 1e3 / k as f64);
        }
        times.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = times[times.len() / 2];
        out.push((variant, median));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// ModeSet persistence (JSONL, one mode per line)
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct ModeRecord {
    scene_id: String,
    mode: usize,
    variant: String,
    seed: u64,
    /// `(T, N, 2)` nested means.
    means: Vec<Vec<[f64; 2]>>,
    /// Row-major (t-major) flat list of per-state covariance parameters.
    covs: Vec<CovRecord>,
    #[serde(skip_serializing_if = "Option::is_none")]
    e: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct CovRecord {
    sx: f64,
    sy: f64,
    rho: f64,
}

fn variant_from_str(s: &str) -> Result<Variant> {
    match s {
        "u2diff" => Ok(Variant::U2Diff),
        "u2diffine" => Ok(Variant::U2Diffine),
        "full_jacobian" => Ok(Variant::FullJacobian),
        other => Err(Error::Param(format!("unknown sampler variant '{other}'"))),
    }
}

/// Append the JSONL records of one mode set to a string buffer.
pub fn write_modes_jsonl(buf: &mut String, set: &ModeSet) -> Result<()> {
    for (k, mode) in set.modes.iter().enumerate() {
        let (t, n) = mode.dims();
        let mut means = Vec::with_capacity(t);
        for ti in 0..t {
            let mut row = Vec::with_capacity(n);
            for ni in 0..n {
                row.push([mode.means[(ti, ni, 0)], mode.means[(ti, ni, 1)]]);
            }
            means.push(row);
        }
        let mut covs = Vec::with_capacity(t * n);
        for ti in 0..t {
            for ni in 0..n {
                covs.push(CovRecord { sx: mode.sx[(ti, ni)], sy: mode.sy[(ti, ni)], rho: mode.rho[(ti, ni)] });
            }
        }
        let rec = ModeRecord {
            scene_id: set.scene_id.clone(),
            mode: k,
            variant: set.variant.as_str().to_string(),
            seed: set.seed,
            means,
            covs,
            e: set.e.as_ref().map(|e| e[k]),
        };
        let line = serde_json::to_string(&rec).map_err(|e| Error::Numeric(format!("serialize mode: {e}")))?;
        writeln!(buf, "{line}").expect("string write");
    }
    Ok(())
}

pub fn save_modes(sets: &[ModeSet], path: &Path) -> Result<()> {
    let mut buf = String::new();
    for set in sets {
        write_modes_jsonl(&mut buf, set)?;
    }
    std::fs::write(path, buf)?;
    Ok(())
}

/// Load mode sets grouped by scene id, in file order.
pub fn load_modes(path: &Path) -> Result<Vec<ModeSet>> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut sets: Vec<ModeSet> = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ModeRecord =
            serde_json::from_str(&line).map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?;
        let t = rec.means.len();
        let n = rec.means.first().map(|r| r.len()).unwrap_or(0);
        if t == 0 || n == 0 || rec.covs.len() != t * n {
            return Err(Error::Parse { line: i + 1, msg: "inconsistent means/covs shapes".into() });
        }
        let mut mode = UncertainScene::zero_cov(Array3::from_shape_fn((t, n, 2), |(ti, ni, d)| rec.means[ti][ni][d]));
        for ti in 0..t {
            for ni in 0..n {
                let c = &rec.covs[ti * n + ni];
                mode.sx[(ti, ni)] = c.sx;
                mode.sy[(ti, ni)] = c.sy;
                mode.rho[(ti, ni)] = c.rho;
            }
        }
        let variant = variant_from_str(&rec.variant).map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?;
        let matches_last = sets
            .last()
            .map(|s: &ModeSet| s.scene_id == rec.scene_id && s.modes.len() == rec.mode)
            .unwrap_or(false);
        if matches_last {
            let set = sets.last_mut().unwrap();
            set.modes.push(mode);
            if let (Some(es), Some(e)) = (set.e.as_mut(), rec.e) {
                es.push(e);
            }
        } else {
            if rec.mode != 0 {
                return Err(Error::Parse { line: i + 1, msg: format!("mode index {} breaks grouping", rec.mode) });
            }
            sets.push(ModeSet {
                scene_id: rec.scene_id,
                variant,
                seed: rec.seed,
                modes: vec![mode],
                e: rec.e.map(|e| vec![e]),
            });
        }
    }
    Ok(sets)
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}
