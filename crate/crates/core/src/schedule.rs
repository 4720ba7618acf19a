//! Diffusion noise schedule and skip-step machinery.
//!
//! Step indices `s` are 1-based: `s = 0` is clean data, `s = S` is (close
//! to) isotropic noise. By convention `alpha_hat(0) = 1` and `gamma(0) = 0`
//! so the final denoising step `s = 1 -> 0` uses the same coefficient
//! formulas as every other step.

use ndarray::Array3;

use crate::error::{Error, Result};

/// Precomputed noise-schedule tables for `S` steps.
///
/// Immutable after construction; safe to share across threads.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_hats: Vec<f64>,
    gammas: Vec<f64>,
}

impl NoiseSchedule {
    /// Build the quadratic schedule: `beta` interpolates linearly in
    /// `sqrt(beta)` between the endpoints, so `beta_s` itself follows a
    /// quadratic in `s`. Endpoints are reproduced exactly.
    pub fn quadratic(s_count: usize, beta0: f64, beta_s: f64) -> Result<Self> {
        if s_count < 2 {
            return Err(Error::Param(format!("schedule needs S >= 2, got {s_count}")));
        }
        if !(beta0 > 0.0 && beta0 < beta_s && beta_s < 1.0) {
            return Err(Error::Param(format!(
                "schedule endpoints must satisfy 0 < beta0 < betaS < 1, got beta0={beta0}, betaS={beta_s}"
            )));
        }
        let r0 = beta0.sqrt();
        let r1 = beta_s.sqrt();
        let betas: Vec<f64> = (1..=s_count)
            .map(|s| {
                if s == 1 {
                    beta0
                } else if s == s_count {
                    beta_s
                } else {
                    let f = (s - 1) as f64 / (s_count - 1) as f64;
                    let r = r0 + f * (r1 - r0);
                    r * r
                }
            })
            .collect();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_hats = Vec::with_capacity(s_count);
        let mut prod = 1.0;
        for a in &alphas {
            prod *= a;
            alpha_hats.push(prod);
        }
        let gammas: Vec<f64> = alpha_hats.iter().map(|ah| (1.0 - ah).sqrt()).collect();
        Ok(Self { betas, alphas, alpha_hats, gammas })
    }

    /// Number of diffusion steps `S`.
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    /// `beta_s` for `1 <= s <= S`.
    pub fn beta(&self, s: usize) -> f64 {
        assert!(s >= 1 && s <= self.len(), "beta index {s} out of 1..={}", self.len());
        self.betas[s - 1]
    }

    /// `alpha_s = 1 - beta_s` for `1 <= s <= S`.
    pub fn alpha(&self, s: usize) -> f64 {
        assert!(s >= 1 && s <= self.len(), "alpha index {s} out of 1..={}", self.len());
        self.alphas[s - 1]
    }

    /// Cumulative product `alpha_hat_s` for `0 <= s <= S`; `alpha_hat(0) = 1`.
    pub fn alpha_hat(&self, s: usize) -> f64 {
        assert!(s <= self.len(), "alpha_hat index {s} out of 0..={}", self.len());
        if s == 0 {
            1.0
        } else {
            self.alpha_hats[s - 1]
        }
    }

    /// `gamma_s = sqrt(1 - alpha_hat_s)` for `0 <= s <= S`; `gamma(0) = 0`.
    pub fn gamma(&self, s: usize) -> f64 {
        assert!(s <= self.len(), "gamma index {s} out of 0..={}", self.len());
        if s == 0 {
            0.0
        } else {
            self.gammas[s - 1]
        }
    }

    /// Ancestral posterior variance `(1 - alpha_hat_{s-1}) / (1 - alpha_hat_s) * beta_s`.
    ///
    /// Kept as a documented constant of the schedule; sampling in this crate
    /// is deterministic skip-step denoising and never uses it.
    pub fn ddpm_posterior_variance(&self, s: usize) -> f64 {
        assert!(s >= 1 && s <= self.len());
        (1.0 - self.alpha_hat(s - 1)) / (1.0 - self.alpha_hat(s)) * self.beta(s)
    }
}

/// Coefficients `(a_s, b_s)` of the deterministic denoising update
/// `X_{s-zeta} = a_s * X_s + b_s * eps`, with `a_s = sqrt(ahat_{s-zeta}/ahat_s)`
/// and `b_s = gamma_{s-zeta} - a_s * gamma_s`.
///
/// For `zeta > 0` the coefficients satisfy `a_s > 1` and `b_s < 0`. The
/// `zeta = 0` case is the identity `(1, 0)`.
pub fn ddim_coefficients(sched: &NoiseSchedule, s: usize, zeta: usize) -> Result<(f64, f64)> {
    if zeta == 0 {
        return Ok((1.0, 0.0));
    }
    if s > sched.len() {
        return Err(Error::Param(format!("step {s} exceeds schedule length {}", sched.len())));
    }
    if zeta > s {
        return Err(Error::Param(format!("skip {zeta} exceeds current step {s}")));
    }
    let a = (sched.alpha_hat(s - zeta) / sched.alpha_hat(s)).sqrt();
    let b = sched.gamma(s - zeta) - a * sched.gamma(s);
    Ok((a, b))
}

/// Descending list of effective denoising steps plus the variance-delay
/// threshold. Steps descend from `S` by the skip interval and always end
/// at 1; the transition `1 -> 0` is handled by the sampler's final step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepPlan {
    pub steps: Vec<usize>,
    pub skip: usize,
    pub var_delay: usize,
}

impl StepPlan {
    /// Consecutive `(s, s_next)` transitions of the plan, excluding the
    /// final `1 -> 0` step.
    pub fn transitions(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.steps.windows(2).map(|w| (w[0], w[1]))
    }
}

/// Build a step plan `[S, S - skip, ..., skip, 1]`.
pub fn build_step_plan(s_count: usize, skip: usize, var_delay: usize) -> Result<StepPlan> {
    if skip == 0 {
        return Err(Error::Param("skip interval must be >= 1".into()));
    }
    if skip >= s_count {
        return Err(Error::Param(format!("skip {skip} must be < S = {s_count}")));
    }
    if var_delay > s_count {
        return Err(Error::Param(format!("var_delay {var_delay} must be <= S = {s_count}")));
    }
    let mut steps = Vec::new();
    let mut s = s_count;
    loop {
        steps.push(s);
        if s <= skip {
            break;
        }
        s -= skip;
    }
    if *steps.last().unwrap() != 1 {
        steps.push(1);
    }
    Ok(StepPlan { steps, skip, var_delay })
}

/// Forward noising: `X_s = sqrt(alpha_hat_s) * X_0 + gamma_s * eps`.
pub fn forward_sample(sched: &NoiseSchedule, x0: &Array3<f64>, s: usize, eps: &Array3<f64>) -> Result<Array3<f64>> {
    if s < 1 || s > sched.len() {
        return Err(Error::Param(format!("step {s} out of 1..={}", sched.len())));
    }
    if x0.dim() != eps.dim() {
        return Err(Error::Shape(format!(
            "noise shape {:?} does not match data shape {:?}",
            eps.dim(),
            x0.dim()
        )));
    }
    let root = sched.alpha_hat(s).sqrt();
    let g = sched.gamma(s);
    Ok(x0 * root + eps * g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::Array3;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn reference() -> NoiseSchedule {
        NoiseSchedule::quadratic(50, 1e-4, 0.5).unwrap()
    }

    #[test]
    fn quadratic_endpoints_exact() {
        let s = reference();
        assert_eq!(s.beta(1), 1e-4);
        assert_eq!(s.beta(50), 0.5);
    }

    #[test]
    fn quadratic_near_equal_endpoints_degenerate() {
        let s = NoiseSchedule::quadratic(2, 0.1, 0.1 + 1e-9).unwrap();
        assert!((s.alpha_hat(2) - 0.81).abs() < 1e-8);
    }

    #[test]
    fn alpha_hat_50_matches_extended_precision_product() {
        // Reference computed with 60-digit arithmetic from the same
        // sqrt-interpolated betas.
        let s = reference();
        let reference_value = 3.354078875408499557148e-5;
        assert!((s.alpha_hat(50) / reference_value - 1.0).abs() < 1e-12);
    }

    #[test]
    fn invariants_hold_for_reference_schedule() {
        let s = reference();
        for i in 1..=50 {
            assert!(s.beta(i) > 0.0 && s.beta(i) < 1.0);
            if i > 1 {
                assert!(s.beta(i) > s.beta(i - 1), "betas must strictly increase");
                assert!(s.alpha_hat(i) < s.alpha_hat(i - 1), "alpha_hats must strictly decrease");
            }
            let g = s.gamma(i);
            assert!((g * g + s.alpha_hat(i) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_parameters_rejected() {
        assert!(NoiseSchedule::quadratic(1, 1e-4, 0.5).is_err());
        assert!(NoiseSchedule::quadratic(50, 0.5, 1e-4).is_err());
        assert!(NoiseSchedule::quadratic(50, 0.0, 0.5).is_err());
        assert!(NoiseSchedule::quadratic(50, 1e-4, 1.0).is_err());
    }

    #[test]
    fn ddim_identity_at_zero_skip() {
        let s = reference();
        assert_eq!(ddim_coefficients(&s, 17, 0).unwrap(), (1.0, 0.0));
    }

    #[test]
    fn ddim_signs_for_positive_skip() {
        let s = reference();
        let (a, b) = ddim_coefficients(&s, 50, 10).unwrap();
        assert!(a > 1.0);
        assert!(b < 0.0);
    }

    #[test]
    fn ddim_final_step_recovers_clean_state() {
        // a_1 * (sqrt(ahat_1) x0 + gamma_1 eps) + b_1 * eps == x0
        let s = reference();
        let (a, b) = ddim_coefficients(&s, 1, 1).unwrap();
        assert_abs_diff_eq!(a, 1.0 / s.alpha_hat(1).sqrt(), epsilon = 1e-15);
        assert_abs_diff_eq!(b, -s.gamma(1) / s.alpha_hat(1).sqrt(), epsilon = 1e-15);
        let mut rng = crate::rng::substream(11, "ddim-final");
        for _ in 0..20 {
            let x0: f64 = rng.sample(StandardNormal);
            let eps: f64 = rng.sample(StandardNormal);
            let x1 = s.alpha_hat(1).sqrt() * x0 + s.gamma(1) * eps;
            assert_abs_diff_eq!(a * x1 + b * eps, x0, epsilon = 1e-12);
        }
    }

    #[test]
    fn ddim_rejects_negative_target() {
        let s = reference();
        assert!(ddim_coefficients(&s, 5, 6).is_err());
    }

    #[test]
    fn step_plan_reference_values() {
        let p = build_step_plan(50, 10, 30).unwrap();
        assert_eq!(p.steps, vec![50, 40, 30, 20, 10, 1]);
        assert_eq!(p.var_delay, 30);
        let p2 = build_step_plan(50, 10, 50).unwrap();
        assert_eq!(p2.steps, vec![50, 40, 30, 20, 10, 1]);
        assert_eq!(p2.var_delay, 50);
        let p3 = build_step_plan(4, 1, 4).unwrap();
        assert_eq!(p3.steps, vec![4, 3, 2, 1]);
    }

    #[test]
    fn step_plan_rejects_bad_parameters() {
        assert!(build_step_plan(50, 50, 30).is_err());
        assert!(build_step_plan(50, 0, 30).is_err());
        assert!(build_step_plan(50, 10, 51).is_err());
    }

    #[test]
    fn step_plan_gap_structure() {
        for (s_count, skip) in [(50, 10), (47, 10), (30, 7), (10, 3)] {
            let p = build_step_plan(s_count, skip, s_count).unwrap();
            assert_eq!(*p.steps.first().unwrap(), s_count);
            assert_eq!(*p.steps.last().unwrap(), 1);
            let gaps: Vec<usize> = p.transitions().map(|(a, b)| a - b).collect();
            for (i, g) in gaps.iter().enumerate() {
                if i + 1 < gaps.len() {
                    assert_eq!(*g, skip);
                } else {
                    assert!(*g >= 1 && *g <= skip);
                }
            }
        }
    }

    #[test]
    fn forward_sample_zero_noise_scales_data() {
        let s = reference();
        let x0 = Array3::from_shape_fn((3, 2, 2), |(t, n, d)| (t + n + d) as f64 * 0.1);
        let eps = Array3::zeros((3, 2, 2));
        let xs = forward_sample(&s, &x0, 1, &eps).unwrap();
        let scale = s.alpha_hat(1).sqrt();
        for (a, b) in xs.iter().zip(x0.iter()) {
            assert_abs_diff_eq!(*a, scale * b, epsilon = 1e-15);
        }
    }

    #[test]
    fn forward_sample_zero_data_scales_noise() {
        let s = reference();
        let x0 = Array3::zeros((2, 2, 2));
        let eps = Array3::from_elem((2, 2, 2), 1.5);
        let xs = forward_sample(&s, &x0, 30, &eps).unwrap();
        for a in xs.iter() {
            assert_abs_diff_eq!(*a, s.gamma(30) * 1.5, epsilon = 1e-15);
        }
    }

    #[test]
    fn forward_sample_shape_mismatch_rejected() {
        let s = reference();
        let x0 = Array3::zeros((2, 2, 2));
        let eps = Array3::zeros((2, 3, 2));
        assert!(matches!(forward_sample(&s, &x0, 5, &eps), Err(Error::Shape(_))));
    }

    #[test]
    fn forward_sample_monte_carlo_moments() {
        // Empirical mean -> sqrt(ahat_s) X0 and variance -> gamma_s^2,
        // within 3 sigma of the Monte-Carlo error.
        let s = reference();
        let step = 25;
        let x0 = Array3::from_elem((1, 1, 2), 0.7);
        let n = 100_000usize;
        let mut rng = crate::rng::substream(5, "fwd-mc");
        let (mut sum, mut sumsq) = (0.0, 0.0);
        for _ in 0..n {
            let eps = Array3::from_shape_fn((1, 1, 2), |_| rng.sample::<f64, _>(StandardNormal));
            let xs = forward_sample(&s, &x0, step, &eps).unwrap();
            let v = xs[(0, 0, 0)];
            sum += v;
            sumsq += v * v;
        }
        let mean = sum / n as f64;
        let var = sumsq / n as f64 - mean * mean;
        let expect_mean = s.alpha_hat(step).sqrt() * 0.7;
        let expect_var = s.gamma(step) * s.gamma(step);
        let se_mean = (expect_var / n as f64).sqrt();
        let se_var = expect_var * (2.0 / n as f64).sqrt();
        assert!((mean - expect_mean).abs() < 3.0 * se_mean, "mean {mean} vs {expect_mean}");
        assert!((var - expect_var).abs() < 3.0 * se_var, "var {var} vs {expect_var}");
    }

    #[test]
    fn telescoping_with_oracle_noise() {
        // With the exact forward noise supplied as the denoiser output,
        // composing two skip-steps equals the single combined step.
        let s = reference();
        let mut rng = crate::rng::substream(3, "telescope");
        for _ in 0..32 {
            let x0: f64 = rng.sample(StandardNormal);
            let eps: f64 = rng.sample(StandardNormal);
            let start = 50usize;
            let z1 = 10usize;
            let z2 = 15usize;
            let xs = s.alpha_hat(start).sqrt() * x0 + s.gamma(start) * eps;
            let (a1, b1) = ddim_coefficients(&s, start, z1).unwrap();
            let mid = a1 * xs + b1 * eps;
            let (a2, b2) = ddim_coefficients(&s, start - z1, z2).unwrap();
            let two_hop = a2 * mid + b2 * eps;
            let (a, b) = ddim_coefficients(&s, start, z1 + z2).unwrap();
            let one_hop = a * xs + b * eps;
            assert_abs_diff_eq!(two_hop, one_hop, epsilon = 1e-9);
        }
    }

    proptest! {
        #[test]
        fn prop_schedule_invariants(s_count in 2usize..200, b0 in 1e-6f64..0.05, spread in 1.5f64..100.0) {
            let b1 = (b0 * spread).min(0.9);
            prop_assume!(b1 > b0);
            let s = NoiseSchedule::quadratic(s_count, b0, b1).unwrap();
            for i in 1..=s_count {
                prop_assert!(s.beta(i) > 0.0 && s.beta(i) < 1.0);
                prop_assert!((s.gamma(i) * s.gamma(i) + s.alpha_hat(i) - 1.0).abs() < 1e-12);
                if i > 1 {
                    prop_assert!(s.beta(i) > s.beta(i - 1));
                    prop_assert!(s.alpha_hat(i) < s.alpha_hat(i - 1));
                }
            }
        }

        #[test]
        fn prop_coefficients_approach_identity(s in 2usize..50) {
            let sched = NoiseSchedule::quadratic(50, 1e-4, 0.5).unwrap();
            let (a1, b1) = ddim_coefficients(&sched, s, 1).unwrap();
            let (a0, b0) = ddim_coefficients(&sched, s, 0).unwrap();
            prop_assert!(a1 > a0 && a1 < a0 + 0.5);
            prop_assert!(b1 < b0 && b1 > -0.5);
        }
    }
}
