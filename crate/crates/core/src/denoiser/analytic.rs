//! Exact optimal denoiser for Gaussian-distributed data.
//!
//! With per-state data `X0 ~ N(m, C)` and the forward noising
//! `X_s = sqrt(ahat_s) X0 + gamma_s eps`, the conditional law of `eps`
//! given `X_s = x` is Gaussian with
//!
//! ```text
//! mean       gamma_s P (x - sqrt(ahat_s) m),   P = (ahat_s C + gamma_s^2 I)^-1
//! covariance I - gamma_s^2 P
//! jacobian   gamma_s P
//! ```
//!
//! Every quantity is closed-form, which makes this model the ground-truth
//! oracle for losses, sampling and covariance propagation. States are
//! independent; the prior `(m, C)` is shared across all of them.

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::gaussian2d::CovParams;
use crate::schedule::NoiseSchedule;

use super::{Denoiser, DenoiserOutput, DenoiserQuery, JacobianMode};

/// Shared per-state Gaussian prior: mean 2-vector and SPD 2x2 covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianDataModel {
    pub mean: [f64; 2],
    /// Covariance entries `[[c00, c01], [c01, c11]]`.
    pub cov: [[f64; 2]; 2],
}

impl GaussianDataModel {
    pub fn new(mean: [f64; 2], cov: [[f64; 2]; 2]) -> Result<Self> {
        let det = cov[0][0] * cov[1][1] - cov[0][1] * cov[1][0];
        if (cov[0][1] - cov[1][0]).abs() > 1e-12 {
            return Err(Error::Param("data covariance must be symmetric".into()));
        }
        if !(cov[0][0] > 0.0 && det > 0.0) {
            return Err(Error::Param(format!("data covariance must be SPD, got det = {det}")));
        }
        Ok(Self { mean, cov })
    }

    /// Cholesky factor `L` with `C = L L'` (lower triangular).
    pub fn chol(&self) -> [[f64; 2]; 2] {
        let l00 = self.cov[0][0].sqrt();
        let l10 = self.cov[0][1] / l00;
        let l11 = (self.cov[1][1] - l10 * l10).sqrt();
        [[l00, 0.0], [l10, l11]]
    }

    /// `Var(X0 | X_S)`: the data covariance shrunk by what the terminal
    /// noisy state reveals, `C - ahat_S C (ahat_S C + gamma_S^2 I)^-1 C`.
    pub fn terminal_conditional_cov(&self, sched: &NoiseSchedule) -> [[f64; 2]; 2] {
        let s = sched.len();
        let ahat = sched.alpha_hat(s);
        let g2 = sched.gamma(s) * sched.gamma(s);
        let p = inv2(add_scaled(self.cov, ahat, g2));
        let cpc = mat_mul(mat_mul(self.cov, p), self.cov);
        [
            [self.cov[0][0] - ahat * cpc[0][0], self.cov[0][1] - ahat * cpc[0][1]],
            [self.cov[1][0] - ahat * cpc[1][0], self.cov[1][1] - ahat * cpc[1][1]],
        ]
    }
}

/// The analytic denoiser: the Gaussian data model paired with a schedule.
/// Ignores conditioning (it models the unconditional case).
#[derive(Debug, Clone)]
pub struct AnalyticDenoiser {
    pub model: GaussianDataModel,
    pub sched: NoiseSchedule,
}

fn add_scaled(c: [[f64; 2]; 2], ahat: f64, g2: f64) -> [[f64; 2]; 2] {
    [[ahat * c[0][0] + g2, ahat * c[0][1]], [ahat * c[1][0], ahat * c[1][1] + g2]]
}

fn inv2(m: [[f64; 2]; 2]) -> [[f64; 2]; 2] {
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    [[m[1][1] / det, -m[0][1] / det], [-m[1][0] / det, m[0][0] / det]]
}

fn mat_mul(a: [[f64; 2]; 2], b: [[f64; 2]; 2]) -> [[f64; 2]; 2] {
    [
        [a[0][0] * b[0][0] + a[0][1] * b[1][0], a[0][0] * b[0][1] + a[0][1] * b[1][1]],
        [a[1][0] * b[0][0] + a[1][1] * b[1][0], a[1][0] * b[0][1] + a[1][1] * b[1][1]],
    ]
}

impl AnalyticDenoiser {
    pub fn new(model: GaussianDataModel, sched: NoiseSchedule) -> Self {
        Self { model, sched }
    }

    /// `(mu, Sigma, J)` of the conditional noise law at one state.
    pub fn optimal_eps(&self, x: [f64; 2], s: usize) -> ([f64; 2], [[f64; 2]; 2], [[f64; 2]; 2]) {
        let ahat = self.sched.alpha_hat(s);
        let g = self.sched.gamma(s);
        let p = inv2(add_scaled(self.model.cov, ahat, g * g));
        let root = ahat.sqrt();
        let wx = x[0] - root * self.model.mean[0];
        let wy = x[1] - root * self.model.mean[1];
        let mu = [g * (p[0][0] * wx + p[0][1] * wy), g * (p[1][0] * wx + p[1][1] * wy)];
        let sigma = [
            [1.0 - g * g * p[0][0], -g * g * p[0][1]],
            [-g * g * p[1][0], 1.0 - g * g * p[1][1]],
        ];
        let jac = [[g * p[0][0], g * p[0][1]], [g * p[1][0], g * p[1][1]]];
        (mu, sigma, jac)
    }

    /// Marginal law of `X_s`: `N(sqrt(ahat_s) m, ahat_s C + gamma_s^2 I)`.
    pub fn marginal_of_xs(&self, s: usize) -> ([f64; 2], [[f64; 2]; 2]) {
        let ahat = self.sched.alpha_hat(s);
        let g = self.sched.gamma(s);
        let root = ahat.sqrt();
        let mean = [root * self.model.mean[0], root * self.model.mean[1]];
        (mean, add_scaled(self.model.cov, ahat, g * g))
    }
}

impl Denoiser for AnalyticDenoiser {
    fn evaluate(&self, q: &DenoiserQuery) -> Result<DenoiserOutput> {
        if q.s < 1 || q.s > self.sched.len() {
            return Err(Error::Param(format!("step {} out of 1..={}", q.s, self.sched.len())));
        }
        let (t_len, n_len, d) = q.x_s.dim();
        if d != 2 {
            return Err(Error::Shape(format!("expected (T, N, 2) input, got last dim {d}")));
        }
        // Sigma and J do not depend on x; compute once.
        let (_, sigma, jac) = self.optimal_eps([0.0, 0.0], q.s);
        let cov = CovParams::from_matrix(sigma[0][0], sigma[0][1], sigma[1][1])?;

        let mut eps_mu = Array3::zeros((t_len, n_len, 2));
        for t in 0..t_len {
            for n in 0..n_len {
                let (mu, _, _) = self.optimal_eps([q.x_s[(t, n, 0)], q.x_s[(t, n, 1)]], q.s);
                eps_mu[(t, n, 0)] = mu[0];
                eps_mu[(t, n, 1)] = mu[1];
            }
        }
        let out = DenoiserOutput {
            eps_mu,
            cov_sx: Array2::from_elem((t_len, n_len), cov.sx),
            cov_sy: Array2::from_elem((t_len, n_len), cov.sy),
            cov_rho: Array2::from_elem((t_len, n_len), cov.rho),
            jac_diag: match q.jacobian_mode {
                JacobianMode::Diagonal => Some([
                    Array2::from_elem((t_len, n_len), jac[0][0]),
                    Array2::from_elem((t_len, n_len), jac[1][1]),
                ]),
                _ => None,
            },
            jac_full: match q.jacobian_mode {
                JacobianMode::Full => Some([
                    [
                        Array2::from_elem((t_len, n_len), jac[0][0]),
                        Array2::from_elem((t_len, n_len), jac[0][1]),
                    ],
                    [
                        Array2::from_elem((t_len, n_len), jac[1][0]),
                        Array2::from_elem((t_len, n_len), jac[1][1]),
                    ],
                ]),
                _ => None,
            },
        };
        out.validate_against(q.x_s, q.jacobian_mode)?;
        Ok(out)
    }

    fn step_count(&self) -> usize {
        self.sched.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::jacobian_finite_diff;
    use crate::scene::CondScene;
    use approx::assert_abs_diff_eq;
    use ndarray::{Array2, Array3};
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn sched() -> NoiseSchedule {
        NoiseSchedule::quadratic(50, 1e-4, 0.5).unwrap()
    }

    fn dummy_cond(t: usize, n: usize) -> CondScene {
        CondScene { observed: Array3::zeros((t, n, 2)), mask: Array2::zeros((t, n)), roles: vec![0; n] }
    }

    #[test]
    fn identity_prior_reduces_to_gamma_scaling() {
        // m = 0, C = I: mu = gamma x (since ahat + gamma^2 = 1),
        // Sigma = ahat I, J = gamma I.
        let oracle = AnalyticDenoiser::new(
            GaussianDataModel::new([0.0, 0.0], [[1.0, 0.0], [0.0, 1.0]]).unwrap(),
            sched(),
        );
        for s in [1usize, 10, 30, 50] {
            let g = oracle.sched.gamma(s);
            let ahat = oracle.sched.alpha_hat(s);
            let (mu, sigma, jac) = oracle.optimal_eps([0.7, -1.2], s);
            assert_abs_diff_eq!(mu[0], g * 0.7, epsilon = 1e-12);
            assert_abs_diff_eq!(mu[1], g * -1.2, epsilon = 1e-12);
            assert_abs_diff_eq!(sigma[0][0], ahat, epsilon = 1e-12);
            assert_abs_diff_eq!(sigma[1][1], ahat, epsilon = 1e-12);
            assert_abs_diff_eq!(sigma[0][1], 0.0, epsilon = 1e-15);
            assert_abs_diff_eq!(jac[0][0], g, epsilon = 1e-12);
        }
    }

    #[test]
    fn prior_mean_input_gives_zero_noise() {
        let oracle = AnalyticDenoiser::new(
            GaussianDataModel::new([0.4, -0.2], [[0.05, 0.01], [0.01, 0.03]]).unwrap(),
            sched(),
        );
        let s = 20;
        let root = oracle.sched.alpha_hat(s).sqrt();
        let (mu, _, _) = oracle.optimal_eps([root * 0.4, root * -0.2], s);
        assert_abs_diff_eq!(mu[0], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(mu[1], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn monte_carlo_regression_recovers_conditional_mean() {
        // Regress eps on x_s over many forward draws: the fitted affine map
        // must match the closed-form (J/gamma scaling and intercept) within
        // 3 sigma of the regression error. Scalar check per coordinate
        // against independent draws.
        let model = GaussianDataModel::new([0.3, 0.0], [[0.06, 0.015], [0.015, 0.04]]).unwrap();
        let oracle = AnalyticDenoiser::new(model.clone(), sched());
        let s = 25usize;
        let ahat = oracle.sched.alpha_hat(s);
        let g = oracle.sched.gamma(s);
        let l = model.chol();
        let mut rng = crate::rng::substream(31, "analytic-mc");
        let n = 100_000usize;

        // Accumulate sufficient statistics for E[eps_x | x] ~ a + b' x.
        let mut sum_eps = [0.0f64; 2];
        let mut sum_x = [0.0f64; 2];
        let mut sxx = [[0.0f64; 2]; 2];
        let mut sxe = [[0.0f64; 2]; 2]; // cov(x, eps)
        for _ in 0..n {
            let z0: f64 = rng.sample(StandardNormal);
            let z1: f64 = rng.sample(StandardNormal);
            let x0 = [model.mean[0] + l[0][0] * z0, model.mean[1] + l[1][0] * z0 + l[1][1] * z1];
            let e = [rng.sample::<f64, _>(StandardNormal), rng.sample::<f64, _>(StandardNormal)];
            let xs = [ahat.sqrt() * x0[0] + g * e[0], ahat.sqrt() * x0[1] + g * e[1]];
            for i in 0..2 {
                sum_eps[i] += e[i];
                sum_x[i] += xs[i];
            }
            for i in 0..2 {
                for j in 0..2 {
                    sxx[i][j] += xs[i] * xs[j];
                    sxe[i][j] += xs[i] * e[j];
                }
            }
        }
        let nf = n as f64;
        let mean_x = [sum_x[0] / nf, sum_x[1] / nf];
        let mean_e = [sum_eps[0] / nf, sum_eps[1] / nf];
        let mut cov_xx = [[0.0; 2]; 2];
        let mut cov_xe = [[0.0; 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                cov_xx[i][j] = sxx[i][j] / nf - mean_x[i] * mean_x[j];
                cov_xe[i][j] = sxe[i][j] / nf - mean_x[i] * mean_e[j];
            }
        }
        // Regression slope of eps_j on x: cov_xx^-1 cov_xe; closed form is
        // J = gamma P (symmetric), i.e. slope[i][j] == jac[j][i].
        let inv = inv2(cov_xx);
        let slope = mat_mul(inv, cov_xe);
        let (_, sigma, jac) = oracle.optimal_eps([0.0, 0.0], s);
        for i in 0..2 {
            for j in 0..2 {
                // 3-sigma: slope standard error ~ sqrt(resid_var / (n var_x)).
                let se = (sigma[j][j] / (nf * cov_xx[i][i])).sqrt();
                assert!(
                    (slope[i][j] - jac[j][i]).abs() < (3.0 * se).max(1e-3),
                    "slope[{i}][{j}] = {} vs J = {}",
                    slope[i][j],
                    jac[j][i]
                );
            }
        }
        // Intercept: mean_e - slope' mean_x must match -gamma P sqrt(ahat) m.
        let (mu_at_zero, _, _) = oracle.optimal_eps([0.0, 0.0], s);
        for j in 0..2 {
            let intercept = mean_e[j] - slope[0][j] * mean_x[0] - slope[1][j] * mean_x[1];
            assert!((intercept - mu_at_zero[j]).abs() < 5e-3, "intercept {intercept} vs {}", mu_at_zero[j]);
        }
        let _ = g;
    }

    #[test]
    fn marginal_matches_forward_sampling_moments() {
        let model = GaussianDataModel::new([0.2, -0.4], [[0.05, -0.01], [-0.01, 0.08]]).unwrap();
        let oracle = AnalyticDenoiser::new(model.clone(), sched());
        // s = S: close to the isotropic prior.
        let (mean, cov) = oracle.marginal_of_xs(50);
        assert!(mean[0].abs() < 0.01 && mean[1].abs() < 0.01);
        assert!((cov[0][0] - 1.0).abs() < 1e-3 && (cov[1][1] - 1.0).abs() < 1e-3);
        // C = I special case: N(sqrt(ahat) m, I).
        let iso = AnalyticDenoiser::new(GaussianDataModel::new([0.5, 0.5], [[1.0, 0.0], [0.0, 1.0]]).unwrap(), sched());
        let (mean, cov) = iso.marginal_of_xs(20);
        let root = iso.sched.alpha_hat(20).sqrt();
        assert_abs_diff_eq!(mean[0], root * 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(cov[0][0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(cov[0][1], 0.0, epsilon = 1e-15);

        // Monte-Carlo: empirical covariance of forward samples matches.
        let s = 15usize;
        let (_, c_th) = oracle.marginal_of_xs(s);
        let l = model.chol();
        let ahat = oracle.sched.alpha_hat(s);
        let g = oracle.sched.gamma(s);
        let mut rng = crate::rng::substream(32, "marginal-mc");
        let n = 100_000usize;
        let mut sum = [0.0f64; 2];
        let mut ss = [[0.0f64; 2]; 2];
        for _ in 0..n {
            let z0: f64 = rng.sample(StandardNormal);
            let z1: f64 = rng.sample(StandardNormal);
            let x0 = [model.mean[0] + l[0][0] * z0, model.mean[1] + l[1][0] * z0 + l[1][1] * z1];
            let e: [f64; 2] = [rng.sample(StandardNormal), rng.sample(StandardNormal)];
            let xs = [ahat.sqrt() * x0[0] + g * e[0], ahat.sqrt() * x0[1] + g * e[1]];
            for i in 0..2 {
                sum[i] += xs[i];
            }
            for i in 0..2 {
                for j in 0..2 {
                    ss[i][j] += xs[i] * xs[j];
                }
            }
        }
        let nf = n as f64;
        for i in 0..2 {
            for j in 0..2 {
                let c = ss[i][j] / nf - (sum[i] / nf) * (sum[j] / nf);
                let se = ((c_th[i][i] * c_th[j][j] + c_th[i][j] * c_th[i][j]) / nf).sqrt();
                assert!((c - c_th[i][j]).abs() < 3.0 * se, "cov[{i}][{j}] = {c} vs {}", c_th[i][j]);
            }
        }
    }

    #[test]
    fn evaluate_jacobian_matches_finite_differences() {
        let oracle = AnalyticDenoiser::new(
            GaussianDataModel::new([0.1, 0.2], [[0.07, 0.02], [0.02, 0.05]]).unwrap(),
            sched(),
        );
        let (t, n) = (3, 2);
        let mut rng = crate::rng::substream(33, "analytic-jac");
        let x = Array3::from_shape_fn((t, n, 2), |_| rng.sample::<f64, _>(StandardNormal));
        let cond = dummy_cond(t, n);
        let q = DenoiserQuery { x_s: &x, s: 12, cond: &cond, jacobian_mode: JacobianMode::Diagonal };
        let out = oracle.evaluate(&q).unwrap();
        let jd = out.jac_diag.as_ref().unwrap();
        let fd = jacobian_finite_diff(&oracle, &q, 1e-4).unwrap();
        for ti in 0..t {
            for ni in 0..n {
                assert!((fd[(ti, ni, 0)] - jd[0][(ti, ni)]).abs() < 1e-6);
                assert!((fd[(ti, ni, 1)] - jd[1][(ti, ni)]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn training_nll_reaches_entropy_rate_floor() {
        // With the exact denoiser the expected per-state NLL of the true
        // noise equals the entropy floor (1/2)[log(2 pi |Sigma*|^(1/2)) + 1].
        let model = GaussianDataModel::new([0.1, -0.3], [[0.06, 0.018], [0.018, 0.05]]).unwrap();
        let oracle = AnalyticDenoiser::new(model.clone(), sched());
        let s = 18usize;
        let (_, sigma, _) = oracle.optimal_eps([0.0, 0.0], s);
        let det = sigma[0][0] * sigma[1][1] - sigma[0][1] * sigma[1][0];
        let floor = 0.5 * ((2.0 * std::f64::consts::PI * det.sqrt()).ln() + 1.0);

        let l = model.chol();
        let ahat = oracle.sched.alpha_hat(s);
        let g = oracle.sched.gamma(s);
        let cov = crate::gaussian2d::CovParams::from_matrix(sigma[0][0], sigma[0][1], sigma[1][1]).unwrap();
        let mut rng = crate::rng::substream(35, "nll-floor");
        let n = 50_000usize;
        let mut acc = 0.0;
        let mut acc_sq = 0.0;
        for _ in 0..n {
            let z0: f64 = rng.sample(StandardNormal);
            let z1: f64 = rng.sample(StandardNormal);
            let x0 = [model.mean[0] + l[0][0] * z0, model.mean[1] + l[1][0] * z0 + l[1][1] * z1];
            let e: [f64; 2] = [rng.sample(StandardNormal), rng.sample(StandardNormal)];
            let xs = [ahat.sqrt() * x0[0] + g * e[0], ahat.sqrt() * x0[1] + g * e[1]];
            let (mu, _, _) = oracle.optimal_eps(xs, s);
            let gauss = crate::gaussian2d::Gauss2 { mean: mu, cov };
            let v = crate::gaussian2d::nll(&gauss, e).unwrap();
            acc += v;
            acc_sq += v * v;
        }
        let mean = acc / n as f64;
        let var = acc_sq / n as f64 - mean * mean;
        let se = (var / n as f64).sqrt();
        assert!(
            (mean - floor).abs() < 3.0 * se,
            "E[L_NLL] = {mean} vs floor {floor} (se {se})"
        );
    }

    #[test]
    fn evaluate_is_deterministic_and_respects_jacobian_mode() {
        let oracle = AnalyticDenoiser::new(
            GaussianDataModel::new([0.0, 0.0], [[0.04, 0.0], [0.0, 0.04]]).unwrap(),
            sched(),
        );
        let x = Array3::from_elem((2, 2, 2), 0.3);
        let cond = dummy_cond(2, 2);
        let q = DenoiserQuery { x_s: &x, s: 5, cond: &cond, jacobian_mode: JacobianMode::None };
        let a = oracle.evaluate(&q).unwrap();
        let b = oracle.evaluate(&q).unwrap();
        assert_eq!(a.eps_mu, b.eps_mu);
        assert!(a.jac_diag.is_none() && a.jac_full.is_none());
    }
}
