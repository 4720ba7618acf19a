//! Bi-variate Gaussian algebra.
//!
//! Covariances are carried in `(sx, sy, rho)` form, matching the network
//! head parameterization, and expanded to matrix form on demand. All
//! likelihood values are reported per coordinate: the NLL of one 2-D state
//! is `0.5 * [log(2 pi |Sigma|^(1/2)) + 0.5 * w' Sigma^-1 w]`.

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};

/// Reference chi-square(2 dof) quantile at the 0.95 level.
pub const CHI2_2_95: f64 = 5.991465;

/// Exact chi-square quantile with 2 degrees of freedom: `-2 ln(1 - level)`.
pub fn chi2_2_quantile(level: f64) -> f64 {
    -2.0 * (1.0 - level).ln()
}

/// Covariance parameters of one bi-variate Gaussian. A state with exactly
/// zero covariance (`sx = sy = rho = 0`) is representable; density
/// evaluations on it fail with a numeric-domain error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CovParams {
    pub sx: f64,
    pub sy: f64,
    pub rho: f64,
}

impl CovParams {
    pub fn zero() -> Self {
        Self { sx: 0.0, sy: 0.0, rho: 0.0 }
    }

    pub fn is_zero(&self) -> bool {
        self.sx == 0.0 && self.sy == 0.0
    }

    /// Expand to the symmetric matrix `[[sx^2, rho sx sy], [rho sx sy, sy^2]]`.
    pub fn matrix(&self) -> [[f64; 2]; 2] {
        let cxy = self.rho * self.sx * self.sy;
        [[self.sx * self.sx, cxy], [cxy, self.sy * self.sy]]
    }

    pub fn det(&self) -> f64 {
        self.sx * self.sx * self.sy * self.sy * (1.0 - self.rho * self.rho)
    }

    /// Eigenvalues of the covariance matrix, largest first. Closed form:
    /// `mid +- sqrt(((sx^2 - sy^2)/2)^2 + (rho sx sy)^2)`.
    pub fn eigenvalues(&self) -> (f64, f64) {
        let a = self.sx * self.sx;
        let c = self.sy * self.sy;
        let b = self.rho * self.sx * self.sy;
        let mid = 0.5 * (a + c);
        let disc = (0.25 * (a - c) * (a - c) + b * b).sqrt();
        (mid + disc, mid - disc)
    }

    /// Recover `(sx, sy, rho)` from a symmetric PSD matrix. Off-diagonal
    /// asymmetry is averaged away; `rho` is clamped into the open interval.
    pub fn from_matrix(v00: f64, v01: f64, v11: f64) -> Result<Self> {
        if !(v00.is_finite() && v01.is_finite() && v11.is_finite()) {
            return Err(Error::Numeric("non-finite covariance entries".into()));
        }
        if v00 < -1e-12 || v11 < -1e-12 {
            return Err(Error::Numeric(format!("negative covariance diagonal ({v00}, {v11})")));
        }
        let sx = v00.max(0.0).sqrt();
        let sy = v11.max(0.0).sqrt();
        let rho = if sx > 0.0 && sy > 0.0 {
            (v01 / (sx * sy)).clamp(-(1.0 - 1e-9), 1.0 - 1e-9)
        } else {
            0.0
        };
        Ok(Self { sx, sy, rho })
    }

    fn validate(&self) -> Result<()> {
        if !(self.sx > 0.0 && self.sy > 0.0 && self.sx.is_finite() && self.sy.is_finite()) {
            return Err(Error::Numeric(format!(
                "degenerate covariance: sx={}, sy={}",
                self.sx, self.sy
            )));
        }
        if !(self.rho.abs() < 1.0) {
            return Err(Error::Numeric(format!("correlation out of (-1,1): rho={}", self.rho)));
        }
        Ok(())
    }
}

/// One bi-variate Gaussian: mean plus `(sx, sy, rho)` covariance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gauss2 {
    pub mean: [f64; 2],
    pub cov: CovParams,
}

impl Gauss2 {
    /// Construct and validate. `rho` is clamped to `[-1 + 1e-6, 1 - 1e-6]`
    /// on ingestion; saturated correlation heads stay inside the open box.
    pub fn new(mean: [f64; 2], sx: f64, sy: f64, rho: f64) -> Result<Self> {
        let rho = rho.clamp(-(1.0 - 1e-6), 1.0 - 1e-6);
        let cov = CovParams { sx, sy, rho };
        cov.validate()?;
        if !(mean[0].is_finite() && mean[1].is_finite()) {
            return Err(Error::Numeric("non-finite mean".into()));
        }
        Ok(Self { mean, cov })
    }
}

/// Squared Mahalanobis distance `w' Sigma^-1 w` with `w = target - mean`.
pub fn mahalanobis_sq(g: &Gauss2, target: [f64; 2]) -> Result<f64> {
    g.cov.validate()?;
    let wx = target[0] - g.mean[0];
    let wy = target[1] - g.mean[1];
    let r = g.cov.rho;
    let one_m = 1.0 - r * r;
    let q = (wx * wx / (g.cov.sx * g.cov.sx) - 2.0 * r * wx * wy / (g.cov.sx * g.cov.sy)
        + wy * wy / (g.cov.sy * g.cov.sy))
        / one_m;
    if !q.is_finite() {
        return Err(Error::Numeric("Mahalanobis distance overflow (near-singular covariance)".into()));
    }
    Ok(q)
}

/// Per-coordinate negative log-likelihood of `target` under `g`:
/// `0.5 * [log(2 pi |Sigma|^(1/2)) + 0.5 * w' Sigma^-1 w]`.
pub fn nll(g: &Gauss2, target: [f64; 2]) -> Result<f64> {
    let det = g.cov.det();
    if !(det > 0.0) || !det.is_finite() {
        return Err(Error::Numeric(format!("degenerate covariance determinant {det}")));
    }
    let q = mahalanobis_sq(g, target)?;
    let v = 0.5 * ((2.0 * std::f64::consts::PI * det.sqrt()).ln() + 0.5 * q);
    if !v.is_finite() {
        return Err(Error::Numeric("non-finite NLL".into()));
    }
    Ok(v)
}

/// Whether `target` lies inside the `level` confidence ellipse of `g`.
pub fn inside_confidence(g: &Gauss2, target: [f64; 2], level: f64) -> Result<bool> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Param(format!("confidence level must be in (0,1), got {level}")));
    }
    Ok(mahalanobis_sq(g, target)? <= chi2_2_quantile(level))
}

/// Eigenvalues of a valid `Gauss2` covariance, largest first.
pub fn eigenvalues(g: &Gauss2) -> (f64, f64) {
    g.cov.eigenvalues()
}

/// A per-state Gaussian field over a `T x N` scene: means plus `(sx, sy,
/// rho)` parameters per state. States may carry exactly-zero covariance
/// (the initialization of the reverse sampler).
#[derive(Debug, Clone, PartialEq)]
pub struct UncertainScene {
    /// `(T, N, 2)` state means.
    pub means: Array3<f64>,
    pub sx: Array2<f64>,
    pub sy: Array2<f64>,
    pub rho: Array2<f64>,
}

impl UncertainScene {
    pub fn zero_cov(means: Array3<f64>) -> Self {
        let (t, n, _) = means.dim();
        Self {
            means,
            sx: Array2::zeros((t, n)),
            sy: Array2::zeros((t, n)),
            rho: Array2::zeros((t, n)),
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        let (t, n, _) = self.means.dim();
        (t, n)
    }

    pub fn cov(&self, t: usize, n: usize) -> CovParams {
        CovParams { sx: self.sx[(t, n)], sy: self.sy[(t, n)], rho: self.rho[(t, n)] }
    }

    /// The Gaussian at state `(t, n)`. Fails with the offending state index
    /// if the covariance there is degenerate.
    pub fn gauss(&self, t: usize, n: usize) -> Result<Gauss2> {
        Gauss2::new([self.means[(t, n, 0)], self.means[(t, n, 1)]], self.sx[(t, n)], self.sy[(t, n)], self.rho[(t, n)])
            .map_err(|e| Error::Numeric(format!("state (t={t}, n={n}): {e}")))
    }
}

/// Mean semi-axis length of the uncertainty ellipses over unobserved states:
/// average of `(sqrt(l1) + sqrt(l2)) / 2` where `m[t][n] = 0`.
pub fn avg_ucty(scene: &UncertainScene, mask: &Array2<u8>) -> Result<f64> {
    let (t, n) = scene.dims();
    if mask.dim() != (t, n) {
        return Err(Error::Shape(format!("mask {:?} vs scene ({t}, {n})", mask.dim())));
    }
    let mut acc = 0.0;
    let mut count = 0usize;
    for ti in 0..t {
        for ni in 0..n {
            if mask[(ti, ni)] == 0 {
                let (l1, l2) = scene.cov(ti, ni).eigenvalues();
                acc += 0.5 * (l1.max(0.0).sqrt() + l2.max(0.0).sqrt());
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::UndefinedInput("avg_ucty over a mask with no unobserved states".into()));
    }
    Ok(acc / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::Array2;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    /// Independent dense-matrix oracle: explicit 2x2 inverse and
    /// determinant, no shared code with the closed forms above.
    fn dense_nll(mean: [f64; 2], cov: [[f64; 2]; 2], target: [f64; 2]) -> f64 {
        let det = cov[0][0] * cov[1][1] - cov[0][1] * cov[1][0];
        let inv = [
            [cov[1][1] / det, -cov[0][1] / det],
            [-cov[1][0] / det, cov[0][0] / det],
        ];
        let w = [target[0] - mean[0], target[1] - mean[1]];
        let q = w[0] * (inv[0][0] * w[0] + inv[0][1] * w[1]) + w[1] * (inv[1][0] * w[0] + inv[1][1] * w[1]);
        0.5 * ((2.0 * std::f64::consts::PI * det.sqrt()).ln() + 0.5 * q)
    }

    fn dense_mahalanobis(mean: [f64; 2], cov: [[f64; 2]; 2], target: [f64; 2]) -> f64 {
        let det = cov[0][0] * cov[1][1] - cov[0][1] * cov[1][0];
        let inv = [
            [cov[1][1] / det, -cov[0][1] / det],
            [-cov[1][0] / det, cov[0][0] / det],
        ];
        let w = [target[0] - mean[0], target[1] - mean[1]];
        w[0] * (inv[0][0] * w[0] + inv[0][1] * w[1]) + w[1] * (inv[1][0] * w[0] + inv[1][1] * w[1])
    }

    #[test]
    fn nll_unit_isotropic_zero_residual() {
        let g = Gauss2::new([0.3, -0.2], 1.0, 1.0, 0.0).unwrap();
        let v = nll(&g, [0.3, -0.2]).unwrap();
        assert_abs_diff_eq!(v, 0.9189385332046727, epsilon = 1e-12);
    }

    #[test]
    fn nll_unit_isotropic_unit_residual() {
        let g = Gauss2::new([0.0, 0.0], 1.0, 1.0, 0.0).unwrap();
        let v = nll(&g, [1.0, 0.0]).unwrap();
        assert_abs_diff_eq!(v, 0.9189385332046727 + 0.25, epsilon = 1e-12);
    }

    #[test]
    fn nll_matches_dense_oracle() {
        let mut rng = crate::rng::substream(2, "nll-oracle");
        for _ in 0..200 {
            let sx = 0.2 + 2.0 * rng.gen::<f64>();
            let sy = 0.2 + 2.0 * rng.gen::<f64>();
            let rho = 1.8 * rng.gen::<f64>() - 0.9;
            let mean = [rng.sample::<f64, _>(StandardNormal), rng.sample(StandardNormal)];
            let target = [rng.sample::<f64, _>(StandardNormal), rng.sample(StandardNormal)];
            let g = Gauss2::new(mean, sx, sy, rho).unwrap();
            assert_abs_diff_eq!(nll(&g, target).unwrap(), dense_nll(mean, g.cov.matrix(), target), epsilon = 1e-10);
            assert_abs_diff_eq!(
                mahalanobis_sq(&g, target).unwrap(),
                dense_mahalanobis(mean, g.cov.matrix(), target),
                epsilon = 1e-10
            );
        }
    }

    #[test]
    fn mahalanobis_trivial_cases() {
        let g = Gauss2::new([1.0, 2.0], 0.5, 0.5, 0.0).unwrap();
        assert_abs_diff_eq!(mahalanobis_sq(&g, [1.0, 2.0]).unwrap(), 0.0, epsilon = 1e-15);
        // Isotropic: |w|^2 / sigma^2.
        let g = Gauss2::new([0.0, 0.0], 2.0, 2.0, 0.0).unwrap();
        assert_abs_diff_eq!(mahalanobis_sq(&g, [3.0, 4.0]).unwrap(), 25.0 / 4.0, epsilon = 1e-12);
    }

    #[test]
    fn degenerate_covariance_rejected() {
        assert!(Gauss2::new([0.0, 0.0], 0.0, 1.0, 0.0).is_err());
        assert!(Gauss2::new([0.0, 0.0], 1.0, -1.0, 0.0).is_err());
        // rho outside the box is clamped, not rejected
        let g = Gauss2::new([0.0, 0.0], 1.0, 1.0, 1.0).unwrap();
        assert!(g.cov.rho < 1.0);
    }

    #[test]
    fn confidence_threshold_straddle() {
        let g = Gauss2::new([0.0, 0.0], 1.0, 1.0, 0.0).unwrap();
        assert!(inside_confidence(&g, [0.0, 0.0], 0.95).unwrap());
        let r_in = 5.99146_f64.sqrt();
        let r_out = 6.0_f64.sqrt();
        assert!(inside_confidence(&g, [r_in, 0.0], 0.95).unwrap());
        assert!(!inside_confidence(&g, [r_out, 0.0], 0.95).unwrap());
        assert_abs_diff_eq!(chi2_2_quantile(0.95), CHI2_2_95, epsilon = 1e-6);
    }

    #[test]
    fn confidence_monte_carlo_calibration() {
        // Sampling targets from g itself must land inside the 95% ellipse
        // 95% of the time (here within 7 MC sigma, well under +-0.005).
        let g = Gauss2::new([0.4, -0.1], 1.3, 0.6, 0.45).unwrap();
        let m = g.cov.matrix();
        // Cholesky of the covariance for sampling.
        let l00 = m[0][0].sqrt();
        let l10 = m[0][1] / l00;
        let l11 = (m[1][1] - l10 * l10).sqrt();
        let mut rng = crate::rng::substream(4, "conf-mc");
        let n = 100_000usize;
        let mut inside = 0usize;
        for _ in 0..n {
            let z0: f64 = rng.sample(StandardNormal);
            let z1: f64 = rng.sample(StandardNormal);
            let t = [g.mean[0] + l00 * z0, g.mean[1] + l10 * z0 + l11 * z1];
            if inside_confidence(&g, t, 0.95).unwrap() {
                inside += 1;
            }
        }
        let frac = inside as f64 / n as f64;
        assert!((frac - 0.95).abs() < 0.005, "calibration fraction {frac}");
    }

    #[test]
    fn eigenvalues_reference_cases() {
        let g = Gauss2::new([0.0, 0.0], 1.0, 1.0, 0.0).unwrap();
        assert_eq!(eigenvalues(&g), (1.0, 1.0));
        let g = Gauss2::new([0.0, 0.0], 2.0, 1.0, 0.0).unwrap();
        let (l1, l2) = eigenvalues(&g);
        assert_abs_diff_eq!(l1, 4.0, epsilon = 1e-12);
        assert_abs_diff_eq!(l2, 1.0, epsilon = 1e-12);
        // Closed form (1 +- rho) for unit sigmas.
        let g = Gauss2::new([0.0, 0.0], 1.0, 1.0, 0.8).unwrap();
        let (l1, l2) = eigenvalues(&g);
        assert_abs_diff_eq!(l1, 1.8, epsilon = 1e-12);
        assert_abs_diff_eq!(l2, 0.2, epsilon = 1e-12);
    }

    #[test]
    fn avg_ucty_reference_cases() {
        let means = Array3::zeros((2, 2, 2));
        let mut sc = UncertainScene::zero_cov(means);
        sc.sx.fill(1.0);
        sc.sy.fill(1.0);
        let mask = Array2::<u8>::zeros((2, 2));
        assert_abs_diff_eq!(avg_ucty(&sc, &mask).unwrap(), 1.0, epsilon = 1e-12);

        // Half of the states sigma=1 isotropic, half sigma=3 isotropic.
        sc.sx[(0, 0)] = 3.0;
        sc.sy[(0, 0)] = 3.0;
        sc.sx[(0, 1)] = 3.0;
        sc.sy[(0, 1)] = 3.0;
        assert_abs_diff_eq!(avg_ucty(&sc, &mask).unwrap(), 2.0, epsilon = 1e-12);
    }

    #[test]
    fn avg_ucty_requires_unobserved_states() {
        let sc = UncertainScene::zero_cov(Array3::zeros((2, 2, 2)));
        let mask = Array2::<u8>::ones((2, 2));
        assert!(matches!(avg_ucty(&sc, &mask), Err(Error::UndefinedInput(_))));
    }

    #[test]
    fn avg_ucty_matches_per_state_loop() {
        let mut rng = crate::rng::substream(9, "ucty-loop");
        let (t, n) = (5, 4);
        let mut sc = UncertainScene::zero_cov(Array3::zeros((t, n, 2)));
        let mut mask = Array2::<u8>::zeros((t, n));
        for ti in 0..t {
            for ni in 0..n {
                sc.sx[(ti, ni)] = 0.1 + rng.gen::<f64>();
                sc.sy[(ti, ni)] = 0.1 + rng.gen::<f64>();
                sc.rho[(ti, ni)] = rng.gen::<f64>() - 0.5;
                mask[(ti, ni)] = u8::from(rng.gen::<f64>() < 0.4);
            }
        }
        let mut acc = 0.0;
        let mut cnt = 0;
        for ti in 0..t {
            for ni in 0..n {
                if mask[(ti, ni)] == 0 {
                    let (l1, l2) = sc.cov(ti, ni).eigenvalues();
                    acc += 0.5 * (l1.sqrt() + l2.sqrt());
                    cnt += 1;
                }
            }
        }
        assert_abs_diff_eq!(avg_ucty(&sc, &mask).unwrap(), acc / cnt as f64, epsilon = 1e-12);
    }

    #[test]
    fn nll_rotation_invariance() {
        // Rotating mean, target and covariance together leaves NLL fixed.
        let mut rng = crate::rng::substream(6, "nll-rot");
        for _ in 0..100 {
            let g = Gauss2::new(
                [rng.sample::<f64, _>(StandardNormal), rng.sample(StandardNormal)],
                0.3 + rng.gen::<f64>(),
                0.3 + rng.gen::<f64>(),
                1.6 * rng.gen::<f64>() - 0.8,
            )
            .unwrap();
            let target = [rng.sample::<f64, _>(StandardNormal), rng.sample(StandardNormal)];
            let base = nll(&g, target).unwrap();

            let th = rng.gen::<f64>() * std::f64::consts::TAU;
            let (c, s) = (th.cos(), th.sin());
            let rot = |v: [f64; 2]| [c * v[0] - s * v[1], s * v[0] + c * v[1]];
            let m = g.cov.matrix();
            // R M R'
            let rm = [
                [c * m[0][0] - s * m[1][0], c * m[0][1] - s * m[1][1]],
                [s * m[0][0] + c * m[1][0], s * m[0][1] + c * m[1][1]],
            ];
            let rmr = [
                [rm[0][0] * c - rm[0][1] * s, rm[0][0] * s + rm[0][1] * c],
                [rm[1][0] * c - rm[1][1] * s, rm[1][0] * s + rm[1][1] * c],
            ];
            let cov = CovParams::from_matrix(rmr[0][0], rmr[0][1], rmr[1][1]).unwrap();
            let g2 = Gauss2 { mean: rot(g.mean), cov };
            let rotated = nll(&g2, rot(target)).unwrap();
            assert_abs_diff_eq!(base, rotated, epsilon = 1e-9);
        }
    }

    proptest! {
        #[test]
        fn prop_eigenvalues_positive_inside_box(
            sx in 1e-3f64..10.0,
            sy in 1e-3f64..10.0,
            rho in -0.999f64..0.999,
        ) {
            let (l1, l2) = CovParams { sx, sy, rho }.eigenvalues();
            prop_assert!(l1 >= l2);
            prop_assert!(l2 > 0.0);
            let trace = sx * sx + sy * sy;
            let det = sx * sx * sy * sy * (1.0 - rho * rho);
            prop_assert!((l1 + l2 - trace).abs() < 1e-10 * trace.max(1.0));
            prop_assert!((l1 * l2 - det).abs() < 1e-10 * det.max(1.0));
        }

        #[test]
        fn prop_nll_monotone_in_residual(scale in 0.1f64..5.0, d0 in 0.0f64..3.0, extra in 0.01f64..3.0) {
            // Shrinking the residual toward the mean lowers the NLL.
            let g = Gauss2::new([0.0, 0.0], scale, scale * 0.7, 0.3).unwrap();
            let dir = [0.6, -0.8];
            let near = nll(&g, [dir[0] * d0, dir[1] * d0]).unwrap();
            let far = nll(&g, [dir[0] * (d0 + extra), dir[1] * (d0 + extra)]).unwrap();
            prop_assert!(far > near);
        }
    }
}
