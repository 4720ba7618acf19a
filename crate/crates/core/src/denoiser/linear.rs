//! Per-step affine denoiser: `eps_mu = A_s x + b_s` per state, with a
//! per-step covariance head. The smallest trainable model in the crate;
//! its learned slope is directly comparable to the closed-form optimal
//! slope on Gaussian data. States never interact, so the reverse-mode
//! Jacobian equals the literal per-state partial `A_s`.

use ndarray::{Array2, Array3, ArrayViewD, ArrayViewMutD};
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{sigmoid, ParamTensors};
use crate::scene::CondScene;

use super::{reverse_mode_jacobian, Denoiser, DenoiserOutput, DenoiserQuery, ModelOutputCore, TrainableModel};

/// Per-step affine model. Rows of `a` hold `[a00, a01, a10, a11]` of the
/// 2x2 slope at step `s` (row `s - 1`); `cov_raw` holds the pre-activation
/// covariance parameters `(sx, sy, rho)` per step.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearDenoiser {
    pub a: Array2<f64>,
    pub b: Array2<f64>,
    pub cov_raw: Array2<f64>,
    pub bivariate: bool,
}

pub struct LinearCache {
    x: Array3<f64>,
    s: usize,
}

impl LinearDenoiser {
    pub fn init(rng: &mut impl Rng, s_max: usize, bivariate: bool) -> Self {
        let a = Array2::from_shape_fn((s_max, 4), |_| 0.1 * rng.gen::<f64>());
        Self { a, b: Array2::zeros((s_max, 2)), cov_raw: Array2::zeros((s_max, 3)), bivariate }
    }

    pub fn zeros(s_max: usize, bivariate: bool) -> Self {
        Self {
            a: Array2::zeros((s_max, 4)),
            b: Array2::zeros((s_max, 2)),
            cov_raw: Array2::zeros((s_max, 3)),
            bivariate,
        }
    }

    /// The 2x2 slope at step `s`.
    pub fn slope(&self, s: usize) -> [[f64; 2]; 2] {
        let r = self.a.row(s - 1);
        [[r[0], r[1]], [r[2], r[3]]]
    }

    fn cov_at(&self, s: usize) -> (f64, f64, f64) {
        let r = self.cov_raw.row(s - 1);
        let rho = if self.bivariate { r[2].tanh() } else { 0.0 };
        (sigmoid(r[0]), sigmoid(r[1]), rho)
    }
}

impl TrainableModel for LinearDenoiser {
    type Cache = LinearCache;

    fn forward_cached(&self, x_s: &Array3<f64>, s: usize, _cond: &CondScene) -> Result<(ModelOutputCore, LinearCache)> {
        if s < 1 || s > self.a.nrows() {
            return Err(Error::Param(format!("step {s} out of 1..={}", self.a.nrows())));
        }
        let (t, n, d) = x_s.dim();
        if d != 2 {
            return Err(Error::Shape(format!("expected (T, N, 2), got last dim {d}")));
        }
        let m = self.slope(s);
        let bias = self.b.row(s - 1);
        let mut eps_mu = Array3::zeros((t, n, 2));
        for ti in 0..t {
            for ni in 0..n {
                let x = [x_s[(ti, ni, 0)], x_s[(ti, ni, 1)]];
                eps_mu[(ti, ni, 0)] = m[0][0] * x[0] + m[0][1] * x[1] + bias[0];
                eps_mu[(ti, ni, 1)] = m[1][0] * x[0] + m[1][1] * x[1] + bias[1];
            }
        }
        let (sx, sy, rho) = self.cov_at(s);
        let core = ModelOutputCore {
            eps_mu,
            cov_sx: Array2::from_elem((t, n), sx),
            cov_sy: Array2::from_elem((t, n), sy),
            cov_rho: Array2::from_elem((t, n), rho),
        };
        Ok((core, LinearCache { x: x_s.clone(), s }))
    }

    fn backward(
        &self,
        cache: &LinearCache,
        d_mu: &Array3<f64>,
        d_sx: &Array2<f64>,
        d_sy: &Array2<f64>,
        d_rho: &Array2<f64>,
        grads: Option<&mut Self>,
    ) -> Array3<f64> {
        let (t, n, _) = cache.x.dim();
        let s = cache.s;
        let m = self.slope(s);
        if let Some(g) = grads {
            let mut ga = [0.0f64; 4];
            let mut gb = [0.0f64; 2];
            for ti in 0..t {
                for ni in 0..n {
                    let x = [cache.x[(ti, ni, 0)], cache.x[(ti, ni, 1)]];
                    let gm = [d_mu[(ti, ni, 0)], d_mu[(ti, ni, 1)]];
                    ga[0] += gm[0] * x[0];
                    ga[1] += gm[0] * x[1];
                    ga[2] += gm[1] * x[0];
                    ga[3] += gm[1] * x[1];
                    gb[0] += gm[0];
                    gb[1] += gm[1];
                }
            }
            for (i, v) in ga.iter().enumerate() {
                g.a[(s - 1, i)] += v;
            }
            g.b[(s - 1, 0)] += gb[0];
            g.b[(s - 1, 1)] += gb[1];

            let raw = self.cov_raw.row(s - 1);
            let (sx, sy) = (sigmoid(raw[0]), sigmoid(raw[1]));
            let rho = raw[2].tanh();
            g.cov_raw[(s - 1, 0)] += d_sx.sum() * sx * (1.0 - sx);
            g.cov_raw[(s - 1, 1)] += d_sy.sum() * sy * (1.0 - sy);
            if self.bivariate {
                g.cov_raw[(s - 1, 2)] += d_rho.sum() * (1.0 - rho * rho);
            }
        }
        let mut gx = Array3::zeros((t, n, 2));
        for ti in 0..t {
            for ni in 0..n {
                let gm = [d_mu[(ti, ni, 0)], d_mu[(ti, ni, 1)]];
                gx[(ti, ni, 0)] = m[0][0] * gm[0] + m[1][0] * gm[1];
                gx[(ti, ni, 1)] = m[0][1] * gm[0] + m[1][1] * gm[1];
            }
        }
        gx
    }

    fn step_count(&self) -> usize {
        self.a.nrows()
    }
}

impl ParamTensors for LinearDenoiser {
    fn for_each<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewD<'a, f64>)) {
        f(format!("{prefix}.a"), self.a.view().into_dyn());
        f(format!("{prefix}.b"), self.b.view().into_dyn());
        f(format!("{prefix}.cov_raw"), self.cov_raw.view().into_dyn());
    }
    fn for_each_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewMutD<'a, f64>)) {
        f(format!("{prefix}.a"), self.a.view_mut().into_dyn());
        f(format!("{prefix}.b"), self.b.view_mut().into_dyn());
        f(format!("{prefix}.cov_raw"), self.cov_raw.view_mut().into_dyn());
    }
}

impl Denoiser for LinearDenoiser {
    fn evaluate(&self, q: &DenoiserQuery) -> Result<DenoiserOutput> {
        let (core, cache) = self.forward_cached(q.x_s, q.s, q.cond)?;
        let (t, n, _) = q.x_s.dim();
        let (jac_diag, jac_full) = reverse_mode_jacobian(self, &cache, (t, n), q.jacobian_mode);
        let out = DenoiserOutput {
            eps_mu: core.eps_mu,
            cov_sx: core.cov_sx,
            cov_sy: core.cov_sy,
            cov_rho: core.cov_rho,
            jac_diag,
            jac_full,
        };
        out.validate_against(q.x_s, q.jacobian_mode)?;
        Ok(out)
    }

    fn step_count(&self) -> usize {
        self.a.nrows()
    }
}
